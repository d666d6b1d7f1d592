#include "flowpolicy/envs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace flowpolicy {

TaskId task_from_name(const std::string& name) {
    if (name == "lift_ball") return TaskId::LiftBall;
    if (name == "handover") return TaskId::Handover;
    if (name == "push_buttons") return TaskId::PushButtons;
    throw ValidationError("unknown task " + name);
}

std::string task_name(TaskId id) {
    switch (id) {
        case TaskId::LiftBall: return "lift_ball";
        case TaskId::Handover: return "handover";
        case TaskId::PushButtons: return "push_buttons";
    }
    return "?";
}

int TaskSpec::instruction_id() const {
    switch (task) {
        case TaskId::LiftBall: return 0;
        case TaskId::Handover: return 1;
        case TaskId::PushButtons: return 2 + variation;
    }
    return 0;
}

std::array<int, 2> TaskSpec::instructed_buttons() const {
    switch (variation) {
        case 0: return {0, 1};
        case 1: return {0, 2};
        default: return {1, 2};
    }
}

double SceneObject::bounding_radius() const {
    if (kind == Kind::Sphere) return radius;
    return half_extent.norm();
}

const SceneObject* WorldState::find_ball() const {
    for (const auto& o : objects)
        if (o.kind == SceneObject::Kind::Sphere && o.graspable) return &o;
    return nullptr;
}

Action effector_action(const Effector& e) {
    Action a;
    a.loc = e.loc;
    a.rot = matrix_to_rot6d(e.rot);
    a.open = e.open ? 1.0 : 0.0;
    return a;
}

// ---------------------------------------------------------------------------
// Cameras and rendering
// ---------------------------------------------------------------------------

namespace {

CameraModel make_camera(int size, const Vec3& pos, const Vec3& target) {
    CameraModel cam;
    cam.width = size;
    cam.height = size;
    cam.fx = cam.fy = size * 44.0 / 48.0;
    cam.cx = (size - 1) * 0.5;
    cam.cy = (size - 1) * 0.5;
    Vec3 fwd = (target - pos).normalized();
    Vec3 down{0, 0, -1};
    Vec3 x = down.cross(fwd).normalized();
    Vec3 y = fwd.cross(x);
    cam.extrinsics.rotation = Mat3::from_columns(x, y, fwd);
    cam.extrinsics.translation = pos;
    cam.validate();
    return cam;
}

struct Hit {
    double t = std::numeric_limits<double>::infinity();
    std::array<std::uint8_t, 3> color{0, 0, 0};
};

void intersect_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r,
                      const std::array<std::uint8_t, 3>& color, Hit& hit) {
    Vec3 oc = o - c;
    double a = d.dot(d), b = 2.0 * oc.dot(d), cc = oc.dot(oc) - r * r;
    double disc = b * b - 4 * a * cc;
    if (disc < 0) return;
    double t = (-b - std::sqrt(disc)) / (2 * a);
    if (t > 1e-6 && t < hit.t) hit = {t, color};
}

void intersect_box(const Vec3& o, const Vec3& d, const Vec3& c, const Vec3& h,
                   const std::array<std::uint8_t, 3>& color, Hit& hit) {
    double t0 = 1e-6, t1 = hit.t;
    const double oo[3] = {o.x - c.x, o.y - c.y, o.z - c.z};
    const double dd[3] = {d.x, d.y, d.z};
    const double hh[3] = {h.x, h.y, h.z};
    for (int ax = 0; ax < 3; ++ax) {
        if (std::abs(dd[ax]) < 1e-12) {
            if (std::abs(oo[ax]) > hh[ax]) return;
            continue;
        }
        double ta = (-hh[ax] - oo[ax]) / dd[ax];
        double tb = (hh[ax] - oo[ax]) / dd[ax];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return;
    }
    if (t0 < hit.t) hit = {t0, color};
}

constexpr std::array<std::uint8_t, 3> kTableColor{150, 150, 150};
constexpr std::array<std::uint8_t, 3> kLeftColor{60, 90, 220};
constexpr std::array<std::uint8_t, 3> kRightColor{235, 150, 40};
constexpr double kEffectorRadius = 0.015;

}  // namespace

CameraModel front_camera(int size) { return make_camera(size, {0.0, -0.85, 0.75}, {0.0, 0.05, 0.05}); }
CameraModel side_camera(int size) { return make_camera(size, {0.85, 0.05, 0.75}, {0.0, 0.05, 0.05}); }

void render(const WorldState& state, const CameraModel& cam, std::vector<std::uint8_t>& rgb,
            std::vector<float>& depth) {
    const int w = cam.width, h = cam.height;
    rgb.assign(std::size_t(w) * h * 3, 0);
    depth.assign(std::size_t(w) * h, 0.0f);
    const Vec3 origin = cam.extrinsics.translation;
    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
            // dir has camera-frame z = 1, so the ray parameter is the depth
            Vec3 dir_cam{(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0};
            Vec3 d = cam.extrinsics.apply_vector(dir_cam);
            Hit hit;
            if (d.z < -1e-9) {
                double t = -origin.z / d.z;
                if (t > 1e-6) hit = {t, kTableColor};
            }
            for (const auto& obj : state.objects) {
                if (obj.kind == SceneObject::Kind::Sphere)
                    intersect_sphere(origin, d, obj.pos, obj.radius, obj.color, hit);
                else
                    intersect_box(origin, d, obj.pos, obj.half_extent, obj.color, hit);
            }
            intersect_sphere(origin, d, state.effectors[0].loc, kEffectorRadius, kLeftColor, hit);
            intersect_sphere(origin, d, state.effectors[1].loc, kEffectorRadius, kRightColor, hit);
            if (std::isfinite(hit.t)) {
                std::size_t px = std::size_t(v) * w + u;
                depth[px] = float(hit.t);
                rgb[px * 3 + 0] = hit.color[0];
                rgb[px * 3 + 1] = hit.color[1];
                rgb[px * 3 + 2] = hit.color[2];
            }
        }
    }
}

EnvObservation observe(const WorldState& state, const EnvConfig& cfg) {
    EnvObservation obs;
    std::vector<CameraModel> cams{front_camera(cfg.image_size)};
    if (cfg.num_cameras > 1) cams.push_back(side_camera(cfg.image_size));
    for (const CameraModel& cam : cams) {
        CameraFrame f;
        f.cam = cam;
        render(state, cam, f.rgb, f.depth);
        obs.cameras.push_back(std::move(f));
    }
    obs.proprio = {effector_action(state.effectors[0]), effector_action(state.effectors[1])};
    return obs;
}

// ---------------------------------------------------------------------------
// Reset
// ---------------------------------------------------------------------------

WorldState env_reset(const TaskSpec& spec, std::uint64_t seed) {
    Rng rng(derive_seed({kStreamEpisode, seed, std::uint64_t(spec.instruction_id())}));
    WorldState s;
    s.task = spec;
    s.effectors[0] = {{-0.25, -0.30, 0.30}, Mat3::identity(), true};
    s.effectors[1] = {{0.25, -0.30, 0.30}, Mat3::identity(), true};

    switch (spec.task) {
        case TaskId::LiftBall: {
            SceneObject ball;
            ball.kind = SceneObject::Kind::Sphere;
            ball.radius = 0.06;
            ball.pos = {rng.uniform(-0.20, 0.20), rng.uniform(-0.10, 0.20), ball.radius};
            ball.color = {210, 40, 40};
            ball.graspable = true;
            s.objects.push_back(ball);
            break;
        }
        case TaskId::Handover: {
            SceneObject cube;
            cube.kind = SceneObject::Kind::Box;
            cube.half_extent = {0.02, 0.02, 0.02};
            cube.pos = {rng.uniform(-0.40, -0.15), rng.uniform(-0.10, 0.20), 0.02};
            cube.color = {40, 180, 210};
            cube.graspable = true;
            s.objects.push_back(cube);
            SceneObject goal;
            goal.kind = SceneObject::Kind::Box;
            goal.half_extent = {0.08, 0.08, 0.002};
            goal.pos = {0.35, 0.05, 0.002};
            goal.color = {40, 140, 40};
            s.objects.push_back(goal);
            break;
        }
        case TaskId::PushButtons: {
            const std::array<std::array<std::uint8_t, 3>, 3> colors{
                {{200, 35, 35}, {35, 185, 35}, {40, 70, 210}}};
            double row_y = rng.uniform(0.00, 0.25);
            for (int b = 0; b < 3; ++b) {
                SceneObject btn;
                btn.kind = SceneObject::Kind::Box;
                btn.half_extent = {0.025, 0.025, 0.012};
                btn.pos = {-0.26 + 0.26 * b + rng.uniform(-0.04, 0.04),
                           row_y + rng.uniform(-0.05, 0.05), 0.012};
                btn.color = colors[b];
                btn.is_button = true;
                s.objects.push_back(btn);
            }
            break;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Step
// ---------------------------------------------------------------------------

namespace {

Vec3 clamp_workspace(Vec3 p) {
    p.x = std::clamp(p.x, -kWorkspaceHalf, kWorkspaceHalf);
    p.y = std::clamp(p.y, -kWorkspaceHalf, kWorkspaceHalf);
    p.z = std::clamp(p.z, 0.0, 1.0);
    return p;
}

bool ball_contact(const Effector& e, const SceneObject& ball) {
    return std::abs((e.loc - ball.pos).norm() - ball.radius) <= kGraspMargin;
}

}  // namespace

bool ball_held(const WorldState& s) {
    const SceneObject* ball = s.find_ball();
    if (!ball) return false;
    if (!ball_contact(s.effectors[0], *ball) || !ball_contact(s.effectors[1], *ball))
        return false;
    Vec3 u0 = (s.effectors[0].loc - ball->pos).normalized();
    Vec3 u1 = (s.effectors[1].loc - ball->pos).normalized();
    return u0.dot(u1) < -0.3;  // roughly opposite hemispheres
}

void env_step(WorldState& s, const std::array<Action, 2>& command) {
    const bool held_before = s.task.task == TaskId::LiftBall && ball_held(s);

    std::array<Vec3, 2> deltas;
    for (int a = 0; a < 2; ++a) {
        Effector& e = s.effectors[a];
        Vec3 want = command[a].loc;
        if (!std::isfinite(want.x) || !std::isfinite(want.y) || !std::isfinite(want.z))
            want = e.loc;
        Vec3 d = want - e.loc;
        double n = d.norm();
        if (n > kVelocityCap) d = d * (kVelocityCap / n);
        Vec3 next = clamp_workspace(e.loc + d);
        deltas[a] = next - e.loc;
        e.loc = next;
        try {
            e.rot = rot6d_to_matrix(command[a].rot);
        } catch (const DegenerateRotation&) {
            // infeasible rotation command: keep the previous orientation
        }
    }

    // releases first, then grasps, so a same-step swap hands the object over
    std::array<bool, 2> want_open{command[0].open > 0.5, command[1].open > 0.5};
    for (int a = 0; a < 2; ++a) {
        if (want_open[a] && !s.effectors[a].open) {
            for (auto& o : s.objects)
                if (o.attached_to == a) o.attached_to = -1;
        }
    }
    for (int a = 0; a < 2; ++a) {
        if (!want_open[a] && s.effectors[a].open) {
            const SceneObject* ball = s.find_ball();
            SceneObject* best = nullptr;
            double best_d = std::numeric_limits<double>::infinity();
            for (auto& o : s.objects) {
                if (!o.graspable || o.attached_to != -1) continue;
                if (&o == ball) continue;  // the ball needs the two-arm hold
                double d = (o.pos - s.effectors[a].loc).norm();
                if (d <= o.bounding_radius() + kGraspMargin && d < best_d) {
                    best_d = d;
                    best = &o;
                }
            }
            if (best) {
                best->attached_to = a;
                s.has_held[a] = true;
            }
        }
        s.effectors[a].open = want_open[a];
    }

    for (auto& o : s.objects)
        if (o.attached_to >= 0) o.pos += deltas[o.attached_to];

    if (held_before) {
        for (auto& o : s.objects)
            if (o.kind == SceneObject::Kind::Sphere && o.graspable)
                o.pos += (deltas[0] + deltas[1]) * 0.5;
    }

    for (auto& o : s.objects) {
        if (!o.is_button || o.latched) continue;
        double top = o.pos.z + o.half_extent.z;
        for (int a = 0; a < 2; ++a) {
            const Vec3& e = s.effectors[a].loc;
            if (std::abs(e.x - o.pos.x) <= o.half_extent.x &&
                std::abs(e.y - o.pos.y) <= o.half_extent.y && e.z >= top &&
                e.z - top <= kButtonPressHeight)
                o.latched = true;
        }
    }

    ++s.step_count;
}

bool task_success(const WorldState& s) {
    switch (s.task.task) {
        case TaskId::LiftBall: {
            const SceneObject* ball = s.find_ball();
            return ball && ball->pos.z > kBallLiftHeight && ball_held(s);
        }
        case TaskId::Handover: {
            const SceneObject* cube = nullptr;
            const SceneObject* goal = nullptr;
            for (const auto& o : s.objects) {
                if (o.graspable) cube = &o;
                else if (o.kind == SceneObject::Kind::Box) goal = &o;
            }
            if (!cube || !goal) return false;
            bool in_zone = std::abs(cube->pos.x - goal->pos.x) <= goal->half_extent.x &&
                           std::abs(cube->pos.y - goal->pos.y) <= goal->half_extent.y &&
                           cube->pos.z <= 0.15;
            return cube->attached_to == -1 && in_zone && s.has_held[0] && s.has_held[1];
        }
        case TaskId::PushButtons: {
            auto want = s.task.instructed_buttons();
            int bi = 0;
            for (const auto& o : s.objects) {
                if (!o.is_button) continue;
                bool should = bi == want[0] || bi == want[1];
                if (o.latched != should) return false;
                ++bi;
            }
            return bi == 3;
        }
    }
    return false;
}

// ---------------------------------------------------------------------------
// Scripted experts
// ---------------------------------------------------------------------------

namespace {

struct Phase {
    std::array<Vec3, 2> target;
    std::array<bool, 2> open;   // gripper state commanded from arrival onward
    int dwell = 2;
};

Vec3 jit(Rng& rng, const Vec3& p, double sigma = 0.003) {
    return {p.x + rng.normal(0, sigma), p.y + rng.normal(0, sigma), p.z + rng.normal(0, sigma)};
}

std::vector<Phase> plan_lift_ball(const WorldState& s, Rng& rng) {
    const SceneObject* ball = s.find_ball();
    if (!ball) throw UnsolvableState("no ball in scene");
    const Vec3 c = ball->pos;
    const double r = ball->radius;
    Vec3 offL{-(r + 0.001), 0, 0}, offR{r + 0.001, 0, 0};
    std::vector<Phase> plan;
    const bool holding = ball_held(s);
    if (!holding) {
        plan.push_back({{jit(rng, c + Vec3{-(r + 0.09), 0, 0.0}), jit(rng, c + Vec3{r + 0.09, 0, 0.0})},
                        {true, true}, 2});
        plan.push_back({{c + offL, c + offR}, {false, false}, 2});
    }
    Vec3 upL = (holding ? s.effectors[0].loc : c + offL);
    Vec3 upR = (holding ? s.effectors[1].loc : c + offR);
    upL.z = 0.34;
    upR.z = 0.34;
    plan.push_back({{upL, upR}, {false, false}, 3});
    return plan;
}

std::vector<Phase> plan_handover(const WorldState& s, Rng& rng) {
    const SceneObject* cube = nullptr;
    const SceneObject* goal = nullptr;
    for (const auto& o : s.objects) {
        if (o.graspable) cube = &o;
        else if (o.kind == SceneObject::Kind::Box) goal = &o;
    }
    if (!cube || !goal) throw UnsolvableState("missing handover objects");
    const Vec3 transfer{0.0, 0.05, 0.28};
    const Vec3 r_stage{0.18, 0.05, 0.28};
    const Vec3 l_rest{-0.25, -0.25, 0.28};
    std::vector<Phase> plan;

    auto right_place = [&](std::vector<Phase>& p) {
        Vec3 above{goal->pos.x, goal->pos.y, 0.13};
        Vec3 down{goal->pos.x, goal->pos.y, 0.05};
        p.push_back({{jit(rng, l_rest), jit(rng, above)}, {true, false}, 2});
        p.push_back({{l_rest, down}, {true, false}, 2});
        p.push_back({{l_rest, down}, {true, true}, 2});
        p.push_back({{l_rest, jit(rng, Vec3{goal->pos.x, goal->pos.y, 0.15})}, {true, true}, 2});
    };

    if (cube->attached_to == 1) {
        right_place(plan);
        return plan;
    }
    if (cube->attached_to == 0) {
        Vec3 grab = transfer + Vec3{0.022, 0, 0};
        plan.push_back({{transfer, jit(rng, r_stage)}, {false, true}, 2});
        plan.push_back({{transfer, grab}, {false, true}, 2});
        plan.push_back({{transfer, grab}, {true, false}, 2});  // same-step swap
        right_place(plan);
        return plan;
    }
    Vec3 above_cube{cube->pos.x, cube->pos.y, cube->pos.z + 0.10};
    Vec3 at_cube{cube->pos.x, cube->pos.y, cube->pos.z + 0.008};
    plan.push_back({{jit(rng, above_cube), jit(rng, r_stage)}, {true, true}, 2});
    plan.push_back({{at_cube, r_stage}, {false, true}, 2});
    Vec3 grab = transfer + Vec3{0.022, 0, 0};
    plan.push_back({{transfer, r_stage}, {false, true}, 2});
    plan.push_back({{transfer, grab}, {false, true}, 2});
    plan.push_back({{transfer, grab}, {true, false}, 2});
    right_place(plan);
    return plan;
}

std::vector<Phase> plan_push_buttons(const WorldState& s, Rng& rng) {
    std::vector<const SceneObject*> buttons;
    for (const auto& o : s.objects)
        if (o.is_button) buttons.push_back(&o);
    if (buttons.size() != 3) throw UnsolvableState("missing buttons");
    auto want = s.task.instructed_buttons();
    const SceneObject* first = buttons[want[0]];
    const SceneObject* second = buttons[want[1]];
    // lower-x button goes to the left arm
    const SceneObject* forL = first->pos.x <= second->pos.x ? first : second;
    const SceneObject* forR = forL == first ? second : first;

    auto above = [&](const SceneObject* b, double dz) {
        return Vec3{b->pos.x, b->pos.y, b->pos.z + b->half_extent.z + dz};
    };
    std::vector<Phase> plan;
    if (forL->latched && forR->latched) {
        plan.push_back({{jit(rng, above(forL, 0.12)), jit(rng, above(forR, 0.12))}, {true, true}, 2});
        return plan;
    }
    plan.push_back({{jit(rng, above(forL, 0.10)), jit(rng, above(forR, 0.10))}, {true, true}, 2});
    plan.push_back({{above(forL, 0.010), above(forR, 0.010)}, {false, false}, 2});
    plan.push_back({{jit(rng, above(forL, 0.12)), jit(rng, above(forR, 0.12))}, {true, true}, 2});
    return plan;
}

constexpr double kExpertSpeed = 0.04;

// Rolls the plan forward on a copy of the state, recording commanded actions.
EpisodeActions run_plan(WorldState state, const std::vector<Phase>& plan) {
    EpisodeActions ep;
    const Rot6D rot_identity;
    auto command = [&](const std::array<Vec3, 2>& locs, const std::array<bool, 2>& open) {
        std::array<Action, 2> cmd;
        for (int a = 0; a < 2; ++a) {
            cmd[a].loc = locs[a];
            cmd[a].rot = rot_identity;
            cmd[a].open = open[a] ? 1.0 : 0.0;
            ep.arms[a].push_back(cmd[a]);
        }
        env_step(state, cmd);
    };

    std::array<bool, 2> open{state.effectors[0].open, state.effectors[1].open};
    for (const Phase& ph : plan) {
        // travel with the previous gripper state
        for (int guard = 0; guard < 200; ++guard) {
            std::array<Vec3, 2> next;
            bool arrived = true;
            for (int a = 0; a < 2; ++a) {
                Vec3 d = ph.target[a] - state.effectors[a].loc;
                double n = d.norm();
                if (n > 1e-9) arrived = false;
                next[a] = n <= kExpertSpeed ? ph.target[a]
                                            : state.effectors[a].loc + d * (kExpertSpeed / n);
            }
            if (arrived) break;
            command(next, open);
        }
        // arrival: apply the phase gripper state, then dwell in place
        open = ph.open;
        for (int d = 0; d < std::max(1, ph.dwell); ++d) command(ph.target, open);
    }
    for (int a = 0; a < 2; ++a) ep.velocity[a] = velocity_magnitudes(ep.arms[a]);

    if (!task_success(state)) throw UnsolvableState("expert rollout did not succeed");
    return ep;
}

}  // namespace

EpisodeActions expert(const WorldState& state, std::uint64_t jitter_seed) {
    Rng rng(derive_seed({kStreamExpert, jitter_seed}));
    std::vector<Phase> plan;
    switch (state.task.task) {
        case TaskId::LiftBall: plan = plan_lift_ball(state, rng); break;
        case TaskId::Handover: plan = plan_handover(state, rng); break;
        case TaskId::PushButtons: plan = plan_push_buttons(state, rng); break;
    }
    return run_plan(state, plan);
}

}  // namespace flowpolicy
