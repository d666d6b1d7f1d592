#pragma once

#include <array>
#include <string>
#include <vector>

#include "flowpolicy/geometry.hpp"
#include "flowpolicy/keypose.hpp"

namespace flowpolicy {

enum class TaskId { LiftBall, Handover, PushButtons };

TaskId task_from_name(const std::string& name);
std::string task_name(TaskId id);

// Instruction vocabulary: lift_ball=0, handover=1, push_buttons variations
// 2..4 (pairs 01, 02, 12). Stand-in for language tokens.
inline constexpr int kTaskVocabulary = 5;

struct TaskSpec {
    TaskId task = TaskId::LiftBall;
    int variation = 0;  // PushButtons: 0->(0,1), 1->(0,2), 2->(1,2)
    int horizon_budget = 400;

    int instruction_id() const;
    std::array<int, 2> instructed_buttons() const;
};

struct SceneObject {
    enum class Kind { Sphere, Box };
    Kind kind = Kind::Sphere;
    Vec3 pos;
    double radius = 0;   // spheres
    Vec3 half_extent;    // boxes
    std::array<std::uint8_t, 3> color{200, 200, 200};
    bool graspable = false;
    bool is_button = false;
    bool latched = false;
    int attached_to = -1;  // effector index, -1 when free

    double bounding_radius() const;
};

struct Effector {
    Vec3 loc;
    Mat3 rot;
    bool open = true;
};

// Workspace: x,y in [-0.5, 0.5], z in [0, 1]. Table plane at z = 0.
inline constexpr double kWorkspaceHalf = 0.5;
inline constexpr double kVelocityCap = 0.05;   // m per step
inline constexpr double kGraspMargin = 0.02;   // m beyond the bounding radius
inline constexpr double kButtonPressHeight = 0.015;
inline constexpr double kBallLiftHeight = 0.25;

struct WorldState {
    TaskSpec task;
    std::array<Effector, 2> effectors;
    std::vector<SceneObject> objects;
    int step_count = 0;
    // Handover bookkeeping: possession history per arm.
    std::array<bool, 2> has_held{false, false};

    const SceneObject* find_ball() const;
};

struct EnvConfig {
    int image_size = 48;
    int num_cameras = 1;  // front mandatory, optional second (right side)
};

struct CameraFrame {
    std::vector<std::uint8_t> rgb;  // H*W*3
    std::vector<float> depth;       // H*W, meters (camera-frame z)
    CameraModel cam;
};

struct EnvObservation {
    std::vector<CameraFrame> cameras;
    std::array<Action, 2> proprio;
};

CameraModel front_camera(int image_size);
CameraModel side_camera(int image_size);

WorldState env_reset(const TaskSpec& spec, std::uint64_t seed);
EnvObservation observe(const WorldState& state, const EnvConfig& cfg);
void env_step(WorldState& state, const std::array<Action, 2>& command);
bool task_success(const WorldState& state);

// Whether the two-arm hold condition of LiftBall currently applies.
bool ball_held(const WorldState& state);

void render(const WorldState& state, const CameraModel& cam, std::vector<std::uint8_t>& rgb,
            std::vector<float>& depth);

// Dense bimanual action stream that completes the task from the given state,
// produced by a waypoint script with seeded jitter and verified against a
// simulated copy. Throws UnsolvableState when the verification rollout fails.
EpisodeActions expert(const WorldState& state, std::uint64_t jitter_seed);

Action effector_action(const Effector& e);

}  // namespace flowpolicy
