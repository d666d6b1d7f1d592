#include "flowpolicy/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace flowpolicy {

Mat3 axis_angle_to_matrix(const Vec3& axis, double angle) {
    Vec3 u = axis.normalized();
    double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    Mat3 r;
    r.m = {c + u.x * u.x * t,      u.x * u.y * t - u.z * s, u.x * u.z * t + u.y * s,
           u.y * u.x * t + u.z * s, c + u.y * u.y * t,      u.y * u.z * t - u.x * s,
           u.z * u.x * t - u.y * s, u.z * u.y * t + u.x * s, c + u.z * u.z * t};
    return r;
}

Vec3 rotation_log(const Mat3& r) {
    double tr = r(0, 0) + r(1, 1) + r(2, 2);
    double cos_a = std::clamp((tr - 1.0) * 0.5, -1.0, 1.0);
    double angle = std::acos(cos_a);
    if (angle < 1e-9) return {0, 0, 0};
    if (angle > 3.14159265358979 - 1e-5) {
        // Near pi the antisymmetric part vanishes; recover axis from R + I.
        Vec3 axis;
        double xx = (r(0, 0) + 1) * 0.5, yy = (r(1, 1) + 1) * 0.5, zz = (r(2, 2) + 1) * 0.5;
        if (xx >= yy && xx >= zz) {
            axis = {std::sqrt(std::max(xx, 0.0)), r(0, 1) / (2 * std::sqrt(std::max(xx, 1e-12))),
                    r(0, 2) / (2 * std::sqrt(std::max(xx, 1e-12)))};
        } else if (yy >= zz) {
            axis = {r(1, 0) / (2 * std::sqrt(std::max(yy, 1e-12))), std::sqrt(std::max(yy, 0.0)),
                    r(1, 2) / (2 * std::sqrt(std::max(yy, 1e-12)))};
        } else {
            axis = {r(2, 0) / (2 * std::sqrt(std::max(zz, 1e-12))),
                    r(2, 1) / (2 * std::sqrt(std::max(zz, 1e-12))), std::sqrt(std::max(zz, 0.0))};
        }
        return axis.normalized() * angle;
    }
    double k = angle / (2.0 * std::sin(angle));
    return {k * (r(2, 1) - r(1, 2)), k * (r(0, 2) - r(2, 0)), k * (r(1, 0) - r(0, 1))};
}

Mat3 rotation_slerp(const Mat3& a, const Mat3& b, double t) {
    Vec3 w = rotation_log(a.transposed() * b);
    double angle = w.norm();
    if (angle < 1e-12) return a;
    return a * axis_angle_to_matrix(w / angle, angle * t);
}

Mat3 rot6d_to_matrix(const Rot6D& r) {
    constexpr double kEps = 1e-8;
    double n1 = r.a1.norm();
    if (!(n1 > kEps) || !std::isfinite(n1))
        throw DegenerateRotation("first column norm " + std::to_string(n1));
    Vec3 e1 = r.a1 / n1;
    Vec3 u2 = r.a2 - e1 * r.a2.dot(e1);
    double n2 = u2.norm();
    if (!(n2 > kEps * std::max(1.0, r.a2.norm())) || !std::isfinite(n2))
        throw DegenerateRotation("second column parallel to first");
    Vec3 e2 = u2 / n2;
    Vec3 e3 = e1.cross(e2);
    return Mat3::from_columns(e1, e2, e3);
}

Rot6D matrix_to_rot6d(const Mat3& rot) {
    constexpr double kTol = 1e-4;
    Mat3 gram = rot.transposed() * rot;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double want = (i == j) ? 1.0 : 0.0;
            if (std::abs(gram(i, j) - want) > kTol)
                throw NotARotation("columns not orthonormal");
        }
    if (rot.det() < 0) throw NotARotation("determinant is negative");
    return {rot.col(0), rot.col(1)};
}

void CameraModel::validate() const {
    if (!(fx > 0) || !(fy > 0)) throw ValidationError("camera focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ValidationError("camera resolution must be positive");
    Mat3 gram = extrinsics.rotation.transposed() * extrinsics.rotation;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double want = (i == j) ? 1.0 : 0.0;
            if (std::abs(gram(i, j) - want) > 1e-6)
                throw ValidationError("camera extrinsics rotation not orthonormal");
        }
    if (extrinsics.rotation.det() < 0) throw ValidationError("camera extrinsics is a reflection");
}

PointCloud unproject(const std::vector<float>& depth, const CameraModel& cam,
                     const std::uint8_t* mask) {
    cam.validate();
    if (int(depth.size()) != cam.width * cam.height)
        throw ValidationError("depth buffer size does not match camera resolution");
    PointCloud out;
    out.points.reserve(depth.size());
    out.pixel_indices.reserve(depth.size());
    for (int v = 0; v < cam.height; ++v) {
        for (int u = 0; u < cam.width; ++u) {
            int idx = v * cam.width + u;
            double d = depth[idx];
            if (!(d > 0) || !std::isfinite(d)) continue;
            if (mask && mask[idx] == 0) continue;
            Vec3 p_cam{(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d};
            out.points.push_back(cam.extrinsics.apply(p_cam));
            out.pixel_indices.push_back(idx);
        }
    }
    return out;
}

std::array<double, kActionDims> action_values(const Action& a) {
    return {a.loc.x, a.loc.y, a.loc.z, a.rot.a1.x, a.rot.a1.y, a.rot.a1.z,
            a.rot.a2.x, a.rot.a2.y, a.rot.a2.z};
}

Action action_from_values(const std::array<double, kActionDims>& v, double open) {
    Action a;
    a.loc = {v[0], v[1], v[2]};
    a.rot.a1 = {v[3], v[4], v[5]};
    a.rot.a2 = {v[6], v[7], v[8]};
    a.open = open;
    return a;
}

NormStats compute_norm_stats(const std::vector<EpisodeArmActions>& episodes) {
    if (episodes.empty()) throw EmptyDataset("no episodes");
    std::array<std::array<double, kActionDims>, kNumArms> lo{}, hi{};
    std::array<bool, kNumArms> seen{false, false};
    for (auto& arr : lo) arr.fill(1e300);
    for (auto& arr : hi) arr.fill(-1e300);
    for (const auto& ep : episodes) {
        for (int arm = 0; arm < kNumArms; ++arm) {
            for (const Action& a : ep[arm]) {
                seen[arm] = true;
                auto v = action_values(a);
                for (int d = 0; d < kActionDims; ++d) {
                    lo[arm][d] = std::min(lo[arm][d], v[d]);
                    hi[arm][d] = std::max(hi[arm][d], v[d]);
                }
            }
        }
    }
    if (!seen[0] || !seen[1]) throw EmptyDataset("an arm has no actions");
    NormStats s;
    for (int arm = 0; arm < kNumArms; ++arm) {
        for (int d = 0; d < kActionDims; ++d) {
            double floor = (d < 3) ? NormStats::kLocFloor : NormStats::kRotFloor;
            s.center[arm][d] = 0.5 * (lo[arm][d] + hi[arm][d]);
            // 5% margin keeps normalized data inside [-0.952, 0.952]
            s.half_range[arm][d] = std::max(1.05 * 0.5 * (hi[arm][d] - lo[arm][d]), floor);
        }
    }
    return s;
}

namespace {

Action map_action(const Action& a, const NormStats& s, Arm arm, bool to_normalized) {
    auto v = action_values(a);
    for (int d = 0; d < kActionDims; ++d)
        v[d] = to_normalized ? normalize_dim(v[d], s, arm, d) : denormalize_dim(v[d], s, arm, d);
    return action_from_values(v, a.open);
}

}  // namespace

Action normalize_action(const Action& a, const NormStats& s, Arm arm) {
    return map_action(a, s, arm, true);
}

Action denormalize_action(const Action& a, const NormStats& s, Arm arm) {
    return map_action(a, s, arm, false);
}

Trajectory normalize_trajectory(const Trajectory& t, const NormStats& s) {
    if (t.frame != Frame::Global)
        throw FrameMismatch("normalize expects a global-frame trajectory");
    Trajectory out = t;
    out.frame = Frame::ArmNormalized;
    for (Action& a : out.steps) a = normalize_action(a, s, t.arm);
    return out;
}

Trajectory denormalize_trajectory(const Trajectory& t, const NormStats& s) {
    if (t.frame != Frame::ArmNormalized)
        throw FrameMismatch("denormalize expects an arm-normalized trajectory");
    Trajectory out = t;
    out.frame = Frame::Global;
    for (Action& a : out.steps) a = denormalize_action(a, s, t.arm);
    return out;
}

}  // namespace flowpolicy
