#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "flowpolicy/common.hpp"

namespace flowpolicy {

// ---------------------------------------------------------------------------
// Small fixed-size linear algebra. Row-major 3x3 matrices, column vectors.
// ---------------------------------------------------------------------------

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const { return *this / norm(); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

struct Mat3 {
    // m[r*3+c]
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return Mat3{}; }
    static Mat3 from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
        Mat3 r;
        r.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
        return r;
    }

    double operator()(int r, int c) const { return m[r * 3 + c]; }
    double& operator()(int r, int c) { return m[r * 3 + c]; }

    Vec3 col(int c) const { return {m[c], m[3 + c], m[6 + c]}; }
    Vec3 row(int r) const { return {m[r * 3], m[r * 3 + 1], m[r * 3 + 2]}; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }
    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }
    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) -
               m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
};

// Rotation about a unit axis by angle (radians), Rodrigues form.
Mat3 axis_angle_to_matrix(const Vec3& axis, double angle);

// Matrix logarithm of a rotation: axis * angle. Stable near identity and pi.
Vec3 rotation_log(const Mat3& rot);

// Geodesic interpolation between two rotations, t in [0,1].
Mat3 rotation_slerp(const Mat3& a, const Mat3& b, double t);

// Rigid transform p -> R p + t.
struct RigidTransform {
    Mat3 rotation;
    Vec3 translation;

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
    Vec3 apply_vector(const Vec3& v) const { return rotation * v; }
    RigidTransform inverse() const {
        Mat3 rt = rotation.transposed();
        return {rt, (rt * translation) * -1.0};
    }
    RigidTransform compose(const RigidTransform& inner) const {
        // (*this) after inner: p -> R_outer (R_inner p + t_inner) + t_outer
        return {rotation * inner.rotation, rotation * inner.translation + translation};
    }
};

// ---------------------------------------------------------------------------
// Action space
// ---------------------------------------------------------------------------

enum class Arm : int { Left = 0, Right = 1 };
inline constexpr int kNumArms = 2;
inline constexpr int kActionDims = 9;  // 3 loc + 6 rot; `open` handled apart

// First two columns of a rotation matrix, prior to orthonormalization.
struct Rot6D {
    Vec3 a1{1, 0, 0};
    Vec3 a2{0, 1, 0};
};

Mat3 rot6d_to_matrix(const Rot6D& r);
Rot6D matrix_to_rot6d(const Mat3& rot);

struct Action {
    Vec3 loc;
    Rot6D rot;
    double open = 1.0;  // binary {0,1}
};

enum class Frame { Global, ArmNormalized };

struct Trajectory {
    Arm arm = Arm::Left;
    std::vector<Action> steps;
    Frame frame = Frame::Global;
};

// ---------------------------------------------------------------------------
// Cameras and unprojection
// ---------------------------------------------------------------------------

struct CameraModel {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    int width = 0, height = 0;
    RigidTransform extrinsics;  // camera frame -> global frame, meters

    void validate() const;
};

struct PointCloud {
    std::vector<Vec3> points;        // global frame
    std::vector<int> pixel_indices;  // row-major v*width+u of the source pixel
};

// Depth in meters, row-major, invalid pixels encoded as 0 (dropped). The
// optional mask marks extra pixels to drop (0 = invalid).
PointCloud unproject(const std::vector<float>& depth, const CameraModel& cam,
                     const std::uint8_t* mask = nullptr);

// ---------------------------------------------------------------------------
// Per-arm normalization of the prediction space
// ---------------------------------------------------------------------------

struct NormStats {
    // [arm][dim], dim: 0..2 loc (meters), 3..8 rot components (unitless)
    std::array<std::array<double, kActionDims>, kNumArms> center{};
    std::array<std::array<double, kActionDims>, kNumArms> half_range{};

    static constexpr double kLocFloor = 1e-3;
    static constexpr double kRotFloor = 1.0;
};

using EpisodeArmActions = std::array<std::vector<Action>, kNumArms>;

NormStats compute_norm_stats(const std::vector<EpisodeArmActions>& episodes);

Action normalize_action(const Action& a, const NormStats& s, Arm arm);
Action denormalize_action(const Action& a, const NormStats& s, Arm arm);
Trajectory normalize_trajectory(const Trajectory& t, const NormStats& s);
Trajectory denormalize_trajectory(const Trajectory& t, const NormStats& s);

// Raw per-dimension affine maps used by the token pipeline.
inline double normalize_dim(double x, const NormStats& s, Arm arm, int dim) {
    return (x - s.center[int(arm)][dim]) / s.half_range[int(arm)][dim];
}
inline double denormalize_dim(double x, const NormStats& s, Arm arm, int dim) {
    return x * s.half_range[int(arm)][dim] + s.center[int(arm)][dim];
}

// Flat 9-vector view of an action (loc, rot.a1, rot.a2) used by the model.
std::array<double, kActionDims> action_values(const Action& a);
Action action_from_values(const std::array<double, kActionDims>& v, double open);

}  // namespace flowpolicy
