#pragma once

#include <vector>

#include "flowpolicy/geometry.hpp"

namespace flowpolicy {

// Demonstration action streams at a fixed control rate. Velocity magnitudes
// are per step (m/step); index 0 carries 0 by convention, so an episode that
// starts at rest emits no velocity keypose until it has moved.
struct EpisodeActions {
    std::array<std::vector<Action>, kNumArms> arms;
    std::array<std::vector<double>, kNumArms> velocity;

    int length() const { return int(arms[0].size()); }
    void validate() const;
};

// Computes per-step velocity magnitudes from the location stream.
std::vector<double> velocity_magnitudes(const std::vector<Action>& actions);

// A pose is a keypose when the gripper state toggles, when the velocity
// magnitude falls below vel_eps coming from above it (falling edge), or at
// the final index. Consecutive duplicates collapse.
std::vector<int> extract_keyposes_arm(const std::vector<Action>& actions,
                                      const std::vector<double>& velocity, double vel_eps);

struct KeyposeIndexSet {
    std::vector<int> indices;  // strictly increasing, includes the final index
};

KeyposeIndexSet bimanual_union(const std::vector<int>& left, const std::vector<int>& right);

KeyposeIndexSet extract_keyposes(const EpisodeActions& episode, double vel_eps = 1e-3);

// One training item: observe at a segment boundary, predict the trajectory to
// the next boundary, resampled to exactly T steps per arm.
struct TrainingItem {
    int observation_index = 0;
    int next_keypose_index = 0;
    std::array<std::vector<Action>, kNumArms> target;  // T steps, global frame
};

// Segment (k_j, k_{j+1}] resampled by fractional step index: linear in
// location, geodesic in rotation, nearest neighbor for open. The final
// resampled step equals the next keypose exactly.
std::vector<Action> resample_segment(const std::vector<Action>& actions, int seg_begin,
                                     int seg_end, int horizon);

std::vector<TrainingItem> make_training_items(const EpisodeActions& episode,
                                              const KeyposeIndexSet& keyposes, int horizon);

}  // namespace flowpolicy
