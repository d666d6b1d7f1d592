#include "flowpolicy/keypose.hpp"

#include <algorithm>
#include <cmath>

namespace flowpolicy {

void EpisodeActions::validate() const {
    if (arms[0].empty()) throw EmptyEpisode("no actions");
    for (int a = 0; a < kNumArms; ++a) {
        if (arms[a].size() != arms[0].size()) throw ValidationError("arm length mismatch");
        if (velocity[a].size() != arms[a].size())
            throw ValidationError("velocity length mismatch");
    }
}

std::vector<double> velocity_magnitudes(const std::vector<Action>& actions) {
    std::vector<double> v(actions.size(), 0.0);
    for (std::size_t t = 1; t < actions.size(); ++t)
        v[t] = (actions[t].loc - actions[t - 1].loc).norm();
    return v;
}

std::vector<int> extract_keyposes_arm(const std::vector<Action>& actions,
                                      const std::vector<double>& velocity, double vel_eps) {
    if (actions.size() < 2) throw EmptyEpisode("need at least 2 steps");
    if (velocity.size() != actions.size())
        throw ValidationError("velocity length mismatch");
    std::vector<int> keys;
    const int n = int(actions.size());
    for (int t = 1; t < n; ++t) {
        bool toggle = (actions[t].open > 0.5) != (actions[t - 1].open > 0.5);
        bool falling = velocity[t] < vel_eps && velocity[t - 1] >= vel_eps;
        if (toggle || falling) keys.push_back(t);
    }
    if (keys.empty() || keys.back() != n - 1) keys.push_back(n - 1);
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    return keys;
}

KeyposeIndexSet bimanual_union(const std::vector<int>& left, const std::vector<int>& right) {
    KeyposeIndexSet out;
    out.indices.reserve(left.size() + right.size());
    std::set_union(left.begin(), left.end(), right.begin(), right.end(),
                   std::back_inserter(out.indices));
    return out;
}

KeyposeIndexSet extract_keyposes(const EpisodeActions& episode, double vel_eps) {
    episode.validate();
    auto l = extract_keyposes_arm(episode.arms[0], episode.velocity[0], vel_eps);
    auto r = extract_keyposes_arm(episode.arms[1], episode.velocity[1], vel_eps);
    return bimanual_union(l, r);
}

std::vector<Action> resample_segment(const std::vector<Action>& actions, int seg_begin,
                                     int seg_end, int horizon) {
    if (seg_begin < 0 || seg_end <= seg_begin || seg_end >= int(actions.size()))
        throw ValidationError("bad segment bounds");
    if (horizon < 1) throw ValidationError("horizon must be >= 1");
    const int len = seg_end - seg_begin;  // source steps past the boundary
    std::vector<Action> out(horizon);
    for (int r = 1; r <= horizon; ++r) {
        double u = double(r) * len / horizon;  // fractional source index in (0, len]
        int lo = int(std::floor(u));
        double frac = u - lo;
        if (lo >= len) {
            lo = len;
            frac = 0.0;
        }
        const Action& a = actions[seg_begin + lo];
        Action res;
        if (frac == 0.0) {
            res = a;
        } else {
            const Action& b = actions[seg_begin + lo + 1];
            res.loc = a.loc + (b.loc - a.loc) * frac;
            Mat3 ra = rot6d_to_matrix(a.rot);
            Mat3 rb = rot6d_to_matrix(b.rot);
            res.rot = matrix_to_rot6d(rotation_slerp(ra, rb, frac));
            res.open = (frac < 0.5 ? a : b).open;
        }
        out[r - 1] = res;
    }
    return out;
}

std::vector<TrainingItem> make_training_items(const EpisodeActions& episode,
                                              const KeyposeIndexSet& keyposes, int horizon) {
    episode.validate();
    std::vector<int> bounds;
    bounds.push_back(0);
    for (int k : keyposes.indices) {
        if (k <= 0 || k >= episode.length()) throw ValidationError("keypose index out of range");
        if (k > bounds.back()) bounds.push_back(k);
    }
    std::vector<TrainingItem> items;
    for (std::size_t j = 0; j + 1 < bounds.size(); ++j) {
        TrainingItem item;
        item.observation_index = bounds[j];
        item.next_keypose_index = bounds[j + 1];
        for (int a = 0; a < kNumArms; ++a)
            item.target[a] =
                resample_segment(episode.arms[a], bounds[j], bounds[j + 1], horizon);
        items.push_back(std::move(item));
    }
    return items;
}

}  // namespace flowpolicy
