#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowpolicy/adcore.hpp"
#include "flowpolicy/flow.hpp"
#include "flowpolicy/geometry.hpp"
#include "flowpolicy/pointcloud.hpp"

namespace flowpolicy {

struct ModelConfig {
    int layers = 6;
    int dim = 48;
    int heads = 4;
    int ff_mult = 4;
    int horizon = 8;
    int arms = 2;
    int task_vocab = 5;
    int feat_dim = 3;       // scene feature dimension (rgb)
    int scene_tokens = 16;  // fixed count fed to the graph
    int head_hidden = 48;
    double rotary_base = 100.0;  // wavelength ladder for meter-scale inputs
    double token_subsample_ratio = 0.25;
    int patch_size = 6;
    Parameterization parameterization = Parameterization::Velocity;

    void validate() const;
    // tokens that carry a 3D position (scene + per arm: horizon + proprio)
    int positioned_tokens() const { return scene_tokens + arms * (horizon + 1); }
};

// Everything the denoiser consumes for one item, in graph-ready layout. The
// trajectory values live in the arm-normalized space; every 3D position is in
// the global frame (trajectory token positions are the denormalized noisy
// location estimates).
struct TokenSet {
    std::vector<float> scene_feat;  // S * feat_dim
    std::vector<float> scene_pos;   // S * 3
    std::array<std::vector<float>, 2> traj_values;  // T * 9, normalized
    std::array<std::vector<float>, 2> traj_pos;     // T * 3, global
    std::array<std::array<float, 3>, 2> prop_pos;   // current effector locations
    std::array<std::array<float, 10>, 2> cond_pose; // normalized pose + open
    int instruction_id = 0;
};

// cloud: already subsampled scene cloud (positions global); noisy_traj: per
// arm T x 9 flat values in the arm-normalized frame.
TokenSet build_tokens(const FeatureCloud& cloud,
                      const std::array<std::vector<float>, 2>& noisy_traj,
                      const std::array<Action, 2>& proprio, int instruction_id,
                      const NormStats& stats, const ModelConfig& cfg);

struct DenoiserOutput {
    std::array<std::vector<float>, 2> v_loc;        // T * 3
    std::array<std::vector<float>, 2> v_rot;        // T * 6
    std::array<std::vector<float>, 2> open_logits;  // T
};

template <class T>
struct DenoiserGraph {
    ad::Graph<T> g;
    // leaves
    int scene_feat = -1, scene_pos = -1, step = -1, instr = -1;
    std::array<int, 2> traj_val{-1, -1}, traj_pos{-1, -1}, prop_pos{-1, -1},
        cond_pose{-1, -1};
    // outputs
    std::array<int, 2> out_vloc{-1, -1}, out_vrot{-1, -1}, out_open{-1, -1};
    // training targets and losses (when built with_loss)
    std::array<int, 2> tgt_v{-1, -1}, tgt_open{-1, -1};
    std::array<int, 2> vel_loss{-1, -1}, open_loss{-1, -1};
    int loss = -1;
};

// Creates (if missing) and initializes all model parameters. Modulation and
// head output layers start at zero, so residual branches are closed and the
// untrained outputs equal the head biases.
void init_denoiser_params(ad::ParamStore<float>& ps, const ModelConfig& cfg,
                          std::uint64_t seed);

// Adds any missing parameters without initializing (used for mirrors/loads).
template <class T>
void ensure_denoiser_params(ad::ParamStore<T>& ps, const ModelConfig& cfg);

template <class T>
DenoiserGraph<T> build_denoiser(ad::ParamStore<T>& ps, const ModelConfig& cfg,
                                bool with_loss);

template <class T>
void fill_graph_inputs(DenoiserGraph<T>& dg, const TokenSet& tokens, double step_i,
                       const ModelConfig& cfg);

template <class T>
void fill_graph_targets(DenoiserGraph<T>& dg,
                        const std::array<std::vector<float>, 2>& v_target,
                        const std::array<std::vector<float>, 2>& open_target,
                        const ModelConfig& cfg);

template <class T>
DenoiserOutput read_output(const DenoiserGraph<T>& dg, const ModelConfig& cfg);

// fill + forward + read
template <class T>
DenoiserOutput denoiser_forward(DenoiserGraph<T>& dg, const TokenSet& tokens,
                                double step_i, const ModelConfig& cfg);

ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& cfg);

struct DenoiserModel {
    ModelConfig cfg;
    ad::ParamStore<float> params;

    void init(std::uint64_t seed);
    DenoiserGraph<float> make_graph(bool with_loss);
};

}  // namespace flowpolicy
