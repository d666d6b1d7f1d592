#pragma once

#include <string>

#include <json.hpp>

#include "flowpolicy/adcore.hpp"
#include "flowpolicy/geometry.hpp"

namespace flowpolicy {

// Checkpoint file layout (all integers little-endian u32 unless noted):
//   magic "3DFA" | version | param_count
//   per param: name_len, name bytes, rows, cols
//   contiguous f32 parameter payload in manifest order
//   stats_len,  NormStats JSON bytes
//   config_len, model/config JSON bytes
inline constexpr char kCheckpointMagic[4] = {'3', 'D', 'F', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ad::ParamStore<float> params;
    NormStats stats;
    nlohmann::json config;
};

void save_checkpoint(const std::string& path, const ad::ParamStore<float>& params,
                     const NormStats& stats, const nlohmann::json& config);
Checkpoint load_checkpoint(const std::string& path);

nlohmann::json norm_stats_to_json(const NormStats& s);
NormStats norm_stats_from_json(const nlohmann::json& j);

}  // namespace flowpolicy
