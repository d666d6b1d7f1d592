#pragma once

#include <array>
#include <cstdio>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "flowpolicy/geometry.hpp"
#include "flowpolicy/keypose.hpp"
#include "flowpolicy/pointcloud.hpp"

namespace flowpolicy {

// IEEE binary16 bit pattern in a u16 payload, round-to-nearest-even.
std::uint16_t half_encode(float v);
float half_decode(std::uint16_t bits);

// ---------------------------------------------------------------------------
// On-disk layout
//
// <dir>/manifest.json plus one episodes/<id>.bin per episode. Every episode
// file is a frames region followed by a targets region; all values little-
// endian. Per frame, for each camera in manifest order:
//   rgb   u8  H*W*3        (f32 in the transcoded baseline)
//   depth u16 H*W binary16 (f32 in the transcoded baseline)
// then proprioception f32 2*10 (loc3 rot6 open1 per arm) and the commanded
// action f32 2*10. The targets region holds per training item, per arm,
// horizon * 10 f32 in the global frame.
// ---------------------------------------------------------------------------

enum class DtypeMode { StagedU8F16, Float32 };

struct ManifestItem {
    int obs_index = 0;
    int next_keypose = 0;
    std::uint64_t target_offset = 0;
};

struct ManifestEpisode {
    int id = 0;
    std::string task;
    int instruction_id = 0;
    int length = 0;
    std::string file;
    std::vector<int> keyposes_left, keyposes_right, keyposes_union;
    std::vector<ManifestItem> items;
};

struct Manifest {
    int version = 1;
    DtypeMode dtype = DtypeMode::StagedU8F16;
    int width = 0, height = 0;
    int horizon = 0;
    double vel_eps = 1e-3;
    std::vector<CameraModel> cameras;
    NormStats stats;
    std::vector<ManifestEpisode> episodes;
    std::vector<std::pair<int, int>> sample_index;  // (episode, item ordinal)

    std::size_t frame_stride() const;
    std::size_t rgb_bytes_per_cam() const;
    std::size_t depth_bytes_per_cam() const;
};

struct EpisodeRecordIn {
    std::string task_name;
    int instruction_id = 0;
    EpisodeActions actions;
    std::vector<std::vector<std::uint8_t>> rgb;     // [frame][ncam*H*W*3]
    std::vector<std::vector<std::uint16_t>> depth;  // [frame][ncam*H*W] f16 bits
    std::vector<std::array<Action, 2>> proprio;     // [frame]
};

Manifest write_dataset(const std::vector<EpisodeRecordIn>& episodes,
                       const std::vector<CameraModel>& cameras, int horizon,
                       double vel_eps, const std::string& dir);

// Rewrites an existing dataset with f32 images and depth; the comparison
// baseline for staged-dtype loading.
void transcode_dataset_f32(const std::string& src_dir, const std::string& dst_dir);

// Raw stage-1 item: undecoded frame bytes plus the f32 target block.
struct RawItem {
    int episode = 0;
    int ordinal = 0;
    std::vector<std::uint8_t> frame;
    std::vector<float> target;  // 2 * horizon * 10
};

// Stage-2 decoded item in compute-ready types (f32 conversion, unprojection
// and patch pooling happen here, not at disk read).
struct DecodedItem {
    FeatureCloud cloud;  // merged patch cloud, features = mean rgb in [0,1]
    std::array<Trajectory, 2> target;   // global frame, horizon steps
    std::array<Action, 2> proprio;      // global frame
    int instruction_id = 0;
    int episode = 0;
    int ordinal = 0;
};

class DatasetReader {
  public:
    explicit DatasetReader(const std::string& dir);

    const Manifest& manifest() const { return manifest_; }

    std::vector<std::pair<int, int>> sample_indices(int batch, std::uint64_t seed) const;
    RawItem read_item(int episode, int ordinal) const;
    std::vector<RawItem> sample_batch(int batch, std::uint64_t seed) const;

    DecodedItem decode(const RawItem& raw, int patch_size) const;

    std::uint64_t bytes_read() const;
    void reset_bytes_read() const;

  private:
    std::string dir_;
    Manifest manifest_;
    mutable std::mutex io_mutex_;
    mutable std::unordered_map<int, std::unique_ptr<std::FILE, int (*)(std::FILE*)>> files_;
    mutable std::uint64_t bytes_ = 0;
    std::FILE* file_for(int episode) const;
};

// Patch pooling of one camera frame: mean rgb and mean 3D position over the
// valid pixels of each patch_size x patch_size cell.
FeatureCloud build_scene_cloud(const std::uint8_t* rgb, const float* depth,
                               const CameraModel& cam, int patch_size);

struct AugmentConfig {
    bool enabled = false;
    double max_yaw_deg = 10.0;
    double max_shift = 0.02;  // meters, per axis
};

RigidTransform sample_augment_transform(Rng& rng, const AugmentConfig& cfg);
void augment_item(DecodedItem& item, Rng& rng, const AugmentConfig& cfg);

nlohmann::json camera_to_json(const CameraModel& cam);
CameraModel camera_from_json(const nlohmann::json& j);

}  // namespace flowpolicy
