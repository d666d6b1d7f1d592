#include "flowpolicy/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace flowpolicy {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// binary16
// ---------------------------------------------------------------------------

std::uint16_t half_encode(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    std::uint32_t sign = (bits >> 16) & 0x8000u;
    std::uint32_t exp = (bits >> 23) & 0xffu;
    std::uint32_t mant = bits & 0x7fffffu;

    if (exp == 0xff) return std::uint16_t(sign | 0x7c00u | (mant ? 0x200u : 0));
    int e = int(exp) - 127 + 15;
    if (e >= 0x1f) return std::uint16_t(sign | 0x7c00u);  // overflow -> inf
    if (e <= 0) {
        if (e < -10) return std::uint16_t(sign);  // underflow -> signed zero
        mant |= 0x800000u;
        int shift = 14 - e;
        std::uint32_t half_mant = mant >> shift;
        std::uint32_t rem = mant & ((1u << shift) - 1);
        std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1))) ++half_mant;
        return std::uint16_t(sign | half_mant);
    }
    std::uint32_t half_mant = mant >> 13;
    std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half_mant & 1))) {
        ++half_mant;
        if (half_mant == 0x400u) {
            half_mant = 0;
            ++e;
            if (e >= 0x1f) return std::uint16_t(sign | 0x7c00u);
        }
    }
    return std::uint16_t(sign | (std::uint32_t(e) << 10) | half_mant);
}

float half_decode(std::uint16_t h) {
    std::uint32_t sign = (std::uint32_t(h) & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            int e = -1;
            do {
                mant <<= 1;
                ++e;
            } while (!(mant & 0x400u));
            mant &= 0x3ffu;
            bits = sign | std::uint32_t(127 - 15 - e) << 23 | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::size_t Manifest::rgb_bytes_per_cam() const {
    std::size_t px = std::size_t(width) * height;
    return dtype == DtypeMode::StagedU8F16 ? px * 3 : px * 3 * 4;
}

std::size_t Manifest::depth_bytes_per_cam() const {
    std::size_t px = std::size_t(width) * height;
    return dtype == DtypeMode::StagedU8F16 ? px * 2 : px * 4;
}

std::size_t Manifest::frame_stride() const {
    return cameras.size() * (rgb_bytes_per_cam() + depth_bytes_per_cam()) +
           2 * 10 * sizeof(float) * 2;  // proprio + action
}

nlohmann::json camera_to_json(const CameraModel& cam) {
    nlohmann::json j;
    j["fx"] = cam.fx;
    j["fy"] = cam.fy;
    j["cx"] = cam.cx;
    j["cy"] = cam.cy;
    j["width"] = cam.width;
    j["height"] = cam.height;
    std::vector<double> rt;
    for (double v : cam.extrinsics.rotation.m) rt.push_back(v);
    rt.push_back(cam.extrinsics.translation.x);
    rt.push_back(cam.extrinsics.translation.y);
    rt.push_back(cam.extrinsics.translation.z);
    j["extrinsics"] = rt;
    return j;
}

CameraModel camera_from_json(const nlohmann::json& j) {
    CameraModel cam;
    cam.fx = j.at("fx");
    cam.fy = j.at("fy");
    cam.cx = j.at("cx");
    cam.cy = j.at("cy");
    cam.width = j.at("width");
    cam.height = j.at("height");
    auto rt = j.at("extrinsics").get<std::vector<double>>();
    if (rt.size() != 12) throw ValidationError("extrinsics must have 12 values");
    for (int i = 0; i < 9; ++i) cam.extrinsics.rotation.m[i] = rt[i];
    cam.extrinsics.translation = {rt[9], rt[10], rt[11]};
    return cam;
}

namespace {

void append_f32(std::vector<std::uint8_t>& buf, const float* v, std::size_t count) {
    std::size_t off = buf.size();
    buf.resize(off + count * 4);
    std::memcpy(buf.data() + off, v, count * 4);
}

std::array<float, 10> action_f32(const Action& a) {
    auto v = action_values(a);
    std::array<float, 10> out;
    for (int i = 0; i < 9; ++i) out[i] = float(v[i]);
    out[9] = float(a.open);
    return out;
}

Action action_from_f32(const float* v) {
    std::array<double, kActionDims> d;
    for (int i = 0; i < 9; ++i) d[i] = v[i];
    return action_from_values(d, v[9]);
}

nlohmann::json manifest_to_json(const Manifest& m) {
    nlohmann::json j;
    j["version"] = m.version;
    j["dtype"] = m.dtype == DtypeMode::StagedU8F16 ? "staged_u8_f16" : "f32";
    j["width"] = m.width;
    j["height"] = m.height;
    j["horizon"] = m.horizon;
    j["vel_eps"] = m.vel_eps;
    for (const auto& cam : m.cameras) j["cameras"].push_back(camera_to_json(cam));
    nlohmann::json stats;
    for (int arm = 0; arm < kNumArms; ++arm) {
        stats["center"].push_back(m.stats.center[arm]);
        stats["half_range"].push_back(m.stats.half_range[arm]);
    }
    j["norm_stats"] = stats;
    for (const auto& ep : m.episodes) {
        nlohmann::json e;
        e["id"] = ep.id;
        e["task"] = ep.task;
        e["instruction_id"] = ep.instruction_id;
        e["length"] = ep.length;
        e["file"] = ep.file;
        e["keyposes_left"] = ep.keyposes_left;
        e["keyposes_right"] = ep.keyposes_right;
        e["keyposes_union"] = ep.keyposes_union;
        for (const auto& it : ep.items)
            e["items"].push_back({{"obs", it.obs_index},
                                  {"next", it.next_keypose},
                                  {"target_offset", it.target_offset}});
        j["episodes"].push_back(e);
    }
    for (const auto& [ep, ord] : m.sample_index) j["sample_index"].push_back({ep, ord});
    return j;
}

Manifest manifest_from_json(const nlohmann::json& j) {
    Manifest m;
    m.version = j.at("version");
    if (m.version != 1) throw ValidationError("unsupported dataset version");
    m.dtype = j.at("dtype") == "staged_u8_f16" ? DtypeMode::StagedU8F16 : DtypeMode::Float32;
    m.width = j.at("width");
    m.height = j.at("height");
    m.horizon = j.at("horizon");
    m.vel_eps = j.at("vel_eps");
    for (const auto& cj : j.at("cameras")) m.cameras.push_back(camera_from_json(cj));
    for (int arm = 0; arm < kNumArms; ++arm)
        for (int d = 0; d < kActionDims; ++d) {
            m.stats.center[arm][d] = j.at("norm_stats").at("center").at(arm).at(d);
            m.stats.half_range[arm][d] = j.at("norm_stats").at("half_range").at(arm).at(d);
        }
    for (const auto& ej : j.at("episodes")) {
        ManifestEpisode ep;
        ep.id = ej.at("id");
        ep.task = ej.at("task");
        ep.instruction_id = ej.at("instruction_id");
        ep.length = ej.at("length");
        ep.file = ej.at("file");
        ep.keyposes_left = ej.at("keyposes_left").get<std::vector<int>>();
        ep.keyposes_right = ej.at("keyposes_right").get<std::vector<int>>();
        ep.keyposes_union = ej.at("keyposes_union").get<std::vector<int>>();
        if (ej.contains("items"))
            for (const auto& it : ej.at("items")) {
                ManifestItem mi;
                mi.obs_index = it.at("obs");
                mi.next_keypose = it.at("next");
                mi.target_offset = it.at("target_offset");
                ep.items.push_back(mi);
            }
        m.episodes.push_back(std::move(ep));
    }
    for (const auto& si : j.at("sample_index"))
        m.sample_index.emplace_back(si.at(0).get<int>(), si.at(1).get<int>());
    return m;
}

}  // namespace

Manifest write_dataset(const std::vector<EpisodeRecordIn>& episodes,
                       const std::vector<CameraModel>& cameras, int horizon,
                       double vel_eps, const std::string& dir) {
    if (episodes.empty()) throw ValidationError("episodes: empty list");
    if (cameras.empty()) throw ValidationError("cameras: empty list");
    const int w = cameras.front().width, h = cameras.front().height;
    const std::size_t rgb_sz = cameras.size() * std::size_t(w) * h * 3;
    const std::size_t depth_sz = cameras.size() * std::size_t(w) * h;

    Manifest m;
    m.width = w;
    m.height = h;
    m.horizon = horizon;
    m.vel_eps = vel_eps;
    m.cameras = cameras;

    std::vector<EpisodeArmActions> streams;
    for (const auto& ep : episodes) streams.push_back(ep.actions.arms);
    m.stats = compute_norm_stats(streams);

    fs::create_directories(fs::path(dir) / "episodes");

    for (std::size_t e = 0; e < episodes.size(); ++e) {
        const EpisodeRecordIn& in = episodes[e];
        const int len = in.actions.length();
        if (len < 2) throw ValidationError("episode " + std::to_string(e) + ": too short");
        if (int(in.rgb.size()) != len || int(in.depth.size()) != len ||
            int(in.proprio.size()) != len)
            throw ValidationError("episode " + std::to_string(e) + ": frame count mismatch");
        for (int t = 0; t < len; ++t) {
            if (in.rgb[t].size() != rgb_sz)
                throw ValidationError("episode " + std::to_string(e) + ": rgb size at frame " +
                                      std::to_string(t));
            if (in.depth[t].size() != depth_sz)
                throw ValidationError("episode " + std::to_string(e) + ": depth size at frame " +
                                      std::to_string(t));
        }

        ManifestEpisode me;
        me.id = int(e);
        me.task = in.task_name;
        me.instruction_id = in.instruction_id;
        me.length = len;
        me.file = "episodes/" + std::to_string(e) + ".bin";

        me.keyposes_left =
            extract_keyposes_arm(in.actions.arms[0], in.actions.velocity[0], vel_eps);
        me.keyposes_right =
            extract_keyposes_arm(in.actions.arms[1], in.actions.velocity[1], vel_eps);
        me.keyposes_union = bimanual_union(me.keyposes_left, me.keyposes_right).indices;

        KeyposeIndexSet ks{me.keyposes_union};
        auto items = make_training_items(in.actions, ks, horizon);

        std::vector<std::uint8_t> frames;
        frames.reserve(items.size());
        for (int t = 0; t < len; ++t) {
            std::size_t off = frames.size();
            frames.resize(off + in.rgb[t].size());
            std::memcpy(frames.data() + off, in.rgb[t].data(), in.rgb[t].size());
            off = frames.size();
            frames.resize(off + in.depth[t].size() * 2);
            std::memcpy(frames.data() + off, in.depth[t].data(), in.depth[t].size() * 2);
            for (int a = 0; a < 2; ++a) {
                auto pv = action_f32(in.proprio[t][a]);
                append_f32(frames, pv.data(), pv.size());
            }
            for (int a = 0; a < 2; ++a) {
                auto av = action_f32(in.actions.arms[a][t]);
                append_f32(frames, av.data(), av.size());
            }
        }

        std::uint64_t target_base = frames.size();
        for (const auto& item : items) {
            ManifestItem mi;
            mi.obs_index = item.observation_index;
            mi.next_keypose = item.next_keypose_index;
            mi.target_offset = target_base;
            me.items.push_back(mi);
            for (int a = 0; a < 2; ++a)
                for (const Action& act : item.target[a]) {
                    auto av = action_f32(act);
                    append_f32(frames, av.data(), av.size());
                }
            target_base = frames.size();
        }

        std::ofstream os(fs::path(dir) / me.file, std::ios::binary);
        if (!os) throw IoError("cannot write " + me.file);
        os.write(reinterpret_cast<const char*>(frames.data()), std::streamsize(frames.size()));
        if (!os) throw IoError("short write on " + me.file);

        for (std::size_t i = 0; i < me.items.size(); ++i)
            m.sample_index.emplace_back(int(e), int(i));
        m.episodes.push_back(std::move(me));
    }

    std::ofstream mj(fs::path(dir) / "manifest.json");
    if (!mj) throw IoError("cannot write manifest.json");
    mj << manifest_to_json(m).dump(1) << "\n";
    return m;
}

void transcode_dataset_f32(const std::string& src_dir, const std::string& dst_dir) {
    DatasetReader src(src_dir);
    const Manifest& sm = src.manifest();
    if (sm.dtype != DtypeMode::StagedU8F16)
        throw ValidationError("transcode expects a staged dataset");

    Manifest dm = sm;
    dm.dtype = DtypeMode::Float32;

    fs::create_directories(fs::path(dst_dir) / "episodes");
    const std::size_t px = std::size_t(sm.width) * sm.height;
    const std::size_t tail = 2 * 10 * sizeof(float) * 2;

    for (std::size_t e = 0; e < sm.episodes.size(); ++e) {
        const auto& ep = sm.episodes[e];
        std::ifstream is(fs::path(src_dir) / ep.file, std::ios::binary);
        if (!is) throw IoError("cannot read " + ep.file);
        std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(is)),
                                      std::istreambuf_iterator<char>());

        std::vector<std::uint8_t> out;
        std::size_t off = 0;
        for (int t = 0; t < ep.length; ++t) {
            for (std::size_t c = 0; c < sm.cameras.size(); ++c) {
                std::vector<float> rgb(px * 3);
                for (std::size_t i = 0; i < px * 3; ++i) rgb[i] = float(raw[off + i]) / 255.0f;
                append_f32(out, rgb.data(), rgb.size());
                off += px * 3;
                std::vector<float> depth(px);
                for (std::size_t i = 0; i < px; ++i) {
                    std::uint16_t bits;
                    std::memcpy(&bits, raw.data() + off + i * 2, 2);
                    depth[i] = half_decode(bits);
                }
                append_f32(out, depth.data(), depth.size());
                off += px * 2;
            }
            out.insert(out.end(), raw.begin() + off, raw.begin() + off + tail);
            off += tail;
        }
        // target blocks are f32 already; adjust offsets for the new stride
        std::uint64_t new_base = out.size();
        out.insert(out.end(), raw.begin() + off, raw.end());
        std::uint64_t old_base = off;
        for (auto& it : dm.episodes[e].items)
            it.target_offset = it.target_offset - old_base + new_base;

        std::ofstream os(fs::path(dst_dir) / ep.file, std::ios::binary);
        os.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
        if (!os) throw IoError("short write transcoding " + ep.file);
    }
    std::ofstream mj(fs::path(dst_dir) / "manifest.json");
    mj << manifest_to_json(dm).dump(1) << "\n";
}

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

DatasetReader::DatasetReader(const std::string& dir) : dir_(dir) {
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw IoError("no manifest.json under " + dir);
    manifest_ = manifest_from_json(nlohmann::json::parse(is));
    if (manifest_.sample_index.empty()) throw EmptyDataset("dataset has no training items");
}

std::FILE* DatasetReader::file_for(int episode) const {
    auto it = files_.find(episode);
    if (it != files_.end()) return it->second.get();
    const std::string path = (fs::path(dir_) / manifest_.episodes[episode].file).string();
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open " + path);
    files_.emplace(episode,
                   std::unique_ptr<std::FILE, int (*)(std::FILE*)>(f, &std::fclose));
    return f;
}

std::vector<std::pair<int, int>> DatasetReader::sample_indices(int batch,
                                                               std::uint64_t seed) const {
    Rng rng(seed);
    std::vector<std::pair<int, int>> out(batch);
    for (int b = 0; b < batch; ++b)
        out[b] = manifest_.sample_index[rng.uniform_int(int(manifest_.sample_index.size()))];
    return out;
}

RawItem DatasetReader::read_item(int episode, int ordinal) const {
    const ManifestEpisode& ep = manifest_.episodes.at(episode);
    const ManifestItem& item = ep.items.at(ordinal);
    const std::size_t stride = manifest_.frame_stride();
    const std::size_t target_bytes = std::size_t(2) * manifest_.horizon * 10 * 4;

    RawItem raw;
    raw.episode = episode;
    raw.ordinal = ordinal;
    raw.frame.resize(stride);
    raw.target.resize(target_bytes / 4);

    std::lock_guard<std::mutex> lk(io_mutex_);
    std::FILE* f = file_for(episode);
    if (std::fseek(f, long(stride * item.obs_index), SEEK_SET) != 0)
        throw IoError("seek failed");
    if (std::fread(raw.frame.data(), 1, stride, f) != stride)
        throw IoError("short frame read");
    if (std::fseek(f, long(item.target_offset), SEEK_SET) != 0) throw IoError("seek failed");
    if (std::fread(raw.target.data(), 1, target_bytes, f) != target_bytes)
        throw IoError("short target read");
    bytes_ += stride + target_bytes;
    return raw;
}

std::vector<RawItem> DatasetReader::sample_batch(int batch, std::uint64_t seed) const {
    std::vector<RawItem> out;
    out.reserve(batch);
    for (auto [ep, ord] : sample_indices(batch, seed)) out.push_back(read_item(ep, ord));
    return out;
}

std::uint64_t DatasetReader::bytes_read() const {
    std::lock_guard<std::mutex> lk(io_mutex_);
    return bytes_;
}

void DatasetReader::reset_bytes_read() const {
    std::lock_guard<std::mutex> lk(io_mutex_);
    bytes_ = 0;
}

FeatureCloud build_scene_cloud(const std::uint8_t* rgb, const float* depth,
                               const CameraModel& cam, int patch_size) {
    std::vector<float> dvec(depth, depth + std::size_t(cam.width) * cam.height);
    PointCloud pc = unproject(dvec, cam);

    const int pw = (cam.width + patch_size - 1) / patch_size;
    const int ph = (cam.height + patch_size - 1) / patch_size;
    std::vector<int> count(std::size_t(pw) * ph, 0);
    std::vector<double> sum_pos(std::size_t(pw) * ph * 3, 0.0);
    std::vector<double> sum_rgb(std::size_t(pw) * ph * 3, 0.0);

    for (std::size_t i = 0; i < pc.points.size(); ++i) {
        int px = pc.pixel_indices[i];
        int u = px % cam.width, v = px / cam.width;
        std::size_t cell = std::size_t(v / patch_size) * pw + (u / patch_size);
        ++count[cell];
        sum_pos[cell * 3 + 0] += pc.points[i].x;
        sum_pos[cell * 3 + 1] += pc.points[i].y;
        sum_pos[cell * 3 + 2] += pc.points[i].z;
        sum_rgb[cell * 3 + 0] += rgb[std::size_t(px) * 3 + 0] / 255.0;
        sum_rgb[cell * 3 + 1] += rgb[std::size_t(px) * 3 + 1] / 255.0;
        sum_rgb[cell * 3 + 2] += rgb[std::size_t(px) * 3 + 2] / 255.0;
    }

    FeatureCloud cloud;
    cloud.dim = 3;
    for (std::size_t cell = 0; cell < count.size(); ++cell) {
        if (count[cell] == 0) continue;
        for (int c = 0; c < 3; ++c) cloud.positions.push_back(float(sum_pos[cell * 3 + c] / count[cell]));
        for (int c = 0; c < 3; ++c) cloud.features.push_back(float(sum_rgb[cell * 3 + c] / count[cell]));
        ++cloud.n;
    }
    return cloud;
}

DecodedItem DatasetReader::decode(const RawItem& raw, int patch_size) const {
    const Manifest& m = manifest_;
    const std::size_t px = std::size_t(m.width) * m.height;
    DecodedItem item;
    item.episode = raw.episode;
    item.ordinal = raw.ordinal;
    item.instruction_id = m.episodes[raw.episode].instruction_id;

    std::size_t off = 0;
    FeatureCloud merged;
    merged.dim = 3;
    for (const CameraModel& cam : m.cameras) {
        std::vector<std::uint8_t> rgb8(px * 3);
        std::vector<float> depth(px);
        if (m.dtype == DtypeMode::StagedU8F16) {
            std::memcpy(rgb8.data(), raw.frame.data() + off, px * 3);
            off += px * 3;
            for (std::size_t i = 0; i < px; ++i) {
                std::uint16_t bits;
                std::memcpy(&bits, raw.frame.data() + off + i * 2, 2);
                depth[i] = half_decode(bits);
            }
            off += px * 2;
        } else {
            for (std::size_t i = 0; i < px * 3; ++i) {
                float v;
                std::memcpy(&v, raw.frame.data() + off + i * 4, 4);
                rgb8[i] = std::uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
            }
            off += px * 3 * 4;
            std::memcpy(depth.data(), raw.frame.data() + off, px * 4);
            off += px * 4;
        }
        FeatureCloud cloud = build_scene_cloud(rgb8.data(), depth.data(), cam, patch_size);
        merged.positions.insert(merged.positions.end(), cloud.positions.begin(),
                                cloud.positions.end());
        merged.features.insert(merged.features.end(), cloud.features.begin(),
                               cloud.features.end());
        merged.n += cloud.n;
    }
    item.cloud = std::move(merged);

    const float* fp = reinterpret_cast<const float*>(raw.frame.data() + off);
    for (int a = 0; a < 2; ++a) item.proprio[a] = action_from_f32(fp + a * 10);

    for (int a = 0; a < 2; ++a) {
        Trajectory t;
        t.arm = Arm(a);
        t.frame = Frame::Global;
        for (int r = 0; r < m.horizon; ++r)
            t.steps.push_back(action_from_f32(raw.target.data() + (a * m.horizon + r) * 10));
        item.target[a] = std::move(t);
    }
    return item;
}

RigidTransform sample_augment_transform(Rng& rng, const AugmentConfig& cfg) {
    double yaw = rng.uniform(-cfg.max_yaw_deg, cfg.max_yaw_deg) * 3.14159265358979 / 180.0;
    Vec3 shift{rng.uniform(-cfg.max_shift, cfg.max_shift),
               rng.uniform(-cfg.max_shift, cfg.max_shift),
               rng.uniform(-cfg.max_shift, cfg.max_shift)};
    return {axis_angle_to_matrix({0, 0, 1}, yaw), shift};
}

void augment_item(DecodedItem& item, Rng& rng, const AugmentConfig& cfg) {
    if (!cfg.enabled) return;
    RigidTransform tf = sample_augment_transform(rng, cfg);
    for (int i = 0; i < item.cloud.n; ++i) {
        Vec3 p{item.cloud.positions[i * 3], item.cloud.positions[i * 3 + 1],
               item.cloud.positions[i * 3 + 2]};
        p = tf.apply(p);
        item.cloud.positions[i * 3] = float(p.x);
        item.cloud.positions[i * 3 + 1] = float(p.y);
        item.cloud.positions[i * 3 + 2] = float(p.z);
    }
    auto map_action = [&](Action& a) {
        a.loc = tf.apply(a.loc);
        a.rot.a1 = tf.apply_vector(a.rot.a1);
        a.rot.a2 = tf.apply_vector(a.rot.a2);
    };
    for (int a = 0; a < 2; ++a) {
        map_action(item.proprio[a]);
        for (Action& act : item.target[a].steps) map_action(act);
    }
}

}  // namespace flowpolicy
