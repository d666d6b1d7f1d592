#include "flowpolicy/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace flowpolicy {

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw IoError("truncated checkpoint");
    return v;
}

void write_blob(std::ostream& os, const std::string& s) {
    write_u32(os, std::uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

std::string read_blob(std::istream& is) {
    std::uint32_t len = read_u32(is);
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw IoError("truncated checkpoint blob");
    return s;
}

}  // namespace

nlohmann::json norm_stats_to_json(const NormStats& s) {
    nlohmann::json j;
    for (int arm = 0; arm < kNumArms; ++arm) {
        j["center"].push_back(s.center[arm]);
        j["half_range"].push_back(s.half_range[arm]);
    }
    return j;
}

NormStats norm_stats_from_json(const nlohmann::json& j) {
    NormStats s;
    for (int arm = 0; arm < kNumArms; ++arm) {
        for (int d = 0; d < kActionDims; ++d) {
            s.center[arm][d] = j.at("center").at(arm).at(d).get<double>();
            s.half_range[arm][d] = j.at("half_range").at(arm).at(d).get<double>();
        }
    }
    return s;
}

void save_checkpoint(const std::string& path, const ad::ParamStore<float>& params,
                     const NormStats& stats, const nlohmann::json& config) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kCheckpointMagic, 4);
    write_u32(os, kCheckpointVersion);
    write_u32(os, std::uint32_t(params.all().size()));
    for (const auto& p : params.all()) {
        write_blob(os, p->name);
        write_u32(os, std::uint32_t(p->rows()));
        write_u32(os, std::uint32_t(p->cols()));
    }
    for (const auto& p : params.all())
        os.write(reinterpret_cast<const char*>(p->value.data()),
                 std::streamsize(p->value.size() * sizeof(float)));
    write_blob(os, norm_stats_to_json(stats).dump());
    write_blob(os, config.dump());
    if (!os) throw IoError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw ValidationError("bad checkpoint magic in " + path);
    std::uint32_t version = read_u32(is);
    if (version != kCheckpointVersion)
        throw ValidationError("unsupported checkpoint version " + std::to_string(version));
    std::uint32_t count = read_u32(is);

    Checkpoint ck;
    struct Entry {
        std::string name;
        int rows, cols;
    };
    std::vector<Entry> manifest;
    manifest.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        e.name = read_blob(is);
        e.rows = int(read_u32(is));
        e.cols = int(read_u32(is));
        manifest.push_back(std::move(e));
    }
    for (const Entry& e : manifest) {
        ad::Param<float>* p = ck.params.add(e.name, e.rows, e.cols);
        is.read(reinterpret_cast<char*>(p->value.data()),
                std::streamsize(p->value.size() * sizeof(float)));
        if (!is) throw IoError("truncated parameter payload in " + path);
    }
    ck.stats = norm_stats_from_json(nlohmann::json::parse(read_blob(is)));
    ck.config = nlohmann::json::parse(read_blob(is));
    return ck;
}

}  // namespace flowpolicy
