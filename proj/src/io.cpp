#include "hmcface/io.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"

namespace hmc::io {

namespace fs = std::filesystem;
using nlohmann::json;
using world::kCodeDim;
using world::kNumCams;
using world::kNumLandmarks;
using world::kNumLatents;

namespace {

double clip1(double v) { return std::min(1.0, std::max(-1.0, v)); }

world::GazePair gaze_from(double az, double alt, double verg) {
    auto dir = [](double a, double b) {
        Tensor g({3});
        g[0] = std::sin(a) * std::cos(b);
        g[1] = std::sin(b);
        g[2] = std::cos(a) * std::cos(b);
        const double n = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
        for (int i = 0; i < 3; ++i) g[i] /= n;
        return g;
    };
    world::GazePair g;
    g.left = dir(az + verg, alt);
    g.right = dir(az - verg, alt);
    return g;
}

}  // namespace

Shard make_identity_shard(const world::World& w, int64_t identity_seed, int frames,
                          int sessions, uint64_t stream_seed, bool labeled) {
    const world::IdentityParams id = world::sample_identity(identity_seed);
    const int res = w.cfg.view_resolution;

    Shard shard;
    shard.identity_seed = identity_seed;
    shard.labeled = labeled;
    shard.views = Tensor({frames, kNumCams, res, res});
    shard.keypoints = Tensor({frames, kNumCams, kNumLandmarks, 2});
    if (labeled) {
        shard.e_true = Tensor({frames, kCodeDim});
        shard.g_true = Tensor({frames, 6});
    }
    shard.session_index.resize(frames);
    shard.tag_index.assign(frames, -1);

    uint64_t h = fnv1a64(&stream_seed, sizeof(stream_seed), 0x8f1bu);
    h = fnv1a64(&identity_seed, sizeof(identity_seed), h);
    Rng rng(h);
    Rng script = rng.fork("script");

    std::vector<world::SessionState> states;
    for (int si = 0; si < sessions; ++si) {
        const uint64_t sseed = rng.fork("session").next_u64() >> 12;
        shard.session_seeds.push_back(static_cast<int64_t>(sseed));
        states.push_back(world::sample_session(w, sseed));
    }

    // capture script: tagged anchors, then a correlated walk, then
    // range-of-motion sweeps toward random targets
    const auto& vocab = world::expression_vocabulary();
    const int n_tagged = std::min(frames, static_cast<int>(0.4 * frames));
    const int n_walk = std::min(frames - n_tagged, static_cast<int>(0.35 * frames));
    Tensor s({kNumLatents});
    Tensor rom_from({kNumLatents}), rom_to({kNumLatents});
    double az = 0, alt = 0;
    int rom_phase = 0;

    for (int t = 0; t < frames; ++t) {
        Tensor e;
        world::GazePair gaze;
        if (t < n_tagged) {
            const int seg_len = std::max(1, n_tagged / static_cast<int>(vocab.size()));
            const size_t ti = std::min<size_t>(t / seg_len, vocab.size() - 1);
            const auto& tag = vocab[ti];
            shard.tag_index[t] = static_cast<int>(ti);
            const uint64_t eseed = script.fork("tag").next_u64();
            auto sample = world::sample_expression(w, eseed, tag);
            s = sample.s;
            e = sample.e;
            gaze = sample.gaze;
        } else if (t < n_tagged + n_walk) {
            if (t == n_tagged) s = Tensor({kNumLatents});
            for (int k = 0; k < kNumLatents; ++k)
                s[k] = clip1(0.9 * s[k] + 0.25 * script.normal());
            az = std::clamp(0.95 * az + script.normal(0, 0.05), -0.45, 0.45);
            alt = std::clamp(0.95 * alt + script.normal(0, 0.04), -0.3, 0.3);
            e = world::expression_code(w, s);
            gaze = gaze_from(az, alt, script.normal(0, 0.01));
        } else {
            if (rom_phase == 0) {
                rom_from = s;
                for (int k = 0; k < kNumLatents; ++k) rom_to[k] = script.uniform(-1.0, 1.0);
            }
            const double a = (rom_phase + 1) / 8.0;
            for (int k = 0; k < kNumLatents; ++k)
                s[k] = (1 - a) * rom_from[k] + a * rom_to[k];
            rom_phase = (rom_phase + 1) % 8;
            az = std::clamp(0.9 * az + script.normal(0, 0.06), -0.45, 0.45);
            alt = std::clamp(0.9 * alt + script.normal(0, 0.05), -0.3, 0.3);
            e = world::expression_code(w, s);
            gaze = gaze_from(az, alt, 0.0);
        }

        const int si = (t * sessions) / frames;  // contiguous session blocks
        shard.session_index[t] = si;
        world::HmcFrame fr = world::render_hmc_frame(w, id, e, gaze, states[si], labeled);
        std::copy(fr.views.data(), fr.views.data() + fr.views.size(),
                  shard.views.data() + static_cast<int64_t>(t) * fr.views.size());
        std::copy(fr.keypoints.data(), fr.keypoints.data() + fr.keypoints.size(),
                  shard.keypoints.data() + static_cast<int64_t>(t) * fr.keypoints.size());
        if (labeled) {
            std::copy(e.data(), e.data() + kCodeDim,
                      shard.e_true.data() + static_cast<int64_t>(t) * kCodeDim);
            Tensor g6 = world::pack_gaze(gaze);
            std::copy(g6.data(), g6.data() + 6, shard.g_true.data() + 6 * t);
        }
    }
    return shard;
}

namespace {

struct ArrayDesc {
    std::string name;
    std::string dtype;
    std::vector<int> shape;
    int64_t offset = 0;
    int64_t bytes = 0;
};

void append_f32(std::string& buf, const Tensor& t) {
    const size_t at = buf.size();
    buf.resize(at + t.size() * sizeof(float));
    float* out = reinterpret_cast<float*>(buf.data() + at);
    for (int64_t i = 0; i < t.size(); ++i) out[i] = static_cast<float>(t[i]);
}

void append_i32(std::string& buf, const std::vector<int>& v) {
    const size_t at = buf.size();
    buf.resize(at + v.size() * sizeof(int32_t));
    std::memcpy(buf.data() + at, v.data(), v.size() * sizeof(int32_t));
}

}  // namespace

void write_shard(const std::string& root, const std::string& name, const Shard& shard,
                 const world::World& w, ShardInfo& info_out) {
    std::string buf;
    std::vector<ArrayDesc> arrays;
    auto add_f32 = [&](const std::string& n, const Tensor& t) {
        ArrayDesc d{n, "float32", t.shape(), static_cast<int64_t>(buf.size()),
                    static_cast<int64_t>(t.size() * sizeof(float))};
        append_f32(buf, t);
        arrays.push_back(std::move(d));
    };
    add_f32("views", shard.views);
    add_f32("keypoints", shard.keypoints);
    if (shard.labeled) {
        add_f32("e_true", shard.e_true);
        add_f32("g_true", shard.g_true);
    }
    auto add_i32 = [&](const std::string& n, const std::vector<int>& v) {
        ArrayDesc d{n,
                    "int32",
                    {static_cast<int>(v.size())},
                    static_cast<int64_t>(buf.size()),
                    static_cast<int64_t>(v.size() * sizeof(int32_t))};
        append_i32(buf, v);
        arrays.push_back(std::move(d));
    };
    add_i32("session_index", shard.session_index);
    add_i32("tag_index", shard.tag_index);

    const fs::path bin = fs::path(root) / (name + ".bin");
    const fs::path side = fs::path(root) / (name + ".json");
    {
        std::ofstream f(bin, std::ios::binary | std::ios::trunc);
        if (!f) throw HmcError("cannot write shard " + bin.string());
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!f) throw HmcError("short write on shard " + bin.string());
    }

    json j;
    j["version"] = 1;
    j["endianness"] = "little";
    j["identity_seed"] = shard.identity_seed;
    j["frames"] = shard.views.dim(0);
    j["labeled"] = shard.labeled;
    j["session_seeds"] = shard.session_seeds;
    json cams = json::array();
    for (const auto& c : w.cameras) cams.push_back(c.name);
    j["camera_order"] = cams;
    json arr = json::array();
    for (const auto& a : arrays)
        arr.push_back({{"name", a.name},
                       {"dtype", a.dtype},
                       {"shape", a.shape},
                       {"offset_bytes", a.offset},
                       {"bytes", a.bytes}});
    j["arrays"] = arr;
    {
        std::ofstream f(side, std::ios::trunc);
        if (!f) throw HmcError("cannot write sidecar " + side.string());
        f << j.dump(1) << "\n";
    }

    info_out.name = name;
    info_out.identity_seed = shard.identity_seed;
    info_out.frames = shard.views.dim(0);
    info_out.labeled = shard.labeled;
    info_out.digest = fnv1a64(buf.data(), buf.size());
}

Shard read_shard(const std::string& root, const ShardInfo& info) {
    const fs::path bin = fs::path(root) / (info.name + ".bin");
    const fs::path side = fs::path(root) / (info.name + ".json");
    std::ifstream sf(side);
    if (!sf) throw HmcError("missing sidecar " + side.string());
    json j = json::parse(sf);

    std::ifstream bf(bin, std::ios::binary);
    if (!bf) throw HmcError("missing shard " + bin.string());
    std::string buf((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

    Shard shard;
    shard.identity_seed = j.at("identity_seed").get<int64_t>();
    shard.labeled = j.at("labeled").get<bool>();
    shard.session_seeds = j.at("session_seeds").get<std::vector<int64_t>>();

    auto load_f32 = [&](const json& a) {
        const auto shape = a.at("shape").get<std::vector<int>>();
        const int64_t off = a.at("offset_bytes").get<int64_t>();
        Tensor t(shape);
        const float* src = reinterpret_cast<const float*>(buf.data() + off);
        for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(src[i]);
        return t;
    };
    auto load_i32 = [&](const json& a, std::vector<int>& out) {
        const int n = a.at("shape").get<std::vector<int>>()[0];
        const int64_t off = a.at("offset_bytes").get<int64_t>();
        out.resize(n);
        std::memcpy(out.data(), buf.data() + off, n * sizeof(int32_t));
    };
    for (const auto& a : j.at("arrays")) {
        const std::string name = a.at("name").get<std::string>();
        if (name == "views") shard.views = load_f32(a);
        else if (name == "keypoints") shard.keypoints = load_f32(a);
        else if (name == "e_true") shard.e_true = load_f32(a);
        else if (name == "g_true") shard.g_true = load_f32(a);
        else if (name == "session_index") load_i32(a, shard.session_index);
        else if (name == "tag_index") load_i32(a, shard.tag_index);
    }
    return shard;
}

DatasetManifest generate_dataset(const GenerationConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const world::World w = world::make_world(cfg.world_seed, cfg.world);

    std::vector<std::pair<int64_t, bool>> identities;  // seed, labeled
    if (!cfg.paired_seeds.empty() || !cfg.ssl_seeds.empty()) {
        for (int64_t s : cfg.paired_seeds) identities.emplace_back(s, true);
        for (int64_t s : cfg.ssl_seeds) identities.emplace_back(s, false);
    } else {
        for (int i = 0; i < cfg.paired_identities; ++i) {
            uint64_t h = fnv1a64("paired", 6, cfg.seed ^ 0x7c5u);
            h = fnv1a64(&i, sizeof(i), h);
            identities.emplace_back(static_cast<int64_t>(h >> 12), true);
        }
        for (int i = 0; i < cfg.ssl_identities; ++i) {
            uint64_t h = fnv1a64("ssl", 3, cfg.seed ^ 0x2d9u);
            h = fnv1a64(&i, sizeof(i), h);
            identities.emplace_back(static_cast<int64_t>(h >> 12), false);
        }
    }
    std::set<int64_t> seen;
    for (const auto& [seed, labeled] : identities)
        if (!seen.insert(seed).second)
            throw HmcError("duplicate identity seed " + std::to_string(seed));

    DatasetManifest m;
    m.root = out_dir;
    m.world_seed = cfg.world_seed;
    m.view_resolution = cfg.world.view_resolution;

    int paired_i = 0, ssl_i = 0;
    for (const auto& [seed, labeled] : identities) {
        const int frames = labeled ? cfg.paired_frames : cfg.ssl_frames;
        Shard shard = make_identity_shard(w, seed, frames, cfg.sessions_per_identity,
                                          cfg.seed, labeled);
        char name[64];
        if (labeled)
            std::snprintf(name, sizeof(name), "paired_%03d", paired_i++);
        else
            std::snprintf(name, sizeof(name), "ssl_%03d", ssl_i++);
        ShardInfo info;
        write_shard(out_dir, name, shard, w, info);
        m.shards.push_back(info);
        if (labeled)
            m.labeled_frames += frames;
        else
            m.unlabeled_frames += frames;
    }
    write_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    return m;
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
    json j;
    j["root"] = m.root;
    j["world_seed"] = m.world_seed;
    j["version"] = m.version;
    j["view_resolution"] = m.view_resolution;
    j["labeled_frames"] = m.labeled_frames;
    j["unlabeled_frames"] = m.unlabeled_frames;
    json shards = json::array();
    for (const auto& s : m.shards)
        shards.push_back({{"name", s.name},
                          {"identity_seed", s.identity_seed},
                          {"frames", s.frames},
                          {"labeled", s.labeled},
                          {"digest", s.digest}});
    j["shards"] = shards;
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw HmcError("cannot write manifest " + path);
    f << j.dump(1) << "\n";
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw HmcError("missing manifest " + path);
    json j = json::parse(f);
    DatasetManifest m;
    m.root = j.at("root").get<std::string>();
    m.world_seed = j.at("world_seed").get<uint64_t>();
    m.version = j.at("version").get<int>();
    m.view_resolution = j.at("view_resolution").get<int>();
    m.labeled_frames = j.at("labeled_frames").get<int64_t>();
    m.unlabeled_frames = j.at("unlabeled_frames").get<int64_t>();
    for (const auto& s : j.at("shards")) {
        ShardInfo info;
        info.name = s.at("name").get<std::string>();
        info.identity_seed = s.at("identity_seed").get<int64_t>();
        info.frames = s.at("frames").get<int>();
        info.labeled = s.at("labeled").get<bool>();
        info.digest = s.at("digest").get<uint64_t>();
        m.shards.push_back(info);
    }
    return m;
}

void validate_manifest(const DatasetManifest& m) {
    for (const auto& s : m.shards) {
        const fs::path side = fs::path(m.root) / (s.name + ".json");
        const fs::path bin = fs::path(m.root) / (s.name + ".bin");
        if (!fs::exists(bin)) throw HmcError("manifest references missing shard " + bin.string());
        std::ifstream sf(side);
        if (!sf) throw HmcError("manifest references missing sidecar " + side.string());
        json j = json::parse(sf);
        if (j.at("frames").get<int>() != s.frames)
            throw HmcError("frame count mismatch in shard " + s.name);
    }
}

uint64_t file_digest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw HmcError("cannot read " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(buf.data(), buf.size());
}

}  // namespace hmc::io
