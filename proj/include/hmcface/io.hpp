#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hmcface/tensor.hpp"
#include "hmcface/world.hpp"

namespace hmc::io {

// One on-disk shard: all frames of one identity. Raw little-endian arrays in
// a .bin file, shapes and ordering in a .json sidecar.
struct ShardInfo {
    std::string name;  // file stem relative to the dataset root
    int64_t identity_seed = 0;
    int frames = 0;
    bool labeled = false;
    uint64_t digest = 0;  // FNV-1a of the .bin bytes
};

struct DatasetManifest {
    std::string root;
    uint64_t world_seed = 0;
    int version = 1;
    int view_resolution = 0;
    std::vector<ShardInfo> shards;
    int64_t labeled_frames = 0;
    int64_t unlabeled_frames = 0;
};

struct GenerationConfig {
    uint64_t world_seed = 11;
    world::WorldConfig world;
    int paired_identities = 12;
    int paired_frames = 400;  // per identity
    int ssl_identities = 60;
    int ssl_frames = 400;
    int sessions_per_identity = 4;
    uint64_t seed = 0;  // generation stream seed
    // explicit identity seeds; when set they override the derived ones and
    // the counts above
    std::vector<int64_t> paired_seeds;
    std::vector<int64_t> ssl_seeds;
};

// In-memory shard contents.
struct Shard {
    int64_t identity_seed = 0;
    bool labeled = false;
    Tensor views;      // [N,8,res,res]
    Tensor keypoints;  // [N,8,96,2]
    Tensor e_true;     // [N,256] labeled only
    Tensor g_true;     // [N,6] labeled only
    std::vector<int64_t> session_seeds;  // one per session
    std::vector<int> session_index;      // one per frame
    std::vector<int> tag_index;          // vocabulary index per frame, -1 untagged
};

// Deterministic per-identity frame synthesis following the capture script
// (tagged segments, correlated random walk, free range-of-motion sweeps).
Shard make_identity_shard(const world::World& w, int64_t identity_seed, int frames,
                          int sessions, uint64_t stream_seed, bool labeled);

void write_shard(const std::string& root, const std::string& name, const Shard& shard,
                 const world::World& w, ShardInfo& info_out);
Shard read_shard(const std::string& root, const ShardInfo& info);

DatasetManifest generate_dataset(const GenerationConfig& cfg, const std::string& out_dir);

void write_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest read_manifest(const std::string& path);

// Checks every referenced shard exists and matches its recorded frame count.
void validate_manifest(const DatasetManifest& m);

uint64_t file_digest(const std::string& path);

}  // namespace hmc::io
