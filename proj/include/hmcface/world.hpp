#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hmcface/autodiff.hpp"
#include "hmcface/rng.hpp"
#include "hmcface/tensor.hpp"

namespace hmc::world {

// Mesh topology: a 24x24 face grid plus two 25-vertex eye discs
// (center, inner ring of 8, outer ring of 16).
constexpr int kGridN = 24;
constexpr int kFaceVerts = kGridN * kGridN;
constexpr int kDiscVerts = 25;
constexpr int kNumVerts = kFaceVerts + 2 * kDiscVerts;
constexpr int kDiscLStart = kFaceVerts;
constexpr int kDiscRStart = kFaceVerts + kDiscVerts;
constexpr int kNumLatents = 8;
constexpr int kCodeDim = 256;
constexpr int kNumLandmarks = 96;
constexpr int kNumCams = 8;
constexpr int kNumTrackingCams = 4;
constexpr int kReferenceRes = 96;

// latent slots
enum LatentIdx {
    kJaw = 0,
    kSmileL = 1,
    kSmileR = 2,
    kBrowL = 3,
    kBrowR = 4,
    kEyeCloseL = 5,
    kEyeCloseR = 6,
    kPucker = 7,
};

struct WorldConfig {
    int view_resolution = 96;
    // splat radius in px at the 96 px reference resolution, scaled linearly
    double splat_radius = 2.5;
    double noise_sigma = 0.01;
    double g0_min = 0.7, g0_max = 1.3;
    double rho_min = 0.45, rho_max = 0.75;  // fraction of resolution
    double don_trans = 0.025;               // fraction of resolution
    double don_rot_deg = 7.0;
    double don_scale_min = 0.93, don_scale_max = 1.06;
};

struct IdentityParams {
    int64_t identity_seed = 0;
    Tensor rest_mesh;        // [V,3] mm
    Tensor albedo;           // [V,3] in [0,1]
    Tensor blend_bases;      // [K,V,3] mm at unit activation
    Tensor feature_offsets;  // [96,3] mm, identity shift at each landmark
    Tensor splat_alpha;      // [V] constant per-vertex opacity
    Tensor eye_center_l, eye_center_r;  // [3] rotation pivots
};

struct GazePair {
    Tensor left;   // [3] unit
    Tensor right;  // [3] unit
};

struct ExpressionSample {
    Tensor s;  // [8] in [-1,1]
    Tensor e;  // [256]
    GazePair gaze;
};

struct Camera {
    std::string name;
    Tensor rot;    // [3,3] world->camera
    Tensor trans;  // [3]
    double fx = 0, fy = 0, cx = 0, cy = 0;
};

struct CameraDonning {
    double dx = 0, dy = 0;  // px
    double roll_deg = 0;
    double scale = 1;
};

struct CameraLighting {
    double gain = 1.0;
    double falloff_px = 1e9;
    double noise_sigma = 0.0;
};

struct SessionState {
    int64_t session_seed = 0;
    std::array<CameraDonning, kNumCams> donning;
    std::array<CameraLighting, kNumCams> lighting;
};

struct HmcFrame {
    Tensor views;      // [8,res,res] in [0,1]
    Tensor keypoints;  // [8,96,2] px
    Tensor e_true;     // [256] when labeled, empty otherwise
    Tensor g_true;     // [6] when labeled, empty otherwise
    int64_t identity_seed = 0;
    int64_t session_seed = 0;
    int frame_index = 0;
};

struct World {
    uint64_t seed = 0;
    WorldConfig cfg;
    Tensor map;       // [256,8] latent -> code, no bias
    Tensor map_pinv;  // [8,256]
    std::vector<Camera> cameras;             // donning-free rig at cfg resolution
    std::vector<int> landmarks;              // [96] vertex indices
    std::vector<int> landmark_mirror;        // landmark j <-> mirrored landmark
    std::array<int, 4> mouth_probe;          // corner L, corner R, upper, lower
    std::vector<int> vertex_mirror;          // vertex permutation under x flip
};

// expression tag vocabulary, 15 entries
const std::vector<std::string>& expression_vocabulary();
Tensor latent_for_tag(const std::string& tag);  // throws on unknown tag

World make_world(uint64_t seed, const WorldConfig& cfg = {});

IdentityParams mean_identity();
IdentityParams sample_identity(int64_t seed);
IdentityParams mirror_identity(const IdentityParams& id);

Tensor mirror_latent(const Tensor& s);
GazePair mirror_gaze(const GazePair& g);

Tensor expression_code(const World& w, const Tensor& s);
Tensor inverse_expression_code(const World& w, const Tensor& e);

ExpressionSample sample_expression(const World& w, uint64_t seed,
                                   const std::optional<std::string>& tag = std::nullopt);

SessionState nominal_session();
SessionState sample_session(const World& w, uint64_t seed);
SessionState mirror_session(const SessionState& s);

// Camera with donning folded into intrinsics and extrinsics.
Camera donned_camera(const Camera& cam, const CameraDonning& d);

GazePair forward_gaze();
Tensor pack_gaze(const GazePair& g);    // [6]
GazePair unpack_gaze(const Tensor& g6);

// Landmark pixel positions of the mean identity at rest through the
// nominal rig, [8,96,2].
Tensor template_keypoints(const World& w);

HmcFrame render_hmc_frame(const World& w, const IdentityParams& id, const Tensor& e,
                          const GazePair& g, const SessionState& session, bool labeled);

}  // namespace hmc::world
