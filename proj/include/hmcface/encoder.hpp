#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hmcface/decoder.hpp"
#include "hmcface/io.hpp"
#include "hmcface/nn.hpp"
#include "hmcface/world.hpp"

namespace hmc::encoder {

using ad::Var;

// Feature calibration variants. Late fusion is the default; the others exist
// for the architecture comparison.
enum class CalibArch {
    kLateFusion,
    kSelfAttention,
    kCrossAttention,
    kPooling,
    kEarlyFusion,
};

CalibArch calib_arch_from_string(const std::string& s);
std::string to_string(CalibArch a);

struct EncoderConfig {
    int input_res = 32;  // views resized to this before the trunk
    int c1 = 12, c2 = 24, c3 = 48;
    int compress_c = 8;
    int region_c = 16;
    int fuse_hidden = 192;
    int gaze_hidden = 48;
    std::vector<std::string> anchor_tags;  // M = anchor_tags.size()
    CalibArch calib = CalibArch::kLateFusion;
    uint64_t init_seed = 1;
};

// Per-region, per-anchor, per-view conditioning inputs: compressed feature
// maps for most architectures, canonicalized images for early fusion.
struct AnchorCache {
    uint64_t weights_digest = 0;
    int m = 0;
    std::array<std::vector<std::array<Tensor, 2>>, 2> entries;
};

using AnchorEntries = std::array<std::vector<std::array<Var, 2>>, 2>;

struct EncoderOutput {
    Tensor e;   // [4,4,16]
    Tensor g6;  // [6], unit per eye
    world::GazePair gaze;
};

// First four cameras of an 8-view stack.
Tensor tracking_views(const Tensor& views8);

// The two views of a region in canonical orientation at the trunk input
// resolution. Region 0 is the upper face (eye cameras), 1 the lower face
// (mouth cameras); the right-side view is flipped horizontally.
std::array<Tensor, 2> region_inputs(const Tensor& views4, int region, int input_res);

class Encoder {
public:
    explicit Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {}
    const EncoderConfig& config() const { return cfg_; }
    int spatial() const { return cfg_.input_res / 8; }
    int anchors() const { return static_cast<int>(cfg_.anchor_tags.size()); }

    void init(nn::ParamStore& store) const;

    // Shared per-region backbone on one canonicalized view.
    Var extract(nn::Ctx& ctx, int region, const Var& img) const;
    Var compress(nn::Ctx& ctx, int region, const Var& feat) const;
    // Anchor conditioning on one view's features (non-early-fusion archs).
    Var calibrate(nn::Ctx& ctx, int region, const Var& current,
                  const std::vector<Var>& anchor_feats) const;
    // Full per-view pipeline: canonical image plus that view's anchor entries.
    Var view_feature(nn::Ctx& ctx, int region, const Var& img,
                     const std::vector<Var>& anchor_entries) const;

    // Differentiable forward over the 4 tracking views.
    std::pair<Var, Var> forward(nn::Ctx& ctx, const Tensor& views4,
                                const AnchorEntries& anchors) const;

    // Anchor entries computed live (gradients flow into the trunk).
    AnchorEntries anchor_entries(nn::Ctx& ctx, const std::vector<Tensor>& anchor_views) const;

    AnchorCache build_cache(const nn::ParamStore& store,
                            const std::vector<Tensor>& anchor_views) const;

    EncoderOutput encode(const nn::ParamStore& store, const Tensor& views4,
                         const AnchorCache& cache) const;
    EncoderOutput encode_inline(const nn::ParamStore& store, const Tensor& views4,
                                const std::vector<Tensor>& anchor_views) const;

private:
    EncoderConfig cfg_;
};

// ---- losses ----

// Mean absolute difference over mask > 0 pixels, normalized by mask sum.
Var masked_l1(const Var& a, const Var& b, const Tensor& mask);

// Frontal rendering of a decoded state.
Var render_front(const world::World& w, const world::IdentityParams& id, const Var& e,
                 const Var& g6, const decoder::RenderOptions& opts);

// Photometric loss at the frontal viewpoint over the W1 face mask. When
// target is given it must be the precomputed truth rendering at opts
// resolution; otherwise it is rendered here.
Var loss_photometric(const world::World& w, const world::IdentityParams& id, const Var& e_hat,
                     const Var& g_hat6, const Tensor& e_star, const Tensor& g_star,
                     const Tensor& w1_mask, const decoder::RenderOptions& opts,
                     const Tensor* target = nullptr);

// Weighted mean per-vertex displacement magnitude in mm.
Var weighted_vertex_l1(const Var& verts, const Tensor& verts_ref, const Tensor& w2);

Var loss_geometric(const world::World& w, const world::IdentityParams& id, const Var& e_hat,
                   const Tensor& e_star, const Tensor& g_star, const Tensor& w2);

// Squared azimuth/altitude error summed over both eyes, radians.
Var loss_gaze(const Var& g_hat6, const Tensor& g_star6);

struct Critic {
    std::string name = "critic";
    int in = world::kCodeDim;
    int hidden = 64;
    void init(nn::ParamStore& store, Rng& rng) const;
    Var operator()(nn::Ctx& ctx, const Var& batch) const;  // [B,256] -> [B,1]
};

struct DiscResult {
    Var critic_loss;   // minimized by the critic
    Var encoder_term;  // -mean h(e_hat), added to the encoder loss
};

// WGAN-GP pair of objectives. interp_u holds one uniform coefficient per
// batch row; the critic loss sees e_hat detached.
DiscResult loss_discriminator(const Var& e_hat_batch, const Tensor& prior_batch,
                              const Critic& critic, nn::Ctx& cctx, const Tensor& interp_u,
                              double gp_weight = 10.0);

// ---- training data plumbing ----

struct LabeledFrame {
    Tensor views4;  // [4,res,res]
    Tensor e_star;  // [256]
    Tensor g_star;  // [6]
    // lazy caches filled during training
    Tensor photo_target;
    Tensor verts_star;
};

struct IdentityData {
    int64_t seed = 0;
    world::IdentityParams id;
    std::vector<LabeledFrame> frames;
    std::map<std::string, std::vector<int>> tag_frames;
};

struct TrainSet {
    std::vector<IdentityData> ids;
    int view_res = 0;
};

// Oracle-labeled training set straight from labeled shards.
TrainSet trainset_from_shards(const std::vector<io::Shard>& shards);

// Anchor frames for the requested tags; jitter picks uniformly inside the
// tagged segment, otherwise the first tagged frame is used.
std::vector<Tensor> anchor_views_for(const IdentityData& idd,
                                     const std::vector<std::string>& tags, Rng* jitter);

// ---- augmentation ----

Tensor rotate_scale_view(const Tensor& img, double deg, double scale);
Tensor augment_views(const Tensor& views4, Rng& rng, double max_rot_deg, double max_scale,
                     int cutmix_patches, const Tensor* mix_views4);

// ---- training ----

struct TrainConfig {
    int steps = 400;
    int batch = 8;
    double lr = 1e-3;
    double weight_decay = 1e-5;
    double lambda_geo = 1.0;
    double lambda_gaze = 20.0;
    double lambda_disc = 0.1;
    double gp_weight = 10.0;
    std::string loss_mode = "perceptual";  // or "code"
    int photo_res = 32;
    double aug_rot_deg = 15.0;
    double aug_scale_max = 1.1;
    int cutmix_patches = 3;
    uint64_t seed = 7;
    int log_every = 25;
    std::vector<int64_t> holdout_ids;  // identity seeds excluded from training
    int eval_frames = 40;              // per held-out identity
};

struct TrainLogEntry {
    int step = 0;
    double total = 0, photo = 0, geo = 0, gaze = 0, adv = 0;
};

struct TrainResult {
    nn::ParamStore store;
    std::vector<TrainLogEntry> log;
    double holdout_photo = 0;  // median per identity, mean across identities
};

TrainResult train_encoder(const world::World& w, TrainSet& data, const EncoderConfig& ecfg,
                          const TrainConfig& tcfg, const nn::ParamStore* init = nullptr);

// Median masked photometric L1 on one identity's frames with the encoder's
// own deterministic anchors.
double eval_photometric(const world::World& w, const Encoder& enc, const nn::ParamStore& store,
                        IdentityData& idd, int max_frames, const decoder::RenderOptions& opts);

}  // namespace hmc::encoder
