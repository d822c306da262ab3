#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <set>

#include "doctest.h"
#include "hmcface/io.hpp"
#include "hmcface/world.hpp"

using namespace hmc;
using namespace hmc::world;
namespace fs = std::filesystem;

TEST_CASE("identity sampling is deterministic and seeds are distinct") {
    IdentityParams a = sample_identity(7);
    IdentityParams b = sample_identity(7);
    CHECK(a.rest_mesh.digest() == b.rest_mesh.digest());
    CHECK(a.albedo.digest() == b.albedo.digest());
    CHECK(a.blend_bases.digest() == b.blend_bases.digest());
    CHECK(a.feature_offsets.digest() == b.feature_offsets.digest());
    CHECK(a.splat_alpha.digest() == b.splat_alpha.digest());

    IdentityParams c = sample_identity(8);
    double worst = 0;
    for (int i = 0; i < kNumVerts; ++i) {
        double d2 = 0;
        for (int k = 0; k < 3; ++k) {
            const double d = a.rest_mesh.at2(i, k) - c.rest_mesh.at2(i, k);
            d2 += d * d;
        }
        worst = std::max(worst, d2);
    }
    CHECK(std::sqrt(worst) > 0.1);
}

TEST_CASE("albedo stays in range across seeds") {
    for (int64_t seed : {1, 2, 3, 77}) {
        IdentityParams id = sample_identity(seed);
        for (int64_t i = 0; i < id.albedo.size(); ++i) {
            CHECK(id.albedo[i] >= 0.0);
            CHECK(id.albedo[i] <= 1.0);
        }
        CHECK(id.rest_mesh.all_finite());
        CHECK(id.blend_bases.all_finite());
    }
}

TEST_CASE("neutral tag gives the zero latent and zero code") {
    World w = make_world(11);
    ExpressionSample ex = sample_expression(w, 123, std::string("neutral"));
    for (int k = 0; k < kNumLatents; ++k) CHECK(ex.s[k] == 0.0);
    for (int r = 0; r < kCodeDim; ++r) CHECK(ex.e[r] == 0.0);

    ExpressionSample jaw = sample_expression(w, 123, std::string("jaw_open_max"));
    CHECK(jaw.s[kJaw] == 1.0);
    for (int k = 1; k < kNumLatents; ++k) CHECK(jaw.s[k] == 0.0);
}

TEST_CASE("expression sampling is deterministic and rejects unknown tags") {
    World w = make_world(11);
    ExpressionSample a = sample_expression(w, 55);
    ExpressionSample b = sample_expression(w, 55);
    CHECK(a.s.digest() == b.s.digest());
    CHECK(a.e.digest() == b.e.digest());
    CHECK(pack_gaze(a.gaze).digest() == pack_gaze(b.gaze).digest());

    CHECK_THROWS_WITH_AS(sample_expression(w, 1, std::string("sneeze")),
                         doctest::Contains("pucker_max"), HmcError);
    CHECK_THROWS_WITH_AS(sample_expression(w, 1, std::string("sneeze")),
                         doctest::Contains("neutral"), HmcError);

    for (const auto& tag : expression_vocabulary()) {
        Tensor s = latent_for_tag(tag);
        for (int k = 0; k < kNumLatents; ++k) {
            CHECK(s[k] >= -1.0);
            CHECK(s[k] <= 1.0);
        }
    }
}

TEST_CASE("tagged codes are identical across sample seeds") {
    World w = make_world(11);
    ExpressionSample a = sample_expression(w, 1, std::string("jaw_open_max"));
    ExpressionSample b = sample_expression(w, 999, std::string("jaw_open_max"));
    CHECK(a.e.digest() == b.e.digest());
}

TEST_CASE("world map inversion round trips within 1e-9") {
    World w = make_world(11);
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor s({kNumLatents});
        for (int k = 0; k < kNumLatents; ++k) s[k] = rng.uniform(-1.0, 1.0);
        Tensor e = expression_code(w, s);
        Tensor back = inverse_expression_code(w, e);
        CHECK(back.max_abs_diff(s) < 1e-9);
    }
}

TEST_CASE("untagged latents are truncated, zero mean, with unit gaze") {
    World w = make_world(11);
    Tensor mean({kNumLatents});
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        ExpressionSample ex = sample_expression(w, 100000 + i);
        for (int k = 0; k < kNumLatents; ++k) {
            CHECK(ex.s[k] >= -1.0);
            CHECK(ex.s[k] <= 1.0);
            mean[k] += ex.s[k] / n;
        }
        for (const Tensor* g : {&ex.gaze.left, &ex.gaze.right}) {
            const double norm =
                std::sqrt((*g)[0] * (*g)[0] + (*g)[1] * (*g)[1] + (*g)[2] * (*g)[2]);
            CHECK(std::fabs(norm - 1.0) < 1e-9);
        }
    }
    for (int k = 0; k < kNumLatents; ++k) CHECK(std::fabs(mean[k]) <= 0.05);
}

TEST_CASE("nominal frame reproduces the template keypoints exactly") {
    World w = make_world(11);
    IdentityParams id = mean_identity();
    Tensor e0({kCodeDim});
    HmcFrame fr = render_hmc_frame(w, id, e0, forward_gaze(), nominal_session(), true);
    Tensor tmpl = template_keypoints(w);
    CHECK(fr.keypoints.digest() == tmpl.digest());

    const int res = w.cfg.view_resolution;
    CHECK(fr.views.dim(0) == kNumCams);
    CHECK(fr.views.dim(1) == res);
    CHECK(fr.views.dim(2) == res);
    for (int64_t i = 0; i < fr.views.size(); ++i) {
        CHECK(fr.views[i] >= 0.0);
        CHECK(fr.views[i] <= 1.0);
    }
    CHECK(fr.e_true.size() == kCodeDim);
    CHECK(fr.g_true.size() == 6);

    HmcFrame unl = render_hmc_frame(w, id, e0, forward_gaze(), nominal_session(), false);
    CHECK(unl.e_true.size() == 0);
    CHECK(unl.g_true.size() == 0);
}

TEST_CASE("frames are deterministic in their arguments") {
    World w = make_world(11);
    IdentityParams id = sample_identity(3);
    ExpressionSample ex = sample_expression(w, 17);
    SessionState sess = sample_session(w, 5);
    HmcFrame a = render_hmc_frame(w, id, ex.e, ex.gaze, sess, true);
    HmcFrame b = render_hmc_frame(w, id, ex.e, ex.gaze, sess, true);
    CHECK(a.views.digest() == b.views.digest());
    CHECK(a.keypoints.digest() == b.keypoints.digest());
}

TEST_CASE("keypoints stay within image bounds with slack") {
    World w = make_world(11);
    const int res = w.cfg.view_resolution;
    for (int64_t iseed : {301, 302, 303}) {
        IdentityParams id = sample_identity(iseed);
        for (uint64_t sseed : {41u, 42u}) {
            SessionState sess = sample_session(w, sseed);
            std::vector<ExpressionSample> exs = {
                sample_expression(w, 7 * iseed + sseed),
                sample_expression(w, 11 * iseed + sseed, std::string("jaw_open_max")),
            };
            for (const auto& ex : exs) {
                HmcFrame fr = render_hmc_frame(w, id, ex.e, ex.gaze, sess, false);
                for (int c = 0; c < kNumCams; ++c)
                    for (int j = 0; j < kNumLandmarks; ++j) {
                        const double u = fr.keypoints.at3(c, j, 0);
                        const double v = fr.keypoints.at3(c, j, 1);
                        CHECK(u >= -20.0);
                        CHECK(u <= res - 1 + 20.0);
                        CHECK(v >= -20.0);
                        CHECK(v <= res - 1 + 20.0);
                    }
            }
        }
    }
}

TEST_CASE("sampled sessions respect the invariant bounds") {
    World w = make_world(11);
    for (uint64_t seed = 0; seed < 300; ++seed) {
        SessionState s = sample_session(w, seed);
        for (int c = 0; c < kNumCams; ++c) {
            CHECK(s.donning[c].scale >= 0.85);
            CHECK(s.donning[c].scale <= 1.15);
            CHECK(std::fabs(s.donning[c].roll_deg) <= 10.0);
            CHECK(s.lighting[c].gain >= 0.4);
            CHECK(s.lighting[c].gain <= 1.6);
            CHECK(s.lighting[c].falloff_px > 0.0);
        }
    }
}

TEST_CASE("mirrored scenes render as horizontally flipped swapped views") {
    WorldConfig cfg;
    cfg.noise_sigma = 0.0;
    World w = make_world(11, cfg);
    const int res = cfg.view_resolution;
    static const int cam_swap[kNumCams] = {1, 0, 3, 2, 5, 4, 7, 6};

    IdentityParams id = sample_identity(5);
    IdentityParams idm = mirror_identity(id);
    ExpressionSample ex = sample_expression(w, 21);
    Tensor sm = mirror_latent(inverse_expression_code(w, ex.e));
    Tensor em = expression_code(w, sm);
    GazePair gm = mirror_gaze(ex.gaze);
    SessionState sess = sample_session(w, 9);
    SessionState sessm = mirror_session(sess);

    HmcFrame f = render_hmc_frame(w, id, ex.e, ex.gaze, sess, false);
    HmcFrame m = render_hmc_frame(w, idm, em, gm, sessm, false);

    double worst_view = 0, worst_kp = 0;
    for (int c = 0; c < kNumCams; ++c) {
        const int sc = cam_swap[c];
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x)
                worst_view = std::max(
                    worst_view, std::fabs(m.views.at3(c, y, x) - f.views.at3(sc, y, res - 1 - x)));
        for (int j = 0; j < kNumLandmarks; ++j) {
            const int mj = w.landmark_mirror[j];
            worst_kp = std::max(worst_kp, std::fabs(m.keypoints.at3(c, j, 0) -
                                                    (res - 1 - f.keypoints.at3(sc, mj, 0))));
            worst_kp = std::max(
                worst_kp, std::fabs(m.keypoints.at3(c, j, 1) - f.keypoints.at3(sc, mj, 1)));
        }
    }
    CHECK(worst_view < 1e-9);
    CHECK(worst_kp < 1e-9);
}

TEST_CASE("mirror helpers are involutions") {
    Rng rng(4);
    Tensor s({kNumLatents});
    for (int k = 0; k < kNumLatents; ++k) s[k] = rng.uniform(-1.0, 1.0);
    CHECK(mirror_latent(mirror_latent(s)).digest() == s.digest());

    World w = make_world(11);
    for (int j = 0; j < kNumLandmarks; ++j) {
        const int mj = w.landmark_mirror[j];
        CHECK(w.landmark_mirror[mj] == j);
        CHECK(w.vertex_mirror[w.landmarks[j]] == w.landmarks[mj]);
    }
    std::set<int> uniq(w.landmarks.begin(), w.landmarks.end());
    CHECK(uniq.size() == static_cast<size_t>(kNumLandmarks));
}

TEST_CASE("shards round trip through disk") {
    world::WorldConfig wc;
    wc.view_resolution = 16;
    World w = make_world(11, wc);
    io::Shard shard = io::make_identity_shard(w, 900, 12, 2, 1, true);

    const fs::path dir = fs::temp_directory_path() / "hmcface_shard_rt";
    fs::create_directories(dir);
    io::ShardInfo info;
    io::write_shard(dir.string(), "probe", shard, w, info);
    io::Shard back = io::read_shard(dir.string(), info);
    CHECK(back.labeled);
    CHECK(back.views.shape() == shard.views.shape());
    CHECK(back.keypoints.shape() == shard.keypoints.shape());
    CHECK(back.session_index == shard.session_index);
    CHECK(back.session_seeds == shard.session_seeds);
    // float32 storage: compare at single precision
    CHECK(back.views.max_abs_diff(shard.views) < 1e-6);
    CHECK(back.e_true.max_abs_diff(shard.e_true) < 1e-4);
    fs::remove_all(dir);
}

TEST_CASE("dataset generation reports spec-size counts and regenerates bitwise") {
    io::GenerationConfig cfg;
    cfg.world.view_resolution = 16;
    cfg.paired_identities = 12;
    cfg.paired_frames = 400;
    cfg.ssl_identities = 60;
    cfg.ssl_frames = 400;

    const fs::path dir_a = fs::temp_directory_path() / "hmcface_ds_a";
    const fs::path dir_b = fs::temp_directory_path() / "hmcface_ds_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);

    io::DatasetManifest a = io::generate_dataset(cfg, dir_a.string());
    CHECK(a.labeled_frames == 4800);
    CHECK(a.unlabeled_frames == 24000);
    CHECK(a.shards.size() == 72);
    io::validate_manifest(a);

    io::DatasetManifest loaded = io::read_manifest((dir_a / "manifest.json").string());
    CHECK(loaded.labeled_frames == a.labeled_frames);
    CHECK(loaded.shards.size() == a.shards.size());
    for (size_t i = 0; i < a.shards.size(); ++i)
        CHECK(loaded.shards[i].digest == a.shards[i].digest);

    // paired shards carry truth, ssl shards none
    io::Shard paired = io::read_shard(dir_a.string(), a.shards.front());
    CHECK(paired.labeled);
    CHECK(paired.e_true.size() == 400 * kCodeDim);
    CHECK(paired.g_true.size() == 400 * 6);
    io::Shard ssl = io::read_shard(dir_a.string(), a.shards.back());
    CHECK_FALSE(ssl.labeled);
    CHECK(ssl.e_true.size() == 0);
    CHECK(ssl.g_true.size() == 0);

    io::DatasetManifest b = io::generate_dataset(cfg, dir_b.string());
    REQUIRE(b.shards.size() == a.shards.size());
    for (size_t i = 0; i < a.shards.size(); ++i) {
        CHECK(a.shards[i].digest == b.shards[i].digest);
        CHECK(io::file_digest((dir_a / (a.shards[i].name + ".bin")).string()) ==
              io::file_digest((dir_b / (b.shards[i].name + ".bin")).string()));
    }
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("duplicate identity seeds are rejected") {
    io::GenerationConfig cfg;
    cfg.world.view_resolution = 16;
    cfg.paired_frames = 2;
    cfg.ssl_frames = 2;
    cfg.paired_seeds = {100, 101};
    cfg.ssl_seeds = {101, 102};
    const fs::path dir = fs::temp_directory_path() / "hmcface_ds_dup";
    fs::remove_all(dir);
    CHECK_THROWS_WITH_AS(io::generate_dataset(cfg, dir.string()), doctest::Contains("duplicate"),
                         HmcError);
    fs::remove_all(dir);
}
