#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "hmcface/decoder.hpp"
#include "hmcface/gradcheck.hpp"
#include "hmcface/world.hpp"

using namespace hmc;
using namespace hmc::world;
namespace dec = hmc::decoder;

namespace {

Tensor random_code(const World& w, uint64_t seed) {
    Rng rng(seed);
    Tensor s({kNumLatents});
    for (int k = 0; k < kNumLatents; ++k) s[k] = rng.uniform(-0.9, 0.9);
    return expression_code(w, s);
}

Tensor gaze_dir(double az, double alt) {
    Tensor g({3});
    g[0] = std::sin(az) * std::cos(alt);
    g[1] = std::sin(alt);
    g[2] = std::cos(az) * std::cos(alt);
    return g;
}

Tensor pack_dirs(const Tensor& l, const Tensor& r) {
    Tensor g({6});
    for (int i = 0; i < 3; ++i) {
        g[i] = l[i];
        g[3 + i] = r[i];
    }
    return g;
}

Tensor luminance_of(const Tensor& tex) {
    Tensor lum({tex.dim(0), 1});
    for (int i = 0; i < tex.dim(0); ++i)
        lum.at2(i, 0) = 0.299 * tex.at2(i, 0) + 0.587 * tex.at2(i, 1) + 0.114 * tex.at2(i, 2);
    return lum;
}

}  // namespace

TEST_CASE("zero code decodes to the rest mesh exactly") {
    World w = make_world(11);
    for (int64_t seed : {1, 9}) {
        IdentityParams id = sample_identity(seed);
        Tensor e0({kCodeDim});
        auto [verts, tex] = dec::decode_tensors(w, id, e0, pack_gaze(forward_gaze()));
        CHECK(verts.digest() == id.rest_mesh.digest());
        bool tex_ok = true;
        for (int64_t i = 0; i < tex.size(); ++i)
            if (tex[i] < 0.0 || tex[i] > 1.0) tex_ok = false;
        CHECK(tex_ok);
    }
}

TEST_CASE("face deformation is linear in the code") {
    World w = make_world(11);
    IdentityParams id = sample_identity(2);
    Tensor e = random_code(w, 33);
    Tensor e2 = e;
    for (int r = 0; r < kCodeDim; ++r) e2[r] *= 2.0;
    Tensor g6 = pack_gaze(forward_gaze());
    auto [v1, t1] = dec::decode_tensors(w, id, e, g6);
    auto [v2, t2] = dec::decode_tensors(w, id, e2, g6);
    (void)t1;
    (void)t2;
    double worst = 0;
    for (int i = 0; i < kFaceVerts; ++i)
        for (int c = 0; c < 3; ++c) {
            const double d1 = v1.at2(i, c) - id.rest_mesh.at2(i, c);
            const double d2 = v2.at2(i, c) - id.rest_mesh.at2(i, c);
            worst = std::max(worst, std::fabs(d2 - 2.0 * d1));
        }
    CHECK(worst < 1e-10);
}

TEST_CASE("left gaze moves only the left eye disc, bitwise") {
    World w = make_world(11);
    IdentityParams id = sample_identity(4);
    Tensor e = random_code(w, 7);
    Tensor base = pack_dirs(gaze_dir(0.1, -0.05), gaze_dir(0.12, -0.04));
    Tensor moved = pack_dirs(gaze_dir(0.3, 0.1), gaze_dir(0.12, -0.04));
    auto [v1, t1] = dec::decode_tensors(w, id, e, base);
    auto [v2, t2] = dec::decode_tensors(w, id, e, moved);
    (void)t1;
    (void)t2;
    int changed = 0;
    bool rest_untouched = true;
    for (int i = 0; i < kNumVerts; ++i) {
        bool same = true;
        for (int c = 0; c < 3; ++c)
            if (v1.at2(i, c) != v2.at2(i, c)) same = false;
        const bool left_disc = i >= kDiscLStart && i < kDiscLStart + kDiscVerts;
        if (!left_disc && !same) rest_untouched = false;
        if (!same) ++changed;
    }
    CHECK(rest_untouched);
    CHECK(changed > 0);
}

TEST_CASE("eye discs stay rigid under gaze") {
    World w = make_world(11);
    IdentityParams id = sample_identity(6);
    Tensor e = random_code(w, 70);
    Tensor g_a = pack_dirs(gaze_dir(0.0, 0.0), gaze_dir(0.0, 0.0));
    Tensor g_b = pack_dirs(gaze_dir(0.35, 0.2), gaze_dir(-0.3, -0.15));
    auto [va, ta] = dec::decode_tensors(w, id, e, g_a);
    auto [vb, tb] = dec::decode_tensors(w, id, e, g_b);
    (void)ta;
    (void)tb;
    for (int start : {kDiscLStart, kDiscRStart}) {
        double worst = 0;
        for (int i = 0; i < kDiscVerts; ++i)
            for (int j = i + 1; j < kDiscVerts; ++j) {
                double da = 0, db = 0;
                for (int c = 0; c < 3; ++c) {
                    const double xa = va.at2(start + i, c) - va.at2(start + j, c);
                    const double xb = vb.at2(start + i, c) - vb.at2(start + j, c);
                    da += xa * xa;
                    db += xb * xb;
                }
                worst = std::max(worst, std::fabs(std::sqrt(da) - std::sqrt(db)));
            }
        CHECK(worst < 1e-9);
    }
}

TEST_CASE("decoding a mapped latent reproduces the direct blend") {
    World w = make_world(11);
    IdentityParams id = sample_identity(8);
    Rng rng(15);
    Tensor s({kNumLatents});
    for (int k = 0; k < kNumLatents; ++k) s[k] = rng.uniform(-1.0, 1.0);
    Tensor e = expression_code(w, s);
    Tensor g6 = pack_gaze(forward_gaze());
    auto [v, t] = dec::decode_tensors(w, id, e, g6);
    (void)t;

    double worst = 0;
    for (int i = 0; i < kFaceVerts; ++i)
        for (int c = 0; c < 3; ++c) {
            double want = id.rest_mesh.at2(i, c);
            for (int k = 0; k < kNumLatents; ++k)
                want += s[k] * id.blend_bases.at3(k, i, c);
            worst = std::max(worst, std::fabs(v.at2(i, c) - want));
        }
    CHECK(worst < 1e-9);
}

TEST_CASE("render is deterministic, in range, and NaN free") {
    World w = make_world(11);
    IdentityParams id = sample_identity(3);
    Tensor e = random_code(w, 5);
    Tensor g6 = pack_gaze(forward_gaze());
    dec::RenderOptions opts;
    Tensor img1 = dec::render_tensor(w, id, e, g6, dec::v_front(), opts);
    Tensor img2 = dec::render_tensor(w, id, e, g6, dec::v_front(), opts);
    CHECK(img1.digest() == img2.digest());
    CHECK(img1.dim(0) == opts.resolution);
    CHECK(img1.dim(1) == opts.resolution);
    CHECK(img1.all_finite());
    bool in_range = true;
    for (int64_t i = 0; i < img1.size(); ++i)
        if (img1[i] < 0.0 || img1[i] > 1.0) in_range = false;
    CHECK(in_range);

    // extreme but finite geometry still renders clean
    dec::RenderOptions small;
    small.resolution = 24;
    Camera cam = dec::camera_from_viewpoint(dec::v_front(), small);
    const double radius = dec::effective_radius(small.splat_radius, small.resolution);
    ad::Var far_verts = ad::constant(Tensor::full({4, 3}, 1e8));
    ad::Var behind = ad::constant(Tensor({2, 3}, {0, 0, 425, 1e-12, 1e-12, 1e-12}));
    ad::Var tex1 = ad::constant(Tensor::full({4, 1}, 0.5));
    ad::Var tex2 = ad::constant(Tensor::full({2, 1}, 1.0));
    Tensor far_img =
        dec::render_camera(far_verts, tex1, cam, small.resolution, radius, small.bg_eps, nullptr)
            ->value;
    Tensor behind_img =
        dec::render_camera(behind, tex2, cam, small.resolution, radius, small.bg_eps, nullptr)
            ->value;
    CHECK(far_img.all_finite());
    CHECK(behind_img.all_finite());
    bool clean = true;
    for (int64_t i = 0; i < behind_img.size(); ++i)
        if (behind_img[i] < 0.0 || behind_img[i] > 1.0) clean = false;
    CHECK(clean);
}

TEST_CASE("mean intensity gradient in vertices passes grad_check") {
    World w = make_world(11);
    IdentityParams id = mean_identity();
    Tensor e0({kCodeDim});
    Tensor g6 = pack_gaze(forward_gaze());
    auto [verts0, tex0] = dec::decode_tensors(w, id, e0, g6);

    dec::RenderOptions opts;
    opts.resolution = 32;
    Camera cam = dec::camera_from_viewpoint(dec::v_front(), opts);
    auto alpha = std::make_shared<const Tensor>(id.splat_alpha);
    Tensor lum = luminance_of(tex0);
    const double radius = dec::effective_radius(opts.splat_radius, opts.resolution);

    ad::Var vleaf = ad::leaf(verts0);
    ad::Var img = dec::render_camera(vleaf, ad::constant(lum), cam, opts.resolution, radius,
                                     opts.bg_eps, alpha);
    ad::Var loss = ad::mean_all(img);
    Tensor g = ad::gradients(loss, {vleaf})[0]->value;

    Rng rng(99);
    for (int checked = 0; checked < 12; ++checked) {
        const int vi = static_cast<int>(rng.uniform_int(kNumVerts));
        const int c = static_cast<int>(rng.uniform_int(3));
        auto value_fn = [&](const std::vector<double>& xs) {
            Tensor v2 = verts0;
            v2.at2(vi, c) = xs[0];
            ad::Var im = dec::render_camera(ad::constant(v2), ad::constant(lum), cam,
                                            opts.resolution, radius, opts.bg_eps, alpha);
            return im->value.mean();
        };
        GradReport rep = grad_check(value_fn, {g.at2(vi, c)}, {verts0.at2(vi, c)}, 1e-4, 1e-3);
        CHECK(rep.passed);
        if (!rep.passed) MESSAGE("vertex ", vi, " coord ", c, ": ", rep.note);
    }
}

TEST_CASE("five millimeter shift moves the image by the projected pixels") {
    World w = make_world(11);
    IdentityParams id = sample_identity(12);
    Tensor e = random_code(w, 3);
    Tensor g6 = pack_gaze(forward_gaze());
    dec::RenderOptions opts;
    auto [verts, tex] = dec::decode_tensors(w, id, e, g6);
    Tensor shifted = verts;
    for (int i = 0; i < kNumVerts; ++i) shifted.at2(i, 0) += 5.0;

    Camera cam = dec::camera_from_viewpoint(dec::v_front(), opts);
    auto alpha = std::make_shared<const Tensor>(id.splat_alpha);
    Tensor lum = luminance_of(tex);
    const double radius = dec::effective_radius(opts.splat_radius, opts.resolution);
    Tensor img_a = dec::render_camera(ad::constant(verts), ad::constant(lum), cam, opts.resolution,
                                      radius, opts.bg_eps, alpha)
                       ->value;
    Tensor img_b = dec::render_camera(ad::constant(shifted), ad::constant(lum), cam,
                                      opts.resolution, radius, opts.bg_eps, alpha)
                       ->value;

    // horizontal cross-correlation peak over integer shifts
    const int res = opts.resolution;
    int best_shift = 0;
    double best = -1e18;
    for (int shift = -12; shift <= 12; ++shift) {
        double acc = 0;
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x) {
                const int xs = x + shift;
                if (xs < 0 || xs >= res) continue;
                acc += img_a.at2(y, x) * img_b.at2(y, xs);
            }
        if (acc > best) {
            best = acc;
            best_shift = shift;
        }
    }

    // expected pixel displacement from the depth of the face centroid
    Tensor campts = dec::to_camera_space(ad::constant(verts), cam)->value;
    double zbar = 0;
    for (int i = 0; i < kNumVerts; ++i) zbar += campts.at2(i, 2) / kNumVerts;
    const double expect = 5.0 * cam.fx / zbar;
    CHECK(std::fabs(best_shift - expect) <= 1.0);
}

TEST_CASE("region masks are nondegenerate and weighted as configured") {
    World w = make_world(11);
    IdentityParams id = sample_identity(1);
    dec::RenderOptions opts;
    dec::RegionMasks masks = dec::region_masks(w, id, opts);

    double w1 = 0;
    bool binary = true;
    for (int64_t i = 0; i < masks.face_mask.size(); ++i) {
        if (masks.face_mask[i] != 0.0 && masks.face_mask[i] != 1.0) binary = false;
        w1 += masks.face_mask[i];
    }
    CHECK(binary);
    CHECK(w1 > 0.0);
    CHECK(w1 < static_cast<double>(opts.resolution) * opts.resolution);

    // lower-face vertex set avoids the brow landmarks entirely
    std::set<int> lf(masks.lf_vertices.begin(), masks.lf_vertices.end());
    CHECK(!lf.empty());
    for (int j = 56; j < 76; ++j) CHECK(lf.count(w.landmarks[j]) == 0);

    // lip weights at least twice cheek weights, discs likewise
    const IdentityParams tmpl = mean_identity();
    double lip_min = 1e18, cheek_max = 0, disc_min = 1e18;
    for (int j = 0; j < 24; ++j) lip_min = std::min(lip_min, masks.geo_weights[w.landmarks[j]]);
    for (int i = 0; i < kFaceVerts; ++i) {
        const double x = tmpl.rest_mesh.at2(i, 0), y = tmpl.rest_mesh.at2(i, 1);
        if (std::fabs(x) > 45 && std::fabs(x) < 62 && y > -20 && y < 15)
            cheek_max = std::max(cheek_max, masks.geo_weights[i]);
    }
    for (int i = kDiscLStart; i < kNumVerts; ++i)
        disc_min = std::min(disc_min, masks.geo_weights[i]);
    CHECK(cheek_max > 0.0);
    CHECK(lip_min >= 2.0 * cheek_max);
    CHECK(disc_min >= 2.0 * cheek_max);

    for (int v : masks.mouth_probe) {
        CHECK(v >= 0);
        CHECK(v < kNumVerts);
    }
    // probe corners are an exact mirror pair, left then right, then top/bottom
    CHECK(w.vertex_mirror[masks.mouth_probe[0]] == masks.mouth_probe[1]);
    CHECK(tmpl.rest_mesh.at2(masks.mouth_probe[0], 0) < 0);
    CHECK(tmpl.rest_mesh.at2(masks.mouth_probe[1], 0) > 0);
    CHECK(tmpl.rest_mesh.at2(masks.mouth_probe[2], 1) >
          tmpl.rest_mesh.at2(masks.mouth_probe[3], 1));

    CHECK(!masks.eye_vertices.empty());
    std::set<int> eyes(masks.eye_vertices.begin(), masks.eye_vertices.end());
    for (int i = kDiscLStart; i < kNumVerts; ++i) CHECK(eyes.count(i) == 1);
}

TEST_CASE("gaze gradients flow through decode and render") {
    World w = make_world(11);
    IdentityParams id = mean_identity();
    Tensor e = random_code(w, 44);
    Tensor g6 = pack_dirs(gaze_dir(0.05, 0.02), gaze_dir(-0.03, 0.01));

    dec::RenderOptions opts;
    opts.resolution = 24;
    ad::Var gleaf = ad::leaf(g6);
    dec::Decoded d = dec::decode(w, id, ad::constant(e), gleaf);
    ad::Var loss = ad::mean_all(dec::render(d, id, dec::v_front(), opts));
    Tensor grad = ad::gradients(loss, {gleaf})[0]->value;

    for (int i = 0; i < 6; ++i) {
        auto value_fn = [&](const std::vector<double>& xs) {
            Tensor g2 = g6;
            g2[i] = xs[0];
            dec::Decoded dd = dec::decode(w, id, ad::constant(e), ad::constant(g2));
            return dec::render(dd, id, dec::v_front(), opts)->value.mean();
        };
        GradReport rep = grad_check(value_fn, {grad[i]}, {g6[i]}, 1e-4);
        CHECK(rep.passed);
        if (!rep.passed) MESSAGE("gaze component ", i, ": ", rep.note);
    }
}

TEST_CASE("code gradients flow through decode and render") {
    World w = make_world(11);
    IdentityParams id = mean_identity();
    Tensor e = random_code(w, 91);
    Tensor g6 = pack_gaze(forward_gaze());

    dec::RenderOptions opts;
    opts.resolution = 24;
    ad::Var eleaf = ad::leaf(e);
    dec::Decoded d = dec::decode(w, id, eleaf, ad::constant(g6));
    ad::Var loss = ad::mean_all(dec::render(d, id, dec::v_front(), opts));
    Tensor grad = ad::gradients(loss, {eleaf})[0]->value;
    CHECK(grad.all_finite());

    Rng rng(5);
    for (int trial = 0; trial < 6; ++trial) {
        const int r = static_cast<int>(rng.uniform_int(kCodeDim));
        auto value_fn = [&](const std::vector<double>& xs) {
            Tensor e2 = e;
            e2[r] = xs[0];
            dec::Decoded dd = dec::decode(w, id, ad::constant(e2), ad::constant(g6));
            return dec::render(dd, id, dec::v_front(), opts)->value.mean();
        };
        GradReport rep = grad_check(value_fn, {grad[r]}, {e[r]}, 1e-4);
        CHECK(rep.passed);
        if (!rep.passed) MESSAGE("code component ", r, ": ", rep.note);
    }
}

TEST_CASE("viewpoint deltas are differentiable") {
    World w = make_world(11);
    IdentityParams id = mean_identity();
    Tensor e0({kCodeDim});
    auto [verts, tex] = dec::decode_tensors(w, id, e0, pack_gaze(forward_gaze()));
    Tensor lum = luminance_of(tex);
    dec::RenderOptions opts;
    opts.resolution = 24;
    Camera cam = dec::camera_from_viewpoint(dec::v_front(), opts);
    auto alpha = std::make_shared<const Tensor>(id.splat_alpha);
    const double radius = dec::effective_radius(opts.splat_radius, opts.resolution);

    Tensor dv({6}, {0.01, -0.02, 0.015, 0.4, -0.3, 0.8});
    ad::Var dleaf = ad::leaf(dv);
    ad::Var img = dec::render_camera_delta(ad::constant(verts), ad::constant(lum), cam, dleaf,
                                           opts.resolution, radius, opts.bg_eps, alpha);
    Tensor grad = ad::gradients(ad::mean_all(img), {dleaf})[0]->value;

    for (int i = 0; i < 6; ++i) {
        auto value_fn = [&](const std::vector<double>& xs) {
            Tensor d2 = dv;
            d2[i] = xs[0];
            ad::Var im = dec::render_camera_delta(ad::constant(verts), ad::constant(lum), cam,
                                                  ad::constant(d2), opts.resolution, radius,
                                                  opts.bg_eps, alpha);
            return im->value.mean();
        };
        GradReport rep = grad_check(value_fn, {grad[i]}, {dv[i]}, 1e-4, 1e-6);
        CHECK(rep.passed);
        if (!rep.passed) MESSAGE("delta component ", i, ": ", rep.note);
    }
}
