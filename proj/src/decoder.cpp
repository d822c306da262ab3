#include "hmcface/decoder.hpp"

#include <cmath>

namespace hmc::decoder {

using ad::Var;
using world::kCodeDim;
using world::kDiscLStart;
using world::kDiscRStart;
using world::kDiscVerts;
using world::kFaceVerts;
using world::kNumLatents;
using world::kNumVerts;
using world::kReferenceRes;

double effective_radius(double radius_at_ref, int resolution) {
    return radius_at_ref * resolution / kReferenceRes;
}

namespace {

constexpr double kPi = 3.14159265358979323846;

// rotation taking (0,0,1) to the unit gaze direction, minus the identity
Var gaze_delta_matrix(const Var& gaze3) {
    Var n = ad::sqrt(ad::sum_sq(gaze3));
    Var gn = ad::div(gaze3, ad::broadcast_scalar(n, {3}));
    Var gx = ad::slice(gn, 0, 0, 1);
    Var gy = ad::slice(gn, 0, 1, 1);
    Var gz = ad::slice(gn, 0, 2, 1);
    if (gz->value[0] <= 0.05)
        throw HmcError("gaze direction points away from forward");

    Var z = ad::constant(Tensor({1}));
    // cross((0,0,1), g) = (-gy, gx, 0); skew matrix in terms of g
    Var a = ad::reshape(
        ad::concat({z, z, gx, z, z, gy, ad::neg(gx), ad::neg(gy), z}, 0), {3, 3});
    Var a2 = ad::matmul(a, a);
    Var one = ad::constant(Tensor::ones({1}));
    Var inv = ad::div(one, ad::add_scalar(gz, 1.0));
    return ad::add(a, ad::mul(a2, ad::broadcast_scalar(inv, {3, 3})));
}

Tensor pivot_rows(const Tensor& center) {
    Tensor rows({kDiscVerts, 3});
    for (int i = 0; i < kDiscVerts; ++i)
        for (int c = 0; c < 3; ++c) rows.at2(i, c) = center[c];
    return rows;
}

std::vector<int> disc_indices(int start) {
    std::vector<int> idx(kDiscVerts);
    for (int i = 0; i < kDiscVerts; ++i) idx[i] = start + i;
    return idx;
}

const Tensor& luma_weights() {
    static const Tensor w({3, 1}, {0.299, 0.587, 0.114});
    return w;
}

}  // namespace

Decoded decode(const world::World& w, const world::IdentityParams& id, const Var& e,
               const Var& g) {
    if (e->value.size() != kCodeDim)
        throw HmcError("expression code must have " + std::to_string(kCodeDim) + " elements");
    if (g->value.size() != 6) throw HmcError("gaze vector must have 6 elements");

    Var e_col = ad::reshape(e, {kCodeDim, 1});
    Var s = ad::matmul(ad::constant(w.map_pinv), e_col);  // [8,1]

    Tensor bflat = id.blend_bases.reshaped({kNumLatents, kNumVerts * 3});
    Var disp = ad::reshape(ad::matmul(ad::transpose2d(s), ad::constant(bflat)), {kNumVerts, 3});
    Var verts = ad::add(ad::constant(id.rest_mesh), disp);

    Var g6 = ad::reshape(g, {6});
    const struct {
        int start;
        const Tensor* pivot;
        int g_off;
    } sides[2] = {{kDiscLStart, &id.eye_center_l, 0}, {kDiscRStart, &id.eye_center_r, 3}};
    for (const auto& side : sides) {
        Var m = gaze_delta_matrix(ad::slice(g6, 0, side.g_off, 3));
        const auto idx = disc_indices(side.start);
        Var gathered = ad::gather_rows(verts, idx);
        Var centered = ad::sub(gathered, ad::constant(pivot_rows(*side.pivot)));
        Var delta = ad::matmul(centered, ad::transpose2d(m));
        verts = ad::add(verts, ad::scatter_rows(delta, idx, kNumVerts));
    }

    // texture responds faintly to deformation along a fixed shading
    // direction; the direction lives in the y-z plane so mirrored faces
    // shade symmetrically
    Var dmesh = ad::sub(verts, ad::constant(id.rest_mesh));
    static const Tensor shade_dir({3, 1}, {0.0, 0.5, 0.86});
    Var m = ad::matmul(dmesh, ad::constant(shade_dir));  // [V,1]
    Var spread = ad::matmul(m, ad::constant(Tensor::ones({1, 3})));
    Var tex = ad::clamp01(
        ad::mul(ad::constant(id.albedo), ad::add_scalar(ad::mul_scalar(spread, 0.025), 1.0)));

    return Decoded{verts, tex};
}

std::pair<Tensor, Tensor> decode_tensors(const world::World& w, const world::IdentityParams& id,
                                         const Tensor& e, const Tensor& g6) {
    Decoded d = decode(w, id, ad::constant(e), ad::constant(g6));
    return {d.verts->value, d.tex->value};
}

Tensor v_front() {
    // pi rotation about x: camera at (0,0,420) looking back along -z, y down
    return Tensor({6}, {kPi, 0, 0, 0, 0, 420});
}

world::Camera camera_from_viewpoint(const Tensor& v6, const RenderOptions& opts) {
    Tensor wv({3}, {v6[0], v6[1], v6[2]});
    world::Camera cam;
    cam.name = "viewpoint";
    cam.rot = ad::rotation_from_axis_angle(wv);
    cam.trans = Tensor({3}, {v6[3], v6[4], v6[5]});
    cam.fx = cam.fy = opts.focal_norm * opts.resolution;
    cam.cx = cam.cy = 0.5 * (opts.resolution - 1);
    return cam;
}

Var to_camera_space(const Var& verts, const world::Camera& cam) {
    const int n = verts->value.dim(0);
    Tensor trans_rows({n, 3});
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) trans_rows.at2(i, c) = cam.trans[c];
    Tensor rot_t({3, 3});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) rot_t.at2(i, j) = cam.rot.at2(j, i);
    return ad::add(ad::matmul(verts, ad::constant(rot_t)), ad::constant(trans_rows));
}

Var project_camera(const Var& verts, const world::Camera& cam) {
    ad::PinholeIntrinsics k{cam.fx, cam.fy, cam.cx, cam.cy};
    return ad::project_points(to_camera_space(verts, cam), k);
}

Var render_camera(const Var& verts, const Var& tex, const world::Camera& cam, int resolution,
                  double splat_radius, double bg_eps, std::shared_ptr<const Tensor> alpha) {
    if (tex->value.dim(1) != 1) throw HmcError("render_camera expects a single channel");
    ad::PinholeIntrinsics k{cam.fx, cam.fy, cam.cx, cam.cy};
    ad::SplatOptions opts;
    opts.width = resolution;
    opts.height = resolution;
    opts.radius_px = splat_radius;
    opts.bg_eps = bg_eps;
    opts.vertex_alpha = std::move(alpha);
    Var img = ad::splat_render(to_camera_space(verts, cam), tex, k, opts);
    return ad::reshape(img, {resolution, resolution});
}

Var render_camera_delta(const Var& verts, const Var& tex, const world::Camera& cam,
                        const Var& dv6, int resolution, double splat_radius, double bg_eps,
                        std::shared_ptr<const Tensor> alpha) {
    if (tex->value.dim(1) != 1) throw HmcError("render_camera_delta expects a single channel");
    Var base = to_camera_space(verts, cam);
    Var d6 = ad::reshape(dv6, {6});
    Var rd = ad::rotation_from_axis_angle(ad::slice(d6, 0, 0, 3));
    Var dt = ad::reshape(ad::slice(d6, 0, 3, 3), {1, 3});
    const int n = verts->value.dim(0);
    Var pts = ad::add(ad::matmul(base, ad::transpose2d(rd)),
                      ad::matmul(ad::constant(Tensor::ones({n, 1})), dt));
    ad::PinholeIntrinsics k{cam.fx, cam.fy, cam.cx, cam.cy};
    ad::SplatOptions opts;
    opts.width = resolution;
    opts.height = resolution;
    opts.radius_px = splat_radius;
    opts.bg_eps = bg_eps;
    opts.vertex_alpha = std::move(alpha);
    return ad::reshape(ad::splat_render(pts, tex, k, opts), {resolution, resolution});
}

Var render(const Decoded& d, const world::IdentityParams& id, const Tensor& v6,
           const RenderOptions& opts) {
    world::Camera cam = camera_from_viewpoint(v6, opts);
    Var lum = ad::matmul(d.tex, ad::constant(luma_weights()));
    auto alpha = std::make_shared<const Tensor>(id.splat_alpha);
    return render_camera(d.verts, lum, cam, opts.resolution,
                         effective_radius(opts.splat_radius, opts.resolution), opts.bg_eps,
                         alpha);
}

Tensor render_tensor(const world::World& w, const world::IdentityParams& id, const Tensor& e,
                     const Tensor& g6, const Tensor& v6, const RenderOptions& opts) {
    Decoded d = decode(w, id, ad::constant(e), ad::constant(g6));
    return render(d, id, v6, opts)->value;
}

RegionMasks region_masks(const world::World& w, const world::IdentityParams& id,
                         const RenderOptions& opts, double emphasis) {
    RegionMasks out;
    const world::IdentityParams tmpl = world::mean_identity();

    out.geo_weights = Tensor::ones({kNumVerts});
    const double mouth_cx = 0, mouth_cy = -38;
    for (int i = 0; i < kFaceVerts; ++i) {
        const double x = tmpl.rest_mesh.at2(i, 0), y = tmpl.rest_mesh.at2(i, 1);
        const double dm = std::hypot(x - mouth_cx, y - mouth_cy);
        const double del = std::hypot(x - tmpl.eye_center_l[0], y - tmpl.eye_center_l[1]);
        const double der = std::hypot(x - tmpl.eye_center_r[0], y - tmpl.eye_center_r[1]);
        if (dm < 31.0 || del < 13.0 || der < 13.0) out.geo_weights[i] = emphasis;
        if (y < -12.0) out.lf_vertices.push_back(i);
        if (del < 13.0 || der < 13.0) out.eye_vertices.push_back(i);
    }
    for (int i = kFaceVerts; i < kNumVerts; ++i) {
        out.geo_weights[i] = emphasis;
        out.eye_vertices.push_back(i);
    }
    out.mouth_probe = w.mouth_probe;

    // frontal coverage of this identity's rest mesh
    world::Camera cam = camera_from_viewpoint(v_front(), opts);
    ad::PinholeIntrinsics k{cam.fx, cam.fy, cam.cx, cam.cy};
    ad::SplatOptions sopts;
    sopts.width = opts.resolution;
    sopts.height = opts.resolution;
    sopts.radius_px = effective_radius(opts.splat_radius, opts.resolution);
    sopts.bg_eps = opts.bg_eps;
    sopts.vertex_alpha = std::make_shared<const Tensor>(id.splat_alpha);
    Tensor weight =
        ad::splat_weight_image(to_camera_space(ad::constant(id.rest_mesh), cam)->value, k, sopts);
    out.face_mask = Tensor({opts.resolution, opts.resolution});
    for (int64_t i = 0; i < weight.size(); ++i)
        out.face_mask[i] = weight[i] > 0.05 ? 1.0 : 0.0;
    return out;
}

}  // namespace hmc::decoder
