#pragma once

#include <array>
#include <vector>

#include "hmcface/autodiff.hpp"
#include "hmcface/world.hpp"

namespace hmc::decoder {

struct RenderOptions {
    int resolution = 96;
    // px at the 96 px reference resolution, scaled linearly with resolution
    double splat_radius = 2.5;
    double bg_eps = 1e-4;
    double focal_norm = 2.0;  // frontal-view focal length as a fraction of resolution
};

struct Decoded {
    ad::Var verts;  // [V,3] mm
    ad::Var tex;    // [V,3] in [0,1]
};

// Expression code + gaze to geometry and texture. Differentiable in e and g.
// e: [256] (or any 256-element shape), g: [6] packed (left, right).
Decoded decode(const world::World& w, const world::IdentityParams& id, const ad::Var& e,
               const ad::Var& g);

std::pair<Tensor, Tensor> decode_tensors(const world::World& w, const world::IdentityParams& id,
                                         const Tensor& e, const Tensor& g6);

// Fixed frontal viewpoint (rotation axis-angle + translation).
Tensor v_front();

// Camera matching a 6-vector viewpoint at the given render options.
world::Camera camera_from_viewpoint(const Tensor& v6, const RenderOptions& opts);

// Monochrome composite [H,W] through an explicit camera. Differentiable in
// vertices and texture; the camera is constant.
ad::Var render_camera(const ad::Var& verts, const ad::Var& tex, const world::Camera& cam,
                      int resolution, double splat_radius, double bg_eps,
                      std::shared_ptr<const Tensor> alpha);

// Same, but with a differentiable viewpoint delta: the effective extrinsics
// are R(dw)·(R0 p + t0) + dt with dv6 = (dw, dt).
ad::Var render_camera_delta(const ad::Var& verts, const ad::Var& tex, const world::Camera& cam,
                            const ad::Var& dv6, int resolution, double splat_radius, double bg_eps,
                            std::shared_ptr<const Tensor> alpha);

ad::Var render(const Decoded& d, const world::IdentityParams& id, const Tensor& v6,
               const RenderOptions& opts);

Tensor render_tensor(const world::World& w, const world::IdentityParams& id, const Tensor& e,
                     const Tensor& g6, const Tensor& v6, const RenderOptions& opts);

// Camera-space points under an explicit camera, differentiable in verts.
ad::Var to_camera_space(const ad::Var& verts, const world::Camera& cam);
ad::Var project_camera(const ad::Var& verts, const world::Camera& cam);

struct RegionMasks {
    Tensor face_mask;             // [H,W] binary at render resolution
    Tensor geo_weights;           // [V] nonnegative
    std::vector<int> lf_vertices; // below the nose line
    std::array<int, 4> mouth_probe;
    std::vector<int> eye_vertices;  // discs plus surrounding face ring
};

RegionMasks region_masks(const world::World& w, const world::IdentityParams& id,
                         const RenderOptions& opts, double emphasis = 3.0);

double effective_radius(double radius_at_ref, int resolution);

}  // namespace hmc::decoder
