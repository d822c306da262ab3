#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hmcface/tensor.hpp"

namespace hmc::ad {

struct Node;
using Var = std::shared_ptr<const Node>;

// Eager reverse-mode node. `vjp` maps the node's output cotangent to input
// cotangents, expressed as graph ops so gradients themselves stay
// differentiable. Ops whose vjp is built from opaque first-order kernels
// leave vjp unset on those kernel nodes; asking for a second derivative
// through them throws instead of silently returning zeros.
struct Node {
    Tensor value;
    std::vector<Var> inputs;
    std::function<std::vector<Var>(const Var& self, const Var& cot)> vjp;
    const char* op = "leaf";
};

Var leaf(Tensor value);
Var constant(Tensor value);
Var scalar(double v);

inline const Tensor& val(const Var& v) { return v->value; }

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var atan(const Var& a);
Var asin(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var abs_smoothless(const Var& a);  // subgradient 0 at 0
Var clamp01(const Var& a);         // straight-through mask on the interior
Var stop_grad(const Var& a);

// reductions and shape ops
Var sum_all(const Var& a);                       // -> [1]
Var mean_all(const Var& a);                      // -> [1]
Var broadcast_scalar(const Var& s, std::vector<int> shape);
Var reshape(const Var& a, std::vector<int> shape);
Var transpose2d(const Var& a);
Var matmul(const Var& a, const Var& b);          // [m,k] x [k,n]
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& a, int axis, int start, int len);
Var embed_slice(const Var& a, std::vector<int> full_shape, int axis, int start);
Var gather_rows(const Var& a, std::vector<int> rows);
Var scatter_rows(const Var& a, std::vector<int> rows, int total_rows);
Var flip_horizontal(const Var& a);               // flips last axis

// neural ops (first-order backward kernels)
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var bilinear_resize(const Var& x, int out_h, int out_w);
Var bilinear_resize_adjoint(const Var& x, int out_h, int out_w);

// composites
Var linear(const Var& x, const Var& w, const Var& b);  // x [n,k], w [m,k], b [m]
Var softmax_rows(const Var& x);
Var row_sums(const Var& x);      // [n,m] -> [n,1]
Var sum_sq(const Var& x);        // -> [1]
Var dot(const Var& a, const Var& b);

struct PinholeIntrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
};

struct SplatOptions {
    int width = 0, height = 0;
    double radius_px = 2.5;
    double bg_eps = 1e-4;
    double cutoff_sigmas = 3.0;
    double min_depth = 1.0;
    // optional constant per-vertex opacity multiplier [V]
    std::shared_ptr<const Tensor> vertex_alpha;
};

// Normalized Gaussian-splat compositing of camera-space points carrying C
// channels. verts_cam [V,3], colors [V,C] -> image [C,H,W].
Var splat_render(const Var& verts_cam, const Var& colors, const PinholeIntrinsics& K,
                 const SplatOptions& opts);

// Forward-only coverage weight sum, used for masks.
Tensor splat_weight_image(const Tensor& verts_cam, const PinholeIntrinsics& K,
                          const SplatOptions& opts);

// u = fx*x/z + cx, v = fy*y/z + cy. verts_cam [K,3] -> [K,2].
Var project_points(const Var& verts_cam, const PinholeIntrinsics& K);

// Axis-angle w [3] -> rotation matrix [3,3], series-switched near zero.
Var rotation_from_axis_angle(const Var& w);
Tensor rotation_from_axis_angle(const Tensor& w);
Tensor axis_angle_from_rotation(const Tensor& R);

// Gradient of a scalar with respect to the given leaves. Entries for leaves
// the output does not depend on are zero tensors. The returned graph can be
// differentiated again when every op on the path supports it.
std::vector<Var> gradients(const Var& out, const std::vector<Var>& wrt);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double s) { return mul_scalar(a, s); }
inline Var operator*(double s, const Var& a) { return mul_scalar(a, s); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }

}  // namespace hmc::ad
