#include "hmcface/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace hmc::ad {

namespace {

Var make_node(Tensor value, std::vector<Var> inputs,
              std::function<std::vector<Var>(const Var&, const Var&)> vjp, const char* op) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    n->vjp = std::move(vjp);
    n->op = op;
    return n;
}

// First-order kernel output: traversing through it for a second derivative
// must fail loudly, so it records its dependencies but carries no vjp.
Var opaque(Tensor value, std::vector<Var> deps, const char* op) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->inputs = std::move(deps);
    n->vjp = nullptr;
    n->op = op;
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw HmcError(std::string(op) + ": shape mismatch " +
                       Tensor::shape_str(a->value.shape()) + " vs " +
                       Tensor::shape_str(b->value.shape()));
}

}  // namespace

Var leaf(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return n;
}

Var constant(Tensor value) { return leaf(std::move(value)); }
Var scalar(double v) { return leaf(Tensor::scalar(v)); }

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    return make_node(std::move(out), {a, b},
                     [](const Var&, const Var& cot) { return std::vector<Var>{cot, cot}; },
                     "add");
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
    return make_node(std::move(out), {a, b},
                     [](const Var&, const Var& cot) {
                         return std::vector<Var>{cot, neg(cot)};
                     },
                     "sub");
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    return make_node(std::move(out), {a, b},
                     [](const Var& self, const Var& cot) {
                         return std::vector<Var>{mul(cot, self->inputs[1]),
                                                 mul(cot, self->inputs[0])};
                     },
                     "mul");
}

Var div(const Var& a, const Var& b) {
    check_same_shape(a, b, "div");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] /= b->value[i];
    return make_node(std::move(out), {a, b},
                     [](const Var& self, const Var& cot) {
                         const Var& x = self->inputs[0];
                         const Var& y = self->inputs[1];
                         Var gx = div(cot, y);
                         Var gy = neg(div(mul(cot, x), mul(y, y)));
                         return std::vector<Var>{gx, gy};
                     },
                     "div");
}

Var neg(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = -out[i];
    return make_node(std::move(out), {a},
                     [](const Var&, const Var& cot) { return std::vector<Var>{neg(cot)}; },
                     "neg");
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += s;
    return make_node(std::move(out), {a},
                     [](const Var&, const Var& cot) { return std::vector<Var>{cot}; },
                     "add_scalar");
}

Var mul_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
    return make_node(std::move(out), {a},
                     [s](const Var&, const Var& cot) {
                         return std::vector<Var>{mul_scalar(cot, s)};
                     },
                     "mul_scalar");
}

Var exp(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& cot) {
                         return std::vector<Var>{mul(cot, self)};
                     },
                     "exp");
}

Var log(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& cot) {
                         return std::vector<Var>{div(cot, self->inputs[0])};
                     },
                     "log");
}

Var tanh(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& cot) {
                         Var one_minus = add_scalar(neg(square(self)), 1.0);
                         return std::vector<Var>{mul(cot, one_minus)};
                     },
                     "tanh");
}

Var square(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= out[i];
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& cot) {
                         return std::vector<Var>{mul(cot, mul_scalar(self->inputs[0], 2.0))};
                     },
                     "square");
}

Var sin(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::sin(out[i]);
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& cot) {
                         return std::vector<Var>{mul(cot, cos(self->inputs[0]))};
                     },
                     "sin");
}

Var cos(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::cos(out[i]);
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& cot) {
                         return std::vector<Var>{mul(cot, neg(sin(self->inputs[0])))};
                     },
                     "cos");
}

Var atan(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::atan(out[i]);
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& cot) {
                         Var denom = add_scalar(square(self->inputs[0]), 1.0);
                         return std::vector<Var>{div(cot, denom)};
                     },
                     "atan");
}

Var asin(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::asin(out[i]);
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& cot) {
                         Var denom = sqrt(add_scalar(neg(square(self->inputs[0])), 1.0));
                         return std::vector<Var>{div(cot, denom)};
                     },
                     "asin");
}

Var sqrt(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(out[i]);
    return make_node(std::move(out), {a},
                     [](const Var& self, const Var& cot) {
                         return std::vector<Var>{div(cot, mul_scalar(self, 2.0))};
                     },
                     "sqrt");
}

Var abs_smoothless(const Var& a) {
    Tensor out = a->value;
    Tensor sign(a->value.shape());
    for (int64_t i = 0; i < out.size(); ++i) {
        sign[i] = out[i] > 0.0 ? 1.0 : (out[i] < 0.0 ? -1.0 : 0.0);
        out[i] = std::fabs(out[i]);
    }
    Var sign_c = constant(std::move(sign));
    return make_node(std::move(out), {a},
                     [sign_c](const Var&, const Var& cot) {
                         return std::vector<Var>{mul(cot, sign_c)};
                     },
                     "abs");
}

Var clamp01(const Var& a) {
    Tensor out = a->value;
    Tensor mask(a->value.shape());
    for (int64_t i = 0; i < out.size(); ++i) {
        mask[i] = (out[i] > 0.0 && out[i] < 1.0) ? 1.0 : 0.0;
        out[i] = std::min(1.0, std::max(0.0, out[i]));
    }
    Var mask_c = constant(std::move(mask));
    return make_node(std::move(out), {a},
                     [mask_c](const Var&, const Var& cot) {
                         return std::vector<Var>{mul(cot, mask_c)};
                     },
                     "clamp01");
}

Var stop_grad(const Var& a) { return constant(a->value); }

Var sum_all(const Var& a) {
    Tensor out = Tensor::scalar(a->value.sum());
    std::vector<int> shape = a->value.shape();
    return make_node(std::move(out), {a},
                     [shape](const Var&, const Var& cot) {
                         return std::vector<Var>{broadcast_scalar(cot, shape)};
                     },
                     "sum_all");
}

Var mean_all(const Var& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a->value.size()));
}

Var broadcast_scalar(const Var& s, std::vector<int> shape) {
    if (s->value.size() != 1) throw HmcError("broadcast_scalar expects scalar input");
    Tensor out = Tensor::full(shape, s->value[0]);
    std::vector<int> in_shape = s->value.shape();
    return make_node(std::move(out), {s},
                     [in_shape](const Var&, const Var& cot) {
                         return std::vector<Var>{reshape(sum_all(cot), in_shape)};
                     },
                     "broadcast_scalar");
}

Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out = a->value.reshaped(shape);
    std::vector<int> orig = a->value.shape();
    return make_node(std::move(out), {a},
                     [orig](const Var&, const Var& cot) {
                         return std::vector<Var>{reshape(cot, orig)};
                     },
                     "reshape");
}

Var transpose2d(const Var& a) {
    if (a->value.rank() != 2) throw HmcError("transpose2d expects rank 2");
    const int m = a->value.dim(0), n = a->value.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at2(j, i) = a->value.at2(i, j);
    return make_node(std::move(out), {a},
                     [](const Var&, const Var& cot) {
                         return std::vector<Var>{transpose2d(cot)};
                     },
                     "transpose2d");
}

Var matmul(const Var& a, const Var& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0))
        throw HmcError("matmul shape mismatch " + Tensor::shape_str(a->value.shape()) + " x " +
                       Tensor::shape_str(b->value.shape()));
    const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    Tensor out({m, n});
    const double* pa = a->value.data();
    const double* pb = b->value.data();
    double* po = out.data();
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
            const double av = pa[static_cast<size_t>(i) * k + kk];
            if (av == 0.0) continue;
            const double* brow = pb + static_cast<size_t>(kk) * n;
            double* orow = po + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_node(std::move(out), {a, b},
                     [](const Var& self, const Var& cot) {
                         const Var& A = self->inputs[0];
                         const Var& B = self->inputs[1];
                         return std::vector<Var>{matmul(cot, transpose2d(B)),
                                                 matmul(transpose2d(A), cot)};
                     },
                     "matmul");
}

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw HmcError("concat of nothing");
    const int rank = parts[0]->value.rank();
    if (axis < 0 || axis >= rank) throw HmcError("concat axis out of range");
    std::vector<int> shape = parts[0]->value.shape();
    int total = 0;
    for (const auto& p : parts) {
        if (p->value.rank() != rank) throw HmcError("concat rank mismatch");
        for (int d = 0; d < rank; ++d)
            if (d != axis && p->value.dim(d) != shape[static_cast<size_t>(d)])
                throw HmcError("concat shape mismatch");
        total += p->value.dim(axis);
    }
    shape[static_cast<size_t>(axis)] = total;

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= shape[static_cast<size_t>(d)];

    Tensor out(shape);
    int64_t offset = 0;
    std::vector<int> lens;
    for (const auto& p : parts) {
        const int len = p->value.dim(axis);
        lens.push_back(len);
        for (int64_t o = 0; o < outer; ++o) {
            const double* src = p->value.data() + o * len * inner;
            double* dst = out.data() + (o * total + offset) * inner;
            std::copy(src, src + len * inner, dst);
        }
        offset += len;
    }

    std::vector<Var> inputs = parts;
    return make_node(std::move(out), std::move(inputs),
                     [axis, lens](const Var& self, const Var& cot) {
                         std::vector<Var> grads;
                         int start = 0;
                         for (size_t i = 0; i < self->inputs.size(); ++i) {
                             grads.push_back(slice(cot, axis, start, lens[i]));
                             start += lens[i];
                         }
                         return grads;
                     },
                     "concat");
}

Var slice(const Var& a, int axis, int start, int len) {
    const int rank = a->value.rank();
    if (axis < 0 || axis >= rank) throw HmcError("slice axis out of range");
    if (start < 0 || len < 0 || start + len > a->value.dim(axis))
        throw HmcError("slice range out of bounds");
    std::vector<int> shape = a->value.shape();
    const int full = shape[static_cast<size_t>(axis)];
    shape[static_cast<size_t>(axis)] = len;

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= a->value.dim(d);
    for (int d = axis + 1; d < rank; ++d) inner *= a->value.dim(d);

    Tensor out(shape);
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = a->value.data() + (o * full + start) * inner;
        double* dst = out.data() + o * len * inner;
        std::copy(src, src + len * inner, dst);
    }
    std::vector<int> full_shape = a->value.shape();
    return make_node(std::move(out), {a},
                     [axis, start, full_shape](const Var&, const Var& cot) {
                         return std::vector<Var>{embed_slice(cot, full_shape, axis, start)};
                     },
                     "slice");
}

Var embed_slice(const Var& a, std::vector<int> full_shape, int axis, int start) {
    const int rank = static_cast<int>(full_shape.size());
    const int len = a->value.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= full_shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= full_shape[static_cast<size_t>(d)];
    const int full = full_shape[static_cast<size_t>(axis)];

    Tensor out(full_shape);
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = a->value.data() + o * len * inner;
        double* dst = out.data() + (o * full + start) * inner;
        std::copy(src, src + len * inner, dst);
    }
    return make_node(std::move(out), {a},
                     [axis, start, len = a->value.dim(axis)](const Var&, const Var& cot) {
                         return std::vector<Var>{slice(cot, axis, start, len)};
                     },
                     "embed_slice");
}

Var gather_rows(const Var& a, std::vector<int> rows) {
    if (a->value.rank() != 2) throw HmcError("gather_rows expects rank 2");
    const int cols = a->value.dim(1);
    const int total = a->value.dim(0);
    Tensor out({static_cast<int>(rows.size()), cols});
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= total) throw HmcError("gather_rows index out of range");
        std::copy(a->value.data() + static_cast<size_t>(rows[i]) * cols,
                  a->value.data() + static_cast<size_t>(rows[i] + 1) * cols,
                  out.data() + i * cols);
    }
    return make_node(std::move(out), {a},
                     [rows, total](const Var&, const Var& cot) {
                         return std::vector<Var>{scatter_rows(cot, rows, total)};
                     },
                     "gather_rows");
}

Var scatter_rows(const Var& a, std::vector<int> rows, int total_rows) {
    if (a->value.rank() != 2) throw HmcError("scatter_rows expects rank 2");
    if (a->value.dim(0) != static_cast<int>(rows.size()))
        throw HmcError("scatter_rows row count mismatch");
    const int cols = a->value.dim(1);
    Tensor out({total_rows, cols});
    for (size_t i = 0; i < rows.size(); ++i)
        for (int c = 0; c < cols; ++c) out.at2(rows[i], c) += a->value.at2(static_cast<int>(i), c);
    return make_node(std::move(out), {a},
                     [rows](const Var&, const Var& cot) {
                         return std::vector<Var>{gather_rows(cot, rows)};
                     },
                     "scatter_rows");
}

Var flip_horizontal(const Var& a) {
    const int rank = a->value.rank();
    if (rank < 1) throw HmcError("flip_horizontal needs rank >= 1");
    const int w = a->value.dim(rank - 1);
    int64_t outer = a->value.size() / w;
    Tensor out(a->value.shape());
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = a->value.data() + o * w;
        double* dst = out.data() + o * w;
        for (int i = 0; i < w; ++i) dst[i] = src[w - 1 - i];
    }
    return make_node(std::move(out), {a},
                     [](const Var&, const Var& cot) {
                         return std::vector<Var>{flip_horizontal(cot)};
                     },
                     "flip_horizontal");
}

// ---------------------------------------------------------------------------
// conv2d and friends

namespace {

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wid = x.dim(3);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wid + 2 * pad - kw) / stride + 1;
    Tensor out({n, cout, oh, ow});
    for (int ni = 0; ni < n; ++ni) {
        for (int co = 0; co < cout; ++co) {
            const double bias = b.size() ? b[co] : 0.0;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = bias;
                    const int iy0 = oy * stride - pad;
                    const int ix0 = ox * stride - pad;
                    for (int ci = 0; ci < cin; ++ci) {
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = iy0 + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ix0 + kx;
                                if (ix < 0 || ix >= wid) continue;
                                acc += x.at4(ni, ci, iy, ix) * w.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    out.at4(ni, co, oy, ox) = acc;
                }
            }
        }
    }
    return out;
}

Tensor conv2d_grad_input(const Tensor& cot, const Tensor& w, std::vector<int> x_shape, int stride,
                         int pad) {
    const int n = x_shape[0], cin = x_shape[1], h = x_shape[2], wid = x_shape[3];
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int oh = cot.dim(2), ow = cot.dim(3);
    Tensor gx(x_shape);
    for (int ni = 0; ni < n; ++ni) {
        for (int co = 0; co < cout; ++co) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const double g = cot.at4(ni, co, oy, ox);
                    if (g == 0.0) continue;
                    const int iy0 = oy * stride - pad;
                    const int ix0 = ox * stride - pad;
                    for (int ci = 0; ci < cin; ++ci) {
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = iy0 + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ix0 + kx;
                                if (ix < 0 || ix >= wid) continue;
                                gx.at4(ni, ci, iy, ix) += g * w.at4(co, ci, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    return gx;
}

Tensor conv2d_grad_weight(const Tensor& x, const Tensor& cot, std::vector<int> w_shape, int stride,
                          int pad) {
    const int n = x.dim(0), h = x.dim(2), wid = x.dim(3);
    const int cout = w_shape[0], cin = w_shape[1], kh = w_shape[2], kw = w_shape[3];
    const int oh = cot.dim(2), ow = cot.dim(3);
    Tensor gw(w_shape);
    for (int ni = 0; ni < n; ++ni) {
        for (int co = 0; co < cout; ++co) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const double g = cot.at4(ni, co, oy, ox);
                    if (g == 0.0) continue;
                    const int iy0 = oy * stride - pad;
                    const int ix0 = ox * stride - pad;
                    for (int ci = 0; ci < cin; ++ci) {
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = iy0 + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ix0 + kx;
                                if (ix < 0 || ix >= wid) continue;
                                gw.at4(co, ci, ky, kx) += g * x.at4(ni, ci, iy, ix);
                            }
                        }
                    }
                }
            }
        }
    }
    return gw;
}

Tensor conv2d_grad_bias(const Tensor& cot) {
    const int n = cot.dim(0), cout = cot.dim(1), oh = cot.dim(2), ow = cot.dim(3);
    Tensor gb({cout});
    for (int ni = 0; ni < n; ++ni)
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) gb[co] += cot.at4(ni, co, oy, ox);
    return gb;
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    if (x->value.rank() != 4 || w->value.rank() != 4) throw HmcError("conv2d expects NCHW + OIHW");
    if (x->value.dim(1) != w->value.dim(1)) throw HmcError("conv2d channel mismatch");
    Tensor out = conv2d_forward(x->value, w->value, b->value, stride, pad);
    return make_node(
        std::move(out), {x, w, b},
        [stride, pad](const Var& self, const Var& cot) {
            const Var& xin = self->inputs[0];
            const Var& win = self->inputs[1];
            Var gx = opaque(conv2d_grad_input(cot->value, win->value, xin->value.shape(), stride,
                                              pad),
                            {cot, win}, "conv2d.grad_input");
            Var gw = opaque(conv2d_grad_weight(xin->value, cot->value, win->value.shape(), stride,
                                               pad),
                            {cot, xin}, "conv2d.grad_weight");
            Var gb = opaque(conv2d_grad_bias(cot->value), {cot}, "conv2d.grad_bias");
            return std::vector<Var>{gx, gw, gb};
        },
        "conv2d");
}

// ---------------------------------------------------------------------------
// bilinear resize (exact adjoint pair, so both directions stay differentiable)

namespace {

struct ResizeTap {
    int lo;
    double w_lo;
};

std::vector<ResizeTap> resize_taps(int in, int out) {
    // align_corners-style sampling keeps endpoints fixed.
    std::vector<ResizeTap> taps(static_cast<size_t>(out));
    const double scale = out > 1 ? static_cast<double>(in - 1) / (out - 1) : 0.0;
    for (int i = 0; i < out; ++i) {
        double pos = i * scale;
        int lo = static_cast<int>(std::floor(pos));
        if (lo >= in - 1) lo = in - 2;
        if (lo < 0) lo = 0;
        double frac = in > 1 ? pos - lo : 0.0;
        taps[static_cast<size_t>(i)] = {lo, 1.0 - frac};
    }
    return taps;
}

Tensor bilinear_resize_forward(const Tensor& x, int out_h, int out_w) {
    std::vector<int> shape = x.shape();
    const int rank = x.rank();
    const int h = shape[static_cast<size_t>(rank - 2)];
    const int w = shape[static_cast<size_t>(rank - 1)];
    int64_t planes = x.size() / (static_cast<int64_t>(h) * w);
    auto ty = resize_taps(h, out_h);
    auto tx = resize_taps(w, out_w);
    shape[static_cast<size_t>(rank - 2)] = out_h;
    shape[static_cast<size_t>(rank - 1)] = out_w;
    Tensor out(shape);
    for (int64_t p = 0; p < planes; ++p) {
        const double* src = x.data() + p * h * w;
        double* dst = out.data() + p * static_cast<int64_t>(out_h) * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const auto& y0 = ty[static_cast<size_t>(oy)];
            const int y1 = h > 1 ? y0.lo + 1 : y0.lo;
            for (int ox = 0; ox < out_w; ++ox) {
                const auto& x0 = tx[static_cast<size_t>(ox)];
                const int x1 = w > 1 ? x0.lo + 1 : x0.lo;
                const double v = y0.w_lo * (x0.w_lo * src[y0.lo * w + x0.lo] +
                                            (1 - x0.w_lo) * src[y0.lo * w + x1]) +
                                 (1 - y0.w_lo) * (x0.w_lo * src[y1 * w + x0.lo] +
                                                  (1 - x0.w_lo) * src[y1 * w + x1]);
                dst[oy * out_w + ox] = v;
            }
        }
    }
    return out;
}

Tensor bilinear_resize_adjoint_forward(const Tensor& g, int in_h, int in_w) {
    // Transpose of bilinear_resize_forward with output size g.h x g.w.
    std::vector<int> shape = g.shape();
    const int rank = g.rank();
    const int oh = shape[static_cast<size_t>(rank - 2)];
    const int ow = shape[static_cast<size_t>(rank - 1)];
    int64_t planes = g.size() / (static_cast<int64_t>(oh) * ow);
    auto ty = resize_taps(in_h, oh);
    auto tx = resize_taps(in_w, ow);
    shape[static_cast<size_t>(rank - 2)] = in_h;
    shape[static_cast<size_t>(rank - 1)] = in_w;
    Tensor out(shape);
    for (int64_t p = 0; p < planes; ++p) {
        const double* src = g.data() + p * static_cast<int64_t>(oh) * ow;
        double* dst = out.data() + p * static_cast<int64_t>(in_h) * in_w;
        for (int oy = 0; oy < oh; ++oy) {
            const auto& y0 = ty[static_cast<size_t>(oy)];
            const int y1 = in_h > 1 ? y0.lo + 1 : y0.lo;
            for (int ox = 0; ox < ow; ++ox) {
                const auto& x0 = tx[static_cast<size_t>(ox)];
                const int x1 = in_w > 1 ? x0.lo + 1 : x0.lo;
                const double v = src[oy * ow + ox];
                dst[y0.lo * in_w + x0.lo] += y0.w_lo * x0.w_lo * v;
                dst[y0.lo * in_w + x1] += y0.w_lo * (1 - x0.w_lo) * v;
                dst[y1 * in_w + x0.lo] += (1 - y0.w_lo) * x0.w_lo * v;
                dst[y1 * in_w + x1] += (1 - y0.w_lo) * (1 - x0.w_lo) * v;
            }
        }
    }
    return out;
}

}  // namespace

Var bilinear_resize(const Var& x, int out_h, int out_w) {
    const int rank = x->value.rank();
    if (rank < 2) throw HmcError("bilinear_resize needs rank >= 2");
    const int in_h = x->value.dim(rank - 2);
    const int in_w = x->value.dim(rank - 1);
    Tensor out = bilinear_resize_forward(x->value, out_h, out_w);
    return make_node(std::move(out), {x},
                     [in_h, in_w](const Var&, const Var& cot) {
                         return std::vector<Var>{bilinear_resize_adjoint(cot, in_h, in_w)};
                     },
                     "bilinear_resize");
}

Var bilinear_resize_adjoint(const Var& x, int out_h, int out_w) {
    const int rank = x->value.rank();
    if (rank < 2) throw HmcError("bilinear_resize_adjoint needs rank >= 2");
    const int in_h = x->value.dim(rank - 2);
    const int in_w = x->value.dim(rank - 1);
    Tensor out = bilinear_resize_adjoint_forward(x->value, out_h, out_w);
    return make_node(std::move(out), {x},
                     [in_h, in_w](const Var&, const Var& cot) {
                         return std::vector<Var>{bilinear_resize(cot, in_h, in_w)};
                     },
                     "bilinear_resize_adjoint");
}

// ---------------------------------------------------------------------------
// composites

Var linear(const Var& x, const Var& w, const Var& b) {
    Var y = matmul(x, transpose2d(w));
    const int n = y->value.dim(0);
    Var bias_rows = matmul(constant(Tensor::ones({n, 1})), reshape(b, {1, b->value.dim(0)}));
    return add(y, bias_rows);
}

Var row_sums(const Var& x) {
    if (x->value.rank() != 2) throw HmcError("row_sums expects rank 2");
    return matmul(x, constant(Tensor::ones({x->value.dim(1), 1})));
}

Var softmax_rows(const Var& x) {
    if (x->value.rank() != 2) throw HmcError("softmax_rows expects rank 2");
    const int n = x->value.dim(0), m = x->value.dim(1);
    Tensor row_max({n, m});
    for (int i = 0; i < n; ++i) {
        double mx = x->value.at2(i, 0);
        for (int j = 1; j < m; ++j) mx = std::max(mx, x->value.at2(i, j));
        for (int j = 0; j < m; ++j) row_max.at2(i, j) = mx;
    }
    Var e = exp(sub(x, constant(std::move(row_max))));
    Var denom = matmul(row_sums(e), constant(Tensor::ones({1, m})));
    return div(e, denom);
}

Var sum_sq(const Var& x) { return sum_all(square(x)); }

Var dot(const Var& a, const Var& b) { return sum_all(mul(a, b)); }

// ---------------------------------------------------------------------------
// splat renderer

namespace {

struct SplatFootprint {
    double u, v, z;
    int x0, x1, y0, y1;  // inclusive pixel window, x1 < x0 when culled
};

SplatFootprint footprint(const double* vert, const PinholeIntrinsics& K, const SplatOptions& o) {
    SplatFootprint f{};
    const double x = vert[0], y = vert[1], z = vert[2];
    if (z < o.min_depth) {
        f.x0 = 0;
        f.x1 = -1;
        return f;
    }
    f.z = z;
    f.u = K.fx * x / z + K.cx;
    f.v = K.fy * y / z + K.cy;
    const double r = o.cutoff_sigmas * o.radius_px;
    f.x0 = std::max(0, static_cast<int>(std::ceil(f.u - r)));
    f.x1 = std::min(o.width - 1, static_cast<int>(std::floor(f.u + r)));
    f.y0 = std::max(0, static_cast<int>(std::ceil(f.v - r)));
    f.y1 = std::min(o.height - 1, static_cast<int>(std::floor(f.v + r)));
    return f;
}

}  // namespace

Tensor splat_weight_image(const Tensor& verts_cam, const PinholeIntrinsics& K,
                          const SplatOptions& opts) {
    const int V = verts_cam.dim(0);
    Tensor wsum({opts.height, opts.width});
    const double inv2r2 = 1.0 / (2.0 * opts.radius_px * opts.radius_px);
    const Tensor* alpha = opts.vertex_alpha.get();
    std::vector<double> wx(static_cast<size_t>(opts.width));
    for (int i = 0; i < V; ++i) {
        auto f = footprint(verts_cam.data() + static_cast<size_t>(i) * 3, K, opts);
        if (f.x1 < f.x0 || f.y1 < f.y0) continue;
        const double a = alpha ? (*alpha)[i] : 1.0;
        for (int px = f.x0; px <= f.x1; ++px) {
            const double dx = px - f.u;
            wx[static_cast<size_t>(px)] = std::exp(-dx * dx * inv2r2);
        }
        for (int py = f.y0; py <= f.y1; ++py) {
            const double dy = py - f.v;
            const double wy = a * std::exp(-dy * dy * inv2r2);
            double* row = wsum.data() + static_cast<size_t>(py) * opts.width;
            for (int px = f.x0; px <= f.x1; ++px) row[px] += wy * wx[static_cast<size_t>(px)];
        }
    }
    return wsum;
}

Var splat_render(const Var& verts_cam, const Var& colors, const PinholeIntrinsics& K,
                 const SplatOptions& opts) {
    if (verts_cam->value.rank() != 2 || verts_cam->value.dim(1) != 3)
        throw HmcError("splat_render expects verts [V,3]");
    if (colors->value.rank() != 2 || colors->value.dim(0) != verts_cam->value.dim(0))
        throw HmcError("splat_render expects colors [V,C]");
    const int V = verts_cam->value.dim(0);
    const int C = colors->value.dim(1);
    const int W = opts.width, H = opts.height;
    const double inv2r2 = 1.0 / (2.0 * opts.radius_px * opts.radius_px);
    const Tensor* alpha = opts.vertex_alpha.get();
    if (alpha && alpha->size() != V) throw HmcError("splat_render alpha size mismatch");

    Tensor num({C, H, W});
    Tensor den({H, W});
    const int64_t plane = static_cast<int64_t>(H) * W;
    std::vector<double> wx(static_cast<size_t>(W));
    for (int i = 0; i < V; ++i) {
        auto f = footprint(verts_cam->value.data() + static_cast<size_t>(i) * 3, K, opts);
        if (f.x1 < f.x0 || f.y1 < f.y0) continue;
        const double a = alpha ? (*alpha)[i] : 1.0;
        const double* col = colors->value.data() + static_cast<size_t>(i) * C;
        for (int px = f.x0; px <= f.x1; ++px) {
            const double dx = px - f.u;
            wx[static_cast<size_t>(px)] = std::exp(-dx * dx * inv2r2);
        }
        for (int py = f.y0; py <= f.y1; ++py) {
            const double dy = py - f.v;
            const double wy = a * std::exp(-dy * dy * inv2r2);
            const int64_t rowoff = static_cast<int64_t>(py) * W;
            for (int px = f.x0; px <= f.x1; ++px) {
                const double w = wy * wx[static_cast<size_t>(px)];
                const int64_t p = rowoff + px;
                den[p] += w;
                for (int c = 0; c < C; ++c) num[c * plane + p] += w * col[c];
            }
        }
    }
    Tensor img({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int64_t p = 0; p < plane; ++p)
            img[c * plane + p] = num[c * plane + p] / (den[p] + opts.bg_eps);

    auto den_sp = std::make_shared<Tensor>(std::move(den));
    auto img_copy = std::make_shared<Tensor>(img);

    return make_node(
        std::move(img), {verts_cam, colors},
        [K, opts, den_sp, img_copy, V, C, W, H, inv2r2, plane](const Var& self, const Var& cot) {
            const Tensor& g = cot->value;
            const Tensor& verts = self->inputs[0]->value;
            const Tensor& cols = self->inputs[1]->value;
            const Tensor* alpha = opts.vertex_alpha.get();

            // Per-pixel pieces shared by every vertex touching that pixel.
            Tensor ac({C, H, W});
            Tensor bsum({H, W});
            for (int64_t p = 0; p < plane; ++p) {
                const double d = (*den_sp)[p] + opts.bg_eps;
                double b = 0.0;
                for (int c = 0; c < C; ++c) {
                    const double gc = g[c * plane + p];
                    ac[c * plane + p] = gc / d;
                    b -= gc * (*img_copy)[c * plane + p] / d;
                }
                bsum[p] = b;
            }

            Tensor gverts({V, 3});
            Tensor gcols({V, C});
            std::vector<double> wx(static_cast<size_t>(W));
            for (int i = 0; i < V; ++i) {
                auto f = footprint(verts.data() + static_cast<size_t>(i) * 3, K, opts);
                if (f.x1 < f.x0 || f.y1 < f.y0) continue;
                const double a = alpha ? (*alpha)[i] : 1.0;
                const double* col = cols.data() + static_cast<size_t>(i) * C;
                double* gcol = gcols.data() + static_cast<size_t>(i) * C;
                double gu = 0, gv = 0;
                for (int px = f.x0; px <= f.x1; ++px) {
                    const double dx = px - f.u;
                    wx[static_cast<size_t>(px)] = std::exp(-dx * dx * inv2r2);
                }
                for (int py = f.y0; py <= f.y1; ++py) {
                    const double dy = py - f.v;
                    const double wy = a * std::exp(-dy * dy * inv2r2);
                    const int64_t rowoff = static_cast<int64_t>(py) * W;
                    for (int px = f.x0; px <= f.x1; ++px) {
                        const double w = wy * wx[static_cast<size_t>(px)];
                        const int64_t p = rowoff + px;
                        double dLdw = bsum[p];
                        for (int c = 0; c < C; ++c) {
                            dLdw += ac[c * plane + p] * col[c];
                            gcol[c] += w * ac[c * plane + p];
                        }
                        const double common = dLdw * w * 2.0 * inv2r2;
                        gu += common * (px - f.u);
                        gv += common * (py - f.v);
                    }
                }
                const double x = verts.at2(i, 0), y = verts.at2(i, 1), z = verts.at2(i, 2);
                gverts.at2(i, 0) = gu * K.fx / z;
                gverts.at2(i, 1) = gv * K.fy / z;
                gverts.at2(i, 2) = -gu * K.fx * x / (z * z) - gv * K.fy * y / (z * z);
            }
            Var gvv = opaque(std::move(gverts), {cot, self->inputs[0], self->inputs[1]},
                             "splat_render.grad_verts");
            Var gcv = opaque(std::move(gcols), {cot, self->inputs[0]}, "splat_render.grad_colors");
            return std::vector<Var>{gvv, gcv};
        },
        "splat_render");
}

Var project_points(const Var& verts_cam, const PinholeIntrinsics& K) {
    if (verts_cam->value.rank() != 2 || verts_cam->value.dim(1) != 3)
        throw HmcError("project_points expects [K,3]");
    Var x = slice(verts_cam, 1, 0, 1);
    Var y = slice(verts_cam, 1, 1, 1);
    Var z = slice(verts_cam, 1, 2, 1);
    Var u = add_scalar(mul_scalar(div(x, z), K.fx), K.cx);
    Var v = add_scalar(mul_scalar(div(y, z), K.fy), K.cy);
    return concat({u, v}, 1);
}

// ---------------------------------------------------------------------------
// rotations

Var rotation_from_axis_angle(const Var& w) {
    if (w->value.size() != 3) throw HmcError("axis-angle expects 3 values");
    Var wc = reshape(w, {1, 3});
    Var wx = slice(wc, 1, 0, 1);
    Var wy = slice(wc, 1, 1, 1);
    Var wz = slice(wc, 1, 2, 1);
    Var t2 = add(add(square(wx), square(wy)), square(wz));  // theta^2, [1,1]
    const double theta2 = t2->value[0];

    // sin(t)/t and (1-cos(t))/t^2 with a series branch near zero; both branches
    // are smooth so the gradient of the selected branch is exact locally.
    Var f1, f2;
    if (theta2 < 1e-8) {
        f1 = add_scalar(mul_scalar(t2, -1.0 / 6.0), 1.0);
        f2 = add_scalar(mul_scalar(t2, -1.0 / 24.0), 0.5);
    } else {
        Var theta = sqrt(t2);
        f1 = div(sin(theta), theta);
        f2 = div(add_scalar(neg(cos(theta)), 1.0), t2);
    }

    Var zero = constant(Tensor({1, 1}, {0.0}));
    // A = [w]_x rows
    Var a_row0 = concat({zero, neg(wz), wy}, 1);
    Var a_row1 = concat({wz, zero, neg(wx)}, 1);
    Var a_row2 = concat({neg(wy), wx, zero}, 1);
    Var A = concat({a_row0, a_row1, a_row2}, 0);
    Var A2 = matmul(A, A);
    Var eye = constant(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    Var f1m = broadcast_scalar(f1, {3, 3});
    Var f2m = broadcast_scalar(f2, {3, 3});
    return add(eye, add(mul(f1m, A), mul(f2m, A2)));
}

Tensor rotation_from_axis_angle(const Tensor& w) {
    Var R = rotation_from_axis_angle(constant(w));
    return R->value;
}

Tensor axis_angle_from_rotation(const Tensor& R) {
    if (R.rank() != 2 || R.dim(0) != 3 || R.dim(1) != 3) throw HmcError("expects [3,3]");
    const double tr = R.at2(0, 0) + R.at2(1, 1) + R.at2(2, 2);
    double c = (tr - 1.0) / 2.0;
    c = std::min(1.0, std::max(-1.0, c));
    const double theta = std::acos(c);
    Tensor w({3});
    if (theta < 1e-9) return w;
    const double s = std::sin(theta);
    if (std::fabs(s) < 1e-6) {
        // Near pi: extract axis from R + I diagonal.
        for (int i = 0; i < 3; ++i) w[i] = std::sqrt(std::max(0.0, (R.at2(i, i) + 1.0) / 2.0));
        if (R.at2(0, 1) + R.at2(1, 0) < 0) w[1] = -w[1];
        if (R.at2(0, 2) + R.at2(2, 0) < 0) w[2] = -w[2];
        for (int i = 0; i < 3; ++i) w[i] *= theta;
        return w;
    }
    const double k = theta / (2.0 * s);
    w[0] = k * (R.at2(2, 1) - R.at2(1, 2));
    w[1] = k * (R.at2(0, 2) - R.at2(2, 0));
    w[2] = k * (R.at2(1, 0) - R.at2(0, 1));
    return w;
}

// ---------------------------------------------------------------------------
// reverse pass

std::vector<Var> gradients(const Var& out, const std::vector<Var>& wrt) {
    if (!out) throw HmcError("gradients: null output");
    if (out->value.size() != 1) throw HmcError("gradients: output must be scalar");

    // Postorder over the graph, inputs before consumers.
    std::vector<Var> topo;
    std::unordered_map<const Node*, int> state;  // 0 new, 1 open, 2 done
    std::vector<std::pair<Var, size_t>> stack;
    stack.emplace_back(out, 0);
    state[out.get()] = 1;
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            Var child = node->inputs[idx++];
            auto it = state.find(child.get());
            if (it == state.end()) {
                state[child.get()] = 1;
                stack.emplace_back(child, 0);
            }
        } else {
            state[node.get()] = 2;
            topo.push_back(node);
            stack.pop_back();
        }
    }

    std::unordered_set<const Node*> wanted;
    for (const auto& v : wrt) wanted.insert(v.get());

    // needed = nodes on a path from out to some wrt leaf.
    std::unordered_map<const Node*, bool> needed;
    for (const auto& n : topo) {
        bool need = wanted.count(n.get()) > 0;
        if (!need)
            for (const auto& in : n->inputs)
                if (needed[in.get()]) {
                    need = true;
                    break;
                }
        needed[n.get()] = need;
    }

    std::unordered_map<const Node*, Var> cot;
    cot[out.get()] = constant(Tensor::scalar(1.0));

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        const Var& n = *it;
        auto cit = cot.find(n.get());
        if (cit == cot.end() || n->inputs.empty()) continue;
        bool any_needed = false;
        for (const auto& in : n->inputs)
            if (needed[in.get()]) {
                any_needed = true;
                break;
            }
        if (!any_needed) continue;
        if (!n->vjp)
            throw HmcError(std::string("gradient through op '") + n->op +
                           "' is not supported (first-order kernel output)");
        std::vector<Var> grads = n->vjp(n, cit->second);
        if (grads.size() != n->inputs.size())
            throw HmcError(std::string("vjp arity mismatch for op '") + n->op + "'");
        for (size_t i = 0; i < grads.size(); ++i) {
            const Var& in = n->inputs[i];
            if (!grads[i] || !needed[in.get()]) continue;
            auto prev = cot.find(in.get());
            if (prev == cot.end())
                cot[in.get()] = grads[i];
            else
                prev->second = add(prev->second, grads[i]);
        }
    }

    std::vector<Var> result;
    result.reserve(wrt.size());
    for (const auto& v : wrt) {
        auto itc = cot.find(v.get());
        if (itc != cot.end())
            result.push_back(itc->second);
        else
            result.push_back(constant(Tensor::zeros(v->value.shape())));
    }
    return result;
}

}  // namespace hmc::ad
