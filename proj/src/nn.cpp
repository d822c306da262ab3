#include "hmcface/nn.hpp"

#include <cmath>

#include "hmcface/common.hpp"

namespace hmc::nn {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
    if (values_.count(name)) throw HmcError("duplicate parameter: " + name);
    order_.push_back(name);
    return values_.emplace(name, std::move(init)).first->second;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw HmcError("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw HmcError("unknown parameter: " + name);
    return it->second;
}

void ParamStore::freeze_all() {
    for (const auto& n : order_) frozen_.insert(n);
}

int64_t ParamStore::total_size() const {
    int64_t n = 0;
    for (const auto& name : order_) n += values_.at(name).size();
    return n;
}

uint64_t ParamStore::weights_digest() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& name : order_) {
        h = fnv1a64(name, h);
        const Tensor& t = values_.at(name);
        h = fnv1a64(t.data(), static_cast<size_t>(t.size()) * sizeof(double), h);
    }
    return h;
}

uint64_t ParamStore::arch_digest() const { return fnv1a64(arch_description()); }

std::string ParamStore::arch_description() const {
    std::string s;
    for (const auto& name : order_) {
        s += name;
        s += Tensor::shape_str(values_.at(name).shape());
        s += ";";
    }
    return s;
}

Var Ctx::p(const std::string& name) {
    auto it = leaves.find(name);
    if (it != leaves.end()) return it->second;
    Var v = ad::leaf(store.at(name));
    leaves.emplace(name, v);
    return v;
}

void Conv2d::init(ParamStore& store, Rng& rng) const {
    const double scale = std::sqrt(2.0 / (cin * k * k));
    store.add(name + ".w", Tensor::randn({cout, cin, k, k}, rng, scale));
    store.add(name + ".b", Tensor::zeros({cout}));
}

Var Conv2d::operator()(Ctx& ctx, const Var& x) const {
    return ad::conv2d(x, ctx.p(name + ".w"), ctx.p(name + ".b"), stride, pad);
}

void Linear::init(ParamStore& store, Rng& rng, double scale) const {
    store.add(name + ".w", Tensor::randn({out, in}, rng, scale * std::sqrt(2.0 / in)));
    store.add(name + ".b", Tensor::zeros({out}));
}

Var Linear::operator()(Ctx& ctx, const Var& x) const {
    return ad::linear(x, ctx.p(name + ".w"), ctx.p(name + ".b"));
}

std::vector<std::pair<std::string, Tensor>> backward(const Var& loss, Ctx& ctx) {
    std::vector<std::string> names;
    std::vector<Var> leaves;
    for (const auto& name : ctx.store.order()) {
        if (ctx.store.is_frozen(name)) continue;
        auto it = ctx.leaves.find(name);
        if (it == ctx.leaves.end()) continue;
        names.push_back(name);
        leaves.push_back(it->second);
    }
    std::vector<Var> grads = ad::gradients(loss, leaves);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(names.size());
    for (size_t i = 0; i < names.size(); ++i) out.emplace_back(names[i], grads[i]->value);
    return out;
}

void AdamW::step(ParamStore& store, const std::vector<std::pair<std::string, Tensor>>& grads,
                 double lr_scale) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    const double alpha = lr * lr_scale;
    for (const auto& [name, g] : grads) {
        Tensor& p = store.at(name);
        auto mit = m_.find(name);
        if (mit == m_.end()) {
            m_.emplace(name, Tensor::zeros(p.shape()));
            v_.emplace(name, Tensor::zeros(p.shape()));
        }
        Tensor& m = m_.at(name);
        Tensor& v = v_.at(name);
        for (int64_t i = 0; i < p.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= alpha * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
        }
    }
}

double cosine_lr_scale(int64_t step, int64_t total_steps) {
    if (total_steps <= 0) return 1.0;
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

}  // namespace hmc::nn
