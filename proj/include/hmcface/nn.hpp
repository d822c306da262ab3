#pragma once

#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "hmcface/autodiff.hpp"
#include "hmcface/rng.hpp"
#include "hmcface/tensor.hpp"

namespace hmc::nn {

using ad::Var;

// Named parameter set with stable iteration order. The value digest pins
// exact weights; the architecture digest pins names and shapes only.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor init);
    bool has(const std::string& name) const { return values_.count(name) > 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    const std::vector<std::string>& order() const { return order_; }

    void freeze(const std::string& name) { frozen_.insert(name); }
    void freeze_all();
    void unfreeze_all() { frozen_.clear(); }
    bool is_frozen(const std::string& name) const { return frozen_.count(name) > 0; }

    int64_t total_size() const;
    uint64_t weights_digest() const;
    uint64_t arch_digest() const;
    std::string arch_description() const;

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> values_;
    std::set<std::string> frozen_;
};

// Per-forward leaf cache so one training step sees a single Var per parameter.
struct Ctx {
    explicit Ctx(ParamStore& s) : store(s) {}
    ParamStore& store;
    std::unordered_map<std::string, Var> leaves;
    Var p(const std::string& name);
};

struct Conv2d {
    std::string name;
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
    void init(ParamStore& store, Rng& rng) const;
    Var operator()(Ctx& ctx, const Var& x) const;
};

struct Linear {
    std::string name;
    int in = 0, out = 0;
    void init(ParamStore& store, Rng& rng, double scale = 1.0) const;
    Var operator()(Ctx& ctx, const Var& x) const;
};

// Gradients of the loss for every trainable parameter touched this step,
// in store order. Untouched parameters get zero gradients.
std::vector<std::pair<std::string, Tensor>> backward(const Var& loss, Ctx& ctx);

class AdamW {
public:
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.0;

    void step(ParamStore& store, const std::vector<std::pair<std::string, Tensor>>& grads,
              double lr_scale = 1.0);
    int64_t steps_taken() const { return t_; }

private:
    std::unordered_map<std::string, Tensor> m_, v_;
    int64_t t_ = 0;
};

// Half-cosine decay from lr to zero over total steps.
double cosine_lr_scale(int64_t step, int64_t total_steps);

}  // namespace hmc::nn
