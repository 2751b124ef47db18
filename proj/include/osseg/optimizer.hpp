#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "osseg/autodiff.hpp"

namespace osseg {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard Adam update with bias correction; t is the 1-based step count.
inline void adam_update(Tensor& value, const Tensor& grad, Tensor& m, Tensor& v, long long t, const AdamConfig& cfg) {
    require(value.same_shape(grad), "adam_update: grad shape mismatch");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < value.size(); ++i) {
        m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * grad.data[i];
        v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * grad.data[i] * grad.data[i];
        const double mhat = m.data[i] / bc1;
        const double vhat = v.data[i] / bc2;
        value.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // Updates every parameter bound to the tape, in binding order.
    void step(Tape& tape) {
        ++t_;
        for (const auto& [p, id] : tape.bindings()) {
            (void)id;
            adam_update(p->value, tape.grad_of(*p), p->adam_m, p->adam_v, t_, cfg_);
        }
    }

    long long step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

  private:
    AdamConfig cfg_;
    long long t_ = 0;
};

// Owns named parameters in registration order (the checkpoint order).
class ParameterStore {
  public:
    Parameter* add(const std::string& name, Tensor init) {
        for (const auto& p : params_) require(p->name != name, "ParameterStore: duplicate name " + name);
        params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
        return params_.back().get();
    }

    Parameter* find(const std::string& name) const {
        for (const auto& p : params_)
            if (p->name == name) return p.get();
        return nullptr;
    }

    const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }

    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

  private:
    std::vector<std::unique_ptr<Parameter>> params_;
};

// --- deterministic initializers

inline Tensor init_uniform(Rng& rng, std::vector<std::size_t> shape, double a) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = rng.uniform(-a, a);
    return t;
}

inline Tensor init_linear_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return init_uniform(rng, {fan_in, fan_out}, a);
}

// --- finite-difference gradient checking

// Central differences on a random subsample of parameter coordinates.
// Returns the max relative error with denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const std::function<Value(Tape&)>& f, ParameterStore& params, double eps = 1e-4,
                         std::size_t min_coords = 100, std::uint64_t seed = 0x5eed) {
    Tape tape;
    Value loss = f(tape);
    tape.backward(loss);

    // snapshot analytic grads by parameter pointer
    std::vector<std::pair<Parameter*, Tensor>> analytic;
    for (const auto& [p, id] : tape.bindings()) analytic.emplace_back(p, tape.grad_buf(id));

    std::vector<std::pair<Parameter*, std::size_t>> coords;
    for (auto& [p, g] : analytic)
        for (std::size_t i = 0; i < g.size(); ++i) coords.emplace_back(p, i);
    require(!coords.empty(), "grad_check: no parameters bound");

    Rng rng(seed);
    rng.shuffle(coords);
    const std::size_t n_check = std::min(coords.size(), std::max<std::size_t>(min_coords, 1));

    auto eval = [&]() {
        Tape t2;
        return t2.val(f(t2)).data[0];
    };

    double max_rel = 0.0;
    for (std::size_t c = 0; c < n_check; ++c) {
        auto [p, i] = coords[c];
        const double saved = p->value.data[i];
        p->value.data[i] = saved + eps;
        const double fp = eval();
        p->value.data[i] = saved - eps;
        const double fm = eval();
        p->value.data[i] = saved;
        const double numeric = (fp - fm) / (2.0 * eps);
        double analytic_v = 0.0;
        for (auto& [q, g] : analytic)
            if (q == p) {
                analytic_v = g.data[i];
                break;
            }
        const double denom = std::max({std::abs(analytic_v), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(analytic_v - numeric) / denom);
    }
    return max_rel;
}

}  // namespace osseg
