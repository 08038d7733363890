#pragma once

#include <map>
#include <random>

#include "mgir/tensor.hpp"

namespace mgir {

// Named, shaped, differentiable parameter tensors. Iteration order is the
// sorted name order so updates and serialization are deterministic.
template <typename S>
class ParameterStore {
public:
    Tensor<S>& add(const std::string& name, Tensor<S> t) {
        if (params_.count(name))
            throw config_error("parameter already registered: " + name);
        t.set_requires_grad(true);
        auto [it, ok] = params_.emplace(name, std::move(t));
        (void)ok;
        return it->second;
    }

    Tensor<S>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw config_error("unknown parameter: " + name);
        return it->second;
    }

    const Tensor<S>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw config_error("unknown parameter: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::size_t count_params() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.size();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t tensor_count() const { return params_.size(); }

private:
    std::map<std::string, Tensor<S>> params_;
};

// Fan-in uniform init for weights; biases start at zero.
template <typename S>
Tensor<S> uniform_init(Shape shape, std::size_t fan_in, std::mt19937& rng) {
    const double bound = fan_in > 0 ? 1.0 / std::sqrt(double(fan_in)) : 1.0;
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<S> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = S(dist(rng));
    return t;
}

template <typename S>
struct AdamConfig {
    S lr = S(4e-4);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
};

// Adam with bias correction. Moment buffers are keyed by parameter name so
// the optimizer state serializes alongside the parameters.
template <typename S>
class Adam {
public:
    explicit Adam(AdamConfig<S> cfg = {}) : cfg_(cfg) {}

    void step(ParameterStore<S>& store) {
        ++t_;
        const S bc1 = S(1) - S(std::pow(double(cfg_.beta1), double(t_)));
        const S bc2 = S(1) - S(std::pow(double(cfg_.beta2), double(t_)));
        for (auto& [name, p] : store) {
            auto& m = moment(m_, name, p.size());
            auto& v = moment(v_, name, p.size());
            const S* g = p.grad();
            S* x = p.data();
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (S(1) - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (S(1) - cfg_.beta2) * g[i] * g[i];
                const S mhat = m[i] / bc1;
                const S vhat = v[i] / bc2;
                x[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    AdamConfig<S>& config() { return cfg_; }
    const AdamConfig<S>& config() const { return cfg_; }
    std::uint64_t step_count() const { return t_; }
    void set_step_count(std::uint64_t t) { t_ = t; }

    std::map<std::string, std::vector<S>>& first_moments() { return m_; }
    std::map<std::string, std::vector<S>>& second_moments() { return v_; }

private:
    static std::vector<S>& moment(std::map<std::string, std::vector<S>>& buf,
                                  const std::string& name, std::size_t n) {
        auto& v = buf[name];
        if (v.size() != n) v.assign(n, S(0));
        return v;
    }

    AdamConfig<S> cfg_;
    std::uint64_t t_ = 0;
    std::map<std::string, std::vector<S>> m_, v_;
};

}  // namespace mgir
