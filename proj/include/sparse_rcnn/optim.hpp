#pragma once

// AdamW with decoupled weight decay, a step-decay schedule and global
// gradient-norm clipping.

#include <sparse_rcnn/tensor.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace sparse_rcnn {

struct AdamWConfig {
    double learning_rate = 2.5e-5;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Biases, layer-norm affine parameters and the proposal boxes are not decayed.
inline bool decays(const std::string& name) {
    auto ends_with = [&](const std::string& suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return !(ends_with(".bias") || ends_with(".gamma") || ends_with(".beta") || name == "proposal.boxes");
}

class AdamW {
public:
    AdamW(std::vector<NamedTensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& [name, t] : params_) {
            m_.emplace_back(t.numel(), 0.0);
            v_.emplace_back(t.numel(), 0.0);
            decay_.push_back(decays(name));
        }
    }

    // theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps)) - lr * wd * theta,
    // with the decay term evaluated at the pre-step theta.
    void step(double lr) {
        ++steps_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor& t = params_[k].second;
            if (!t.has_grad()) continue;
            auto theta = t.mutable_data();
            const auto g = t.grad();
            auto& m = m_[k];
            auto& v = v_[k];
            const double wd = decay_[k] ? cfg_.weight_decay : 0.0;
            for (std::size_t i = 0; i < theta.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mh = m[i] / bc1, vh = v[i] / bc2;
                theta[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps)) + lr * wd * theta[i];
            }
        }
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    const std::vector<NamedTensor>& params() const { return params_; }
    const AdamWConfig& config() const { return cfg_; }
    std::uint64_t steps() const { return steps_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }

    void restore(std::uint64_t steps, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
        if (m.size() != params_.size() || v.size() != params_.size()) throw ContractError("AdamW::restore: parameter count mismatch");
        for (std::size_t k = 0; k < params_.size(); ++k)
            if (m[k].size() != params_[k].second.numel() || v[k].size() != params_[k].second.numel()) {
                throw ContractError("AdamW::restore: moment size mismatch for '" + params_[k].first + "'");
            }
        steps_ = steps;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    std::vector<NamedTensor> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<bool> decay_;
    std::uint64_t steps_ = 0;
};

// Base rate divided by 10 once for every milestone epoch already reached.
inline double step_decay_lr(double base, std::size_t epoch, const std::vector<std::size_t>& milestones) {
    double lr = base;
    for (auto m : milestones)
        if (epoch >= m) lr *= 0.1;
    return lr;
}

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping. max_norm <= 0 disables clipping.
inline double clip_grad_norm(std::vector<NamedTensor>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, t] : params)
        if (t.has_grad())
            for (double g : t.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / (norm + 1e-6);
        for (auto& [name, t] : params)
            if (t.has_grad())
                for (double& g : t.mutable_grad()) g *= s;
    }
    return norm;
}

}  // namespace sparse_rcnn
