#pragma once

// Central-difference verification of tape gradients.
//
// The error reported for an input tensor is
//     max_i |autodiff_i - fd_i| / max(s, 1e-3 * S)
// where s = max_i max(|autodiff_i|, |fd_i|) over that tensor and S is the
// same maximum over all checked inputs. A tensor whose gradient is
// identically zero everywhere has error 0.

#include <sparse_rcnn/tensor.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace sparse_rcnn {

inline constexpr double kGlobalScaleFloor = 1e-3;

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t worst_index = 0;
    std::vector<double> autodiff;
    std::vector<double> finite_diff;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;
    bool passed = true;

    const GradCheckEntry* worst() const {
        const GradCheckEntry* w = nullptr;
        for (const auto& e : entries)
            if (!w || e.max_rel_error > w->max_rel_error) w = &e;
        return w;
    }
};

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-6;
};

inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<NamedTensor> inputs,
                                  GradCheckOptions opts = {}) {
    std::vector<bool> had_flag;
    for (auto& [name, t] : inputs) {
        had_flag.push_back(t.requires_grad());
        t.set_requires_grad(true);
        t.zero_grad();
    }

    Tensor y = f();
    if (y.numel() != 1) {
        throw ContractError("grad_check: function must return a scalar, got " + shape_str(y.shape()));
    }
    y.backward();

    GradCheckReport report;
    report.tolerance = opts.tolerance;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& [name, t] = inputs[k];
        GradCheckEntry e;
        e.name = name;
        e.autodiff.assign(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), e.autodiff.begin());
        e.finite_diff.resize(t.numel());
        {
            NoGradGuard ng;
            auto values = t.mutable_data();
            for (std::size_t i = 0; i < values.size(); ++i) {
                const double orig = values[i];
                values[i] = orig + opts.step;
                const double fp = f().item();
                values[i] = orig - opts.step;
                const double fm = f().item();
                values[i] = orig;
                e.finite_diff[i] = (fp - fm) / (2.0 * opts.step);
            }
        }
        for (std::size_t i = 0; i < e.autodiff.size(); ++i) {
            const double diff = std::abs(e.autodiff[i] - e.finite_diff[i]);
            if (!std::isfinite(diff)) {
                e.max_abs_error = e.max_rel_error = INFINITY;
                e.worst_index = i;
                break;
            }
            if (diff > e.max_abs_error) {
                e.max_abs_error = diff;
                e.worst_index = i;
            }
        }
        report.entries.push_back(std::move(e));
    }

    auto scale_of = [](const GradCheckEntry& e) {
        double s = 0.0;
        for (std::size_t i = 0; i < e.autodiff.size(); ++i) s = std::max({s, std::abs(e.autodiff[i]), std::abs(e.finite_diff[i])});
        return s;
    };
    double global = 0.0;
    for (const auto& e : report.entries) global = std::max(global, scale_of(e));
    for (auto& e : report.entries) {
        const double scale = std::max(scale_of(e), kGlobalScaleFloor * global);
        if (std::isfinite(e.max_abs_error)) e.max_rel_error = scale > 0.0 ? e.max_abs_error / scale : 0.0;
        if (!(e.max_rel_error < opts.tolerance)) report.passed = false;
    }

    for (std::size_t k = 0; k < inputs.size(); ++k) {
        inputs[k].second.set_requires_grad(had_flag[k]);
    }
    return report;
}

}  // namespace sparse_rcnn
