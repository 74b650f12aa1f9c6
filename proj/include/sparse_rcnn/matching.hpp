#pragma once

// One-to-one assignment of ground-truth objects to proposals.

#include <sparse_rcnn/geometry.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace sparse_rcnn {

inline constexpr double kProbClamp = 1e-8;

// G x N matrix of costs, G ground-truth rows against N proposal columns.
class CostMatrix {
public:
    CostMatrix() = default;
    CostMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
    CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
        : rows_(rows), cols_(cols), values_(std::move(values)) {
        if (values_.size() != rows_ * cols_) throw DimensionError("CostMatrix: value count does not match shape");
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    double operator()(std::size_t g, std::size_t n) const { return values_[g * cols_ + n]; }
    double& operator()(std::size_t g, std::size_t n) { return values_[g * cols_ + n]; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

struct MatchResult {
    // (gt_index, proposal_index), sorted by gt_index.
    std::vector<std::pair<std::size_t, std::size_t>> assignment;
    double total_cost = 0.0;
};

struct CostWeights {
    double cls = 2.0;
    double l1 = 5.0;
    double giou = 2.0;
    double alpha = 0.25;
    double gamma = 2.0;
};

// Positive term of the sigmoid focal loss evaluated at probability p.
inline double focal_positive_cost(double p, double alpha, double gamma) {
    p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    return alpha * std::pow(1.0 - p, gamma) * -std::log(p);
}

inline double l1_distance(const BoxN& a, const BoxN& b) {
    return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) + std::abs(a.h - b.h);
}

// class_probs holds post-sigmoid values [N x K]. GIoU is measured in a
// frame_w x frame_h absolute frame.
inline CostMatrix build_cost_matrix(const Tensor& class_probs, const std::vector<BoxN>& pred_boxes,
                                    const std::vector<int>& gt_labels, const std::vector<BoxN>& gt_boxes,
                                    const CostWeights& w, double frame_w = 1.0, double frame_h = 1.0) {
    const std::size_t n = pred_boxes.size(), g = gt_boxes.size();
    if (class_probs.rank() != 2 || class_probs.dim(0) != n) {
        throw DimensionError("build_cost_matrix: class_probs " + shape_str(class_probs.shape()) + " vs " +
                             std::to_string(n) + " boxes");
    }
    if (gt_labels.size() != g) throw DimensionError("build_cost_matrix: label/box count mismatch");
    if (g > n) {
        throw ContractError("build_cost_matrix: " + std::to_string(g) + " objects cannot be matched to " +
                            std::to_string(n) + " proposals");
    }
    const std::size_t k = class_probs.dim(1);
    CostMatrix c(g, n);
    for (std::size_t gi = 0; gi < g; ++gi) {
        if (gt_labels[gi] < 0 || static_cast<std::size_t>(gt_labels[gi]) >= k) {
            throw ContractError("build_cost_matrix: label " + std::to_string(gt_labels[gi]) + " out of range");
        }
        const BoxA ga = to_absolute(gt_boxes[gi], frame_w, frame_h);
        for (std::size_t ni = 0; ni < n; ++ni) {
            const double p = class_probs.at(ni, static_cast<std::size_t>(gt_labels[gi]));
            const double cls = focal_positive_cost(p, w.alpha, w.gamma);
            const double l1 = l1_distance(pred_boxes[ni], gt_boxes[gi]);
            const double gi_val = giou(to_absolute(pred_boxes[ni], frame_w, frame_h), ga);
            c(gi, ni) = w.cls * cls + w.l1 * l1 + w.giou * (1.0 - gi_val);
        }
    }
    return c;
}

namespace detail {

inline void check_matchable(const CostMatrix& c, const char* who) {
    if (c.rows() > c.cols()) {
        throw ContractError(std::string(who) + ": " + std::to_string(c.rows()) + " rows exceed " +
                            std::to_string(c.cols()) + " columns");
    }
    for (std::size_t g = 0; g < c.rows(); ++g)
        for (std::size_t n = 0; n < c.cols(); ++n)
            if (!std::isfinite(c(g, n))) throw ContractError(std::string(who) + ": non-finite cost entry");
}

inline double assignment_cost(const CostMatrix& c, const std::vector<std::pair<std::size_t, std::size_t>>& a) {
    double total = 0.0;
    for (const auto& [g, n] : a) total += c(g, n);
    return total;
}

}  // namespace detail

// Kuhn-Munkres with row/column potentials on the G x N rectangle (G <= N).
// Each row is inserted in turn and an augmenting path of minimum reduced
// cost is grown with Dijkstra-style relaxation over the columns; this is
// the shortest-augmenting-path form, equivalent to padding with
// zero-cost dummy rows.
inline MatchResult hungarian(const CostMatrix& c) {
    detail::check_matchable(c, "hungarian");
    const std::size_t rows = c.rows(), cols = c.cols();
    MatchResult result;
    if (rows == 0) return result;

    const double inf = std::numeric_limits<double>::infinity();
    // 1-based indexing; column 0 is the virtual source.
    std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
    std::vector<std::size_t> owner(cols + 1, 0), way(cols + 1, 0);
    for (std::size_t i = 1; i <= rows; ++i) {
        owner[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(cols + 1, inf);
        std::vector<char> used(cols + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = owner[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= cols; ++j) {
                if (used[j]) continue;
                const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= cols; ++j) {
                if (used[j]) {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (owner[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    result.assignment.reserve(rows);
    for (std::size_t j = 1; j <= cols; ++j)
        if (owner[j] != 0) result.assignment.emplace_back(owner[j] - 1, j - 1);
    std::sort(result.assignment.begin(), result.assignment.end());
    result.total_cost = detail::assignment_cost(c, result.assignment);
    return result;
}

// Exhaustive enumeration of injective assignments; the first minimum in
// lexicographic order of (proposal for row 0, proposal for row 1, ...) wins.
inline MatchResult brute_force_match(const CostMatrix& c) {
    if (c.rows() > 8) throw ContractError("brute_force_match: at most 8 rows supported, got " + std::to_string(c.rows()));
    detail::check_matchable(c, "brute_force_match");
    const std::size_t rows = c.rows(), cols = c.cols();
    std::vector<std::size_t> pick(rows), best;
    std::vector<char> taken(cols, 0);
    double best_cost = std::numeric_limits<double>::infinity();

    // Depth-first over rows in increasing column order yields lexicographic order.
    auto recurse = [&](auto&& self, std::size_t row) -> void {
        if (row == rows) {
            // Recompute in row order so the sum matches assignment_cost exactly.
            double total = 0.0;
            for (std::size_t g = 0; g < rows; ++g) total += c(g, pick[g]);
            if (total < best_cost) {
                best_cost = total;
                best = pick;
            }
            return;
        }
        for (std::size_t j = 0; j < cols; ++j) {
            if (taken[j]) continue;
            taken[j] = 1;
            pick[row] = j;
            self(self, row + 1);
            taken[j] = 0;
        }
    };
    recurse(recurse, 0);

    MatchResult result;
    for (std::size_t g = 0; g < best.size(); ++g) result.assignment.emplace_back(g, best[g]);
    result.total_cost = rows == 0 ? 0.0 : best_cost;
    return result;
}

}  // namespace sparse_rcnn
