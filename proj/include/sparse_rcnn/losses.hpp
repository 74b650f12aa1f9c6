#pragma once

// Set prediction loss: sigmoid focal classification, L1 and GIoU box terms
// over the one-to-one matching of each stage, normalized by object count.

#include <sparse_rcnn/matching.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

namespace sparse_rcnn {

struct GroundTruth {
    std::vector<int> labels;
    std::vector<BoxN> boxes;
    std::size_t size() const { return labels.size(); }
};

// Predictions of one iterative stage for one image.
struct StageOutput {
    Tensor class_logits;     // [N x K]
    Tensor boxes;            // [N x 4], normalized cx, cy, w, h
    Tensor object_features;  // [N x C]
};

inline double loss_normalizer(std::size_t num_objects) { return static_cast<double>(std::max<std::size_t>(num_objects, 1)); }

namespace detail {

struct FocalTerm {
    double value;
    double dlogit;
};

inline FocalTerm focal_term(double logit, bool positive, double alpha, double gamma) {
    const double p = stable_sigmoid(logit);
    const bool active = p > kProbClamp && p < 1.0 - kProbClamp;
    const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    double value, dp;
    if (positive) {
        const double q = 1.0 - pc;
        value = -alpha * std::pow(q, gamma) * std::log(pc);
        dp = alpha * (gamma * std::pow(q, gamma - 1.0) * std::log(pc) - std::pow(q, gamma) / pc);
    } else {
        value = -(1.0 - alpha) * std::pow(pc, gamma) * std::log(1.0 - pc);
        dp = -(1.0 - alpha) * (gamma * std::pow(pc, gamma - 1.0) * std::log(1.0 - pc) - std::pow(pc, gamma) / (1.0 - pc));
    }
    return {value, active ? dp * p * (1.0 - p) : 0.0};
}

}  // namespace detail

// Per-class binary focal loss. Matched (proposal, label) entries are
// positives, every other entry is a negative. Divided by max(num_objects, 1).
inline Tensor focal_loss(const Tensor& logits, const MatchResult& matched, const std::vector<int>& gt_labels,
                         double alpha, double gamma, std::size_t num_objects) {
    if (logits.rank() != 2) throw DimensionError("focal_loss: expected [N x K] logits, got " + shape_str(logits.shape()));
    if (!(alpha > 0.0 && alpha < 1.0) || gamma < 0.0) throw ContractError("focal_loss: need alpha in (0,1), gamma >= 0");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<char> positive(n * k, 0);
    for (const auto& [g, p] : matched.assignment) {
        const int label = gt_labels.at(g);
        if (label < 0 || static_cast<std::size_t>(label) >= k || p >= n) throw ContractError("focal_loss: match out of range");
        positive[p * k + static_cast<std::size_t>(label)] = 1;
    }
    const double norm = loss_normalizer(num_objects);
    double total = 0.0;
    std::vector<double> dlogits(n * k);
    for (std::size_t i = 0; i < n * k; ++i) {
        const auto t = detail::focal_term(logits[i], positive[i] != 0, alpha, gamma);
        total += t.value;
        dlogits[i] = t.dlogit / norm;
    }
    return make_op(Shape{1}, {total / norm}, "focal_loss", {logits}, [dlogits = std::move(dlogits)](detail::Node& nd) {
        auto& g = nd.input_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[0] * dlogits[i];
    });
}

// Sum over matched pairs of the L1 distance in normalized cxcywh.
inline Tensor l1_box_loss(const Tensor& pred, const MatchResult& matched, const std::vector<BoxN>& gt_boxes,
                          std::size_t num_objects) {
    if (pred.rank() != 2 || pred.dim(1) != 4) throw DimensionError("l1_box_loss: expected [N x 4] boxes");
    const double norm = loss_normalizer(num_objects);
    double total = 0.0;
    std::vector<double> dpred(pred.numel(), 0.0);
    for (const auto& [g, p] : matched.assignment) {
        const BoxN& gt = gt_boxes.at(g);
        const double target[4] = {gt.cx, gt.cy, gt.w, gt.h};
        for (std::size_t c = 0; c < 4; ++c) {
            const double d = pred[p * 4 + c] - target[c];
            total += std::abs(d);
            dpred[p * 4 + c] += (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / norm;
        }
    }
    return make_op(Shape{1}, {total / norm}, "l1_box_loss", {pred}, [dpred = std::move(dpred)](detail::Node& nd) {
        auto& g = nd.input_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[0] * dpred[i];
    });
}

// Sum over matched pairs of 1 - GIoU, measured in a frame_w x frame_h
// absolute frame.
inline Tensor giou_loss(const Tensor& pred, const MatchResult& matched, const std::vector<BoxN>& gt_boxes,
                        std::size_t num_objects, double frame_w = 1.0, double frame_h = 1.0) {
    if (pred.rank() != 2 || pred.dim(1) != 4) throw DimensionError("giou_loss: expected [N x 4] boxes");
    using D = Dual<4>;
    const double norm = loss_normalizer(num_objects);
    double total = 0.0;
    std::vector<double> dpred(pred.numel(), 0.0);
    for (const auto& [g, p] : matched.assignment) {
        const D cx = D::seed(pred[p * 4], 0), cy = D::seed(pred[p * 4 + 1], 1);
        const D w = D::seed(pred[p * 4 + 2], 2), h = D::seed(pred[p * 4 + 3], 3);
        const D half(0.5), fw(frame_w), fh(frame_h);
        const Corners<D> a{(cx - half * w) * fw, (cy - half * h) * fh, (cx + half * w) * fw, (cy + half * h) * fh};
        const BoxA gb = to_absolute(gt_boxes.at(g), frame_w, frame_h);
        const Corners<D> b{D(gb.x0), D(gb.y0), D(gb.x1), D(gb.y1)};
        const D gi = overlap(a, b).giou;
        total += 1.0 - gi.v;
        for (std::size_t c = 0; c < 4; ++c) dpred[p * 4 + c] -= gi.d[c] / norm;
    }
    return make_op(Shape{1}, {total / norm}, "giou_loss", {pred}, [dpred = std::move(dpred)](detail::Node& nd) {
        auto& g = nd.input_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[0] * dpred[i];
    });
}

struct StageLoss {
    double cls = 0.0;
    double l1 = 0.0;
    double giou = 0.0;
};

struct LossBreakdown {
    Tensor total_tensor;  // differentiable weighted total
    double total = 0.0;
    double cls = 0.0;
    double l1 = 0.0;
    double giou = 0.0;
    std::vector<StageLoss> per_stage;
    bool empty = false;  // batch had no objects; normalizer floored to 1
    // matches[image][stage]
    std::vector<std::vector<MatchResult>> matches;
};

// Matches every stage of every image independently on detached values and
// sums the weighted terms. outputs[image][stage]; num_objects is the total
// ground-truth count over the batch.
inline LossBreakdown set_loss(const std::vector<std::vector<StageOutput>>& outputs, const std::vector<GroundTruth>& gts,
                              const CostWeights& w, double frame_w = 1.0, double frame_h = 1.0) {
    if (outputs.size() != gts.size()) throw ContractError("set_loss: image count mismatch");
    if (outputs.empty() || outputs[0].empty()) throw ContractError("set_loss: need at least one stage");
    const std::size_t stages = outputs[0].size();
    std::size_t num_objects = 0;
    for (const auto& gt : gts) num_objects += gt.size();

    LossBreakdown lb;
    lb.empty = num_objects == 0;
    lb.per_stage.resize(stages);
    lb.matches.resize(outputs.size());
    std::vector<Tensor> terms;
    for (std::size_t img = 0; img < outputs.size(); ++img) {
        if (outputs[img].size() != stages) throw ContractError("set_loss: stage count differs across images");
        for (std::size_t t = 0; t < stages; ++t) {
            const StageOutput& so = outputs[img][t];
            const GroundTruth& gt = gts[img];
            Tensor probs;
            {
                NoGradGuard ng;
                probs = sigmoid(so.class_logits);
            }
            const CostMatrix cost = build_cost_matrix(probs, box_list(so.boxes), gt.labels, gt.boxes, w, frame_w, frame_h);
            MatchResult m = hungarian(cost);
            Tensor fl = focal_loss(so.class_logits, m, gt.labels, w.alpha, w.gamma, num_objects);
            Tensor l1 = l1_box_loss(so.boxes, m, gt.boxes, num_objects);
            Tensor gl = giou_loss(so.boxes, m, gt.boxes, num_objects, frame_w, frame_h);
            lb.per_stage[t].cls += fl.item();
            lb.per_stage[t].l1 += l1.item();
            lb.per_stage[t].giou += gl.item();
            terms.push_back(add(add(scale(fl, w.cls), scale(l1, w.l1)), scale(gl, w.giou)));
            lb.matches[img].push_back(std::move(m));
        }
    }
    Tensor total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    lb.total_tensor = total;
    lb.total = total.item();
    for (const auto& s : lb.per_stage) {
        lb.cls += s.cls;
        lb.l1 += s.l1;
        lb.giou += s.giou;
    }
    return lb;
}

inline LossBreakdown set_loss(const std::vector<StageOutput>& outputs, const GroundTruth& gt, const CostWeights& w,
                              double frame_w = 1.0, double frame_h = 1.0) {
    return set_loss(std::vector<std::vector<StageOutput>>{outputs}, std::vector<GroundTruth>{gt}, w, frame_w, frame_h);
}

}  // namespace sparse_rcnn
