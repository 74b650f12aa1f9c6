#pragma once

// Finite-difference sweep over every differentiable op plus the full set
// loss of a small detector.

#include <sparse_rcnn/grad_check.hpp>
#include <sparse_rcnn/model.hpp>

#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace sparse_rcnn {

struct SuiteCase {
    std::string name;
    GradCheckReport report;
};

struct SuiteResult {
    std::vector<SuiteCase> cases;
    bool passed = true;

    // Case and entry with the largest relative error.
    std::pair<const SuiteCase*, const GradCheckEntry*> worst() const {
        const SuiteCase* wc = nullptr;
        const GradCheckEntry* we = nullptr;
        for (const auto& c : cases) {
            const GradCheckEntry* e = c.report.worst();
            if (e && (!we || e->max_rel_error > we->max_rel_error)) {
                wc = &c;
                we = e;
            }
        }
        return {wc, we};
    }
};

// N=3, C=8, S=2, T=2, K=3 on 16 x 16 images.
inline ModelConfig gradcheck_model_config() {
    ModelConfig m;
    m.num_proposals = 3;
    m.feature_dim = 8;
    m.roi_size = 2;
    m.num_stages = 2;
    m.num_classes = 3;
    m.num_attention_heads = 2;
    m.ffn_dim = 16;
    m.backbone_channels = {4, 4, 4};
    m.feature_stride = 4;
    m.init_scheme = InitScheme::random;
    return m;
}

namespace detail {

class SuiteRng {
public:
    explicit SuiteRng(std::uint64_t seed) : rng_(seed) {}

    Tensor uniform(Shape shape, double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        std::vector<double> v(numel(shape));
        for (auto& x : v) x = d(rng_);
        return Tensor(std::move(shape), std::move(v));
    }

    // Values with |x| in [0.1, 1], random sign: keeps kinks at 0 out of the FD stencil.
    Tensor away_from_zero(Shape shape) {
        std::uniform_real_distribution<double> mag(0.1, 1.0);
        std::bernoulli_distribution sign(0.5);
        std::vector<double> v(numel(shape));
        for (auto& x : v) x = sign(rng_) ? mag(rng_) : -mag(rng_);
        return Tensor(std::move(shape), std::move(v));
    }

    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
};

// Reduces a tensor to a scalar with fixed random weights so every output
// element carries a distinct upstream gradient.
inline std::function<Tensor()> weighted(std::function<Tensor()> f, SuiteRng& rng) {
    const Tensor probe = [&] {
        NoGradGuard ng;
        return f();
    }();
    const Tensor w = rng.uniform(probe.shape(), -1.0, 1.0);
    return [f = std::move(f), w] { return sum(mul(f(), w)); };
}

}  // namespace detail

// Every differentiable op at the given tolerance (default 1e-6).
inline SuiteResult op_grad_suite(std::uint64_t seed = 7, double tolerance = 1e-6) {
    detail::SuiteRng r(seed);
    SuiteResult out;
    const GradCheckOptions opts{1e-5, tolerance};
    auto run = [&](const std::string& name, std::function<Tensor()> f, std::vector<NamedTensor> inputs) {
        SuiteCase c{name, grad_check(detail::weighted(std::move(f), r), std::move(inputs), opts)};
        out.passed = out.passed && c.report.passed;
        out.cases.push_back(std::move(c));
    };

    {
        Tensor a = r.uniform({3, 4}, -1, 1), b = r.uniform({3, 4}, -1, 1);
        run("add", [=] { return add(a, b); }, {{"a", a}, {"b", b}});
        run("sub", [=] { return sub(a, b); }, {{"a", a}, {"b", b}});
        run("mul", [=] { return mul(a, b); }, {{"a", a}, {"b", b}});
        run("scale", [=] { return scale(a, -1.7); }, {{"a", a}});
        run("sigmoid", [=] { return sigmoid(scale(a, 3.0)); }, {{"a", a}});
        run("sum", [=] { return sum(a); }, {{"a", a}});
        run("reshape", [=] { return reshape(a, {2, 6}); }, {{"a", a}});
        run("transpose", [=] { return transpose(a); }, {{"a", a}});
        run("slice_cols", [=] { return slice_cols(a, 1, 3); }, {{"a", a}});
        run("slice_rows", [=] { return slice_rows(a, 1, 3); }, {{"a", a}});
        run("repeat_rows", [=] { return repeat_rows(a, 3); }, {{"a", a}});
        run("concat_cols", [=] { return concat_cols({a, b, a}); }, {{"a", a}, {"b", b}});
        run("softmax", [=] { return softmax(scale(a, 2.0)); }, {{"a", a}});
        Tensor bias = r.uniform({4}, -1, 1);
        run("add_row", [=] { return add_row(a, bias); }, {{"a", a}, {"bias", bias}});
    }
    {
        Tensor a = r.away_from_zero({4, 5});
        run("relu", [=] { return relu(a); }, {{"a", a}});
    }
    {
        Tensor a = r.uniform({2, 3, 4}, -1, 1);
        run("transpose_last2", [=] { return transpose_last2(a); }, {{"a", a}});
        Tensor x = r.uniform({2, 3, 8}, -1, 1);
        run("split_heads", [=] { return split_heads(x, 2); }, {{"x", x}});
        Tensor y = r.uniform({4, 3, 4}, -1, 1);
        run("merge_heads", [=] { return merge_heads(y, 2); }, {{"y", y}});
        Tensor b = r.uniform({2, 4, 5}, -1, 1);
        run("bmm", [=] { return bmm(a, b); }, {{"a", a}, {"b", b}});
    }
    {
        Tensor a = r.uniform({3, 4}, -1, 1), b = r.uniform({4, 5}, -1, 1), bias = r.uniform({5}, -1, 1);
        run("matmul", [=] { return matmul(a, b); }, {{"a", a}, {"b", b}});
        run("linear", [=] { return linear(a, b, bias); }, {{"x", a}, {"weight", b}, {"bias", bias}});
        Tensor x = r.uniform({3, 6}, -1, 1), g = r.uniform({6}, 0.5, 1.5), be = r.uniform({6}, -1, 1);
        run("layer_norm", [=] { return layer_norm(x, g, be); }, {{"x", x}, {"gamma", g}, {"beta", be}});
    }
    for (std::size_t stride : {1, 2}) {
        Tensor x = r.uniform({2, 2, 5, 5}, -1, 1), w = r.uniform({3, 2, 3, 3}, -1, 1), b = r.uniform({3}, -1, 1);
        run("conv2d/stride" + std::to_string(stride), [=] { return conv2d(x, w, b, stride, 1); },
            {{"x", x}, {"weight", w}, {"bias", b}});
    }
    {
        Tensor feat = r.uniform({2, 3, 6, 7}, -1, 1);
        // Boxes partly outside the map exercise the zero-padding path.
        Tensor corners(Shape{4, 4}, {0.3, 0.7, 4.1, 5.2, -0.8, 1.3, 3.3, 6.9, 2.05, 0.45, 6.6, 3.85, 1.2, 2.2, 2.9, 4.1});
        run("roi_align", [=] { return roi_align_batched(feat, corners, 2, 3); }, {{"feat", feat}, {"corners", corners}});
    }
    {
        Tensor raw(Shape{2, 4}, {0.3, 0.6, 0.2, 0.5, 0.8, 0.4, 0.7, 0.3});
        run("clamp_boxes", [=] { return clamp_boxes(raw); }, {{"raw", raw}});
        Tensor delta = r.uniform({2, 4}, -0.3, 0.3);
        run("apply_box_update", [=] { return apply_box_update(raw, delta); }, {{"base", raw}, {"delta", delta}});
        run("boxes_to_corners", [=] { return boxes_to_corners(raw, 16.0, 12.0); }, {{"boxes", raw}});
    }
    {
        ParameterStore ps;
        auto p = detail::make_attention(ps, "attn", 8, 2, r.engine());
        Tensor q = r.uniform({2, 3, 8}, -1, 1), ctx = r.uniform({2, 4, 8}, -1, 1);
        std::vector<NamedTensor> inputs{{"query", q}, {"context", ctx}};
        for (const auto& item : ps.items()) inputs.push_back(item);
        run("multi_head_attention", [=] { return multi_head_attention(p, q, ctx); }, std::move(inputs));
    }
    {
        const std::vector<BoxN> gt{{0.3, 0.4, 0.2, 0.3}, {0.7, 0.6, 0.3, 0.2}};
        const std::vector<int> labels{0, 2};
        MatchResult m;
        m.assignment = {{0, 2}, {1, 0}};
        Tensor logits = r.uniform({4, 3}, -2, 2);
        Tensor pred(Shape{4, 4}, {0.65, 0.55, 0.25, 0.32, 0.5, 0.5, 0.4, 0.4, 0.35, 0.42, 0.25, 0.2, 0.2, 0.8, 0.1, 0.1});
        run("focal_loss", [=] { return focal_loss(logits, m, labels, 0.25, 2.0, 2); }, {{"logits", logits}});
        run("l1_box_loss", [=] { return l1_box_loss(pred, m, gt, 2); }, {{"pred", pred}});
        run("giou_loss", [=] { return giou_loss(pred, m, gt, 2, 16.0, 16.0); }, {{"pred", pred}});
    }
    return out;
}

// Full set loss of a freshly initialized detector with respect to every
// parameter, including the proposal boxes and features.
inline SuiteResult model_grad_suite(const ModelConfig& cfg, const CostWeights& w = {}, std::uint64_t seed = 3,
                                    double tolerance = 1e-4, std::size_t image_size = 16) {
    SparseRCNN model(cfg, seed);
    detail::SuiteRng r(seed ^ 0x9e3779b97f4a7c15ULL);
    const Tensor image = r.uniform({3, image_size, image_size}, 0.0, 1.0);
    GroundTruth gt;
    gt.labels = {1, 0};
    gt.boxes = {{0.35, 0.4, 0.4, 0.5}, {0.7, 0.65, 0.3, 0.35}};
    const double frame = static_cast<double>(image_size);
    // Boxes passed between stages carry no gradient, so the finite-difference
    // side holds them at their unperturbed values.
    std::vector<Tensor> frozen;
    {
        NoGradGuard ng;
        for (const auto& so : model.forward(image)) frozen.push_back(so.boxes.clone());
    }
    auto f = [&] { return set_loss(model.forward(image, &frozen), gt, w, frame, frame).total_tensor; };
    SuiteResult out;
    SuiteCase c{"set_loss", grad_check(f, model.parameters().items(), {1e-6, tolerance})};
    out.passed = c.report.passed;
    out.cases.push_back(std::move(c));
    return out;
}

inline std::string format_suite(const SuiteResult& s) {
    std::string out;
    char buf[256];
    for (const auto& c : s.cases) {
        const GradCheckEntry* e = c.report.worst();
        std::snprintf(buf, sizeof buf, "%-6s %-24s worst %.3e (%s) tol %.0e\n", c.report.passed ? "ok" : "FAIL", c.name.c_str(),
                      e ? e->max_rel_error : 0.0, e ? e->name.c_str() : "-", c.report.tolerance);
        out += buf;
    }
    const auto [wc, we] = s.worst();
    if (wc && we) {
        std::snprintf(buf, sizeof buf, "worst op: %s input %s rel err %.3e\n", wc->name.c_str(), we->name.c_str(), we->max_rel_error);
        out += buf;
    }
    return out;
}

}  // namespace sparse_rcnn
