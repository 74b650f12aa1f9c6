#pragma once

// Box representations, overlap measures and the per-stage box update.
//
// BoxN is the normalized center-size form used for learnable proposals and
// predictions; BoxA holds absolute corners. Overlap functions are templated
// on the scalar type so the losses can evaluate them on forward-mode duals.

#include <sparse_rcnn/ops.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

namespace sparse_rcnn {

inline constexpr double kMinBoxSize = 1e-4;
inline constexpr double kMaxLogScale = 4.0;
inline constexpr double kAreaEps = 1e-9;

struct BoxN {
    double cx = 0.5, cy = 0.5, w = 1.0, h = 1.0;
    friend bool operator==(const BoxN&, const BoxN&) = default;
};

struct BoxA {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }
    friend bool operator==(const BoxA&, const BoxA&) = default;
};

inline BoxA to_absolute(const BoxN& b, double image_w, double image_h) {
    return {(b.cx - 0.5 * b.w) * image_w, (b.cy - 0.5 * b.h) * image_h, (b.cx + 0.5 * b.w) * image_w,
            (b.cy + 0.5 * b.h) * image_h};
}

inline BoxN to_normalized(const BoxA& b, double image_w, double image_h) {
    return {0.5 * (b.x0 + b.x1) / image_w, 0.5 * (b.y0 + b.y1) / image_h, (b.x1 - b.x0) / image_w,
            (b.y1 - b.y0) / image_h};
}

inline BoxN clamp_box(BoxN b) {
    b.cx = std::clamp(b.cx, 0.0, 1.0);
    b.cy = std::clamp(b.cy, 0.0, 1.0);
    b.w = std::clamp(b.w, kMinBoxSize, 1.0);
    b.h = std::clamp(b.h, kMinBoxSize, 1.0);
    return b;
}

inline bool is_valid(const BoxN& b) {
    return b.cx >= 0.0 && b.cx <= 1.0 && b.cy >= 0.0 && b.cy <= 1.0 && b.w >= kMinBoxSize && b.w <= 1.0 &&
           b.h >= kMinBoxSize && b.h <= 1.0;
}

// ------------------------------------------------------------ forward-mode dual

// Value plus gradient with respect to N seeded inputs.
template <std::size_t N>
struct Dual {
    double v = 0.0;
    std::array<double, N> d{};

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT: implicit constants
    static Dual seed(double value, std::size_t i) {
        Dual x(value);
        x.d[i] = 1.0;
        return x;
    }

    friend Dual operator+(Dual a, const Dual& b) {
        a.v += b.v;
        for (std::size_t i = 0; i < N; ++i) a.d[i] += b.d[i];
        return a;
    }
    friend Dual operator-(Dual a, const Dual& b) {
        a.v -= b.v;
        for (std::size_t i = 0; i < N; ++i) a.d[i] -= b.d[i];
        return a;
    }
    friend Dual operator*(const Dual& a, const Dual& b) {
        Dual r(a.v * b.v);
        for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
        return r;
    }
    friend Dual operator/(const Dual& a, const Dual& b) {
        Dual r(a.v / b.v);
        for (std::size_t i = 0; i < N; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) / b.v;
        return r;
    }
    friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
};

inline double value_of(double x) { return x; }
template <std::size_t N>
double value_of(const Dual<N>& x) {
    return x.v;
}

template <class T>
T min_of(const T& a, const T& b) {
    return value_of(b) < value_of(a) ? b : a;
}
template <class T>
T max_of(const T& a, const T& b) {
    return value_of(a) < value_of(b) ? b : a;
}

template <class T>
struct Corners {
    T x0, y0, x1, y1;
};

template <class T>
struct Overlap {
    T iou;
    T giou;
};

template <class T>
bool corners_before(const Corners<T>& a, const Corners<T>& b) {
    const double av[4] = {value_of(a.x0), value_of(a.y0), value_of(a.x1), value_of(a.y1)};
    const double bv[4] = {value_of(b.x0), value_of(b.y0), value_of(b.x1), value_of(b.y1)};
    return std::lexicographical_compare(av, av + 4, bv, bv + 4);
}

// IoU and GIoU of two corner boxes. The pair is put in a fixed order first,
// so swapping the arguments cannot change the result even when the compiler
// contracts multiply-adds.
template <class T>
Overlap<T> overlap(const Corners<T>& first, const Corners<T>& second) {
    const bool swap = corners_before(second, first);
    const Corners<T>& a = swap ? second : first;
    const Corners<T>& b = swap ? first : second;
    const T zero(0.0);
    const T iw = max_of(zero, min_of(a.x1, b.x1) - max_of(a.x0, b.x0));
    const T ih = max_of(zero, min_of(a.y1, b.y1) - max_of(a.y0, b.y0));
    const T inter = iw * ih;
    const T area_a = (a.x1 - a.x0) * (a.y1 - a.y0);
    const T area_b = (b.x1 - b.x0) * (b.y1 - b.y0);
    const T uni = max_of(area_a + area_b - inter, T(kAreaEps));
    const T iou = inter / uni;
    const T hw = max_of(a.x1, b.x1) - min_of(a.x0, b.x0);
    const T hh = max_of(a.y1, b.y1) - min_of(a.y0, b.y0);
    const T hull = max_of(hw * hh, T(kAreaEps));
    const T dead = max_of(zero, hull - uni);
    return {iou, iou - dead / hull};
}

inline double iou(const BoxA& a, const BoxA& b) {
    return overlap<double>({a.x0, a.y0, a.x1, a.y1}, {b.x0, b.y0, b.x1, b.y1}).iou;
}

inline double giou(const BoxA& a, const BoxA& b) {
    return overlap<double>({a.x0, a.y0, a.x1, a.y1}, {b.x0, b.y0, b.x1, b.y1}).giou;
}

// Center shift scaled by the base size plus log-scale size change; the
// log-scale deltas are clamped to [-4, 4] and the result to BoxN limits.
inline BoxN apply_box_update(const BoxN& base, const std::array<double, 4>& delta) {
    const double dw = std::clamp(delta[2], -kMaxLogScale, kMaxLogScale);
    const double dh = std::clamp(delta[3], -kMaxLogScale, kMaxLogScale);
    return clamp_box({base.cx + delta[0] * base.w, base.cy + delta[1] * base.h, base.w * std::exp(dw),
                      base.h * std::exp(dh)});
}

// ------------------------------------------------------------ tensor forms

inline BoxN box_row(const Tensor& boxes, std::size_t i) {
    return {boxes[i * 4], boxes[i * 4 + 1], boxes[i * 4 + 2], boxes[i * 4 + 3]};
}

inline std::vector<BoxN> box_list(const Tensor& boxes) {
    std::vector<BoxN> out(boxes.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = box_row(boxes, i);
    return out;
}

inline Tensor boxes_tensor(const std::vector<BoxN>& boxes) {
    std::vector<double> data;
    data.reserve(boxes.size() * 4);
    for (const auto& b : boxes) data.insert(data.end(), {b.cx, b.cy, b.w, b.h});
    return Tensor(Shape{boxes.size(), 4}, std::move(data));
}

namespace detail {

inline bool box_component_clamped(double v, std::size_t comp) {
    const double lo = comp < 2 ? 0.0 : kMinBoxSize;
    return v < lo || v > 1.0;
}

inline double clamp_component(double v, std::size_t comp) {
    return std::clamp(v, comp < 2 ? 0.0 : kMinBoxSize, 1.0);
}

}  // namespace detail

// Projects raw [N x 4] cxcywh values onto BoxN limits. Gradient passes
// through unclamped components only.
inline Tensor clamp_boxes(const Tensor& raw) {
    if (raw.rank() != 2 || raw.dim(1) != 4) throw DimensionError("clamp_boxes: expected [N x 4], got " + shape_str(raw.shape()));
    std::vector<double> out(raw.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::clamp_component(raw[i], i % 4);
    return make_op(raw.shape(), std::move(out), "clamp_boxes", {raw}, [](detail::Node& n) {
        auto& g = n.input_grad(0);
        const auto& x = n.input_data(0);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!detail::box_component_clamped(x[i], i % 4)) g[i] += n.grad[i];
    });
}

// Row-wise apply_box_update, differentiable in both the base boxes and the
// deltas wherever the clamps are inactive.
inline Tensor apply_box_update(const Tensor& base, const Tensor& delta) {
    if (base.rank() != 2 || base.dim(1) != 4 || delta.shape() != base.shape()) {
        throw DimensionError("apply_box_update: base " + shape_str(base.shape()) + " vs delta " +
                             shape_str(delta.shape()));
    }
    const std::size_t n = base.dim(0);
    std::vector<double> raw(4 * n), out(4 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* b = base.data().data() + 4 * i;
        const double* d = delta.data().data() + 4 * i;
        raw[4 * i + 0] = b[0] + d[0] * b[2];
        raw[4 * i + 1] = b[1] + d[1] * b[3];
        raw[4 * i + 2] = b[2] * std::exp(std::clamp(d[2], -kMaxLogScale, kMaxLogScale));
        raw[4 * i + 3] = b[3] * std::exp(std::clamp(d[3], -kMaxLogScale, kMaxLogScale));
        for (std::size_t c = 0; c < 4; ++c) out[4 * i + c] = detail::clamp_component(raw[4 * i + c], c);
    }
    return make_op(base.shape(), std::move(out), "apply_box_update", {base, delta},
                   [n, raw = std::move(raw)](detail::Node& nd) {
                       const auto& b = nd.input_data(0);
                       const auto& d = nd.input_data(1);
                       std::vector<double> gr(4 * n);
                       for (std::size_t i = 0; i < 4 * n; ++i)
                           gr[i] = detail::box_component_clamped(raw[i], i % 4) ? 0.0 : nd.grad[i];
                       if (nd.input_needs_grad(0)) {
                           auto& g = nd.input_grad(0);
                           for (std::size_t i = 0; i < n; ++i) {
                               const std::size_t o = 4 * i;
                               g[o + 0] += gr[o + 0];
                               g[o + 1] += gr[o + 1];
                               g[o + 2] += gr[o + 0] * d[o + 0] + gr[o + 2] * raw[o + 2] / b[o + 2];
                               g[o + 3] += gr[o + 1] * d[o + 1] + gr[o + 3] * raw[o + 3] / b[o + 3];
                           }
                       }
                       if (nd.input_needs_grad(1)) {
                           auto& g = nd.input_grad(1);
                           for (std::size_t i = 0; i < n; ++i) {
                               const std::size_t o = 4 * i;
                               g[o + 0] += gr[o + 0] * b[o + 2];
                               g[o + 1] += gr[o + 1] * b[o + 3];
                               if (std::abs(d[o + 2]) < kMaxLogScale) g[o + 2] += gr[o + 2] * raw[o + 2];
                               if (std::abs(d[o + 3]) < kMaxLogScale) g[o + 3] += gr[o + 3] * raw[o + 3];
                           }
                       }
                   });
}

// Normalized cxcywh rows -> absolute (x0, y0, x1, y1) rows in a frame of
// size frame_w x frame_h.
inline Tensor boxes_to_corners(const Tensor& boxes, double frame_w, double frame_h) {
    if (boxes.rank() != 2 || boxes.dim(1) != 4) throw DimensionError("boxes_to_corners: expected [N x 4]");
    const std::size_t n = boxes.dim(0);
    std::vector<double> out(4 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const BoxA a = to_absolute(box_row(boxes, i), frame_w, frame_h);
        out[4 * i] = a.x0;
        out[4 * i + 1] = a.y0;
        out[4 * i + 2] = a.x1;
        out[4 * i + 3] = a.y1;
    }
    return make_op(boxes.shape(), std::move(out), "boxes_to_corners", {boxes}, [n, frame_w, frame_h](detail::Node& nd) {
        auto& g = nd.input_grad(0);
        for (std::size_t i = 0; i < n; ++i) {
            const double* go = nd.grad.data() + 4 * i;
            g[4 * i + 0] += (go[0] + go[2]) * frame_w;
            g[4 * i + 1] += (go[1] + go[3]) * frame_h;
            g[4 * i + 2] += 0.5 * (go[2] - go[0]) * frame_w;
            g[4 * i + 3] += 0.5 * (go[3] - go[1]) * frame_h;
        }
    });
}

}  // namespace sparse_rcnn
