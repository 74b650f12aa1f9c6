#pragma once

// Plain (P3) PPM rendering of a scene with ground truth and per-stage
// predicted boxes.

#include <sparse_rcnn/data.hpp>
#include <sparse_rcnn/eval.hpp>

#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace sparse_rcnn {

inline constexpr double kVisualScoreFloor = 0.3;

using Rgb = std::array<unsigned char, 3>;

class Canvas {
public:
    Canvas(std::size_t width, std::size_t height) : w_(width), h_(height), px_(width * height, Rgb{0, 0, 0}) {}

    // Nearest-neighbor upscaled copy of a [3 x H x W] image in [0, 1].
    static Canvas from_image(const Tensor& image, std::size_t scale) {
        if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("Canvas: expected [3 x H x W] image");
        if (scale == 0) throw ContractError("Canvas: scale must be positive");
        const std::size_t h = image.dim(1), w = image.dim(2);
        Canvas c(w * scale, h * scale);
        for (std::size_t y = 0; y < c.h_; ++y)
            for (std::size_t x = 0; x < c.w_; ++x)
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    const double v = std::clamp(image[(ch * h + y / scale) * w + x / scale], 0.0, 1.0);
                    c.px_[y * c.w_ + x][ch] = static_cast<unsigned char>(std::lround(v * 255.0));
                }
        return c;
    }

    std::size_t width() const { return w_; }
    std::size_t height() const { return h_; }
    const Rgb& at(std::size_t x, std::size_t y) const { return px_.at(y * w_ + x); }

    void set(long x, long y, Rgb c) {
        if (x < 0 || y < 0 || x >= static_cast<long>(w_) || y >= static_cast<long>(h_)) return;
        px_[static_cast<std::size_t>(y) * w_ + static_cast<std::size_t>(x)] = c;
    }

    // 1-px outline of the pixel rectangle [x0, x1] x [y0, y1], clipped.
    void outline(long x0, long y0, long x1, long y1, Rgb c) {
        for (long x = x0; x <= x1; ++x) {
            set(x, y0, c);
            set(x, y1, c);
        }
        for (long y = y0; y <= y1; ++y) {
            set(x0, y, c);
            set(x1, y, c);
        }
    }

    std::string to_ppm() const {
        std::string out = "P3\n" + std::to_string(w_) + " " + std::to_string(h_) + "\n255\n";
        for (std::size_t y = 0; y < h_; ++y) {
            for (std::size_t x = 0; x < w_; ++x) {
                const Rgb& p = px_[y * w_ + x];
                out += std::to_string(p[0]) + ' ' + std::to_string(p[1]) + ' ' + std::to_string(p[2]);
                out += x + 1 < w_ ? ' ' : '\n';
            }
        }
        return out;
    }

private:
    std::size_t w_, h_;
    std::vector<Rgb> px_;
};

// Pixel rectangle covered by a box outline in a width x height canvas:
// absolute corners rounded to the nearest pixel, right/bottom edges drawn
// on the last covered pixel.
struct PixelBox {
    long x0, y0, x1, y1;
};

inline PixelBox pixel_box(const BoxN& b, std::size_t width, std::size_t height) {
    const BoxA a = to_absolute(b, static_cast<double>(width), static_cast<double>(height));
    return {std::lround(a.x0), std::lround(a.y0), std::lround(a.x1) - 1, std::lround(a.y1) - 1};
}

inline Rgb proposal_color(std::size_t index) {
    // Golden-ratio hue walk keeps neighboring indices apart.
    const double hue = std::fmod(0.13 + 0.6180339887498949 * static_cast<double>(index), 1.0);
    const auto c = detail::hsv_to_rgb(hue, 0.9, 1.0);
    return {static_cast<unsigned char>(std::lround(c[0] * 255)), static_cast<unsigned char>(std::lround(c[1] * 255)),
            static_cast<unsigned char>(std::lround(c[2] * 255))};
}

inline constexpr Rgb kGroundTruthColor{255, 255, 255};

// Draws GT (white) and, for every selected stage, each proposal whose
// best class score is at least score_floor in its per-index color.
inline Canvas render_scene(const SyntheticScene& scene, const std::vector<StageOutput>& stages,
                           const std::vector<std::size_t>& which_stages, std::size_t scale = 4,
                           double score_floor = kVisualScoreFloor) {
    Canvas c = Canvas::from_image(scene.image, scale);
    for (const auto& b : scene.objects.boxes) {
        const auto p = pixel_box(b, c.width(), c.height());
        c.outline(p.x0, p.y0, p.x1, p.y1, kGroundTruthColor);
    }
    for (std::size_t t : which_stages) {
        if (t >= stages.size()) throw ContractError("render_scene: stage " + std::to_string(t) + " out of range");
        const auto& so = stages[t];
        for (std::size_t i = 0; i < so.class_logits.dim(0); ++i) {
            double best = -INFINITY;
            for (std::size_t k = 0; k < so.class_logits.dim(1); ++k) best = std::max(best, so.class_logits.at(i, k));
            if (stable_sigmoid(best) < score_floor) continue;
            const auto p = pixel_box(box_row(so.boxes, i), c.width(), c.height());
            c.outline(p.x0, p.y0, p.x1, p.y1, proposal_color(i));
        }
    }
    return c;
}

inline void write_ppm(const Canvas& c, const std::filesystem::path& path) { detail::write_file(path, c.to_ppm()); }

}  // namespace sparse_rcnn
