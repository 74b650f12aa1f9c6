#pragma once

// The detector: a small stride-4/8 convolutional backbone, learnable proposal
// boxes and features, and T iterative stages. Each stage pools RoI
// features for its boxes, relates the proposal features with
// self-attention, lets every proposal feature generate the 1x1 conv
// parameters applied to its own RoI (or, as the alternative, attend over
// it), and predicts class logits plus box deltas.

#include <sparse_rcnn/losses.hpp>

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace sparse_rcnn {

enum class InitScheme { center, image, grid, random };
enum class Interaction { dynamic, multi_head_attention };

inline std::string to_string(InitScheme s) {
    switch (s) {
        case InitScheme::center: return "center";
        case InitScheme::image: return "image";
        case InitScheme::grid: return "grid";
        case InitScheme::random: return "random";
    }
    return "?";
}

inline InitScheme parse_init_scheme(const std::string& s) {
    if (s == "center") return InitScheme::center;
    if (s == "image") return InitScheme::image;
    if (s == "grid") return InitScheme::grid;
    if (s == "random") return InitScheme::random;
    throw ConfigError("unknown proposal init scheme '" + s + "'");
}

inline std::string to_string(Interaction i) {
    return i == Interaction::dynamic ? "dynamic" : "multi_head_attention";
}

inline Interaction parse_interaction(const std::string& s) {
    if (s == "dynamic") return Interaction::dynamic;
    if (s == "multi_head_attention") return Interaction::multi_head_attention;
    throw ConfigError("unknown interaction '" + s + "'");
}

struct ModelConfig {
    std::size_t num_proposals = 100;
    std::size_t feature_dim = 256;
    std::size_t roi_size = 7;
    std::size_t num_stages = 6;
    std::size_t num_classes = 3;
    std::size_t num_attention_heads = 8;
    std::size_t ffn_dim = 512;
    std::vector<std::size_t> backbone_channels{16, 32, 64};
    std::size_t feature_stride = 8;  // 4 or 8
    InitScheme init_scheme = InitScheme::image;
    Interaction interaction = Interaction::dynamic;

    void validate() const {
        if (num_proposals < 1) throw ConfigError("num_proposals must be >= 1");
        if (num_stages < 1) throw ConfigError("num_stages must be >= 1");
        if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
        if (roi_size < 1) throw ConfigError("roi_size must be >= 1");
        if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
        if (feature_dim == 0 || feature_dim % 4 != 0) throw ConfigError("feature_dim must be a positive multiple of 4");
        if (num_attention_heads == 0 || feature_dim % num_attention_heads != 0) {
            throw ConfigError("feature_dim must be divisible by num_attention_heads");
        }
        if (backbone_channels.size() != 3) throw ConfigError("backbone_channels needs exactly three widths");
        if (feature_stride != 4 && feature_stride != 8) throw ConfigError("feature_stride must be 4 or 8");
        for (auto c : backbone_channels)
            if (c == 0) throw ConfigError("backbone_channels must be positive");
    }
};

// ------------------------------------------------------------------ parameters

// Ordered, named learnable tensors.
class ParameterStore {
public:
    Tensor add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
        t.set_requires_grad(true);
        index_[name] = items_.size();
        items_.emplace_back(name, t);
        return t;
    }

    const std::vector<NamedTensor>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Tensor get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
        return items_[it->second].second;
    }
    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }
    void zero_grad() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

private:
    std::vector<NamedTensor> items_;
    std::map<std::string, std::size_t> index_;
};

struct Linear {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct LayerNorm {
    Tensor gamma, beta;
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct Conv2d {
    Tensor weight, bias;
    std::size_t stride = 1, padding = 0;
    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
};

namespace detail {

inline Linear make_linear(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out,
                          std::mt19937_64& rng) {
    // Xavier uniform.
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-a, a);
    std::vector<double> w(in * out);
    for (auto& v : w) v = dist(rng);
    return {ps.add(name + ".weight", Tensor(Shape{in, out}, std::move(w))),
            ps.add(name + ".bias", Tensor(Shape{out}, 0.0))};
}

inline LayerNorm make_layer_norm(ParameterStore& ps, const std::string& name, std::size_t n) {
    return {ps.add(name + ".gamma", Tensor(Shape{n}, 1.0)), ps.add(name + ".beta", Tensor(Shape{n}, 0.0))};
}

inline Conv2d make_conv(ParameterStore& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                        std::size_t stride, std::size_t padding, std::mt19937_64& rng) {
    // He normal for ReLU stacks.
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(cin * k * k)));
    std::vector<double> w(cout * cin * k * k);
    for (auto& v : w) v = dist(rng);
    return {ps.add(name + ".weight", Tensor(Shape{cout, cin, k, k}, std::move(w))),
            ps.add(name + ".bias", Tensor(Shape{cout}, 0.0)), stride, padding};
}

}  // namespace detail

// ------------------------------------------------------------------ proposals

struct ProposalSet {
    Tensor boxes;     // [N x 4] raw normalized cxcywh, projected onto BoxN limits when read
    Tensor features;  // [N x C]
};

inline ProposalSet init_proposals(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t n = cfg.num_proposals, c = cfg.feature_dim;
    std::mt19937_64 rng(seed);
    std::vector<BoxN> boxes(n);
    switch (cfg.init_scheme) {
        case InitScheme::center:
            for (auto& b : boxes) b = {0.5, 0.5, 0.1, 0.1};
            break;
        case InitScheme::image:
            for (auto& b : boxes) b = {0.5, 0.5, 1.0, 1.0};
            break;
        case InitScheme::grid: {
            const auto g = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
            const double cell = 1.0 / static_cast<double>(g);
            for (std::size_t i = 0; i < n; ++i) {
                boxes[i] = {(static_cast<double>(i % g) + 0.5) * cell, (static_cast<double>(i / g) + 0.5) * cell, cell,
                            cell};
            }
            break;
        }
        case InitScheme::random: {
            std::normal_distribution<double> dist(0.5, 0.15);
            for (auto& b : boxes) {
                const double cx = dist(rng), cy = dist(rng), w = dist(rng), h = dist(rng);
                b = clamp_box({cx, cy, w, h});
            }
            break;
        }
    }
    std::normal_distribution<double> fdist(0.0, 0.02);
    std::vector<double> feats(n * c);
    for (auto& v : feats) v = fdist(rng);
    return {boxes_tensor(boxes), Tensor(Shape{n, c}, std::move(feats))};
}

// ------------------------------------------------------------------ RoIAlign

namespace detail {

struct BilinearTap {
    long x0, y0;
    double lx, ly;
};

inline BilinearTap bilinear_tap(double x, double y) {
    const double px = x - 0.5, py = y - 0.5;  // half-pixel alignment
    const double fx = std::floor(px), fy = std::floor(py);
    return {static_cast<long>(fx), static_cast<long>(fy), px - fx, py - fy};
}

}  // namespace detail

// Pools an S x S grid per box from a batch of feature maps
// feat [B x C x h x w]. corners [R x 4] holds (x0, y0, x1, y1) in
// feature-grid units; row r reads image r / rows_per_image. Every bin is
// read once at its center by bilinear interpolation and samples outside
// the map read zero. Output is [R x S*S x C], differentiable in feat and
// corners.
inline Tensor roi_align_batched(const Tensor& feat, const Tensor& corners, std::size_t rows_per_image, std::size_t s) {
    if (feat.rank() != 4) throw DimensionError("roi_align: feature maps must be [B x C x h x w], got " + shape_str(feat.shape()));
    if (corners.rank() != 2 || corners.dim(1) != 4) throw DimensionError("roi_align: boxes must be [N x 4], got " + shape_str(corners.shape()));
    if (s == 0) throw ContractError("roi_align: output size must be positive");
    const std::size_t batch = feat.dim(0), c = feat.dim(1), h = feat.dim(2), w = feat.dim(3);
    const std::size_t n = corners.dim(0), bins = s * s;
    if (rows_per_image == 0 || n != batch * rows_per_image) {
        throw DimensionError("roi_align: " + std::to_string(n) + " boxes do not split over " + std::to_string(batch) + " images");
    }
    const std::size_t plane = h * w;
    auto inside = [h, w](long y, long x) { return x >= 0 && y >= 0 && x < static_cast<long>(w) && y < static_cast<long>(h); };
    auto offset = [w](long y, long x) { return static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x); };

    std::vector<double> out(n * bins * c, 0.0);
    const double inv = 1.0 / static_cast<double>(s);
    for (std::size_t r = 0; r < n; ++r) {
        const double* fm = feat.data().data() + (r / rows_per_image) * c * plane;
        const double bx0 = corners[r * 4], by0 = corners[r * 4 + 1], bx1 = corners[r * 4 + 2], by1 = corners[r * 4 + 3];
        for (std::size_t iy = 0; iy < s; ++iy)
            for (std::size_t ix = 0; ix < s; ++ix) {
                const double fx = (static_cast<double>(ix) + 0.5) * inv, fy = (static_cast<double>(iy) + 0.5) * inv;
                const auto t = detail::bilinear_tap(bx0 + fx * (bx1 - bx0), by0 + fy * (by1 - by0));
                double* o = out.data() + (r * bins + iy * s + ix) * c;
                // Nested lerps, so a constant neighborhood reproduces its value exactly.
                const double* tap[4];
                const long ys[2] = {t.y0, t.y0 + 1}, xs[2] = {t.x0, t.x0 + 1};
                for (int a = 0; a < 2; ++a)
                    for (int b = 0; b < 2; ++b) tap[a * 2 + b] = inside(ys[a], xs[b]) ? fm + offset(ys[a], xs[b]) : nullptr;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t k = ch * plane;
                    const double f00 = tap[0] ? tap[0][k] : 0.0, f01 = tap[1] ? tap[1][k] : 0.0;
                    const double f10 = tap[2] ? tap[2][k] : 0.0, f11 = tap[3] ? tap[3][k] : 0.0;
                    const double top = f00 + t.lx * (f01 - f00), bottom = f10 + t.lx * (f11 - f10);
                    o[ch] = top + t.ly * (bottom - top);
                }
            }
    }
    return make_op(Shape{n, bins, c}, std::move(out), "roi_align", {feat, corners},
                   [=](detail::Node& nd) {
                       const auto& fv = nd.input_data(0);
                       const auto& bv = nd.input_data(1);
                       const bool gfeat = nd.input_needs_grad(0), gbox = nd.input_needs_grad(1);
                       double* gf = gfeat ? nd.input_grad(0).data() : nullptr;
                       double* gb = gbox ? nd.input_grad(1).data() : nullptr;
                       for (std::size_t r = 0; r < n; ++r) {
                           const std::size_t img = r / rows_per_image;
                           const double* fm = fv.data() + img * c * plane;
                           const double bx0 = bv[r * 4], by0 = bv[r * 4 + 1], bx1 = bv[r * 4 + 2], by1 = bv[r * 4 + 3];
                           for (std::size_t iy = 0; iy < s; ++iy)
                               for (std::size_t ix = 0; ix < s; ++ix) {
                                   const double fx = (static_cast<double>(ix) + 0.5) * inv;
                                   const double fy = (static_cast<double>(iy) + 0.5) * inv;
                                   const auto t = detail::bilinear_tap(bx0 + fx * (bx1 - bx0), by0 + fy * (by1 - by0));
                                   const double* go = nd.grad.data() + (r * bins + iy * s + ix) * c;
                                   const long ys[2] = {t.y0, t.y0 + 1}, xs[2] = {t.x0, t.x0 + 1};
                                   const double wy[2] = {1 - t.ly, t.ly}, wx[2] = {1 - t.lx, t.lx};
                                   // d(sample)/d(x), d(sample)/d(y) accumulated over channels
                                   double dx = 0.0, dy = 0.0;
                                   for (int a = 0; a < 2; ++a)
                                       for (int b = 0; b < 2; ++b) {
                                           if (!inside(ys[a], xs[b])) continue;
                                           const std::size_t off = offset(ys[a], xs[b]);
                                           if (gfeat) {
                                               const double wt = wy[a] * wx[b];
                                               double* dst = gf + img * c * plane + off;
                                               for (std::size_t ch = 0; ch < c; ++ch) dst[ch * plane] += wt * go[ch];
                                           }
                                           if (gbox) {
                                               double dot = 0.0;
                                               const double* src = fm + off;
                                               for (std::size_t ch = 0; ch < c; ++ch) dot += go[ch] * src[ch * plane];
                                               dx += dot * wy[a] * (b == 0 ? -1.0 : 1.0);
                                               dy += dot * wx[b] * (a == 0 ? -1.0 : 1.0);
                                           }
                                       }
                                   if (gbox) {
                                       gb[r * 4 + 0] += dx * (1 - fx);
                                       gb[r * 4 + 2] += dx * fx;
                                       gb[r * 4 + 1] += dy * (1 - fy);
                                       gb[r * 4 + 3] += dy * fy;
                                   }
                               }
                       }
                   });
}

// Single feature map [C x h x w], output [N x S*S x C].
inline Tensor roi_align(const Tensor& feat, const Tensor& corners, std::size_t s) {
    if (feat.rank() != 3) throw DimensionError("roi_align: feature map must be [C x h x w], got " + shape_str(feat.shape()));
    return roi_align_batched(reshape(feat, {1, feat.dim(0), feat.dim(1), feat.dim(2)}), corners,
                             std::max<std::size_t>(corners.dim(0), 1), s);
}

// ------------------------------------------------------------------ attention

struct AttentionParams {
    Linear query, key, value, out;
    std::size_t heads = 1;
};

namespace detail {

inline AttentionParams make_attention(ParameterStore& ps, const std::string& name, std::size_t c, std::size_t heads,
                                      std::mt19937_64& rng) {
    return {make_linear(ps, name + ".query", c, c, rng), make_linear(ps, name + ".key", c, c, rng),
            make_linear(ps, name + ".value", c, c, rng), make_linear(ps, name + ".out", c, c, rng), heads};
}

}  // namespace detail

// Multi-head scaled dot-product attention of query [B x Lq x C] over
// context [B x Lk x C]. Returns [B x Lq x C]; the softmax weights
// [(B*H) x Lq x Lk] are written to weights_out when given.
inline Tensor multi_head_attention(const AttentionParams& p, const Tensor& query, const Tensor& context,
                                   Tensor* weights_out = nullptr) {
    const std::size_t b = query.dim(0), lq = query.dim(1), c = query.dim(2), lk = context.dim(1);
    if (context.dim(0) != b || context.dim(2) != c) {
        throw DimensionError("multi_head_attention: query " + shape_str(query.shape()) + " vs context " +
                             shape_str(context.shape()));
    }
    const std::size_t d = c / p.heads;
    auto project = [&](const Linear& l, const Tensor& x, std::size_t len) {
        return split_heads(reshape(l(reshape(x, {b * len, c})), {b, len, c}), p.heads);
    };
    const Tensor q = project(p.query, query, lq);
    const Tensor k = project(p.key, context, lk);
    const Tensor v = project(p.value, context, lk);
    const Tensor weights = softmax(scale(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(d))));
    if (weights_out) *weights_out = weights;
    const Tensor mixed = reshape(merge_heads(bmm(weights, v), p.heads), {b * lq, c});
    return reshape(p.out(mixed), {b, lq, c});
}

// ------------------------------------------------------------------ model

struct StageParams {
    bool has_fuse = false;
    Linear fuse;  // [2C -> C], stages after the first
    AttentionParams self_attn;
    LayerNorm norm_attn;
    // dynamic interaction
    Linear dynamic_params;  // C -> 2 * C * C/4
    LayerNorm dynamic_norm1, dynamic_norm2;
    Linear dynamic_out;  // S*S*C -> C
    // attention interaction
    AttentionParams cross_attn;
    LayerNorm norm_inter;
    Linear ffn1, ffn2;
    LayerNorm norm_ffn;
    Linear cls;
    Linear reg1, reg2, reg3;
};

class SparseRCNN {
public:
    explicit SparseRCNN(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        const std::size_t c = cfg_.feature_dim;
        const auto& bc = cfg_.backbone_channels;
        backbone_[0] = detail::make_conv(params_, "backbone.conv1", 3, bc[0], 3, 2, 1, rng);
        backbone_[1] = detail::make_conv(params_, "backbone.conv2", bc[0], bc[1], 3, 2, 1, rng);
        backbone_[2] = detail::make_conv(params_, "backbone.conv3", bc[1], bc[2], 3, cfg_.feature_stride / 4, 1, rng);
        backbone_[3] = detail::make_conv(params_, "backbone.proj", bc[2], c, 1, 1, 0, rng);

        ProposalSet init = init_proposals(cfg_, seed ^ 0x5eed5eedULL);
        proposals_.boxes = params_.add("proposal.boxes", init.boxes);
        proposals_.features = params_.add("proposal.features", init.features);

        const double prior_bias = -std::log((1.0 - 0.01) / 0.01);
        for (std::size_t t = 0; t < cfg_.num_stages; ++t) {
            const std::string pre = "stage" + std::to_string(t) + ".";
            StageParams sp;
            if (t > 0) {
                sp.has_fuse = true;
                sp.fuse = detail::make_linear(params_, pre + "fuse", 2 * c, c, rng);
            }
            sp.self_attn = detail::make_attention(params_, pre + "self_attn", c, cfg_.num_attention_heads, rng);
            sp.norm_attn = detail::make_layer_norm(params_, pre + "norm_attn", c);
            if (cfg_.interaction == Interaction::dynamic) {
                const std::size_t s2 = cfg_.roi_size * cfg_.roi_size;
                sp.dynamic_params = detail::make_linear(params_, pre + "dynamic.params", c, 2 * c * (c / 4), rng);
                sp.dynamic_norm1 = detail::make_layer_norm(params_, pre + "dynamic.norm1", c / 4);
                sp.dynamic_norm2 = detail::make_layer_norm(params_, pre + "dynamic.norm2", c);
                sp.dynamic_out = detail::make_linear(params_, pre + "dynamic.out", s2 * c, c, rng);
            } else {
                sp.cross_attn = detail::make_attention(params_, pre + "cross_attn", c, cfg_.num_attention_heads, rng);
            }
            sp.norm_inter = detail::make_layer_norm(params_, pre + "norm_inter", c);
            sp.ffn1 = detail::make_linear(params_, pre + "ffn1", c, cfg_.ffn_dim, rng);
            sp.ffn2 = detail::make_linear(params_, pre + "ffn2", cfg_.ffn_dim, c, rng);
            sp.norm_ffn = detail::make_layer_norm(params_, pre + "norm_ffn", c);
            sp.cls = detail::make_linear(params_, pre + "cls", c, cfg_.num_classes, rng);
            for (std::size_t k = 0; k < cfg_.num_classes; ++k) sp.cls.bias.mutable_data()[k] = prior_bias;
            sp.reg1 = detail::make_linear(params_, pre + "reg1", c, c, rng);
            sp.reg2 = detail::make_linear(params_, pre + "reg2", c, c, rng);
            sp.reg3 = detail::make_linear(params_, pre + "reg3", c, 4, rng);
            stages_.push_back(std::move(sp));
        }
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& parameters() { return params_; }
    const ParameterStore& parameters() const { return params_; }
    const ProposalSet& proposals() const { return proposals_; }
    const StageParams& stage(std::size_t t) const { return stages_.at(t); }

    // images [B x 3 x H x W] -> [B x C x H/s x W/s], s = feature_stride
    Tensor backbone_forward_batch(const Tensor& images) const {
        if (images.rank() != 4 || images.dim(1) != 3) {
            throw DimensionError("backbone: expected [B x 3 x H x W], got " + shape_str(images.shape()));
        }
        const std::size_t h = images.dim(2), w = images.dim(3);
        if (h % 8 != 0 || w % 8 != 0) {
            throw DimensionError("backbone: image sides must be divisible by 8, got " + shape_str(images.shape()));
        }
        Tensor x = images;
        for (std::size_t i = 0; i < 3; ++i) x = relu(backbone_[i](x));
        return backbone_[3](x);
    }

    // image [3 x H x W] -> [C x H/s x W/s]
    Tensor backbone_forward(const Tensor& image) const {
        if (image.rank() != 3) throw DimensionError("backbone: expected [3 x H x W], got " + shape_str(image.shape()));
        const Tensor f = backbone_forward_batch(reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}));
        return reshape(f, {f.dim(1), f.dim(2), f.dim(3)});
    }

    // Self-attention within each image's proposal set, with residual and
    // layer norm. obj is [B*N x C].
    Tensor self_attention(std::size_t t, const Tensor& obj, std::size_t batch = 1, Tensor* weights_out = nullptr) const {
        const StageParams& sp = stages_.at(t);
        const std::size_t rows = obj.dim(0), c = obj.dim(1);
        if (batch == 0 || rows % batch != 0) throw DimensionError("self_attention: rows do not split over batch");
        const Tensor x = reshape(obj, {batch, rows / batch, c});
        const Tensor att = reshape(multi_head_attention(sp.self_attn, x, x, weights_out), {rows, c});
        return sp.norm_attn(add(obj, att));
    }

    // Each proposal feature generates the two 1x1 conv kernels applied to
    // its own RoI feature: pro [N x C], roi [N x S*S x C] -> [N x C].
    Tensor dynamic_instance_interaction(std::size_t t, const Tensor& pro, const Tensor& roi) const {
        const StageParams& sp = stages_.at(t);
        const std::size_t n = pro.dim(0), c = cfg_.feature_dim, c4 = c / 4, s2 = roi.dim(1);
        const Tensor dyn = sp.dynamic_params(pro);
        const Tensor param1 = reshape(slice_cols(dyn, 0, c * c4), {n, c, c4});
        const Tensor param2 = reshape(slice_cols(dyn, c * c4, 2 * c * c4), {n, c4, c});
        Tensor f = relu(sp.dynamic_norm1(bmm(roi, param1)));
        f = relu(sp.dynamic_norm2(bmm(f, param2)));
        return sp.dynamic_out(reshape(f, {n, s2 * c}));
    }

    // Alternative interaction: each proposal feature attends over its RoI bins.
    Tensor attention_interaction(std::size_t t, const Tensor& pro, const Tensor& roi) const {
        const StageParams& sp = stages_.at(t);
        const std::size_t n = pro.dim(0), c = pro.dim(1);
        return reshape(multi_head_attention(sp.cross_attn, reshape(pro, {n, 1, c}), roi), {n, c});
    }

    std::pair<Tensor, Tensor> heads(std::size_t t, const Tensor& obj) const {
        const StageParams& sp = stages_.at(t);
        Tensor logits = sp.cls(obj);
        Tensor deltas = sp.reg3(relu(sp.reg2(relu(sp.reg1(obj)))));
        return {logits, deltas};
    }

    // One stage over feature maps [B x C x h x w], boxes [B*N x 4] and
    // features [B*N x C]. Outputs stay stacked over the batch.
    StageOutput run_stage(std::size_t t, const Tensor& feat, const Tensor& boxes, const Tensor& features) const {
        const StageParams& sp = stages_.at(t);
        const std::size_t batch = feat.dim(0);
        const Tensor corners = boxes_to_corners(boxes, static_cast<double>(feat.dim(3)), static_cast<double>(feat.dim(2)));
        const Tensor roi = roi_align_batched(feat, corners, boxes.dim(0) / batch, cfg_.roi_size);
        const Tensor x = self_attention(t, features, batch);
        const Tensor inter = cfg_.interaction == Interaction::dynamic ? dynamic_instance_interaction(t, x, roi)
                                                                      : attention_interaction(t, x, roi);
        Tensor obj = sp.norm_inter(add(x, inter));
        obj = sp.norm_ffn(add(obj, sp.ffn2(relu(sp.ffn1(obj)))));
        auto [logits, deltas] = heads(t, obj);
        return {logits, apply_box_update(boxes, deltas), obj};
    }

    // Iterative head over a batch of feature maps; result is [stage] with
    // rows stacked image-major. Boxes handed from stage t to t+1 are
    // detached; features are carried forward with a concatenation-projection
    // of the previous two object feature sets (the first being the proposal
    // features).
    // stage_boxes, when given, replaces the detached box input of every
    // stage t >= 1 with stage_boxes[t - 1].
    std::vector<StageOutput> forward_stacked(const Tensor& feat, const std::vector<Tensor>* stage_boxes = nullptr) const {
        if (feat.rank() != 4 || feat.dim(1) != cfg_.feature_dim) {
            throw DimensionError("forward: expected [B x " + std::to_string(cfg_.feature_dim) + " x h x w] features, got " +
                                 shape_str(feat.shape()));
        }
        const std::size_t batch = feat.dim(0);
        std::vector<StageOutput> outs;
        Tensor boxes = repeat_rows(clamp_boxes(proposals_.boxes), batch);
        Tensor obj = repeat_rows(proposals_.features, batch);
        Tensor prev_obj = obj;
        for (std::size_t t = 0; t < cfg_.num_stages; ++t) {
            Tensor input = obj;
            if (t > 0) input = add(obj, stages_[t].fuse(concat_cols({obj, prev_obj})));
            StageOutput so = run_stage(t, feat, boxes, input);
            boxes = stage_boxes && t + 1 < cfg_.num_stages ? stage_boxes->at(t) : detach(so.boxes);
            prev_obj = obj;
            obj = so.object_features;
            outs.push_back(std::move(so));
        }
        return outs;
    }

    // images [B x 3 x H x W] -> outputs[image][stage]
    std::vector<std::vector<StageOutput>> forward_batch(const Tensor& images) const {
        const std::size_t batch = images.rank() == 4 ? images.dim(0) : 0;
        const auto stacked = forward_stacked(backbone_forward_batch(images));
        const std::size_t n = cfg_.num_proposals;
        std::vector<std::vector<StageOutput>> outs(batch);
        for (std::size_t b = 0; b < batch; ++b)
            for (const auto& so : stacked) {
                outs[b].push_back({slice_rows(so.class_logits, b * n, (b + 1) * n), slice_rows(so.boxes, b * n, (b + 1) * n),
                                   slice_rows(so.object_features, b * n, (b + 1) * n)});
            }
        return outs;
    }

    // image [3 x H x W] -> one output per stage
    std::vector<StageOutput> forward(const Tensor& image, const std::vector<Tensor>* stage_boxes = nullptr) const {
        return forward_from_features(backbone_forward(image), stage_boxes);
    }

    // feat [C x h x w] -> one output per stage
    std::vector<StageOutput> forward_from_features(const Tensor& feat, const std::vector<Tensor>* stage_boxes = nullptr) const {
        if (feat.rank() != 3) throw DimensionError("forward: expected [C x h x w] features, got " + shape_str(feat.shape()));
        return forward_stacked(reshape(feat, {1, feat.dim(0), feat.dim(1), feat.dim(2)}), stage_boxes);
    }

    SparseRCNN(const SparseRCNN&) = delete;
    SparseRCNN& operator=(const SparseRCNN&) = delete;
    SparseRCNN(SparseRCNN&&) = default;
    SparseRCNN& operator=(SparseRCNN&&) = default;

private:
    ModelConfig cfg_;
    ParameterStore params_;
    Conv2d backbone_[4];
    ProposalSet proposals_;
    std::vector<StageParams> stages_;
};

}  // namespace sparse_rcnn
