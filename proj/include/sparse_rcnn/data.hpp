#pragma once

// Synthetic detection scenes: colored axis-aligned rectangles over a noisy
// gray background. A scene is a pure function of (spec, index).
//
// On disk a dataset is a directory holding
//     index.jsonl        header line + one record per image
//     img_%06d.bin       "SSDT" | u32 version | u32 rank | u32 dims... | f64 LE data
//     ann_%06d.txt       one "label cx cy w h" line per object

#include <sparse_rcnn/losses.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace sparse_rcnn {

inline constexpr double kSceneIouCap = 0.3;
inline constexpr double kCrowdIouLow = 0.6;
inline constexpr double kCrowdIouHigh = 0.8;
inline constexpr std::uint32_t kBlobVersion = 1;
inline constexpr std::uint32_t kIndexVersion = 1;

struct DatasetSpec {
    std::size_t num_images = 500;
    std::size_t image_size = 64;
    std::size_t num_classes = 3;
    std::size_t max_objects = 4;
    bool crowd_mode = false;
    std::uint64_t seed = 1;

    void validate() const {
        if (num_images == 0) throw ConfigError("num_images must be >= 1");
        if (image_size < 16 || image_size % 8 != 0) throw ConfigError("image_size must be a multiple of 8 and >= 16");
        if (num_classes == 0) throw ConfigError("num_classes must be >= 1");
        if (max_objects == 0) throw ConfigError("max_objects must be >= 1");
        if (crowd_mode && max_objects < 2) throw ConfigError("crowd_mode needs max_objects >= 2");
    }

    bool operator==(const DatasetSpec&) const = default;
};

struct SyntheticScene {
    Tensor image;  // [3 x H x W], values in [0, 1]
    GroundTruth objects;
    // Index pairs (into objects) placed with IoU in the crowd band.
    std::vector<std::pair<std::size_t, std::size_t>> crowd_pairs;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double k[3] = {5.0, 3.0, 1.0};
    std::array<double, 3> rgb{};
    for (int i = 0; i < 3; ++i) {
        const double t = std::fmod(k[i] + h * 6.0, 6.0);
        rgb[static_cast<std::size_t>(i)] = v - v * s * std::max(0.0, std::min({t, 4.0 - t, 1.0}));
    }
    return rgb;
}

// Integer pixel rectangle [x0, x1) x [y0, y1).
struct PixelRect {
    long x0, y0, x1, y1;
    BoxA corners() const {
        return {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1), static_cast<double>(y1)};
    }
};

inline PixelRect random_rect(std::mt19937_64& rng, long size) {
    std::uniform_int_distribution<long> side(std::max<long>(4, size * 3 / 20), std::max<long>(5, size * 9 / 20));
    const long w = side(rng), h = side(rng);
    std::uniform_int_distribution<long> px(0, size - w), py(0, size - h);
    const long x0 = px(rng), y0 = py(rng);
    return {x0, y0, x0 + w, y0 + h};
}

// A same-size copy of r shifted along one axis so the pair IoU lands in
// [kCrowdIouLow, kCrowdIouHigh]. Returns false when it cannot stay inside.
inline bool crowd_partner(const PixelRect& r, std::mt19937_64& rng, long size, PixelRect& out) {
    std::uniform_real_distribution<double> target(kCrowdIouLow + 0.02, kCrowdIouHigh - 0.02);
    std::bernoulli_distribution coin(0.5);
    for (int attempt = 0; attempt < 16; ++attempt) {
        const bool horizontal = coin(rng);
        const bool forward = coin(rng);
        const long len = horizontal ? r.x1 - r.x0 : r.y1 - r.y0;
        const double t = target(rng);
        // Same-size boxes offset by d along one axis: IoU = (len - d) / (len + d).
        const long d = std::max<long>(1, std::lround(static_cast<double>(len) * (1.0 - t) / (1.0 + t)));
        const long shift = forward ? d : -d;
        PixelRect p = r;
        if (horizontal) {
            p.x0 += shift;
            p.x1 += shift;
        } else {
            p.y0 += shift;
            p.y1 += shift;
        }
        if (p.x0 < 0 || p.y0 < 0 || p.x1 > size || p.y1 > size) continue;
        const double v = iou(r.corners(), p.corners());
        if (v < kCrowdIouLow || v > kCrowdIouHigh) continue;
        out = p;
        return true;
    }
    return false;
}

}  // namespace detail

inline SyntheticScene generate_scene(const DatasetSpec& spec, std::size_t index) {
    spec.validate();
    if (index >= spec.num_images) {
        throw ContractError("generate_scene: index " + std::to_string(index) + " >= num_images " +
                            std::to_string(spec.num_images));
    }
    std::mt19937_64 rng(detail::splitmix64(spec.seed * 0x100000001b3ULL + index));
    const long size = static_cast<long>(spec.image_size);
    const std::size_t plane = spec.image_size * spec.image_size;

    std::vector<double> img(3 * plane);
    std::uniform_real_distribution<double> noise(-0.06, 0.06);
    std::uniform_real_distribution<double> base(0.4, 0.55);
    const double bg = base(rng);
    for (std::size_t i = 0; i < plane; ++i) {
        const double shared = noise(rng);
        for (std::size_t c = 0; c < 3; ++c) img[c * plane + i] = bg + shared + 0.25 * noise(rng);
    }

    std::uniform_int_distribution<std::size_t> count_dist(spec.crowd_mode ? 2 : 1, spec.max_objects);
    const std::size_t target = count_dist(rng);
    std::vector<detail::PixelRect> rects;
    SyntheticScene scene;
    if (spec.crowd_mode) {
        for (int attempt = 0; attempt < 64 && rects.empty(); ++attempt) {
            const auto r = detail::random_rect(rng, size);
            detail::PixelRect p{};
            if (detail::crowd_partner(r, rng, size, p)) {
                rects.push_back(r);
                rects.push_back(p);
                scene.crowd_pairs.emplace_back(0, 1);
            }
        }
        if (rects.empty()) throw NumericError("generate_scene: could not place a crowd pair");
    }
    for (int attempt = 0; rects.size() < target && attempt < 200; ++attempt) {
        const auto r = detail::random_rect(rng, size);
        bool ok = true;
        for (const auto& o : rects) ok = ok && iou(r.corners(), o.corners()) <= kSceneIouCap;
        if (ok) rects.push_back(r);
    }

    std::uniform_int_distribution<int> label_dist(0, static_cast<int>(spec.num_classes) - 1);
    std::uniform_real_distribution<double> hue_jitter(-0.25, 0.25), sat(0.65, 1.0), val(0.75, 1.0), alpha(0.8, 0.95);
    const double band = 1.0 / static_cast<double>(spec.num_classes);
    for (std::size_t k = 0; k < rects.size(); ++k) {
        const auto& r = rects[k];
        // Crowd partners share the class of their anchor.
        const bool partner = spec.crowd_mode && k == 1;
        const int label = partner ? scene.objects.labels[0] : label_dist(rng);
        const double hue = (static_cast<double>(label) + 0.5 * hue_jitter(rng)) * band;
        const auto color = detail::hsv_to_rgb(hue, sat(rng), val(rng));
        const double a = alpha(rng);
        for (long y = r.y0; y < r.y1; ++y)
            for (long x = r.x0; x < r.x1; ++x) {
                const bool border = y == r.y0 || y == r.y1 - 1 || x == r.x0 || x == r.x1 - 1;
                const std::size_t p = static_cast<std::size_t>(y * size + x);
                for (std::size_t c = 0; c < 3; ++c) {
                    const double fill = border ? 0.1 * color[c] : color[c];
                    img[c * plane + p] = (1.0 - a) * img[c * plane + p] + a * fill;
                }
            }
        scene.objects.labels.push_back(label);
        scene.objects.boxes.push_back(to_normalized(r.corners(), static_cast<double>(size), static_cast<double>(size)));
    }
    for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
    scene.image = Tensor(Shape{3, spec.image_size, spec.image_size}, std::move(img));
    return scene;
}

inline std::vector<SyntheticScene> generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    std::vector<SyntheticScene> scenes;
    scenes.reserve(spec.num_images);
    for (std::size_t i = 0; i < spec.num_images; ++i) scenes.push_back(generate_scene(spec, i));
    return scenes;
}

// Mirrors the image left-right and the boxes with it.
inline SyntheticScene hflip(const SyntheticScene& s) {
    const std::size_t h = s.image.dim(1), w = s.image.dim(2);
    std::vector<double> out(s.image.numel());
    const auto src = s.image.data();
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out[(c * h + y) * w + x] = src[(c * h + y) * w + (w - 1 - x)];
    SyntheticScene f{Tensor(s.image.shape(), std::move(out)), s.objects, s.crowd_pairs};
    for (auto& b : f.objects.boxes) b.cx = 1.0 - b.cx;
    return f;
}

// ------------------------------------------------------------------ batching

struct Batch {
    Tensor images;  // [B x 3 x H x W]
    std::vector<GroundTruth> targets;
    std::vector<std::size_t> indices;  // source scene index per slot
};

// Stacks the listed scenes; flip[i] (when given) mirrors slot i.
inline Batch make_batch(const std::vector<SyntheticScene>& scenes, const std::vector<std::size_t>& indices,
                        const std::vector<bool>& flip = {}) {
    if (indices.empty()) throw ContractError("make_batch: empty batch");
    const Shape first = scenes.at(indices[0]).image.shape();
    Batch b;
    std::vector<double> data;
    data.reserve(indices.size() * numel(first));
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const SyntheticScene& s = scenes.at(indices[k]);
        if (s.image.shape() != first) {
            throw DimensionError("make_batch: mixed image sizes " + shape_str(first) + " and " + shape_str(s.image.shape()));
        }
        if (!flip.empty() && flip.at(k)) {
            const SyntheticScene f = hflip(s);
            data.insert(data.end(), f.image.data().begin(), f.image.data().end());
            b.targets.push_back(f.objects);
        } else {
            data.insert(data.end(), s.image.data().begin(), s.image.data().end());
            b.targets.push_back(s.objects);
        }
        b.indices.push_back(indices[k]);
    }
    b.images = Tensor(Shape{indices.size(), first[0], first[1], first[2]}, std::move(data));
    return b;
}

// Consecutive batches in scene order; the last one may be short.
inline std::vector<Batch> batch(const std::vector<SyntheticScene>& scenes, std::size_t batch_size) {
    if (batch_size == 0) throw ContractError("batch: batch_size must be positive");
    std::vector<Batch> out;
    for (std::size_t i = 0; i < scenes.size(); i += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t k = i; k < std::min(scenes.size(), i + batch_size); ++k) idx.push_back(k);
        out.push_back(make_batch(scenes, idx));
    }
    return out;
}

// Fraction of GT boxes whose mean crop color is nearest to its own class's
// mean color (class means estimated from the same scenes).
inline double nearest_mean_color_accuracy(const std::vector<SyntheticScene>& scenes, std::size_t num_classes) {
    std::vector<std::array<double, 3>> crops;
    std::vector<int> labels;
    for (const auto& s : scenes) {
        const std::size_t h = s.image.dim(1), w = s.image.dim(2);
        for (std::size_t k = 0; k < s.objects.size(); ++k) {
            const BoxA a = to_absolute(s.objects.boxes[k], static_cast<double>(w), static_cast<double>(h));
            std::array<double, 3> m{};
            std::size_t n = 0;
            // Interior only, skipping the border ring.
            for (auto y = static_cast<std::size_t>(a.y0) + 1; y + 1 < static_cast<std::size_t>(a.y1); ++y)
                for (auto x = static_cast<std::size_t>(a.x0) + 1; x + 1 < static_cast<std::size_t>(a.x1); ++x) {
                    for (std::size_t c = 0; c < 3; ++c) m[c] += s.image[(c * h + y) * w + x];
                    ++n;
                }
            for (auto& v : m) v /= static_cast<double>(std::max<std::size_t>(n, 1));
            crops.push_back(m);
            labels.push_back(s.objects.labels[k]);
        }
    }
    if (crops.empty()) return 0.0;
    std::vector<std::array<double, 3>> means(num_classes, {0, 0, 0});
    std::vector<std::size_t> counts(num_classes, 0);
    for (std::size_t i = 0; i < crops.size(); ++i) {
        const auto l = static_cast<std::size_t>(labels[i]);
        for (std::size_t c = 0; c < 3; ++c) means[l][c] += crops[i][c];
        ++counts[l];
    }
    for (std::size_t l = 0; l < num_classes; ++l)
        for (auto& v : means[l]) v /= static_cast<double>(std::max<std::size_t>(counts[l], 1));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < crops.size(); ++i) {
        std::size_t best = 0;
        double best_d = INFINITY;
        for (std::size_t l = 0; l < num_classes; ++l) {
            if (counts[l] == 0) continue;
            double d = 0.0;
            for (std::size_t c = 0; c < 3; ++c) d += (crops[i][c] - means[l][c]) * (crops[i][c] - means[l][c]);
            if (d < best_d) {
                best_d = d;
                best = l;
            }
        }
        if (static_cast<int>(best) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(crops.size());
}

// ------------------------------------------------------------------ persistence

namespace detail {

// FNV-1a, 64-bit.
inline std::uint64_t fnv1a(const std::string& bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + p.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + p.string() + "'");
}

template <class T>
void put_le(std::string& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    auto bits = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
    out.append(reinterpret_cast<const char*>(bits.data()), bits.size());
}

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <class T>
    T get() {
        if (pos_ + sizeof(T) > bytes_.size()) throw IoError(what_ + ": truncated at byte " + std::to_string(pos_));
        std::array<unsigned char, sizeof(T)> bits;
        std::memcpy(bits.data(), bytes_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bits.begin(), bits.end());
        pos_ += sizeof(T);
        return std::bit_cast<T>(bits);
    }

    std::string take(std::size_t n) {
        if (pos_ + n > bytes_.size()) throw IoError(what_ + ": truncated at byte " + std::to_string(pos_));
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }
    std::size_t position() const { return pos_; }
    const std::string& what() const { return what_; }

private:
    const std::string& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& what) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError(what + ": bad number '" + s + "'");
    return v;
}

}  // namespace detail

// Tensor blob: "SSDT" | u32 version | u32 rank | u32 dims... | f64 LE data.
inline std::string encode_tensor_blob(const Tensor& t) {
    std::string out = "SSDT";
    detail::put_le<std::uint32_t>(out, kBlobVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) detail::put_le<double>(out, v);
    return out;
}

inline Tensor decode_tensor_blob(const std::string& bytes, const std::string& what = "tensor blob") {
    if (bytes.size() < 4 || bytes.compare(0, 4, "SSDT") != 0) throw FormatError(what + ": bad magic");
    detail::ByteReader r(bytes, what);
    r.take(4);
    const auto version = r.get<std::uint32_t>();
    if (version != kBlobVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError(what + ": implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    const std::size_t n = numel(shape);
    if (bytes.size() - r.position() != n * 8) {
        throw IoError(what + ": expected " + std::to_string(n * 8) + " data bytes, found " +
                      std::to_string(bytes.size() - r.position()));
    }
    std::vector<double> data(n);
    for (auto& v : data) v = r.get<double>();
    return Tensor(std::move(shape), std::move(data));
}

inline std::string encode_annotations(const GroundTruth& gt) {
    std::string out;
    for (std::size_t k = 0; k < gt.size(); ++k) {
        const BoxN& b = gt.boxes[k];
        out += std::to_string(gt.labels[k]);
        for (double v : {b.cx, b.cy, b.w, b.h}) out += ' ' + detail::format_double(v);
        out += '\n';
    }
    return out;
}

inline GroundTruth decode_annotations(const std::string& text, const std::string& what = "annotations") {
    GroundTruth gt;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tok[5], extra;
        for (auto& t : tok)
            if (!(ls >> t)) throw FormatError(what + ":" + std::to_string(lineno) + ": expected 'label cx cy w h'");
        if (ls >> extra) throw FormatError(what + ":" + std::to_string(lineno) + ": trailing fields");
        int label = 0;
        const auto res = std::from_chars(tok[0].data(), tok[0].data() + tok[0].size(), label);
        if (res.ec != std::errc() || res.ptr != tok[0].data() + tok[0].size() || label < 0) {
            throw FormatError(what + ":" + std::to_string(lineno) + ": bad label '" + tok[0] + "'");
        }
        gt.labels.push_back(label);
        gt.boxes.push_back({detail::parse_double(tok[1], what), detail::parse_double(tok[2], what),
                            detail::parse_double(tok[3], what), detail::parse_double(tok[4], what)});
    }
    return gt;
}

struct Dataset {
    DatasetSpec spec;
    std::vector<SyntheticScene> scenes;
};

inline Dataset make_dataset(const DatasetSpec& spec) { return {spec, generate_dataset(spec)}; }

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    std::string index;
    nlohmann::json header = {{"format", "sparse-rcnn-dataset"},
                             {"version", kIndexVersion},
                             {"num_images", ds.scenes.size()},
                             {"image_size", ds.spec.image_size},
                             {"num_classes", ds.spec.num_classes},
                             {"max_objects", ds.spec.max_objects},
                             {"crowd_mode", ds.spec.crowd_mode},
                             {"seed", ds.spec.seed}};
    index += header.dump() + '\n';
    char name[32];
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
        const auto& s = ds.scenes[i];
        const std::string blob = encode_tensor_blob(s.image);
        const std::string ann = encode_annotations(s.objects);
        std::snprintf(name, sizeof name, "img_%06zu.bin", i);
        const std::string img_name = name;
        std::snprintf(name, sizeof name, "ann_%06zu.txt", i);
        const std::string ann_name = name;
        detail::write_file(dir / img_name, blob);
        detail::write_file(dir / ann_name, ann);
        nlohmann::json pairs = nlohmann::json::array();
        for (const auto& [a, b] : s.crowd_pairs) pairs.push_back({a, b});
        nlohmann::json rec = {{"index", i},
                              {"image", img_name},
                              {"annotations", ann_name},
                              {"num_objects", s.objects.size()},
                              {"crowd_pairs", pairs},
                              {"image_checksum", detail::hex64(detail::fnv1a(blob))},
                              {"annotation_checksum", detail::hex64(detail::fnv1a(ann))}};
        index += rec.dump() + '\n';
    }
    detail::write_file(dir / "index.jsonl", index);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const std::string text = detail::read_file(dir / "index.jsonl");
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("index.jsonl: empty");
    Dataset ds;
    try {
        const auto h = nlohmann::json::parse(line);
        if (h.at("format").get<std::string>() != "sparse-rcnn-dataset") throw FormatError("index.jsonl: not a dataset index");
        const auto version = h.at("version").get<std::uint32_t>();
        if (version != kIndexVersion) throw FormatError("index.jsonl: unsupported version " + std::to_string(version));
        ds.spec.num_images = h.at("num_images").get<std::size_t>();
        ds.spec.image_size = h.at("image_size").get<std::size_t>();
        ds.spec.num_classes = h.at("num_classes").get<std::size_t>();
        ds.spec.max_objects = h.at("max_objects").get<std::size_t>();
        ds.spec.crowd_mode = h.at("crowd_mode").get<bool>();
        ds.spec.seed = h.at("seed").get<std::uint64_t>();
        for (std::size_t i = 0; i < ds.spec.num_images; ++i) {
            if (!std::getline(in, line)) {
                throw IoError("index.jsonl: truncated, expected " + std::to_string(ds.spec.num_images) + " records");
            }
            const auto rec = nlohmann::json::parse(line);
            if (rec.at("index").get<std::size_t>() != i) throw FormatError("index.jsonl: records out of order at " + std::to_string(i));
            const auto img_name = rec.at("image").get<std::string>();
            const auto ann_name = rec.at("annotations").get<std::string>();
            const std::string blob = detail::read_file(dir / img_name);
            const std::string ann = detail::read_file(dir / ann_name);
            if (detail::hex64(detail::fnv1a(blob)) != rec.at("image_checksum").get<std::string>()) {
                throw IoError(img_name + ": checksum mismatch");
            }
            if (detail::hex64(detail::fnv1a(ann)) != rec.at("annotation_checksum").get<std::string>()) {
                throw IoError(ann_name + ": checksum mismatch");
            }
            SyntheticScene s;
            s.image = decode_tensor_blob(blob, img_name);
            s.objects = decode_annotations(ann, ann_name);
            if (s.objects.size() != rec.at("num_objects").get<std::size_t>()) throw FormatError(ann_name + ": object count mismatch");
            for (const auto& p : rec.at("crowd_pairs")) s.crowd_pairs.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>());
            ds.scenes.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("index.jsonl: ") + e.what());
    }
    if (std::getline(in, line) && !line.empty()) throw FormatError("index.jsonl: trailing records");
    return ds;
}

}  // namespace sparse_rcnn
