#pragma once

// Binary checkpoint, little-endian throughout:
//
//   "SSCK" | u32 version
//   u32 len | config text (canonical form)
//   u64 epoch
//   u32 len | RNG state text
//   u32 count | count x tensor record               model parameters
//   u64 optimizer steps
//   u32 count | count x tensor record               first moments
//   u32 count | count x tensor record               second moments
//
// tensor record: u32 name len | name | u32 rank | u32 dims... | f64 data

#include <sparse_rcnn/config.hpp>
#include <sparse_rcnn/model.hpp>
#include <sparse_rcnn/optim.hpp>

#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace sparse_rcnn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string config_text;
    std::uint64_t epoch = 0;
    std::string rng_state;
    std::vector<NamedTensor> params;
    std::uint64_t optimizer_steps = 0;
    std::vector<NamedTensor> first_moments, second_moments;

    RunConfig config() const { return parse_config(config_text, "checkpoint config"); }
};

namespace detail {

inline void put_string(std::string& out, const std::string& s) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

inline std::string get_string(ByteReader& r) {
    const auto n = r.get<std::uint32_t>();
    return r.take(n);
}

inline void put_record(std::string& out, const std::string& name, const Shape& shape, std::span<const double> data) {
    put_string(out, name);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : data) put_le<double>(out, v);
}

inline NamedTensor get_record(ByteReader& r) {
    std::string name = get_string(r);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError(r.what() + ": implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = r.get<double>();
    return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

inline void put_records(std::string& out, const std::vector<NamedTensor>& items) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(items.size()));
    for (const auto& [name, t] : items) put_record(out, name, t.shape(), t.data());
}

inline std::vector<NamedTensor> get_records(ByteReader& r) {
    const auto n = r.get<std::uint32_t>();
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < n; ++i) out.push_back(get_record(r));
    return out;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
    std::string out = "SSCK";
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_string(out, c.config_text);
    detail::put_le<std::uint64_t>(out, c.epoch);
    detail::put_string(out, c.rng_state);
    detail::put_records(out, c.params);
    detail::put_le<std::uint64_t>(out, c.optimizer_steps);
    detail::put_records(out, c.first_moments);
    detail::put_records(out, c.second_moments);
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
    if (bytes.size() < 4 || bytes.compare(0, 4, "SSCK") != 0) throw FormatError(what + ": bad magic");
    detail::ByteReader r(bytes, what);
    r.take(4);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
    Checkpoint c;
    c.config_text = detail::get_string(r);
    c.epoch = r.get<std::uint64_t>();
    c.rng_state = detail::get_string(r);
    c.params = detail::get_records(r);
    c.optimizer_steps = r.get<std::uint64_t>();
    c.first_moments = detail::get_records(r);
    c.second_moments = detail::get_records(r);
    if (!r.done()) throw FormatError(what + ": trailing bytes");
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create '" + path.parent_path().string() + "': " + ec.message());
    }
    // Write then rename so a crash never leaves a half-written checkpoint.
    const auto tmp = path.string() + ".tmp";
    detail::write_file(tmp, encode_checkpoint(c));
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into '" + path.string() + "': " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path), path.string());
}

inline Checkpoint capture_checkpoint(const RunConfig& cfg, const SparseRCNN& model, const AdamW* opt, std::uint64_t epoch,
                                     const std::mt19937_64& rng) {
    Checkpoint c;
    c.config_text = canonical_config(cfg);
    c.epoch = epoch;
    std::ostringstream rs;
    rs << rng;
    c.rng_state = rs.str();
    for (const auto& [name, t] : model.parameters().items()) c.params.emplace_back(name, t.clone());
    if (opt) {
        c.optimizer_steps = opt->steps();
        const auto& items = model.parameters().items();
        for (std::size_t k = 0; k < items.size(); ++k) {
            c.first_moments.emplace_back(items[k].first, Tensor(items[k].second.shape(), opt->first_moments()[k]));
            c.second_moments.emplace_back(items[k].first, Tensor(items[k].second.shape(), opt->second_moments()[k]));
        }
    }
    return c;
}

// Copies parameter values into the model after checking every name and shape.
inline void restore_parameters(const Checkpoint& c, SparseRCNN& model) {
    const auto& items = model.parameters().items();
    if (c.params.size() != items.size()) {
        throw ContractError("checkpoint holds " + std::to_string(c.params.size()) + " tensors, model expects " +
                            std::to_string(items.size()));
    }
    for (std::size_t k = 0; k < items.size(); ++k) {
        const auto& [name, t] = items[k];
        if (c.params[k].first != name) throw ContractError("checkpoint tensor " + std::to_string(k) + " is '" + c.params[k].first + "', expected '" + name + "'");
        if (c.params[k].second.shape() != t.shape()) {
            throw ContractError("checkpoint tensor '" + name + "' has shape " + shape_str(c.params[k].second.shape()) +
                                ", model expects " + shape_str(t.shape()));
        }
    }
    for (std::size_t k = 0; k < items.size(); ++k) {
        Tensor dst = items[k].second;
        const auto src = c.params[k].second.data();
        std::copy(src.begin(), src.end(), dst.mutable_data().begin());
    }
}

inline void restore_optimizer(const Checkpoint& c, AdamW& opt) {
    if (c.first_moments.empty() && c.optimizer_steps == 0) return;
    std::vector<std::vector<double>> m, v;
    for (const auto& [name, t] : c.first_moments) m.emplace_back(t.data().begin(), t.data().end());
    for (const auto& [name, t] : c.second_moments) v.emplace_back(t.data().begin(), t.data().end());
    opt.restore(c.optimizer_steps, std::move(m), std::move(v));
}

inline void restore_rng(const Checkpoint& c, std::mt19937_64& rng) {
    std::istringstream in(c.rng_state);
    in >> rng;
    if (!in) throw FormatError("checkpoint: unreadable RNG state");
}

}  // namespace sparse_rcnn
