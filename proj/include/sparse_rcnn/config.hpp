#pragma once

// Run configuration: flat key = value pairs inside [section] headers.
// '#' and ';' start comments. Unknown sections or keys are errors.

#include <sparse_rcnn/data.hpp>
#include <sparse_rcnn/model.hpp>
#include <sparse_rcnn/optim.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace sparse_rcnn {

struct OptimConfig {
    AdamWConfig adamw;
    std::size_t epochs = 36;
    std::vector<std::size_t> lr_drop_epochs{27, 33};
    std::size_t batch_size = 16;
    double clip_grad_norm = 1.0;
};

struct DataConfig {
    std::size_t train_images = 500;
    std::size_t val_images = 100;
    std::size_t image_size = 64;
    std::size_t max_objects = 4;
    bool crowd_mode = false;
    std::uint64_t train_seed = 1;
    std::uint64_t val_seed = 2;
    bool hflip = true;
    std::string train_dir;  // empty: generate in memory
    std::string val_dir;
};

struct RunConfig {
    ModelConfig model;
    DataConfig data;
    OptimConfig optim;
    CostWeights loss;
    std::uint64_t seed = 0;
    std::string out_dir = "runs/default";

    DatasetSpec train_spec() const {
        return {data.train_images, data.image_size, model.num_classes, data.max_objects, data.crowd_mode, data.train_seed};
    }
    DatasetSpec val_spec() const {
        return {data.val_images, data.image_size, model.num_classes, data.max_objects, data.crowd_mode, data.val_seed};
    }

    void validate() const {
        model.validate();
        train_spec().validate();
        val_spec().validate();
        if (optim.epochs == 0) throw ConfigError("optim.epochs must be >= 1");
        if (optim.batch_size == 0) throw ConfigError("optim.batch_size must be >= 1");
        if (!(optim.adamw.learning_rate > 0.0)) throw ConfigError("optim.learning_rate must be positive");
        if (optim.adamw.weight_decay < 0.0) throw ConfigError("optim.weight_decay must be >= 0");
        if (!(optim.adamw.beta1 >= 0.0 && optim.adamw.beta1 < 1.0) || !(optim.adamw.beta2 >= 0.0 && optim.adamw.beta2 < 1.0)) {
            throw ConfigError("optim betas must lie in [0, 1)");
        }
        if (!(optim.adamw.eps > 0.0)) throw ConfigError("optim.eps must be positive");
        if (!(loss.alpha > 0.0 && loss.alpha < 1.0)) throw ConfigError("loss.focal_alpha must lie in (0, 1)");
        if (loss.gamma < 0.0) throw ConfigError("loss.focal_gamma must be >= 0");
        if (loss.cls < 0.0 || loss.l1 < 0.0 || loss.giou < 0.0) throw ConfigError("loss weights must be >= 0");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

inline double parse_real(const std::string& v, const std::string& key) {
    double out = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
        throw ConfigError(key + ": expected a finite number, got '" + v + "'");
    }
    return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& v, const std::string& key) {
    std::vector<std::size_t> out;
    if (trim(v).empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_u64(trim(item), key));
    return out;
}

inline std::string join_list(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

struct Field {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

// section -> key -> accessor, in canonical order.
inline std::vector<std::pair<std::string, std::vector<std::pair<std::string, Field>>>> config_fields(RunConfig& c) {
    auto size = [](std::size_t& f, std::string key) {
        return Field{[&f, key](const std::string& v) { f = static_cast<std::size_t>(parse_u64(v, key)); },
                     [&f] { return std::to_string(f); }};
    };
    auto u64 = [](std::uint64_t& f, std::string key) {
        return Field{[&f, key](const std::string& v) { f = parse_u64(v, key); }, [&f] { return std::to_string(f); }};
    };
    auto real = [](double& f, std::string key) {
        return Field{[&f, key](const std::string& v) { f = parse_real(v, key); }, [&f] { return format_double(f); }};
    };
    auto flag = [](bool& f, std::string key) {
        return Field{[&f, key](const std::string& v) { f = parse_bool(v, key); }, [&f] { return std::string(f ? "true" : "false"); }};
    };
    auto text = [](std::string& f) { return Field{[&f](const std::string& v) { f = v; }, [&f] { return f; }}; };
    auto list = [](std::vector<std::size_t>& f, std::string key) {
        return Field{[&f, key](const std::string& v) { f = parse_list(v, key); }, [&f] { return join_list(f); }};
    };
    ModelConfig& m = c.model;
    return {
        {"model",
         {{"num_proposals", size(m.num_proposals, "model.num_proposals")},
          {"feature_dim", size(m.feature_dim, "model.feature_dim")},
          {"roi_size", size(m.roi_size, "model.roi_size")},
          {"num_stages", size(m.num_stages, "model.num_stages")},
          {"num_classes", size(m.num_classes, "model.num_classes")},
          {"num_attention_heads", size(m.num_attention_heads, "model.num_attention_heads")},
          {"ffn_dim", size(m.ffn_dim, "model.ffn_dim")},
          {"backbone_channels", list(m.backbone_channels, "model.backbone_channels")},
          {"feature_stride", size(m.feature_stride, "model.feature_stride")},
          {"init_scheme", Field{[&m](const std::string& v) { m.init_scheme = parse_init_scheme(v); },
                                [&m] { return to_string(m.init_scheme); }}},
          {"interaction", Field{[&m](const std::string& v) { m.interaction = parse_interaction(v); },
                                [&m] { return to_string(m.interaction); }}}}},
        {"data",
         {{"train_images", size(c.data.train_images, "data.train_images")},
          {"val_images", size(c.data.val_images, "data.val_images")},
          {"image_size", size(c.data.image_size, "data.image_size")},
          {"max_objects", size(c.data.max_objects, "data.max_objects")},
          {"crowd_mode", flag(c.data.crowd_mode, "data.crowd_mode")},
          {"train_seed", u64(c.data.train_seed, "data.train_seed")},
          {"val_seed", u64(c.data.val_seed, "data.val_seed")},
          {"hflip", flag(c.data.hflip, "data.hflip")},
          {"train_dir", text(c.data.train_dir)},
          {"val_dir", text(c.data.val_dir)}}},
        {"optim",
         {{"learning_rate", real(c.optim.adamw.learning_rate, "optim.learning_rate")},
          {"weight_decay", real(c.optim.adamw.weight_decay, "optim.weight_decay")},
          {"beta1", real(c.optim.adamw.beta1, "optim.beta1")},
          {"beta2", real(c.optim.adamw.beta2, "optim.beta2")},
          {"eps", real(c.optim.adamw.eps, "optim.eps")},
          {"epochs", size(c.optim.epochs, "optim.epochs")},
          {"lr_drop_epochs", list(c.optim.lr_drop_epochs, "optim.lr_drop_epochs")},
          {"batch_size", size(c.optim.batch_size, "optim.batch_size")},
          {"clip_grad_norm", real(c.optim.clip_grad_norm, "optim.clip_grad_norm")}}},
        {"loss",
         {{"class_weight", real(c.loss.cls, "loss.class_weight")},
          {"l1_weight", real(c.loss.l1, "loss.l1_weight")},
          {"giou_weight", real(c.loss.giou, "loss.giou_weight")},
          {"focal_alpha", real(c.loss.alpha, "loss.focal_alpha")},
          {"focal_gamma", real(c.loss.gamma, "loss.focal_gamma")}}},
        {"run", {{"seed", u64(c.seed, "run.seed")}, {"out_dir", text(c.out_dir)}}},
    };
}

}  // namespace detail

inline RunConfig parse_config(const std::string& text, const std::string& origin = "config") {
    RunConfig cfg;
    auto fields = detail::config_fields(cfg);
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    auto where = [&] { return origin + ":" + std::to_string(lineno) + ": "; };
    while (std::getline(in, line)) {
        ++lineno;
        const auto cut = line.find_first_of("#;");
        if (cut != std::string::npos) line.resize(cut);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where() + "malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            bool known = false;
            for (const auto& [name, f] : fields) known = known || name == section;
            if (!known) throw ConfigError(where() + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where() + "expected key = value");
        if (section.empty()) throw ConfigError(where() + "key outside of any section");
        const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
        bool found = false;
        for (auto& [name, entries] : fields) {
            if (name != section) continue;
            for (auto& [k, f] : entries)
                if (k == key) {
                    try {
                        f.set(value);
                    } catch (const ConfigError& e) {
                        throw ConfigError(where() + e.what());
                    }
                    found = true;
                }
        }
        if (!found) throw ConfigError(where() + "unknown key '" + key + "' in [" + section + "]");
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path);
}

// Canonical text: every field, fixed order, shortest round-trip numbers.
inline std::string canonical_config(const RunConfig& cfg) {
    RunConfig copy = cfg;
    std::string out;
    for (const auto& [section, entries] : detail::config_fields(copy)) {
        out += "[" + section + "]\n";
        for (const auto& [key, f] : entries) out += key + " = " + f.get() + "\n";
    }
    return out;
}

inline std::string config_hash(const RunConfig& cfg) { return detail::hex64(detail::fnv1a(canonical_config(cfg))); }

}  // namespace sparse_rcnn
