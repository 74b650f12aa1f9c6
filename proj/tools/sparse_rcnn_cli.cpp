// sparse-rcnn: train, evaluate, run and inspect the detector.

#include <sparse_rcnn.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace sr = sparse_rcnn;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kNumericError = 4 };

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string resume;
    std::string checkpoint;
    std::string data;
    std::string image;
    std::string stages;
    std::string split = "val";
    double score_floor = 0.0;
    double visual_floor = sr::kVisualScoreFloor;
    double tolerance = 1e-4;
    std::size_t scale = 4;
    std::size_t limit = 0;
};

sr::Dataset dataset_for(const sr::RunConfig& cfg, const std::string& dir) {
    if (!dir.empty()) return sr::load_dataset(dir);
    return sr::load_or_generate(cfg.data.val_dir, cfg.val_spec());
}

int cmd_train(const Options& o) {
    sr::RunConfig cfg = sr::load_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (!o.out.empty()) cfg.out_dir = o.out;
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream file(std::filesystem::path(cfg.out_dir) / "train.log", std::ios::app);

    struct Tee : std::streambuf {
        std::streambuf *a, *b;
        int overflow(int c) override {
            if (c != traits_type::eof()) {
                a->sputc(static_cast<char>(c));
                b->sputc(static_cast<char>(c));
            }
            return traits_type::not_eof(c);
        }
        int sync() override { return a->pubsync() | b->pubsync(); }
    } tee;
    tee.a = std::cout.rdbuf();
    tee.b = file.rdbuf();
    std::ostream log(&tee);

    sr::TrainOptions opts;
    opts.log = &log;
    sr::Trainer trainer(cfg, opts);
    if (!o.resume.empty()) {
        const sr::Checkpoint c = sr::load_checkpoint(o.resume);
        try {
            trainer.resume(c);
        } catch (const sr::ContractError& e) {
            throw sr::ConfigError(std::string("resume: ") + e.what());
        }
        log << "resumed from " << o.resume << " at epoch " << c.epoch << "\n";
    }
    trainer.run();
    log << "checkpoint " << trainer.checkpoint_path().string() << "\n" << std::flush;
    return kOk;
}

int cmd_eval(const Options& o) {
    const sr::Checkpoint c = sr::load_checkpoint(o.checkpoint);
    const sr::RunConfig cfg = c.config();
    const auto model = sr::model_from_checkpoint(c);
    const sr::Dataset ds = dataset_for(cfg, o.data);
    if (ds.scenes.empty()) throw sr::FormatError("eval: dataset has no images");
    const sr::MapReport rep = sr::evaluate(*model, ds.scenes);
    std::cout << "config " << sr::config_hash(cfg) << " epoch " << c.epoch << "\n" << sr::format_report(rep);
    if (!o.out.empty()) {
        std::filesystem::create_directories(o.out);
        sr::detail::write_file(std::filesystem::path(o.out) / "metrics.json", sr::report_json(rep).dump(2) + "\n");
    }
    return kOk;
}

int cmd_infer(const Options& o) {
    const sr::Checkpoint c = sr::load_checkpoint(o.checkpoint);
    const auto model = sr::model_from_checkpoint(c);
    const sr::Tensor image = sr::decode_tensor_blob(sr::detail::read_file(o.image), o.image);
    if (image.rank() != 3 || image.dim(0) != 3) throw sr::FormatError(o.image + ": expected a [3 x H x W] image");
    std::vector<sr::StageOutput> outs;
    {
        sr::NoGradGuard ng;
        outs = model->forward(image);
    }
    auto dets = sr::detections_from_output(outs.back(), 0, o.score_floor);
    sr::sort_by_score(dets);
    char buf[160];
    for (const auto& d : dets) {
        std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f %.6f\n", d.label, d.score, d.box.cx, d.box.cy, d.box.w, d.box.h);
        std::cout << buf;
    }
    return kOk;
}

int cmd_gradcheck(const Options& o) {
    sr::ModelConfig mc = sr::gradcheck_model_config();
    sr::CostWeights w;
    std::uint64_t seed = 3;
    if (!o.config.empty()) {
        const sr::RunConfig cfg = sr::load_config(o.config);
        mc = cfg.model;
        w = cfg.loss;
        seed = cfg.seed;
    }
    if (o.seed) seed = *o.seed;
    sr::SuiteResult ops = sr::op_grad_suite();
    sr::SuiteResult full = sr::model_grad_suite(mc, w, seed, o.tolerance);
    sr::SuiteResult all;
    all.cases = ops.cases;
    all.cases.insert(all.cases.end(), full.cases.begin(), full.cases.end());
    all.passed = ops.passed && full.passed;
    std::cout << sr::format_suite(all) << (all.passed ? "PASS" : "FAIL") << "\n";
    return all.passed ? kOk : kFailure;
}

std::vector<std::size_t> parse_stages(const std::string& text, std::size_t num_stages) {
    std::vector<std::size_t> out;
    if (text.empty()) {
        for (std::size_t t = 0; t < num_stages; ++t) out.push_back(t);
        return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t v = 0;
        const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
        if (item.empty() || res.ec != std::errc() || res.ptr != item.data() + item.size() || v < 1 || v > num_stages) {
            throw sr::ConfigError("--stages: '" + item + "' is not a stage in 1.." + std::to_string(num_stages));
        }
        out.push_back(v - 1);
    }
    return out;
}

int cmd_visualize(const Options& o) {
    const sr::Checkpoint c = sr::load_checkpoint(o.checkpoint);
    const sr::RunConfig cfg = c.config();
    const auto model = sr::model_from_checkpoint(c);
    const std::vector<std::size_t> stages = parse_stages(o.stages, cfg.model.num_stages);
    sr::Dataset ds = dataset_for(cfg, o.data);
    if (o.limit && ds.scenes.size() > o.limit) ds.scenes.resize(o.limit);
    const auto outs = sr::predict(*model, ds.scenes);
    std::error_code ec;
    std::filesystem::create_directories(o.out, ec);
    if (ec) throw sr::IoError("cannot create '" + o.out + "': " + ec.message());
    char name[32];
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
        std::snprintf(name, sizeof name, "scene_%06zu.ppm", i);
        sr::write_ppm(sr::render_scene(ds.scenes[i], outs[i], stages, o.scale, o.visual_floor), std::filesystem::path(o.out) / name);
    }
    std::cout << "wrote " << ds.scenes.size() << " images to " << o.out << "\n";
    return kOk;
}

int cmd_synth(const Options& o) {
    const sr::RunConfig cfg = sr::load_config(o.config);
    sr::DatasetSpec spec;
    if (o.split == "train")
        spec = cfg.train_spec();
    else if (o.split == "val")
        spec = cfg.val_spec();
    else
        throw sr::ConfigError("--split must be train or val");
    if (o.seed) spec.seed = *o.seed;
    sr::save_dataset(sr::make_dataset(spec), o.out);
    std::cout << "wrote " << spec.num_images << " scenes to " << o.out << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse R-CNN detector on synthetic scenes"};
    app.require_subcommand(1);
    Options o;

    auto* train = app.add_subcommand("train", "Train from a config file");
    train->add_option("--config", o.config, "Config file")->required();
    train->add_option("--seed", o.seed, "Override run.seed");
    train->add_option("--out", o.out, "Override run.out_dir");
    train->add_option("--resume", o.resume, "Checkpoint to continue from");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (last stage, no post-processing)");
    eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", o.data, "Dataset directory (default: the configured validation set)");
    eval->add_option("--out", o.out, "Directory for metrics.json");

    auto* infer = app.add_subcommand("infer", "Print detections for one image blob");
    infer->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
    infer->add_option("--image", o.image, "Image tensor blob")->required();
    infer->add_option("--score-floor", o.score_floor, "Drop detections scoring below this");

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every op and the full loss");
    grad->add_option("--config", o.config, "Config whose [model] and [loss] are checked (default: built-in small model)");
    grad->add_option("--seed", o.seed, "Initialization seed");
    grad->add_option("--tolerance", o.tolerance, "Relative tolerance for the full loss");

    auto* vis = app.add_subcommand("visualize", "Render GT and per-stage boxes as PPM images");
    vis->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
    vis->add_option("--data", o.data, "Dataset directory (default: the configured validation set)");
    vis->add_option("--out", o.out, "Output directory")->required();
    vis->add_option("--stages", o.stages, "Comma-separated 1-based stages (default: all)");
    vis->add_option("--score-floor", o.visual_floor, "Minimum class score to draw");
    vis->add_option("--scale", o.scale, "Upscale factor");
    vis->add_option("--limit", o.limit, "Render only the first N scenes");

    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset to disk");
    synth->add_option("--config", o.config, "Config file")->required();
    synth->add_option("--split", o.split, "train or val (default: val)");
    synth->add_option("--seed", o.seed, "Override the split's seed");
    synth->add_option("--out", o.out, "Output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(o);
        if (*eval) return cmd_eval(o);
        if (*infer) return cmd_infer(o);
        if (*grad) return cmd_gradcheck(o);
        if (*vis) return cmd_visualize(o);
        if (*synth) return cmd_synth(o);
    } catch (const sr::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const sr::FormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataError;
    } catch (const sr::IoError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataError;
    } catch (const sr::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumericError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}
