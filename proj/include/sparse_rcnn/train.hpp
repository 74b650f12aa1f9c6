#pragma once

// Batched set-loss training, inference over scene lists and evaluation.

#include <sparse_rcnn/checkpoint.hpp>
#include <sparse_rcnn/config.hpp>
#include <sparse_rcnn/data.hpp>
#include <sparse_rcnn/eval.hpp>
#include <sparse_rcnn/model.hpp>
#include <sparse_rcnn/optim.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sparse_rcnn {

namespace detail {

// Keeps freed tape buffers in the heap instead of returning them to the
// kernel; each training step allocates and frees the same large blocks.
inline void tune_allocator() {
#if defined(__GLIBC__)
    static const bool once = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)once;
#endif
}

}  // namespace detail

// Forward passes without recording; outputs[image][stage].
inline std::vector<std::vector<StageOutput>> predict(const SparseRCNN& model, const std::vector<SyntheticScene>& scenes,
                                                     std::size_t batch_size = 16) {
    NoGradGuard ng;
    std::vector<std::vector<StageOutput>> outs;
    for (std::size_t i = 0; i < scenes.size(); i += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t k = i; k < std::min(scenes.size(), i + batch_size); ++k) idx.push_back(k);
        auto part = model.forward_batch(make_batch(scenes, idx).images);
        for (auto& p : part) outs.push_back(std::move(p));
    }
    return outs;
}

// Detections of one stage (default: the last) for every image.
inline std::vector<std::vector<Detection>> collect_detections(const std::vector<std::vector<StageOutput>>& outs,
                                                              std::optional<std::size_t> stage = std::nullopt,
                                                              double score_floor = 0.0) {
    std::vector<std::vector<Detection>> dets;
    for (std::size_t img = 0; img < outs.size(); ++img) {
        const std::size_t t = stage.value_or(outs[img].size() - 1);
        dets.push_back(detections_from_output(outs[img].at(t), img, score_floor));
    }
    return dets;
}

inline std::vector<GroundTruth> ground_truths(const std::vector<SyntheticScene>& scenes) {
    std::vector<GroundTruth> gts;
    for (const auto& s : scenes) gts.push_back(s.objects);
    return gts;
}

inline MapReport evaluate(const SparseRCNN& model, const std::vector<SyntheticScene>& scenes, std::size_t batch_size = 16) {
    return map_report(collect_detections(predict(model, scenes, batch_size)), ground_truths(scenes), model.config().num_classes);
}

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double learning_rate = 0.0;
    double loss = 0.0;
    double cls = 0.0;
    double l1 = 0.0;
    double giou = 0.0;
    double grad_norm = 0.0;  // mean pre-clip norm
    std::optional<MapReport> val;
    double seconds = 0.0;
};

struct TrainOptions {
    std::ostream* log = nullptr;
    bool evaluate_each_epoch = true;
    bool write_checkpoints = true;
    std::function<void(const EpochLog&)> on_epoch;
};

inline Dataset load_or_generate(const std::string& dir, const DatasetSpec& spec) {
    if (dir.empty()) return make_dataset(spec);
    Dataset ds = load_dataset(dir);
    if (ds.spec.num_classes != spec.num_classes || ds.spec.image_size != spec.image_size) {
        throw ConfigError("dataset '" + dir + "' does not match the configured classes / image size");
    }
    return ds;
}

class Trainer {
public:
    explicit Trainer(RunConfig cfg, TrainOptions opts = {})
        : cfg_(std::move(cfg)),
          opts_(std::move(opts)),
          model_(cfg_.model, cfg_.seed),
          optimizer_(model_.parameters().items(), cfg_.optim.adamw),
          rng_(detail::splitmix64(cfg_.seed ^ 0x7261696eULL)) {
        cfg_.validate();
        detail::tune_allocator();
        train_ = load_or_generate(cfg_.data.train_dir, cfg_.train_spec());
        val_ = load_or_generate(cfg_.data.val_dir, cfg_.val_spec());
    }

    void resume(const Checkpoint& c) {
        restore_parameters(c, model_);
        restore_optimizer(c, optimizer_);
        restore_rng(c, rng_);
        epoch_ = c.epoch;
    }

    EpochLog train_epoch() {
        const auto t0 = std::chrono::steady_clock::now();
        EpochLog log;
        log.epoch = epoch_ + 1;
        log.learning_rate = step_decay_lr(cfg_.optim.adamw.learning_rate, epoch_, cfg_.optim.lr_drop_epochs);

        std::vector<std::size_t> order(train_.scenes.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(order[i - 1], order[pick(rng_)]);
        }
        std::bernoulli_distribution coin(0.5);
        const double fw = static_cast<double>(cfg_.data.image_size);
        std::size_t steps = 0;
        std::vector<NamedTensor> params = model_.parameters().items();
        for (std::size_t i = 0; i < order.size(); i += cfg_.optim.batch_size) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(i),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + cfg_.optim.batch_size)));
            std::vector<bool> flip(idx.size(), false);
            if (cfg_.data.hflip)
                for (std::size_t k = 0; k < idx.size(); ++k) flip[k] = coin(rng_);
            const Batch b = make_batch(train_.scenes, idx, flip);

            optimizer_.zero_grad();
            const auto outs = model_.forward_batch(b.images);
            const LossBreakdown lb = set_loss(outs, b.targets, cfg_.loss, fw, fw);
            if (!std::isfinite(lb.total)) {
                throw NumericError("non-finite loss at epoch " + std::to_string(log.epoch) + " step " + std::to_string(steps) +
                                   " (cls " + std::to_string(lb.cls) + ", l1 " + std::to_string(lb.l1) + ", giou " +
                                   std::to_string(lb.giou) + ")");
            }
            lb.total_tensor.backward();
            const double norm = clip_grad_norm(params, cfg_.optim.clip_grad_norm);
            if (!std::isfinite(norm)) {
                throw NumericError("non-finite gradient at epoch " + std::to_string(log.epoch) + " step " + std::to_string(steps));
            }
            optimizer_.step(log.learning_rate);
            log.loss += lb.total;
            log.cls += lb.cls;
            log.l1 += lb.l1;
            log.giou += lb.giou;
            log.grad_norm += norm;
            ++steps;
        }
        optimizer_.zero_grad();
        const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(steps, 1));
        log.loss *= inv;
        log.cls *= inv;
        log.l1 *= inv;
        log.giou *= inv;
        log.grad_norm *= inv;
        ++epoch_;
        if (opts_.evaluate_each_epoch) log.val = evaluate(model_, val_.scenes, cfg_.optim.batch_size);
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return log;
    }

    // Trains until the configured epoch count, checkpointing after each epoch.
    std::vector<EpochLog> run() {
        std::vector<EpochLog> logs;
        if (opts_.log) *opts_.log << "config " << config_hash(cfg_) << " params " << model_.parameters().total_values() << "\n";
        while (epoch_ < cfg_.optim.epochs) {
            EpochLog log = train_epoch();
            if (opts_.write_checkpoints) save_checkpoint(checkpoint(), checkpoint_path());
            if (opts_.log) *opts_.log << format_epoch(log) << std::flush;
            if (opts_.on_epoch) opts_.on_epoch(log);
            logs.push_back(std::move(log));
        }
        return logs;
    }

    Checkpoint checkpoint() const { return capture_checkpoint(cfg_, model_, &optimizer_, epoch_, rng_); }
    std::filesystem::path checkpoint_path() const { return std::filesystem::path(cfg_.out_dir) / "checkpoint.ssck"; }

    std::string format_epoch(const EpochLog& log) const {
        char buf[256];
        std::snprintf(buf, sizeof buf, "[%s] epoch %3zu lr %.3g loss %.4f (cls %.4f l1 %.4f giou %.4f) |g| %.3f", config_hash(cfg_).c_str(),
                      log.epoch, log.learning_rate, log.loss, log.cls, log.l1, log.giou, log.grad_norm);
        std::string out = buf;
        if (log.val) {
            std::snprintf(buf, sizeof buf, " val AP %.4f AP50 %.4f AP75 %.4f", log.val->ap, log.val->ap50, log.val->ap75);
            out += buf;
        }
        std::snprintf(buf, sizeof buf, " %.1fs\n", log.seconds);
        return out + buf;
    }

    const RunConfig& config() const { return cfg_; }
    const SparseRCNN& model() const { return model_; }
    SparseRCNN& model() { return model_; }
    const Dataset& train_set() const { return train_; }
    const Dataset& val_set() const { return val_; }
    std::size_t epoch() const { return epoch_; }

private:
    RunConfig cfg_;
    TrainOptions opts_;
    SparseRCNN model_;
    AdamW optimizer_;
    std::mt19937_64 rng_;
    Dataset train_, val_;
    std::size_t epoch_ = 0;
};

// Rebuilds the model described by a checkpoint and loads its weights.
inline std::unique_ptr<SparseRCNN> model_from_checkpoint(const Checkpoint& c) {
    const RunConfig cfg = c.config();
    auto model = std::make_unique<SparseRCNN>(cfg.model, cfg.seed);
    restore_parameters(c, *model);
    return model;
}

}  // namespace sparse_rcnn
