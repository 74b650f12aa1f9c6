// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <sparse_rcnn.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>

using namespace sparse_rcnn;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr int kMatchTrials = 1000;
constexpr double kMatchSeconds = 10.0;
constexpr double kOpTolerance = 1e-6;
constexpr double kLossTolerance = 1e-4;
constexpr double kGradSuiteSeconds = 60.0;
constexpr int kRoiPairs = 100;
constexpr double kRoiTolerance = 1e-9;
constexpr int kGeometryPairs = 10000;
constexpr double kWorkedPairTolerance = 1e-12;
constexpr double kEquivarianceTolerance = 1e-10;
constexpr double kToyAp50 = 0.75;
constexpr double kToyMinutes = 30.0;
constexpr double kCrowdRecall = 0.6;
constexpr double kCrowdScoreFloor = 0.3;
constexpr std::uint64_t kCrowdValSeed = 7;

struct Verdict {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

RunConfig toy_config() { return load_config(SPARSE_RCNN_SOURCE_DIR "/configs/toy.ini"); }

fs::path run_dir(const std::string& name) {
    const fs::path p = fs::path("acceptance_runs") / name;
    fs::remove_all(p);
    return p;
}

struct TrainedRun {
    std::unique_ptr<Trainer> trainer;
    std::vector<EpochLog> logs;
    double seconds = 0.0;
};

TrainedRun train(RunConfig cfg, const std::string& name, bool checkpoints) {
    cfg.out_dir = run_dir(name).string();
    TrainedRun r;
    const auto t0 = std::chrono::steady_clock::now();
    r.trainer = std::make_unique<Trainer>(cfg, TrainOptions{&std::cout, true, checkpoints, {}});
    std::cout << "  training " << name << "\n";
    r.logs = r.trainer->run();
    r.seconds = seconds_since(t0);
    return r;
}

double final_ap50(const TrainedRun& r) { return r.logs.back().val->ap50; }

// The toy run is shared by criteria 7 through 10.
TrainedRun& toy_run() {
    static TrainedRun run = train(toy_config(), "toy", true);
    return run;
}

// ------------------------------------------------------------------ 1

// Minimum assignment cost by dynamic programming over used-column subsets;
// rows are added in index order so sums round the same way as a row-order
// total.
double subset_dp_min(const CostMatrix& c) {
    const std::size_t g = c.rows(), n = c.cols();
    std::vector<double> best(std::size_t{1} << n, INFINITY);
    best[0] = 0.0;
    double answer = g == 0 ? 0.0 : INFINITY;
    for (std::size_t mask = 0; mask < best.size(); ++mask) {
        if (best[mask] == INFINITY) continue;
        const auto row = static_cast<std::size_t>(__builtin_popcountll(mask));
        if (row == g) {
            answer = std::min(answer, best[mask]);
            continue;
        }
        for (std::size_t j = 0; j < n; ++j)
            if (!(mask >> j & 1)) best[mask | std::size_t{1} << j] = std::min(best[mask | std::size_t{1} << j], best[mask] + c(row, j));
    }
    return answer;
}

Verdict criterion_matching() {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    int mismatches = 0;
    double hungarian_seconds = 0.0;
    for (int trial = 0; trial < kMatchTrials; ++trial) {
        const std::size_t n = 1 + rng() % 10;
        const std::size_t g = rng() % (std::min<std::size_t>(n, 7) + 1);
        CostMatrix c(g, n);
        for (std::size_t i = 0; i < g; ++i)
            for (std::size_t j = 0; j < n; ++j) c(i, j) = u(rng);
        const auto t0 = std::chrono::steady_clock::now();
        const MatchResult m = hungarian(c);
        hungarian_seconds += seconds_since(t0);
        mismatches += m.total_cost != subset_dp_min(c);
    }
    return {mismatches == 0 && hungarian_seconds < kMatchSeconds,
            fmt("%d/%d exact cost mismatches, hungarian %.3fs", mismatches, kMatchTrials, hungarian_seconds)};
}

// ------------------------------------------------------------------ 2

Verdict criterion_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const SuiteResult ops = op_grad_suite(7, kOpTolerance);
    const SuiteResult full = model_grad_suite(gradcheck_model_config(), CostWeights{}, 3, kLossTolerance, 16);
    const double secs = seconds_since(t0);
    const auto [oc, oe] = ops.worst();
    const auto [fc, fe] = full.worst();
    return {ops.passed && full.passed && secs < kGradSuiteSeconds,
            fmt("%zu op cases worst %.2e (%s/%s), set loss worst %.2e (%s), %.1fs", ops.cases.size(), oe->max_rel_error,
                oc->name.c_str(), oe->name.c_str(), fe->max_rel_error, fe->name.c_str(), secs)};
}

// ------------------------------------------------------------------ 3

Verdict criterion_gradient_blocking() {
    ModelConfig mc = gradcheck_model_config();
    mc.num_stages = 3;
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor image(Shape{3, 16, 16});
    for (double& v : image.mutable_data()) v = u(rng);
    const GroundTruth gt{{1, 0}, {{0.35, 0.4, 0.4, 0.5}, {0.7, 0.65, 0.3, 0.35}}};
    const CostWeights w;
    bool ok = true;
    std::string detail;

    for (std::size_t t = 0; t + 1 < mc.num_stages; ++t) {
        SparseRCNN model(mc, 5);
        const auto outs = model.forward(image);
        set_loss({outs[t + 1]}, gt, w, 16, 16).total_tensor.backward();
        double leaked = 0.0;
        if (outs[t].boxes.has_grad())
            for (double g : outs[t].boxes.grad()) leaked = std::max(leaked, std::abs(g));

        // The next stage does read these boxes: moving them changes its loss.
        std::vector<Tensor> frozen;
        for (std::size_t k = 0; k + 1 < outs.size(); ++k) frozen.push_back(outs[k].boxes.clone());
        double before, after;
        {
            NoGradGuard ng;
            before = set_loss({model.forward(image, &frozen)[t + 1]}, gt, w, 16, 16).total;
            frozen[t].mutable_data()[0] += 1e-3;
            after = set_loss({model.forward(image, &frozen)[t + 1]}, gt, w, 16, 16).total;
        }
        const bool stage_ok = leaked == 0.0 && before != after;
        ok = ok && stage_ok;
        detail += fmt("stage %zu->%zu box grad %.1e (loss moves %.1e); ", t + 1, t + 2, leaked, std::abs(after - before));
    }

    SparseRCNN model(mc, 5);
    const auto outs = model.forward(image);
    set_loss({outs[0]}, gt, w, 16, 16).total_tensor.backward();
    const Tensor init = model.parameters().get("proposal.boxes");
    double reach = 0.0;
    if (init.has_grad())
        for (double g : init.grad()) reach = std::max(reach, std::abs(g));
    ok = ok && reach > 0.0;
    detail += fmt("stage 1 loss on initial boxes %.2e", reach);
    return {ok, detail};
}

// ------------------------------------------------------------------ 4

// Sum over every pixel of the bilinear hat kernel centered on the sample.
double hat_sample(const Tensor& f, std::size_t ch, double x, double y) {
    const std::size_t h = f.dim(1), w = f.dim(2);
    double acc = 0.0;
    for (std::size_t py = 0; py < h; ++py)
        for (std::size_t px = 0; px < w; ++px) {
            const double kx = std::max(0.0, 1.0 - std::abs(x - (static_cast<double>(px) + 0.5)));
            const double ky = std::max(0.0, 1.0 - std::abs(y - (static_cast<double>(py) + 0.5)));
            acc += kx * ky * f[(ch * h + py) * w + px];
        }
    return acc;
}

Verdict criterion_roi_align() {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> val(-2.0, 2.0), unit(0.0, 1.0);
    double worst = 0.0;
    for (int pair = 0; pair < kRoiPairs; ++pair) {
        const std::size_t c = 1 + rng() % 4, h = 4 + rng() % 9, w = 4 + rng() % 9, s = 1 + rng() % 7;
        Tensor f(Shape{c, h, w});
        for (double& v : f.mutable_data()) v = val(rng);
        // Boxes may poke past the map edge.
        const double x0 = -1.0 + unit(rng) * static_cast<double>(w), y0 = -1.0 + unit(rng) * static_cast<double>(h);
        const double bw = 0.1 + unit(rng) * static_cast<double>(w) * 0.8, bh = 0.1 + unit(rng) * static_cast<double>(h) * 0.8;
        const Tensor box(Shape{1, 4}, {x0, y0, x0 + bw, y0 + bh});
        const Tensor out = roi_align(f, box, s);
        for (std::size_t iy = 0; iy < s; ++iy)
            for (std::size_t ix = 0; ix < s; ++ix) {
                const double x = x0 + (static_cast<double>(ix) + 0.5) * bw / static_cast<double>(s);
                const double y = y0 + (static_cast<double>(iy) + 0.5) * bh / static_cast<double>(s);
                for (std::size_t ch = 0; ch < c; ++ch)
                    worst = std::max(worst, std::abs(out[(iy * s + ix) * c + ch] - hat_sample(f, ch, x, y)));
            }
    }
    const double k = 0.3141592653589793;
    const Tensor flat(Shape{5, 9, 11}, k);
    const Tensor inside(Shape{3, 4}, {0.5, 0.5, 10.5, 8.5, 1.3, 2.7, 6.1, 4.4, 3.0, 3.0, 3.2, 3.1});
    bool exact = true;
    const Tensor pooled = roi_align(flat, inside, 7);
    for (double v : pooled.data()) exact = exact && v == k;
    return {worst < kRoiTolerance && exact, fmt("max abs err %.2e over %d pairs, constant map %s", worst, kRoiPairs, exact ? "exact" : "NOT exact")};
}

// ------------------------------------------------------------------ 5

Verdict criterion_geometry() {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> pos(-5.0, 5.0), size(0.01, 4.0);
    auto random_box = [&] {
        const double x = pos(rng), y = pos(rng);
        return BoxA{x, y, x + size(rng), y + size(rng)};
    };
    int bad_self = 0, bad_sym = 0, bad_order = 0, bad_range = 0;
    for (int i = 0; i < kGeometryPairs; ++i) {
        const BoxA a = random_box(), b = random_box();
        bad_self += giou(a, a) != 1.0;
        bad_sym += giou(a, b) != giou(b, a) || iou(a, b) != iou(b, a);
        bad_order += giou(a, b) > iou(a, b);
        const double g = giou(a, b);
        bad_range += !(g > -1.0 && g <= 1.0);
    }
    const BoxA p{0, 0, 2, 2}, q{1, 1, 3, 3};
    const double ei = std::abs(iou(p, q) - 1.0 / 7.0), eg = std::abs(giou(p, q) + 5.0 / 63.0);
    return {bad_self + bad_sym + bad_order + bad_range == 0 && ei < kWorkedPairTolerance && eg < kWorkedPairTolerance,
            fmt("violations self %d sym %d order %d range %d over %d pairs; worked pair err %.1e / %.1e", bad_self, bad_sym, bad_order,
                bad_range, kGeometryPairs, ei, eg)};
}

// ------------------------------------------------------------------ 6

Verdict criterion_equivariance() {
    const RunConfig cfg = toy_config();
    SparseRCNN a(cfg.model, 21), b(cfg.model, 21);
    const std::size_t n = cfg.model.num_proposals;
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::mt19937_64 rng(8);
    std::shuffle(perm.begin(), perm.end(), rng);
    // b's proposal row i is a's row perm[i].
    for (const char* name : {"proposal.boxes", "proposal.features"}) {
        const Tensor src = a.parameters().get(name);
        Tensor dst = b.parameters().get(name);
        const std::size_t cols = src.dim(1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < cols; ++k) dst.mutable_data()[i * cols + k] = src[perm[i] * cols + k];
    }
    const SyntheticScene scene = generate_scene(cfg.val_spec(), 3);
    NoGradGuard ng;
    const auto oa = a.forward(scene.image), ob = b.forward(scene.image);
    double worst = 0.0;
    for (std::size_t t = 0; t < oa.size(); ++t)
        for (const auto& [ta, tb] : {std::pair{&oa[t].class_logits, &ob[t].class_logits}, std::pair{&oa[t].boxes, &ob[t].boxes},
                                     std::pair{&oa[t].object_features, &ob[t].object_features}}) {
            const std::size_t cols = ta->dim(1);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < cols; ++k) worst = std::max(worst, std::abs((*tb)[i * cols + k] - (*ta)[perm[i] * cols + k]));
        }
    const double fw = static_cast<double>(cfg.data.image_size);
    const double la = set_loss(oa, scene.objects, cfg.loss, fw, fw).total, lb = set_loss(ob, scene.objects, cfg.loss, fw, fw).total;
    const double dl = std::abs(la - lb);
    return {worst < kEquivarianceTolerance && dl < kEquivarianceTolerance,
            fmt("max row diff %.2e across %zu stages, loss %.6f vs %.6f (diff %.1e)", worst, oa.size(), la, lb, dl)};
}

// ------------------------------------------------------------------ 7

Verdict criterion_toy_training() {
    const TrainedRun& r = toy_run();
    const double minutes = r.seconds / 60.0;
    return {final_ap50(r) >= kToyAp50 && minutes <= kToyMinutes,
            fmt("val AP50 %.4f (AP %.4f) after %zu epochs in %.1f min", final_ap50(r), r.logs.back().val->ap, r.logs.size(), minutes)};
}

// ------------------------------------------------------------------ 8

Verdict criterion_crowd() {
    const TrainedRun& r = toy_run();
    DatasetSpec spec = r.trainer->config().val_spec();
    spec.crowd_mode = true;
    spec.seed = kCrowdValSeed;
    const auto scenes = generate_dataset(spec);
    const auto outs = predict(r.trainer->model(), scenes);
    std::vector<std::vector<std::size_t>> which;
    std::size_t objects = 0;
    for (const auto& s : scenes) {
        which.emplace_back();
        for (const auto& [i, j] : s.crowd_pairs) {
            which.back().push_back(i);
            which.back().push_back(j);
        }
        objects += which.back().size();
    }
    const double recall = object_recall(collect_detections(outs), ground_truths(scenes), which, kCrowdScoreFloor);
    return {recall >= kCrowdRecall, fmt("recall %.4f on %zu overlapping objects in %zu scenes", recall, objects, scenes.size())};
}

// ------------------------------------------------------------------ 9

Verdict criterion_ablations() {
    const TrainedRun& base = toy_run();
    RunConfig one = toy_config();
    one.model.num_stages = 1;
    const TrainedRun single = train(one, "ablation_T1", false);
    RunConfig att = toy_config();
    att.model.interaction = Interaction::multi_head_attention;
    const TrainedRun attention = train(att, "ablation_attention", false);
    const double t3 = final_ap50(base), t1 = final_ap50(single), at = final_ap50(attention);
    return {t3 > t1 && t3 >= at, fmt("AP50 T=3 %.4f vs T=1 %.4f; dynamic %.4f vs attention %.4f", t3, t1, t3, at)};
}

// ------------------------------------------------------------------ 10

std::string file_bytes(const fs::path& p) { return detail::read_file(p); }

Verdict criterion_determinism() {
    RunConfig small = toy_config();
    small.data.train_images = 48;
    small.data.val_images = 16;
    small.optim.epochs = 3;
    small.optim.lr_drop_epochs = {2};
    // Same directory for both runs: out_dir is part of the config echoed into
    // the checkpoint.
    const TrainedRun x = train(small, "determinism", true);
    const std::string first = file_bytes(x.trainer->checkpoint_path());
    const TrainedRun y = train(small, "determinism", true);
    const bool same_ckpt = first == file_bytes(y.trainer->checkpoint_path());
    const bool same_loss = x.logs.back().loss == y.logs.back().loss;

    const TrainedRun& toy = toy_run();
    const fs::path saved = run_dir("roundtrip") / "toy.ssck";
    save_checkpoint(toy.trainer->checkpoint(), saved);
    const Checkpoint loaded = load_checkpoint(saved);
    const bool same_bytes = encode_checkpoint(loaded) == file_bytes(saved);
    const auto restored = model_from_checkpoint(loaded);
    const auto& val = toy.trainer->val_set().scenes;
    const std::string before = report_json(evaluate(toy.trainer->model(), val)).dump();
    const std::string after = report_json(evaluate(*restored, val)).dump();
    return {same_ckpt && same_loss && same_bytes && before == after,
            fmt("repeat-run checkpoints %s, final loss %s, save-load-save %s, eval after reload %s", same_ckpt ? "identical" : "DIFFER",
                same_loss ? "identical" : "DIFFERS", same_bytes ? "identical" : "DIFFERS", before == after ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::map<int, std::function<Verdict()>> criteria{
        {1, criterion_matching},    {2, criterion_gradients},   {3, criterion_gradient_blocking}, {4, criterion_roi_align},
        {5, criterion_geometry},    {6, criterion_equivariance}, {7, criterion_toy_training},     {8, criterion_crowd},
        {9, criterion_ablations},   {10, criterion_determinism}};
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    if (selected.empty())
        for (const auto& [k, f] : criteria) selected.insert(k);

    int failures = 0;
    std::vector<std::string> summary;
    for (int k : selected) {
        const auto it = criteria.find(k);
        if (it == criteria.end()) {
            std::cerr << "no criterion " << k << "\n";
            return 2;
        }
        Verdict v;
        try {
            v = it->second();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        failures += !v.pass;
        summary.push_back(fmt("criterion %2d: %s  %s", k, v.pass ? "PASS" : "FAIL", v.detail.c_str()));
        std::cout << summary.back() << "\n" << std::flush;
    }
    std::cout << "\n";
    for (const auto& line : summary) std::cout << line << "\n";
    return failures == 0 ? 0 : 1;
}
