#pragma once

// COCO-style average precision over the raw proposal outputs: every
// proposal becomes one detection scored by its best class probability.

#include <sparse_rcnn/losses.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace sparse_rcnn {

struct Detection {
    std::size_t image_id = 0;
    int label = 0;
    double score = 0.0;
    BoxN box;
};

// One detection per proposal row: label = argmax of the class logits, score
// = sigmoid of that logit. Rows scoring below score_floor are dropped.
inline std::vector<Detection> detections_from_output(const StageOutput& out, std::size_t image_id,
                                                     double score_floor = 0.0) {
    const std::size_t n = out.class_logits.dim(0), k = out.class_logits.dim(1);
    std::vector<Detection> dets;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (out.class_logits.at(i, c) > out.class_logits.at(i, best)) best = c;
        const double score = stable_sigmoid(out.class_logits.at(i, best));
        if (score < score_floor) continue;
        dets.push_back({image_id, static_cast<int>(best), score, box_row(out.boxes, i)});
    }
    return dets;
}

// Stable sort by descending score; equal scores keep input order.
inline void sort_by_score(std::vector<Detection>& dets) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
}

// Greedy matching of one image's detections (already sorted by score):
// each detection takes the highest-IoU unmatched GT of its class with
// IoU >= iou_thresh. Returns the GT index per detection, or gt.size() when
// it matched nothing.
inline std::vector<std::size_t> greedy_match(const std::vector<Detection>& dets, const GroundTruth& gt, double iou_thresh) {
    std::vector<bool> taken(gt.size(), false);
    std::vector<std::size_t> owner(dets.size(), gt.size());
    for (std::size_t d = 0; d < dets.size(); ++d) {
        const BoxA db = to_absolute(dets[d].box, 1.0, 1.0);
        double best = -1.0;
        for (std::size_t g = 0; g < gt.size(); ++g) {
            if (taken[g] || gt.labels[g] != dets[d].label) continue;
            const double v = iou(db, to_absolute(gt.boxes[g], 1.0, 1.0));
            if (v >= iou_thresh && v > best) {
                best = v;
                owner[d] = g;
            }
        }
        if (owner[d] < gt.size()) taken[owner[d]] = true;
    }
    return owner;
}

// TP flag per detection under greedy_match.
inline std::vector<bool> match_for_eval(const std::vector<Detection>& dets, const GroundTruth& gt, double iou_thresh) {
    const auto owner = greedy_match(dets, gt, iou_thresh);
    std::vector<bool> tp(dets.size());
    for (std::size_t d = 0; d < dets.size(); ++d) tp[d] = owner[d] < gt.size();
    return tp;
}

struct ScoredFlag {
    double score;
    bool tp;
};

// 101-point interpolated AP. nullopt when there is nothing to score (no GT
// and no detections); 0 when detections exist without GT.
inline std::optional<double> average_precision(std::vector<ScoredFlag> flags, std::size_t num_gt) {
    if (num_gt == 0) return flags.empty() ? std::nullopt : std::optional<double>(0.0);
    std::stable_sort(flags.begin(), flags.end(), [](const ScoredFlag& a, const ScoredFlag& b) { return a.score > b.score; });
    const std::size_t n = flags.size();
    std::vector<double> recall(n), precision(n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (flags[i].tp) ++tp;
        recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0.0;
    for (int r = 0; r <= 100; ++r) {
        const double level = static_cast<double>(r) / 100.0;
        const auto it = std::lower_bound(recall.begin(), recall.end(), level);
        if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return sum / 101.0;
}

inline std::vector<double> coco_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(static_cast<double>(50 + 5 * i) / 100.0);
    return t;
}

struct ClassAp {
    int label = 0;
    std::size_t num_gt = 0;
    std::optional<double> ap, ap50, ap75;
};

struct MapReport {
    double ap = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    std::vector<double> per_threshold;  // class-mean AP at each COCO threshold
    std::vector<ClassAp> per_class;
    std::size_t num_images = 0;
    std::size_t num_detections = 0;
    std::size_t num_gt = 0;
};

// dets[image] holds that image's detections in any order.
inline MapReport map_report(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                            std::size_t num_classes) {
    if (dets.size() != gts.size()) throw ContractError("map_report: detection and ground-truth image counts differ");
    MapReport rep;
    rep.num_images = gts.size();
    std::vector<std::vector<Detection>> sorted = dets;
    for (auto& d : sorted) {
        sort_by_score(d);
        rep.num_detections += d.size();
    }
    std::vector<std::size_t> gt_count(num_classes, 0);
    for (const auto& g : gts)
        for (int l : g.labels) {
            if (l < 0 || static_cast<std::size_t>(l) >= num_classes) throw ContractError("map_report: GT label out of range");
            ++gt_count[static_cast<std::size_t>(l)];
            ++rep.num_gt;
        }

    const auto thresholds = coco_iou_thresholds();
    // ap_table[t][k]
    std::vector<std::vector<std::optional<double>>> table(thresholds.size(),
                                                          std::vector<std::optional<double>>(num_classes));
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        std::vector<std::vector<ScoredFlag>> per_class(num_classes);
        for (std::size_t img = 0; img < sorted.size(); ++img) {
            const auto tp = match_for_eval(sorted[img], gts[img], thresholds[t]);
            for (std::size_t d = 0; d < sorted[img].size(); ++d) {
                const auto l = static_cast<std::size_t>(sorted[img][d].label);
                if (l < num_classes) per_class[l].push_back({sorted[img][d].score, tp[d]});
            }
        }
        double sum = 0.0;
        std::size_t defined = 0;
        for (std::size_t k = 0; k < num_classes; ++k) {
            table[t][k] = average_precision(per_class[k], gt_count[k]);
            if (table[t][k]) {
                sum += *table[t][k];
                ++defined;
            }
        }
        rep.per_threshold.push_back(defined ? sum / static_cast<double>(defined) : 0.0);
    }
    rep.ap = std::accumulate(rep.per_threshold.begin(), rep.per_threshold.end(), 0.0) /
             static_cast<double>(rep.per_threshold.size());
    rep.ap50 = rep.per_threshold[0];
    rep.ap75 = rep.per_threshold[5];
    for (std::size_t k = 0; k < num_classes; ++k) {
        ClassAp c;
        c.label = static_cast<int>(k);
        c.num_gt = gt_count[k];
        double sum = 0.0;
        bool any = false;
        for (std::size_t t = 0; t < thresholds.size(); ++t)
            if (table[t][k]) {
                sum += *table[t][k];
                any = true;
            }
        if (any) c.ap = sum / static_cast<double>(thresholds.size());
        c.ap50 = table[0][k];
        c.ap75 = table[5][k];
        rep.per_class.push_back(c);
    }
    return rep;
}

inline std::string format_report(const MapReport& r) {
    char buf[160];
    std::string out;
    std::snprintf(buf, sizeof buf, "images %zu  gt %zu  detections %zu\n", r.num_images, r.num_gt, r.num_detections);
    out += buf;
    std::snprintf(buf, sizeof buf, "%-8s %8s %8s %8s %6s\n", "class", "AP", "AP50", "AP75", "gt");
    out += buf;
    auto cell = [](const std::optional<double>& v) {
        char b[16];
        if (v)
            std::snprintf(b, sizeof b, "%8.4f", *v);
        else
            std::snprintf(b, sizeof b, "%8s", "-");
        return std::string(b);
    };
    for (const auto& c : r.per_class) {
        std::snprintf(buf, sizeof buf, "%-8d %s %s %s %6zu\n", c.label, cell(c.ap).c_str(), cell(c.ap50).c_str(),
                      cell(c.ap75).c_str(), c.num_gt);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "%-8s %8.4f %8.4f %8.4f %6zu\n", "all", r.ap, r.ap50, r.ap75, r.num_gt);
    out += buf;
    return out;
}

inline nlohmann::json report_json(const MapReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json j = {{"AP", r.ap},
                        {"AP50", r.ap50},
                        {"AP75", r.ap75},
                        {"per_threshold", r.per_threshold},
                        {"num_images", r.num_images},
                        {"num_gt", r.num_gt},
                        {"num_detections", r.num_detections}};
    j["per_class"] = nlohmann::json::array();
    for (const auto& c : r.per_class)
        j["per_class"].push_back(
            {{"label", c.label}, {"num_gt", c.num_gt}, {"AP", opt(c.ap)}, {"AP50", opt(c.ap50)}, {"AP75", opt(c.ap75)}});
    return j;
}

// Fraction of the listed GT objects (which[image] = object indices) that
// greedy_match assigns a detection with score >= score_floor.
inline double object_recall(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                            const std::vector<std::vector<std::size_t>>& which, double score_floor, double iou_thresh = 0.5) {
    if (dets.size() != gts.size() || which.size() != gts.size()) throw ContractError("object_recall: image counts differ");
    std::size_t hit = 0, total = 0;
    for (std::size_t img = 0; img < gts.size(); ++img) {
        std::vector<Detection> kept;
        for (const auto& d : dets[img])
            if (d.score >= score_floor) kept.push_back(d);
        sort_by_score(kept);
        std::vector<bool> covered(gts[img].size(), false);
        for (std::size_t g : greedy_match(kept, gts[img], iou_thresh))
            if (g < gts[img].size()) covered[g] = true;
        for (std::size_t g : which[img]) {
            ++total;
            if (covered.at(g)) ++hit;
        }
    }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace sparse_rcnn
