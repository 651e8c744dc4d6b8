#include "miadapt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace miadapt::eval {

std::vector<ScoredFlag> match_detections(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                                         double iou_thresh) {
    std::vector<double> best_iou(dets.size(), 0.0);
    for (std::size_t i = 0; i < dets.size(); ++i)
        for (const auto& g : gts) best_iou[i] = std::max(best_iou[i], iou(dets[i].box, g.box));

    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].confidence != dets[b].confidence) return dets[a].confidence > dets[b].confidence;
        return best_iou[a] > best_iou[b];
    });

    std::vector<bool> taken(gts.size(), false);
    std::vector<ScoredFlag> out;
    out.reserve(dets.size());
    for (std::size_t i : order) {
        double best = -1.0;
        std::size_t best_g = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g]) continue;
            const double v = iou(dets[i].box, gts[g].box);
            if (v > best) {
                best = v;
                best_g = g;
            }
        }
        const bool tp = best_g < gts.size() && best >= iou_thresh;
        if (tp) taken[best_g] = true;
        out.push_back({i, dets[i].confidence, tp});
    }
    return out;
}

double average_precision(const std::vector<bool>& flags, std::size_t n_gt) {
    if (n_gt == 0 || flags.empty()) return 0.0;
    const std::size_t n = flags.size();
    std::vector<double> recall(n), precision(n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        tp += flags[i] ? 1 : 0;
        recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    for (std::size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

EvalReport evaluate_detections(const Dataset& d, const std::vector<std::vector<Detection>>& detections,
                               double iou_thresh) {
    if (d.empty()) throw std::invalid_argument("evaluate: empty dataset");
    if (detections.size() != d.images.size())
        throw std::invalid_argument("evaluate: one detection list per image required");
    EvalReport report;
    report.n_images = d.images.size();
    const int num_classes = d.num_classes();
    for (int c = 1; c <= num_classes; ++c) {
        std::vector<ScoredFlag> pooled;
        std::size_t n_gt = 0;
        for (std::size_t i = 0; i < d.images.size(); ++i) {
            std::vector<Detection> dets;
            std::vector<Annotation> gts;
            for (const auto& det : detections[i])
                if (det.class_id == c) dets.push_back(det);
            for (const auto& a : d.images[i].annotations)
                if (a.class_id == c) gts.push_back(a);
            n_gt += gts.size();
            for (const auto& f : match_detections(dets, gts, iou_thresh)) pooled.push_back(f);
        }
        // Stable: equal confidences keep image order, then per-image order.
        std::stable_sort(pooled.begin(), pooled.end(),
                         [](const ScoredFlag& a, const ScoredFlag& b) { return a.confidence > b.confidence; });
        std::vector<bool> flags;
        flags.reserve(pooled.size());
        for (const auto& f : pooled) flags.push_back(f.true_positive);
        report.n_gt[c] = n_gt;
        report.per_class_ap[c] = average_precision(flags, n_gt);
    }
    double sum = 0.0;
    int counted = 0;
    for (const auto& [c, ap] : report.per_class_ap) {
        if (report.n_gt[c] == 0) continue;
        sum += ap;
        ++counted;
    }
    report.map50 = counted > 0 ? sum / counted : 0.0;
    return report;
}

EvalReport evaluate(const DetectorFn& detector, const Dataset& d, double iou_thresh) {
    if (d.empty()) throw std::invalid_argument("evaluate: empty dataset");
    std::vector<std::vector<Detection>> all;
    all.reserve(d.images.size());
    for (const auto& li : d.images) all.push_back(detector(li.image));
    return evaluate_detections(d, all, iou_thresh);
}

EvalReport evaluate(const ModelParams& params, const Dataset& d, double score_thresh, double iou_thresh,
                    double nms_thresh) {
    return evaluate([&](const Image& img) { return detect(params, img, score_thresh, nms_thresh); }, d,
                    iou_thresh);
}

SeedAggregate aggregate_seeds(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("aggregate_seeds: no reports");
    SeedAggregate agg;
    for (const auto& r : reports) agg.runs.push_back(r.map50);
    const double n = static_cast<double>(agg.runs.size());
    agg.mean = std::accumulate(agg.runs.begin(), agg.runs.end(), 0.0) / n;
    double var = 0.0;
    for (double v : agg.runs) var += (v - agg.mean) * (v - agg.mean);
    agg.std = std::sqrt(var / n);
    return agg;
}

nlohmann::json report_json(const EvalReport& r, const std::vector<std::string>& classes) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& [c, ap] : r.per_class_ap) {
        const auto name = c >= 1 && c <= static_cast<int>(classes.size()) ? classes[static_cast<std::size_t>(c - 1)]
                                                                           : std::to_string(c);
        per_class.push_back({{"class_id", c}, {"name", name}, {"ap50", ap}, {"n_gt", r.n_gt.at(c)}});
    }
    return {{"map50", r.map50}, {"n_images", r.n_images}, {"per_class", per_class}};
}

std::string report_table(const EvalReport& r, const std::vector<std::string>& classes) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-4s %-16s %8s %8s\n", "id", "class", "n_gt", "AP50");
    os << line;
    for (const auto& [c, ap] : r.per_class_ap) {
        const auto name = c >= 1 && c <= static_cast<int>(classes.size()) ? classes[static_cast<std::size_t>(c - 1)]
                                                                           : std::to_string(c);
        std::snprintf(line, sizeof(line), "%-4d %-16s %8zu %8.2f\n", c, name.c_str(), r.n_gt.at(c), 100.0 * ap);
        os << line;
    }
    std::snprintf(line, sizeof(line), "mAP@0.5 %.2f over %zu images\n", 100.0 * r.map50, r.n_images);
    os << line;
    return os.str();
}

}  // namespace miadapt::eval
