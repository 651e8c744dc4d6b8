#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "miadapt/datamodel.hpp"
#include "miadapt/detector.hpp"

// PASCAL-style detection metrics: per-class AP at one IoU threshold, mAP and
// aggregation over seeds.
namespace miadapt::eval {

struct EvalReport {
    std::map<int, double> per_class_ap;
    double map50 = 0.0;
    std::size_t n_images = 0;
    std::map<int, std::size_t> n_gt;
};

struct SeedAggregate {
    double mean = 0.0;
    double std = 0.0;  // population standard deviation
    std::vector<double> runs;
};

/// One matched detection in processing order.
struct ScoredFlag {
    std::size_t index = 0;  // position in the input list
    double confidence = 0.0;
    bool true_positive = false;
};

/// Greedy one-to-one matching for detections of a single image and class.
/// Detections are visited by descending confidence (ties: larger best IoU,
/// then input order); each takes the highest-IoU unmatched ground truth with
/// IoU >= iou_thresh.
std::vector<ScoredFlag> match_detections(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                                         double iou_thresh);

/// All-point interpolated AP over flags already sorted by confidence.
double average_precision(const std::vector<bool>& flags, std::size_t n_gt);

using DetectorFn = std::function<std::vector<Detection>(const Image&)>;

EvalReport evaluate(const DetectorFn& detector, const Dataset& d, double iou_thresh = 0.5);
EvalReport evaluate(const ModelParams& params, const Dataset& d, double score_thresh, double iou_thresh = 0.5,
                    double nms_thresh = 0.5);

/// Evaluation from precomputed detections, one list per dataset image.
EvalReport evaluate_detections(const Dataset& d, const std::vector<std::vector<Detection>>& detections,
                               double iou_thresh = 0.5);

SeedAggregate aggregate_seeds(const std::vector<EvalReport>& reports);

nlohmann::json report_json(const EvalReport& r, const std::vector<std::string>& classes);
std::string report_table(const EvalReport& r, const std::vector<std::string>& classes);

}  // namespace miadapt::eval
