#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "miadapt/datamodel.hpp"
#include "miadapt/nn.hpp"
#include "miadapt/rng.hpp"

// Small two-stage detector: 4-layer convolutional backbone (stride 8), anchor
// based proposal stage and a region head over RoIAlign features. Class id 0 is
// background inside the detector; foreground ids match the dataset (1..C).
namespace miadapt {

inline constexpr const char* kModelVersion = "miadapt-detector/1";

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DetectorConfig {
    std::vector<std::string> classes;

    // Architecture. The stride is fixed by three 2x2 poolings.
    static constexpr int kStride = 8;
    std::vector<int> backbone_channels{8, 16, 32, 32};
    int rpn_channels = 32;
    int roi_grid = 3;
    int roi_samples = 2;
    int roi_hidden = 64;
    double pixel_mean = 127.5;
    double pixel_std = 64.0;

    // Anchors: one scale per cell, several aspect ratios (height / width).
    double anchor_size = 20.0;
    std::vector<double> anchor_ratios{0.5, 1.0, 2.0};

    // Proposal stage.
    double rpn_pos_iou = 0.7;
    double rpn_neg_iou = 0.3;
    int rpn_batch = 64;
    double rpn_pos_fraction = 0.5;
    int pre_nms_top = 1000;
    int post_nms_train = 64;
    int post_nms_test = 100;
    double rpn_nms = 0.7;
    double rpn_beta = 1.0 / 9.0;

    // Region head.
    double roi_fg_iou = 0.5;
    int roi_batch = 32;
    double roi_fg_fraction = 0.25;
    double roi_beta = 1.0;
    int max_detections = 100;

    int num_classes() const { return static_cast<int>(classes.size()); }
    int num_anchors() const { return static_cast<int>(anchor_ratios.size()); }
    int feature_dim() const { return backbone_channels.back(); }
    nn::RoiAlignSpec roi_spec() const { return {roi_grid, roi_samples, kStride}; }

    /// Throws std::invalid_argument on an unusable configuration.
    void validate() const;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
/// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, DetectorConfig& c);

using Tensors = std::map<std::string, Eigen::MatrixXd>;

struct ModelParams {
    DetectorConfig config;
    std::string version = kModelVersion;
    Tensors tensors;

    const Eigen::MatrixXd& operator[](const std::string& name) const { return tensors.at(name); }
    std::size_t parameter_count() const;
};

/// Seeded He initialisation.
ModelParams init_params(const DetectorConfig& cfg, std::uint64_t seed);

Tensors zero_like(const ModelParams& p);
bool same_schema(const ModelParams& a, const ModelParams& b);
/// FNV-1a over names and raw tensor bytes.
std::uint64_t checksum(const ModelParams& p);
/// Euclidean norm of the difference over all tensors; schemas must match.
double parameter_distance(const ModelParams& a, const ModelParams& b);

void save_checkpoint(const ModelParams& p, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

struct FeatureMap {
    Eigen::MatrixXd values;  // channels x (height*width)
    int height = 0;
    int width = 0;
    int stride = DetectorConfig::kStride;
    int image_width = 0;
    int image_height = 0;

    int channels() const { return static_cast<int>(values.rows()); }
    nn::Shape shape() const { return {height, width}; }
};

struct ProposalSet {
    std::vector<BBox> boxes;
    std::vector<double> objectness;  // descending

    std::size_t size() const { return boxes.size(); }
};

struct LossBreakdown {
    double rpn_cls = 0.0;
    double rpn_loc = 0.0;
    double roi_cls = 0.0;
    double roi_loc = 0.0;
    double total = 0.0;
};

// Box coding.
using BoxWeights = Eigen::Vector4d;
inline const BoxWeights kRpnWeights{1.0, 1.0, 1.0, 1.0};
inline const BoxWeights kRoiWeights{10.0, 10.0, 5.0, 5.0};

Eigen::Vector4d encode_box(const BBox& target, const BBox& reference, const BoxWeights& w);
BBox decode_box(const Eigen::Vector4d& delta, const BBox& reference, const BoxWeights& w);

/// Greedy suppression over boxes given in descending score order; a box is
/// dropped when its IoU with a kept box exceeds the threshold. Returns kept
/// indices.
std::vector<std::size_t> nms(const std::vector<BBox>& boxes, double iou_thresh);

// ---------------------------------------------------------------------------
// Forward / backward pieces.

struct BackboneCache {
    nn::Shape input;
    std::vector<nn::Shape> shapes;        // per conv layer
    std::vector<Eigen::MatrixXd> cols;    // im2col of each conv input
    std::vector<Eigen::MatrixXd> pre;     // pre-activations
};

Eigen::MatrixXd normalize_input(const DetectorConfig& cfg, const Image& img);

FeatureMap forward_backbone(const ModelParams& p, const Image& img, BackboneCache* cache = nullptr);
/// Accumulates parameter gradients for an upstream feature-map gradient.
void backbone_backward(const ModelParams& p, const BackboneCache& cache, const Eigen::MatrixXd& dfm,
                       Tensors& grads);

struct RpnOutput {
    Eigen::MatrixXd cols;
    Eigen::MatrixXd hidden_pre;
    Eigen::MatrixXd hidden;
    Eigen::MatrixXd objectness;  // anchors x cells (logits)
    Eigen::MatrixXd deltas;      // 4*anchors x cells
};

RpnOutput rpn_forward(const ModelParams& p, const FeatureMap& fm);
void rpn_backward(const ModelParams& p, const FeatureMap& fm, const RpnOutput& out,
                  const Eigen::MatrixXd& dobjectness, const Eigen::MatrixXd& ddeltas, Tensors& grads,
                  Eigen::MatrixXd& dfm);

/// Anchors ordered by (cell, ratio): index = cell * num_anchors + ratio.
std::vector<BBox> make_anchors(const DetectorConfig& cfg, const FeatureMap& fm);

ProposalSet proposals_from_rpn(const DetectorConfig& cfg, const FeatureMap& fm, const RpnOutput& rpn,
                               int max_proposals);
ProposalSet propose(const ModelParams& p, const FeatureMap& fm);
ProposalSet propose(const ModelParams& p, const FeatureMap& fm, int max_proposals);

struct RoiOutput {
    std::vector<BBox> boxes;
    Eigen::MatrixXd pooled;
    Eigen::MatrixXd hidden_pre;
    Eigen::MatrixXd hidden;
    Eigen::MatrixXd logits;  // (C+1) x boxes, background row 0
    Eigen::MatrixXd deltas;  // 4 x boxes, class agnostic
};

RoiOutput roi_forward(const ModelParams& p, const FeatureMap& fm, const std::vector<BBox>& boxes);
void roi_backward(const ModelParams& p, const FeatureMap& fm, const RoiOutput& out,
                  const Eigen::MatrixXd& dlogits, const Eigen::MatrixXd& ddeltas, Tensors& grads,
                  Eigen::MatrixXd& dfm);

struct RoiPrediction {
    Eigen::MatrixXd logits;  // (C+1) x n
    std::vector<BBox> refined;
};

RoiPrediction roi_predict(const ModelParams& p, const FeatureMap& fm, const std::vector<BBox>& boxes);

std::vector<Detection> detect(const ModelParams& p, const Image& img, double score_thresh,
                              double nms_thresh);

// ---------------------------------------------------------------------------
// Training loss.

/// Sampled targets for one image. Building a plan is not differentiable;
/// the loss is differentiated with the plan held fixed.
struct TrainingPlan {
    std::vector<int> rpn_anchors;
    std::vector<double> rpn_labels;  // 1 foreground, 0 background
    std::vector<Eigen::Vector4d> rpn_targets;
    std::vector<BBox> rois;
    std::vector<int> roi_labels;  // 0 background, else class id
    std::vector<Eigen::Vector4d> roi_targets;
};

TrainingPlan plan_training_sample(const DetectorConfig& cfg, const FeatureMap& fm, const RpnOutput& rpn,
                                  const std::vector<Annotation>& gt, Rng& rng);

struct DetLossGrads {
    Eigen::MatrixXd dobjectness;
    Eigen::MatrixXd drpn_deltas;
    Eigen::MatrixXd droi_logits;
    Eigen::MatrixXd droi_deltas;
};

/// Loss components from network outputs and a plan; fills output gradients
/// (scaled by `scale`) when requested.
LossBreakdown detection_loss_terms(const DetectorConfig& cfg, const RpnOutput& rpn, const RoiOutput& roi,
                                   const TrainingPlan& plan, double scale = 1.0,
                                   DetLossGrads* grads = nullptr);

/// L_det for a fixed plan with full parameter gradients.
LossBreakdown detection_loss_with_plan(const ModelParams& p, const Image& img, const TrainingPlan& plan,
                                       Tensors* grads = nullptr);

/// Builds the plan from `rng` then evaluates the loss (and gradients).
LossBreakdown detection_loss(const ModelParams& p, const Image& img, const std::vector<Annotation>& gt,
                             Rng& rng, Tensors* grads = nullptr, TrainingPlan* plan_out = nullptr);

/// Deterministic convenience form seeded from the image id.
LossBreakdown detection_loss(const ModelParams& p, const Image& img, const std::vector<Annotation>& gt);

}  // namespace miadapt
