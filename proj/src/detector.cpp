#include "miadapt/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace miadapt {

using Eigen::MatrixXd;
using Eigen::Vector4d;

namespace {

std::string conv_name(int layer) { return "backbone.conv" + std::to_string(layer + 1); }

const double kMaxLogScale = std::log(1000.0 / 16.0);

}  // namespace

// ---------------------------------------------------------------------------
// Config and parameters.

void DetectorConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("detector config: " + m); };
    if (classes.empty()) fail("at least one class required");
    if (backbone_channels.size() != 4) fail("backbone needs exactly 4 conv layers");
    for (int c : backbone_channels)
        if (c < 1) fail("channel counts must be >= 1");
    if (rpn_channels < 1 || roi_hidden < 1 || roi_grid < 1 || roi_samples < 1) fail("head sizes must be >= 1");
    if (anchor_size <= 0.0) fail("anchor_size must be positive");
    if (anchor_ratios.empty()) fail("anchor_ratios must be non-empty");
    for (double r : anchor_ratios)
        if (r <= 0.0) fail("anchor ratios must be positive");
    for (double t : {rpn_pos_iou, rpn_neg_iou, roi_fg_iou, rpn_nms})
        if (t < 0.0 || t > 1.0) fail("IoU thresholds must lie in [0,1]");
    if (rpn_neg_iou > rpn_pos_iou) fail("rpn_neg_iou must not exceed rpn_pos_iou");
    if (rpn_batch < 1 || roi_batch < 1 || pre_nms_top < 1 || post_nms_train < 1 || post_nms_test < 1)
        fail("batch and top-k sizes must be >= 1");
    if (pixel_std <= 0.0) fail("pixel_std must be positive");
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
    j = {{"classes", c.classes},
         {"stride", DetectorConfig::kStride},
         {"backbone_channels", c.backbone_channels},
         {"rpn_channels", c.rpn_channels},
         {"roi_grid", c.roi_grid},
         {"roi_samples", c.roi_samples},
         {"roi_hidden", c.roi_hidden},
         {"pixel_mean", c.pixel_mean},
         {"pixel_std", c.pixel_std},
         {"anchor_size", c.anchor_size},
         {"anchor_ratios", c.anchor_ratios},
         {"rpn_pos_iou", c.rpn_pos_iou},
         {"rpn_neg_iou", c.rpn_neg_iou},
         {"rpn_batch", c.rpn_batch},
         {"rpn_pos_fraction", c.rpn_pos_fraction},
         {"pre_nms_top", c.pre_nms_top},
         {"post_nms_train", c.post_nms_train},
         {"post_nms_test", c.post_nms_test},
         {"rpn_nms", c.rpn_nms},
         {"rpn_beta", c.rpn_beta},
         {"roi_fg_iou", c.roi_fg_iou},
         {"roi_batch", c.roi_batch},
         {"roi_fg_fraction", c.roi_fg_fraction},
         {"roi_beta", c.roi_beta},
         {"max_detections", c.max_detections}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("classes", c.classes);
    get("backbone_channels", c.backbone_channels);
    get("rpn_channels", c.rpn_channels);
    get("roi_grid", c.roi_grid);
    get("roi_samples", c.roi_samples);
    get("roi_hidden", c.roi_hidden);
    get("pixel_mean", c.pixel_mean);
    get("pixel_std", c.pixel_std);
    get("anchor_size", c.anchor_size);
    get("anchor_ratios", c.anchor_ratios);
    get("rpn_pos_iou", c.rpn_pos_iou);
    get("rpn_neg_iou", c.rpn_neg_iou);
    get("rpn_batch", c.rpn_batch);
    get("rpn_pos_fraction", c.rpn_pos_fraction);
    get("pre_nms_top", c.pre_nms_top);
    get("post_nms_train", c.post_nms_train);
    get("post_nms_test", c.post_nms_test);
    get("rpn_nms", c.rpn_nms);
    get("rpn_beta", c.rpn_beta);
    get("roi_fg_iou", c.roi_fg_iou);
    get("roi_batch", c.roi_batch);
    get("roi_fg_fraction", c.roi_fg_fraction);
    get("roi_beta", c.roi_beta);
    get("max_detections", c.max_detections);
    if (j.contains("stride") && j.at("stride").get<int>() != DetectorConfig::kStride)
        throw std::invalid_argument("detector config: only stride 8 is supported");
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors) n += static_cast<std::size_t>(t.size());
    return n;
}

ModelParams init_params(const DetectorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    Rng rng(derive_seed(seed, "init"));
    auto gaussian = [&](const std::string& name, int rows, int cols, double stddev) {
        MatrixXd w(rows, cols);
        for (Eigen::Index j = 0; j < w.cols(); ++j)
            for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = stddev * rng.normal();
        p.tensors[name + ".weight"] = w;
        p.tensors[name + ".bias"] = MatrixXd::Zero(rows, 1);
    };
    int in = 3;
    for (int l = 0; l < 4; ++l) {
        const int out = cfg.backbone_channels[static_cast<std::size_t>(l)];
        gaussian(conv_name(l), out, in * 9, std::sqrt(2.0 / (in * 9)));
        in = out;
    }
    const int d = cfg.feature_dim();
    const int a = cfg.num_anchors();
    gaussian("rpn.conv", cfg.rpn_channels, d * 9, std::sqrt(2.0 / (d * 9)));
    gaussian("rpn.cls", a, cfg.rpn_channels, 0.01);
    gaussian("rpn.reg", 4 * a, cfg.rpn_channels, 0.01);
    const int pooled = d * cfg.roi_grid * cfg.roi_grid;
    gaussian("roi.fc", cfg.roi_hidden, pooled, std::sqrt(2.0 / pooled));
    gaussian("roi.cls", cfg.num_classes() + 1, cfg.roi_hidden, 0.01);
    gaussian("roi.reg", 4, cfg.roi_hidden, 0.001);
    return p;
}

Tensors zero_like(const ModelParams& p) {
    Tensors g;
    for (const auto& [name, t] : p.tensors) g[name] = MatrixXd::Zero(t.rows(), t.cols());
    return g;
}

bool same_schema(const ModelParams& a, const ModelParams& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (auto ia = a.tensors.begin(), ib = b.tensors.begin(); ia != a.tensors.end(); ++ia, ++ib) {
        if (ia->first != ib->first || ia->second.rows() != ib->second.rows() ||
            ia->second.cols() != ib->second.cols())
            return false;
    }
    return true;
}

std::uint64_t checksum(const ModelParams& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : p.tensors) {
        mix(name.data(), name.size());
        mix(t.data(), static_cast<std::size_t>(t.size()) * sizeof(double));
    }
    return h;
}

double parameter_distance(const ModelParams& a, const ModelParams& b) {
    if (!same_schema(a, b)) throw std::invalid_argument("parameter_distance: schema mismatch");
    double sq = 0.0;
    for (const auto& [name, t] : a.tensors) sq += (t - b.tensors.at(name)).squaredNorm();
    return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// Boxes.

Vector4d encode_box(const BBox& target, const BBox& reference, const BoxWeights& w) {
    return {w[0] * (target.center_x() - reference.center_x()) / reference.width(),
            w[1] * (target.center_y() - reference.center_y()) / reference.height(),
            w[2] * std::log(target.width() / reference.width()),
            w[3] * std::log(target.height() / reference.height())};
}

BBox decode_box(const Vector4d& delta, const BBox& reference, const BoxWeights& w) {
    const double cx = reference.center_x() + delta[0] / w[0] * reference.width();
    const double cy = reference.center_y() + delta[1] / w[1] * reference.height();
    const double bw = reference.width() * std::exp(std::min(delta[2] / w[2], kMaxLogScale));
    const double bh = reference.height() * std::exp(std::min(delta[3] / w[3], kMaxLogScale));
    return {cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh};
}

std::vector<std::size_t> nms(const std::vector<BBox>& boxes, double iou_thresh) {
    std::vector<std::size_t> keep;
    std::vector<bool> suppressed(boxes.size(), false);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        if (suppressed[i]) continue;
        keep.push_back(i);
        for (std::size_t j = i + 1; j < boxes.size(); ++j)
            if (!suppressed[j] && iou(boxes[i], boxes[j]) > iou_thresh) suppressed[j] = true;
    }
    return keep;
}

// ---------------------------------------------------------------------------
// Backbone.

MatrixXd normalize_input(const DetectorConfig& cfg, const Image& img) {
    MatrixXd x(3, static_cast<Eigen::Index>(img.width) * img.height);
    const double inv = 1.0 / cfg.pixel_std;
    for (int y = 0; y < img.height; ++y)
        for (int xx = 0; xx < img.width; ++xx)
            for (int c = 0; c < 3; ++c)
                x(c, y * img.width + xx) = (img.at(xx, y, c) - cfg.pixel_mean) * inv;
    return x;
}

FeatureMap forward_backbone(const ModelParams& p, const Image& img, BackboneCache* cache) {
    constexpr int s = DetectorConfig::kStride;
    if (img.width < s || img.height < s)
        throw std::invalid_argument("forward_backbone: image '" + img.id + "' smaller than stride");
    nn::Shape shape{img.height, img.width};
    MatrixXd x = normalize_input(p.config, img);
    if (cache) {
        cache->input = shape;
        cache->shapes.clear();
        cache->cols.clear();
        cache->pre.clear();
    }
    for (int l = 0; l < 4; ++l) {
        const auto name = conv_name(l);
        MatrixXd cols = nn::im2col3x3<double>(x, shape);
        MatrixXd pre = nn::affine<double>(p[name + ".weight"], p[name + ".bias"], cols);
        MatrixXd act = nn::relu<double>(pre);
        if (cache) {
            cache->shapes.push_back(shape);
            cache->cols.push_back(std::move(cols));
            cache->pre.push_back(std::move(pre));
        }
        if (l < 3) {
            x = nn::avgpool2<double>(act, shape);
            shape = {nn::ceil_div(shape.height, 2), nn::ceil_div(shape.width, 2)};
        } else {
            x = std::move(act);
        }
    }
    FeatureMap fm;
    fm.values = std::move(x);
    fm.height = shape.height;
    fm.width = shape.width;
    fm.image_width = img.width;
    fm.image_height = img.height;
    return fm;
}

void backbone_backward(const ModelParams& p, const BackboneCache& cache, const MatrixXd& dfm,
                       Tensors& grads) {
    MatrixXd d = dfm;
    for (int l = 3; l >= 0; --l) {
        const auto& shape = cache.shapes[static_cast<std::size_t>(l)];
        if (l < 3) d = nn::avgpool2_backward<double>(d, shape);
        const MatrixXd dz = nn::relu_backward<double>(cache.pre[static_cast<std::size_t>(l)], d);
        const auto name = conv_name(l);
        const MatrixXd& w = p[name + ".weight"];
        grads[name + ".weight"].noalias() += dz * cache.cols[static_cast<std::size_t>(l)].transpose();
        grads[name + ".bias"].col(0) += dz.rowwise().sum();
        if (l > 0) {
            const MatrixXd dcols = w.transpose() * dz;
            d = nn::col2im3x3<double>(dcols, w.cols() / 9, shape);
        }
    }
}

// ---------------------------------------------------------------------------
// Proposal stage.

RpnOutput rpn_forward(const ModelParams& p, const FeatureMap& fm) {
    RpnOutput out;
    out.cols = nn::im2col3x3<double>(fm.values, fm.shape());
    out.hidden_pre = nn::affine<double>(p["rpn.conv.weight"], p["rpn.conv.bias"], out.cols);
    out.hidden = nn::relu<double>(out.hidden_pre);
    out.objectness = nn::affine<double>(p["rpn.cls.weight"], p["rpn.cls.bias"], out.hidden);
    out.deltas = nn::affine<double>(p["rpn.reg.weight"], p["rpn.reg.bias"], out.hidden);
    return out;
}

void rpn_backward(const ModelParams& p, const FeatureMap& fm, const RpnOutput& out,
                  const MatrixXd& dobjectness, const MatrixXd& ddeltas, Tensors& grads, MatrixXd& dfm) {
    MatrixXd dhidden;
    nn::affine_backward<double>(p["rpn.cls.weight"], out.hidden, dobjectness, grads["rpn.cls.weight"],
                                grads["rpn.cls.bias"], &dhidden);
    MatrixXd dhidden_reg;
    nn::affine_backward<double>(p["rpn.reg.weight"], out.hidden, ddeltas, grads["rpn.reg.weight"],
                                grads["rpn.reg.bias"], &dhidden_reg);
    dhidden += dhidden_reg;
    const MatrixXd dz = nn::relu_backward<double>(out.hidden_pre, dhidden);
    MatrixXd dcols;
    nn::affine_backward<double>(p["rpn.conv.weight"], out.cols, dz, grads["rpn.conv.weight"],
                                grads["rpn.conv.bias"], &dcols);
    dfm += nn::col2im3x3<double>(dcols, fm.values.rows(), fm.shape());
}

std::vector<BBox> make_anchors(const DetectorConfig& cfg, const FeatureMap& fm) {
    std::vector<BBox> anchors;
    anchors.reserve(static_cast<std::size_t>(fm.height * fm.width * cfg.num_anchors()));
    for (int y = 0; y < fm.height; ++y)
        for (int x = 0; x < fm.width; ++x) {
            const double cx = (x + 0.5) * fm.stride;
            const double cy = (y + 0.5) * fm.stride;
            for (double r : cfg.anchor_ratios) {
                const double w = cfg.anchor_size / std::sqrt(r);
                const double h = cfg.anchor_size * std::sqrt(r);
                anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
            }
        }
    return anchors;
}

ProposalSet proposals_from_rpn(const DetectorConfig& cfg, const FeatureMap& fm, const RpnOutput& rpn,
                               int max_proposals) {
    const auto anchors = make_anchors(cfg, fm);
    const int a = cfg.num_anchors();
    struct Candidate {
        BBox box;
        double score;
        std::size_t index;
    };
    std::vector<Candidate> cands;
    cands.reserve(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const auto cell = static_cast<Eigen::Index>(i / a);
        const auto k = static_cast<Eigen::Index>(i % a);
        const Vector4d delta = rpn.deltas.block(4 * k, cell, 4, 1);
        const BBox b = clip_box(decode_box(delta, anchors[i], kRpnWeights), fm.image_width, fm.image_height);
        if (b.width() < 1.0 || b.height() < 1.0) continue;
        cands.push_back({b, nn::sigmoid(rpn.objectness(k, cell)), i});
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& l, const Candidate& r) { return l.score > r.score; });
    if (cands.size() > static_cast<std::size_t>(cfg.pre_nms_top)) cands.resize(static_cast<std::size_t>(cfg.pre_nms_top));

    std::vector<BBox> boxes;
    boxes.reserve(cands.size());
    for (const auto& c : cands) boxes.push_back(c.box);
    ProposalSet out;
    for (std::size_t i : nms(boxes, cfg.rpn_nms)) {
        if (out.size() >= static_cast<std::size_t>(max_proposals)) break;
        out.boxes.push_back(cands[i].box);
        out.objectness.push_back(cands[i].score);
    }
    return out;
}

ProposalSet propose(const ModelParams& p, const FeatureMap& fm) {
    return propose(p, fm, p.config.post_nms_test);
}

ProposalSet propose(const ModelParams& p, const FeatureMap& fm, int max_proposals) {
    return proposals_from_rpn(p.config, fm, rpn_forward(p, fm), max_proposals);
}

// ---------------------------------------------------------------------------
// Region head.

RoiOutput roi_forward(const ModelParams& p, const FeatureMap& fm, const std::vector<BBox>& boxes) {
    RoiOutput out;
    out.boxes = boxes;
    out.pooled = nn::roi_align<double>(fm.values, fm.shape(), boxes, p.config.roi_spec());
    out.hidden_pre = nn::affine<double>(p["roi.fc.weight"], p["roi.fc.bias"], out.pooled);
    out.hidden = nn::relu<double>(out.hidden_pre);
    out.logits = nn::affine<double>(p["roi.cls.weight"], p["roi.cls.bias"], out.hidden);
    out.deltas = nn::affine<double>(p["roi.reg.weight"], p["roi.reg.bias"], out.hidden);
    return out;
}

void roi_backward(const ModelParams& p, const FeatureMap& fm, const RoiOutput& out, const MatrixXd& dlogits,
                  const MatrixXd& ddeltas, Tensors& grads, MatrixXd& dfm) {
    if (out.boxes.empty()) return;
    MatrixXd dhidden;
    nn::affine_backward<double>(p["roi.cls.weight"], out.hidden, dlogits, grads["roi.cls.weight"],
                                grads["roi.cls.bias"], &dhidden);
    MatrixXd dhidden_reg;
    nn::affine_backward<double>(p["roi.reg.weight"], out.hidden, ddeltas, grads["roi.reg.weight"],
                                grads["roi.reg.bias"], &dhidden_reg);
    dhidden += dhidden_reg;
    const MatrixXd dz = nn::relu_backward<double>(out.hidden_pre, dhidden);
    MatrixXd dpooled;
    nn::affine_backward<double>(p["roi.fc.weight"], out.pooled, dz, grads["roi.fc.weight"],
                                grads["roi.fc.bias"], &dpooled);
    nn::roi_align_backward<double>(dpooled, fm.shape(), out.boxes, p.config.roi_spec(), dfm);
}

RoiPrediction roi_predict(const ModelParams& p, const FeatureMap& fm, const std::vector<BBox>& boxes) {
    RoiPrediction pred;
    if (boxes.empty()) {
        pred.logits = MatrixXd(p.config.num_classes() + 1, 0);
        return pred;
    }
    auto out = roi_forward(p, fm, boxes);
    pred.logits = std::move(out.logits);
    pred.refined.reserve(boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const Vector4d d = out.deltas.col(static_cast<Eigen::Index>(i));
        pred.refined.push_back(clip_box(decode_box(d, boxes[i], kRoiWeights), fm.image_width, fm.image_height));
    }
    return pred;
}

std::vector<Detection> detect(const ModelParams& p, const Image& img, double score_thresh, double nms_thresh) {
    const auto fm = forward_backbone(p, img);
    const auto proposals = propose(p, fm);
    const auto pred = roi_predict(p, fm, proposals.boxes);
    std::vector<Detection> all;
    if (proposals.size() == 0) return all;
    const MatrixXd prob = nn::softmax_cols<double>(pred.logits);
    for (int c = 1; c <= p.config.num_classes(); ++c) {
        std::vector<Detection> cands;
        for (std::size_t i = 0; i < proposals.size(); ++i) {
            const double conf = prob(c, static_cast<Eigen::Index>(i));
            const BBox& b = pred.refined[i];
            if (conf > score_thresh && b.valid()) cands.push_back({b, c, std::min(conf, 1.0)});
        }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Detection& l, const Detection& r) { return l.confidence > r.confidence; });
        std::vector<BBox> boxes;
        for (const auto& d : cands) boxes.push_back(d.box);
        for (std::size_t i : nms(boxes, nms_thresh)) all.push_back(cands[i]);
    }
    std::stable_sort(all.begin(), all.end(),
                     [](const Detection& l, const Detection& r) { return l.confidence > r.confidence; });
    if (all.size() > static_cast<std::size_t>(p.config.max_detections))
        all.resize(static_cast<std::size_t>(p.config.max_detections));
    return all;
}

// ---------------------------------------------------------------------------
// Training loss.

TrainingPlan plan_training_sample(const DetectorConfig& cfg, const FeatureMap& fm, const RpnOutput& rpn,
                                  const std::vector<Annotation>& gt, Rng& rng) {
    TrainingPlan plan;
    const auto anchors = make_anchors(cfg, fm);
    const std::size_t n_gt = gt.size();

    // Proposal-stage labels: -1 ignored, 0 background, 1 foreground.
    std::vector<int> labels(anchors.size(), 0);
    std::vector<std::size_t> matched(anchors.size(), 0);
    if (n_gt > 0) {
        std::vector<double> best_for_gt(n_gt, 0.0);
        std::vector<double> max_iou(anchors.size(), 0.0);
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            for (std::size_t g = 0; g < n_gt; ++g) {
                const double v = iou(anchors[i], gt[g].box);
                if (v > max_iou[i]) {
                    max_iou[i] = v;
                    matched[i] = g;
                }
                best_for_gt[g] = std::max(best_for_gt[g], v);
            }
        }
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            if (max_iou[i] >= cfg.rpn_pos_iou) labels[i] = 1;
            else if (max_iou[i] >= cfg.rpn_neg_iou) labels[i] = -1;
        }
        // Each ground truth keeps its best anchor(s) as positives.
        for (std::size_t g = 0; g < n_gt; ++g) {
            if (best_for_gt[g] <= 0.0) continue;
            for (std::size_t i = 0; i < anchors.size(); ++i)
                if (iou(anchors[i], gt[g].box) == best_for_gt[g]) {
                    labels[i] = 1;
                    matched[i] = g;
                }
        }
    }
    std::vector<int> pos, neg;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (labels[i] == 1) pos.push_back(static_cast<int>(i));
        else if (labels[i] == 0) neg.push_back(static_cast<int>(i));
    }
    rng.shuffle(pos.begin(), pos.end());
    rng.shuffle(neg.begin(), neg.end());
    const auto max_pos = static_cast<std::size_t>(cfg.rpn_batch * cfg.rpn_pos_fraction);
    if (pos.size() > max_pos) pos.resize(max_pos);
    const std::size_t max_neg = static_cast<std::size_t>(cfg.rpn_batch) - pos.size();
    if (neg.size() > max_neg) neg.resize(max_neg);
    std::vector<int> sampled(pos);
    sampled.insert(sampled.end(), neg.begin(), neg.end());
    std::sort(sampled.begin(), sampled.end());
    for (int i : sampled) {
        const auto u = static_cast<std::size_t>(i);
        plan.rpn_anchors.push_back(i);
        plan.rpn_labels.push_back(labels[u] == 1 ? 1.0 : 0.0);
        plan.rpn_targets.push_back(labels[u] == 1 ? encode_box(gt[matched[u]].box, anchors[u], kRpnWeights)
                                                  : Vector4d::Zero());
    }

    // Region-head sample: current proposals plus the ground truth itself.
    auto candidates = proposals_from_rpn(cfg, fm, rpn, cfg.post_nms_train).boxes;
    for (const auto& a : gt) candidates.push_back(a.box);
    std::vector<int> fg, bg;
    std::vector<std::size_t> roi_match(candidates.size(), 0);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        double best = 0.0;
        for (std::size_t g = 0; g < n_gt; ++g) {
            const double v = iou(candidates[i], gt[g].box);
            if (v > best) {
                best = v;
                roi_match[i] = g;
            }
        }
        (n_gt > 0 && best >= cfg.roi_fg_iou ? fg : bg).push_back(static_cast<int>(i));
    }
    rng.shuffle(fg.begin(), fg.end());
    rng.shuffle(bg.begin(), bg.end());
    const auto max_fg = static_cast<std::size_t>(cfg.roi_batch * cfg.roi_fg_fraction);
    if (fg.size() > max_fg) fg.resize(max_fg);
    const std::size_t max_bg = static_cast<std::size_t>(cfg.roi_batch) - fg.size();
    if (bg.size() > max_bg) bg.resize(max_bg);
    std::vector<std::pair<int, bool>> rois;
    for (int i : fg) rois.emplace_back(i, true);
    for (int i : bg) rois.emplace_back(i, false);
    std::sort(rois.begin(), rois.end());
    for (const auto& [i, is_fg] : rois) {
        const auto u = static_cast<std::size_t>(i);
        plan.rois.push_back(candidates[u]);
        plan.roi_labels.push_back(is_fg ? gt[roi_match[u]].class_id : 0);
        plan.roi_targets.push_back(is_fg ? encode_box(gt[roi_match[u]].box, candidates[u], kRoiWeights)
                                         : Vector4d::Zero());
    }
    return plan;
}

LossBreakdown detection_loss_terms(const DetectorConfig& cfg, const RpnOutput& rpn, const RoiOutput& roi,
                                   const TrainingPlan& plan, double scale, DetLossGrads* grads) {
    LossBreakdown loss;
    const int a = cfg.num_anchors();
    if (grads) {
        grads->dobjectness = MatrixXd::Zero(rpn.objectness.rows(), rpn.objectness.cols());
        grads->drpn_deltas = MatrixXd::Zero(rpn.deltas.rows(), rpn.deltas.cols());
        grads->droi_logits = MatrixXd::Zero(roi.logits.rows(), roi.logits.cols());
        grads->droi_deltas = MatrixXd::Zero(roi.deltas.rows(), roi.deltas.cols());
    }

    if (!plan.rpn_anchors.empty()) {
        const double inv = 1.0 / static_cast<double>(plan.rpn_anchors.size());
        for (std::size_t s = 0; s < plan.rpn_anchors.size(); ++s) {
            const auto i = static_cast<Eigen::Index>(plan.rpn_anchors[s]);
            const Eigen::Index cell = i / a;
            const Eigen::Index k = i % a;
            const double z = rpn.objectness(k, cell);
            const double y = plan.rpn_labels[s];
            loss.rpn_cls += inv * nn::bce_with_logit(z, y);
            if (grads) grads->dobjectness(k, cell) += scale * inv * (nn::sigmoid(z) - y);
            if (y < 0.5) continue;
            for (int j = 0; j < 4; ++j) {
                const double r = rpn.deltas(4 * k + j, cell) - plan.rpn_targets[s][j];
                loss.rpn_loc += inv * nn::smooth_l1(r, cfg.rpn_beta);
                if (grads) grads->drpn_deltas(4 * k + j, cell) += scale * inv * nn::smooth_l1_grad(r, cfg.rpn_beta);
            }
        }
    }

    if (!plan.rois.empty()) {
        const double inv = 1.0 / static_cast<double>(plan.rois.size());
        const MatrixXd logp = nn::log_softmax_cols<double>(roi.logits);
        for (std::size_t s = 0; s < plan.rois.size(); ++s) {
            const auto col = static_cast<Eigen::Index>(s);
            const int label = plan.roi_labels[s];
            loss.roi_cls -= inv * logp(label, col);
            if (grads) {
                Eigen::VectorXd g = logp.col(col).array().exp();
                g[label] -= 1.0;
                grads->droi_logits.col(col) += scale * inv * g;
            }
            if (label == 0) continue;
            for (int j = 0; j < 4; ++j) {
                const double r = roi.deltas(j, col) - plan.roi_targets[s][j];
                loss.roi_loc += inv * nn::smooth_l1(r, cfg.roi_beta);
                if (grads) grads->droi_deltas(j, col) += scale * inv * nn::smooth_l1_grad(r, cfg.roi_beta);
            }
        }
    }
    loss.total = loss.rpn_cls + loss.rpn_loc + loss.roi_cls + loss.roi_loc;
    return loss;
}

LossBreakdown detection_loss_with_plan(const ModelParams& p, const Image& img, const TrainingPlan& plan,
                                       Tensors* grads) {
    BackboneCache cache;
    const auto fm = forward_backbone(p, img, grads ? &cache : nullptr);
    const auto rpn = rpn_forward(p, fm);
    const auto roi = roi_forward(p, fm, plan.rois);
    if (!grads) return detection_loss_terms(p.config, rpn, roi, plan);

    DetLossGrads dl;
    const auto loss = detection_loss_terms(p.config, rpn, roi, plan, 1.0, &dl);
    MatrixXd dfm = MatrixXd::Zero(fm.values.rows(), fm.values.cols());
    rpn_backward(p, fm, rpn, dl.dobjectness, dl.drpn_deltas, *grads, dfm);
    roi_backward(p, fm, roi, dl.droi_logits, dl.droi_deltas, *grads, dfm);
    backbone_backward(p, cache, dfm, *grads);
    return loss;
}

LossBreakdown detection_loss(const ModelParams& p, const Image& img, const std::vector<Annotation>& gt, Rng& rng,
                             Tensors* grads, TrainingPlan* plan_out) {
    BackboneCache cache;
    const auto fm = forward_backbone(p, img, grads ? &cache : nullptr);
    const auto rpn = rpn_forward(p, fm);
    auto plan = plan_training_sample(p.config, fm, rpn, gt, rng);
    const auto roi = roi_forward(p, fm, plan.rois);
    LossBreakdown loss;
    if (grads) {
        DetLossGrads dl;
        loss = detection_loss_terms(p.config, rpn, roi, plan, 1.0, &dl);
        MatrixXd dfm = MatrixXd::Zero(fm.values.rows(), fm.values.cols());
        rpn_backward(p, fm, rpn, dl.dobjectness, dl.drpn_deltas, *grads, dfm);
        roi_backward(p, fm, roi, dl.droi_logits, dl.droi_deltas, *grads, dfm);
        backbone_backward(p, cache, dfm, *grads);
    } else {
        loss = detection_loss_terms(p.config, rpn, roi, plan);
    }
    if (plan_out) *plan_out = std::move(plan);
    return loss;
}

LossBreakdown detection_loss(const ModelParams& p, const Image& img, const std::vector<Annotation>& gt) {
    Rng rng(derive_seed(0, "detection-loss", img.id));
    return detection_loss(p, img, gt, rng);
}

}  // namespace miadapt
