#include "miadapt/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "miadapt/catalign.hpp"
#include "miadapt/imaging.hpp"
#include "miadapt/raug.hpp"
#include "miadapt/rng.hpp"
#include "miadapt/train.hpp"

namespace miadapt::adapt {

using Eigen::MatrixXd;

Method parse_method(const std::string& name) {
    if (name == "faster-freeshot") return Method::FasterFreeShot;
    if (name == "mt-freeshot") return Method::MtFreeShot;
    if (name == "miadapt") return Method::MIAdapt;
    throw std::invalid_argument("unknown adaptation method '" + name + "'");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::FasterFreeShot: return "faster-freeshot";
        case Method::MtFreeShot: return "mt-freeshot";
        case Method::MIAdapt: return "miadapt";
    }
    return "unknown";
}

AdaptConfig AdaptConfig::for_method(Method m) {
    AdaptConfig c;
    c.method = m;
    c.use_raug = m == Method::MIAdapt;
    return c;
}

void AdaptConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("adapt config: " + m); };
    if (!(eta >= 0.0 && eta <= 1.0)) fail("eta must lie in [0,1]");
    if (n_r < 1) fail("n_r must be >= 1");
    if (epochs < 1) fail("epochs must be >= 1");
    if (alpha < 0.0 || beta < 0.0) fail("alpha and beta must be >= 0");
    if (!(margin >= 0.0 && margin <= 2.0)) fail("margin must lie in [0,2]");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (!(assign_iou > 0.0 && assign_iou <= 1.0)) fail("assign_iou must lie in (0,1]");
    if (shots < 1) fail("shots must be >= 1");
    if (use_raug && method != Method::MIAdapt) fail("use_raug applies to miadapt only");
}

void to_json(nlohmann::json& j, const AdaptConfig& c) {
    j = {{"method", method_name(c.method)}, {"epochs", c.epochs},     {"eta", c.eta},
         {"n_r", c.n_r},                    {"alpha", c.alpha},       {"beta", c.beta},
         {"margin", c.margin},              {"learning_rate", c.learning_rate},
         {"grad_clip", c.grad_clip},        {"assign_iou", c.assign_iou},
         {"shots", c.shots},                {"seed", c.seed},         {"use_raug", c.use_raug}};
}

void from_json(const nlohmann::json& j, AdaptConfig& c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
    get("epochs", c.epochs);
    get("eta", c.eta);
    get("n_r", c.n_r);
    get("alpha", c.alpha);
    get("beta", c.beta);
    get("margin", c.margin);
    get("learning_rate", c.learning_rate);
    get("grad_clip", c.grad_clip);
    get("assign_iou", c.assign_iou);
    get("shots", c.shots);
    get("seed", c.seed);
    get("use_raug", c.use_raug);
}

// ---------------------------------------------------------------------------
// Weak / strong views.

PairParams draw_pair_params(std::uint64_t seed) {
    Rng rng(seed);
    PairParams p;
    p.weak_factor = rng.uniform(0.95, 1.05);
    p.jitter_seed = rng.next();
    p.grayscale = rng.bernoulli(0.2);
    p.noise = rng.bernoulli(0.3);
    p.noise_seed = rng.next();
    return p;
}

AugmentedPair apply_pair(const Image& img, const PairParams& params) {
    AugmentedPair out;
    out.weak = img;
    if (params.weak_factor != 1.0) {
        std::vector<double> buf(img.pixels.size());
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = params.weak_factor * img.pixels[i];
        out.weak = imaging::from_doubles(buf, img.id, img.width, img.height);
    }
    out.strong = raug::photometric_jitter(img, params.jitter_seed);
    if (params.grayscale) out.strong = imaging::to_grayscale(out.strong);
    if (params.noise) {
        Rng rng(params.noise_seed);
        std::vector<double> buf(out.strong.pixels.begin(), out.strong.pixels.end());
        for (double& v : buf) v += 8.0 * rng.normal();
        out.strong = imaging::from_doubles(buf, img.id, img.width, img.height);
    }
    return out;
}

AugmentedPair augment_pair(const Image& img, std::uint64_t seed) {
    return apply_pair(img, draw_pair_params(seed));
}

ModelParams ema_update(const ModelParams& teacher, const ModelParams& student, double eta) {
    if (!same_schema(teacher, student)) throw std::invalid_argument("ema_update: schema mismatch");
    ModelParams out = teacher;
    for (auto& [name, t] : out.tensors) t = eta * t + (1.0 - eta) * student.tensors.at(name);
    return out;
}

nlohmann::json to_json(const LogRecord& r) {
    return {{"epoch", r.epoch},
            {"step", r.step},
            {"image", r.image_id},
            {"rpn_cls", r.det.rpn_cls},
            {"rpn_loc", r.det.rpn_loc},
            {"roi_cls", r.det.roi_cls},
            {"roi_loc", r.det.roi_loc},
            {"l_det", r.det.total},
            {"l_dl", r.l_dl},
            {"l_sim", r.l_sim},
            {"l_dis", r.l_dis},
            {"total", r.total}};
}

// ---------------------------------------------------------------------------

namespace {

struct StepOutcome {
    LogRecord record;
    Tensors grads;
};

/// Student loss and gradients for one mean-teacher step.
StepOutcome mean_teacher_step(const ModelParams& student, const ModelParams& teacher, const LabeledImage& li,
                              const AdaptConfig& cfg, std::uint64_t aug_seed, Rng& sample_rng) {
    StepOutcome out;
    out.grads = zero_like(student);
    const auto pair = augment_pair(li.image, aug_seed);

    // Teacher: proposals and reference logits on the weak view.
    const auto teacher_fm = forward_backbone(teacher, pair.weak);
    const auto proposals = catalign::mine_proposals(teacher, teacher_fm, cfg.n_r);

    // Student on the strong view.
    BackboneCache cache;
    const auto fm = forward_backbone(student, pair.strong, &cache);
    const auto rpn = rpn_forward(student, fm);
    const auto plan = plan_training_sample(student.config, fm, rpn, li.annotations, sample_rng);
    const auto roi = roi_forward(student, fm, plan.rois);
    DetLossGrads dl;
    auto& rec = out.record;
    rec.det = detection_loss_terms(student.config, rpn, roi, plan, 1.0, &dl);

    MatrixXd dfm = MatrixXd::Zero(fm.values.rows(), fm.values.cols());
    rpn_backward(student, fm, rpn, dl.dobjectness, dl.drpn_deltas, out.grads, dfm);
    roi_backward(student, fm, roi, dl.droi_logits, dl.droi_deltas, out.grads, dfm);

    if (proposals.size() > 0) {
        const MatrixXd teacher_logits = roi_forward(teacher, teacher_fm, proposals.boxes).logits;
        const auto student_roi = roi_forward(student, fm, proposals.boxes);
        MatrixXd dlogits_rows;
        rec.l_dl = consistency_loss<double>(student_roi.logits.transpose(), teacher_logits.transpose(),
                                            &dlogits_rows);
        const MatrixXd dlogits = dlogits_rows.transpose();
        roi_backward(student, fm, student_roi, dlogits, MatrixXd::Zero(4, student_roi.deltas.cols()), out.grads,
                     dfm);
    }

    if (cfg.method == Method::MIAdapt && (cfg.alpha > 0.0 || cfg.beta > 0.0)) {
        // Boxes from the teacher's weak view index the student's strong view;
        // both views share geometry.
        const auto regions = catalign::assign_classes(proposals, li.annotations, cfg.assign_iou);
        const auto al = catalign::alignment_loss(fm, regions, cfg.alpha, cfg.beta, cfg.margin, true);
        rec.l_sim = al.l_sim;
        rec.l_dis = al.l_dis;
        dfm += al.dfm;
    }
    backbone_backward(student, cache, dfm, out.grads);
    rec.total = rec.det.total + rec.l_dl + cfg.alpha * rec.l_sim + cfg.beta * rec.l_dis;
    return out;
}

}  // namespace

AdaptResult run_adaptation(const ModelParams& source, const Dataset& target_kshot, const AdaptConfig& cfg,
                           const LogCallback& on_step) {
    cfg.validate();
    if (target_kshot.empty()) throw std::invalid_argument("run_adaptation: empty target set");
    if (!same_schema(source, init_params(source.config, 0)))
        throw std::invalid_argument("run_adaptation: source checkpoint does not match the detector schema");
    if (target_kshot.num_classes() != source.config.num_classes())
        throw std::invalid_argument("run_adaptation: target classes do not match the source model");

    AdaptResult result;
    result.train_set = cfg.method == Method::MIAdapt && cfg.use_raug
                           ? raug::apply_raug(target_kshot, cfg.shots, derive_seed(cfg.seed, "raug"))
                           : target_kshot;
    const auto& data = result.train_set;

    ModelParams student = source;
    ModelParams teacher = source;
    const bool mean_teacher = cfg.method != Method::FasterFreeShot;
    Rng sample_rng(derive_seed(cfg.seed, "adapt-sample"));
    std::vector<std::size_t> order(data.images.size());
    int step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng(derive_seed(cfg.seed, "adapt-order", {}, static_cast<std::uint64_t>(epoch)));
        order_rng.shuffle(order.begin(), order.end());
        for (std::size_t idx : order) {
            const auto& li = data.images[idx];
            StepOutcome so;
            if (mean_teacher) {
                const auto teacher_sum = checksum(teacher);
                so = mean_teacher_step(student, teacher, li, cfg,
                                       derive_seed(cfg.seed, "augment", li.image.id, static_cast<std::uint64_t>(step)),
                                       sample_rng);
                clip_grad_norm(so.grads, cfg.grad_clip);
                sgd_update(student, so.grads, cfg.learning_rate);
                if (checksum(teacher) != teacher_sum)
                    throw std::logic_error("run_adaptation: teacher parameters changed during the student step");
                teacher = ema_update(teacher, student, cfg.eta);
            } else {
                so.grads = zero_like(student);
                so.record.det = detection_loss(student, li.image, li.annotations, sample_rng, &so.grads);
                so.record.total = so.record.det.total;
                clip_grad_norm(so.grads, cfg.grad_clip);
                sgd_update(student, so.grads, cfg.learning_rate);
            }
            so.record.epoch = epoch;
            so.record.step = step++;
            so.record.image_id = li.image.id;
            so.record.student_checksum = checksum(student);
            if (on_step) on_step(so.record);
            result.log.push_back(std::move(so.record));
        }
    }
    result.model = mean_teacher ? std::move(teacher) : std::move(student);
    return result;
}

}  // namespace miadapt::adapt
