#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "miadapt/datamodel.hpp"
#include "miadapt/detector.hpp"
#include "miadapt/nn.hpp"

// Source-free few-shot adaptation: plain fine-tuning, mean teacher with KL
// consistency, and the full method with copy-paste balancing and category
// alignment.
namespace miadapt::adapt {

enum class Method { FasterFreeShot, MtFreeShot, MIAdapt };

Method parse_method(const std::string& name);
std::string method_name(Method m);

struct AdaptConfig {
    Method method = Method::MIAdapt;
    int epochs = 10;
    double eta = 0.9;      // EMA rate
    int n_r = 300;         // teacher proposals per image
    double alpha = 1.0;    // similarity loss weight
    double beta = 1.0;     // dissimilarity loss weight
    double margin = 1.0;
    double learning_rate = 0.02;
    double grad_clip = 10.0;  // global norm; <= 0 disables
    double assign_iou = 0.5;
    int shots = 5;
    std::uint64_t seed = 0;
    bool use_raug = true;  // honoured only by MIAdapt

    /// Defaults with use_raug matching the method.
    static AdaptConfig for_method(Method m);
    void validate() const;
};

void to_json(nlohmann::json& j, const AdaptConfig& c);
/// Missing keys keep their current values.
void from_json(const nlohmann::json& j, AdaptConfig& c);

struct PairParams {
    double weak_factor = 1.0;
    std::uint64_t jitter_seed = 0;
    bool grayscale = false;
    bool noise = false;
    std::uint64_t noise_seed = 0;
};

struct AugmentedPair {
    Image weak;
    Image strong;
};

PairParams draw_pair_params(std::uint64_t seed);
AugmentedPair apply_pair(const Image& img, const PairParams& params);
/// Photometric-only weak/strong views; geometry is untouched.
AugmentedPair augment_pair(const Image& img, std::uint64_t seed);

/// Element-wise eta*teacher + (1-eta)*student; metadata from the teacher.
ModelParams ema_update(const ModelParams& teacher, const ModelParams& student, double eta);

template <typename Scalar>
using Mat = nn::Mat<Scalar>;

/// Mean over rows of KL(softmax(student_row) || softmax(teacher_row)).
/// Optionally writes d/d(student_logits); the teacher is a constant.
template <typename Scalar>
Scalar consistency_loss(const Mat<Scalar>& student_logits, const Mat<Scalar>& teacher_logits,
                        Mat<Scalar>* dstudent = nullptr) {
    if (student_logits.rows() != teacher_logits.rows() || student_logits.cols() != teacher_logits.cols())
        throw std::invalid_argument("consistency_loss: shape mismatch");
    if (student_logits.rows() < 1) throw std::invalid_argument("consistency_loss: need at least one row");
    const Mat<Scalar> log_p = nn::log_softmax_cols<Scalar>(student_logits.transpose());
    const Mat<Scalar> log_q = nn::log_softmax_cols<Scalar>(teacher_logits.transpose());
    const auto n = student_logits.rows();
    const Scalar inv = Scalar(1) / Scalar(n);
    Scalar total = 0;
    if (dstudent) dstudent->resize(student_logits.rows(), student_logits.cols());
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto p = log_p.col(r).array().exp();
        const auto diff = (log_p.col(r) - log_q.col(r)).array();
        const Scalar kl = (p * diff).sum();
        total += kl;
        if (dstudent) dstudent->row(r) = (inv * p * (diff - kl)).matrix().transpose();
    }
    return total * inv;
}

struct LogRecord {
    int epoch = 0;
    int step = 0;
    std::string image_id;
    LossBreakdown det;
    double l_dl = 0.0;
    double l_sim = 0.0;
    double l_dis = 0.0;
    double total = 0.0;
    std::uint64_t student_checksum = 0;
};

nlohmann::json to_json(const LogRecord& r);

struct AdaptResult {
    ModelParams model;  // last-epoch teacher, or the single network for plain fine-tuning
    std::vector<LogRecord> log;
    Dataset train_set;  // the k-shot set actually used (after balancing)
};

using LogCallback = std::function<void(const LogRecord&)>;

AdaptResult run_adaptation(const ModelParams& source, const Dataset& target_kshot, const AdaptConfig& cfg,
                           const LogCallback& on_step = {});

}  // namespace miadapt::adapt
