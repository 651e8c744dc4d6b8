#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "miadapt/datamodel.hpp"
#include "miadapt/detector.hpp"

// Category-aware feature alignment: teacher proposals labeled through IoU with
// the ground truth, pooled student features, an intra-class similarity loss
// and a margin loss between class means.
namespace miadapt::catalign {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class RegionOrigin { TeacherProposal, GroundTruth };

struct LabeledRegion {
    BBox box;
    int class_id = 0;
    RegionOrigin origin = RegionOrigin::TeacherProposal;
};

/// Per-class feature lists. Vectors are stored raw and unit-normalized on read.
template <typename Scalar>
class ClassFeatureBank {
public:
    void add(int class_id, Vec<Scalar> f) {
        if (!f.allFinite()) throw std::domain_error("ClassFeatureBank: non-finite feature");
        if (!features_.empty() && f.size() != features_.begin()->second.front().size())
            throw std::invalid_argument("ClassFeatureBank: feature dimension mismatch");
        features_[class_id].push_back(std::move(f));
    }

    const std::map<int, std::vector<Vec<Scalar>>>& features() const { return features_; }
    std::map<int, std::vector<Vec<Scalar>>>& features() { return features_; }

    std::size_t count(int class_id) const {
        const auto it = features_.find(class_id);
        return it == features_.end() ? 0 : it->second.size();
    }

    Vec<Scalar> unit(int class_id, std::size_t j) const { return normalized(features_.at(class_id)[j]); }

    /// Mean of the unit-normalized vectors of a class.
    Vec<Scalar> mean(int class_id) const {
        const auto& list = features_.at(class_id);
        Vec<Scalar> m = Vec<Scalar>::Zero(list.front().size());
        for (const auto& f : list) m += normalized(f);
        return m / Scalar(list.size());
    }

    static Vec<Scalar> normalized(const Vec<Scalar>& f) {
        const Scalar n = f.norm();
        if (!(n > Scalar(0))) throw std::domain_error("ClassFeatureBank: zero-norm feature vector");
        return f / n;
    }

private:
    std::map<int, std::vector<Vec<Scalar>>> features_;
};

/// Loss value with its gradient for every stored (raw) vector.
template <typename Scalar>
struct BankLoss {
    Scalar value = Scalar(0);
    std::map<int, std::vector<Vec<Scalar>>> grads;
};

namespace detail {

template <typename Scalar>
std::map<int, std::vector<Vec<Scalar>>> zero_grads(const ClassFeatureBank<Scalar>& bank) {
    std::map<int, std::vector<Vec<Scalar>>> g;
    for (const auto& [c, list] : bank.features())
        for (const auto& f : list) g[c].push_back(Vec<Scalar>::Zero(f.size()));
    return g;
}

// Gradient w.r.t. raw f of a function of u = f/|f|, given dL/du.
template <typename Scalar>
Vec<Scalar> through_normalize(const Vec<Scalar>& f, const Vec<Scalar>& u, const Vec<Scalar>& du) {
    return (du - u * u.dot(du)) / f.norm();
}

}  // namespace detail

/// Mean over classes with at least two vectors of the mean over distinct
/// pairs of (1 - cos)^2. Zero when no class has a pair.
template <typename Scalar>
BankLoss<Scalar> sim_loss_grad(const ClassFeatureBank<Scalar>& bank) {
    BankLoss<Scalar> out;
    out.grads = detail::zero_grads(bank);
    int classes_with_pairs = 0;
    for (const auto& [c, list] : bank.features())
        if (list.size() >= 2) ++classes_with_pairs;
    if (classes_with_pairs == 0) return out;

    const Scalar class_weight = Scalar(1) / Scalar(classes_with_pairs);
    for (const auto& [c, list] : bank.features()) {
        const std::size_t n = list.size();
        if (n < 2) continue;
        std::vector<Vec<Scalar>> units;
        units.reserve(n);
        for (const auto& f : list) units.push_back(ClassFeatureBank<Scalar>::normalized(f));
        const Scalar w = class_weight / (Scalar(n * (n - 1)) / Scalar(2));
        std::vector<Vec<Scalar>> du(n, Vec<Scalar>::Zero(list.front().size()));
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t k = j + 1; k < n; ++k) {
                const Scalar cos = units[j].dot(units[k]);
                const Scalar r = Scalar(1) - cos;
                out.value += w * r * r;
                const Scalar dcos = -Scalar(2) * w * r;
                du[j] += dcos * units[k];
                du[k] += dcos * units[j];
            }
        }
        auto& g = out.grads[c];
        for (std::size_t j = 0; j < n; ++j) g[j] = detail::through_normalize(list[j], units[j], du[j]);
    }
    return out;
}

template <typename Scalar>
Scalar sim_loss(const ClassFeatureBank<Scalar>& bank) {
    return sim_loss_grad(bank).value;
}

/// Mean over distinct class pairs of max(1 + cos(mu_a, mu_b) - margin, 0)^2
/// where mu are class means of unit features. Zero with fewer than two classes.
template <typename Scalar>
BankLoss<Scalar> dis_loss_grad(const ClassFeatureBank<Scalar>& bank, Scalar margin) {
    if (margin < Scalar(0) || margin > Scalar(2)) throw std::invalid_argument("dis_loss: margin must lie in [0,2]");
    BankLoss<Scalar> out;
    out.grads = detail::zero_grads(bank);
    std::vector<int> present;
    for (const auto& [c, list] : bank.features())
        if (!list.empty()) present.push_back(c);
    const std::size_t nc = present.size();
    if (nc < 2) return out;

    std::vector<Vec<Scalar>> means, mean_units;
    for (int c : present) {
        means.push_back(bank.mean(c));
        const Scalar n = means.back().norm();
        if (!(n > Scalar(0))) throw std::domain_error("dis_loss: zero-norm class mean");
        mean_units.push_back(means.back() / n);
    }
    const Scalar w = Scalar(1) / (Scalar(nc * (nc - 1)) / Scalar(2));
    std::vector<Vec<Scalar>> dmean(nc, Vec<Scalar>::Zero(means.front().size()));
    for (std::size_t a = 0; a < nc; ++a) {
        for (std::size_t b = a + 1; b < nc; ++b) {
            const Scalar cos = mean_units[a].dot(mean_units[b]);
            const Scalar h = std::max(Scalar(1) + cos - margin, Scalar(0));
            out.value += w * h * h;
            if (h <= Scalar(0)) continue;
            const Scalar dcos = Scalar(2) * w * h;
            dmean[a] += dcos * (mean_units[b] - cos * mean_units[a]) / means[a].norm();
            dmean[b] += dcos * (mean_units[a] - cos * mean_units[b]) / means[b].norm();
        }
    }
    for (std::size_t a = 0; a < nc; ++a) {
        const auto& list = bank.features().at(present[a]);
        const Vec<Scalar> du = dmean[a] / Scalar(list.size());
        auto& g = out.grads[present[a]];
        for (std::size_t j = 0; j < list.size(); ++j)
            g[j] = detail::through_normalize(list[j], ClassFeatureBank<Scalar>::normalized(list[j]), du);
    }
    return out;
}

template <typename Scalar>
Scalar dis_loss(const ClassFeatureBank<Scalar>& bank, Scalar margin) {
    return dis_loss_grad(bank, margin).value;
}

// ---------------------------------------------------------------------------
// Region mining and pooling on detector feature maps.

/// Teacher forward pass on the weak view; top-n_r proposals by objectness.
ProposalSet mine_proposals(const ModelParams& teacher, const Image& weak_img, int n_r);
ProposalSet mine_proposals(const ModelParams& teacher, const FeatureMap& weak_fm, int n_r);

/// Labels proposals with the class of their highest-IoU ground truth (ties to
/// the lowest ground-truth index) when IoU >= iou_thresh, drops the rest, and
/// appends the ground truth. Proposal regions come back in canonical box order
/// so the result does not depend on input order.
std::vector<LabeledRegion> assign_classes(const ProposalSet& proposals, const std::vector<Annotation>& gt,
                                          double iou_thresh);

/// Feature cells averaged for a box: cells whose centers fall inside the box
/// in feature coordinates, or the single nearest cell.
std::vector<int> pooled_cells(const FeatureMap& fm, const BBox& box);

Eigen::VectorXd pool_features(const FeatureMap& fm, const BBox& box);

struct AlignmentLoss {
    double l_sim = 0.0;
    double l_dis = 0.0;
    std::map<int, std::size_t> counts;
    Eigen::MatrixXd dfm;  // gradient of alpha*l_sim + beta*l_dis w.r.t. the map
};

/// Builds the per-batch bank from regions pooled on `fm` and evaluates both
/// losses. Regions pooling to an all-zero vector are skipped.
AlignmentLoss alignment_loss(const FeatureMap& fm, const std::vector<LabeledRegion>& regions, double alpha,
                             double beta, double margin, bool with_grad);

ClassFeatureBank<double> build_bank(const FeatureMap& fm, const std::vector<LabeledRegion>& regions);

}  // namespace miadapt::catalign
