#include "miadapt/catalign.hpp"

#include <algorithm>
#include <limits>
#include <tuple>

namespace miadapt::catalign {

ProposalSet mine_proposals(const ModelParams& teacher, const FeatureMap& weak_fm, int n_r) {
    if (n_r < 1) throw std::invalid_argument("mine_proposals: n_r must be >= 1");
    return propose(teacher, weak_fm, n_r);
}

ProposalSet mine_proposals(const ModelParams& teacher, const Image& weak_img, int n_r) {
    return mine_proposals(teacher, forward_backbone(teacher, weak_img), n_r);
}

std::vector<LabeledRegion> assign_classes(const ProposalSet& proposals, const std::vector<Annotation>& gt,
                                          double iou_thresh) {
    if (!(iou_thresh > 0.0 && iou_thresh <= 1.0))
        throw std::invalid_argument("assign_classes: iou_thresh must lie in (0,1]");
    std::vector<LabeledRegion> regions;
    for (const auto& box : proposals.boxes) {
        double best = 0.0;
        std::size_t best_g = gt.size();
        for (std::size_t g = 0; g < gt.size(); ++g) {
            const double v = iou(box, gt[g].box);
            if (v > best) {
                best = v;
                best_g = g;
            }
        }
        if (best_g < gt.size() && best >= iou_thresh)
            regions.push_back({box, gt[best_g].class_id, RegionOrigin::TeacherProposal});
    }
    std::sort(regions.begin(), regions.end(), [](const LabeledRegion& a, const LabeledRegion& b) {
        return std::tie(a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max, a.class_id) <
               std::tie(b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max, b.class_id);
    });
    for (const auto& a : gt) regions.push_back({a.box, a.class_id, RegionOrigin::GroundTruth});
    return regions;
}

std::vector<int> pooled_cells(const FeatureMap& fm, const BBox& box) {
    const double s = fm.stride;
    const double x0 = box.x_min / s, x1 = box.x_max / s;
    const double y0 = box.y_min / s, y1 = box.y_max / s;
    std::vector<int> cells;
    for (int y = 0; y < fm.height; ++y) {
        const double cy = y + 0.5;
        if (cy < y0 || cy >= y1) continue;
        for (int x = 0; x < fm.width; ++x) {
            const double cx = x + 0.5;
            if (cx >= x0 && cx < x1) cells.push_back(y * fm.width + x);
        }
    }
    if (cells.empty()) {
        const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
        const int nx = std::clamp(static_cast<int>(cx), 0, fm.width - 1);
        const int ny = std::clamp(static_cast<int>(cy), 0, fm.height - 1);
        cells.push_back(ny * fm.width + nx);
    }
    return cells;
}

Eigen::VectorXd pool_features(const FeatureMap& fm, const BBox& box) {
    const auto cells = pooled_cells(fm, box);
    Eigen::VectorXd f = Eigen::VectorXd::Zero(fm.channels());
    for (int c : cells) f += fm.values.col(c);
    return f / static_cast<double>(cells.size());
}

ClassFeatureBank<double> build_bank(const FeatureMap& fm, const std::vector<LabeledRegion>& regions) {
    ClassFeatureBank<double> bank;
    for (const auto& r : regions) {
        Eigen::VectorXd f = pool_features(fm, r.box);
        if (f.norm() > 0.0) bank.add(r.class_id, std::move(f));
    }
    return bank;
}

AlignmentLoss alignment_loss(const FeatureMap& fm, const std::vector<LabeledRegion>& regions, double alpha,
                             double beta, double margin, bool with_grad) {
    AlignmentLoss out;
    ClassFeatureBank<double> bank;
    std::map<int, std::vector<std::vector<int>>> cells_by_class;
    for (const auto& r : regions) {
        auto cells = pooled_cells(fm, r.box);
        Eigen::VectorXd f = Eigen::VectorXd::Zero(fm.channels());
        for (int c : cells) f += fm.values.col(c);
        f /= static_cast<double>(cells.size());
        if (!(f.norm() > 0.0)) continue;
        bank.add(r.class_id, std::move(f));
        cells_by_class[r.class_id].push_back(std::move(cells));
    }
    for (const auto& [c, list] : bank.features()) out.counts[c] = list.size();

    const auto sim = sim_loss_grad(bank);
    const auto dis = dis_loss_grad(bank, margin);
    out.l_sim = sim.value;
    out.l_dis = dis.value;
    if (!with_grad) return out;

    out.dfm = Eigen::MatrixXd::Zero(fm.values.rows(), fm.values.cols());
    for (const auto& [c, list] : bank.features()) {
        for (std::size_t j = 0; j < list.size(); ++j) {
            const auto& cells = cells_by_class.at(c)[j];
            const Eigen::VectorXd g =
                (alpha * sim.grads.at(c)[j] + beta * dis.grads.at(c)[j]) / static_cast<double>(cells.size());
            for (int cell : cells) out.dfm.col(cell) += g;
        }
    }
    return out;
}

}  // namespace miadapt::catalign
