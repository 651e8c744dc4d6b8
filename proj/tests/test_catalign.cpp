#include <doctest.h>

#include "gradcheck.hpp"
#include "miadapt/catalign.hpp"
#include "oracles.hpp"

using namespace miadapt;
using namespace miadapt::catalign;
using Eigen::VectorXd;

namespace {

VectorXd v2(double a, double b) { return (VectorXd(2) << a, b).finished(); }

ClassFeatureBank<double> bank_of(const std::vector<std::vector<VectorXd>>& classes) {
    ClassFeatureBank<double> b;
    for (std::size_t c = 0; c < classes.size(); ++c)
        for (const auto& f : classes[c]) b.add(static_cast<int>(c + 1), f);
    return b;
}

FeatureMap map_of(const Eigen::MatrixXd& values, int h, int w) {
    FeatureMap fm;
    fm.values = values;
    fm.height = h;
    fm.width = w;
    fm.image_height = 8 * h;
    fm.image_width = 8 * w;
    return fm;
}

}  // namespace

TEST_CASE("sim_loss examples") {
    CHECK(sim_loss(bank_of({{v2(1, 2), v2(1, 2)}})) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(sim_loss(bank_of({{v2(1, 0), v2(0, 1)}})) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sim_loss(bank_of({{v2(1, 0), v2(-1, 0)}})) == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(sim_loss(bank_of({{v2(1, 0)}, {v2(0, 1)}})) == 0.0);
    CHECK(sim_loss(ClassFeatureBank<double>{}) == 0.0);
}

TEST_CASE("dis_loss examples") {
    CHECK(dis_loss(bank_of({{v2(1, 0)}, {v2(1, 0)}}), 1.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(dis_loss(bank_of({{v2(1, 0)}, {v2(0, 1)}}), 1.0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(dis_loss(bank_of({{v2(1, 0)}, {v2(-1, 0)}}), 1.0) == 0.0);
    CHECK(dis_loss(bank_of({{v2(1, 0)}}), 1.0) == 0.0);
    CHECK_THROWS(dis_loss(bank_of({{v2(1, 0)}, {v2(1, 0)}}), 2.5));
    // class 2 has a zero mean
    CHECK_THROWS(dis_loss(bank_of({{v2(1, 0)}, {v2(1, 0), v2(-1, 0)}}), 1.0));
}

TEST_CASE("bank rejects degenerate vectors") {
    ClassFeatureBank<double> b;
    CHECK_THROWS(b.add(1, v2(std::nan(""), 0)));
    b.add(1, v2(0, 0));
    CHECK_THROWS(sim_loss(bank_of({{v2(0, 0), v2(1, 0)}})));
}

TEST_CASE("losses agree with the direct-definition oracle and obey cosine invariances") {
    Rng rng(21);
    for (int t = 0; t < 200; ++t) {
        const int dim = 2 + rng.integer(0, 6);
        std::vector<std::vector<VectorXd>> classes(static_cast<std::size_t>(rng.integer(1, 4)));
        for (auto& list : classes) {
            const int n = rng.integer(1, 4);
            for (int j = 0; j < n; ++j) {
                VectorXd f(dim);
                for (int k = 0; k < dim; ++k) f[k] = rng.normal();
                list.push_back(f);
            }
        }
        const double margin = rng.uniform(0.0, 2.0);
        const auto bank = bank_of(classes);
        const double s = sim_loss(bank), d = dis_loss(bank, margin);
        CHECK(s == doctest::Approx(oracle::sim_loss(classes)).epsilon(1e-12));
        CHECK(d == doctest::Approx(oracle::dis_loss(classes, margin)).epsilon(1e-12));
        CHECK(s >= 0.0);
        CHECK(s <= 4.0);
        CHECK(d >= 0.0);
        CHECK(d <= (2.0 - margin) * (2.0 - margin) + 1e-12);

        // Common rotation (random orthogonal matrix), per-vector rescaling and
        // within-class / label permutations.
        const Eigen::MatrixXd q = Eigen::MatrixXd::Random(dim, dim).householderQr().householderQ();
        auto changed = classes;
        for (auto& list : changed) {
            for (auto& f : list) f = rng.uniform(0.1, 5.0) * (q * f);
            std::reverse(list.begin(), list.end());
        }
        std::reverse(changed.begin(), changed.end());
        const auto bank2 = bank_of(changed);
        CHECK(sim_loss(bank2) == doctest::Approx(s).epsilon(1e-9));
        CHECK(dis_loss(bank2, margin) == doctest::Approx(d).epsilon(1e-9));
    }
}

TEST_CASE("alignment gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        CAPTURE(seed);
        CHECK(gradcheck::alignment(seed, 8, 1.0, 1.0, 0.5) < 1e-4);
        CHECK(gradcheck::alignment(seed, 16, 0.3, 2.0, 1.0) < 1e-4);
    }
}

TEST_CASE("assign_classes") {
    const std::vector<Annotation> gt{{{0, 0, 10, 10}, 1}, {{20, 0, 30, 10}, 2}};
    ProposalSet props;
    props.boxes = {{20, 0, 30, 10}, {0, 0, 10, 4}, {0, 0, 10, 6}};
    props.objectness = {0.9, 0.8, 0.7};
    const auto regions = assign_classes(props, gt, 0.5);
    int from_props = 0, from_gt = 0;
    for (const auto& r : regions) (r.origin == RegionOrigin::GroundTruth ? from_gt : from_props)++;
    CHECK(from_gt == 2);
    CHECK(from_props == 2);  // the 0.4 overlap is dropped
    bool found_class2 = false;
    for (const auto& r : regions)
        if (r.origin == RegionOrigin::TeacherProposal && r.box == BBox{20, 0, 30, 10}) found_class2 = r.class_id == 2;
    CHECK(found_class2);

    // Two overlaps of 0.6 and 0.55: the larger wins.
    const std::vector<Annotation> pair{{{0, 0, 10, 10}, 1}, {{0, 0, 11, 10}, 2}};
    ProposalSet one;
    one.boxes = {{0, 0, 6, 10}};  // IoU 0.6 with the first, 6/11 with the second
    one.objectness = {1.0};
    CHECK(iou(one.boxes[0], pair[1].box) == doctest::Approx(6.0 / 11.0));
    CHECK(assign_classes(one, pair, 0.5).front().class_id == 1);
}

TEST_CASE("assign_classes ignores proposal order") {
    Rng rng(4);
    for (int t = 0; t < 100; ++t) {
        std::vector<Annotation> gt;
        for (int g = 0; g < 3; ++g) {
            const double x = rng.integer(0, 30), y = rng.integer(0, 30);
            gt.push_back({{x, y, x + 10, y + 10}, rng.integer(1, 3)});
        }
        ProposalSet props;
        for (int k = 0; k < 8; ++k) {
            const auto& g = gt[rng.index(3)].box;
            props.boxes.push_back({g.x_min + rng.integer(-3, 3), g.y_min, g.x_max, g.y_max + rng.integer(-3, 3)});
            props.objectness.push_back(1.0 - 0.1 * k);
        }
        const auto a = assign_classes(props, gt, 0.5);
        std::reverse(props.boxes.begin(), props.boxes.end());
        const auto b = assign_classes(props, gt, 0.5);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].box == b[i].box);
            CHECK(a[i].class_id == b[i].class_id);
        }
    }
}

TEST_CASE("pool_features") {
    Eigen::MatrixXd constant = Eigen::MatrixXd::Constant(3, 12, 2.5);
    const auto fm = map_of(constant, 3, 4);
    const VectorXd v = pool_features(fm, {5, 3, 20, 17});
    CHECK(v.isApprox(VectorXd::Constant(3, 2.5)));

    Eigen::MatrixXd values(2, 4);  // 2x2 map, cell index = y*2 + x
    values << 1, 2, 3, 4, 10, 20, 30, 40;
    const auto small = map_of(values, 2, 2);
    CHECK(pool_features(small, {0, 0, 16, 16}).isApprox(values.rowwise().mean()));
    const VectorXd left = pool_features(small, {0, 0, 8, 16});
    CHECK(left[0] == doctest::Approx(2.0));
    CHECK(left[1] == doctest::Approx(20.0));
    // A tiny box between centers falls back to the nearest cell.
    CHECK(pool_features(small, {9, 9, 10, 10})[0] == doctest::Approx(4.0));
}

TEST_CASE("mine_proposals keeps the top prefix") {
    auto cfg = oracle::tiny_config();
    const auto p = init_params(cfg, 1);
    const auto li = oracle::blocks_image("m", 64, 64, {{{5, 5, 25, 25}, 1}}, 1);
    const auto fm = forward_backbone(p, li.image);
    const auto all = propose(p, fm, 100000);
    REQUIRE(all.size() > 5);
    const auto top = mine_proposals(p, fm, 5);
    CHECK(top.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(top.boxes[i] == all.boxes[i]);
    CHECK(mine_proposals(p, fm, 100000).size() == all.size());
    CHECK(std::is_sorted(top.objectness.begin(), top.objectness.end(), std::greater<>()));
    CHECK(mine_proposals(p, li.image, 5).boxes == top.boxes);
}

TEST_CASE("alignment_loss on a feature map matches bank losses and its gradient") {
    Rng rng(8);
    Eigen::MatrixXd values(6, 20);
    for (Eigen::Index i = 0; i < values.size(); ++i) values.data()[i] = rng.uniform(0.1, 1.0);
    auto fm = map_of(values, 4, 5);
    const std::vector<LabeledRegion> regions{{{0, 0, 16, 16}, 1, RegionOrigin::GroundTruth},
                                             {{16, 8, 40, 32}, 1, RegionOrigin::TeacherProposal},
                                             {{24, 0, 40, 16}, 2, RegionOrigin::TeacherProposal},
                                             {{0, 16, 8, 32}, 2, RegionOrigin::GroundTruth}};
    const auto al = alignment_loss(fm, regions, 0.7, 1.3, 0.2, true);
    const auto bank = build_bank(fm, regions);
    CHECK(al.l_sim == doctest::Approx(sim_loss(bank)).epsilon(1e-12));
    CHECK(al.l_dis == doctest::Approx(dis_loss(bank, 0.2)).epsilon(1e-12));
    CHECK(al.counts.at(1) == 2);

    const VectorXd x0 = values.reshaped();
    auto f = [&](const VectorXd& x) {
        fm.values = x.reshaped(6, 20);
        const auto r = alignment_loss(fm, regions, 0.7, 1.3, 0.2, false);
        return 0.7 * r.l_sim + 1.3 * r.l_dis;
    };
    const VectorXd num = oracle::numeric_grad(f, x0, 1e-6);
    CHECK(oracle::relative_error(al.dfm.reshaped(), num) < 1e-4);
}
