#include <doctest.h>

#include <fstream>

#include "gradcheck.hpp"
#include "miadapt/detector.hpp"
#include "miadapt/train.hpp"
#include "oracles.hpp"

using namespace miadapt;

namespace {

DetectorConfig two_class_config() {
    DetectorConfig c;
    c.classes = {"a", "b"};
    return c;
}

}  // namespace

TEST_CASE("default detector size") {
    const auto p = init_params(two_class_config(), 0);
    CHECK(p.parameter_count() > 10000);
    CHECK(init_params(oracle::tiny_config(), 0).parameter_count() <= 5000);
}

TEST_CASE("feature map shapes follow ceil division by the stride") {
    const auto p = init_params(two_class_config(), 1);
    auto fm = forward_backbone(p, Image("a", 64, 64, 90));
    CHECK(fm.height == 8);
    CHECK(fm.width == 8);
    CHECK(fm.channels() == 32);
    fm = forward_backbone(p, Image("b", 128, 64, 90));  // width 128, height 64
    CHECK(fm.width == 16);
    CHECK(fm.height == 8);
    fm = forward_backbone(p, Image("c", 65, 17, 90));
    CHECK(fm.width == 9);
    CHECK(fm.height == 3);
    CHECK_THROWS(forward_backbone(p, Image("d", 7, 30, 0)));

    const auto li = oracle::blocks_image("e", 48, 40, {{{5, 5, 20, 20}, 1}}, 3);
    CHECK(forward_backbone(p, li.image).values == forward_backbone(p, li.image).values);
}

TEST_CASE("box coding round trip") {
    const BBox ref{10, 20, 30, 60};
    const BBox target{12, 18, 40, 55};
    for (const auto& w : {kRpnWeights, kRoiWeights}) {
        const BBox back = decode_box(encode_box(target, ref, w), ref, w);
        CHECK(back.x_min == doctest::Approx(target.x_min));
        CHECK(back.y_max == doctest::Approx(target.y_max));
    }
    CHECK(encode_box(ref, ref, kRoiWeights).isZero());
}

TEST_CASE("nms") {
    CHECK(nms({{0, 0, 10, 10}, {0, 0, 10, 10}}, 0.7) == std::vector<std::size_t>{0});
    CHECK(nms({{0, 0, 10, 10}, {20, 20, 30, 30}, {1, 0, 10, 10}}, 0.7) == std::vector<std::size_t>{0, 1});
    CHECK(nms({}, 0.7).empty());
}

TEST_CASE("anchors and proposals") {
    const auto cfg = two_class_config();
    const auto p = init_params(cfg, 2);
    const auto li = oracle::blocks_image("x", 56, 48, {{{5, 5, 20, 25}, 1}, {{30, 10, 50, 30}, 2}}, 4);
    const auto fm = forward_backbone(p, li.image);
    const auto anchors = make_anchors(cfg, fm);
    CHECK(anchors.size() == static_cast<std::size_t>(fm.height * fm.width * cfg.num_anchors()));
    CHECK(anchors[1].center_x() == doctest::Approx(anchors[0].center_x()));
    CHECK(anchors[0].center_x() == doctest::Approx(4.0));

    const auto props = propose(p, fm);
    CHECK(props.boxes.size() == props.objectness.size());
    CHECK(std::is_sorted(props.objectness.begin(), props.objectness.end(), std::greater<>()));
    for (const auto& b : props.boxes) {
        CHECK(b.x_min >= 0);
        CHECK(b.y_min >= 0);
        CHECK(b.x_max <= 56);
        CHECK(b.y_max <= 48);
        CHECK(b.valid());
    }
    for (std::size_t i = 0; i < props.size(); ++i)
        for (std::size_t j = i + 1; j < props.size(); ++j) CHECK(iou(props.boxes[i], props.boxes[j]) <= cfg.rpn_nms);
    CHECK(propose(p, fm, 5).size() <= 5);
}

TEST_CASE("roi_predict shapes and duplicate boxes") {
    const auto p = init_params(two_class_config(), 3);
    const auto li = oracle::blocks_image("r", 40, 40, {}, 5);
    const auto fm = forward_backbone(p, li.image);
    const std::vector<BBox> boxes{{3, 3, 20, 20}, {3, 3, 20, 20}, {10, 0, 40, 12}};
    const auto pred = roi_predict(p, fm, boxes);
    CHECK(pred.logits.rows() == 3);
    CHECK(pred.logits.cols() == 3);
    CHECK(pred.refined.size() == 3);
    CHECK(pred.logits.allFinite());
    CHECK(pred.logits.col(0) == pred.logits.col(1));
    const auto empty = roi_predict(p, fm, {});
    CHECK(empty.logits.cols() == 0);
    CHECK(empty.refined.empty());
}

TEST_CASE("detect contract") {
    const auto p = init_params(two_class_config(), 4);
    const auto li = oracle::blocks_image("d", 48, 48, {{{5, 5, 25, 25}, 1}}, 6);
    CHECK(detect(p, li.image, 1.0, 0.5).empty());
    const auto dets = detect(p, li.image, 0.2, 0.5);
    for (const auto& d : dets) {
        CHECK(d.confidence >= 0.2);
        CHECK(d.confidence <= 1.0);
        CHECK(d.class_id >= 1);
        CHECK(d.class_id <= 2);
    }
    const auto again = detect(p, li.image, 0.2, 0.5);
    REQUIRE(again.size() == dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) CHECK(again[i].box == dets[i].box);
    CHECK_NOTHROW(detect(p, Image("blank", 32, 32, 0), 0.0, 0.5));
}

TEST_CASE("detection loss components") {
    const auto p = init_params(two_class_config(), 5);
    const auto li = oracle::blocks_image("l", 48, 48, {{{5, 5, 25, 25}, 1}, {{28, 20, 44, 44}, 2}}, 7);
    const auto loss = detection_loss(p, li.image, li.annotations);
    CHECK(loss.rpn_cls >= 0);
    CHECK(loss.rpn_loc >= 0);
    CHECK(loss.roi_cls >= 0);
    CHECK(loss.roi_loc >= 0);
    CHECK(loss.total == loss.rpn_cls + loss.rpn_loc + loss.roi_cls + loss.roi_loc);

    const auto bg_only = detection_loss(p, li.image, {});
    CHECK(bg_only.rpn_loc == 0.0);
    CHECK(bg_only.roi_loc == 0.0);
    CHECK(bg_only.rpn_cls > 0.0);
    CHECK(bg_only.roi_cls > 0.0);
}

TEST_CASE("regression losses vanish when predictions equal the targets") {
    const auto cfg = two_class_config();
    const auto p = init_params(cfg, 6);
    const auto li = oracle::blocks_image("z", 48, 48, {{{5, 5, 25, 25}, 1}}, 8);
    const auto fm = forward_backbone(p, li.image);
    auto rpn = rpn_forward(p, fm);
    Rng rng(1);
    const auto plan = plan_training_sample(cfg, fm, rpn, li.annotations, rng);
    auto roi = roi_forward(p, fm, plan.rois);
    const int a = cfg.num_anchors();
    for (std::size_t s = 0; s < plan.rpn_anchors.size(); ++s)
        for (int j = 0; j < 4; ++j)
            rpn.deltas(4 * (plan.rpn_anchors[s] % a) + j, plan.rpn_anchors[s] / a) = plan.rpn_targets[s][j];
    for (std::size_t s = 0; s < plan.rois.size(); ++s)
        roi.deltas.col(static_cast<Eigen::Index>(s)) = plan.roi_targets[s];
    const auto loss = detection_loss_terms(cfg, rpn, roi, plan);
    CHECK(std::count(plan.rpn_labels.begin(), plan.rpn_labels.end(), 1.0) > 0);
    CHECK(loss.rpn_loc == 0.0);
    CHECK(loss.roi_loc == 0.0);
}

TEST_CASE("analytic gradients match finite differences on the tiny model") {
    for (std::uint64_t seed : {1u, 2u}) {
        const auto r = gradcheck::detection_loss(seed);
        CAPTURE(seed);
        CHECK(r.relative_error < 1e-3);
    }
}

TEST_CASE("loss decreases while fitting one image") {
    auto p = init_params(oracle::tiny_config(), 3);
    const auto li = oracle::blocks_image("fit", 40, 40, {{{4, 4, 20, 22}, 1}, {{22, 18, 38, 36}, 2}}, 9);
    Dataset d;
    d.classes = {"a", "b"};
    d.images.push_back(li);
    TrainConfig tc;
    tc.steps = 50;
    tc.warmup_steps = 0;
    tc.hflip = false;
    tc.learning_rate = 0.01;
    std::vector<double> losses;
    train_detector(p, d, tc, [&](const StepRecord& r) { losses.push_back(r.loss.total); });
    REQUIRE(losses.size() == 50);
    auto window = [&](std::size_t from) {
        double s = 0;
        for (std::size_t i = from; i < from + 10; ++i) s += losses[i];
        return s / 10;
    };
    CHECK(window(40) < window(0));
}

TEST_CASE("checkpoint round trip and rejection") {
    const auto dir = oracle::scratch_dir("ckpt");
    const auto p = init_params(two_class_config(), 9);
    save_checkpoint(p, dir / "m.ckpt");
    const auto q = load_checkpoint(dir / "m.ckpt");
    CHECK(same_schema(p, q));
    CHECK(checksum(p) == checksum(q));
    CHECK(parameter_distance(p, q) == 0.0);
    CHECK(q.config.classes == p.config.classes);

    CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), CheckpointError);
    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), CheckpointError);

    // Truncated payload.
    std::ifstream in(dir / "m.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 100);
    CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), CheckpointError);
}

TEST_CASE("sgd and clipping") {
    auto p = init_params(oracle::tiny_config(), 0);
    auto g = zero_like(p);
    for (auto& [n, m] : g) m.setConstant(1.0);
    const double norm = clip_grad_norm(g, 1.0);
    CHECK(norm == doctest::Approx(std::sqrt(double(p.parameter_count()))));
    double after = 0;
    for (auto& [n, m] : g) after += m.squaredNorm();
    CHECK(std::sqrt(after) == doctest::Approx(1.0));
    const auto before = p;
    sgd_update(p, g, 0.5);
    CHECK(parameter_distance(before, p) == doctest::Approx(0.5));
}

TEST_CASE("hflip mirrors boxes") {
    const auto flipped = hflip(std::vector<Annotation>{{{2, 3, 10, 8}, 1}}, 20);
    CHECK(flipped[0].box == BBox{10, 3, 18, 8});
    Image img("f", 3, 1);
    img.at(0, 0, 0) = 7;
    CHECK(hflip(img).at(2, 0, 0) == 7);
}
