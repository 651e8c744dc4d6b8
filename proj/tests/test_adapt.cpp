#include <doctest.h>

#include "miadapt/adapt.hpp"
#include "oracles.hpp"

using namespace miadapt;
using namespace miadapt::adapt;
using Eigen::MatrixXd;

namespace {

ModelParams scalar_model(double v) {
    ModelParams p;
    p.config = oracle::tiny_config();
    p.tensors["w"] = MatrixXd::Constant(1, 1, v);
    return p;
}

Dataset tiny_target() {
    Dataset d;
    d.classes = {"a", "b"};
    d.images.push_back(oracle::blocks_image("t0", 40, 40, {{{4, 4, 18, 18}, 1}, {{22, 20, 36, 36}, 2}}, 1));
    d.images.push_back(oracle::blocks_image("t1", 48, 40, {{{6, 10, 20, 26}, 1}}, 2));
    d.images.push_back(oracle::blocks_image("t2", 40, 48, {{{20, 4, 34, 22}, 2}}, 3));
    return d;
}

}  // namespace

TEST_CASE("config defaults and validation") {
    const AdaptConfig c;
    CHECK(c.epochs == 10);
    CHECK(c.eta == 0.9);
    CHECK(c.n_r == 300);
    CHECK(c.alpha == 1.0);
    CHECK(c.beta == 1.0);
    CHECK(c.margin == 1.0);
    CHECK(AdaptConfig::for_method(Method::MtFreeShot).use_raug == false);
    CHECK(AdaptConfig::for_method(Method::MIAdapt).use_raug == true);

    auto bad = AdaptConfig::for_method(Method::MIAdapt);
    bad.eta = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = AdaptConfig::for_method(Method::MIAdapt);
    bad.margin = 3;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = AdaptConfig::for_method(Method::MtFreeShot);
    bad.use_raug = true;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    nlohmann::json j;
    to_json(j, c);
    AdaptConfig back;
    back.epochs = 3;
    from_json(j, back);
    CHECK(back.epochs == 10);
    CHECK(parse_method("mt-freeshot") == Method::MtFreeShot);
    CHECK_THROWS(parse_method("bogus"));
}

TEST_CASE("augment_pair keeps geometry and is deterministic") {
    const auto li = oracle::blocks_image("p", 33, 21, {{{2, 2, 10, 10}, 1}}, 4);
    for (std::uint64_t s = 0; s < 30; ++s) {
        const auto a = augment_pair(li.image, s);
        const auto b = augment_pair(li.image, s);
        CHECK(a.weak == b.weak);
        CHECK(a.strong == b.strong);
        CHECK(a.weak.width == 33);
        CHECK(a.strong.height == 21);
        const auto params = draw_pair_params(s);
        CHECK(params.weak_factor >= 0.95);
        CHECK(params.weak_factor <= 1.05);
    }
    PairParams identity;
    identity.weak_factor = 1.0;
    CHECK(apply_pair(li.image, identity).weak == li.image);
}

TEST_CASE("ema_update arithmetic") {
    CHECK(ema_update(scalar_model(1.0), scalar_model(0.0), 0.9)["w"](0, 0) == doctest::Approx(0.9).epsilon(1e-15));
    const auto twice = ema_update(ema_update(scalar_model(1.0), scalar_model(0.0), 0.9), scalar_model(0.0), 0.9);
    CHECK(twice["w"](0, 0) == doctest::Approx(0.81).epsilon(1e-15));
    CHECK(ema_update(scalar_model(0.3), scalar_model(0.3), 0.9)["w"](0, 0) == doctest::Approx(0.3).epsilon(1e-15));

    auto other = scalar_model(0.0);
    other.tensors["extra"] = MatrixXd::Zero(1, 1);
    CHECK_THROWS(ema_update(scalar_model(1.0), other, 0.9));

    // Element-wise affine form on a full model.
    const auto t = init_params(oracle::tiny_config(), 1);
    const auto s = init_params(oracle::tiny_config(), 2);
    const auto e = ema_update(t, s, 0.7);
    for (const auto& [name, m] : e.tensors)
        CHECK((m - (0.7 * t[name] + 0.3 * s[name])).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("consistency_loss") {
    MatrixXd st(1, 2), te(1, 2);
    st << 0, 0;
    te << 0, std::log(3.0);
    const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    CHECK(consistency_loss<double>(st, te) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(consistency_loss<double>(st, te) - 0.1438) < 1e-4);
    CHECK(consistency_loss<double>(st, st) == doctest::Approx(0.0));
    CHECK_THROWS(consistency_loss<double>(MatrixXd(2, 3), MatrixXd(3, 2)));

    Rng rng(3);
    for (int t = 0; t < 1000; ++t) {
        const int n = rng.integer(1, 4), c = rng.integer(2, 5);
        MatrixXd a(n, c), b(n, c);
        for (Eigen::Index i = 0; i < a.size(); ++i) {
            a.data()[i] = 3 * rng.normal();
            b.data()[i] = 3 * rng.normal();
        }
        MatrixXd grad;
        const double v = consistency_loss<double>(a, b, &grad);
        CHECK(v >= 0.0);
        CHECK(v == doctest::Approx(oracle::kl_rows(a, b)).epsilon(1e-9));
        MatrixXd shifted_a = a, shifted_b = b;
        for (int r = 0; r < n; ++r) {
            shifted_a.row(r).array() += rng.normal() * 5;
            shifted_b.row(r).array() += rng.normal() * 5;
        }
        CHECK(consistency_loss<double>(shifted_a, shifted_b) == doctest::Approx(v).epsilon(1e-9));
        if (t < 20) {
            const Eigen::VectorXd x0 = a.reshaped();
            auto f = [&](const Eigen::VectorXd& x) { return consistency_loss<double>(x.reshaped(n, c), b); };
            CHECK(oracle::relative_error(grad.reshaped(), oracle::numeric_grad(f, x0, 1e-6)) < 1e-6);
        }
    }
}

TEST_CASE("run_adaptation contracts") {
    const auto source = init_params(oracle::tiny_config(), 5);
    const auto target = tiny_target();

    auto cfg = AdaptConfig::for_method(Method::MtFreeShot);
    cfg.epochs = 2;
    cfg.eta = 1.0;
    cfg.n_r = 20;
    auto r = run_adaptation(source, target, cfg);
    CHECK(checksum(r.model) == checksum(source));  // eta = 1 freezes the teacher
    CHECK(r.log.size() == 6);
    for (const auto& rec : r.log) CHECK(rec.l_sim == 0.0);

    cfg = AdaptConfig::for_method(Method::MIAdapt);
    cfg.epochs = 1;
    cfg.n_r = 20;
    cfg.shots = 1;
    r = run_adaptation(source, target, cfg);
    CHECK(parameter_distance(r.model, source) > 0.0);
    const auto again = run_adaptation(source, target, cfg);
    CHECK(checksum(again.model) == checksum(r.model));

    cfg = AdaptConfig::for_method(Method::FasterFreeShot);
    cfg.epochs = 1;
    r = run_adaptation(source, target, cfg);
    CHECK(r.log.size() == 3);
    CHECK(r.log.front().l_dl == 0.0);

    CHECK_THROWS(run_adaptation(source, Dataset{{}, {"a", "b"}, ""}, cfg));
    auto wrong = target;
    wrong.classes.push_back("c");
    CHECK_THROWS(run_adaptation(source, wrong, cfg));
}

TEST_CASE("miadapt with zero alignment weights and no balancing equals mt-freeshot") {
    const auto source = init_params(oracle::tiny_config(), 6);
    const auto target = tiny_target();
    auto mt = AdaptConfig::for_method(Method::MtFreeShot);
    mt.epochs = 2;
    mt.n_r = 30;
    mt.seed = 4;
    auto mi = mt;
    mi.method = Method::MIAdapt;
    mi.alpha = 0.0;
    mi.beta = 0.0;
    mi.use_raug = false;
    const auto a = run_adaptation(source, target, mt);
    const auto b = run_adaptation(source, target, mi);
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].student_checksum == b.log[i].student_checksum);
        CHECK(a.log[i].total == b.log[i].total);
    }
    CHECK(checksum(a.model) == checksum(b.model));
}
