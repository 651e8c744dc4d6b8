#include <doctest.h>

#include <fstream>

#include <json.hpp>

#include "miadapt/datamodel.hpp"
#include "miadapt/imaging.hpp"
#include "miadapt/rng.hpp"
#include "oracles.hpp"

using namespace miadapt;

TEST_CASE("iou basic cases") {
    const BBox a{0, 0, 10, 10};
    CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(iou(a, BBox{20, 20, 30, 30}) == 0.0);
    CHECK(iou(a, BBox{10, 0, 20, 10}) == 0.0);  // touching edges share no area
    CHECK(iou(a, BBox{5, 0, 15, 10}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(oracle::pixel_iou(a, BBox{5, 0, 15, 10}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("iou matches the pixel-count oracle and is symmetric") {
    Rng rng(7);
    auto random_box = [&] {
        const int x0 = rng.integer(0, 30), y0 = rng.integer(0, 30);
        return BBox{double(x0), double(y0), double(rng.integer(x0 + 1, 32)), double(rng.integer(y0 + 1, 32))};
    };
    for (int t = 0; t < 2000; ++t) {
        const BBox a = random_box(), b = random_box();
        const double v = iou(a, b);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v == iou(b, a));
        CHECK(std::abs(v - oracle::pixel_iou(a, b)) < 1e-6);
        CHECK(iou(a, a) == 1.0);
    }
}

TEST_CASE("clip_box keeps boxes inside the image") {
    const BBox c = clip_box({-5, 3, 50, 120}, 40, 100);
    CHECK(c == BBox{0, 3, 40, 100});
}

namespace {

Dataset two_image_dataset() {
    Dataset d;
    d.classes = {"ring", "round", "oval", "gamete"};
    d.domain_tag = "test";
    d.images.push_back(oracle::blocks_image("img-a", 24, 16, {{{2, 2, 8, 9}, 1}, {{10, 4, 20, 12}, 4}}, 1));
    d.images.push_back(oracle::blocks_image("img-b", 12, 20, {}, 2));
    return d;
}

}  // namespace

TEST_CASE("dataset save/load round trip") {
    const auto dir = oracle::scratch_dir("roundtrip");
    const auto d = two_image_dataset();
    save_dataset(d, dir / "manifest.json");
    const auto back = load_dataset(dir / "manifest.json");
    REQUIRE(back.images.size() == 2);
    CHECK(back.classes == d.classes);
    CHECK(back.domain_tag == d.domain_tag);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back.images[i].image == d.images[i].image);
        CHECK(back.images[i].annotations == d.images[i].annotations);
        CHECK(back.images[i].file == d.images[i].file);
    }
    // The image without annotations survives.
    CHECK(back.images[1].annotations.empty());
    CHECK(back == d);
}

TEST_CASE("load_dataset rejects bad manifests and names the image") {
    const auto dir = oracle::scratch_dir("badmanifest");
    save_dataset(two_image_dataset(), dir / "manifest.json");
    nlohmann::json doc;
    std::ifstream(dir / "manifest.json") >> doc;
    doc["images"][0]["annotations"][0]["class_id"] = 7;
    std::ofstream(dir / "bad.json") << doc.dump();
    try {
        load_dataset(dir / "bad.json");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("img-a") != std::string::npos);
    }
    CHECK_THROWS_AS(load_dataset(dir / "missing.json"), DataError);

    doc = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
    doc["images"][1]["file"] = "nope.png";
    std::ofstream(dir / "nofile.json") << doc.dump();
    CHECK_THROWS_AS(load_dataset(dir / "nofile.json"), DataError);
}

TEST_CASE("validate enforces invariants") {
    auto d = two_image_dataset();
    CHECK_NOTHROW(validate(d));
    auto dup = d;
    dup.images[1].image.id = "img-a";
    CHECK_THROWS_AS(validate(dup), DataError);
    auto degenerate = d;
    degenerate.images[0].annotations[0].box = {5, 5, 5, 9};
    CHECK_THROWS_AS(validate(degenerate), DataError);
    auto outside = d;
    outside.images[0].annotations[0].box = {5, 5, 30, 9};
    CHECK_THROWS_AS(validate(outside), DataError);
}

TEST_CASE("class_histogram") {
    Dataset empty;
    empty.classes = {"a", "b", "c"};
    for (const auto& [c, n] : class_histogram(empty)) CHECK(n == 0);

    Dataset one;
    one.classes = {"a", "b", "c", "d"};
    one.images.push_back(oracle::blocks_image("x", 30, 30, {{{0, 0, 5, 5}, 1}, {{10, 10, 15, 15}, 1}}, 3));
    const auto h = class_histogram(one);
    CHECK(h == std::map<int, std::size_t>{{1, 2}, {2, 0}, {3, 0}, {4, 0}});
    CHECK(class_image_counts(one).at(1) == 1);
}

TEST_CASE("png round trip and image helpers") {
    const auto dir = oracle::scratch_dir("png");
    Image img("p", 7, 5);
    Rng rng(3);
    for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.integer(0, 255));
    imaging::write_png(img, dir / "p.png");
    CHECK(imaging::read_png(dir / "p.png", "p") == img);

    const Image c = imaging::crop(img, 2, 1, 3, 2);
    CHECK(c.width == 3);
    CHECK(c.at(0, 0, 1) == img.at(2, 1, 1));
    Image canvas("c", 7, 5, 0);
    imaging::paste(canvas, c, 2, 1);
    CHECK(canvas.at(4, 2, 2) == img.at(4, 2, 2));
    CHECK(canvas.at(0, 0, 0) == 0);

    const Image same = imaging::resize_bilinear(img, 7, 5);
    CHECK(same == img);
    const Image blurred = imaging::gaussian_blur(Image("g", 9, 9, 90), 1.5);
    for (auto v : blurred.pixels) CHECK(v == 90);
}
