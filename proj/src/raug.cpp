#include "miadapt/raug.hpp"

#include <algorithm>
#include <cmath>

#include "miadapt/imaging.hpp"
#include "miadapt/rng.hpp"

namespace miadapt::raug {

namespace {

double median_count(const std::map<int, std::size_t>& hist) {
    std::vector<double> v;
    for (const auto& [c, n] : hist) v.push_back(static_cast<double>(n));
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

BBox rect_box(Position p, Dims d) {
    return {static_cast<double>(p.x), static_cast<double>(p.y), static_cast<double>(p.x + d.width),
            static_cast<double>(p.y + d.height)};
}

struct DonorPatch {
    std::size_t image = 0;
    std::size_t annotation = 0;
    int x0 = 0, y0 = 0;
    Dims dims;
    BBox box;  // cell box relative to the patch origin
};

DonorPatch cut_donor(const Dataset& d, std::size_t image, std::size_t annotation) {
    const auto& li = d.images[image];
    const auto& b = li.annotations[annotation].box;
    DonorPatch p;
    p.image = image;
    p.annotation = annotation;
    p.x0 = std::max(0, static_cast<int>(std::floor(b.x_min)) - kDonorMargin);
    p.y0 = std::max(0, static_cast<int>(std::floor(b.y_min)) - kDonorMargin);
    const int x1 = std::min(li.image.width, static_cast<int>(std::ceil(b.x_max)) + kDonorMargin);
    const int y1 = std::min(li.image.height, static_cast<int>(std::ceil(b.y_max)) + kDonorMargin);
    p.dims = {y1 - p.y0, x1 - p.x0};
    p.box = {b.x_min - p.x0, b.y_min - p.y0, b.x_max - p.x0, b.y_max - p.y0};
    return p;
}

}  // namespace

std::vector<int> find_rare_classes(const Dataset& d, int /*k*/) {
    if (d.empty()) throw DataError("find_rare_classes: empty dataset");
    const auto hist = class_histogram(d);
    const double median = median_count(hist);
    std::vector<int> rare;
    for (const auto& [c, n] : hist)
        if (static_cast<double>(n) < median) rare.push_back(c);
    return rare;
}

PatchTransform compute_patch_dims(Dims src, Dims dst, Dims patch) {
    PatchTransform t;
    t.src = src;
    t.dst = dst;
    t.patch = patch;
    t.p_ratio = static_cast<double>(patch.height) / patch.width;
    if (src == dst) {
        t.scale = 1.0;
        t.adjusted = patch;
        return t;
    }
    t.scale = dst.height > dst.width ? static_cast<double>(dst.height) / src.height
                                     : static_cast<double>(dst.width) / src.width;
    t.adjusted = {std::max(1, static_cast<int>(std::lround(t.scale * patch.height))),
                  std::max(1, static_cast<int>(std::lround(t.scale * patch.width)))};
    return t;
}

std::vector<Position> find_empty_regions(const Image& img, const std::vector<Annotation>& gt,
                                         Dims dims, const std::vector<BBox>& reserved) {
    std::vector<Position> out;
    if (dims.width < 1 || dims.height < 1 || dims.width > img.width || dims.height > img.height)
        return out;
    const int sx = std::max(1, dims.width / 2);
    const int sy = std::max(1, dims.height / 2);
    for (int y = 0; y + dims.height <= img.height; y += sy) {
        for (int x = 0; x + dims.width <= img.width; x += sx) {
            const BBox r = rect_box({x, y}, dims);
            const bool hits_gt = std::any_of(gt.begin(), gt.end(), [&](const Annotation& a) {
                return intersection_area(r, a.box) > 0.0;
            });
            if (hits_gt) continue;
            const bool hits_reserved = std::any_of(reserved.begin(), reserved.end(),
                                                   [&](const BBox& b) { return intersection_area(r, b) > 0.0; });
            if (!hits_reserved) out.push_back({x, y});
        }
    }
    return out;
}

JitterParams draw_jitter(std::uint64_t seed) {
    Rng rng(seed);
    JitterParams p;
    for (double& f : p.factor) f = rng.uniform(0.8, 1.2);
    p.sigma = rng.uniform(0.0, 1.0);
    return p;
}

Image apply_jitter(const Image& patch, const JitterParams& params) {
    std::vector<double> buf(patch.pixels.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = params.factor[i % 3] * patch.pixels[i];
    imaging::gaussian_blur_inplace(buf, patch.width, patch.height, params.sigma);
    return imaging::from_doubles(buf, patch.id, patch.width, patch.height);
}

Image photometric_jitter(const Image& patch, std::uint64_t seed) {
    return apply_jitter(patch, draw_jitter(seed));
}

AugmentResult apply_raug_with_plan(const Dataset& d, int k, std::uint64_t seed) {
    AugmentResult result{d, {}};
    if (d.empty()) return result;
    validate(d);

    const auto hist = class_histogram(d);
    const double target = median_count(hist);
    const auto rare = find_rare_classes(d, k);
    if (rare.empty()) return result;

    auto& out = result.dataset;
    const std::size_t n_images = out.images.size();
    result.plans.resize(n_images);
    for (std::size_t i = 0; i < n_images; ++i) result.plans[i].recipient = i;

    // Pasted rectangles (including donor context) per recipient.
    std::vector<std::vector<BBox>> reserved(n_images);
    Rng place_rng(derive_seed(seed, "raug-place"));

    for (int cls : rare) {
        std::vector<DonorPatch> donors;
        for (std::size_t i = 0; i < d.images.size(); ++i)
            for (std::size_t a = 0; a < d.images[i].annotations.size(); ++a)
                if (d.images[i].annotations[a].class_id == cls) donors.push_back(cut_donor(d, i, a));
        if (donors.empty()) continue;

        auto count = static_cast<double>(hist.at(cls));
        std::size_t donor_cursor = 0;
        std::size_t recipient_cursor = 0;
        std::size_t consecutive_failures = 0;
        while (count < target && consecutive_failures < donors.size()) {
            const DonorPatch& donor = donors[donor_cursor++ % donors.size()];
            const auto& donor_img = d.images[donor.image].image;
            bool placed = false;
            for (std::size_t attempt = 0; attempt < n_images && !placed; ++attempt) {
                const std::size_t r = (recipient_cursor + attempt) % n_images;
                if (r == donor.image) continue;
                auto& rec = out.images[r];
                const auto t = compute_patch_dims({donor_img.height, donor_img.width},
                                                  {rec.image.height, rec.image.width}, donor.dims);
                const auto spots = find_empty_regions(rec.image, rec.annotations, t.adjusted, reserved[r]);
                if (spots.empty()) continue;
                const Position pos = spots[place_rng.index(spots.size())];

                auto& plan = result.plans[r];
                PlannedPaste pp;
                pp.donor_image = donor.image;
                pp.donor_annotation = donor.annotation;
                pp.transform = t;
                pp.position = pos;
                pp.class_id = cls;
                pp.jitter_seed = derive_seed(seed, "raug-jitter", rec.image.id, plan.pastes.size());
                const double kx = static_cast<double>(t.adjusted.width) / donor.dims.width;
                const double ky = static_cast<double>(t.adjusted.height) / donor.dims.height;
                const BBox rect = rect_box(pos, t.adjusted);
                pp.box = {pos.x + donor.box.x_min * kx, pos.y + donor.box.y_min * ky,
                          pos.x + donor.box.x_max * kx, pos.y + donor.box.y_max * ky};
                pp.box = {std::clamp(pp.box.x_min, rect.x_min, rect.x_max),
                          std::clamp(pp.box.y_min, rect.y_min, rect.y_max),
                          std::clamp(pp.box.x_max, rect.x_min, rect.x_max),
                          std::clamp(pp.box.y_max, rect.y_min, rect.y_max)};
                if (!pp.box.valid()) continue;

                Image patch = imaging::crop(donor_img, donor.x0, donor.y0, donor.dims.width,
                                            donor.dims.height);
                patch = imaging::resize_bilinear(patch, t.adjusted.width, t.adjusted.height);
                patch = photometric_jitter(patch, pp.jitter_seed);
                imaging::paste(rec.image, patch, pos.x, pos.y);
                rec.annotations.push_back({pp.box, cls});
                reserved[r].push_back(rect);
                plan.pastes.push_back(pp);
                recipient_cursor = r + 1;
                placed = true;
            }
            if (placed) {
                count += 1.0;
                consecutive_failures = 0;
            } else {
                ++consecutive_failures;
            }
        }
    }
    return result;
}

Dataset apply_raug(const Dataset& d, int k, std::uint64_t seed) {
    return apply_raug_with_plan(d, k, seed).dataset;
}

}  // namespace miadapt::raug
