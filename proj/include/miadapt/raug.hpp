#pragma once

#include <cstdint>
#include <vector>

#include "miadapt/datamodel.hpp"

// Resolution-aware copy-paste augmentation for rare classes in a k-shot set.
namespace miadapt::raug {

struct Dims {
    int height = 0;
    int width = 0;
    friend bool operator==(const Dims&, const Dims&) = default;
};

/// Geometry of one donor patch moved from image I1 into image I2.
struct PatchTransform {
    Dims src;    // donor image (h1, w1)
    Dims dst;    // recipient image (h2, w2)
    Dims patch;  // donor patch
    double p_ratio = 1.0;  // patch height / width
    double scale = 1.0;
    Dims adjusted;
};

struct Position {
    int x = 0;
    int y = 0;
    friend bool operator==(const Position&, const Position&) = default;
};

struct PlannedPaste {
    std::size_t donor_image = 0;
    std::size_t donor_annotation = 0;
    PatchTransform transform;
    Position position;
    BBox box;  // annotation box inside the recipient
    int class_id = 0;
    std::uint64_t jitter_seed = 0;
};

struct PastePlan {
    std::size_t recipient = 0;
    std::vector<PlannedPaste> pastes;
};

struct JitterParams {
    double factor[3] = {1.0, 1.0, 1.0};
    double sigma = 0.0;
};

/// Classes whose instance count lies strictly below the median class count,
/// ascending by class id.
std::vector<int> find_rare_classes(const Dataset& d, int k);

/// Patch size after moving between images of different resolution. Equal image
/// dims keep the patch; otherwise one uniform factor (h2/h1 for portrait
/// recipients, w2/w1 otherwise) scales both sides.
PatchTransform compute_patch_dims(Dims src, Dims dst, Dims patch);

/// Top-left positions on a stride grid (stride = dims/2) where an h x w
/// rectangle overlaps no ground-truth box and no reserved rectangle.
std::vector<Position> find_empty_regions(const Image& img, const std::vector<Annotation>& gt,
                                         Dims dims, const std::vector<BBox>& reserved = {});

JitterParams draw_jitter(std::uint64_t seed);
Image apply_jitter(const Image& patch, const JitterParams& params);
Image photometric_jitter(const Image& patch, std::uint64_t seed);

/// Margin (pixels) of context kept around a donor box when cutting a patch.
inline constexpr int kDonorMargin = 2;

struct AugmentResult {
    Dataset dataset;
    std::vector<PastePlan> plans;
};

/// Balances rare classes up to the median count by pasting resized, jittered
/// donor patches into free space of other images.
AugmentResult apply_raug_with_plan(const Dataset& d, int k, std::uint64_t seed);
Dataset apply_raug(const Dataset& d, int k, std::uint64_t seed);

}  // namespace miadapt::raug
