#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace miadapt {

/// Raised for manifest, schema and image-file problems. The message names the
/// offending image id when one is known.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Half-open continuous box: [x_min, x_max) x [y_min, y_max).
struct BBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x_min + x_max); }
    double center_y() const { return 0.5 * (y_min + y_max); }
    bool valid() const { return x_min < x_max && y_min < y_max; }

    friend bool operator==(const BBox&, const BBox&) = default;
};

/// Intersection over union; 0 for disjoint boxes.
double iou(const BBox& a, const BBox& b);

/// Area of the intersection of two boxes (0 when disjoint).
double intersection_area(const BBox& a, const BBox& b);

BBox clip_box(const BBox& box, double width, double height);

/// 8-bit RGB image, interleaved row-major.
struct Image {
    std::string id;
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(std::string image_id, int w, int h, std::uint8_t fill = 0)
        : id(std::move(image_id)), width(w), height(h),
          pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

    std::uint8_t& at(int x, int y, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    std::uint8_t at(int x, int y, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    bool empty() const { return width <= 0 || height <= 0; }

    friend bool operator==(const Image&, const Image&) = default;
};

struct Annotation {
    BBox box;
    int class_id = 0;

    friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct LabeledImage {
    Image image;
    std::string file;  // relative to the manifest directory
    std::vector<Annotation> annotations;

    friend bool operator==(const LabeledImage&, const LabeledImage&) = default;
};

struct Dataset {
    std::vector<LabeledImage> images;
    std::vector<std::string> classes;
    std::string domain_tag;

    int num_classes() const { return static_cast<int>(classes.size()); }
    bool empty() const { return images.empty(); }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct Detection {
    BBox box;
    int class_id = 0;
    double confidence = 0.0;
};

/// Checks every datamodel invariant; throws DataError naming the image.
void validate(const Dataset& d);

/// Reads a JSON manifest plus the PNG files it references. Boxes crossing the
/// image border are clipped before validation.
Dataset load_dataset(const std::filesystem::path& manifest);

/// Writes every image as PNG next to the manifest and then the manifest
/// itself. Images without a file name get "<id>.png".
void save_dataset(const Dataset& d, const std::filesystem::path& manifest);

/// Instance count per class id 1..C (zero-count classes included).
std::map<int, std::size_t> class_histogram(const Dataset& d);

/// Number of images containing at least one instance of each class.
std::map<int, std::size_t> class_image_counts(const Dataset& d);

}  // namespace miadapt
