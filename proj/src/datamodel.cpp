#include "miadapt/datamodel.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "miadapt/imaging.hpp"

namespace miadapt {

using nlohmann::json;

double intersection_area(const BBox& a, const BBox& b) {
    const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (w <= 0.0 || h <= 0.0) return 0.0;
    return w * h;
}

double iou(const BBox& a, const BBox& b) {
    const double inter = intersection_area(a, b);
    if (inter <= 0.0) return 0.0;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

BBox clip_box(const BBox& box, double width, double height) {
    return {std::clamp(box.x_min, 0.0, width), std::clamp(box.y_min, 0.0, height),
            std::clamp(box.x_max, 0.0, width), std::clamp(box.y_max, 0.0, height)};
}

void validate(const Dataset& d) {
    const int num_classes = d.num_classes();
    std::set<std::string> ids;
    for (const auto& li : d.images) {
        const auto& img = li.image;
        if (img.width < 1 || img.height < 1)
            throw DataError("image '" + img.id + "': dimensions must be >= 1");
        if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * 3)
            throw DataError("image '" + img.id + "': pixel buffer size mismatch");
        if (!ids.insert(img.id).second) throw DataError("duplicate image id '" + img.id + "'");
        for (const auto& a : li.annotations) {
            if (a.class_id < 1 || a.class_id > num_classes)
                throw DataError("image '" + img.id + "': class_id " + std::to_string(a.class_id) +
                                " outside 1.." + std::to_string(num_classes));
            if (!a.box.valid())
                throw DataError("image '" + img.id + "': degenerate box");
            if (a.box.x_min < 0 || a.box.y_min < 0 || a.box.x_max > img.width ||
                a.box.y_max > img.height)
                throw DataError("image '" + img.id + "': box outside image bounds");
        }
    }
}

namespace {

json to_json(const LabeledImage& li) {
    json anns = json::array();
    for (const auto& a : li.annotations) {
        anns.push_back({{"class_id", a.class_id},
                        {"box", {a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max}}});
    }
    return {{"id", li.image.id},
            {"file", li.file.empty() ? li.image.id + ".png" : li.file},
            {"width", li.image.width},
            {"height", li.image.height},
            {"annotations", anns}};
}

template <typename T>
T required(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw DataError(where + ": missing key '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw DataError(where + ": bad value for '" + key + "': " + e.what());
    }
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw DataError("cannot open manifest " + manifest.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw DataError("manifest " + manifest.string() + " is not valid JSON: " + e.what());
    }
    if (!doc.is_object()) throw DataError("manifest root must be an object");

    Dataset d;
    d.classes = required<std::vector<std::string>>(doc, "classes", "manifest");
    d.domain_tag = doc.value("domain", std::string{});
    const auto images = required<json>(doc, "images", "manifest");
    if (!images.is_array()) throw DataError("manifest: 'images' must be an array");

    const auto base = manifest.parent_path();
    for (const auto& ji : images) {
        const auto id = required<std::string>(ji, "id", "image entry");
        const std::string where = "image '" + id + "'";
        LabeledImage li;
        li.file = required<std::string>(ji, "file", where);
        const int width = required<int>(ji, "width", where);
        const int height = required<int>(ji, "height", where);
        li.image = imaging::read_png(base / li.file, id);
        if (li.image.width != width || li.image.height != height)
            throw DataError(where + ": PNG is " + std::to_string(li.image.width) + "x" +
                            std::to_string(li.image.height) + ", manifest says " +
                            std::to_string(width) + "x" + std::to_string(height));
        for (const auto& ja : ji.value("annotations", json::array())) {
            const auto coords = required<std::vector<double>>(ja, "box", where);
            if (coords.size() != 4) throw DataError(where + ": box needs 4 coordinates");
            Annotation a;
            a.class_id = required<int>(ja, "class_id", where);
            a.box = clip_box({coords[0], coords[1], coords[2], coords[3]}, width, height);
            li.annotations.push_back(a);
        }
        d.images.push_back(std::move(li));
    }
    validate(d);
    return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& manifest) {
    validate(d);
    const auto base = manifest.parent_path();
    if (!base.empty()) std::filesystem::create_directories(base);
    json images = json::array();
    for (const auto& li : d.images) {
        auto entry = to_json(li);
        imaging::write_png(li.image, base / entry["file"].get<std::string>());
        images.push_back(std::move(entry));
    }
    json doc = {{"classes", d.classes}, {"images", images}};
    if (!d.domain_tag.empty()) doc["domain"] = d.domain_tag;

    const auto tmp = manifest.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw DataError("cannot write manifest " + manifest.string());
        out << doc.dump(1) << '\n';
    }
    std::filesystem::rename(tmp, manifest);
}

std::map<int, std::size_t> class_histogram(const Dataset& d) {
    std::map<int, std::size_t> counts;
    for (int c = 1; c <= d.num_classes(); ++c) counts[c] = 0;
    for (const auto& li : d.images)
        for (const auto& a : li.annotations) ++counts[a.class_id];
    return counts;
}

std::map<int, std::size_t> class_image_counts(const Dataset& d) {
    std::map<int, std::size_t> counts;
    for (int c = 1; c <= d.num_classes(); ++c) counts[c] = 0;
    for (const auto& li : d.images) {
        std::set<int> present;
        for (const auto& a : li.annotations) present.insert(a.class_id);
        for (int c : present) ++counts[c];
    }
    return counts;
}

}  // namespace miadapt
