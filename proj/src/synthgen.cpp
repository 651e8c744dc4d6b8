#include "miadapt/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <stdexcept>

#include "miadapt/imaging.hpp"
#include "miadapt/rng.hpp"

namespace miadapt::synth {

SynthConfig SynthConfig::defaults() {
    SynthConfig c;
    c.classes = {
        {"ring", {150, 70, 165}, 7.0, 9.5, 1.0, 0.45, 0.0, 1.0},
        {"round", {55, 60, 150}, 4.0, 5.5, 1.0, 0.0, 0.0, 1.0},
        {"oval", {205, 75, 95}, 7.0, 9.0, 2.2, 0.0, 0.0, 1.0},
        {"gamete", {160, 75, 150}, 7.5, 10.0, 1.15, 0.0, 0.35, 0.15},
    };
    return c;
}

void SynthConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("synth config: " + m); };
    if (classes.size() < 2) fail("at least two classes required");
    for (const auto& p : classes) {
        if (p.radius_min <= 0 || p.radius_max < p.radius_min) fail("bad radius range for " + p.name);
        if (p.elongation < 1.0) fail("elongation must be >= 1");
        if (p.frequency <= 0.0) fail("class frequencies must be positive");
    }
    if (size_min < 16 || size_max < size_min) fail("bad image size range");
    if (cells_min < 0 || cells_max < cells_min) fail("bad cell count range");
    if (source_train < 1 || source_test < 1 || target_pool < 1 || target_test < 1) fail("splits must be non-empty");
    if (shift.highres_fraction < 0.0 || shift.highres_fraction > 1.0) fail("highres_fraction must lie in [0,1]");
    if (shift.highres_multiplier < 1) fail("highres_multiplier must be >= 1");
    if (shift.contrast <= 0.0 || shift.blur_sigma < 0.0) fail("bad contrast or blur");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& p : c.classes)
        classes.push_back({{"name", p.name},
                           {"color", p.color},
                           {"radius_min", p.radius_min},
                           {"radius_max", p.radius_max},
                           {"elongation", p.elongation},
                           {"ring", p.ring},
                           {"nucleus", p.nucleus},
                           {"frequency", p.frequency}});
    j = {{"classes", classes},
         {"source_train", c.source_train},
         {"source_test", c.source_test},
         {"target_pool", c.target_pool},
         {"target_test", c.target_test},
         {"size_min", c.size_min},
         {"size_max", c.size_max},
         {"cells_min", c.cells_min},
         {"cells_max", c.cells_max},
         {"hue_degrees", c.shift.hue_degrees},
         {"contrast", c.shift.contrast},
         {"blur_sigma", c.shift.blur_sigma},
         {"highres_fraction", c.shift.highres_fraction},
         {"highres_multiplier", c.shift.highres_multiplier},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    if (j.contains("classes")) {
        c.classes.clear();
        for (const auto& jc : j.at("classes")) {
            CellPrototype p;
            p.name = jc.at("name").get<std::string>();
            if (jc.contains("color")) p.color = jc.at("color").get<std::array<double, 3>>();
            p.radius_min = jc.value("radius_min", p.radius_min);
            p.radius_max = jc.value("radius_max", p.radius_max);
            p.elongation = jc.value("elongation", p.elongation);
            p.ring = jc.value("ring", p.ring);
            p.nucleus = jc.value("nucleus", p.nucleus);
            p.frequency = jc.value("frequency", p.frequency);
            c.classes.push_back(p);
        }
    }
    get("source_train", c.source_train);
    get("source_test", c.source_test);
    get("target_pool", c.target_pool);
    get("target_test", c.target_test);
    get("size_min", c.size_min);
    get("size_max", c.size_max);
    get("cells_min", c.cells_min);
    get("cells_max", c.cells_max);
    get("hue_degrees", c.shift.hue_degrees);
    get("contrast", c.shift.contrast);
    get("blur_sigma", c.shift.blur_sigma);
    get("highres_fraction", c.shift.highres_fraction);
    get("highres_multiplier", c.shift.highres_multiplier);
    get("seed", c.seed);
}

namespace {

struct Cell {
    int class_id;
    double cx, cy, rx, ry;
};

struct Blob {
    double cx, cy, radius, amplitude;
};

constexpr std::array<double, 3> kBackground{232, 212, 220};

std::vector<Cell> place_cells(const SynthConfig& cfg, int width, int height, Rng& rng, const std::string& id) {
    const int n = rng.integer(cfg.cells_min, cfg.cells_max);
    std::vector<double> cumulative;
    double total = 0.0;
    for (const auto& p : cfg.classes) cumulative.push_back(total += p.frequency);

    std::vector<Cell> cells;
    std::vector<BBox> taken;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform() * total;
        const auto k = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) -
                                                cumulative.begin());
        const auto& proto = cfg.classes[std::min(k, cfg.classes.size() - 1)];
        const double r = rng.uniform(proto.radius_min, proto.radius_max);
        const double major = r * std::sqrt(proto.elongation);
        const double minor = r / std::sqrt(proto.elongation);
        const bool vertical = rng.bernoulli(0.5);
        const double rx = vertical ? minor : major;
        const double ry = vertical ? major : minor;
        bool placed = false;
        for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
            const double cx = rng.uniform(rx + 1.0, width - rx - 1.0);
            const double cy = rng.uniform(ry + 1.0, height - ry - 1.0);
            const BBox halo{cx - rx - 2.0, cy - ry - 2.0, cx + rx + 2.0, cy + ry + 2.0};
            if (std::any_of(taken.begin(), taken.end(), [&](const BBox& b) { return intersection_area(b, halo) > 0; }))
                continue;
            taken.push_back(halo);
            cells.push_back({static_cast<int>(std::min(k, cfg.classes.size() - 1)) + 1, cx, cy, rx, ry});
            placed = true;
        }
        if (!placed)
            throw DataError("image '" + id + "': cannot place " + std::to_string(n) + " cells in " +
                            std::to_string(width) + "x" + std::to_string(height));
    }
    return cells;
}

void hue_rotate(std::vector<double>& rgb, double degrees) {
    if (degrees == 0.0) return;
    const double a = degrees * M_PI / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    const double m[3][3] = {
        {0.213 + 0.787 * c - 0.213 * s, 0.715 - 0.715 * c - 0.715 * s, 0.072 - 0.072 * c + 0.928 * s},
        {0.213 - 0.213 * c + 0.143 * s, 0.715 + 0.285 * c + 0.140 * s, 0.072 - 0.072 * c - 0.283 * s},
        {0.213 - 0.213 * c - 0.787 * s, 0.715 - 0.715 * c + 0.715 * s, 0.072 + 0.928 * c + 0.072 * s}};
    for (std::size_t i = 0; i < rgb.size(); i += 3) {
        const double r = rgb[i], g = rgb[i + 1], b = rgb[i + 2];
        for (int k = 0; k < 3; ++k) rgb[i + k] = m[k][0] * r + m[k][1] * g + m[k][2] * b;
    }
}

LabeledImage render(const SynthConfig& cfg, const std::string& id, bool shifted, std::uint64_t seed) {
    Rng rng(seed);
    const int base_w = rng.integer(cfg.size_min, cfg.size_max);
    const int base_h = rng.integer(cfg.size_min, cfg.size_max);
    const bool highres = shifted && rng.bernoulli(cfg.shift.highres_fraction);
    const int mult = highres ? cfg.shift.highres_multiplier : 1;
    const auto cells = place_cells(cfg, base_w, base_h, rng, id);

    std::vector<Blob> blobs(4);
    for (auto& b : blobs)
        b = {rng.uniform(0, base_w), rng.uniform(0, base_h), rng.uniform(10, 30), rng.uniform(-14, 14)};

    const int w = base_w * mult, h = base_h * mult;
    std::vector<double> rgb(static_cast<std::size_t>(w) * h * 3);
    std::vector<int> owner(static_cast<std::size_t>(w) * h, 0);

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            // Scene coordinates in base-resolution units.
            const double sx = (x + 0.5) / mult, sy = (y + 0.5) / mult;
            double shade = 0.0;
            for (const auto& b : blobs) {
                const double d2 = ((sx - b.cx) * (sx - b.cx) + (sy - b.cy) * (sy - b.cy)) / (b.radius * b.radius);
                shade += b.amplitude * std::exp(-d2);
            }
            std::array<double, 3> px{kBackground[0] + shade, kBackground[1] + shade, kBackground[2] + shade};
            for (std::size_t ci = 0; ci < cells.size(); ++ci) {
                const auto& cell = cells[ci];
                const double dx = (sx - cell.cx) / cell.rx, dy = (sy - cell.cy) / cell.ry;
                const double rr = std::sqrt(dx * dx + dy * dy);
                if (rr > 1.0) continue;
                const auto& proto = cfg.classes[static_cast<std::size_t>(cell.class_id - 1)];
                double edge = rr > 0.8 ? 0.78 : 1.0;
                for (int k = 0; k < 3; ++k) px[k] = proto.color[static_cast<std::size_t>(k)] * edge;
                if (proto.ring > 0.0 && rr < proto.ring)
                    for (int k = 0; k < 3; ++k) px[k] = 0.5 * (px[k] + kBackground[static_cast<std::size_t>(k)]);
                if (proto.nucleus > 0.0 && rr < proto.nucleus) px = {70, 30, 85};
                owner[static_cast<std::size_t>(y) * w + x] = static_cast<int>(ci) + 1;
                break;
            }
            for (int k = 0; k < 3; ++k) rgb[(static_cast<std::size_t>(y) * w + x) * 3 + k] = px[k] + 5.0 * rng.normal();
        }
    }

    if (shifted) {
        hue_rotate(rgb, cfg.shift.hue_degrees);
        if (cfg.shift.contrast != 1.0) {
            const double mean = std::accumulate(rgb.begin(), rgb.end(), 0.0) / static_cast<double>(rgb.size());
            for (double& v : rgb) v = mean + cfg.shift.contrast * (v - mean);
        }
        imaging::gaussian_blur_inplace(rgb, w, h, cfg.shift.blur_sigma);
    }

    LabeledImage li;
    li.image = imaging::from_doubles(rgb, id, w, h);
    li.file = id + ".png";
    // Tight half-open box over each cell's rendered pixels.
    std::vector<BBox> bounds(cells.size(), BBox{1e9, 1e9, -1e9, -1e9});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int o = owner[static_cast<std::size_t>(y) * w + x];
            if (o == 0) continue;
            auto& b = bounds[static_cast<std::size_t>(o - 1)];
            b = {std::min(b.x_min, double(x)), std::min(b.y_min, double(y)), std::max(b.x_max, x + 1.0),
                 std::max(b.y_max, y + 1.0)};
        }
    for (std::size_t ci = 0; ci < cells.size(); ++ci)
        if (bounds[ci].valid()) li.annotations.push_back({bounds[ci], cells[ci].class_id});
    return li;
}

Dataset render_split(const SynthConfig& cfg, const std::string& prefix, int count, bool shifted) {
    Dataset d;
    for (const auto& p : cfg.classes) d.classes.push_back(p.name);
    d.domain_tag = shifted ? "target" : "source";
    for (int i = 0; i < count; ++i) {
        char id[64];
        std::snprintf(id, sizeof(id), "%s-%04d", prefix.c_str(), i);
        d.images.push_back(render(cfg, id, shifted, derive_seed(cfg.seed, "synth", id)));
    }
    return d;
}

}  // namespace

SynthSplits generate(const SynthConfig& cfg) {
    cfg.validate();
    SynthSplits s;
    s.source_train = render_split(cfg, "src-train", cfg.source_train, false);
    s.source_test = render_split(cfg, "src-test", cfg.source_test, false);
    s.target_pool = render_split(cfg, "tgt-pool", cfg.target_pool, true);
    s.target_test = render_split(cfg, "tgt-test", cfg.target_test, true);
    return s;
}

Dataset select_kshot(const Dataset& pool, int k, std::uint64_t seed) {
    if (k < 1) throw DataError("select_kshot: k must be >= 1");
    const int num_classes = pool.num_classes();
    const auto available = class_image_counts(pool);
    for (const auto& [c, n] : available)
        if (n < static_cast<std::size_t>(k))
            throw DataError("select_kshot: pool has " + std::to_string(n) + " images of class '" +
                            pool.classes[static_cast<std::size_t>(c - 1)] + "', need " + std::to_string(k));

    std::vector<std::set<int>> present(pool.images.size());
    for (std::size_t i = 0; i < pool.images.size(); ++i)
        for (const auto& a : pool.images[i].annotations) present[i].insert(a.class_id);

    std::vector<std::size_t> order(pool.images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "kshot"));
    rng.shuffle(order.begin(), order.end());

    std::vector<int> need(static_cast<std::size_t>(num_classes) + 1, k);
    need[0] = 0;
    std::vector<bool> chosen(pool.images.size(), false);
    std::vector<std::size_t> picked;
    auto unmet = [&] { return std::any_of(need.begin(), need.end(), [](int v) { return v > 0; }); };
    while (unmet()) {
        // Prefer images covering the scarcest still-needed classes.
        double best_gain = 0.0;
        std::size_t best = order.size();
        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            const std::size_t i = order[oi];
            if (chosen[i]) continue;
            double gain = 0.0;
            for (int c : present[i])
                if (need[static_cast<std::size_t>(c)] > 0) gain += 1.0 / static_cast<double>(available.at(c));
            if (gain > best_gain) {
                best_gain = gain;
                best = oi;
            }
        }
        const std::size_t i = order[best];
        chosen[i] = true;
        picked.push_back(i);
        for (int c : present[i]) --need[static_cast<std::size_t>(c)];
    }

    // Drop picks that are no longer needed, most recent first.
    std::vector<int> have(static_cast<std::size_t>(num_classes) + 1, 0);
    for (std::size_t i : picked)
        for (int c : present[i]) ++have[static_cast<std::size_t>(c)];
    for (auto it = picked.rbegin(); it != picked.rend(); ++it) {
        const bool redundant = std::all_of(present[*it].begin(), present[*it].end(),
                                           [&](int c) { return have[static_cast<std::size_t>(c)] > k; });
        if (!redundant) continue;
        for (int c : present[*it]) --have[static_cast<std::size_t>(c)];
        chosen[*it] = false;
    }

    Dataset out;
    out.classes = pool.classes;
    out.domain_tag = pool.domain_tag;
    for (std::size_t i = 0; i < pool.images.size(); ++i)
        if (chosen[i]) out.images.push_back(pool.images[i]);
    return out;
}

}  // namespace miadapt::synth
