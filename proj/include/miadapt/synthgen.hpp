#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "miadapt/datamodel.hpp"

// Deterministic "microscopy-like" scenes: textured background with elliptical
// cells whose color, size and interior pattern depend on the class.
namespace miadapt::synth {

struct CellPrototype {
    std::string name;
    std::array<double, 3> color{128, 128, 128};
    double radius_min = 6.0;
    double radius_max = 8.0;
    double elongation = 1.0;     // major / minor axis
    double ring = 0.0;           // 0 solid; otherwise inner radius fraction drawn light
    double nucleus = 0.0;        // radius fraction of a dark central dot
    double frequency = 1.0;      // relative sampling weight
};

struct DomainShift {
    double hue_degrees = 0.0;
    double contrast = 1.0;
    double blur_sigma = 0.0;
    double highres_fraction = 0.0;  // share of images rendered at highres_multiplier
    int highres_multiplier = 2;
};

struct SynthConfig {
    std::vector<CellPrototype> classes;
    int source_train = 200;
    int source_test = 50;
    int target_pool = 120;
    int target_test = 60;
    int size_min = 80;
    int size_max = 112;
    int cells_min = 3;
    int cells_max = 6;
    DomainShift shift{30.0, 0.8, 1.0, 0.5, 2};
    std::uint64_t seed = 0;

    /// Four-class default with one rare class resembling class 1.
    static SynthConfig defaults();
    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct SynthSplits {
    Dataset source_train;
    Dataset source_test;
    Dataset target_pool;
    Dataset target_test;
};

/// Renders every split. Throws DataError when cells cannot be placed.
SynthSplits generate(const SynthConfig& cfg);

/// Greedy seeded choice of images so each class appears in >= k of them;
/// redundant picks are pruned afterwards.
Dataset select_kshot(const Dataset& pool, int k, std::uint64_t seed);

}  // namespace miadapt::synth
