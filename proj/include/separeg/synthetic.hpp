// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale stand-in for CT data: ellipsoidal "organs" with class-specific
// intensity bands and size priors over a noisy background.

#pragma once

#include "separeg/imaging_io.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace separeg::imaging {

struct SyntheticSpec {
    int image_size = 64;
    int depth = 8;
    int n_organ_classes = 2;
    int shapes_per_image = 3;
    /// Per-class [lo, hi] in normalized intensity; class c uses entry c-1.
    std::vector<std::pair<double, double>> intensity_ranges{{0.55, 0.65}, {0.75, 0.85}};
    std::pair<double, double> background_range{0.25, 0.35};
    /// Per-class ellipse semi-axis range in pixels (class 1 first). Larger classes
    /// yield more superpixels, smaller ones fewer.
    std::vector<std::pair<double, double>> radius_ranges{{10.0, 16.0}, {4.0, 7.0}};
    double noise_sigma = 0.04;
    double min_gap = 0.05;
    IntensityWindow window{};
    std::array<double, 3> spacing{1.0, 1.0, 2.5};
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

/// Pure function of (spec, n_volumes). Patient ids are "synth_<seed>_<i>".
std::vector<Volume> generate_synthetic_dataset(const SyntheticSpec& spec, int n_volumes);

struct SplitCounts {
    int pretrain = 2;
    int train = 1;
    int val = 1;
    int test = 2;
    int total() const { return pretrain + train + val + test; }
};

/// Generates, writes volumes under `dir`, and writes `dir/dataset.json`.
/// Volumes are assigned to splits in generation order: train, val, test, pretrain.
DatasetManifest write_synthetic_dataset(const SyntheticSpec& spec, SplitCounts counts,
                                        const std::filesystem::path& dir);

} // namespace separeg::imaging
