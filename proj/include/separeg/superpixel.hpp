// SPDX-License-Identifier: Apache-2.0
//
// SLIC superpixels on single-channel [0,1] images.
//
// Distance between a pixel p and a center k:
//
//     d = (I_p - I_k)^2 + (compactness / S) * ((r_p - r_k)^2 + (c_p - c_k)^2)
//
// with S = sqrt(H*W / n_centers). Both terms are squared Euclidean distances, so
// the mean update is the exact minimizer of the cluster cost and the assigned
// cost never increases from one round to the next.

#pragma once

#include "separeg/grid.hpp"
#include "separeg/imaging_io.hpp"

#include "json.hpp"

#include <cstdint>
#include <vector>

namespace separeg::superpixel {

struct SlicConfig {
    int n_centers = 32;
    double compactness = 0.1;
    int max_iterations = 10;
    /// Stop once no center moves farther than this many pixels.
    double convergence_shift = 1.0;
    /// Components smaller than this fraction of H*W/n_centers are merged away.
    double min_region_frac = 0.25;

    void validate() const;
};

void to_json(nlohmann::json& j, const SlicConfig& c);
void from_json(const nlohmann::json& j, SlicConfig& c);

struct SlicCenter {
    double row = 0.0;
    double col = 0.0;
    double intensity = 0.0;
};

/// Raw clustering before connectivity enforcement.
struct SlicClustering {
    LabelGrid labels;
    std::vector<SlicCenter> centers;
    double grid_step = 0.0;
    int iterations_run = 0;
    /// Total assigned cost, recorded after every assignment and every update.
    std::vector<double> inertia_trace;
};

struct SuperpixelLabelMap {
    LabelGrid labels;
    int n_regions = 0;
    std::vector<SlicCenter> centers;
    int iterations_run = 0;
    std::vector<double> inertia_trace;
};

/// Central-difference gradient magnitude |dI/dr| + |dI/dc| with border replication.
ImageF gradient_magnitude(const ImageF& img);

/// Grid seeding, 3x3 lowest-gradient perturbation, then windowed assign/update rounds.
SlicClustering slic_cluster(const ImageF& img, const SlicConfig& cfg);

/// Splits every label into 4-connected components, merges components smaller than
/// `min_size` into their largest neighbour, and compacts labels to 0..n-1 in
/// first-appearance (raster) order.
LabelGrid enforce_connectivity(const LabelGrid& labels, int min_size, int* n_regions = nullptr);

/// Full SLIC. The procedure is deterministic; `seed` is carried for interface
/// stability and does not influence the result.
SuperpixelLabelMap slic_segment(const imaging::ImageSlice& img, const SlicConfig& cfg,
                                std::uint64_t seed = 0);

/// Number of slic_segment calls made by this process.
std::uint64_t slic_call_count();

} // namespace separeg::superpixel
