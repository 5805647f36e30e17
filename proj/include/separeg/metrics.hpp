// SPDX-License-Identifier: Apache-2.0
//
// Segmentation losses and overlap/surface metrics.
//
// Boundary voxels: foreground voxels with at least one 6-neighbour that is
// background or outside the volume. HD95 pools the nearest-boundary distances
// from each mask's boundary to the other's and takes the 95th percentile with
// linear interpolation between order statistics.

#pragma once

#include "separeg/grid.hpp"

#include "json.hpp"

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace separeg::metrics {

/// 1 - mean over foreground classes of (2 sum(p t) + eps) / (sum(p) + sum(t) + eps),
/// sums taken over the whole batch. scores (B, C, H, W), target (B, H, W) int64.
torch::Tensor dice_loss(const torch::Tensor& scores, const torch::Tensor& target, double eps = 1e-5);

/// 2|P & G| / (|P| + |G|); 1 when both are empty.
double dsc(const BinaryVolume& pred, const BinaryVolume& gt);

std::vector<std::array<int, 3>> boundary_voxels(const BinaryVolume& mask);

/// Squared Euclidean distance from every voxel to the nearest seed voxel,
/// axis i scaled by spacing[i]. Infinity everywhere when there are no seeds.
std::vector<double> squared_distance_transform(const BinaryVolume& seeds,
                                               const std::array<double, 3>& spacing);

/// Nullopt when exactly one mask is empty; 0 when both are. With `directed`
/// only pred-boundary to gt-boundary distances are pooled.
std::optional<double> hd95(const BinaryVolume& pred, const BinaryVolume& gt,
                           const std::array<double, 3>& spacing = {1.0, 1.0, 1.0},
                           bool directed = false);

/// Linear-interpolation percentile, q in [0, 100].
double percentile(std::vector<double> values, double q);

struct PatientMetrics {
    std::string patient_id;
    /// Indexed by foreground class - 1.
    std::vector<double> dsc;
    std::vector<std::optional<double>> hd95;

    double mean_dsc() const;
};

struct Stat {
    double mean = 0;
    /// Sample standard deviation / sqrt(n); 0 when n < 2.
    double stderr_ = 0;
    int n = 0;
    /// Rows excluded (HD95 sentinel).
    int excluded = 0;
};

Stat summarize(const std::vector<double>& values, int excluded = 0);

struct MetricsReport {
    int n_classes = 2;
    std::vector<PatientMetrics> per_patient;
    /// Per foreground class.
    std::vector<Stat> dsc;
    std::vector<Stat> hd95;
    /// Over patients of the per-patient class-mean DSC.
    Stat mean_dsc;
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
    nlohmann::json meta = nlohmann::json::object();

    /// Recomputes every aggregate from per_patient.
    void recompute();
};

MetricsReport make_report(std::vector<PatientMetrics> rows, int n_classes);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);

/// Writes <stem>.json, <stem>.csv and <stem>.png.
void write_report(const MetricsReport& r, const std::filesystem::path& dir,
                  const std::string& stem = "metrics");
MetricsReport load_report(const std::filesystem::path& json_path);

} // namespace separeg::metrics
