// SPDX-License-Identifier: Apache-2.0
//
// k-means over inter-organ projections and the split of a region set into
// per-cluster subsets.

#pragma once

#include "separeg/checkpoint.hpp"
#include "separeg/regions.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace separeg::cluster {

using Matrix = Eigen::MatrixXd;

/// Eval-mode projector(encoder(x)) of every image, rows in input order.
Matrix embed_images(const std::vector<ImageF>& images, const nets::Checkpoint& inter,
                    int batch_size = 128);

/// Projections of all regions (center resize only, no augmentation).
Matrix embed_regions(const regions::RegionSetManifest& regions, const nets::Checkpoint& inter);

/// Rows scaled to unit l2 norm (zero rows stay zero).
Matrix normalize_rows(const Matrix& z);

struct ClusterModel {
    int k = 0;
    Matrix centroids;            // k x d
    std::vector<int> labels;     // one per row of the clustered matrix
    std::vector<std::string> region_ids;  // parallel to labels when built from a manifest
    double inertia = 0;          // sum of squared distances to assigned centroids
    std::uint64_t seed = 0;
    int restarts = 0;
    int max_iter = 0;
    bool normalized = true;
    int best_restart = 0;
    /// Inertia after every assignment step of the winning restart.
    std::vector<double> inertia_trace;

    std::vector<int> cluster_sizes() const;
};

/// k-means++ seeding, Lloyd iterations to an assignment fixpoint (or max_iter),
/// best of `restarts` by inertia. Ties go to the lowest centroid index; an
/// emptied cluster takes the point farthest from its current centroid.
ClusterModel kmeans(const Matrix& z, int k, std::uint64_t seed, int restarts = 100,
                    int max_iter = 300);

/// Sum of squared distances of each row to its assigned centroid.
double inertia_of(const Matrix& z, const Matrix& centroids, const std::vector<int>& labels);

nlohmann::json to_json(const ClusterModel& m);
ClusterModel cluster_model_from_json(const nlohmann::json& j);
void save_cluster_model(const ClusterModel& m, const std::filesystem::path& path);
ClusterModel load_cluster_model(const std::filesystem::path& path);

struct ClusterOptions {
    int k = 5;
    std::uint64_t seed = 0;
    int restarts = 100;
    int max_iter = 300;
    bool normalize = true;
};

/// Embeds and clusters a region set; labels follow manifest order.
ClusterModel cluster_regions(const regions::RegionSetManifest& regions, const nets::Checkpoint& inter,
                             const ClusterOptions& opts);

struct SplitResult {
    /// Input manifest with cluster_id filled in.
    regions::RegionSetManifest labelled;
    /// One manifest per cluster, in manifest order.
    std::vector<regions::RegionSetManifest> subsets;
};

/// Partitions the manifest by cluster. With a non-empty out_dir the labelled
/// manifest is saved as regions.jsonl and subsets as cluster_<k>.jsonl there.
SplitResult split_region_set(const regions::RegionSetManifest& regions, const ClusterModel& cm,
                             const std::filesystem::path& out_dir = {});

/// Fraction of labelled regions whose gt_label equals their cluster's majority
/// gt_label. Regions without gt_label are ignored.
double cluster_purity(const regions::RegionSetManifest& labelled);

} // namespace separeg::cluster
