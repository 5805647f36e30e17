// SPDX-License-Identifier: Apache-2.0
//
// Volume container, slice extraction, and dataset manifests.
//
// Volume file layout (little-endian throughout):
//
//   line 1    single-line JSON header terminated by '\n':
//             {"dtype":"int16","has_mask":bool,"mask_shape":[..] (when has_mask),
//              "patient_id":str,"shape":[d0,d1,d2],"spacing":[s0,s1,s2]}
//   payload   d0*d1*d2 int16 voxels, index (i*d1 + j)*d2 + k
//             followed, when has_mask, by d0*d1*d2 uint8 labels in the same order
//
// The header is written with sorted keys so identical volumes give identical bytes.

#pragma once

#include "separeg/grid.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace separeg::imaging {

struct Volume {
    std::array<int, 3> shape{0, 0, 0};
    std::vector<std::int16_t> voxels;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::string patient_id;
    std::optional<std::vector<std::uint8_t>> mask;

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
    }
    std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k;
    }

    /// Throws ValidationError when shape, spacing, id or mask size are inconsistent.
    void validate() const;

    friend bool operator==(const Volume&, const Volume&) = default;
};

struct SliceSource {
    std::string patient_id;
    int axis = 2;
    int index = 0;

    friend bool operator==(const SliceSource&, const SliceSource&) = default;
};

/// A 2D slice with pixels in [0,1].
struct ImageSlice {
    ImageF pixels;
    SliceSource source;
    std::optional<Mask2D> mask;
};

/// Intensity window applied before mapping to [0,1].
struct IntensityWindow {
    double lo = -200.0;
    double hi = 300.0;
};

void save_volume(const Volume& v, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);

/// One slice per index along `axis`; intensities clamped to the window and mapped to [0,1].
std::vector<ImageSlice> extract_slices(const Volume& v, int axis, IntensityWindow window);

/// Label volume as a grid (zeros when the volume carries no mask).
Grid3D<std::uint8_t> mask_grid(const Volume& v);

// ---------------------------------------------------------------------------
// Dataset manifest: a JSON array of {"path": <volume file>, "split": <tag>}.
// Relative paths resolve against the manifest's directory.

enum class Split { pretrain, train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct DatasetEntry {
    std::filesystem::path path;
    Split split = Split::pretrain;
};

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<DatasetEntry> entries;

    std::vector<std::filesystem::path> paths(Split s) const;
    /// Every volume not reserved for testing; the pool pretraining draws from.
    std::vector<std::filesystem::path> pretraining_pool() const;
};

void save_dataset_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_dataset_manifest(const std::filesystem::path& path);

/// Rejects manifests that tag the same file with two different splits.
void check_disjoint_splits(const DatasetManifest& m);

} // namespace separeg::imaging
