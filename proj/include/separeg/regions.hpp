// SPDX-License-Identifier: Apache-2.0
//
// Region crops and the shuffled region set.
//
// On disk a region set is a directory holding
//   crops/<id>.png        16-bit grayscale crop (zero outside the region)
//   crops/<id>_mask.png   8-bit foreground mask (0 / 255)
//   regions.jsonl         one record per line, in shuffled order
//   regions.meta.json     shuffle seed and separation settings
//
// Record fields: id, crop, mask (paths relative to the manifest), patient_id,
// axis, slice_index, superpixel_id, bbox [r0, c0, r1, c1) half-open, cluster_id
// (null until clustering), gt_label (majority ground-truth label, null when the
// source slice has no mask).

#pragma once

#include "separeg/grid.hpp"
#include "separeg/imaging_io.hpp"
#include "separeg/superpixel.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace separeg::regions {

/// Half-open bounding box [r0, r1) x [c0, c1) in source coordinates.
struct BBox {
    int r0 = 0;
    int c0 = 0;
    int r1 = 0;
    int c1 = 0;

    int height() const { return r1 - r0; }
    int width() const { return c1 - c0; }
    friend bool operator==(const BBox&, const BBox&) = default;
};

struct RegionRecord {
    /// Square crop of side max(bbox height, bbox width); the bbox content sits
    /// centered and every pixel outside `foreground` is exactly zero.
    ImageF crop;
    Mask2D foreground;
    imaging::SliceSource source;
    int superpixel_id = 0;
    BBox bbox;
    std::optional<int> cluster_id;
    std::optional<int> gt_label;

    /// Top-left of the bbox inside the crop.
    int offset_row() const { return (crop.rows - bbox.height()) / 2; }
    int offset_col() const { return (crop.cols - bbox.width()) / 2; }
};

/// One record per label of `sp`.
std::vector<RegionRecord> extract_regions(const imaging::ImageSlice& img,
                                          const superpixel::SuperpixelLabelMap& sp);

/// grid x grid tiles with full foreground; trailing tiles absorb the remainder.
std::vector<RegionRecord> regular_separation(const imaging::ImageSlice& img, int grid);

/// The whole slice as one region (no separation).
RegionRecord whole_image_region(const imaging::ImageSlice& img);

struct RegionEntry {
    std::string id;
    std::filesystem::path crop_path;
    std::filesystem::path mask_path;
    imaging::SliceSource source;
    int superpixel_id = 0;
    BBox bbox;
    std::optional<int> cluster_id;
    std::optional<int> gt_label;

    friend bool operator==(const RegionEntry&, const RegionEntry&) = default;
};

struct RegionSetManifest {
    /// Directory crop paths are relative to.
    std::filesystem::path root;
    std::vector<RegionEntry> records;
    std::uint64_t shuffle_seed = 0;
    nlohmann::json separation = nlohmann::json::object();

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
};

nlohmann::json entry_to_json(const RegionEntry& e);
RegionEntry entry_from_json(const nlohmann::json& j);

/// Writes `records` under `out_dir`, shuffled by `shuffle_seed`, and returns the manifest.
RegionSetManifest write_region_set(std::vector<RegionRecord> records, std::uint64_t shuffle_seed,
                                   const std::filesystem::path& out_dir,
                                   nlohmann::json separation);

/// Structure-aware separation: SLIC on every slice, crops of every superpixel.
RegionSetManifest build_region_set(const std::vector<imaging::ImageSlice>& slices,
                                   const superpixel::SlicConfig& cfg, std::uint64_t shuffle_seed,
                                   const std::filesystem::path& out_dir);

RegionSetManifest build_regular_region_set(const std::vector<imaging::ImageSlice>& slices, int grid,
                                           std::uint64_t shuffle_seed,
                                           const std::filesystem::path& out_dir);

RegionSetManifest build_full_image_region_set(const std::vector<imaging::ImageSlice>& slices,
                                              std::uint64_t shuffle_seed,
                                              const std::filesystem::path& out_dir);

/// Writes `<path>` (JSON lines) and the `.meta.json` sidecar next to it.
void save_region_manifest(const RegionSetManifest& m, const std::filesystem::path& path);
RegionSetManifest load_region_manifest(const std::filesystem::path& path);

/// Crop resized (bilinear) to size x size.
ImageF load_region_image(const RegionSetManifest& m, const RegionEntry& e, int size);

/// All crops of the manifest resized to size x size, in manifest order.
std::vector<ImageF> load_region_images(const RegionSetManifest& m, int size);

} // namespace separeg::regions
