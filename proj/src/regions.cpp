// SPDX-License-Identifier: Apache-2.0

#include "separeg/regions.hpp"

#include "separeg/errors.hpp"
#include "separeg/image_ops.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

namespace separeg::regions {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::optional<int> majority_label(const imaging::ImageSlice& img, const Mask2D& fg, BBox box,
                                  int off_r, int off_c) {
    if (!img.mask)
        return std::nullopt;
    std::map<int, long> votes;
    for (int r = box.r0; r < box.r1; ++r)
        for (int c = box.c0; c < box.c1; ++c)
            if (fg(r - box.r0 + off_r, c - box.c0 + off_c))
                ++votes[(*img.mask)(r, c)];
    if (votes.empty())
        return std::nullopt;
    int best = votes.begin()->first;
    long best_count = votes.begin()->second;
    for (const auto& [label, count] : votes)
        if (count > best_count) {
            best = label;
            best_count = count;
        }
    return best;
}

/// Square zero-padded crop of `box`, keeping pixels where `keep(r, c)` holds.
template <typename Keep>
RegionRecord make_record(const imaging::ImageSlice& img, BBox box, int id, Keep keep) {
    const int side = std::max(box.height(), box.width());
    RegionRecord rec;
    rec.crop = ImageF(side, side, 0.0f);
    rec.foreground = Mask2D(side, side, 0);
    rec.source = img.source;
    rec.superpixel_id = id;
    rec.bbox = box;
    const int off_r = rec.offset_row();
    const int off_c = rec.offset_col();
    for (int r = box.r0; r < box.r1; ++r)
        for (int c = box.c0; c < box.c1; ++c)
            if (keep(r, c)) {
                rec.crop(r - box.r0 + off_r, c - box.c0 + off_c) = img.pixels(r, c);
                rec.foreground(r - box.r0 + off_r, c - box.c0 + off_c) = 1;
            }
    rec.gt_label = majority_label(img, rec.foreground, box, off_r, off_c);
    return rec;
}

std::string record_id(const RegionRecord& r) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "_a%d_s%04d_r%03d", r.source.axis, r.source.index,
                  r.superpixel_id);
    return r.source.patient_id + buf;
}

} // namespace

std::vector<RegionRecord> extract_regions(const imaging::ImageSlice& img,
                                          const superpixel::SuperpixelLabelMap& sp) {
    if (!img.pixels.same_shape(sp.labels))
        throw ValidationError("label map shape does not match the image");
    std::vector<BBox> boxes(sp.n_regions, BBox{img.pixels.rows, img.pixels.cols, -1, -1});
    for (int r = 0; r < img.pixels.rows; ++r)
        for (int c = 0; c < img.pixels.cols; ++c) {
            const int l = sp.labels(r, c);
            if (l < 0 || l >= sp.n_regions)
                throw ValidationError("label " + std::to_string(l) + " outside [0, n_regions)");
            BBox& b = boxes[l];
            b.r0 = std::min(b.r0, r);
            b.c0 = std::min(b.c0, c);
            b.r1 = std::max(b.r1, r + 1);
            b.c1 = std::max(b.c1, c + 1);
        }

    std::vector<RegionRecord> out;
    out.reserve(sp.n_regions);
    for (int l = 0; l < sp.n_regions; ++l) {
        if (boxes[l].r1 < 0)
            throw ValidationError("label " + std::to_string(l) + " owns no pixels");
        out.push_back(make_record(img, boxes[l], l,
                                  [&](int r, int c) { return sp.labels(r, c) == l; }));
    }
    return out;
}

std::vector<RegionRecord> regular_separation(const imaging::ImageSlice& img, int grid) {
    if (grid < 1)
        throw ValidationError("regular separation needs grid >= 1");
    const int rows = img.pixels.rows;
    const int cols = img.pixels.cols;
    if (grid > rows || grid > cols)
        throw ValidationError("regular separation grid exceeds the image size");
    const int th = rows / grid;
    const int tw = cols / grid;
    std::vector<RegionRecord> out;
    out.reserve(static_cast<std::size_t>(grid) * grid);
    for (int i = 0; i < grid; ++i)
        for (int j = 0; j < grid; ++j) {
            BBox box{i * th, j * tw, i == grid - 1 ? rows : (i + 1) * th,
                     j == grid - 1 ? cols : (j + 1) * tw};
            out.push_back(make_record(img, box, i * grid + j, [](int, int) { return true; }));
        }
    return out;
}

RegionRecord whole_image_region(const imaging::ImageSlice& img) {
    return make_record(img, BBox{0, 0, img.pixels.rows, img.pixels.cols}, 0,
                       [](int, int) { return true; });
}

json entry_to_json(const RegionEntry& e) {
    return json{
        {"id", e.id},
        {"crop", e.crop_path.generic_string()},
        {"mask", e.mask_path.generic_string()},
        {"patient_id", e.source.patient_id},
        {"axis", e.source.axis},
        {"slice_index", e.source.index},
        {"superpixel_id", e.superpixel_id},
        {"bbox", {e.bbox.r0, e.bbox.c0, e.bbox.r1, e.bbox.c1}},
        {"cluster_id", e.cluster_id ? json(*e.cluster_id) : json(nullptr)},
        {"gt_label", e.gt_label ? json(*e.gt_label) : json(nullptr)},
    };
}

RegionEntry entry_from_json(const json& j) {
    RegionEntry e;
    try {
        e.id = j.at("id").get<std::string>();
        e.crop_path = j.at("crop").get<std::string>();
        e.mask_path = j.at("mask").get<std::string>();
        e.source.patient_id = j.at("patient_id").get<std::string>();
        e.source.axis = j.at("axis").get<int>();
        e.source.index = j.at("slice_index").get<int>();
        e.superpixel_id = j.at("superpixel_id").get<int>();
        const auto b = j.at("bbox").get<std::array<int, 4>>();
        e.bbox = {b[0], b[1], b[2], b[3]};
        if (j.contains("cluster_id") && !j.at("cluster_id").is_null())
            e.cluster_id = j.at("cluster_id").get<int>();
        if (j.contains("gt_label") && !j.at("gt_label").is_null())
            e.gt_label = j.at("gt_label").get<int>();
    } catch (const json::exception& ex) {
        throw FormatError(std::string("region record: ") + ex.what());
    }
    return e;
}

RegionSetManifest write_region_set(std::vector<RegionRecord> records, std::uint64_t shuffle_seed,
                                   const fs::path& out_dir, json separation) {
    RegionSetManifest m;
    m.root = out_dir;
    m.shuffle_seed = shuffle_seed;
    m.separation = std::move(separation);
    fs::create_directories(out_dir / "crops");

    std::vector<RegionEntry> entries;
    entries.reserve(records.size());
    for (const auto& rec : records) {
        RegionEntry e;
        e.id = record_id(rec);
        e.crop_path = fs::path("crops") / (e.id + ".png");
        e.mask_path = fs::path("crops") / (e.id + "_mask.png");
        e.source = rec.source;
        e.superpixel_id = rec.superpixel_id;
        e.bbox = rec.bbox;
        e.cluster_id = rec.cluster_id;
        e.gt_label = rec.gt_label;
        write_png16(rec.crop, out_dir / e.crop_path);
        write_mask_png(rec.foreground, out_dir / e.mask_path);
        entries.push_back(std::move(e));
    }

    std::mt19937_64 rng(shuffle_seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    m.records = std::move(entries);
    save_region_manifest(m, out_dir / "regions.jsonl");
    return m;
}

RegionSetManifest build_region_set(const std::vector<imaging::ImageSlice>& slices,
                                   const superpixel::SlicConfig& cfg, std::uint64_t shuffle_seed,
                                   const fs::path& out_dir) {
    if (slices.empty())
        throw ValidationError("build_region_set needs at least one slice");
    std::vector<RegionRecord> all;
    for (const auto& s : slices) {
        const auto sp = superpixel::slic_segment(s, cfg, shuffle_seed);
        auto recs = extract_regions(s, sp);
        std::move(recs.begin(), recs.end(), std::back_inserter(all));
    }
    return write_region_set(std::move(all), shuffle_seed, out_dir,
                            json{{"strategy", "sis"}, {"slic", cfg}});
}

RegionSetManifest build_regular_region_set(const std::vector<imaging::ImageSlice>& slices, int grid,
                                           std::uint64_t shuffle_seed, const fs::path& out_dir) {
    if (slices.empty())
        throw ValidationError("build_regular_region_set needs at least one slice");
    std::vector<RegionRecord> all;
    for (const auto& s : slices) {
        auto recs = regular_separation(s, grid);
        std::move(recs.begin(), recs.end(), std::back_inserter(all));
    }
    return write_region_set(std::move(all), shuffle_seed, out_dir,
                            json{{"strategy", "regular"}, {"grid", grid}});
}

RegionSetManifest build_full_image_region_set(const std::vector<imaging::ImageSlice>& slices,
                                              std::uint64_t shuffle_seed, const fs::path& out_dir) {
    if (slices.empty())
        throw ValidationError("build_full_image_region_set needs at least one slice");
    std::vector<RegionRecord> all;
    all.reserve(slices.size());
    for (const auto& s : slices)
        all.push_back(whole_image_region(s));
    return write_region_set(std::move(all), shuffle_seed, out_dir, json{{"strategy", "none"}});
}

namespace {

fs::path meta_path(const fs::path& manifest) {
    fs::path p = manifest;
    p.replace_extension(".meta.json");
    return p;
}

} // namespace

void save_region_manifest(const RegionSetManifest& m, const fs::path& path) {
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    // Paths are stored relative to the manifest's own directory.
    const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    std::string text;
    for (const auto& e : m.records) {
        RegionEntry rel = e;
        rel.crop_path = fs::proximate(m.root / e.crop_path, dir);
        rel.mask_path = fs::proximate(m.root / e.mask_path, dir);
        text += entry_to_json(rel).dump();
        text += '\n';
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open for writing: " + path.string());
    out << text;

    std::ofstream meta(meta_path(path), std::ios::binary | std::ios::trunc);
    if (!meta)
        throw IoError("cannot open for writing: " + meta_path(path).string());
    meta << json{{"count", m.records.size()},
                 {"shuffle_seed", m.shuffle_seed},
                 {"separation", m.separation}}
                .dump(2)
         << '\n';
}

RegionSetManifest load_region_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open region manifest: " + path.string());
    RegionSetManifest m;
    m.root = path.has_parent_path() ? path.parent_path() : fs::path(".");
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            continue;
        try {
            m.records.push_back(entry_from_json(json::parse(line)));
        } catch (const json::parse_error& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    std::ifstream meta(meta_path(path));
    if (meta) {
        try {
            const json j = json::parse(meta);
            m.shuffle_seed = j.value("shuffle_seed", std::uint64_t{0});
            m.separation = j.value("separation", json::object());
        } catch (const json::exception& e) {
            throw FormatError(meta_path(path).string() + ": " + e.what());
        }
    }
    return m;
}

ImageF load_region_image(const RegionSetManifest& m, const RegionEntry& e, int size) {
    return resize_bilinear(read_png16(m.root / e.crop_path), size, size);
}

std::vector<ImageF> load_region_images(const RegionSetManifest& m, int size) {
    std::vector<ImageF> out;
    out.reserve(m.records.size());
    for (const auto& e : m.records)
        out.push_back(load_region_image(m, e, size));
    return out;
}

} // namespace separeg::regions
