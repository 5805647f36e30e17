// SPDX-License-Identifier: Apache-2.0

#include "separeg/imaging_io.hpp"

#include "separeg/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <map>

namespace separeg::imaging {

using nlohmann::json;
namespace fs = std::filesystem;

void Volume::validate() const {
    for (int d = 0; d < 3; ++d) {
        if (shape[d] <= 0)
            throw ValidationError("volume shape must be positive, got axis " + std::to_string(d) +
                                  " = " + std::to_string(shape[d]));
        if (!(spacing[d] > 0.0))
            throw ValidationError("volume spacing must be positive on axis " + std::to_string(d));
    }
    if (patient_id.empty())
        throw ValidationError("volume patient_id is empty");
    if (voxels.size() != voxel_count())
        throw ValidationError("voxel buffer holds " + std::to_string(voxels.size()) +
                              " values, shape implies " + std::to_string(voxel_count()));
    if (mask && mask->size() != voxel_count())
        throw ValidationError("mask holds " + std::to_string(mask->size()) +
                              " labels, shape implies " + std::to_string(voxel_count()));
}

void save_volume(const Volume& v, const fs::path& path) {
    v.validate();
    json header = {
        {"dtype", "int16"},
        {"has_mask", v.mask.has_value()},
        {"patient_id", v.patient_id},
        {"shape", v.shape},
        {"spacing", v.spacing},
    };
    if (v.mask)
        header["mask_shape"] = v.shape;

    std::string bytes = header.dump();
    bytes.push_back('\n');
    bytes.reserve(bytes.size() + v.voxel_count() * 3);
    for (std::int16_t x : v.voxels) {
        const auto u = static_cast<std::uint16_t>(x);
        bytes.push_back(static_cast<char>(u & 0xFF));
        bytes.push_back(static_cast<char>(u >> 8));
    }
    if (v.mask)
        bytes.append(reinterpret_cast<const char*>(v.mask->data()), v.mask->size());

    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IoError("write failed: " + path.string());
}

namespace {

template <typename T>
T header_field(const json& header, const char* name, const fs::path& path) {
    if (!header.contains(name))
        throw FormatError(path.string() + ": header field '" + name + "' is missing");
    try {
        return header.at(name).get<T>();
    } catch (const json::exception&) {
        throw FormatError(path.string() + ": header field '" + name + "' has the wrong type");
    }
}

} // namespace

Volume load_volume(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open volume: " + path.string());
    std::string header_line;
    if (!std::getline(in, header_line))
        throw FormatError(path.string() + ": empty file, expected a JSON header line");

    json header;
    try {
        header = json::parse(header_line);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": header is not valid JSON (" + e.what() + ")");
    }
    if (!header.is_object())
        throw FormatError(path.string() + ": header is not a JSON object");

    const auto dtype = header_field<std::string>(header, "dtype", path);
    if (dtype != "int16")
        throw FormatError(path.string() + ": header field 'dtype' must be \"int16\", got \"" +
                          dtype + "\"");

    Volume v;
    v.shape = header_field<std::array<int, 3>>(header, "shape", path);
    v.spacing = header_field<std::array<double, 3>>(header, "spacing", path);
    v.patient_id = header_field<std::string>(header, "patient_id", path);
    const bool has_mask = header_field<bool>(header, "has_mask", path);
    for (int d = 0; d < 3; ++d)
        if (v.shape[d] <= 0)
            throw FormatError(path.string() + ": header field 'shape' must be positive");

    if (has_mask && header.contains("mask_shape")) {
        const auto mask_shape = header_field<std::array<int, 3>>(header, "mask_shape", path);
        if (mask_shape != v.shape)
            throw ValidationError(path.string() + ": mask shape [" + std::to_string(mask_shape[0]) +
                                  "," + std::to_string(mask_shape[1]) + "," +
                                  std::to_string(mask_shape[2]) + "] does not match voxel shape [" +
                                  std::to_string(v.shape[0]) + "," + std::to_string(v.shape[1]) +
                                  "," + std::to_string(v.shape[2]) + "]");
    }

    const std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t n = v.voxel_count();
    const std::size_t expected = n * 2 + (has_mask ? n : 0);
    if (payload.size() < expected)
        throw FormatError(path.string() + ": truncated payload, expected " +
                          std::to_string(expected) + " bytes, found " +
                          std::to_string(payload.size()));
    if (payload.size() > expected)
        throw FormatError(path.string() + ": " + std::to_string(payload.size() - expected) +
                          " trailing bytes after payload");

    v.voxels.resize(n);
    const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
    for (std::size_t i = 0; i < n; ++i) {
        const auto u = static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8));
        v.voxels[i] = static_cast<std::int16_t>(u);
    }
    if (has_mask)
        v.mask.emplace(p + 2 * n, p + 3 * n);

    v.validate();
    return v;
}

std::vector<ImageSlice> extract_slices(const Volume& v, int axis, IntensityWindow window) {
    if (axis < 0 || axis > 2)
        throw ValidationError("slice axis must be 0, 1 or 2");
    if (!(window.lo < window.hi))
        throw ValidationError("intensity window requires lo < hi");
    v.validate();

    // The two remaining axes, in increasing order, become (rows, cols).
    const int row_axis = axis == 0 ? 1 : 0;
    const int col_axis = axis == 2 ? 1 : 2;
    const int rows = v.shape[row_axis];
    const int cols = v.shape[col_axis];
    const double scale = 1.0 / (window.hi - window.lo);

    std::vector<ImageSlice> out;
    out.reserve(v.shape[axis]);
    for (int s = 0; s < v.shape[axis]; ++s) {
        ImageSlice slice;
        slice.source = {v.patient_id, axis, s};
        slice.pixels = ImageF(rows, cols);
        if (v.mask)
            slice.mask = Mask2D(rows, cols);
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                std::array<int, 3> idx{};
                idx[axis] = s;
                idx[row_axis] = r;
                idx[col_axis] = c;
                const std::size_t at = v.index(idx[0], idx[1], idx[2]);
                const double hu = std::clamp(static_cast<double>(v.voxels[at]), window.lo, window.hi);
                slice.pixels(r, c) = static_cast<float>((hu - window.lo) * scale);
                if (v.mask)
                    (*slice.mask)(r, c) = (*v.mask)[at];
            }
        }
        out.push_back(std::move(slice));
    }
    return out;
}

Grid3D<std::uint8_t> mask_grid(const Volume& v) {
    Grid3D<std::uint8_t> g(v.shape, 0);
    if (v.mask)
        g.data = *v.mask;
    return g;
}

std::string to_string(Split s) {
    switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "pretrain";
}

Split split_from_string(const std::string& s) {
    if (s == "pretrain") return Split::pretrain;
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split tag '" + s + "'");
}

std::vector<fs::path> DatasetManifest::paths(Split s) const {
    std::vector<fs::path> out;
    for (const auto& e : entries)
        if (e.split == s)
            out.push_back(e.path.is_absolute() ? e.path : root / e.path);
    return out;
}

std::vector<fs::path> DatasetManifest::pretraining_pool() const {
    std::vector<fs::path> out;
    for (const auto& e : entries)
        if (e.split != Split::test)
            out.push_back(e.path.is_absolute() ? e.path : root / e.path);
    return out;
}

void save_dataset_manifest(const DatasetManifest& m, const fs::path& path) {
    json arr = json::array();
    for (const auto& e : m.entries)
        arr.push_back({{"path", e.path.generic_string()}, {"split", to_string(e.split)}});
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoError("cannot open for writing: " + path.string());
    out << arr.dump(2) << '\n';
}

DatasetManifest load_dataset_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open dataset manifest: " + path.string());
    json arr;
    try {
        in >> arr;
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (!arr.is_array())
        throw FormatError(path.string() + ": dataset manifest must be a JSON array");
    DatasetManifest m;
    m.root = path.parent_path();
    for (const auto& item : arr) {
        if (!item.contains("path") || !item.contains("split"))
            throw FormatError(path.string() + ": every entry needs 'path' and 'split'");
        m.entries.push_back({item.at("path").get<std::string>(),
                             split_from_string(item.at("split").get<std::string>())});
    }
    return m;
}

void check_disjoint_splits(const DatasetManifest& m) {
    std::map<std::string, Split> seen;
    for (const auto& e : m.entries) {
        const auto key = fs::weakly_canonical(e.path.is_absolute() ? e.path : m.root / e.path).string();
        auto [it, inserted] = seen.emplace(key, e.split);
        if (!inserted && it->second != e.split)
            throw ValidationError("split overlap: " + key + " is tagged both " +
                                  to_string(it->second) + " and " + to_string(e.split));
    }
}

} // namespace separeg::imaging
