// SPDX-License-Identifier: Apache-2.0

#include "separeg/synthetic.hpp"

#include "separeg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace separeg::imaging {

using nlohmann::json;
namespace fs = std::filesystem;

void SyntheticSpec::validate() const {
    if (image_size < 8)
        throw ValidationError("synthetic image_size must be at least 8");
    if (depth < 1)
        throw ValidationError("synthetic depth must be at least 1");
    if (n_organ_classes < 1)
        throw ValidationError("synthetic n_organ_classes must be at least 1");
    if (n_organ_classes > 254)
        throw ValidationError("synthetic n_organ_classes must fit a uint8 label");
    if (shapes_per_image < 1)
        throw ValidationError("synthetic shapes_per_image must be at least 1");
    if (static_cast<int>(intensity_ranges.size()) != n_organ_classes)
        throw ValidationError("synthetic intensity_ranges needs one band per organ class");
    if (static_cast<int>(radius_ranges.size()) != n_organ_classes)
        throw ValidationError("synthetic radius_ranges needs one entry per organ class");
    if (noise_sigma < 0.0)
        throw ValidationError("synthetic noise_sigma must be non-negative");
    if (min_gap < 0.0)
        throw ValidationError("synthetic min_gap must be non-negative");
    if (!(window.lo < window.hi))
        throw ValidationError("synthetic window requires lo < hi");

    std::vector<std::pair<double, double>> bands = intensity_ranges;
    bands.push_back(background_range);
    for (const auto& [lo, hi] : bands)
        if (lo < 0.0 || hi > 1.0 || lo > hi)
            throw ValidationError("synthetic intensity band must satisfy 0 <= lo <= hi <= 1");
    for (const auto& [lo, hi] : radius_ranges)
        if (!(lo > 0.0) || lo > hi)
            throw ValidationError("synthetic radius range must satisfy 0 < lo <= hi");

    std::sort(bands.begin(), bands.end());
    for (std::size_t i = 1; i < bands.size(); ++i)
        if (bands[i].first - bands[i - 1].second < min_gap)
            throw ValidationError("synthetic intensity bands overlap or are closer than min_gap");
}

void to_json(json& j, const SyntheticSpec& s) {
    j = json{
        {"image_size", s.image_size},
        {"depth", s.depth},
        {"n_organ_classes", s.n_organ_classes},
        {"shapes_per_image", s.shapes_per_image},
        {"intensity_ranges", s.intensity_ranges},
        {"background_range", s.background_range},
        {"radius_ranges", s.radius_ranges},
        {"noise_sigma", s.noise_sigma},
        {"min_gap", s.min_gap},
        {"window", {s.window.lo, s.window.hi}},
        {"spacing", s.spacing},
        {"seed", s.seed},
    };
}

void from_json(const json& j, SyntheticSpec& s) {
    SyntheticSpec d;
    s.image_size = j.value("image_size", d.image_size);
    s.depth = j.value("depth", d.depth);
    s.n_organ_classes = j.value("n_organ_classes", d.n_organ_classes);
    s.shapes_per_image = j.value("shapes_per_image", d.shapes_per_image);
    s.intensity_ranges = j.value("intensity_ranges", d.intensity_ranges);
    s.background_range = j.value("background_range", d.background_range);
    s.radius_ranges = j.value("radius_ranges", d.radius_ranges);
    s.noise_sigma = j.value("noise_sigma", d.noise_sigma);
    s.min_gap = j.value("min_gap", d.min_gap);
    if (j.contains("window")) {
        const auto w = j.at("window").get<std::array<double, 2>>();
        s.window = {w[0], w[1]};
    } else {
        s.window = d.window;
    }
    s.spacing = j.value("spacing", d.spacing);
    s.seed = j.value("seed", d.seed);
}

namespace {

struct Ellipsoid {
    double ci, cj, ck;
    double a, b, c;
    double cos_t, sin_t;
    double intensity;
    std::uint8_t label;

    bool contains(int i, int j, int k) const {
        const double di = i - ci;
        const double dj = j - cj;
        const double u = cos_t * di + sin_t * dj;
        const double v = -sin_t * di + cos_t * dj;
        const double w = k - ck;
        return (u * u) / (a * a) + (v * v) / (b * b) + (w * w) / (c * c) <= 1.0;
    }
};

Volume generate_one(const SyntheticSpec& spec, int index) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed & 0xFFFFFFFFu),
                      static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(index)};
    std::mt19937_64 rng(seq);
    auto uniform = [&rng](double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(rng);
    };

    const int n = spec.image_size;
    const int depth = spec.depth;
    const std::array<int, 3> shape{n, n, depth};
    const double background = uniform(spec.background_range.first, spec.background_range.second);

    std::vector<Ellipsoid> organs;
    for (int s = 0; s < spec.shapes_per_image; ++s) {
        const int cls = s % spec.n_organ_classes + 1;
        const auto [rlo, rhi] = spec.radius_ranges[cls - 1];
        const auto [ilo, ihi] = spec.intensity_ranges[cls - 1];
        Ellipsoid e{};
        e.a = uniform(rlo, rhi);
        e.b = uniform(rlo, rhi);
        e.c = uniform(0.5 * depth, 1.0 * depth);
        const double margin = std::min(std::max(e.a, e.b), 0.5 * n - 1.0);
        e.ci = uniform(margin, n - 1 - margin);
        e.cj = uniform(margin, n - 1 - margin);
        e.ck = uniform(0.25 * (depth - 1), 0.75 * (depth - 1));
        const double theta = uniform(0.0, std::numbers::pi);
        e.cos_t = std::cos(theta);
        e.sin_t = std::sin(theta);
        e.intensity = uniform(ilo, ihi);
        e.label = static_cast<std::uint8_t>(cls);
        organs.push_back(e);
    }

    Volume v;
    v.shape = shape;
    v.spacing = spec.spacing;
    v.patient_id = "synth_" + std::to_string(spec.seed) + "_" + std::to_string(index);
    v.voxels.resize(v.voxel_count());
    v.mask.emplace(v.voxel_count(), 0);

    std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma : 1.0);
    const double span = spec.window.hi - spec.window.lo;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            for (int k = 0; k < depth; ++k) {
                double value = background;
                std::uint8_t label = 0;
                // Later organs are painted over earlier ones.
                for (const auto& e : organs) {
                    if (e.contains(i, j, k)) {
                        value = e.intensity;
                        label = e.label;
                    }
                }
                if (spec.noise_sigma > 0.0)
                    value = std::clamp(value + noise(rng), 0.0, 1.0);
                const std::size_t at = v.index(i, j, k);
                v.voxels[at] = static_cast<std::int16_t>(std::lround(spec.window.lo + value * span));
                (*v.mask)[at] = label;
            }
        }
    }
    return v;
}

} // namespace

std::vector<Volume> generate_synthetic_dataset(const SyntheticSpec& spec, int n_volumes) {
    spec.validate();
    if (n_volumes < 1)
        throw ValidationError("n_volumes must be at least 1");
    std::vector<Volume> out;
    out.reserve(n_volumes);
    for (int i = 0; i < n_volumes; ++i)
        out.push_back(generate_one(spec, i));
    return out;
}

DatasetManifest write_synthetic_dataset(const SyntheticSpec& spec, SplitCounts counts,
                                        const fs::path& dir) {
    if (counts.train < 0 || counts.val < 0 || counts.test < 0 || counts.pretrain < 0 ||
        counts.total() < 1)
        throw ValidationError("split counts must be non-negative with at least one volume");
    const auto volumes = generate_synthetic_dataset(spec, counts.total());

    DatasetManifest m;
    m.root = dir;
    std::size_t next = 0;
    auto take = [&](int count, Split split) {
        for (int i = 0; i < count; ++i, ++next) {
            const fs::path rel = volumes[next].patient_id + ".vol";
            save_volume(volumes[next], dir / rel);
            m.entries.push_back({rel, split});
        }
    };
    take(counts.train, Split::train);
    take(counts.val, Split::val);
    take(counts.test, Split::test);
    take(counts.pretrain, Split::pretrain);
    save_dataset_manifest(m, dir / "dataset.json");
    return m;
}

} // namespace separeg::imaging
