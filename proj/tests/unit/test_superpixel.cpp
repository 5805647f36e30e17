// SPDX-License-Identifier: Apache-2.0

#include "support/test.hpp"
#include "support/oracles.hpp"

#include "separeg/errors.hpp"
#include "separeg/superpixel.hpp"

#include <set>

using namespace separeg;
using namespace separeg::superpixel;

namespace {

imaging::ImageSlice slice_of(const ImageF& img) {
    imaging::ImageSlice s;
    s.pixels = img;
    return s;
}

// Labels present in both column ranges [0, edge) and [edge, W).
int labels_spanning(const LabelGrid& labels, int edge) {
    std::set<int> left, right;
    for (int r = 0; r < labels.rows; ++r)
        for (int c = 0; c < labels.cols; ++c)
            (c < edge ? left : right).insert(labels(r, c));
    int n = 0;
    for (int l : left)
        n += right.count(l) ? 1 : 0;
    return n;
}

} // namespace

TEST_SUITE("superpixel") {

TEST_CASE("gradient uses central differences with replicated borders") {
    ImageF img(3, 3);
    float v = 0;
    for (auto& p : img.data)
        p = v++;  // row-major 0..8
    const auto g = gradient_magnitude(img);
    CHECK(g(1, 1) == doctest::Approx(6 + 2));   // |7-1| + |5-3|
    CHECK(g(0, 0) == doctest::Approx(3 + 1));   // |3-0| + |1-0|
    CHECK(g(2, 2) == doctest::Approx(3 + 1));
}

TEST_CASE("raw clustering matches the pixel-by-pixel reference") {
    SlicConfig cfg;
    cfg.n_centers = 16;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto img = oracle::random_image(40, seed);
        const auto got = slic_cluster(img, cfg);
        const auto ref = oracle::reference_slic(img, cfg.n_centers, cfg.compactness, cfg.max_iterations,
                                                cfg.convergence_shift);
        CHECK(got.labels == ref.labels);
    }
}

TEST_CASE("half/half step: no region spans the edge") {
    SlicConfig cfg;
    cfg.n_centers = 16;
    const auto img = oracle::step_image(64, 32, 0.0, 1.0, 0.0, 0);
    const auto ref = oracle::reference_slic(img, 16, cfg.compactness, cfg.max_iterations, cfg.convergence_shift);
    CHECK(labels_spanning(ref.labels, 32) == 0);
    const auto sp = slic_segment(slice_of(img), cfg);
    CHECK(sp.labels == enforce_connectivity(ref.labels, 64));
    CHECK(labels_spanning(sp.labels, 32) == 0);
}

TEST_CASE("uniform image gives the regular 4x4 grid") {
    SlicConfig cfg;
    cfg.n_centers = 16;
    ImageF img(64, 64, 0.5f);
    const auto sp = slic_segment(slice_of(img), cfg);
    REQUIRE(sp.n_regions == 16);
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c)
            CHECK(sp.labels(r, c) == sp.labels((r / 16) * 16, (c / 16) * 16));
    std::set<int> distinct(sp.labels.data.begin(), sp.labels.data.end());
    CHECK(distinct.size() == 16);
}

TEST_CASE("partition, connectivity and non-increasing inertia on random images") {
    SlicConfig cfg;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto img = oracle::random_image(48, 100 + seed);
        const auto sp = slic_segment(slice_of(img), cfg);
        std::set<int> distinct(sp.labels.data.begin(), sp.labels.data.end());
        CHECK(static_cast<int>(distinct.size()) == sp.n_regions);
        CHECK(*distinct.begin() == 0);
        CHECK(*distinct.rbegin() == sp.n_regions - 1);
        CHECK(oracle::labels_connected(sp.labels));
        for (std::size_t i = 1; i < sp.inertia_trace.size(); ++i)
            CHECK(sp.inertia_trace[i] <= sp.inertia_trace[i - 1] + 1e-9);
    }
}

TEST_CASE("small fragments are merged into a neighbour") {
    LabelGrid l(4, 4, 0);
    l(1, 1) = 1;  // single-pixel island
    int n = 0;
    const auto out = enforce_connectivity(l, 2, &n);
    CHECK(n == 1);
    CHECK(out == LabelGrid(4, 4, 0));
}

TEST_CASE("deterministic and counted") {
    const auto img = oracle::random_image(32, 7);
    const auto before = slic_call_count();
    const auto a = slic_segment(slice_of(img), SlicConfig{}, 1);
    const auto b = slic_segment(slice_of(img), SlicConfig{}, 2);
    CHECK(a.labels == b.labels);
    CHECK(slic_call_count() == before + 2);
}

TEST_CASE("invalid settings are rejected") {
    SlicConfig cfg;
    cfg.n_centers = 10;
    CHECK_THROWS_AS(slic_cluster(ImageF(3, 3, 0.f), cfg), ValidationError);
    CHECK_THROWS_AS(slic_cluster(ImageF(2, 8, 0.f), SlicConfig{}), ValidationError);
    cfg = SlicConfig{};
    cfg.compactness = 0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = SlicConfig{};
    cfg.min_region_frac = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

}
