// SPDX-License-Identifier: Apache-2.0

#include "separeg/superpixel.hpp"

#include "separeg/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

namespace separeg::superpixel {

using nlohmann::json;

void SlicConfig::validate() const {
    if (n_centers < 1)
        throw ValidationError("SLIC n_centers must be at least 1");
    if (!(compactness > 0.0))
        throw ValidationError("SLIC compactness must be positive");
    if (max_iterations < 1)
        throw ValidationError("SLIC max_iterations must be at least 1");
    if (convergence_shift < 0.0)
        throw ValidationError("SLIC convergence_shift must be non-negative");
    if (min_region_frac < 0.0 || min_region_frac >= 1.0)
        throw ValidationError("SLIC min_region_frac must lie in [0, 1)");
}

void to_json(json& j, const SlicConfig& c) {
    j = json{{"n_centers", c.n_centers},
             {"compactness", c.compactness},
             {"max_iterations", c.max_iterations},
             {"convergence_shift", c.convergence_shift},
             {"min_region_frac", c.min_region_frac}};
}

void from_json(const json& j, SlicConfig& c) {
    const SlicConfig d;
    c.n_centers = j.value("n_centers", d.n_centers);
    c.compactness = j.value("compactness", d.compactness);
    c.max_iterations = j.value("max_iterations", d.max_iterations);
    c.convergence_shift = j.value("convergence_shift", d.convergence_shift);
    c.min_region_frac = j.value("min_region_frac", d.min_region_frac);
}

ImageF gradient_magnitude(const ImageF& img) {
    ImageF g(img.rows, img.cols);
    for (int r = 0; r < img.rows; ++r) {
        const int up = std::max(r - 1, 0);
        const int down = std::min(r + 1, img.rows - 1);
        for (int c = 0; c < img.cols; ++c) {
            const int left = std::max(c - 1, 0);
            const int right = std::min(c + 1, img.cols - 1);
            g(r, c) = std::abs(img(down, c) - img(up, c)) + std::abs(img(r, right) - img(r, left));
        }
    }
    return g;
}

namespace {

void check_image(const ImageF& img, int n_centers) {
    if (img.rows < 3 || img.cols < 3)
        throw ValidationError("SLIC needs an image of at least 3x3 pixels");
    if (static_cast<std::size_t>(n_centers) > img.size())
        throw ValidationError("SLIC n_centers (" + std::to_string(n_centers) +
                              ") exceeds the pixel count (" + std::to_string(img.size()) + ")");
}

std::vector<SlicCenter> seed_centers(const ImageF& img, double step) {
    const int ny = std::max(1, static_cast<int>(std::lround(img.rows / step)));
    const int nx = std::max(1, static_cast<int>(std::lround(img.cols / step)));
    const double step_y = static_cast<double>(img.rows) / ny;
    const double step_x = static_cast<double>(img.cols) / nx;
    const ImageF grad = gradient_magnitude(img);

    std::vector<SlicCenter> centers;
    centers.reserve(static_cast<std::size_t>(ny) * nx);
    for (int i = 0; i < ny; ++i) {
        for (int j = 0; j < nx; ++j) {
            double row = (i + 0.5) * step_y - 0.5;
            double col = (j + 0.5) * step_x - 0.5;
            const int pr = std::clamp(static_cast<int>(std::lround(row)), 0, img.rows - 1);
            const int pc = std::clamp(static_cast<int>(std::lround(col)), 0, img.cols - 1);
            int br = pr;
            int bc = pc;
            float best = grad(pr, pc);
            for (int dr = -1; dr <= 1; ++dr) {
                for (int dc = -1; dc <= 1; ++dc) {
                    const int rr = pr + dr;
                    const int cc = pc + dc;
                    if (rr < 0 || rr >= img.rows || cc < 0 || cc >= img.cols)
                        continue;
                    if (grad(rr, cc) < best) {
                        best = grad(rr, cc);
                        br = rr;
                        bc = cc;
                    }
                }
            }
            // Keep the sub-pixel grid position unless a strictly flatter pixel exists.
            if (br != pr || bc != pc) {
                row = br;
                col = bc;
            }
            centers.push_back({row, col, static_cast<double>(img(br, bc))});
        }
    }
    return centers;
}

} // namespace

SlicClustering slic_cluster(const ImageF& img, const SlicConfig& cfg) {
    cfg.validate();
    check_image(img, cfg.n_centers);

    const int rows = img.rows;
    const int cols = img.cols;
    const double step = std::sqrt(static_cast<double>(rows) * cols / cfg.n_centers);
    const double weight = cfg.compactness / step;

    SlicClustering out;
    out.grid_step = step;
    out.centers = seed_centers(img, step);
    out.labels = LabelGrid(rows, cols, -1);

    const auto cost = [&](int r, int c, const SlicCenter& k) {
        const double di = static_cast<double>(img(r, c)) - k.intensity;
        const double dr = r - k.row;
        const double dc = c - k.col;
        return di * di + weight * (dr * dr + dc * dc);
    };

    const int n_centers = static_cast<int>(out.centers.size());
    Grid2D<double> dist(rows, cols);

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
        // Assignment: a pixel's current center always competes, so its cost can only drop.
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                const int l = out.labels(r, c);
                dist(r, c) = l >= 0 ? cost(r, c, out.centers[l])
                                    : std::numeric_limits<double>::infinity();
            }
        for (int k = 0; k < n_centers; ++k) {
            const SlicCenter& ctr = out.centers[k];
            const int r0 = std::max(0, static_cast<int>(std::floor(ctr.row - step)) - 1);
            const int r1 = std::min(rows - 1, static_cast<int>(std::ceil(ctr.row + step)) + 1);
            const int c0 = std::max(0, static_cast<int>(std::floor(ctr.col - step)) - 1);
            const int c1 = std::min(cols - 1, static_cast<int>(std::ceil(ctr.col + step)) + 1);
            for (int r = r0; r <= r1; ++r) {
                if (std::abs(r - ctr.row) > step)
                    continue;
                for (int c = c0; c <= c1; ++c) {
                    if (std::abs(c - ctr.col) > step)
                        continue;
                    const double d = cost(r, c, ctr);
                    if (d < dist(r, c)) {
                        dist(r, c) = d;
                        out.labels(r, c) = k;
                    }
                }
            }
        }
        // Pixels outside every search window fall back to the globally nearest center.
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                if (out.labels(r, c) >= 0)
                    continue;
                for (int k = 0; k < n_centers; ++k) {
                    const double d = cost(r, c, out.centers[k]);
                    if (d < dist(r, c)) {
                        dist(r, c) = d;
                        out.labels(r, c) = k;
                    }
                }
            }
        out.inertia_trace.push_back(std::accumulate(dist.data.begin(), dist.data.end(), 0.0));

        // Update: centers become the means of their members.
        std::vector<double> sr(n_centers, 0.0), sc(n_centers, 0.0), si(n_centers, 0.0);
        std::vector<long> count(n_centers, 0);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                const int l = out.labels(r, c);
                sr[l] += r;
                sc[l] += c;
                si[l] += img(r, c);
                ++count[l];
            }
        double max_shift = 0.0;
        for (int k = 0; k < n_centers; ++k) {
            if (count[k] == 0)
                continue;
            SlicCenter next{sr[k] / count[k], sc[k] / count[k], si[k] / count[k]};
            max_shift = std::max(max_shift, std::hypot(next.row - out.centers[k].row,
                                                       next.col - out.centers[k].col));
            out.centers[k] = next;
        }
        double updated = 0.0;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                updated += cost(r, c, out.centers[out.labels(r, c)]);
        out.inertia_trace.push_back(updated);

        out.iterations_run = iter + 1;
        if (max_shift < cfg.convergence_shift)
            break;
    }
    return out;
}

LabelGrid enforce_connectivity(const LabelGrid& labels, int min_size, int* n_regions) {
    const int rows = labels.rows;
    const int cols = labels.cols;
    constexpr int dr[4] = {-1, 1, 0, 0};
    constexpr int dc[4] = {0, 0, -1, 1};

    // Label every 4-connected component in raster order of its first pixel.
    LabelGrid comp(rows, cols, -1);
    std::vector<std::vector<int>> members;
    std::vector<int> stack;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (comp(r, c) >= 0)
                continue;
            const int id = static_cast<int>(members.size());
            members.emplace_back();
            comp(r, c) = id;
            stack.assign(1, r * cols + c);
            while (!stack.empty()) {
                const int p = stack.back();
                stack.pop_back();
                members[id].push_back(p);
                const int pr = p / cols;
                const int pc = p % cols;
                for (int n = 0; n < 4; ++n) {
                    const int qr = pr + dr[n];
                    const int qc = pc + dc[n];
                    if (qr < 0 || qr >= rows || qc < 0 || qc >= cols)
                        continue;
                    if (comp(qr, qc) >= 0 || labels(qr, qc) != labels(pr, pc))
                        continue;
                    comp(qr, qc) = id;
                    stack.push_back(qr * cols + qc);
                }
            }
        }
    }

    const int n_comp = static_cast<int>(members.size());
    std::vector<int> parent(n_comp);
    std::iota(parent.begin(), parent.end(), 0);
    std::vector<long> size(n_comp);
    for (int i = 0; i < n_comp; ++i)
        size[i] = static_cast<long>(members[i].size());
    const auto find = [&parent](int x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };

    bool changed = true;
    while (changed) {
        changed = false;
        for (int id = 0; id < n_comp; ++id) {
            if (find(id) != id || size[id] >= min_size)
                continue;
            int best = -1;
            long best_size = -1;
            for (int p : members[id]) {
                const int pr = p / cols;
                const int pc = p % cols;
                for (int n = 0; n < 4; ++n) {
                    const int qr = pr + dr[n];
                    const int qc = pc + dc[n];
                    if (qr < 0 || qr >= rows || qc < 0 || qc >= cols)
                        continue;
                    const int other = find(comp(qr, qc));
                    if (other == id)
                        continue;
                    if (size[other] > best_size || (size[other] == best_size && other < best)) {
                        best = other;
                        best_size = size[other];
                    }
                }
            }
            if (best < 0)
                continue;
            parent[id] = best;
            size[best] += size[id];
            members[best].insert(members[best].end(), members[id].begin(), members[id].end());
            members[id].clear();
            changed = true;
        }
    }

    LabelGrid out(rows, cols, -1);
    std::vector<int> compact(n_comp, -1);
    int next = 0;
    for (std::size_t p = 0; p < out.data.size(); ++p) {
        const int root = find(comp.data[p]);
        if (compact[root] < 0)
            compact[root] = next++;
        out.data[p] = compact[root];
    }
    if (n_regions)
        *n_regions = next;
    return out;
}

namespace {
std::atomic<std::uint64_t> g_slic_calls{0};
} // namespace

std::uint64_t slic_call_count() {
    return g_slic_calls.load();
}

SuperpixelLabelMap slic_segment(const imaging::ImageSlice& img, const SlicConfig& cfg,
                                std::uint64_t /*seed*/) {
    ++g_slic_calls;
    const ImageF& pixels = img.pixels;
    SlicClustering raw = slic_cluster(pixels, cfg);

    const double expected = static_cast<double>(pixels.size()) / cfg.n_centers;
    const int min_size = static_cast<int>(std::floor(cfg.min_region_frac * expected));

    SuperpixelLabelMap out;
    out.labels = enforce_connectivity(raw.labels, min_size, &out.n_regions);
    out.iterations_run = raw.iterations_run;
    out.inertia_trace = std::move(raw.inertia_trace);

    std::vector<double> sr(out.n_regions, 0.0), sc(out.n_regions, 0.0), si(out.n_regions, 0.0);
    std::vector<long> count(out.n_regions, 0);
    for (int r = 0; r < pixels.rows; ++r)
        for (int c = 0; c < pixels.cols; ++c) {
            const int l = out.labels(r, c);
            sr[l] += r;
            sc[l] += c;
            si[l] += pixels(r, c);
            ++count[l];
        }
    out.centers.resize(out.n_regions);
    for (int k = 0; k < out.n_regions; ++k)
        out.centers[k] = {sr[k] / count[k], sc[k] / count[k], si[k] / count[k]};
    return out;
}

} // namespace separeg::superpixel
