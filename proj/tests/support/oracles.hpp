// SPDX-License-Identifier: Apache-2.0
//
// Slow, obviously-correct reference computations used by the unit and
// acceptance tests. Nothing here calls into the library code it checks.

#pragma once

#include "separeg/grid.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

using separeg::BinaryVolume;
using separeg::ImageF;
using separeg::LabelGrid;

// ---------------------------------------------------------------- SLIC

struct RefCenter {
    double row, col, intensity;
};

struct RefSlic {
    LabelGrid labels;
    std::vector<double> trace;
};

/// Pixel-by-pixel SLIC: for every pixel, every center is considered in index
/// order and kept only if the pixel lies in its 2S x 2S window and is strictly
/// closer than the best so far (the current label competes first). Pixels no
/// window reaches take the globally nearest center.
inline RefSlic reference_slic(const ImageF& img, int n_centers, double compactness, int max_iterations,
                              double convergence_shift) {
    const int H = img.rows, W = img.cols;
    const double S = std::sqrt(double(H) * W / n_centers);
    const double m = compactness / S;

    auto grad = [&](int r, int c) {
        auto at = [&](int rr, int cc) {
            return img(std::clamp(rr, 0, H - 1), std::clamp(cc, 0, W - 1));
        };
        return std::fabs(at(r + 1, c) - at(r - 1, c)) + std::fabs(at(r, c + 1) - at(r, c - 1));
    };

    std::vector<RefCenter> centers;
    const int ny = std::max(1, int(std::lround(H / S)));
    const int nx = std::max(1, int(std::lround(W / S)));
    for (int i = 0; i < ny; ++i)
        for (int j = 0; j < nx; ++j) {
            double row = (i + 0.5) * H / ny - 0.5;
            double col = (j + 0.5) * W / nx - 0.5;
            int pr = std::clamp(int(std::lround(row)), 0, H - 1);
            int pc = std::clamp(int(std::lround(col)), 0, W - 1);
            int br = pr, bc = pc;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    int rr = pr + dr, cc = pc + dc;
                    if (rr >= 0 && rr < H && cc >= 0 && cc < W && grad(rr, cc) < grad(br, bc)) {
                        br = rr;
                        bc = cc;
                    }
                }
            if (br != pr || bc != pc) {
                row = br;
                col = bc;
            }
            centers.push_back({row, col, double(img(br, bc))});
        }

    auto d = [&](int r, int c, const RefCenter& k) {
        double di = img(r, c) - k.intensity;
        return di * di + m * ((r - k.row) * (r - k.row) + (c - k.col) * (c - k.col));
    };

    RefSlic out;
    out.labels = LabelGrid(H, W, -1);
    for (int it = 0; it < max_iterations; ++it) {
        double total = 0;
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                int best = out.labels(r, c);
                double bd = best >= 0 ? d(r, c, centers[best]) : std::numeric_limits<double>::infinity();
                bool covered = false;
                for (int k = 0; k < int(centers.size()); ++k) {
                    if (std::fabs(r - centers[k].row) > S || std::fabs(c - centers[k].col) > S)
                        continue;
                    covered = true;
                    if (d(r, c, centers[k]) < bd) {
                        bd = d(r, c, centers[k]);
                        best = k;
                    }
                }
                if (!covered && best < 0)
                    for (int k = 0; k < int(centers.size()); ++k)
                        if (d(r, c, centers[k]) < bd) {
                            bd = d(r, c, centers[k]);
                            best = k;
                        }
                out.labels(r, c) = best;
                total += bd;
            }
        out.trace.push_back(total);

        double shift = 0;
        for (int k = 0; k < int(centers.size()); ++k) {
            double sr = 0, sc = 0, si = 0;
            long n = 0;
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c)
                    if (out.labels(r, c) == k) {
                        sr += r;
                        sc += c;
                        si += img(r, c);
                        ++n;
                    }
            if (n == 0)
                continue;
            RefCenter nk{sr / n, sc / n, si / n};
            shift = std::max(shift, std::hypot(nk.row - centers[k].row, nk.col - centers[k].col));
            centers[k] = nk;
        }
        if (shift < convergence_shift)
            break;
    }
    return out;
}

/// True when every label's pixels form one 4-connected component.
inline bool labels_connected(const LabelGrid& labels) {
    const int H = labels.rows, W = labels.cols;
    int max_label = -1;
    for (int v : labels.data)
        max_label = std::max(max_label, v);
    std::vector<int> seen_components(max_label + 1, 0);
    LabelGrid visited(H, W, 0);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            if (visited(r, c))
                continue;
            const int l = labels(r, c);
            if (++seen_components[l] > 1)
                return false;
            std::vector<std::pair<int, int>> q{{r, c}};
            visited(r, c) = 1;
            while (!q.empty()) {
                auto [pr, pc] = q.back();
                q.pop_back();
                const int nb[4][2] = {{pr - 1, pc}, {pr + 1, pc}, {pr, pc - 1}, {pr, pc + 1}};
                for (auto& n : nb)
                    if (n[0] >= 0 && n[0] < H && n[1] >= 0 && n[1] < W && !visited(n[0], n[1]) &&
                        labels(n[0], n[1]) == l) {
                        visited(n[0], n[1]) = 1;
                        q.push_back({n[0], n[1]});
                    }
            }
        }
    return true;
}

/// Step image: columns < edge get `lo`, the rest `hi`, plus Gaussian noise, clamped to [0,1].
inline ImageF step_image(int size, int edge, double lo, double hi, double noise, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, noise);
    ImageF img(size, size);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            double v = (c < edge ? lo : hi) + (noise > 0 ? n(rng) : 0.0);
            img(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    return img;
}

/// Smooth random blobs plus noise, in [0,1].
inline ImageF random_image(int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImageF img(size, size, 0.3f);
    const int n = 3 + int(u(rng) * 4);
    for (int b = 0; b < n; ++b) {
        const double cr = u(rng) * size, cc = u(rng) * size, rad = 4 + u(rng) * size / 4.0, v = u(rng);
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c)
                if ((r - cr) * (r - cr) + (c - cc) * (c - cc) < rad * rad)
                    img(r, c) = static_cast<float>(v);
    }
    std::normal_distribution<double> noise(0.0, 0.03);
    for (auto& p : img.data)
        p = static_cast<float>(std::clamp(p + noise(rng), 0.0, 1.0));
    return img;
}

// ---------------------------------------------------------------- metrics

inline BinaryVolume random_mask(std::array<int, 3> shape, double p, std::mt19937_64& rng) {
    std::bernoulli_distribution b(p);
    BinaryVolume m(shape);
    for (auto& v : m.data)
        v = b(rng) ? 1 : 0;
    return m;
}

inline std::vector<std::array<int, 3>> boundary(const BinaryVolume& m) {
    std::vector<std::array<int, 3>> out;
    const auto& s = m.shape;
    for (int i = 0; i < s[0]; ++i)
        for (int j = 0; j < s[1]; ++j)
            for (int k = 0; k < s[2]; ++k) {
                if (!m(i, j, k))
                    continue;
                const int nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k},
                                      {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
                bool edge = false;
                for (auto& n : nb) {
                    if (n[0] < 0 || n[0] >= s[0] || n[1] < 0 || n[1] >= s[1] || n[2] < 0 || n[2] >= s[2] ||
                        !m(n[0], n[1], n[2]))
                        edge = true;
                }
                if (edge)
                    out.push_back({i, j, k});
            }
    return out;
}

inline double dsc(const BinaryVolume& a, const BinaryVolume& b) {
    long inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        inter += a.data[i] && b.data[i];
        sa += a.data[i] != 0;
        sb += b.data[i] != 0;
    }
    if (sa + sb == 0)
        return 1.0;
    return 2.0 * inter / double(sa + sb);
}

/// All-pairs boundary distances, pooled both ways, 95th percentile with
/// linear interpolation. NaN encodes "exactly one mask empty".
inline double hd95(const BinaryVolume& a, const BinaryVolume& b, std::array<double, 3> sp = {1, 1, 1}) {
    const auto ba = boundary(a), bb = boundary(b);
    if (ba.empty() && bb.empty())
        return 0.0;
    if (ba.empty() || bb.empty())
        return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> d;
    auto directed = [&](const auto& from, const auto& to) {
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) {
                double s = 0;
                for (int x = 0; x < 3; ++x) {
                    const double t = (p[x] - q[x]) * sp[x];
                    s += t * t;
                }
                best = std::min(best, s);
            }
            d.push_back(std::sqrt(best));
        }
    };
    directed(ba, bb);
    directed(bb, ba);
    std::sort(d.begin(), d.end());
    const double pos = 0.95 * double(d.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, d.size() - 1);
    return d[lo] + (pos - double(lo)) * (d[hi] - d[lo]);
}

// ---------------------------------------------------------------- k-means

/// Minimum within-cluster sum of squares over every 2-partition of the rows.
inline double best_two_partition(const std::vector<std::array<double, 2>>& pts) {
    const int n = int(pts.size());
    double best = std::numeric_limits<double>::infinity();
    for (unsigned mask = 1; mask + 1 < (1u << n); ++mask) {
        double total = 0;
        for (int g = 0; g < 2; ++g) {
            double mx = 0, my = 0;
            int cnt = 0;
            for (int i = 0; i < n; ++i)
                if (((mask >> i) & 1u) == unsigned(g)) {
                    mx += pts[i][0];
                    my += pts[i][1];
                    ++cnt;
                }
            mx /= cnt;
            my /= cnt;
            for (int i = 0; i < n; ++i)
                if (((mask >> i) & 1u) == unsigned(g))
                    total += (pts[i][0] - mx) * (pts[i][0] - mx) + (pts[i][1] - my) * (pts[i][1] - my);
        }
        best = std::min(best, total);
    }
    return best;
}

// ---------------------------------------------------------------- gradients

/// Largest relative error between autograd and central differences of the
/// scalar `f` with respect to every element of every input (double tensors).
/// Magnitudes below 1e-3 are compared on an absolute 1e-3 scale.
inline double gradient_error(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& f,
                             std::vector<torch::Tensor> inputs, double h = 1e-6) {
    for (auto& t : inputs)
        t = t.detach().clone().to(torch::kDouble).set_requires_grad(true);
    auto y = f(inputs);
    auto grads = torch::autograd::grad({y}, inputs, {}, false, false, true);
    double worst = 0;
    torch::NoGradGuard ng;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto flat = inputs[t].view({-1});
        auto g = grads[t].defined() ? grads[t].reshape({-1}) : torch::zeros_like(flat);
        for (int64_t i = 0; i < flat.numel(); ++i) {
            const double orig = flat[i].item<double>();
            flat[i] = orig + h;
            const double fp = f(inputs).item<double>();
            flat[i] = orig - h;
            const double fm = f(inputs).item<double>();
            flat[i] = orig;
            const double num = (fp - fm) / (2 * h);
            const double ana = g[i].item<double>();
            const double err = std::fabs(num - ana) / std::max({std::fabs(num), std::fabs(ana), 1e-3});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace oracle
