// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace separeg {

/// Dense row-major 2D array.
template <typename T>
struct Grid2D {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Grid2D() = default;
    Grid2D(int r, int c, T fill = T{})
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    T& operator()(int r, int c) {
        assert(r >= 0 && r < rows && c >= 0 && c < cols);
        return data[static_cast<std::size_t>(r) * cols + c];
    }
    const T& operator()(int r, int c) const {
        assert(r >= 0 && r < rows && c >= 0 && c < cols);
        return data[static_cast<std::size_t>(r) * cols + c];
    }

    template <typename U>
    bool same_shape(const Grid2D<U>& other) const {
        return rows == other.rows && cols == other.cols;
    }

    std::span<const T> view() const { return data; }

    friend bool operator==(const Grid2D&, const Grid2D&) = default;
};

using ImageF = Grid2D<float>;
using LabelGrid = Grid2D<std::int32_t>;
using Mask2D = Grid2D<std::uint8_t>;

/// Dense 3D array indexed (i, j, k) with k fastest.
template <typename T>
struct Grid3D {
    std::array<int, 3> shape{0, 0, 0};
    std::vector<T> data;

    Grid3D() = default;
    Grid3D(std::array<int, 3> s, T fill = T{})
        : shape(s), data(static_cast<std::size_t>(s[0]) * s[1] * s[2], fill) {}

    std::size_t size() const { return data.size(); }
    std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k;
    }
    T& operator()(int i, int j, int k) { return data[index(i, j, k)]; }
    const T& operator()(int i, int j, int k) const { return data[index(i, j, k)]; }

    friend bool operator==(const Grid3D&, const Grid3D&) = default;
};

using BinaryVolume = Grid3D<std::uint8_t>;

} // namespace separeg
