// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "separeg/grid.hpp"

#include <filesystem>

namespace separeg {

/// Bilinear resize (pixel-center aligned).
ImageF resize_bilinear(const ImageF& img, int rows, int cols);

/// [0,1] image as a 16-bit grayscale PNG (value * 65535, rounded).
void write_png16(const ImageF& img, const std::filesystem::path& path);
ImageF read_png16(const std::filesystem::path& path);

/// Boolean mask as an 8-bit PNG holding 0 / 255.
void write_mask_png(const Mask2D& mask, const std::filesystem::path& path);
Mask2D read_mask_png(const std::filesystem::path& path);

} // namespace separeg
