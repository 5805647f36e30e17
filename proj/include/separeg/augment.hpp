// SPDX-License-Identifier: Apache-2.0
//
// View augmentation for single-channel region crops. Transforms are applied in
// a fixed order: random resized crop, horizontal flip, intensity jitter,
// Gaussian blur. Every random draw comes from the caller's generator, so two
// calls with the same generator state give the same view.

#pragma once

#include "separeg/grid.hpp"

#include "json.hpp"

#include <torch/torch.h>

#include <array>
#include <random>
#include <vector>

namespace separeg::augment {

struct AugmentationPolicy {
    int out_size = 128;
    /// Area fraction and aspect-ratio range of the random resized crop.
    std::array<double, 2> crop_scale{0.4, 1.0};
    std::array<double, 2> crop_ratio{3.0 / 4.0, 4.0 / 3.0};
    double hflip_prob = 0.5;
    double jitter_prob = 0.8;
    /// Additive brightness offset drawn from [-brightness, brightness].
    double brightness = 0.4;
    /// Contrast factor drawn from [1 - contrast, 1 + contrast].
    double contrast = 0.4;
    double blur_prob = 0.5;
    /// Blur sigma range in output pixels.
    std::array<double, 2> blur_sigma{0.1, 2.0};

    void validate() const;
    friend bool operator==(const AugmentationPolicy&, const AugmentationPolicy&) = default;
};

void to_json(nlohmann::json& j, const AugmentationPolicy& p);
void from_json(const nlohmann::json& j, AugmentationPolicy& p);

/// One augmented view of `img`, out_size x out_size, values in [0,1].
ImageF augment(const ImageF& img, const AugmentationPolicy& policy, std::mt19937_64& rng);

/// Stacks equally sized images into a (B, 1, H, W) float tensor.
torch::Tensor to_batch(const std::vector<ImageF>& images);

} // namespace separeg::augment
