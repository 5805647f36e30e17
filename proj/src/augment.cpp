// SPDX-License-Identifier: Apache-2.0

#include "separeg/augment.hpp"

#include "separeg/errors.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace separeg::augment {

using nlohmann::json;

void AugmentationPolicy::validate() const {
    if (out_size < 1)
        throw ValidationError("augmentation out_size must be positive");
    if (!(crop_scale[0] > 0 && crop_scale[0] <= crop_scale[1] && crop_scale[1] <= 1))
        throw ValidationError("crop_scale must satisfy 0 < lo <= hi <= 1");
    if (!(crop_ratio[0] > 0 && crop_ratio[0] <= crop_ratio[1]))
        throw ValidationError("crop_ratio must satisfy 0 < lo <= hi");
    for (double p : {hflip_prob, jitter_prob, blur_prob})
        if (p < 0 || p > 1)
            throw ValidationError("augmentation probabilities must lie in [0,1]");
    if (brightness < 0 || contrast < 0 || contrast > 1)
        throw ValidationError("jitter strengths must satisfy brightness >= 0, 0 <= contrast <= 1");
    if (!(blur_sigma[0] > 0 && blur_sigma[0] <= blur_sigma[1]))
        throw ValidationError("blur_sigma must satisfy 0 < lo <= hi");
}

void to_json(json& j, const AugmentationPolicy& p) {
    j = json{{"out_size", p.out_size},       {"crop_scale", p.crop_scale},
             {"crop_ratio", p.crop_ratio},   {"hflip_prob", p.hflip_prob},
             {"jitter_prob", p.jitter_prob}, {"brightness", p.brightness},
             {"contrast", p.contrast},       {"blur_prob", p.blur_prob},
             {"blur_sigma", p.blur_sigma}};
}

void from_json(const json& j, AugmentationPolicy& p) {
    AugmentationPolicy d;
    p.out_size = j.value("out_size", d.out_size);
    p.crop_scale = j.value("crop_scale", d.crop_scale);
    p.crop_ratio = j.value("crop_ratio", d.crop_ratio);
    p.hflip_prob = j.value("hflip_prob", d.hflip_prob);
    p.jitter_prob = j.value("jitter_prob", d.jitter_prob);
    p.brightness = j.value("brightness", d.brightness);
    p.contrast = j.value("contrast", d.contrast);
    p.blur_prob = j.value("blur_prob", d.blur_prob);
    p.blur_sigma = j.value("blur_sigma", d.blur_sigma);
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool coin(std::mt19937_64& rng, double p) {
    return uniform(rng, 0.0, 1.0) < p;
}

cv::Rect sample_crop(int rows, int cols, const AugmentationPolicy& p, std::mt19937_64& rng) {
    const double area = static_cast<double>(rows) * cols;
    const double log_lo = std::log(p.crop_ratio[0]);
    const double log_hi = std::log(p.crop_ratio[1]);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * uniform(rng, p.crop_scale[0], p.crop_scale[1]);
        const double ratio = std::exp(uniform(rng, log_lo, log_hi));
        const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
        const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
        if (w >= 1 && h >= 1 && w <= cols && h <= rows) {
            const int r0 = std::uniform_int_distribution<int>(0, rows - h)(rng);
            const int c0 = std::uniform_int_distribution<int>(0, cols - w)(rng);
            return {c0, r0, w, h};
        }
    }
    // Center crop clamped to the ratio range.
    const double in_ratio = static_cast<double>(cols) / rows;
    int w = cols, h = rows;
    if (in_ratio < p.crop_ratio[0])
        h = static_cast<int>(std::lround(w / p.crop_ratio[0]));
    else if (in_ratio > p.crop_ratio[1])
        w = static_cast<int>(std::lround(h * p.crop_ratio[1]));
    return {(cols - w) / 2, (rows - h) / 2, w, h};
}

} // namespace

ImageF augment(const ImageF& img, const AugmentationPolicy& policy, std::mt19937_64& rng) {
    if (img.empty())
        throw ValidationError("cannot augment an empty image");
    const cv::Mat src(img.rows, img.cols, CV_32F, const_cast<float*>(img.data.data()));

    cv::Mat view;
    cv::resize(src(sample_crop(img.rows, img.cols, policy, rng)), view,
               cv::Size(policy.out_size, policy.out_size), 0, 0, cv::INTER_LINEAR);

    if (coin(rng, policy.hflip_prob))
        cv::flip(view, view, 1);

    if (coin(rng, policy.jitter_prob)) {
        const double b = uniform(rng, -policy.brightness, policy.brightness);
        const double c = uniform(rng, 1.0 - policy.contrast, 1.0 + policy.contrast);
        const double mean = cv::mean(view)[0];
        view.convertTo(view, CV_32F, c, (1.0 - c) * mean + b);
    }

    if (coin(rng, policy.blur_prob)) {
        const double sigma = uniform(rng, policy.blur_sigma[0], policy.blur_sigma[1]);
        const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
        cv::GaussianBlur(view, view, cv::Size(2 * radius + 1, 2 * radius + 1), sigma, sigma,
                         cv::BORDER_REFLECT_101);
    }

    cv::min(cv::max(view, 0.0), 1.0, view);
    ImageF out(policy.out_size, policy.out_size);
    for (int r = 0; r < view.rows; ++r)
        std::memcpy(&out(r, 0), view.ptr<float>(r), sizeof(float) * view.cols);
    return out;
}

torch::Tensor to_batch(const std::vector<ImageF>& images) {
    if (images.empty())
        throw ValidationError("cannot batch zero images");
    const int rows = images.front().rows, cols = images.front().cols;
    auto batch = torch::empty({static_cast<std::int64_t>(images.size()), 1, rows, cols});
    float* dst = batch.data_ptr<float>();
    for (const auto& im : images) {
        if (im.rows != rows || im.cols != cols)
            throw ValidationError("batched images must share one size");
        std::memcpy(dst, im.data.data(), sizeof(float) * im.data.size());
        dst += im.data.size();
    }
    return batch;
}

} // namespace separeg::augment
