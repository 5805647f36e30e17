// SPDX-License-Identifier: Apache-2.0

#include "separeg/image_ops.hpp"

#include "separeg/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

namespace separeg {

namespace fs = std::filesystem;

namespace {

cv::Mat as_mat(const ImageF& img) {
    // OpenCV only reads through this header; the const_cast never leads to a write.
    return cv::Mat(img.rows, img.cols, CV_32FC1, const_cast<float*>(img.data.data()));
}

void ensure_parent(const fs::path& path) {
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
}

} // namespace

ImageF resize_bilinear(const ImageF& img, int rows, int cols) {
    if (img.empty() || rows <= 0 || cols <= 0)
        throw ValidationError("resize needs a non-empty source and a positive target size");
    ImageF out(rows, cols);
    if (img.rows == rows && img.cols == cols) {
        out.data = img.data;
        return out;
    }
    cv::Mat dst(rows, cols, CV_32FC1, out.data.data());
    cv::resize(as_mat(img), dst, dst.size(), 0.0, 0.0, cv::INTER_LINEAR);
    return out;
}

void write_png16(const ImageF& img, const fs::path& path) {
    cv::Mat m(img.rows, img.cols, CV_16UC1);
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c)
            m.at<std::uint16_t>(r, c) = static_cast<std::uint16_t>(
                std::lround(std::clamp(img(r, c), 0.0f, 1.0f) * 65535.0f));
    ensure_parent(path);
    if (!cv::imwrite(path.string(), m))
        throw IoError("cannot write PNG: " + path.string());
}

ImageF read_png16(const fs::path& path) {
    const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty())
        throw IoError("cannot read PNG: " + path.string());
    if (m.type() != CV_16UC1)
        throw FormatError(path.string() + ": expected a 16-bit grayscale PNG");
    ImageF img(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < m.cols; ++c)
            img(r, c) = static_cast<float>(m.at<std::uint16_t>(r, c)) / 65535.0f;
    return img;
}

void write_mask_png(const Mask2D& mask, const fs::path& path) {
    cv::Mat m(mask.rows, mask.cols, CV_8UC1);
    for (int r = 0; r < mask.rows; ++r)
        for (int c = 0; c < mask.cols; ++c)
            m.at<std::uint8_t>(r, c) = mask(r, c) ? 255 : 0;
    ensure_parent(path);
    if (!cv::imwrite(path.string(), m))
        throw IoError("cannot write PNG: " + path.string());
}

Mask2D read_mask_png(const fs::path& path) {
    const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty())
        throw IoError("cannot read PNG: " + path.string());
    if (m.type() != CV_8UC1)
        throw FormatError(path.string() + ": expected an 8-bit mask PNG");
    Mask2D mask(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < m.cols; ++c)
            mask(r, c) = m.at<std::uint8_t>(r, c) ? 1 : 0;
    return mask;
}

} // namespace separeg
