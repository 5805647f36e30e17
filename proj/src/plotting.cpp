// SPDX-License-Identifier: Apache-2.0

#include "separeg/plotting.hpp"

#include "separeg/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace separeg::plotting {

namespace fs = std::filesystem;

namespace {

constexpr int kWidth = 800;
constexpr int kHeight = 500;
constexpr int kLeft = 80, kRight = 20, kTop = 40, kBottom = 60;
const cv::Scalar kBlack(0, 0, 0);
const cv::Scalar kGrey(200, 200, 200);

const cv::Scalar kPalette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44},
                               {40, 39, 214},  {189, 103, 148}, {75, 86, 140}};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

void text(cv::Mat& img, const std::string& s, cv::Point at, double scale = 0.45) {
    cv::putText(img, s, at, cv::FONT_HERSHEY_SIMPLEX, scale, kBlack, 1, cv::LINE_AA);
}

struct Frame {
    double x0, x1, y0, y1;
    cv::Point map(double x, double y) const {
        const double fx = (x - x0) / (x1 - x0);
        const double fy = (y - y0) / (y1 - y0);
        return {kLeft + static_cast<int>(std::lround(fx * (kWidth - kLeft - kRight))),
                kHeight - kBottom - static_cast<int>(std::lround(fy * (kHeight - kTop - kBottom)))};
    }
};

void pad_range(double& lo, double& hi) {
    if (!std::isfinite(lo) || !std::isfinite(hi)) {
        lo = 0;
        hi = 1;
    }
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
}

cv::Mat canvas(const std::string& title, const Frame& f, const std::string& x_label,
               const std::string& y_label, bool x_ticks) {
    cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
    for (int i = 0; i <= 4; ++i) {
        const double y = f.y0 + (f.y1 - f.y0) * i / 4;
        const auto p = f.map(f.x0, y);
        cv::line(img, p, f.map(f.x1, y), kGrey, 1);
        text(img, fmt(y), {5, p.y + 4});
        if (x_ticks) {
            const double x = f.x0 + (f.x1 - f.x0) * i / 4;
            text(img, fmt(x), {f.map(x, f.y0).x - 10, kHeight - kBottom + 18});
        }
    }
    cv::rectangle(img, f.map(f.x0, f.y1), f.map(f.x1, f.y0), kBlack, 1);
    text(img, title, {kLeft, 25}, 0.6);
    text(img, x_label, {kWidth / 2 - 40, kHeight - 15});
    text(img, y_label, {5, kTop - 10});
    return img;
}

void write(const fs::path& path, const cv::Mat& img) {
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), img))
        throw IoError("cannot write plot: " + path.string());
}

} // namespace

void line_plot(const fs::path& path, const std::string& title, const std::vector<Series>& series,
               const std::string& x_label, const std::string& y_label) {
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size())
            throw ValidationError("series '" + s.name + "' has mismatched x/y lengths");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    pad_range(x0, x1);
    pad_range(y0, y1);
    const Frame f{x0, x1, y0, y1};
    cv::Mat img = canvas(title, f, x_label, y_label, true);
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const auto& color = kPalette[k % std::size(kPalette)];
        for (std::size_t i = 1; i < s.x.size(); ++i)
            cv::line(img, f.map(s.x[i - 1], s.y[i - 1]), f.map(s.x[i], s.y[i]), color, 2, cv::LINE_AA);
        if (s.x.size() == 1)
            cv::circle(img, f.map(s.x[0], s.y[0]), 3, color, cv::FILLED);
        cv::putText(img, s.name, {kWidth - kRight - 200, kTop + 18 + 18 * static_cast<int>(k)},
                    cv::FONT_HERSHEY_SIMPLEX, 0.45, color, 1, cv::LINE_AA);
    }
    write(path, img);
}

void bar_plot(const fs::path& path, const std::string& title, const std::vector<std::string>& labels,
              const std::vector<double>& values, const std::vector<double>& errors,
              const std::string& y_label) {
    if (labels.size() != values.size() || (!errors.empty() && errors.size() != values.size()))
        throw ValidationError("bar plot labels, values and errors must have equal lengths");
    double y1 = 0;
    for (std::size_t i = 0; i < values.size(); ++i)
        y1 = std::max(y1, values[i] + (errors.empty() ? 0.0 : errors[i]));
    double y0 = 0;
    pad_range(y0, y1);
    const double n = static_cast<double>(std::max<std::size_t>(values.size(), 1));
    const Frame f{0, n, y0, y1 * 1.05};
    cv::Mat img = canvas(title, f, "", y_label, false);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double xi = static_cast<double>(i);
        const auto& color = kPalette[i % std::size(kPalette)];
        cv::rectangle(img, f.map(xi + 0.15, values[i]), f.map(xi + 0.85, 0), color, cv::FILLED);
        if (!errors.empty() && errors[i] > 0) {
            const auto top = f.map(xi + 0.5, values[i] + errors[i]);
            const auto bot = f.map(xi + 0.5, std::max(0.0, values[i] - errors[i]));
            cv::line(img, top, bot, kBlack, 1);
            cv::line(img, {top.x - 5, top.y}, {top.x + 5, top.y}, kBlack, 1);
            cv::line(img, {bot.x - 5, bot.y}, {bot.x + 5, bot.y}, kBlack, 1);
        }
        const auto base = f.map(xi + 0.15, 0);
        text(img, labels[i], {base.x, base.y + 18}, 0.4);
        text(img, fmt(values[i]), {base.x, f.map(xi, values[i]).y - 5}, 0.4);
    }
    write(path, img);
}

} // namespace separeg::plotting
