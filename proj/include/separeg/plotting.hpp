// SPDX-License-Identifier: Apache-2.0
//
// Minimal PNG charts for training logs and reports.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace separeg::plotting {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

void line_plot(const std::filesystem::path& path, const std::string& title,
               const std::vector<Series>& series, const std::string& x_label,
               const std::string& y_label);

/// One bar per label with optional symmetric error bars (empty = none).
void bar_plot(const std::filesystem::path& path, const std::string& title,
              const std::vector<std::string>& labels, const std::vector<double>& values,
              const std::vector<double>& errors, const std::string& y_label);

} // namespace separeg::plotting
