// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "json.hpp"

#include <torch/torch.h>

#include <memory>
#include <string>
#include <vector>

namespace separeg::optim {

struct OptimizerConfig {
    std::string kind = "sgd";   // "sgd" | "adam"
    double lr = 0.05 * 32 / 256;
    double momentum = 0.9;      // sgd only
    double weight_decay = 1e-4;
    bool cosine_schedule = true;

    void validate() const;
    friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

std::unique_ptr<torch::optim::Optimizer> make_optimizer(const OptimizerConfig& cfg,
                                                        std::vector<torch::Tensor> params);

/// Learning rate for step `step` of `total` (half-cosine decay to zero when enabled).
double scheduled_lr(const OptimizerConfig& cfg, long step, long total);

void set_lr(torch::optim::Optimizer& opt, double lr);

} // namespace separeg::optim
