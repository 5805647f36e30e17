// SPDX-License-Identifier: Apache-2.0

#include "separeg/optim.hpp"

#include "separeg/errors.hpp"

#include <cmath>
#include <numbers>

namespace separeg::optim {

using nlohmann::json;

void OptimizerConfig::validate() const {
    if (kind != "sgd" && kind != "adam")
        throw ValidationError("optimizer kind must be 'sgd' or 'adam', got '" + kind + "'");
    if (!(lr > 0))
        throw ValidationError("learning rate must be positive");
    if (momentum < 0 || momentum >= 1)
        throw ValidationError("momentum must lie in [0,1)");
    if (weight_decay < 0)
        throw ValidationError("weight decay must be non-negative");
}

void to_json(json& j, const OptimizerConfig& c) {
    j = json{{"kind", c.kind},
             {"lr", c.lr},
             {"momentum", c.momentum},
             {"weight_decay", c.weight_decay},
             {"cosine_schedule", c.cosine_schedule}};
}

void from_json(const json& j, OptimizerConfig& c) {
    OptimizerConfig d;
    c.kind = j.value("kind", d.kind);
    c.lr = j.value("lr", d.lr);
    c.momentum = j.value("momentum", d.momentum);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.cosine_schedule = j.value("cosine_schedule", d.cosine_schedule);
}

std::unique_ptr<torch::optim::Optimizer> make_optimizer(const OptimizerConfig& cfg,
                                                        std::vector<torch::Tensor> params) {
    cfg.validate();
    if (cfg.kind == "adam")
        return std::make_unique<torch::optim::Adam>(
            std::move(params), torch::optim::AdamOptions(cfg.lr).weight_decay(cfg.weight_decay));
    return std::make_unique<torch::optim::SGD>(
        std::move(params),
        torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay));
}

double scheduled_lr(const OptimizerConfig& cfg, long step, long total) {
    if (!cfg.cosine_schedule || total <= 0)
        return cfg.lr;
    return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
    for (auto& group : opt.param_groups())
        group.options().set_lr(lr);
}

} // namespace separeg::optim
