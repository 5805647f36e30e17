// SPDX-License-Identifier: Apache-2.0
//
// SimSiam-style contrastive pretraining on a region set.
//
//   D(p, z)          = -mean_i <p_i/|p_i|, z_i/|z_i|>
//   L(v1, v2)        = 1/2 D(q(z1), sg(z2)) + 1/2 D(q(z2), sg(z1))
//
// with z = projector(encoder(v)), q the predictor and sg the stop-gradient
// (identity when disabled).

#pragma once

#include "separeg/augment.hpp"
#include "separeg/checkpoint.hpp"
#include "separeg/nets.hpp"
#include "separeg/optim.hpp"
#include "separeg/regions.hpp"

#include "json.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace separeg::contrastive {

/// Negative mean cosine similarity of matching rows. Row norms are floored at
/// `eps`; with eps == 0 a zero-norm row is a ValidationError.
torch::Tensor cosine_similarity_loss(const torch::Tensor& p, const torch::Tensor& z,
                                     double eps = 1e-8);

/// Symmetric loss over two views; (p1, z1) come from view 1, (p2, z2) from view 2.
torch::Tensor simsiam_loss(const torch::Tensor& p1, const torch::Tensor& z1,
                           const torch::Tensor& p2, const torch::Tensor& z2,
                           bool stop_gradient = true);

/// Mean over dimensions of the batch std of l2-normalized rows of z.
double collapse_std(const torch::Tensor& z);

struct PretrainConfig {
    long total_iterations = 100000;
    int batch_size = 32;
    optim::OptimizerConfig optimizer;
    bool stop_gradient = true;
    std::uint64_t seed = 0;
    /// Collapse alarm fires when collapse_std stays below collapse_ratio / sqrt(proj_out)
    /// for collapse_window consecutive steps.
    double collapse_ratio = 0.25;
    int collapse_window = 100;

    void validate() const;
    friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct StepRecord {
    long iteration = 0;
    double loss = 0;
    double lr = 0;
    double z_std = 0;
};

struct PretrainResult {
    nets::Checkpoint checkpoint;
    std::vector<StepRecord> steps;
    std::vector<std::string> warnings;
};

struct PretrainOptions {
    /// JSON-lines step log; empty disables.
    std::filesystem::path log_path;
    /// Loss-curve PNG; empty disables.
    std::filesystem::path plot_path;
    nets::Stage stage = nets::Stage::inter;
    int stage_index = -1;
};

/// Seeded SimSiam network.
nets::SimSiamNet make_simsiam(const nets::NetworkSpec& spec, std::uint64_t seed);

/// SimSiam network restored from a checkpoint holding encoder, projector and predictor.
nets::SimSiamNet simsiam_from_checkpoint(const nets::Checkpoint& ckpt);

nets::TensorMap simsiam_state(const nets::SimSiamNet& net);

/// Trains on in-memory images already sized spec.input_size.
PretrainResult pretrain_on_images(const std::vector<ImageF>& images, const nets::NetworkSpec& spec,
                                  const augment::AugmentationPolicy& policy,
                                  const PretrainConfig& cfg, const PretrainOptions& opts = {});

PretrainResult pretrain(const regions::RegionSetManifest& regions, const nets::NetworkSpec& spec,
                        const augment::AugmentationPolicy& policy, const PretrainConfig& cfg,
                        const PretrainOptions& opts = {});

void write_step_log(const std::filesystem::path& path, const std::vector<StepRecord>& steps,
                    const std::vector<std::string>& warnings);
void plot_loss_curve(const std::filesystem::path& path, const std::vector<StepRecord>& steps,
                     const std::string& title);

} // namespace separeg::contrastive
