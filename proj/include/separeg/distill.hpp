// SPDX-License-Identifier: Apache-2.0
//
// Intra-organ teachers and dual-loss distillation into a student encoder.
//
//   L_intra = mean_i KL( softmax(f_s,i / T) || softmax(f_k(i),i / T) )
//   L_inter = D( g(f_s), z_hat )
//   L       = w_intra L_intra + w_inter L_inter
//
// f_s is the student feature, f_k(i) the feature of the intra teacher owning
// region i's cluster, g a trainable copy of the inter-organ projector and
// z_hat the frozen inter-organ projection of the same input.

#pragma once

#include "separeg/augment.hpp"
#include "separeg/checkpoint.hpp"
#include "separeg/contrastive.hpp"
#include "separeg/nets.hpp"
#include "separeg/optim.hpp"
#include "separeg/regions.hpp"

#include "json.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace separeg::distill {

/// Batch-mean KL(softmax(f_student/T) || softmax(f_teacher/T)).
torch::Tensor intra_loss(const torch::Tensor& f_student, const torch::Tensor& f_teacher,
                         double temperature);

/// Cosine loss between projector(f_student) and z_hat.
torch::Tensor inter_loss(const torch::Tensor& f_student, nets::MlpHead& projector,
                         const torch::Tensor& z_hat);

struct IntraResult {
    /// One checkpoint per non-empty subset, stage intra with stage_index = cluster.
    std::vector<nets::Checkpoint> checkpoints;
    std::vector<std::vector<contrastive::StepRecord>> steps;
    std::vector<std::string> warnings;
};

/// Independent contrastive run per subset with seed cfg.seed + k. Empty
/// subsets are skipped with a warning; all empty is a ValidationError. With a
/// non-empty log_dir each run writes intra_<k>.jsonl and intra_<k>.png there.
IntraResult pretrain_intra(const std::vector<regions::RegionSetManifest>& subsets,
                           const nets::NetworkSpec& spec, const augment::AugmentationPolicy& policy,
                           const contrastive::PretrainConfig& cfg,
                           const std::filesystem::path& log_dir = {});

struct DistillConfig {
    double temperature = 1.0;
    long iterations = 100000;
    int batch_size = 32;
    optim::OptimizerConfig optimizer;
    std::uint64_t seed = 0;
    double w_intra = 1.0;
    double w_inter = 1.0;
    /// Start the student from the inter-organ encoder instead of random weights.
    bool warm_start = false;
    /// Keep the projector used in L_inter frozen instead of training a copy.
    bool frozen_projector = false;

    void validate() const;
    friend bool operator==(const DistillConfig&, const DistillConfig&) = default;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

struct TeacherBundle {
    nets::Checkpoint inter;
    /// Intra teachers; stage_index identifies the owning cluster.
    std::vector<nets::Checkpoint> intra;
    int k = 0;
};

/// SHA-256 over every teacher tensor.
std::string teacher_hash(const TeacherBundle& t);

struct DistillStep {
    long iteration = 0;
    double total = 0;
    double intra = 0;
    double inter = 0;
    double lr = 0;
};

struct DistillResult {
    nets::Checkpoint student;
    std::vector<DistillStep> steps;
    /// Hash of the live teacher modules before and after training.
    std::string teacher_hash_before;
    std::string teacher_hash_after;
};

struct DistillOptions {
    std::filesystem::path log_path;
    std::filesystem::path plot_path;
};

/// `cluster_ids[i]` selects the intra teacher for `images[i]`.
DistillResult distill_on_images(const std::vector<ImageF>& images, const std::vector<int>& cluster_ids,
                                const TeacherBundle& teachers,
                                const augment::AugmentationPolicy& policy, const DistillConfig& cfg,
                                const DistillOptions& opts = {});

/// Every region must carry a cluster_id.
DistillResult distill(const regions::RegionSetManifest& labelled, const TeacherBundle& teachers,
                      const augment::AugmentationPolicy& policy, const DistillConfig& cfg,
                      const DistillOptions& opts = {});

} // namespace separeg::distill
