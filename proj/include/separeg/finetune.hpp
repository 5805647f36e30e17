// SPDX-License-Identifier: Apache-2.0
//
// U-Net fine-tuning on labelled slices and patient-level evaluation.
//
// Training uses 2D slices along `axis`. After every epoch the model is scored
// on the validation volumes (mean over patients of the class-mean DSC); the
// weights of the best epoch (first one on ties) are kept and evaluated on the
// test volumes, slice predictions stacked back into 3D.

#pragma once

#include "separeg/checkpoint.hpp"
#include "separeg/imaging_io.hpp"
#include "separeg/metrics.hpp"
#include "separeg/nets.hpp"
#include "separeg/optim.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace separeg::finetune {

struct FinetuneConfig {
    int epochs = 200;
    int batch_size = 8;
    optim::OptimizerConfig optimizer{"adam", 1e-3, 0.0, 0.0, false};
    /// Number of train-split volumes used (first n in manifest order); 0 = all.
    int n_train_volumes = 1;
    std::uint64_t seed = 0;
    bool freeze_encoder = false;
    int axis = 2;
    imaging::IntensityWindow window;
    /// Total classes including background; 0 infers max label + 1 from the data.
    int n_classes = 0;
    /// HD95 in physical units instead of voxels.
    bool hd95_mm = false;

    void validate() const;
};

void to_json(nlohmann::json& j, const FinetuneConfig& c);
void from_json(const nlohmann::json& j, FinetuneConfig& c);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0;
    double val_dsc = 0;
};

struct Hooks {
    /// Replaces validation scoring; receives the 1-based epoch.
    std::function<double(int epoch, nets::UNet& net)> validation;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct FinetuneData {
    std::vector<imaging::Volume> train;
    std::vector<imaging::Volume> val;
    std::vector<imaging::Volume> test;
};

/// Loads the splits named by the manifest and rejects overlapping ones.
FinetuneData load_finetune_data(const imaging::DatasetManifest& manifest, int n_train_volumes);

struct FinetuneResult {
    nets::Checkpoint checkpoint;  // stage finetuned, weights of the best epoch
    metrics::MetricsReport report;
    std::vector<EpochRecord> history;
    int best_epoch = 0;
};

FinetuneResult finetune(const FinetuneData& data, const nets::NetworkSpec& spec,
                        const FinetuneConfig& cfg, const std::optional<nets::Checkpoint>& init,
                        const Hooks& hooks = {});

/// One JSON object per epoch: epoch, train_loss, val_dsc.
void write_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

/// Argmax label volume for `v` predicted slice by slice along `axis`.
Grid3D<std::uint8_t> predict_volume(nets::UNet& net, const imaging::Volume& v, int axis,
                                    const imaging::IntensityWindow& window);

/// Per-patient DSC/HD95 for every foreground class.
metrics::MetricsReport evaluate(nets::UNet& net, const std::vector<imaging::Volume>& volumes,
                                int n_classes, int axis, const imaging::IntensityWindow& window,
                                bool hd95_mm = false);

/// Rebuilds the U-Net stored in a finetuned checkpoint.
nets::UNet unet_from_checkpoint(const nets::Checkpoint& ckpt);

} // namespace separeg::finetune
