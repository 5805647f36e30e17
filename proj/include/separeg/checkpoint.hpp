// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint archive. Layout (little-endian):
//
//   bytes 0..7    magic "SPRGCKPT"
//   bytes 8..15   uint64 header length N
//   next N bytes  JSON header (sorted keys):
//                   format        1
//                   stage         "inter" | "intra_<k>" | "student" | "finetuned"
//                   spec          NetworkSpec
//                   config_hash   hex string
//                   rng_state     opaque string
//                   meta          free-form object (e.g. n_classes)
//                   tensors       [{name, dtype, shape, offset, nbytes}] sorted by name
//   remainder     raw tensor bytes, C-contiguous, at the listed offsets
//
// dtype is one of "float32", "float64", "int64". Parameter names are the
// libtorch module paths prefixed by the owning network ("encoder.", "projector.",
// "predictor.", "unet.").

#pragma once

#include "separeg/nets.hpp"

#include "json.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace separeg::nets {

enum class Stage { inter, intra, student, finetuned };

using TensorMap = std::map<std::string, torch::Tensor>;

struct Checkpoint {
    Stage stage = Stage::inter;
    /// Cluster index for intra-organ checkpoints, -1 otherwise.
    int stage_index = -1;
    NetworkSpec spec;
    std::string config_hash;
    std::string rng_state;
    nlohmann::json meta = nlohmann::json::object();
    TensorMap tensors;

    std::string stage_tag() const;
};

Stage stage_from_tag(const std::string& tag, int* index = nullptr);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Detached clones of all parameters and buffers, keys prefixed with `prefix`.
TensorMap state_of(const torch::nn::Module& m, const std::string& prefix);

/// Copies tensors named `prefix + <module path>` into `m`. Every parameter and
/// buffer of `m` must be present with a matching shape, otherwise MappingError
/// lists the offenders.
void load_state(torch::nn::Module& m, const TensorMap& tensors, const std::string& prefix);

/// SHA-256 over names, dtypes, shapes and bytes of every tensor.
std::string tensors_hash(const TensorMap& tensors);

/// U-Net with seeded random initialization. When `encoder_init` is given its
/// "encoder." tensors are copied bit-exactly into the U-Net encoder.
UNet make_unet(const NetworkSpec& spec, std::int64_t n_classes,
               const std::optional<Checkpoint>& encoder_init, std::uint64_t seed);

} // namespace separeg::nets
