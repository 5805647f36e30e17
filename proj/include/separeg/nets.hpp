// SPDX-License-Identifier: Apache-2.0
//
// Encoder, projection heads and the U-Net used for fine-tuning.
//
// Encoder profiles (single-channel input):
//
//   resnet50_trunc  ResNet-50 without global pool and classifier; global average
//                   pooling of layer4 gives a 2048-d feature. Inputs must be a
//                   multiple of 32.
//                   stages: stem /2 (64) | layer1 /4 (256) | layer2 /8 (512)
//                           layer3 /16 (1024) | layer4 /32 (2048)
//   tiny_conv       four conv stages (two 3x3 conv+BN+ReLU each), strides 1,2,2,2,
//                   channels feature_dim/8, /4, /2, feature_dim. Inputs must be a
//                   multiple of 8.
//
// U-Net skip mapping: every encoder stage but the deepest is a skip. Decoding
// starts from the deepest stage; each decoder block upsamples (bilinear, to the
// skip's exact size), concatenates the skip and applies two conv+BN+ReLU. When
// the shallowest stage is below input resolution (resnet50_trunc) one more
// block runs at full resolution without a skip. A 1x1 conv produces class
// scores.

#pragma once

#include "json.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace separeg::nets {

enum class EncoderKind { resnet50_trunc, tiny_conv };

std::string to_string(EncoderKind k);
EncoderKind encoder_kind_from_string(const std::string& s);

struct NetworkSpec {
    EncoderKind encoder_kind = EncoderKind::tiny_conv;
    std::int64_t feature_dim = 128;
    std::int64_t proj_hidden = 256;
    std::int64_t proj_out = 64;
    std::int64_t input_size = 32;

    /// ResNet-50 trunk, 4096-wide heads with 256-d output, 128x128 inputs.
    static NetworkSpec paper();
    /// CPU-scale profile for tests and desk runs.
    static NetworkSpec tiny();

    void validate() const;
    /// Spatial multiple the encoder requires.
    std::int64_t size_multiple() const;

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

void to_json(nlohmann::json& j, const NetworkSpec& s);
void from_json(const nlohmann::json& j, NetworkSpec& s);

/// Trainable parameter count of the resnet50_trunc encoder (single-channel stem).
inline constexpr std::int64_t kResNet50TruncParameterCount = 23'501'760;

class BottleneckImpl : public torch::nn::Module {
public:
    BottleneckImpl(std::int64_t in_ch, std::int64_t planes, std::int64_t stride);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
    torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(const NetworkSpec& spec);

    /// (B, 1, H, W) -> (B, feature_dim).
    torch::Tensor forward(const torch::Tensor& x);
    /// Stage outputs, shallowest first.
    std::vector<torch::Tensor> forward_stages(const torch::Tensor& x);

    const std::vector<std::int64_t>& stage_channels() const { return channels_; }
    const NetworkSpec& spec() const { return spec_; }

private:
    void check_input(const torch::Tensor& x) const;

    NetworkSpec spec_;
    std::vector<torch::nn::Sequential> stages_;
    std::vector<std::int64_t> channels_;
};
TORCH_MODULE(Encoder);

/// Linear -> BatchNorm1d -> ReLU -> Linear. Used for both projector and predictor.
class MlpHeadImpl : public torch::nn::Module {
public:
    MlpHeadImpl(std::int64_t in_dim, std::int64_t hidden, std::int64_t out_dim);
    torch::Tensor forward(const torch::Tensor& x);
    std::int64_t in_dim() const { return in_dim_; }

private:
    std::int64_t in_dim_;
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
    torch::nn::BatchNorm1d bn{nullptr};
};
TORCH_MODULE(MlpHead);

MlpHead make_projector(const NetworkSpec& spec);
MlpHead make_predictor(const NetworkSpec& spec);

/// Encoder + projector + predictor, the unit a contrastive run trains.
class SimSiamNetImpl : public torch::nn::Module {
public:
    explicit SimSiamNetImpl(const NetworkSpec& spec);
    Encoder encoder{nullptr};
    MlpHead projector{nullptr};
    MlpHead predictor{nullptr};
};
TORCH_MODULE(SimSiamNet);

class UNetImpl : public torch::nn::Module {
public:
    UNetImpl(const NetworkSpec& spec, std::int64_t n_classes);

    /// (B, 1, H, W) -> (B, n_classes, H, W); H and W must be multiples of 16.
    torch::Tensor forward(const torch::Tensor& x);

    Encoder encoder{nullptr};
    std::int64_t n_classes() const { return n_classes_; }
    const NetworkSpec& spec() const { return spec_; }

private:
    NetworkSpec spec_;
    std::int64_t n_classes_;
    std::vector<torch::nn::Sequential> decoder_;
    torch::nn::Sequential full_res_{nullptr};
    torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(UNet);

std::int64_t parameter_count(const torch::nn::Module& m);

} // namespace separeg::nets
