// SPDX-License-Identifier: Apache-2.0

#include "separeg/nets.hpp"

#include "separeg/errors.hpp"

namespace separeg::nets {

using nlohmann::json;
namespace nn = torch::nn;

std::string to_string(EncoderKind k) {
    return k == EncoderKind::resnet50_trunc ? "resnet50_trunc" : "tiny_conv";
}

EncoderKind encoder_kind_from_string(const std::string& s) {
    if (s == "resnet50_trunc")
        return EncoderKind::resnet50_trunc;
    if (s == "tiny_conv")
        return EncoderKind::tiny_conv;
    throw ValidationError("unknown encoder kind '" + s + "'");
}

NetworkSpec NetworkSpec::paper() {
    return {EncoderKind::resnet50_trunc, 2048, 4096, 256, 128};
}

NetworkSpec NetworkSpec::tiny() {
    return {EncoderKind::tiny_conv, 128, 256, 64, 32};
}

std::int64_t NetworkSpec::size_multiple() const {
    return encoder_kind == EncoderKind::resnet50_trunc ? 32 : 8;
}

void NetworkSpec::validate() const {
    if (encoder_kind == EncoderKind::resnet50_trunc && feature_dim != 2048)
        throw ValidationError("resnet50_trunc produces 2048-d features, spec says " +
                              std::to_string(feature_dim));
    if (encoder_kind == EncoderKind::tiny_conv && (feature_dim < 8 || feature_dim % 8 != 0))
        throw ValidationError("tiny_conv feature_dim must be a positive multiple of 8");
    if (proj_hidden < 1 || proj_out < 1)
        throw ValidationError("projection dimensions must be positive");
    if (input_size < size_multiple() || input_size % size_multiple() != 0)
        throw ValidationError("input_size " + std::to_string(input_size) + " must be a multiple of " +
                              std::to_string(size_multiple()));
}

void to_json(json& j, const NetworkSpec& s) {
    j = json{{"encoder_kind", to_string(s.encoder_kind)},
             {"feature_dim", s.feature_dim},
             {"proj_hidden", s.proj_hidden},
             {"proj_out", s.proj_out},
             {"input_size", s.input_size}};
}

void from_json(const json& j, NetworkSpec& s) {
    s.encoder_kind = encoder_kind_from_string(j.at("encoder_kind").get<std::string>());
    s.feature_dim = j.at("feature_dim").get<std::int64_t>();
    s.proj_hidden = j.at("proj_hidden").get<std::int64_t>();
    s.proj_out = j.at("proj_out").get<std::int64_t>();
    s.input_size = j.at("input_size").get<std::int64_t>();
}

namespace {

nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(false));
}

nn::Sequential conv_bn_relu_x2(std::int64_t in, std::int64_t out, std::int64_t stride) {
    return nn::Sequential(conv(in, out, 3, stride), nn::BatchNorm2d(out), nn::ReLU(),
                          conv(out, out, 3), nn::BatchNorm2d(out), nn::ReLU());
}

} // namespace

BottleneckImpl::BottleneckImpl(std::int64_t in_ch, std::int64_t planes, std::int64_t stride) {
    const std::int64_t out_ch = planes * 4;
    conv1 = register_module("conv1", conv(in_ch, planes, 1));
    bn1 = register_module("bn1", nn::BatchNorm2d(planes));
    conv2 = register_module("conv2", conv(planes, planes, 3, stride));
    bn2 = register_module("bn2", nn::BatchNorm2d(planes));
    conv3 = register_module("conv3", conv(planes, out_ch, 1));
    bn3 = register_module("bn3", nn::BatchNorm2d(out_ch));
    if (stride != 1 || in_ch != out_ch)
        downsample = register_module(
            "downsample", nn::Sequential(conv(in_ch, out_ch, 1, stride), nn::BatchNorm2d(out_ch)));
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = torch::relu(bn2(conv2(y)));
    y = bn3(conv3(y));
    const auto identity = downsample ? downsample->forward(x) : x;
    return torch::relu(y + identity);
}

namespace {

nn::Sequential resnet_layer(std::int64_t& in_ch, std::int64_t planes, int blocks,
                            std::int64_t stride, bool leading_pool) {
    nn::Sequential layer;
    if (leading_pool)
        layer->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
    for (int b = 0; b < blocks; ++b) {
        layer->push_back(Bottleneck(in_ch, planes, b == 0 ? stride : 1));
        in_ch = planes * 4;
    }
    return layer;
}

} // namespace

EncoderImpl::EncoderImpl(const NetworkSpec& spec) : spec_(spec) {
    spec_.validate();
    if (spec_.encoder_kind == EncoderKind::resnet50_trunc) {
        stages_.push_back(nn::Sequential(
            nn::Conv2d(nn::Conv2dOptions(1, 64, 7).stride(2).padding(3).bias(false)),
            nn::BatchNorm2d(64), nn::ReLU()));
        std::int64_t in_ch = 64;
        stages_.push_back(resnet_layer(in_ch, 64, 3, 1, true));
        stages_.push_back(resnet_layer(in_ch, 128, 4, 2, false));
        stages_.push_back(resnet_layer(in_ch, 256, 6, 2, false));
        stages_.push_back(resnet_layer(in_ch, 512, 3, 2, false));
        channels_ = {64, 256, 512, 1024, 2048};
        const char* names[] = {"stem", "layer1", "layer2", "layer3", "layer4"};
        for (std::size_t i = 0; i < stages_.size(); ++i)
            register_module(names[i], stages_[i]);
    } else {
        const std::int64_t f = spec_.feature_dim;
        channels_ = {f / 8, f / 4, f / 2, f};
        std::int64_t in_ch = 1;
        for (std::size_t i = 0; i < channels_.size(); ++i) {
            stages_.push_back(conv_bn_relu_x2(in_ch, channels_[i], i == 0 ? 1 : 2));
            register_module("stage" + std::to_string(i + 1), stages_.back());
            in_ch = channels_[i];
        }
    }
}

void EncoderImpl::check_input(const torch::Tensor& x) const {
    if (x.dim() != 4 || x.size(1) != 1)
        throw ValidationError("encoder expects a (B, 1, H, W) batch");
    const auto m = spec_.size_multiple();
    if (x.size(2) < m || x.size(3) < m || x.size(2) % m != 0 || x.size(3) % m != 0)
        throw ValidationError(to_string(spec_.encoder_kind) + " needs spatial size a multiple of " +
                              std::to_string(m) + ", got " + std::to_string(x.size(2)) + "x" +
                              std::to_string(x.size(3)));
}

std::vector<torch::Tensor> EncoderImpl::forward_stages(const torch::Tensor& x) {
    std::vector<torch::Tensor> out;
    out.reserve(stages_.size());
    auto y = x;
    for (auto& stage : stages_) {
        y = stage->forward(y);
        out.push_back(y);
    }
    return out;
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x) {
    check_input(x);
    auto y = x;
    for (auto& stage : stages_)
        y = stage->forward(y);
    return torch::adaptive_avg_pool2d(y, {1, 1}).flatten(1);
}

MlpHeadImpl::MlpHeadImpl(std::int64_t in_dim, std::int64_t hidden, std::int64_t out_dim)
    : in_dim_(in_dim) {
    fc1 = register_module("fc1", nn::Linear(in_dim, hidden));
    bn = register_module("bn", nn::BatchNorm1d(hidden));
    fc2 = register_module("fc2", nn::Linear(hidden, out_dim));
}

torch::Tensor MlpHeadImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 2 || x.size(1) != in_dim_)
        throw ValidationError("head expects (B, " + std::to_string(in_dim_) + ") input, got " +
                              (x.dim() == 2 ? "(B, " + std::to_string(x.size(1)) + ")"
                                            : std::to_string(x.dim()) + "-d tensor"));
    return fc2(torch::relu(bn(fc1(x))));
}

MlpHead make_projector(const NetworkSpec& spec) {
    return MlpHead(spec.feature_dim, spec.proj_hidden, spec.proj_out);
}

MlpHead make_predictor(const NetworkSpec& spec) {
    return MlpHead(spec.proj_out, spec.proj_hidden, spec.proj_out);
}

SimSiamNetImpl::SimSiamNetImpl(const NetworkSpec& spec) {
    encoder = register_module("encoder", Encoder(spec));
    projector = register_module("projector", make_projector(spec));
    predictor = register_module("predictor", make_predictor(spec));
}

UNetImpl::UNetImpl(const NetworkSpec& spec, std::int64_t n_classes)
    : spec_(spec), n_classes_(n_classes) {
    if (n_classes < 2)
        throw ValidationError("U-Net needs at least 2 classes (background + foreground)");
    encoder = register_module("encoder", Encoder(spec));
    const auto& ch = encoder->stage_channels();
    const bool tiny = spec.encoder_kind == EncoderKind::tiny_conv;
    static constexpr std::int64_t resnet_widths[] = {32, 64, 128, 256};

    std::int64_t prev = ch.back();
    for (int skip = static_cast<int>(ch.size()) - 2; skip >= 0; --skip) {
        const std::int64_t out = tiny ? ch[skip] : resnet_widths[skip];
        decoder_.push_back(conv_bn_relu_x2(prev + ch[skip], out, 1));
        register_module("decoder" + std::to_string(skip), decoder_.back());
        prev = out;
    }
    if (!tiny) {
        full_res_ = register_module("full_res", conv_bn_relu_x2(prev, 16, 1));
        prev = 16;
    }
    head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(prev, n_classes, 1)));
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != 1)
        throw ValidationError("U-Net expects a (B, 1, H, W) batch");
    if (x.size(2) % 16 != 0 || x.size(3) % 16 != 0 || x.size(2) == 0 || x.size(3) == 0)
        throw ValidationError("U-Net input size must be a multiple of 16");
    const auto stages = encoder->forward_stages(x);
    namespace F = torch::nn::functional;
    auto up_to = [](const torch::Tensor& t, std::int64_t h, std::int64_t w) {
        return F::interpolate(t, F::InterpolateFuncOptions()
                                     .size(std::vector<std::int64_t>{h, w})
                                     .mode(torch::kBilinear)
                                     .align_corners(false));
    };
    auto y = stages.back();
    std::size_t block = 0;
    for (int skip = static_cast<int>(stages.size()) - 2; skip >= 0; --skip, ++block) {
        const auto& s = stages[skip];
        y = decoder_[block]->forward(torch::cat({up_to(y, s.size(2), s.size(3)), s}, 1));
    }
    if (full_res_)
        y = full_res_->forward(up_to(y, x.size(2), x.size(3)));
    return head_(y);
}

std::int64_t parameter_count(const torch::nn::Module& m) {
    std::int64_t n = 0;
    for (const auto& p : m.parameters())
        n += p.numel();
    return n;
}

} // namespace separeg::nets
