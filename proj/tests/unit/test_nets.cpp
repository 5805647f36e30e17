// SPDX-License-Identifier: Apache-2.0

#include "support/test.hpp"

#include "separeg/augment.hpp"
#include "separeg/checkpoint.hpp"
#include "separeg/errors.hpp"
#include "separeg/nets.hpp"
#include "separeg/optim.hpp"

#include <cmath>
#include <random>

using namespace separeg;
using namespace separeg::nets;

TEST_SUITE("nets") {

TEST_CASE("resnet50 trunk has the torchvision parameter count for one input channel") {
    Encoder enc(NetworkSpec::paper());
    CHECK(parameter_count(*enc) == kResNet50TruncParameterCount);
    CHECK(kResNet50TruncParameterCount == 23'501'760);
}

TEST_CASE("paper-profile heads map 2048 -> 256") {
    const auto spec = NetworkSpec::paper();
    CHECK(spec.feature_dim == 2048);
    CHECK(spec.proj_out == 256);
    auto proj = make_projector(spec);
    proj->eval();
    torch::NoGradGuard ng;
    CHECK(proj->forward(torch::randn({3, 2048})).sizes() == torch::IntArrayRef{3, 256});
}

TEST_CASE("tiny encoder and U-Net shapes") {
    const auto spec = NetworkSpec::tiny();
    Encoder enc(spec);
    enc->eval();
    torch::NoGradGuard ng;
    const auto x = torch::rand({2, 1, 32, 32});
    CHECK(enc->forward(x).sizes() == torch::IntArrayRef{2, spec.feature_dim});
    const auto stages = enc->forward_stages(x);
    CHECK(stages.size() == 4);
    CHECK(stages.back().size(2) == 4);
    UNet unet(spec, 3);
    unet->eval();
    CHECK(unet->forward(torch::rand({2, 1, 64, 48})).sizes() == torch::IntArrayRef{2, 3, 64, 48});
    CHECK_THROWS(enc->forward(torch::rand({1, 1, 30, 30})));
}

TEST_CASE("network spec validation") {
    auto spec = NetworkSpec::tiny();
    spec.input_size = 36;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec = NetworkSpec::tiny();
    spec.feature_dim = 0;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
}

}

TEST_SUITE("checkpoint") {

namespace {

Checkpoint sample_checkpoint() {
    torch::manual_seed(3);
    SimSiamNet net(NetworkSpec::tiny());
    Checkpoint c;
    c.stage = Stage::intra;
    c.stage_index = 1;
    c.spec = NetworkSpec::tiny();
    c.config_hash = "abc";
    c.rng_state = "42";
    c.meta = {{"iterations", 5}};
    for (auto& [k, v] : state_of(*net->encoder, "encoder."))
        c.tensors[k] = v;
    c.tensors["extra.i64"] = torch::arange(5, torch::kLong);
    c.tensors["extra.f64"] = torch::rand({2, 2}, torch::kDouble);
    return c;
}

} // namespace

TEST_CASE("serialize -> deserialize -> serialize is byte stable") {
    const auto c = sample_checkpoint();
    const auto bytes = serialize_checkpoint(c);
    const auto back = deserialize_checkpoint(bytes);
    CHECK(serialize_checkpoint(back) == bytes);
    CHECK(back.stage_tag() == "intra_1");
    CHECK(back.meta == c.meta);
    CHECK(tensors_hash(back.tensors) == tensors_hash(c.tensors));
    for (const auto& [k, v] : c.tensors)
        CHECK(torch::equal(back.tensors.at(k), v));
}

TEST_CASE("damaged archives are format errors") {
    const auto bytes = serialize_checkpoint(sample_checkpoint());
    CHECK_THROWS_AS(deserialize_checkpoint("NOTACKPT" + bytes.substr(8)), FormatError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 1)), FormatError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, 12)), FormatError);
}

TEST_CASE("stage tags") {
    int k = -1;
    CHECK(stage_from_tag("intra_3", &k) == Stage::intra);
    CHECK(k == 3);
    CHECK(stage_from_tag("student") == Stage::student);
    CHECK_THROWS(stage_from_tag("teacher"));
}

TEST_CASE("encoder weights transfer bit-exactly into the U-Net") {
    auto c = sample_checkpoint();
    c.stage = Stage::inter;
    c.stage_index = -1;
    auto unet = make_unet(NetworkSpec::tiny(), 3, c, 0);
    for (const auto& [k, v] : state_of(*unet->encoder, "encoder."))
        CHECK(torch::equal(v, c.tensors.at(k)));
}

TEST_CASE("mapping errors name the problem") {
    auto c = sample_checkpoint();
    c.stage = Stage::finetuned;
    CHECK_THROWS_AS(make_unet(NetworkSpec::tiny(), 2, c, 0), MappingError);
    c.stage = Stage::inter;
    c.tensors.erase(c.tensors.begin()->first);
    CHECK_THROWS_AS(make_unet(NetworkSpec::tiny(), 2, c, 0), MappingError);
    auto other = sample_checkpoint();
    other.stage = Stage::inter;
    auto spec = NetworkSpec::tiny();
    spec.feature_dim = 64;
    CHECK_THROWS_AS(make_unet(spec, 2, other, 0), MappingError);
}

TEST_CASE("seeded initialization is reproducible") {
    auto a = make_unet(NetworkSpec::tiny(), 2, std::nullopt, 9);
    auto b = make_unet(NetworkSpec::tiny(), 2, std::nullopt, 9);
    CHECK(tensors_hash(state_of(*a, "unet.")) == tensors_hash(state_of(*b, "unet.")));
}

}

TEST_SUITE("augment") {

TEST_CASE("views are in range, sized, and reproducible from the generator state") {
    augment::AugmentationPolicy p;
    p.out_size = 32;
    ImageF img(20, 28);
    for (std::size_t i = 0; i < img.size(); ++i)
        img.data[i] = static_cast<float>(i % 17) / 16.0f;
    std::mt19937_64 r1(5), r2(5);
    for (int t = 0; t < 20; ++t) {
        const auto a = augment::augment(img, p, r1);
        const auto b = augment::augment(img, p, r2);
        CHECK(a == b);
        CHECK(a.rows == 32);
        CHECK(a.cols == 32);
        for (float v : a.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    const auto batch = augment::to_batch({img, img});
    CHECK(batch.sizes() == torch::IntArrayRef{2, 1, 20, 28});
}

TEST_CASE("identity policy only resizes") {
    augment::AugmentationPolicy p;
    p.out_size = 16;
    p.crop_scale = {1.0, 1.0};
    p.crop_ratio = {1.0, 1.0};
    p.hflip_prob = 0;
    p.jitter_prob = 0;
    p.blur_prob = 0;
    std::mt19937_64 rng(0);
    const auto v = augment::augment(ImageF(16, 16, 0.3f), p, rng);
    for (float x : v.data)
        CHECK(x == doctest::Approx(0.3));
    p.crop_scale = {0.9, 0.1};
    CHECK_THROWS(p.validate());
}

}

TEST_SUITE("optim") {

TEST_CASE("half-cosine schedule") {
    optim::OptimizerConfig c;
    c.lr = 0.1;
    CHECK(optim::scheduled_lr(c, 0, 100) == doctest::Approx(0.1));
    CHECK(optim::scheduled_lr(c, 50, 100) == doctest::Approx(0.05));
    CHECK(optim::scheduled_lr(c, 100, 100) == doctest::Approx(0.0).epsilon(1e-12));
    c.cosine_schedule = false;
    CHECK(optim::scheduled_lr(c, 70, 100) == doctest::Approx(0.1));
    CHECK(0.05 * 32 / 256 == doctest::Approx(optim::OptimizerConfig{}.lr));
}

}
