// SPDX-License-Identifier: Apache-2.0

#include "separeg/contrastive.hpp"

#include "separeg/errors.hpp"
#include "separeg/hashing.hpp"
#include "separeg/plotting.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace separeg::contrastive {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_pair(const torch::Tensor& p, const torch::Tensor& z) {
    if (p.dim() != 2 || p.sizes() != z.sizes())
        throw ValidationError("cosine loss needs two (B, d) tensors of equal shape, got " +
                              c10::str(p.sizes()) + " and " + c10::str(z.sizes()));
    if (p.size(0) == 0)
        throw ValidationError("cosine loss on an empty batch");
}

torch::Tensor normalize_rows(const torch::Tensor& x, double eps) {
    return x / x.norm(2, 1, true).clamp_min(eps);
}

} // namespace

torch::Tensor cosine_similarity_loss(const torch::Tensor& p, const torch::Tensor& z, double eps) {
    check_pair(p, z);
    if (eps < 0)
        throw ValidationError("eps must be non-negative");
    if (eps == 0) {
        const auto zero_rows = (p.norm(2, 1) == 0).logical_or(z.norm(2, 1) == 0);
        if (zero_rows.any().item<bool>())
            throw ValidationError("zero-norm row in cosine loss and no eps floor");
    }
    return -(normalize_rows(p, eps) * normalize_rows(z, eps)).sum(1).mean();
}

torch::Tensor simsiam_loss(const torch::Tensor& p1, const torch::Tensor& z1,
                           const torch::Tensor& p2, const torch::Tensor& z2, bool stop_gradient) {
    const auto t1 = stop_gradient ? z1.detach() : z1;
    const auto t2 = stop_gradient ? z2.detach() : z2;
    return 0.5 * cosine_similarity_loss(p1, t2) + 0.5 * cosine_similarity_loss(p2, t1);
}

double collapse_std(const torch::Tensor& z) {
    torch::NoGradGuard no_grad;
    const auto zn = normalize_rows(z.detach().to(torch::kFloat64), 1e-12);
    return zn.std(0, /*unbiased=*/true).mean().item<double>();
}

void PretrainConfig::validate() const {
    if (total_iterations < 0)
        throw ValidationError("total_iterations must be non-negative");
    if (batch_size < 2)
        throw ValidationError("batch_size must be at least 2 (batch normalization)");
    if (collapse_window < 1)
        throw ValidationError("collapse_window must be positive");
    optimizer.validate();
}

void to_json(json& j, const PretrainConfig& c) {
    j = json{{"total_iterations", c.total_iterations},
             {"batch_size", c.batch_size},
             {"optimizer", c.optimizer},
             {"stop_gradient", c.stop_gradient},
             {"seed", c.seed},
             {"collapse_ratio", c.collapse_ratio},
             {"collapse_window", c.collapse_window}};
}

void from_json(const json& j, PretrainConfig& c) {
    PretrainConfig d;
    c.total_iterations = j.value("total_iterations", d.total_iterations);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.optimizer = j.value("optimizer", d.optimizer);
    c.stop_gradient = j.value("stop_gradient", d.stop_gradient);
    c.seed = j.value("seed", d.seed);
    c.collapse_ratio = j.value("collapse_ratio", d.collapse_ratio);
    c.collapse_window = j.value("collapse_window", d.collapse_window);
}

nets::SimSiamNet make_simsiam(const nets::NetworkSpec& spec, std::uint64_t seed) {
    torch::manual_seed(seed);
    return nets::SimSiamNet(spec);
}

nets::TensorMap simsiam_state(const nets::SimSiamNet& net) {
    auto state = nets::state_of(*net->encoder, "encoder.");
    state.merge(nets::state_of(*net->projector, "projector."));
    state.merge(nets::state_of(*net->predictor, "predictor."));
    return state;
}

nets::SimSiamNet simsiam_from_checkpoint(const nets::Checkpoint& ckpt) {
    nets::SimSiamNet net(ckpt.spec);
    nets::load_state(*net->encoder, ckpt.tensors, "encoder.");
    nets::load_state(*net->projector, ckpt.tensors, "projector.");
    nets::load_state(*net->predictor, ckpt.tensors, "predictor.");
    return net;
}

PretrainResult pretrain_on_images(const std::vector<ImageF>& images, const nets::NetworkSpec& spec,
                                  const augment::AugmentationPolicy& policy,
                                  const PretrainConfig& cfg, const PretrainOptions& opts) {
    spec.validate();
    policy.validate();
    cfg.validate();
    if (images.empty())
        throw ValidationError("pretraining needs at least one region");
    if (policy.out_size != spec.input_size)
        throw ValidationError("augmentation out_size " + std::to_string(policy.out_size) +
                              " differs from network input_size " + std::to_string(spec.input_size));

    torch::set_num_threads(1);
    auto net = make_simsiam(spec, cfg.seed);
    net->train();
    auto optimizer = optim::make_optimizer(cfg.optimizer, net->parameters());
    std::mt19937_64 rng(cfg.seed);

    PretrainResult result;
    result.steps.reserve(static_cast<std::size_t>(cfg.total_iterations));
    const double collapse_threshold = cfg.collapse_ratio / std::sqrt(static_cast<double>(spec.proj_out));
    int below = 0;

    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();

    std::vector<ImageF> view1, view2;
    for (long it = 0; it < cfg.total_iterations; ++it) {
        view1.clear();
        view2.clear();
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const auto& img = images[order[cursor++]];
            view1.push_back(augment::augment(img, policy, rng));
            view2.push_back(augment::augment(img, policy, rng));
        }
        const double lr = optim::scheduled_lr(cfg.optimizer, it, cfg.total_iterations);
        optim::set_lr(*optimizer, lr);

        const auto z1 = net->projector(net->encoder(augment::to_batch(view1)));
        const auto z2 = net->projector(net->encoder(augment::to_batch(view2)));
        const auto loss = simsiam_loss(net->predictor(z1), z1, net->predictor(z2), z2, cfg.stop_gradient);
        optimizer->zero_grad();
        loss.backward();
        optimizer->step();

        StepRecord rec{it, loss.item<double>(), lr, collapse_std(z1)};
        result.steps.push_back(rec);
        below = rec.z_std < collapse_threshold ? below + 1 : 0;
        if (below == cfg.collapse_window) {
            std::ostringstream msg;
            msg << "collapse: normalized projection std below " << collapse_threshold << " for "
                << cfg.collapse_window << " steps (iteration " << it << ")";
            result.warnings.push_back(msg.str());
        }
    }

    std::ostringstream rng_state;
    rng_state << rng;
    auto& ckpt = result.checkpoint;
    ckpt.stage = opts.stage;
    ckpt.stage_index = opts.stage_index;
    ckpt.spec = spec;
    ckpt.config_hash = config_hash(json{{"augment", policy}, {"pretrain", cfg}, {"spec", spec}});
    ckpt.rng_state = rng_state.str();
    ckpt.meta = {{"iterations", cfg.total_iterations},
                 {"n_regions", images.size()},
                 {"final_loss", result.steps.empty() ? json(nullptr) : json(result.steps.back().loss)}};
    ckpt.tensors = simsiam_state(net);

    if (!opts.log_path.empty())
        write_step_log(opts.log_path, result.steps, result.warnings);
    if (!opts.plot_path.empty())
        plot_loss_curve(opts.plot_path, result.steps, "contrastive loss (" + ckpt.stage_tag() + ")");
    return result;
}

PretrainResult pretrain(const regions::RegionSetManifest& regions, const nets::NetworkSpec& spec,
                        const augment::AugmentationPolicy& policy, const PretrainConfig& cfg,
                        const PretrainOptions& opts) {
    if (regions.empty())
        throw ValidationError("region set is empty");
    return pretrain_on_images(regions::load_region_images(regions, static_cast<int>(spec.input_size)),
                              spec, policy, cfg, opts);
}

void write_step_log(const fs::path& path, const std::vector<StepRecord>& steps,
                    const std::vector<std::string>& warnings) {
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoError("cannot write training log: " + path.string());
    for (const auto& s : steps)
        out << json{{"iteration", s.iteration}, {"loss", s.loss}, {"lr", s.lr}, {"z_std", s.z_std}}.dump()
            << '\n';
    for (const auto& w : warnings)
        out << json{{"event", "warning"}, {"message", w}}.dump() << '\n';
}

void plot_loss_curve(const fs::path& path, const std::vector<StepRecord>& steps,
                     const std::string& title) {
    plotting::Series raw{"loss", {}, {}};
    plotting::Series smooth{"moving mean (50)", {}, {}};
    double window_sum = 0;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        raw.x.push_back(static_cast<double>(steps[i].iteration));
        raw.y.push_back(steps[i].loss);
        window_sum += steps[i].loss;
        if (i >= 50)
            window_sum -= steps[i - 50].loss;
        smooth.x.push_back(raw.x.back());
        smooth.y.push_back(window_sum / static_cast<double>(std::min<std::size_t>(i + 1, 50)));
    }
    plotting::line_plot(path, title, {raw, smooth}, "iteration", "loss");
}

} // namespace separeg::contrastive
