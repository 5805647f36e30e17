// SPDX-License-Identifier: Apache-2.0

#include "separeg/finetune.hpp"

#include "separeg/errors.hpp"
#include "separeg/hashing.hpp"

#include <algorithm>
#include <fstream>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace separeg::finetune {

using nlohmann::json;

void FinetuneConfig::validate() const {
    if (epochs < 1)
        throw ValidationError("epochs must be positive");
    if (batch_size < 1)
        throw ValidationError("batch_size must be positive");
    if (n_train_volumes < 0)
        throw ValidationError("n_train_volumes must be non-negative (0 uses every train volume)");
    if (axis < 0 || axis > 2)
        throw ValidationError("axis must be 0, 1 or 2");
    if (!(window.lo < window.hi))
        throw ValidationError("intensity window needs lo < hi");
    if (n_classes == 1 || n_classes < 0)
        throw ValidationError("n_classes must be 0 (infer) or at least 2");
    optimizer.validate();
}

void to_json(json& j, const FinetuneConfig& c) {
    j = json{{"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"optimizer", c.optimizer},
             {"n_train_volumes", c.n_train_volumes},
             {"seed", c.seed},
             {"freeze_encoder", c.freeze_encoder},
             {"axis", c.axis},
             {"window", {c.window.lo, c.window.hi}},
             {"n_classes", c.n_classes},
             {"hd95_mm", c.hd95_mm}};
}

void from_json(const json& j, FinetuneConfig& c) {
    FinetuneConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.optimizer = j.value("optimizer", d.optimizer);
    c.n_train_volumes = j.value("n_train_volumes", d.n_train_volumes);
    c.seed = j.value("seed", d.seed);
    c.freeze_encoder = j.value("freeze_encoder", d.freeze_encoder);
    c.axis = j.value("axis", d.axis);
    const auto w = j.value("window", std::array<double, 2>{d.window.lo, d.window.hi});
    c.window = {w[0], w[1]};
    c.n_classes = j.value("n_classes", d.n_classes);
    c.hd95_mm = j.value("hd95_mm", d.hd95_mm);
}

FinetuneData load_finetune_data(const imaging::DatasetManifest& manifest, int n_train_volumes) {
    imaging::check_disjoint_splits(manifest);
    FinetuneData data;
    auto load = [](const std::vector<std::filesystem::path>& paths, std::vector<imaging::Volume>& out,
                   std::size_t limit) {
        for (std::size_t i = 0; i < paths.size() && i < limit; ++i)
            out.push_back(imaging::load_volume(paths[i]));
    };
    const auto limit = n_train_volumes > 0 ? static_cast<std::size_t>(n_train_volumes)
                                           : std::numeric_limits<std::size_t>::max();
    load(manifest.paths(imaging::Split::train), data.train, limit);
    load(manifest.paths(imaging::Split::val), data.val, std::numeric_limits<std::size_t>::max());
    load(manifest.paths(imaging::Split::test), data.test, std::numeric_limits<std::size_t>::max());
    if (n_train_volumes > 0 && static_cast<int>(data.train.size()) < n_train_volumes)
        throw ValidationError("requested " + std::to_string(n_train_volumes) + " train volumes, manifest has " +
                              std::to_string(data.train.size()));
    return data;
}

namespace {

void check_data(const FinetuneData& d) {
    if (d.train.empty() || d.val.empty() || d.test.empty())
        throw ValidationError("fine-tuning needs at least one train, one val and one test volume");
    std::set<std::string> seen;
    for (const auto* split : {&d.train, &d.val, &d.test})
        for (const auto& v : *split) {
            if (!v.mask)
                throw ValidationError("volume '" + v.patient_id + "' has no label mask");
            if (!seen.insert(v.patient_id).second)
                throw ValidationError("patient '" + v.patient_id + "' appears in more than one split");
        }
}

int infer_classes(const FinetuneData& d) {
    int top = 0;
    for (const auto* split : {&d.train, &d.val, &d.test})
        for (const auto& v : *split)
            for (auto l : *v.mask)
                top = std::max(top, static_cast<int>(l));
    return std::max(2, top + 1);
}

struct SliceTensors {
    torch::Tensor x;  // (N, 1, H, W)
    torch::Tensor y;  // (N, H, W) int64
};

SliceTensors slices_of(const std::vector<imaging::Volume>& vols, int axis,
                       const imaging::IntensityWindow& window) {
    std::vector<torch::Tensor> xs, ys;
    for (const auto& v : vols)
        for (const auto& s : imaging::extract_slices(v, axis, window)) {
            const auto h = s.pixels.rows, w = s.pixels.cols;
            auto x = torch::empty({1, 1, h, w});
            std::memcpy(x.data_ptr<float>(), s.pixels.data.data(), sizeof(float) * s.pixels.size());
            auto y = torch::empty({1, h, w}, torch::kInt64);
            auto* yp = y.data_ptr<std::int64_t>();
            for (std::size_t i = 0; i < s.mask->size(); ++i)
                yp[i] = s.mask->data[i];
            xs.push_back(x);
            ys.push_back(y);
        }
    return {torch::cat(xs), torch::cat(ys)};
}

void load_unet_state(nets::UNet& net, const nets::TensorMap& state) {
    nets::load_state(*net, state, "unet.");
}

} // namespace

nets::UNet unet_from_checkpoint(const nets::Checkpoint& ckpt) {
    if (ckpt.stage != nets::Stage::finetuned)
        throw ValidationError("expected a finetuned checkpoint, got " + ckpt.stage_tag());
    const auto n_classes = ckpt.meta.value("n_classes", 0);
    if (n_classes < 2)
        throw FormatError("finetuned checkpoint lacks meta.n_classes");
    nets::UNet net(ckpt.spec, n_classes);
    load_unet_state(net, ckpt.tensors);
    return net;
}

Grid3D<std::uint8_t> predict_volume(nets::UNet& net, const imaging::Volume& v, int axis,
                                    const imaging::IntensityWindow& window) {
    const auto slices = imaging::extract_slices(v, axis, window);
    Grid3D<std::uint8_t> out(v.shape, 0);
    const int a = axis == 0 ? 1 : 0;
    const int b = axis == 2 ? 1 : 2;
    torch::NoGradGuard no_grad;
    const bool was_training = net->is_training();
    net->eval();
    constexpr std::size_t kChunk = 16;
    for (std::size_t start = 0; start < slices.size(); start += kChunk) {
        const auto stop = std::min(slices.size(), start + kChunk);
        std::vector<torch::Tensor> xs;
        for (std::size_t s = start; s < stop; ++s) {
            const auto& px = slices[s].pixels;
            auto x = torch::empty({1, 1, px.rows, px.cols});
            std::memcpy(x.data_ptr<float>(), px.data.data(), sizeof(float) * px.size());
            xs.push_back(x);
        }
        const auto labels = net->forward(torch::cat(xs)).argmax(1).to(torch::kInt64).contiguous();
        const auto* lp = labels.data_ptr<std::int64_t>();
        const int rows = v.shape[a], cols = v.shape[b];
        for (std::size_t s = start; s < stop; ++s)
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    std::array<int, 3> idx{};
                    idx[axis] = static_cast<int>(s);
                    idx[a] = r;
                    idx[b] = c;
                    out(idx[0], idx[1], idx[2]) = static_cast<std::uint8_t>(
                        lp[((s - start) * rows + r) * cols + c]);
                }
    }
    if (was_training)
        net->train();
    return out;
}

metrics::MetricsReport evaluate(nets::UNet& net, const std::vector<imaging::Volume>& volumes,
                                int n_classes, int axis, const imaging::IntensityWindow& window,
                                bool hd95_mm) {
    std::vector<metrics::PatientMetrics> rows;
    for (const auto& v : volumes) {
        if (!v.mask)
            throw ValidationError("volume '" + v.patient_id + "' has no label mask");
        const auto pred = predict_volume(net, v, axis, window);
        const auto gt = imaging::mask_grid(v);
        metrics::PatientMetrics row;
        row.patient_id = v.patient_id;
        for (int c = 1; c < n_classes; ++c) {
            BinaryVolume p(v.shape, 0), g(v.shape, 0);
            for (std::size_t i = 0; i < p.size(); ++i) {
                p.data[i] = pred.data[i] == c;
                g.data[i] = gt.data[i] == c;
            }
            row.dsc.push_back(metrics::dsc(p, g));
            row.hd95.push_back(metrics::hd95(p, g, hd95_mm ? v.spacing : std::array<double, 3>{1, 1, 1}));
        }
        rows.push_back(std::move(row));
    }
    return metrics::make_report(std::move(rows), n_classes);
}

FinetuneResult finetune(const FinetuneData& data, const nets::NetworkSpec& spec,
                        const FinetuneConfig& cfg, const std::optional<nets::Checkpoint>& init,
                        const Hooks& hooks) {
    cfg.validate();
    check_data(data);
    const int n_classes = cfg.n_classes > 0 ? cfg.n_classes : infer_classes(data);
    torch::set_num_threads(1);

    auto net = nets::make_unet(spec, n_classes, init, cfg.seed);
    std::vector<torch::Tensor> params;
    for (const auto& p : net->named_parameters(true)) {
        if (cfg.freeze_encoder && p.key().rfind("encoder.", 0) == 0) {
            p.value().set_requires_grad(false);
            continue;
        }
        params.push_back(p.value());
    }
    auto optimizer = optim::make_optimizer(cfg.optimizer, params);

    const auto train = slices_of(data.train, cfg.axis, cfg.window);
    const auto n = train.x.size(0);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    FinetuneResult result;
    nets::TensorMap best_state = nets::state_of(*net, "unet.");
    double best_val = -std::numeric_limits<double>::infinity();
    const long total_steps = static_cast<long>(cfg.epochs) * ((n + cfg.batch_size - 1) / cfg.batch_size);
    long step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        net->train();
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        int batches = 0;
        for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
            const auto stop = std::min<std::int64_t>(n, start + cfg.batch_size);
            const auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + start, order.begin() + stop));
            optim::set_lr(*optimizer, optim::scheduled_lr(cfg.optimizer, step++, total_steps));
            const auto loss = metrics::dice_loss(net->forward(train.x.index_select(0, idx)),
                                                 train.y.index_select(0, idx));
            optimizer->zero_grad();
            loss.backward();
            optimizer->step();
            loss_sum += loss.item<double>();
            ++batches;
        }

        EpochRecord rec{epoch, batches ? loss_sum / batches : 0.0, 0.0};
        if (hooks.validation)
            rec.val_dsc = hooks.validation(epoch, net);
        else
            rec.val_dsc = evaluate(net, data.val, n_classes, cfg.axis, cfg.window).mean_dsc.mean;
        if (rec.val_dsc > best_val) {
            best_val = rec.val_dsc;
            best_state = nets::state_of(*net, "unet.");
            result.best_epoch = epoch;
        }
        result.history.push_back(rec);
        if (hooks.on_epoch)
            hooks.on_epoch(rec);
    }

    load_unet_state(net, best_state);
    net->eval();
    result.report = evaluate(net, data.test, n_classes, cfg.axis, cfg.window, cfg.hd95_mm);

    const json cfg_json = {{"finetune", cfg},
                           {"spec", spec},
                           {"init", init ? json(nets::tensors_hash(init->tensors)) : json(nullptr)}};
    auto& ckpt = result.checkpoint;
    ckpt.stage = nets::Stage::finetuned;
    ckpt.spec = spec;
    ckpt.config_hash = config_hash(cfg_json);
    std::ostringstream rng_state;
    rng_state << rng;
    ckpt.rng_state = rng_state.str();
    ckpt.meta = {{"n_classes", n_classes},
                 {"best_epoch", result.best_epoch},
                 {"axis", cfg.axis},
                 {"window", {cfg.window.lo, cfg.window.hi}},
                 {"init", init ? init->stage_tag() : "none"},
                 {"seed", cfg.seed}};
    ckpt.tensors = std::move(best_state);

    result.report.config_hash = ckpt.config_hash;
    result.report.seeds = {cfg.seed};
    result.report.meta = {{"best_epoch", result.best_epoch},
                          {"best_val_dsc", best_val == -std::numeric_limits<double>::infinity() ? json(nullptr)
                                                                                                 : json(best_val)},
                          {"epochs", cfg.epochs},
                          {"n_train_volumes", data.train.size()},
                          {"init", init ? init->stage_tag() : "none"},
                          {"hd95_units", cfg.hd95_mm ? "mm" : "voxel"}};
    return result;
}

void write_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write " + path.string());
    for (const auto& h : history)
        out << nlohmann::json{{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"val_dsc", h.val_dsc}}.dump() << '\n';
    if (!out)
        throw IoError("failed writing " + path.string());
}

} // namespace separeg::finetune
