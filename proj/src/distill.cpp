// SPDX-License-Identifier: Apache-2.0

#include "separeg/distill.hpp"

#include "separeg/errors.hpp"
#include "separeg/hashing.hpp"
#include "separeg/plotting.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace separeg::distill {

using nlohmann::json;
namespace fs = std::filesystem;

torch::Tensor intra_loss(const torch::Tensor& f_student, const torch::Tensor& f_teacher,
                         double temperature) {
    if (f_student.dim() != 2 || f_student.sizes() != f_teacher.sizes())
        throw ValidationError("intra loss needs two (B, d) feature batches of equal shape, got " +
                              c10::str(f_student.sizes()) + " and " + c10::str(f_teacher.sizes()));
    if (f_student.size(0) == 0)
        throw ValidationError("intra loss on an empty batch");
    if (!(temperature > 0))
        throw ValidationError("temperature must be positive");
    if (!torch::isfinite(f_student).all().item<bool>() || !torch::isfinite(f_teacher).all().item<bool>())
        throw ValidationError("intra loss received non-finite features");
    const auto log_s = torch::log_softmax(f_student / temperature, 1);
    const auto log_t = torch::log_softmax(f_teacher / temperature, 1);
    return (log_s.exp() * (log_s - log_t)).sum(1).mean();
}

torch::Tensor inter_loss(const torch::Tensor& f_student, nets::MlpHead& projector,
                         const torch::Tensor& z_hat) {
    return contrastive::cosine_similarity_loss(projector->forward(f_student), z_hat);
}

IntraResult pretrain_intra(const std::vector<regions::RegionSetManifest>& subsets,
                           const nets::NetworkSpec& spec, const augment::AugmentationPolicy& policy,
                           const contrastive::PretrainConfig& cfg, const fs::path& log_dir) {
    IntraResult out;
    for (std::size_t k = 0; k < subsets.size(); ++k) {
        if (subsets[k].empty()) {
            out.warnings.push_back("cluster " + std::to_string(k) + " is empty; no intra model trained");
            continue;
        }
        auto run_cfg = cfg;
        run_cfg.seed = cfg.seed + k;
        contrastive::PretrainOptions opts;
        opts.stage = nets::Stage::intra;
        opts.stage_index = static_cast<int>(k);
        if (!log_dir.empty()) {
            opts.log_path = log_dir / ("intra_" + std::to_string(k) + ".jsonl");
            opts.plot_path = log_dir / ("intra_" + std::to_string(k) + ".png");
        }
        auto r = contrastive::pretrain(subsets[k], spec, policy, run_cfg, opts);
        for (auto& w : r.warnings)
            out.warnings.push_back("intra " + std::to_string(k) + ": " + w);
        out.checkpoints.push_back(std::move(r.checkpoint));
        out.steps.push_back(std::move(r.steps));
    }
    if (out.checkpoints.empty())
        throw ValidationError("every cluster subset is empty");
    return out;
}

void DistillConfig::validate() const {
    if (!(temperature > 0))
        throw ValidationError("distillation temperature must be positive");
    if (iterations < 0)
        throw ValidationError("distillation iterations must be non-negative");
    if (batch_size < 2)
        throw ValidationError("distillation batch_size must be at least 2 (batch normalization)");
    if (w_intra < 0 || w_inter < 0)
        throw ValidationError("loss weights must be non-negative");
    optimizer.validate();
}

void to_json(json& j, const DistillConfig& c) {
    j = json{{"temperature", c.temperature}, {"iterations", c.iterations},
             {"batch_size", c.batch_size},   {"optimizer", c.optimizer},
             {"seed", c.seed},               {"w_intra", c.w_intra},
             {"w_inter", c.w_inter},         {"warm_start", c.warm_start},
             {"frozen_projector", c.frozen_projector}};
}

void from_json(const json& j, DistillConfig& c) {
    DistillConfig d;
    c.temperature = j.value("temperature", d.temperature);
    c.iterations = j.value("iterations", d.iterations);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.optimizer = j.value("optimizer", d.optimizer);
    c.seed = j.value("seed", d.seed);
    c.w_intra = j.value("w_intra", d.w_intra);
    c.w_inter = j.value("w_inter", d.w_inter);
    c.warm_start = j.value("warm_start", d.warm_start);
    c.frozen_projector = j.value("frozen_projector", d.frozen_projector);
}

std::string teacher_hash(const TeacherBundle& t) {
    nets::TensorMap all;
    for (const auto& [name, tensor] : t.inter.tensors)
        all.emplace("inter/" + name, tensor);
    for (const auto& c : t.intra)
        for (const auto& [name, tensor] : c.tensors)
            all.emplace(c.stage_tag() + "/" + name, tensor);
    return nets::tensors_hash(all);
}

namespace {

struct LiveTeachers {
    nets::SimSiamNet inter{nullptr};
    std::map<int, nets::Encoder> intra;

    std::string hash() const {
        nets::TensorMap all;
        all.merge(nets::state_of(*inter, "inter/"));
        for (const auto& [k, enc] : intra)
            all.merge(nets::state_of(*enc, "intra_" + std::to_string(k) + "/"));
        return nets::tensors_hash(all);
    }
};

void freeze(torch::nn::Module& m) {
    m.eval();
    for (auto& p : m.parameters())
        p.set_requires_grad(false);
}

LiveTeachers load_teachers(const TeacherBundle& t, bool need_intra) {
    if (t.inter.stage != nets::Stage::inter)
        throw ValidationError("teacher bundle needs an inter checkpoint, got " + t.inter.stage_tag());
    LiveTeachers live;
    live.inter = contrastive::simsiam_from_checkpoint(t.inter);
    freeze(*live.inter);
    for (const auto& c : t.intra) {
        if (c.stage != nets::Stage::intra)
            throw ValidationError("intra teacher has stage " + c.stage_tag());
        if (c.spec != t.inter.spec)
            throw ValidationError("intra teacher " + c.stage_tag() + " has a different network spec");
        nets::Encoder enc(c.spec);
        nets::load_state(*enc, c.tensors, "encoder.");
        freeze(*enc);
        live.intra.emplace(c.stage_index, enc);
    }
    if (need_intra && live.intra.empty())
        throw ValidationError("intra loss enabled but no intra teachers given");
    return live;
}

/// Intra teacher features for each row, routed by cluster id.
torch::Tensor route_teachers(LiveTeachers& live, const torch::Tensor& x, const std::vector<int>& ids,
                             std::int64_t feature_dim) {
    torch::NoGradGuard no_grad;
    auto out = torch::empty({x.size(0), feature_dim});
    std::map<int, std::vector<std::int64_t>> rows;
    for (std::size_t i = 0; i < ids.size(); ++i)
        rows[ids[i]].push_back(static_cast<std::int64_t>(i));
    for (const auto& [k, idx] : rows) {
        const auto it = live.intra.find(k);
        if (it == live.intra.end())
            throw ValidationError("no intra teacher for cluster " + std::to_string(k));
        const auto index = torch::tensor(idx, torch::kInt64);
        out.index_copy_(0, index, it->second->forward(x.index_select(0, index)));
    }
    return out;
}

void write_log(const fs::path& path, const std::vector<DistillStep>& steps, const DistillResult& r) {
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoError("cannot write distillation log: " + path.string());
    for (const auto& s : steps)
        out << json{{"iteration", s.iteration}, {"total", s.total}, {"intra", s.intra},
                    {"inter", s.inter}, {"lr", s.lr}}.dump()
            << '\n';
    out << json{{"event", "teacher_hash"}, {"before", r.teacher_hash_before}, {"after", r.teacher_hash_after}}.dump()
        << '\n';
}

} // namespace

DistillResult distill_on_images(const std::vector<ImageF>& images, const std::vector<int>& cluster_ids,
                                const TeacherBundle& teachers,
                                const augment::AugmentationPolicy& policy, const DistillConfig& cfg,
                                const DistillOptions& opts) {
    cfg.validate();
    policy.validate();
    if (images.empty())
        throw ValidationError("distillation needs at least one region");
    if (cluster_ids.size() != images.size())
        throw ValidationError("every region needs a cluster id");
    for (const int id : cluster_ids)
        if (id < 0 || id >= teachers.k)
            throw ValidationError("cluster id " + std::to_string(id) + " outside [0, " + std::to_string(teachers.k) + ")");
    const auto spec = teachers.inter.spec;
    if (policy.out_size != spec.input_size)
        throw ValidationError("augmentation out_size differs from network input_size");

    torch::set_num_threads(1);
    const bool use_intra = cfg.w_intra > 0;
    LiveTeachers live = load_teachers(teachers, use_intra);

    torch::manual_seed(cfg.seed);
    nets::Encoder student(spec);
    if (cfg.warm_start)
        nets::load_state(*student, teachers.inter.tensors, "encoder.");
    auto projector = nets::make_projector(spec);
    nets::load_state(*projector, teachers.inter.tensors, "projector.");
    student->train();
    std::vector<torch::Tensor> params = student->parameters();
    if (cfg.frozen_projector) {
        freeze(*projector);
    } else {
        projector->train();
        for (auto& p : projector->parameters())
            params.push_back(p);
    }
    auto optimizer = optim::make_optimizer(cfg.optimizer, params);

    DistillResult result;
    result.teacher_hash_before = live.hash();
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();

    std::vector<ImageF> views;
    std::vector<int> ids;
    for (long it = 0; it < cfg.iterations; ++it) {
        views.clear();
        ids.clear();
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const auto i = order[cursor++];
            views.push_back(augment::augment(images[i], policy, rng));
            ids.push_back(cluster_ids[i]);
        }
        const auto x = augment::to_batch(views);
        const double lr = optim::scheduled_lr(cfg.optimizer, it, cfg.iterations);
        optim::set_lr(*optimizer, lr);

        torch::Tensor z_hat;
        {
            torch::NoGradGuard no_grad;
            z_hat = live.inter->projector(live.inter->encoder(x));
        }
        const auto fs = student(x);
        const auto l_intra = use_intra ? intra_loss(fs, route_teachers(live, x, ids, spec.feature_dim),
                                                    cfg.temperature)
                                       : torch::zeros({});
        const auto l_inter = inter_loss(fs, projector, z_hat);
        const auto total = cfg.w_intra * l_intra + cfg.w_inter * l_inter;
        optimizer->zero_grad();
        total.backward();
        optimizer->step();
        result.steps.push_back({it, total.item<double>(), l_intra.item<double>(), l_inter.item<double>(), lr});
    }
    result.teacher_hash_after = live.hash();

    std::ostringstream rng_state;
    rng_state << rng;
    auto& ckpt = result.student;
    ckpt.stage = nets::Stage::student;
    ckpt.spec = spec;
    ckpt.config_hash = config_hash(json{{"augment", policy}, {"distill", cfg}, {"teachers", teacher_hash(teachers)}});
    ckpt.rng_state = rng_state.str();
    ckpt.meta = {{"iterations", cfg.iterations}, {"n_regions", images.size()},
                 {"teacher_hash", result.teacher_hash_after}};
    ckpt.tensors = nets::state_of(*student, "encoder.");
    ckpt.tensors.merge(nets::state_of(*projector, "projector."));

    if (!opts.log_path.empty())
        write_log(opts.log_path, result.steps, result);
    if (!opts.plot_path.empty()) {
        plotting::Series total{"total", {}, {}}, intra{"intra", {}, {}}, inter{"inter", {}, {}};
        for (const auto& s : result.steps) {
            const double x = static_cast<double>(s.iteration);
            total.x.push_back(x);
            total.y.push_back(s.total);
            intra.x.push_back(x);
            intra.y.push_back(s.intra);
            inter.x.push_back(x);
            inter.y.push_back(s.inter);
        }
        plotting::line_plot(opts.plot_path, "distillation loss", {total, intra, inter}, "iteration", "loss");
    }
    return result;
}

DistillResult distill(const regions::RegionSetManifest& labelled, const TeacherBundle& teachers,
                      const augment::AugmentationPolicy& policy, const DistillConfig& cfg,
                      const DistillOptions& opts) {
    if (labelled.empty())
        throw ValidationError("region set is empty");
    std::vector<int> ids;
    ids.reserve(labelled.size());
    for (const auto& e : labelled.records) {
        if (!e.cluster_id)
            throw ValidationError("region '" + e.id + "' has no cluster_id; run clustering first");
        ids.push_back(*e.cluster_id);
    }
    return distill_on_images(regions::load_region_images(labelled, static_cast<int>(teachers.inter.spec.input_size)),
                             ids, teachers, policy, cfg, opts);
}

} // namespace separeg::distill
