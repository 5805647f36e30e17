// SPDX-License-Identifier: Apache-2.0

#include "separeg/pipeline.hpp"

#include "separeg/augment.hpp"
#include "separeg/checkpoint.hpp"
#include "separeg/contrastive.hpp"
#include "separeg/distill.hpp"
#include "separeg/errors.hpp"
#include "separeg/finetune.hpp"
#include "separeg/hashing.hpp"
#include "separeg/imaging_io.hpp"
#include "separeg/metrics.hpp"
#include "separeg/nets.hpp"
#include "separeg/organcluster.hpp"
#include "separeg/plotting.hpp"
#include "separeg/regions.hpp"
#include "separeg/superpixel.hpp"
#include "separeg/synthetic.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace separeg::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kIntraSeedOffset = 1000;
constexpr std::uint64_t kDistillSeedOffset = 2000;

const std::set<std::string> kTopLevelKeys{"profile", "seed",    "dataset", "slic",    "separation",
                                          "network", "augment", "pretrain", "cluster", "intra",
                                          "distill", "finetune", "ablation"};

template <typename T>
json without_seed(const T& value) {
    json j = value;
    j.erase("seed");
    return j;
}

} // namespace

json profile_defaults(const std::string& profile) {
    if (profile != "tiny" && profile != "paper")
        throw ConfigError("unknown profile '" + profile + "' (expected tiny or paper)");
    const bool tiny = profile == "tiny";

    imaging::SyntheticSpec synth;
    if (!tiny)
        synth.image_size = 128;
    const auto spec = tiny ? nets::NetworkSpec::tiny() : nets::NetworkSpec::paper();

    augment::AugmentationPolicy aug;
    aug.out_size = static_cast<int>(spec.input_size);
    if (tiny)
        aug.blur_sigma = {0.1, 1.0};

    contrastive::PretrainConfig pre;
    pre.total_iterations = tiny ? 500 : 100000;
    pre.batch_size = 32;
    if (tiny)
        pre.optimizer.lr = 0.05;

    auto intra = pre;
    intra.total_iterations = tiny ? 200 : 100000;

    distill::DistillConfig dis;
    dis.iterations = tiny ? 200 : 100000;
    dis.batch_size = 32;
    dis.optimizer = pre.optimizer;

    finetune::FinetuneConfig ft;
    ft.n_train_volumes = 1;
    // One 8-slice training volume: batch 2 gives four updates per epoch.
    if (tiny)
        ft.batch_size = 2;

    json ft_json = without_seed(ft);
    ft_json.erase("window");
    json dis_json = without_seed(dis);
    dis_json.erase("w_intra");
    dis_json.erase("w_inter");

    return json{
        {"profile", profile},
        {"seed", 0},
        {"dataset",
         {{"source", "synthetic"},
          {"synthetic", synth},
          {"splits", {{"pretrain", 2}, {"train", 1}, {"val", 1}, {"test", 2}}},
          {"manifest", nullptr},
          {"window", {synth.window.lo, synth.window.hi}}}},
        {"slic", superpixel::SlicConfig{}},
        {"separation", {{"axis", 2}, {"regular_grid", 6}}},
        {"network", spec},
        {"augment", aug},
        {"pretrain", without_seed(pre)},
        {"cluster", {{"k", tiny ? 2 : 5}, {"restarts", 100}, {"max_iter", 300}, {"normalize", true}}},
        {"intra", without_seed(intra)},
        {"distill", dis_json},
        {"finetune", ft_json},
        {"ablation", {{"separation", "sis"}, {"use_iid", true}, {"loss", "both"}, {"pretrain", true}}}};
}

std::vector<std::string> preset_names() {
    return {"table4-row1", "table4-row2", "table4-row3", "table5-row1", "table5-row2",
            "table5-row3", "table6-row1", "table6-row2", "table6-row3"};
}

json preset(const std::string& name) {
    auto ab = [](const char* sep, bool iid, const char* loss, bool pre) {
        return json{{"separation", sep}, {"use_iid", iid}, {"loss", loss}, {"pretrain", pre}};
    };
    // Separation strategies.
    if (name == "table4-row1") return ab("none", false, "both", true);
    if (name == "table4-row2") return ab("regular", false, "both", true);
    if (name == "table4-row3") return ab("sis", false, "both", true);
    // Random init, SIS only, SIS + IID.
    if (name == "table5-row1") return ab("sis", false, "both", false);
    if (name == "table5-row2") return ab("sis", false, "both", true);
    if (name == "table5-row3") return ab("sis", true, "both", true);
    // Distillation objectives: none, intra only, both.
    if (name == "table6-row1") return ab("sis", false, "both", true);
    if (name == "table6-row2") return ab("sis", true, "intra", true);
    if (name == "table6-row3") return ab("sis", true, "both", true);
    throw ConfigError("unknown preset '" + name + "'");
}

void validate_config(const json& c) {
    if (!c.is_object())
        throw ConfigError("config must be a JSON object");
    for (const auto& [key, _] : c.items())
        if (!kTopLevelKeys.count(key))
            throw ConfigError("unknown config key '" + key + "'");
    for (const auto& key : kTopLevelKeys)
        if (!c.contains(key))
            throw ConfigError("config is missing '" + key + "'");
    try {
        const auto& ds = c.at("dataset");
        const auto source = ds.at("source").get<std::string>();
        if (source == "synthetic") {
            ds.at("synthetic").get<imaging::SyntheticSpec>().validate();
            for (const char* s : {"pretrain", "train", "val", "test"})
                if (ds.at("splits").at(s).get<int>() < 0)
                    throw ConfigError(std::string("negative split count for ") + s);
        } else if (source == "manifest") {
            if (!ds.at("manifest").is_string())
                throw ConfigError("dataset.manifest must be a path when source is 'manifest'");
        } else {
            throw ConfigError("dataset.source must be 'synthetic' or 'manifest'");
        }
        const auto w = ds.at("window").get<std::array<double, 2>>();
        if (!(w[0] < w[1]))
            throw ConfigError("dataset.window needs lo < hi");

        c.at("slic").get<superpixel::SlicConfig>().validate();
        const int axis = c.at("separation").at("axis").get<int>();
        if (axis < 0 || axis > 2)
            throw ConfigError("separation.axis must be 0, 1 or 2");
        if (c.at("separation").at("regular_grid").get<int>() < 1)
            throw ConfigError("separation.regular_grid must be at least 1");
        const auto spec = c.at("network").get<nets::NetworkSpec>();
        spec.validate();
        const auto aug = c.at("augment").get<augment::AugmentationPolicy>();
        aug.validate();
        if (aug.out_size != spec.input_size)
            throw ConfigError("augment.out_size must equal network.input_size");
        c.at("pretrain").get<contrastive::PretrainConfig>().validate();
        c.at("intra").get<contrastive::PretrainConfig>().validate();
        c.at("distill").get<distill::DistillConfig>().validate();
        c.at("finetune").get<finetune::FinetuneConfig>().validate();
        const auto& cl = c.at("cluster");
        if (cl.at("k").get<int>() < 1 || cl.at("restarts").get<int>() < 1 || cl.at("max_iter").get<int>() < 0)
            throw ConfigError("cluster needs k >= 1, restarts >= 1, max_iter >= 0");
        cl.at("normalize").get<bool>();

        const auto& ab = c.at("ablation");
        const auto sep = ab.at("separation").get<std::string>();
        if (sep != "none" && sep != "regular" && sep != "sis")
            throw ConfigError("ablation.separation must be none, regular or sis");
        const auto loss = ab.at("loss").get<std::string>();
        if (loss != "intra" && loss != "inter" && loss != "both")
            throw ConfigError("ablation.loss must be intra, inter or both");
        if (ab.at("use_iid").get<bool>() && !ab.at("pretrain").get<bool>())
            throw ConfigError("ablation.use_iid requires ablation.pretrain");
        c.at("seed").get<std::uint64_t>();
        c.at("profile").get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    } catch (const ValidationError& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
}

json make_config(const std::string& profile, std::uint64_t seed, const json& patch) {
    json c = profile_defaults(profile);
    c.merge_patch(patch);
    c["seed"] = seed;
    validate_config(c);
    return c;
}

std::string run_hash(const json& config) {
    return config_hash(config);
}

std::string ablation_label(const json& config) {
    const auto& ab = config.at("ablation");
    if (!ab.at("pretrain").get<bool>())
        return "random-init";
    std::string label = ab.at("separation").get<std::string>();
    if (ab.at("use_iid").get<bool>()) {
        label += "+iid";
        const auto loss = ab.at("loss").get<std::string>();
        if (loss != "both")
            label += "(" + loss + ")";
    }
    return label;
}

json to_json(const LedgerEntry& e) {
    return json{{"stage", e.stage},
                {"status", e.status},
                {"config_hash", e.config_hash},
                {"artifacts", e.artifacts},
                {"detail", e.detail},
                {"wall_time_s", e.wall_time_s}};
}

LedgerEntry ledger_entry_from_json(const json& j) {
    LedgerEntry e;
    e.stage = j.at("stage").get<std::string>();
    e.status = j.at("status").get<std::string>();
    e.config_hash = j.at("config_hash").get<std::string>();
    e.artifacts = j.value("artifacts", json::object());
    e.detail = j.value("detail", json::object());
    e.wall_time_s = j.value("wall_time_s", 0.0);
    return e;
}

const LedgerEntry* RunLedger::finished(const std::string& stage) const {
    for (auto it = entries.rbegin(); it != entries.rend(); ++it)
        if (it->stage == stage && (it->status == "completed" || it->status == "skipped"))
            return &*it;
    return nullptr;
}

int RunLedger::count(const std::string& stage, const std::string& status) const {
    return static_cast<int>(std::count_if(entries.begin(), entries.end(), [&](const LedgerEntry& e) {
        return e.stage == stage && e.status == status;
    }));
}

RunLedger load_ledger(const fs::path& path) {
    RunLedger ledger;
    ledger.path = path;
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open ledger: " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        try {
            ledger.entries.push_back(ledger_entry_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return ledger;
}

namespace {

void append(RunLedger& ledger, const LedgerEntry& e) {
    std::ofstream out(ledger.path, std::ios::app);
    if (!out)
        throw IoError("cannot append to ledger: " + ledger.path.string());
    out << to_json(e).dump() << '\n';
    out.flush();
    ledger.entries.push_back(e);
}

struct Context {
    json config;
    std::string hash;
    fs::path dir;
    std::uint64_t seed = 0;

    fs::path data_manifest() const {
        if (config.at("dataset").at("source") == "manifest")
            return fs::absolute(config.at("dataset").at("manifest").get<std::string>());
        return dir / "data" / "dataset.json";
    }
    fs::path regions_manifest() const { return dir / "regions" / "regions.jsonl"; }
    fs::path inter_ckpt() const { return dir / "pretrain" / "inter.ckpt"; }
    fs::path labelled_manifest() const { return dir / "cluster" / "regions.jsonl"; }
    fs::path clusters() const { return dir / "cluster" / "clusters.json"; }
    fs::path intra_ckpt(int k) const { return dir / "cluster" / ("intra_" + std::to_string(k) + ".ckpt"); }
    fs::path student_ckpt() const { return dir / "distill" / "student.ckpt"; }

    imaging::IntensityWindow window() const {
        const auto w = config.at("dataset").at("window").get<std::array<double, 2>>();
        return {w[0], w[1]};
    }
    const json& ablation() const { return config.at("ablation"); }
    bool pretrain_enabled() const { return ablation().at("pretrain").get<bool>(); }
    bool iid_enabled() const { return ablation().at("use_iid").get<bool>(); }
    nets::NetworkSpec spec() const { return config.at("network").get<nets::NetworkSpec>(); }
    augment::AugmentationPolicy policy() const { return config.at("augment").get<augment::AugmentationPolicy>(); }

    std::string rel(const fs::path& p) const { return fs::proximate(p, dir).generic_string(); }
};

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoError("cannot write " + path.string());
    out << text;
}

double window_mean(const std::vector<contrastive::StepRecord>& steps, bool head, std::size_t n = 50) {
    if (steps.empty())
        return 0;
    n = std::min(n, steps.size());
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
        s += head ? steps[i].loss : steps[steps.size() - 1 - i].loss;
    return s / static_cast<double>(n);
}

LedgerEntry stage_dataset(const Context& ctx) {
    LedgerEntry e;
    const auto& ds = ctx.config.at("dataset");
    if (ds.at("source") == "synthetic") {
        const auto spec = ds.at("synthetic").get<imaging::SyntheticSpec>();
        const auto& s = ds.at("splits");
        imaging::SplitCounts counts{s.at("pretrain").get<int>(), s.at("train").get<int>(),
                                    s.at("val").get<int>(), s.at("test").get<int>()};
        imaging::write_synthetic_dataset(spec, counts, ctx.dir / "data");
        e.detail = {{"volumes", counts.total()}, {"synthetic_seed", spec.seed}};
    }
    const auto manifest = imaging::load_dataset_manifest(ctx.data_manifest());
    imaging::check_disjoint_splits(manifest);
    e.artifacts = {{"manifest", ctx.rel(ctx.data_manifest())}};
    e.status = "completed";
    return e;
}

LedgerEntry stage_separate(const Context& ctx) {
    LedgerEntry e;
    if (!ctx.pretrain_enabled()) {
        e.status = "skipped";
        e.detail = {{"reason", "no pretraining"}, {"slic_calls", 0}};
        return e;
    }
    const auto manifest = imaging::load_dataset_manifest(ctx.data_manifest());
    const int axis = ctx.config.at("separation").at("axis").get<int>();
    std::vector<imaging::ImageSlice> slices;
    for (const auto& path : manifest.pretraining_pool())
        for (auto& s : imaging::extract_slices(imaging::load_volume(path), axis, ctx.window()))
            slices.push_back(std::move(s));
    if (slices.empty())
        throw ValidationError("pretraining pool has no slices");

    const auto mode = ctx.ablation().at("separation").get<std::string>();
    const auto before = superpixel::slic_call_count();
    const fs::path out = ctx.dir / "regions";
    regions::RegionSetManifest rs;
    if (mode == "sis")
        rs = regions::build_region_set(slices, ctx.config.at("slic").get<superpixel::SlicConfig>(), ctx.seed, out);
    else if (mode == "regular")
        rs = regions::build_regular_region_set(slices, ctx.config.at("separation").at("regular_grid").get<int>(),
                                               ctx.seed, out);
    else
        rs = regions::build_full_image_region_set(slices, ctx.seed, out);
    regions::save_region_manifest(rs, ctx.regions_manifest());

    e.status = "completed";
    e.artifacts = {{"regions", ctx.rel(ctx.regions_manifest())}};
    e.detail = {{"mode", mode},
                {"slices", slices.size()},
                {"regions", rs.size()},
                {"slic_calls", superpixel::slic_call_count() - before}};
    return e;
}

LedgerEntry stage_pretrain(const Context& ctx) {
    LedgerEntry e;
    if (!ctx.pretrain_enabled()) {
        e.status = "skipped";
        e.detail = {{"reason", "random initialization"}};
        return e;
    }
    const auto rs = regions::load_region_manifest(ctx.regions_manifest());
    auto cfg = ctx.config.at("pretrain").get<contrastive::PretrainConfig>();
    cfg.seed = ctx.seed;
    contrastive::PretrainOptions opts;
    opts.log_path = ctx.dir / "pretrain" / "log.jsonl";
    opts.plot_path = ctx.dir / "pretrain" / "loss.png";
    auto r = contrastive::pretrain(rs, ctx.spec(), ctx.policy(), cfg, opts);
    r.checkpoint.config_hash = ctx.hash;
    nets::save_checkpoint(r.checkpoint, ctx.inter_ckpt());

    e.status = "completed";
    e.artifacts = {{"checkpoint", ctx.rel(ctx.inter_ckpt())},
                   {"log", ctx.rel(opts.log_path)},
                   {"plot", ctx.rel(opts.plot_path)}};
    e.detail = {{"iterations", cfg.total_iterations},
                {"loss_first50", window_mean(r.steps, true)},
                {"loss_last50", window_mean(r.steps, false)},
                {"final_z_std", r.steps.empty() ? 0.0 : r.steps.back().z_std},
                {"warnings", r.warnings}};
    return e;
}

LedgerEntry stage_cluster(const Context& ctx) {
    LedgerEntry e;
    if (!ctx.iid_enabled()) {
        e.status = "skipped";
        e.detail = {{"reason", "IID disabled"}};
        return e;
    }
    const auto rs = regions::load_region_manifest(ctx.regions_manifest());
    const auto inter = nets::load_checkpoint(ctx.inter_ckpt());
    const auto& c = ctx.config.at("cluster");
    cluster::ClusterOptions copts;
    copts.k = c.at("k").get<int>();
    copts.seed = ctx.seed;
    copts.restarts = c.at("restarts").get<int>();
    copts.max_iter = c.at("max_iter").get<int>();
    copts.normalize = c.at("normalize").get<bool>();
    const auto cm = cluster::cluster_regions(rs, inter, copts);
    cluster::save_cluster_model(cm, ctx.clusters());
    const auto split = cluster::split_region_set(rs, cm, ctx.dir / "cluster");

    auto intra_cfg = ctx.config.at("intra").get<contrastive::PretrainConfig>();
    intra_cfg.seed = ctx.seed + kIntraSeedOffset;
    const auto intra = distill::pretrain_intra(split.subsets, ctx.spec(), ctx.policy(), intra_cfg,
                                               ctx.dir / "cluster");
    json ckpts = json::array();
    for (auto ck : intra.checkpoints) {
        ck.config_hash = ctx.hash;
        nets::save_checkpoint(ck, ctx.intra_ckpt(ck.stage_index));
        ckpts.push_back(ctx.rel(ctx.intra_ckpt(ck.stage_index)));
    }

    std::optional<double> purity;
    try {
        purity = cluster::cluster_purity(split.labelled);
    } catch (const ValidationError&) {
    }
    e.status = "completed";
    e.artifacts = {{"clusters", ctx.rel(ctx.clusters())},
                   {"labelled_regions", ctx.rel(ctx.labelled_manifest())},
                   {"intra_checkpoints", ckpts}};
    e.detail = {{"k", cm.k},
                {"inertia", cm.inertia},
                {"cluster_sizes", cm.cluster_sizes()},
                {"purity", purity ? json(*purity) : json(nullptr)},
                {"warnings", intra.warnings}};
    return e;
}

LedgerEntry stage_distill(const Context& ctx) {
    LedgerEntry e;
    if (!ctx.iid_enabled()) {
        e.status = "skipped";
        e.detail = {{"reason", "IID disabled"}};
        return e;
    }
    const auto labelled = regions::load_region_manifest(ctx.labelled_manifest());
    const auto cm = cluster::load_cluster_model(ctx.clusters());
    distill::TeacherBundle teachers;
    teachers.inter = nets::load_checkpoint(ctx.inter_ckpt());
    teachers.k = cm.k;
    for (int k = 0; k < cm.k; ++k)
        if (fs::exists(ctx.intra_ckpt(k)))
            teachers.intra.push_back(nets::load_checkpoint(ctx.intra_ckpt(k)));

    auto cfg = ctx.config.at("distill").get<distill::DistillConfig>();
    cfg.seed = ctx.seed + kDistillSeedOffset;
    const auto loss = ctx.ablation().at("loss").get<std::string>();
    cfg.w_intra = loss == "inter" ? 0.0 : 1.0;
    cfg.w_inter = loss == "intra" ? 0.0 : 1.0;
    distill::DistillOptions opts{ctx.dir / "distill" / "log.jsonl", ctx.dir / "distill" / "loss.png"};
    auto r = distill::distill(labelled, teachers, ctx.policy(), cfg, opts);
    if (r.teacher_hash_before != r.teacher_hash_after)
        throw ValidationError("teacher parameters changed during distillation");
    r.student.config_hash = ctx.hash;
    nets::save_checkpoint(r.student, ctx.student_ckpt());

    e.status = "completed";
    e.artifacts = {{"checkpoint", ctx.rel(ctx.student_ckpt())}, {"log", ctx.rel(opts.log_path)}};
    e.detail = {{"iterations", cfg.iterations},
                {"w_intra", cfg.w_intra},
                {"w_inter", cfg.w_inter},
                {"teacher_hash", r.teacher_hash_after},
                {"final_total", r.steps.empty() ? 0.0 : r.steps.back().total}};
    return e;
}

LedgerEntry stage_finetune(const Context& ctx) {
    LedgerEntry e;
    auto cfg = ctx.config.at("finetune").get<finetune::FinetuneConfig>();
    cfg.seed = ctx.seed;
    cfg.window = ctx.window();
    const auto data = finetune::load_finetune_data(imaging::load_dataset_manifest(ctx.data_manifest()),
                                                   cfg.n_train_volumes);
    std::optional<nets::Checkpoint> init;
    if (ctx.iid_enabled())
        init = nets::load_checkpoint(ctx.student_ckpt());
    else if (ctx.pretrain_enabled())
        init = nets::load_checkpoint(ctx.inter_ckpt());

    auto r = finetune::finetune(data, ctx.spec(), cfg, init);
    r.checkpoint.config_hash = ctx.hash;
    r.report.config_hash = ctx.hash;
    r.report.meta["ablation"] = ablation_label(ctx.config);
    const fs::path dir = ctx.dir / "finetune";
    nets::save_checkpoint(r.checkpoint, dir / "finetuned.ckpt");
    metrics::write_report(r.report, dir, "metrics");
    finetune::write_history(dir / "history.jsonl", r.history);

    e.status = "completed";
    e.artifacts = {{"checkpoint", ctx.rel(dir / "finetuned.ckpt")},
                   {"metrics", ctx.rel(dir / "metrics.json")},
                   {"history", ctx.rel(dir / "history.jsonl")}};
    e.detail = {{"init", init ? init->stage_tag() : "none"},
                {"best_epoch", r.best_epoch},
                {"test_mean_dsc", r.report.mean_dsc.mean}};
    return e;
}

} // namespace

RunLedger run(const json& config, const fs::path& out_dir, const RunOptions& opts) {
    validate_config(config);
    if (opts.stop_after && std::find(kStages.begin(), kStages.end(), *opts.stop_after) == kStages.end() &&
        *opts.stop_after != "dataset")
        throw ConfigError("unknown stage '" + *opts.stop_after + "'");

    Context ctx{config, run_hash(config), out_dir, config.at("seed").get<std::uint64_t>()};
    fs::create_directories(out_dir);
    const fs::path ledger_path = out_dir / "ledger.jsonl";
    const fs::path config_path = out_dir / "config.json";

    RunLedger ledger;
    ledger.path = ledger_path;
    if (fs::exists(ledger_path)) {
        if (!opts.resume)
            throw ConfigError(out_dir.string() + " already holds a run; pass --resume or use a fresh directory");
        ledger = load_ledger(ledger_path);
        for (const auto& e : ledger.entries)
            if (e.config_hash != ctx.hash)
                throw ConfigError("config hash " + ctx.hash.substr(0, 12) + " differs from the ledger's " +
                                  e.config_hash.substr(0, 12) + "; refusing to resume");
    }
    write_text(config_path, config.dump(2) + "\n");

    const std::vector<std::pair<std::string, std::function<LedgerEntry(const Context&)>>> stages{
        {"dataset", stage_dataset},   {"separate", stage_separate}, {"pretrain", stage_pretrain},
        {"cluster", stage_cluster},   {"distill", stage_distill},   {"finetune", stage_finetune}};

    for (const auto& [name, fn] : stages) {
        if (const auto* done = ledger.finished(name)) {
            LedgerEntry reused = *done;
            reused.status = "reused";
            reused.wall_time_s = 0;
            append(ledger, reused);
        } else {
            const auto t0 = std::chrono::steady_clock::now();
            LedgerEntry e;
            try {
                e = fn(ctx);
            } catch (const std::exception& ex) {
                LedgerEntry failed;
                failed.stage = name;
                failed.status = "failed";
                failed.config_hash = ctx.hash;
                failed.detail = {{"error", ex.what()}};
                failed.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                append(ledger, failed);
                throw StageError(name, ex.what());
            }
            e.stage = name;
            e.config_hash = ctx.hash;
            e.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            append(ledger, e);
        }
        if (opts.stop_after && *opts.stop_after == name) {
            LedgerEntry stop;
            stop.stage = "run";
            stop.status = "interrupted";
            stop.config_hash = ctx.hash;
            stop.detail = {{"after", name}};
            append(ledger, stop);
            return ledger;
        }
    }
    return ledger;
}

namespace {

struct RunSummary {
    json config;
    metrics::MetricsReport report;
};

RunSummary load_run(const fs::path& dir) {
    std::ifstream in(dir / "config.json");
    if (!in)
        throw IoError("no config.json in " + dir.string());
    RunSummary s;
    try {
        s.config = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError((dir / "config.json").string() + ": " + e.what());
    }
    const auto ledger = load_ledger(dir / "ledger.jsonl");
    if (!ledger.finished("finetune"))
        throw ConfigError(dir.string() + " has no completed finetune stage");
    s.report = metrics::load_report(dir / "finetune" / "metrics.json");
    return s;
}

double mean_hd95(const metrics::MetricsReport& r) {
    double s = 0;
    int n = 0;
    for (const auto& h : r.hd95)
        if (h.n > 0) {
            s += h.mean;
            ++n;
        }
    return n ? s / n : 0.0;
}

std::string fmt(double v, int prec = 2) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

} // namespace

Report report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
    if (run_dirs.empty())
        throw ConfigError("report needs at least one run directory");
    std::vector<RunSummary> runs;
    for (const auto& d : run_dirs)
        runs.push_back(load_run(d));

    for (const char* section : {"dataset", "finetune", "network", "profile"}) {
        const auto& ref = runs.front().config.at(section);
        for (std::size_t i = 1; i < runs.size(); ++i) {
            const auto& other = runs[i].config.at(section);
            if (other != ref)
                throw ConfigError("runs " + run_dirs.front().string() + " and " + run_dirs[i].string() +
                                  " disagree on '" + section + "': " + json::diff(ref, other).dump());
        }
    }

    // Group by configuration with the seed removed, in order of first appearance.
    std::vector<json> keys;
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        json key = runs[i].config;
        key.erase("seed");
        auto it = std::find(keys.begin(), keys.end(), key);
        if (it == keys.end()) {
            keys.push_back(key);
            members.push_back({i});
        } else {
            members[static_cast<std::size_t>(it - keys.begin())].push_back(i);
        }
    }

    Report rep;
    rep.sweep = keys.size() > 1;
    for (std::size_t g = 1; g < keys.size() && rep.sweep; ++g)
        for (const auto& op : json::diff(keys.front(), keys[g]))
            if (op.at("path") != "/pretrain/total_iterations")
                rep.sweep = false;

    bool any_stderr = false;
    for (std::size_t g = 0; g < keys.size(); ++g) {
        std::vector<double> dsc, hd;
        for (auto i : members[g]) {
            dsc.push_back(100.0 * runs[i].report.mean_dsc.mean);
            hd.push_back(mean_hd95(runs[i].report));
        }
        const auto sd = metrics::summarize(dsc);
        const auto sh = metrics::summarize(hd);
        ReportRow row;
        row.label = ablation_label(keys[g]);
        row.pretrain_iterations = keys[g].at("pretrain").at("total_iterations").get<long>();
        if (rep.sweep)
            row.label += " @" + std::to_string(*row.pretrain_iterations);
        row.n_runs = static_cast<int>(members[g].size());
        row.dsc_mean = sd.mean;
        row.dsc_stderr = sd.stderr_;
        row.hd95_mean = sh.mean;
        row.hd95_stderr = sh.stderr_;
        any_stderr = any_stderr || row.n_runs > 1;
        rep.rows.push_back(row);
    }

    std::ostringstream table, csv;
    char line[256];
    if (any_stderr) {
        std::snprintf(line, sizeof line, "%-24s %4s %18s %18s\n", "configuration", "runs", "DSC (%)", "HD95 (voxel)");
        csv << "configuration,runs,dsc_mean,dsc_stderr,hd95_mean,hd95_stderr\n";
    } else {
        std::snprintf(line, sizeof line, "%-24s %4s %10s %12s\n", "configuration", "runs", "DSC (%)", "HD95 (voxel)");
        csv << "configuration,runs,dsc_mean,hd95_mean\n";
    }
    table << line;
    for (const auto& r : rep.rows) {
        if (any_stderr) {
            std::snprintf(line, sizeof line, "%-24s %4d %18s %18s\n", r.label.c_str(), r.n_runs,
                          (fmt(r.dsc_mean) + " +- " + fmt(r.dsc_stderr)).c_str(),
                          (fmt(r.hd95_mean) + " +- " + fmt(r.hd95_stderr)).c_str());
            csv << r.label << ',' << r.n_runs << ',' << fmt(r.dsc_mean, 6) << ',' << fmt(r.dsc_stderr, 6) << ','
                << fmt(r.hd95_mean, 6) << ',' << fmt(r.hd95_stderr, 6) << '\n';
        } else {
            std::snprintf(line, sizeof line, "%-24s %4d %10s %12s\n", r.label.c_str(), r.n_runs,
                          fmt(r.dsc_mean).c_str(), fmt(r.hd95_mean).c_str());
            csv << r.label << ',' << r.n_runs << ',' << fmt(r.dsc_mean, 6) << ',' << fmt(r.hd95_mean, 6) << '\n';
        }
        table << line;
    }
    rep.table = table.str();

    if (!out_dir.empty()) {
        write_text(out_dir / "report.txt", rep.table);
        write_text(out_dir / "report.csv", csv.str());
        if (rep.sweep) {
            plotting::Series s{"test DSC (%)", {}, {}};
            std::vector<std::size_t> order(rep.rows.size());
            for (std::size_t i = 0; i < order.size(); ++i)
                order[i] = i;
            std::sort(order.begin(), order.end(), [&](auto a, auto b) {
                return *rep.rows[a].pretrain_iterations < *rep.rows[b].pretrain_iterations;
            });
            for (auto i : order) {
                s.x.push_back(static_cast<double>(*rep.rows[i].pretrain_iterations));
                s.y.push_back(rep.rows[i].dsc_mean);
            }
            plotting::line_plot(out_dir / "report.png", "transfer DSC vs pretraining iterations", {s},
                                "pretraining iterations", "DSC (%)");
        } else {
            std::vector<std::string> labels;
            std::vector<double> values, errors;
            for (const auto& r : rep.rows) {
                labels.push_back(r.label);
                values.push_back(r.dsc_mean);
                errors.push_back(r.dsc_stderr);
            }
            plotting::bar_plot(out_dir / "report.png", "test DSC (%) by configuration", labels, values, errors,
                               "DSC %");
        }
    }
    return rep;
}

} // namespace separeg::pipeline
