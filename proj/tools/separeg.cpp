// SPDX-License-Identifier: Apache-2.0
//
// separeg command line. Every subcommand resolves the same configuration
// (profile defaults, then --config, then --seed) and overrides a few fields
// from its own flags.

#include "separeg/checkpoint.hpp"
#include "separeg/contrastive.hpp"
#include "separeg/distill.hpp"
#include "separeg/errors.hpp"
#include "separeg/finetune.hpp"
#include "separeg/imaging_io.hpp"
#include "separeg/organcluster.hpp"
#include "separeg/pipeline.hpp"
#include "separeg/regions.hpp"
#include "separeg/superpixel.hpp"
#include "separeg/synthetic.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace separeg;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Globals {
    std::string config_path;
    std::uint64_t seed = 0;
    std::string profile = "tiny";
    std::string out;
    bool resume = false;
};

json resolve(const Globals& g, const std::string& preset = {}) {
    json patch = json::object();
    if (!g.config_path.empty()) {
        std::ifstream in(g.config_path);
        if (!in)
            throw ConfigError("cannot open config file " + g.config_path);
        try {
            patch = json::parse(in, nullptr, true, true);
        } catch (const json::exception& e) {
            throw ConfigError(g.config_path + ": " + e.what());
        }
    }
    std::string profile = patch.value("profile", g.profile);
    if (!preset.empty())
        patch["ablation"] = pipeline::preset(preset);
    return pipeline::make_config(profile, g.seed, patch);
}

std::string require_out(const Globals& g, const char* what) {
    if (g.out.empty())
        throw ConfigError(std::string("--out is required (") + what + ")");
    return g.out;
}

std::vector<imaging::ImageSlice> pool_slices(const imaging::DatasetManifest& m, int axis,
                                             const imaging::IntensityWindow& window) {
    std::vector<imaging::ImageSlice> slices;
    for (const auto& p : m.pretraining_pool())
        for (auto& s : imaging::extract_slices(imaging::load_volume(p), axis, window))
            slices.push_back(std::move(s));
    return slices;
}

imaging::IntensityWindow window_of(const json& c) {
    const auto w = c.at("dataset").at("window").get<std::array<double, 2>>();
    return {w[0], w[1]};
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"separeg: region-level self-supervised pretraining for organ segmentation"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--config", g.config_path, "JSON file merged over the profile defaults");
    app.add_option("--seed", g.seed, "Run seed");
    app.add_option("--profile", g.profile, "tiny or paper")->check(CLI::IsMember({"tiny", "paper"}));
    app.add_option("--out", g.out, "Output path (file or directory, per subcommand)");
    app.add_flag("--resume", g.resume, "Continue an existing run directory");

    // synth
    auto* synth = app.add_subcommand("synth", "Write the synthetic dataset of the configured profile");
    synth->callback([&] {
        const auto c = resolve(g);
        const auto& ds = c.at("dataset");
        const auto& s = ds.at("splits");
        imaging::SplitCounts counts{s.at("pretrain").get<int>(), s.at("train").get<int>(), s.at("val").get<int>(),
                                    s.at("test").get<int>()};
        const auto m = imaging::write_synthetic_dataset(ds.at("synthetic").get<imaging::SyntheticSpec>(), counts,
                                                        require_out(g, "dataset directory"));
        std::cout << "wrote " << m.entries.size() << " volumes to " << g.out << "/dataset.json\n";
    });

    // separate
    std::string data_manifest, sep_mode = "sis";
    std::optional<int> n_centers;
    auto* separate = app.add_subcommand("separate", "Cut pretraining slices into a region set");
    separate->add_option("--data", data_manifest, "Dataset manifest")->required();
    separate->add_option("--n-centers", n_centers, "SLIC centers per slice");
    separate->add_option("--mode", sep_mode, "sis, regular or none")->check(CLI::IsMember({"sis", "regular", "none"}));
    separate->callback([&] {
        const auto c = resolve(g);
        auto slic = c.at("slic").get<superpixel::SlicConfig>();
        if (n_centers)
            slic.n_centers = *n_centers;
        slic.validate();
        const fs::path out = require_out(g, "region directory");
        const auto slices = pool_slices(imaging::load_dataset_manifest(data_manifest),
                                        c.at("separation").at("axis").get<int>(), window_of(c));
        regions::RegionSetManifest rs;
        if (sep_mode == "sis")
            rs = regions::build_region_set(slices, slic, g.seed, out);
        else if (sep_mode == "regular")
            rs = regions::build_regular_region_set(slices, c.at("separation").at("regular_grid").get<int>(), g.seed,
                                                   out);
        else
            rs = regions::build_full_image_region_set(slices, g.seed, out);
        regions::save_region_manifest(rs, out / "regions.jsonl");
        std::cout << rs.size() << " regions from " << slices.size() << " slices -> " << (out / "regions.jsonl")
                  << '\n';
    });

    // pretrain
    std::string regions_path;
    std::optional<long> iters;
    std::optional<int> batch;
    auto* pretrain = app.add_subcommand("pretrain", "SimSiam pretraining on a region set");
    pretrain->add_option("--regions", regions_path, "Region manifest")->required();
    pretrain->add_option("--iters", iters, "Iterations");
    pretrain->add_option("--batch", batch, "Batch size");
    pretrain->callback([&] {
        const auto c = resolve(g);
        auto cfg = c.at("pretrain").get<contrastive::PretrainConfig>();
        cfg.seed = g.seed;
        if (iters)
            cfg.total_iterations = *iters;
        if (batch)
            cfg.batch_size = *batch;
        cfg.validate();
        const fs::path out = require_out(g, "checkpoint path");
        contrastive::PretrainOptions opts;
        opts.log_path = fs::path(out).replace_extension(".log.jsonl");
        opts.plot_path = fs::path(out).replace_extension(".loss.png");
        const auto r = contrastive::pretrain(regions::load_region_manifest(regions_path),
                                             c.at("network").get<nets::NetworkSpec>(),
                                             c.at("augment").get<augment::AugmentationPolicy>(), cfg, opts);
        nets::save_checkpoint(r.checkpoint, out);
        for (const auto& w : r.warnings)
            std::cerr << "warning: " << w << '\n';
        std::cout << "final loss " << r.steps.back().loss << " -> " << out << '\n';
    });

    // cluster
    std::string ckpt_path;
    std::optional<int> k_opt;
    auto* cluster_cmd = app.add_subcommand("cluster", "k-means organ clusters over inter projections");
    cluster_cmd->add_option("--regions", regions_path, "Region manifest")->required();
    cluster_cmd->add_option("--ckpt", ckpt_path, "Inter checkpoint")->required();
    cluster_cmd->add_option("--k", k_opt, "Number of clusters");
    cluster_cmd->callback([&] {
        const auto c = resolve(g);
        const auto& cc = c.at("cluster");
        cluster::ClusterOptions o;
        o.k = k_opt.value_or(cc.at("k").get<int>());
        o.seed = g.seed;
        o.restarts = cc.at("restarts").get<int>();
        o.max_iter = cc.at("max_iter").get<int>();
        o.normalize = cc.at("normalize").get<bool>();
        const auto rs = regions::load_region_manifest(regions_path);
        const auto cm = cluster::cluster_regions(rs, nets::load_checkpoint(ckpt_path), o);
        const fs::path out = require_out(g, "cluster directory");
        cluster::save_cluster_model(cm, out / "clusters.json");
        const auto split = cluster::split_region_set(rs, cm, out);
        print_json({{"k", cm.k}, {"inertia", cm.inertia}, {"sizes", cm.cluster_sizes()}});
        try {
            std::cout << "purity " << cluster::cluster_purity(split.labelled) << '\n';
        } catch (const ValidationError&) {
        }
    });

    // pretrain-intra
    auto* intra = app.add_subcommand("pretrain-intra", "One SimSiam teacher per cluster subset");
    intra->add_option("--regions", regions_path, "Labelled region manifest")->required();
    intra->add_option("--iters", iters, "Iterations per subset");
    intra->callback([&] {
        const auto c = resolve(g);
        auto cfg = c.at("intra").get<contrastive::PretrainConfig>();
        cfg.seed = g.seed;
        if (iters)
            cfg.total_iterations = *iters;
        const auto labelled = regions::load_region_manifest(regions_path);
        int k = 0;
        for (const auto& r : labelled.records) {
            if (!r.cluster_id)
                throw ValidationError("region " + r.id + " has no cluster_id");
            k = std::max(k, *r.cluster_id + 1);
        }
        std::vector<regions::RegionSetManifest> subsets(static_cast<std::size_t>(k));
        for (auto& s : subsets) {
            s.root = labelled.root;
            s.shuffle_seed = labelled.shuffle_seed;
            s.separation = labelled.separation;
        }
        for (const auto& r : labelled.records)
            subsets[static_cast<std::size_t>(*r.cluster_id)].records.push_back(r);
        const fs::path out = require_out(g, "teacher directory");
        const auto res = distill::pretrain_intra(subsets, c.at("network").get<nets::NetworkSpec>(),
                                                 c.at("augment").get<augment::AugmentationPolicy>(), cfg, out);
        for (const auto& ck : res.checkpoints)
            nets::save_checkpoint(ck, out / ("intra_" + std::to_string(ck.stage_index) + ".ckpt"));
        for (const auto& w : res.warnings)
            std::cerr << "warning: " << w << '\n';
        std::cout << res.checkpoints.size() << " intra teachers -> " << out << '\n';
    });

    // distill
    std::string inter_path, intra_dir, clusters_path, loss_mode = "both";
    auto* dist = app.add_subcommand("distill", "Distill inter and intra teachers into a student encoder");
    dist->add_option("--regions", regions_path, "Labelled region manifest")->required();
    dist->add_option("--inter", inter_path, "Inter checkpoint")->required();
    dist->add_option("--intra", intra_dir, "Directory holding intra_<k>.ckpt")->required();
    dist->add_option("--clusters", clusters_path, "clusters.json")->required();
    dist->add_option("--loss", loss_mode, "intra, inter or both")->check(CLI::IsMember({"intra", "inter", "both"}));
    dist->add_option("--iters", iters, "Iterations");
    dist->callback([&] {
        const auto c = resolve(g);
        auto cfg = c.at("distill").get<distill::DistillConfig>();
        cfg.seed = g.seed;
        cfg.w_intra = loss_mode == "inter" ? 0.0 : 1.0;
        cfg.w_inter = loss_mode == "intra" ? 0.0 : 1.0;
        if (iters)
            cfg.iterations = *iters;
        const auto cm = cluster::load_cluster_model(clusters_path);
        distill::TeacherBundle t;
        t.inter = nets::load_checkpoint(inter_path);
        t.k = cm.k;
        for (int k = 0; k < cm.k; ++k) {
            const fs::path p = fs::path(intra_dir) / ("intra_" + std::to_string(k) + ".ckpt");
            if (fs::exists(p))
                t.intra.push_back(nets::load_checkpoint(p));
        }
        const fs::path out = require_out(g, "student checkpoint path");
        distill::DistillOptions opts{fs::path(out).replace_extension(".log.jsonl"),
                                     fs::path(out).replace_extension(".loss.png")};
        const auto r = distill::distill(regions::load_region_manifest(regions_path), t,
                                        c.at("augment").get<augment::AugmentationPolicy>(), cfg, opts);
        nets::save_checkpoint(r.student, out);
        std::cout << "teacher hash " << r.teacher_hash_after.substr(0, 16)
                  << (r.teacher_hash_before == r.teacher_hash_after ? " (unchanged)" : " (CHANGED)") << " -> " << out
                  << '\n';
    });

    // finetune
    std::string init = "none";
    std::optional<int> train_volumes, epochs;
    auto* ft = app.add_subcommand("finetune", "Train a U-Net on labelled volumes and evaluate on the test split");
    ft->add_option("--data", data_manifest, "Dataset manifest")->required();
    ft->add_option("--init", init, "Encoder checkpoint or 'none'");
    ft->add_option("--train-volumes", train_volumes, "Labelled training volumes");
    ft->add_option("--epochs", epochs, "Epochs");
    ft->callback([&] {
        const auto c = resolve(g);
        auto cfg = c.at("finetune").get<finetune::FinetuneConfig>();
        cfg.seed = g.seed;
        cfg.window = window_of(c);
        if (train_volumes)
            cfg.n_train_volumes = *train_volumes;
        if (epochs)
            cfg.epochs = *epochs;
        cfg.validate();
        std::optional<nets::Checkpoint> init_ckpt;
        if (init != "none")
            init_ckpt = nets::load_checkpoint(init);
        const auto data =
            finetune::load_finetune_data(imaging::load_dataset_manifest(data_manifest), cfg.n_train_volumes);
        auto r = finetune::finetune(data, c.at("network").get<nets::NetworkSpec>(), cfg, init_ckpt,
                                    {.validation = {}, .on_epoch = [](const finetune::EpochRecord& e) {
                                         std::cerr << "epoch " << e.epoch << " loss " << e.train_loss << " val DSC "
                                                   << e.val_dsc << '\n';
                                     }});
        const fs::path out = require_out(g, "finetune directory");
        nets::save_checkpoint(r.checkpoint, out / "finetuned.ckpt");
        metrics::write_report(r.report, out, "metrics");
        finetune::write_history(out / "history.jsonl", r.history);
        std::cout << "best epoch " << r.best_epoch << ", test mean DSC " << r.report.mean_dsc.mean << '\n';
    });

    // evaluate
    std::string split = "test";
    auto* ev = app.add_subcommand("evaluate", "Evaluate a finetuned checkpoint on one split");
    ev->add_option("--ckpt", ckpt_path, "Finetuned checkpoint")->required();
    ev->add_option("--data", data_manifest, "Dataset manifest")->required();
    ev->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    ev->callback([&] {
        const auto c = resolve(g);
        const auto ckpt = nets::load_checkpoint(ckpt_path);
        auto net = finetune::unet_from_checkpoint(ckpt);
        const auto m = imaging::load_dataset_manifest(data_manifest);
        std::vector<imaging::Volume> vols;
        for (const auto& p : m.paths(imaging::split_from_string(split)))
            vols.push_back(imaging::load_volume(p));
        const auto& meta = ckpt.meta;
        const auto w = meta.at("window").get<std::array<double, 2>>();
        const bool mm = c.at("finetune").value("hd95_mm", false);
        auto rep = finetune::evaluate(net, vols, meta.at("n_classes").get<int>(), meta.at("axis").get<int>(),
                                      {w[0], w[1]}, mm);
        rep.config_hash = ckpt.config_hash;
        if (meta.contains("seed"))
            rep.seeds = {meta.at("seed").get<std::uint64_t>()};
        rep.meta["split"] = split;
        if (!g.out.empty())
            metrics::write_report(rep, g.out, "metrics_" + split);
        print_json(metrics::to_json(rep));
    });

    // run
    std::string preset_name, stop_after;
    auto* run = app.add_subcommand("run", "All stages end to end into a resumable run directory");
    run->add_option("--preset", preset_name, "Ablation preset")->check(CLI::IsMember(pipeline::preset_names()));
    run->add_option("--stop-after", stop_after, "Stop once this stage has finished");
    run->callback([&] {
        const auto c = resolve(g, preset_name);
        pipeline::RunOptions o;
        o.resume = g.resume;
        if (!stop_after.empty())
            o.stop_after = stop_after;
        const auto ledger = pipeline::run(c, require_out(g, "run directory"), o);
        for (const auto& e : ledger.entries)
            std::cout << e.stage << ": " << e.status << '\n';
    });

    // report
    std::vector<std::string> run_dirs;
    auto* rep = app.add_subcommand("report", "Compare finished runs");
    rep->add_option("runs", run_dirs, "Run directories")->required();
    rep->callback([&] {
        std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
        const auto r = pipeline::report(dirs, g.out);
        std::cout << r.table;
    });

    for (auto* sub : app.get_subcommands({}))
        sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const StageError& e) {
        std::cerr << "stage '" << e.stage() << "' failed: " << e.what() << '\n';
        return kExitStage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitStage;
    }
    return 0;
}
