// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, non-zero exit when any fails.
//
//   separeg_acceptance [--work-dir DIR] [--only 1,2,...] [--seeds N]

#include "support/oracles.hpp"

#include "separeg/contrastive.hpp"
#include "separeg/distill.hpp"
#include "separeg/metrics.hpp"
#include "separeg/organcluster.hpp"
#include "separeg/pipeline.hpp"
#include "separeg/superpixel.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace separeg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ------------------------------------------------------------------ 1

bool spans_edge(const LabelGrid& l, int edge) {
    std::set<int> left, right;
    for (int r = 0; r < l.rows; ++r)
        for (int c = 0; c < l.cols; ++c)
            (c < edge ? left : right).insert(l(r, c));
    for (int v : left)
        if (right.count(v))
            return true;
    return false;
}

Outcome criterion_slic() {
    const auto t0 = Clock::now();
    superpixel::SlicConfig cfg;
    int bad_partition = 0, bad_connect = 0, bad_inertia = 0, bad_edge = 0, bad_reference = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        imaging::ImageSlice s;
        s.pixels = oracle::random_image(64, seed);
        const auto sp = superpixel::slic_segment(s, cfg);
        std::set<int> labels(sp.labels.data.begin(), sp.labels.data.end());
        if (static_cast<int>(labels.size()) != sp.n_regions || *labels.begin() != 0 ||
            *labels.rbegin() != sp.n_regions - 1)
            ++bad_partition;
        if (!oracle::labels_connected(sp.labels))
            ++bad_connect;
        for (std::size_t i = 1; i < sp.inertia_trace.size(); ++i)
            if (sp.inertia_trace[i] > sp.inertia_trace[i - 1] + 1e-9) {
                ++bad_inertia;
                break;
            }

        // Half/half step with seeded levels and noise, n_centers 16.
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> lo(0.0, 0.2), hi(0.8, 1.0);
        const double a = lo(rng), b = hi(rng);
        imaging::ImageSlice step;
        step.pixels = oracle::step_image(64, 32, a, b, 0.02, seed);
        superpixel::SlicConfig c16;
        c16.n_centers = 16;
        const auto ref = oracle::reference_slic(step.pixels, 16, c16.compactness, c16.max_iterations,
                                                c16.convergence_shift);
        const auto raw = superpixel::slic_cluster(step.pixels, c16);
        if (!(raw.labels == ref.labels))
            ++bad_reference;
        const auto seg = superpixel::slic_segment(step, c16);
        if (spans_edge(ref.labels, 32) || spans_edge(seg.labels, 32))
            ++bad_edge;
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = bad_partition + bad_connect + bad_inertia + bad_edge + bad_reference == 0 && secs < 60;
    o.detail = "50 seeds: partition " + std::to_string(bad_partition) + " bad, connectivity " +
               std::to_string(bad_connect) + " bad, inertia " + std::to_string(bad_inertia) + " bad, edge " +
               std::to_string(bad_edge) + " spanning, reference mismatch " + std::to_string(bad_reference) + ", " +
               fmt("%.1f s", secs);
    return o;
}

// ------------------------------------------------------------------ 2

Outcome criterion_losses() {
    torch::manual_seed(11);
    std::vector<std::string> failed;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok)
            failed.push_back(what);
    };
    const auto dbl = torch::TensorOptions().dtype(torch::kDouble);

    // Closed forms.
    const auto a = torch::tensor({{3.0, 4.0}, {0.0, 1.0}}, dbl);
    expect(contrastive::cosine_similarity_loss(a, 2 * a).item<double>() == -1.0, "cosine(x, 2x) = -1");
    const auto orth = torch::tensor({{-4.0, 3.0}, {1.0, 0.0}}, dbl);
    expect(contrastive::cosine_similarity_loss(a, orth).item<double>() == 0.0, "cosine(orthogonal) = 0");
    expect(contrastive::simsiam_loss(a, a, a, a).item<double>() == -1.0, "simsiam(identical) = -1");

    const auto s = torch::tensor({{1.0, 0.0}}, dbl), t = torch::tensor({{0.0, 1.0}}, dbl);
    const double e = std::exp(1.0), p0 = e / (e + 1), p1 = 1 / (e + 1);
    const double kl = p0 * std::log(p0 / p1) + p1 * std::log(p1 / p0);
    expect(std::fabs(distill::intra_loss(s, t, 1.0).item<double>() - kl) < 1e-15, "KL closed form");
    expect(distill::intra_loss(s, s, 1.0).item<double>() == 0.0, "KL(p || p) = 0");

    nets::MlpHead proj(8, 16, 6);
    proj->to(torch::kDouble);
    const auto f = torch::randn({4, 8}, dbl);
    {
        torch::NoGradGuard ng;
        const auto z_hat = proj->forward(f);
        expect(std::fabs(distill::inter_loss(f, proj, z_hat).item<double>() + 1.0) < 1e-15,
               "inter loss with its own projection = -1");
    }

    const auto scores = torch::zeros({1, 2, 2, 4}, dbl);
    auto target = torch::zeros({1, 2, 4}, torch::kLong);
    target.index_put_({0, 0}, 1);
    expect(metrics::dice_loss(scores, target, 0.0).item<double>() == 0.5, "soft Dice at uniform 0.5 = 0.5");

    // Central differences.
    std::map<std::string, double> err;
    err["cosine"] = oracle::gradient_error(
        [](const auto& x) { return contrastive::cosine_similarity_loss(x[0], x[1]); },
        {torch::randn({4, 8}), torch::randn({4, 8})});
    err["simsiam"] = oracle::gradient_error(
        [](const auto& x) { return contrastive::simsiam_loss(x[0], x[1], x[2], x[3], false); },
        {torch::randn({4, 8}), torch::randn({4, 8}), torch::randn({4, 8}), torch::randn({4, 8})});
    err["intra"] = oracle::gradient_error([](const auto& x) { return distill::intra_loss(x[0], x[1], 1.0); },
                                          {torch::randn({4, 8}), torch::randn({4, 8})});
    err["inter"] = oracle::gradient_error([&](const auto& x) { return distill::inter_loss(x[0], proj, x[1]); },
                                          {torch::randn({4, 8}), torch::randn({4, 6})});
    const auto tgt = torch::randint(0, 3, {2, 4, 4}, torch::kLong);
    err["dice"] = oracle::gradient_error([&](const auto& x) { return metrics::dice_loss(x[0], tgt); },
                                         {torch::randn({2, 3, 4, 4})});
    std::string detail;
    for (const auto& [name, v] : err) {
        expect(v < 1e-4, name + " gradient");
        detail += name + " " + fmt("%.1e", v) + ", ";
    }
    Outcome o;
    o.pass = failed.empty();
    o.detail = "closed forms exact; max relative gradient error: " + detail.substr(0, detail.size() - 2);
    for (const auto& f2 : failed)
        o.detail += "; FAILED " + f2;
    return o;
}

// ------------------------------------------------------------------ 3

Outcome criterion_contracts() {
    torch::manual_seed(3);
    std::vector<torch::Tensor> x;
    for (int i = 0; i < 4; ++i)
        x.push_back(torch::randn({8, 16}, torch::kDouble).set_requires_grad(true));
    contrastive::simsiam_loss(x[0], x[1], x[2], x[3], true).backward();
    const bool targets_zero = !x[1].grad().defined() && !x[3].grad().defined();
    const bool preds_nonzero = x[0].grad().abs().sum().item<double>() > 0 && x[2].grad().abs().sum().item<double>() > 0;

    // Through the network: encoder gradients with the built-in stop-gradient must
    // equal those of the same loss with targets detached by hand.
    auto net = contrastive::make_simsiam(nets::NetworkSpec::tiny(), 0);
    const auto v1 = torch::rand({4, 1, 32, 32}), v2 = torch::rand({4, 1, 32, 32});
    auto encoder_grads = [&](bool builtin) {
        net->encoder->zero_grad();
        net->projector->zero_grad();
        net->predictor->zero_grad();
        const auto z1 = net->projector->forward(net->encoder->forward(v1));
        const auto z2 = net->projector->forward(net->encoder->forward(v2));
        const auto p1 = net->predictor->forward(z1), p2 = net->predictor->forward(z2);
        const auto loss = builtin ? contrastive::simsiam_loss(p1, z1, p2, z2, true)
                                  : contrastive::simsiam_loss(p1, z1.detach(), p2, z2.detach(), false);
        loss.backward();
        std::vector<torch::Tensor> g;
        for (const auto& prm : net->encoder->parameters())
            g.push_back(prm.grad().clone());
        return g;
    };
    const auto g_builtin = encoder_grads(true), g_manual = encoder_grads(false);
    bool net_targets_zero = g_builtin.size() == g_manual.size();
    for (std::size_t i = 0; net_targets_zero && i < g_builtin.size(); ++i)
        net_targets_zero = torch::allclose(g_builtin[i], g_manual[i], 1e-5, 1e-7);

    // Frozen teachers.
    augment::AugmentationPolicy pol;
    pol.out_size = 32;
    pol.blur_sigma = {0.1, 1.0};
    std::vector<ImageF> imgs;
    for (int i = 0; i < 16; ++i)
        imgs.push_back(oracle::random_image(32, 500 + static_cast<std::uint64_t>(i)));
    contrastive::PretrainConfig pc;
    pc.total_iterations = 3;
    pc.batch_size = 8;
    pc.optimizer.lr = 0.05;
    distill::TeacherBundle t;
    t.inter = contrastive::pretrain_on_images(imgs, nets::NetworkSpec::tiny(), pol, pc).checkpoint;
    t.k = 2;
    for (int k = 0; k < 2; ++k) {
        contrastive::PretrainOptions po;
        po.stage = nets::Stage::intra;
        po.stage_index = k;
        pc.seed = 7 + static_cast<std::uint64_t>(k);
        t.intra.push_back(contrastive::pretrain_on_images(imgs, nets::NetworkSpec::tiny(), pol, pc, po).checkpoint);
    }
    const auto before = distill::teacher_hash(t);
    distill::DistillConfig dc;
    dc.iterations = 5;
    dc.batch_size = 8;
    std::vector<int> ids;
    for (int i = 0; i < 16; ++i)
        ids.push_back(i % 2);
    const auto r = distill::distill_on_images(imgs, ids, t, pol, dc);
    const bool frozen = r.teacher_hash_before == r.teacher_hash_after && distill::teacher_hash(t) == before;

    Outcome o;
    o.pass = targets_zero && preds_nonzero && net_targets_zero && frozen;
    o.detail = std::string("target-branch gradient ") + (targets_zero && net_targets_zero ? "none" : "PRESENT") +
               ", predictor branch " + (preds_nonzero ? "non-zero" : "ZERO") + ", teacher hash " +
               r.teacher_hash_after.substr(0, 12) + (frozen ? " unchanged" : " CHANGED");
    return o;
}

// ------------------------------------------------------------------ 4

Outcome criterion_kmeans() {
    int mismatches = 0;
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(1000 + seed);
        std::normal_distribution<double> n(0.0, 1.0);
        std::vector<std::array<double, 2>> pts;
        cluster::Matrix z(8, 2);
        for (int i = 0; i < 8; ++i) {
            pts.push_back({n(rng), n(rng)});
            z(i, 0) = pts.back()[0];
            z(i, 1) = pts.back()[1];
        }
        const double best = oracle::best_two_partition(pts);
        const auto m = cluster::kmeans(z, 2, seed);
        const double rel = std::fabs(m.inertia - best) / std::max(best, 1e-300);
        worst = std::max(worst, rel);
        if (rel > 1e-12)
            ++mismatches;
    }
    return {mismatches == 0, "20 seeds, " + std::to_string(mismatches) + " above the exhaustive optimum (worst relative gap " +
                                 fmt("%.1e", worst) + ")"};
}

// ------------------------------------------------------------------ 5

Outcome criterion_metrics() {
    std::mt19937_64 rng(77);
    int dsc_bad = 0, hd_bad = 0, sym_bad = 0, lin_bad = 0;
    for (int t = 0; t < 30; ++t) {
        const double p = 0.15 + 0.02 * t;
        const auto a = oracle::random_mask({8, 8, 4}, p, rng);
        const auto b = oracle::random_mask({8, 8, 4}, p, rng);
        if (metrics::dsc(a, b) != oracle::dsc(a, b))
            ++dsc_bad;
        const auto h = metrics::hd95(a, b);
        const double ref = oracle::hd95(a, b);
        if (!h || *h != ref)
            ++hd_bad;
        if (!h || metrics::hd95(b, a) != h)
            ++sym_bad;
        for (double s : {0.5, 2.0, 3.7}) {
            const auto hs = metrics::hd95(a, b, {s, s, s});
            if (!hs || !h || std::fabs(*hs - s * *h) > 1e-12 * std::max(1.0, s * *h))
                ++lin_bad;
        }
    }
    return {dsc_bad + hd_bad + sym_bad + lin_bad == 0,
            "30 pairs: dsc " + std::to_string(dsc_bad) + " differ, hd95 " + std::to_string(hd_bad) +
                " differ, asymmetric " + std::to_string(sym_bad) + ", spacing non-linear " + std::to_string(lin_bad)};
}

// ------------------------------------------------------------------ 6 and 7

struct AblationRun {
    std::string preset;
    std::uint64_t seed;
    fs::path dir;
    double dsc = 0;
};

double run_dsc(const fs::path& dir) {
    return metrics::load_report(dir / "finetune" / "metrics.json").mean_dsc.mean;
}

Outcome criterion_ablation(const fs::path& work, int n_seeds, std::vector<AblationRun>& runs) {
    const std::vector<std::pair<std::string, std::string>> configs{{"table5-row1", "random-init"},
                                                                   {"table4-row1", "none"},
                                                                   {"table4-row2", "regular"},
                                                                   {"table4-row3", "sis"},
                                                                   {"table5-row3", "sis+iid"}};
    const auto t0 = Clock::now();
    std::map<std::string, double> mean;
    std::vector<fs::path> dirs;
    for (std::uint64_t seed = 0; seed < static_cast<std::uint64_t>(n_seeds); ++seed)
        for (const auto& [preset, label] : configs) {
            const auto dir = work / (preset + "-seed" + std::to_string(seed));
            fs::remove_all(dir);
            const auto patch = json{{"ablation", pipeline::preset(preset)}};
            pipeline::run(pipeline::make_config("tiny", seed, patch), dir);
            const double d = run_dsc(dir);
            runs.push_back({preset, seed, dir, d});
            mean[label] += 100.0 * d / n_seeds;
            dirs.push_back(dir);
            std::cerr << "  " << label << " seed " << seed << ": DSC " << fmt("%.2f", 100 * d) << " ("
                      << fmt("%.0f", seconds_since(t0)) << " s)\n";
        }
    const double secs = seconds_since(t0);
    const auto rep = pipeline::report(dirs, work / "report");
    std::cerr << rep.table;

    const bool table5 = mean["sis+iid"] >= mean["sis"] && mean["sis"] >= mean["random-init"];
    const bool table4 = mean["sis"] >= mean["regular"] && mean["regular"] >= mean["none"];
    const bool margin = mean["sis+iid"] - mean["random-init"] >= 2.0;
    const bool budget = secs <= 30 * 60;
    std::string detail;
    for (const char* l : {"sis+iid", "sis", "regular", "none", "random-init"})
        detail += std::string(l) + " " + fmt("%.2f", mean[l]) + ", ";
    detail += "mean test DSC over " + std::to_string(n_seeds) + " seeds; ";
    detail += std::string("IID/SIS/random ordering ") + (table5 ? "holds" : "VIOLATED") + ", SIS/regular/none ordering " +
              (table4 ? "holds" : "VIOLATED") + ", margin " + fmt("%.2f", mean["sis+iid"] - mean["random-init"]) +
              (margin ? "" : " (< 2)") + ", " + fmt("%.0f s", secs) + (budget ? "" : " (over 30 min)");
    return {table5 && table4 && margin && budget, detail};
}

Outcome criterion_reproducible(const fs::path& work, const std::vector<AblationRun>& runs) {
    fs::path first;
    for (const auto& r : runs)
        if (r.preset == "table5-row3" && r.seed == 0)
            first = r.dir;
    const auto patch = json{{"ablation", pipeline::preset("table5-row3")}};
    const auto config = pipeline::make_config("tiny", 0, patch);
    if (first.empty()) {
        first = work / "repro-a";
        fs::remove_all(first);
        pipeline::run(config, first);
    }
    const auto second = work / "repro-b";
    fs::remove_all(second);
    pipeline::run(config, second);
    const auto a = slurp(first / "finetune" / "metrics.json");
    const auto b = slurp(second / "finetune" / "metrics.json");
    const bool same = !a.empty() && a == b;
    return {same, std::string("two tiny sis+iid runs, seed 0: metrics.json ") + (same ? "bit-identical" : "DIFFERS") +
                      " (" + std::to_string(a.size()) + " bytes)"};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"separeg acceptance criteria"};
    std::string work = (fs::temp_directory_path() / "separeg_acceptance").string();
    std::vector<int> only;
    int seeds = 3;
    app.add_option("--work-dir", work, "Scratch directory for pipeline runs");
    app.add_option("--only", only, "Subset of criteria to run")->delimiter(',');
    app.add_option("--seeds", seeds, "Seeds for the ablation criterion")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);
    torch::set_num_threads(1);
    fs::create_directories(work);

    auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
    std::vector<AblationRun> runs;
    const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
        {1, criterion_slic},
        {2, criterion_losses},
        {3, criterion_contracts},
        {4, criterion_kmeans},
        {5, criterion_metrics},
        {6, [&] { return criterion_ablation(work, seeds, runs); }},
        {7, [&] { return criterion_reproducible(work, runs); }}};

    int failures = 0;
    for (const auto& [id, fn] : criteria) {
        if (!wanted(id))
            continue;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
