// SPDX-License-Identifier: Apache-2.0

#include "support/test.hpp"
#include "support/oracles.hpp"

#include "separeg/contrastive.hpp"
#include "separeg/distill.hpp"
#include "separeg/errors.hpp"
#include "separeg/organcluster.hpp"

#include <cmath>
#include <random>

using namespace separeg;

namespace {

std::vector<ImageF> toy_images(int n, std::uint64_t seed, int size = 32) {
    std::vector<ImageF> out;
    for (int i = 0; i < n; ++i)
        out.push_back(oracle::random_image(size, seed * 1000 + static_cast<std::uint64_t>(i)));
    return out;
}

augment::AugmentationPolicy toy_policy() {
    augment::AugmentationPolicy p;
    p.out_size = 32;
    p.blur_sigma = {0.1, 1.0};
    return p;
}

contrastive::PretrainConfig toy_pretrain(long iters) {
    contrastive::PretrainConfig c;
    c.total_iterations = iters;
    c.batch_size = 8;
    c.optimizer.lr = 0.05;
    return c;
}

} // namespace

TEST_SUITE("contrastive") {

TEST_CASE("cosine loss closed forms") {
    const auto a = torch::tensor({{1.0, 0.0}, {0.0, 2.0}}, torch::kDouble);
    CHECK(contrastive::cosine_similarity_loss(a, a).item<double>() == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(contrastive::cosine_similarity_loss(a, -3 * a).item<double>() == doctest::Approx(1.0).epsilon(1e-15));
    const auto b = torch::tensor({{0.0, 5.0}, {1.0, 0.0}}, torch::kDouble);
    CHECK(contrastive::cosine_similarity_loss(a, b).item<double>() == doctest::Approx(0.0));
    // 45 degrees in one row, identical in the other: -(cos45 + 1) / 2.
    const auto c = torch::tensor({{1.0, 1.0}, {0.0, 1.0}}, torch::kDouble);
    CHECK(contrastive::cosine_similarity_loss(a, c).item<double>() ==
          doctest::Approx(-(std::sqrt(0.5) + 1.0) / 2.0).epsilon(1e-15));
}

TEST_CASE("cosine loss input checks") {
    const auto z = torch::zeros({2, 3}, torch::kDouble);
    const auto o = torch::ones({2, 3}, torch::kDouble);
    CHECK_THROWS_AS(contrastive::cosine_similarity_loss(z, o, 0.0), ValidationError);
    CHECK(std::isfinite(contrastive::cosine_similarity_loss(z, o).item<double>()));
    CHECK_THROWS_AS(contrastive::cosine_similarity_loss(o, torch::ones({2, 4})), ValidationError);
    CHECK_THROWS_AS(contrastive::cosine_similarity_loss(torch::ones({0, 3}), torch::ones({0, 3})), ValidationError);
}

TEST_CASE("cosine and SimSiam gradients match central differences") {
    torch::manual_seed(1);
    const double e1 = oracle::gradient_error(
        [](const auto& x) { return contrastive::cosine_similarity_loss(x[0], x[1]); },
        {torch::randn({4, 8}), torch::randn({4, 8})});
    CHECK(e1 < 1e-4);
    // Without stop-gradient every branch is differentiable.
    const double e2 = oracle::gradient_error(
        [](const auto& x) { return contrastive::simsiam_loss(x[0], x[1], x[2], x[3], false); },
        {torch::randn({4, 8}), torch::randn({4, 8}), torch::randn({4, 8}), torch::randn({4, 8})});
    CHECK(e2 < 1e-4);
}

TEST_CASE("stop-gradient leaves the target branches without gradient") {
    torch::manual_seed(2);
    std::vector<torch::Tensor> x;
    for (int i = 0; i < 4; ++i)
        x.push_back(torch::randn({4, 8}, torch::kDouble).set_requires_grad(true));
    contrastive::simsiam_loss(x[0], x[1], x[2], x[3], true).backward();
    CHECK(x[0].grad().abs().sum().item<double>() > 0);
    CHECK(x[2].grad().abs().sum().item<double>() > 0);
    CHECK_FALSE(x[1].grad().defined());
    CHECK_FALSE(x[3].grad().defined());
    // And the value equals the symmetric formula.
    const double sym = 0.5 * contrastive::cosine_similarity_loss(x[0], x[3]).item<double>() +
                       0.5 * contrastive::cosine_similarity_loss(x[2], x[1]).item<double>();
    CHECK(contrastive::simsiam_loss(x[0], x[1], x[2], x[3]).item<double>() == doctest::Approx(sym).epsilon(1e-15));
}

TEST_CASE("random directions average to zero loss (Monte-Carlo)") {
    torch::manual_seed(7);
    double sum = 0;
    const int trials = 1000;
    for (int t = 0; t < trials; ++t) {
        const auto p1 = torch::randn({4, 256}), z1 = torch::randn({4, 256});
        const auto p2 = torch::randn({4, 256}), z2 = torch::randn({4, 256});
        sum += contrastive::simsiam_loss(p1, z1, p2, z2).item<double>();
    }
    CHECK(std::fabs(sum / trials) < 0.1);
}

TEST_CASE("collapse monitor") {
    CHECK(contrastive::collapse_std(torch::ones({8, 16})) == doctest::Approx(0.0));
    torch::manual_seed(0);
    const double s = contrastive::collapse_std(torch::randn({4096, 16}));
    CHECK(s == doctest::Approx(1.0 / std::sqrt(16.0)).epsilon(0.05));
}

TEST_CASE("pretraining lowers the loss and is reproducible") {
    const auto imgs = toy_images(24, 1);
    auto cfg = toy_pretrain(60);
    const auto a = contrastive::pretrain_on_images(imgs, nets::NetworkSpec::tiny(), toy_policy(), cfg);
    const auto b = contrastive::pretrain_on_images(imgs, nets::NetworkSpec::tiny(), toy_policy(), cfg);
    REQUIRE(a.steps.size() == 60);
    CHECK(nets::serialize_checkpoint(a.checkpoint) == nets::serialize_checkpoint(b.checkpoint));
    double head = 0, tail = 0;
    for (int i = 0; i < 15; ++i) {
        head += a.steps[i].loss;
        tail += a.steps[a.steps.size() - 1 - i].loss;
    }
    CHECK(tail < head);
    CHECK(a.checkpoint.stage == nets::Stage::inter);
    CHECK(a.checkpoint.tensors.count("predictor.fc1.weight"));
    auto bad = toy_policy();
    bad.out_size = 64;
    CHECK_THROWS_AS(contrastive::pretrain_on_images(imgs, nets::NetworkSpec::tiny(), bad, cfg), ValidationError);
}

}

TEST_SUITE("cluster") {

TEST_CASE("k-means reaches the exhaustive optimum on 8 points") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n(0.0, 1.0);
        std::vector<std::array<double, 2>> pts;
        cluster::Matrix z(8, 2);
        for (int i = 0; i < 8; ++i) {
            pts.push_back({n(rng), n(rng)});
            z(i, 0) = pts.back()[0];
            z(i, 1) = pts.back()[1];
        }
        const auto m = cluster::kmeans(z, 2, seed);
        CHECK(m.inertia == doctest::Approx(oracle::best_two_partition(pts)).epsilon(1e-12));
        CHECK(cluster::inertia_of(z, m.centroids, m.labels) == doctest::Approx(m.inertia).epsilon(1e-12));
    }
}

TEST_CASE("two separated blobs are recovered") {
    cluster::Matrix z(8, 2);
    for (int i = 0; i < 8; ++i) {
        z(i, 0) = (i < 4 ? 0.0 : 10.0) + 0.1 * (i % 4);
        z(i, 1) = 0.05 * i;
    }
    const auto m = cluster::kmeans(z, 2, 3);
    for (int i = 1; i < 4; ++i)
        CHECK(m.labels[i] == m.labels[0]);
    for (int i = 5; i < 8; ++i)
        CHECK(m.labels[i] == m.labels[4]);
    CHECK(m.labels[0] != m.labels[4]);
    for (std::size_t i = 1; i < m.inertia_trace.size(); ++i)
        CHECK(m.inertia_trace[i] <= m.inertia_trace[i - 1] + 1e-12);
}

TEST_CASE("k-means edge cases") {
    cluster::Matrix z = cluster::Matrix::Zero(3, 2);
    CHECK_THROWS_AS(cluster::kmeans(z, 4, 0), ValidationError);
    const auto m = cluster::kmeans(z, 3, 0);  // identical points still give k clusters
    CHECK(m.inertia == 0.0);
    z(0, 0) = std::nan("");
    CHECK_THROWS_AS(cluster::kmeans(z, 2, 0), ValidationError);
}

TEST_CASE("determinism and json round trip") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0, 1);
    cluster::Matrix z(40, 5);
    for (int i = 0; i < z.rows(); ++i)
        for (int j = 0; j < z.cols(); ++j)
            z(i, j) = n(rng);
    const auto a = cluster::kmeans(z, 3, 11);
    const auto b = cluster::kmeans(z, 3, 11);
    CHECK(a.labels == b.labels);
    CHECK(a.inertia == b.inertia);
    const auto back = cluster::cluster_model_from_json(cluster::to_json(a));
    CHECK(back.labels == a.labels);
    CHECK(back.centroids.isApprox(a.centroids, 0));
    const auto u = cluster::normalize_rows(z);
    for (int i = 0; i < u.rows(); ++i)
        CHECK(u.row(i).norm() == doctest::Approx(1.0));
}

TEST_CASE("purity counts majority ground truth per cluster") {
    regions::RegionSetManifest m;
    const int cl[] = {0, 0, 0, 1, 1, 1};
    const int gt[] = {1, 1, 2, 2, 2, 2};
    for (int i = 0; i < 6; ++i) {
        regions::RegionEntry e;
        e.id = std::to_string(i);
        e.cluster_id = cl[i];
        e.gt_label = gt[i];
        m.records.push_back(e);
    }
    regions::RegionEntry unlabelled;
    unlabelled.cluster_id = 0;
    m.records.push_back(unlabelled);
    CHECK(cluster::cluster_purity(m) == doctest::Approx(5.0 / 6.0));
}

}

TEST_SUITE("distill") {

TEST_CASE("intra loss closed forms") {
    const auto s = torch::tensor({{1.0, 0.0}}, torch::kDouble);
    const auto t = torch::tensor({{0.0, 1.0}}, torch::kDouble);
    // KL(softmax(1,0) || softmax(0,1)) evaluated by hand.
    const double e = std::exp(1.0);
    const double p0 = e / (e + 1), p1 = 1 / (e + 1);
    const double expected = p0 * std::log(p0 / p1) + p1 * std::log(p1 / p0);
    CHECK(distill::intra_loss(s, t, 1.0).item<double>() == doctest::Approx(expected).epsilon(1e-14));
    CHECK(distill::intra_loss(s, s, 1.0).item<double>() == doctest::Approx(0.0));
    // Temperature 2 halves the logits.
    const double q0 = std::exp(0.5) / (std::exp(0.5) + 1), q1 = 1 - q0;
    CHECK(distill::intra_loss(s, t, 2.0).item<double>() ==
          doctest::Approx(q0 * std::log(q0 / q1) + q1 * std::log(q1 / q0)).epsilon(1e-14));
    CHECK_THROWS_AS(distill::intra_loss(s, t, 0.0), ValidationError);
    CHECK_THROWS_AS(distill::intra_loss(s, torch::ones({1, 3}, torch::kDouble), 1.0), ValidationError);
}

TEST_CASE("intra and inter gradients match central differences") {
    torch::manual_seed(4);
    const double e1 = oracle::gradient_error(
        [](const auto& x) { return distill::intra_loss(x[0], x[1], 1.5); },
        {torch::randn({4, 8}), torch::randn({4, 8})});
    CHECK(e1 < 1e-4);

    nets::MlpHead proj(8, 16, 6);
    proj->to(torch::kDouble);
    const double e2 = oracle::gradient_error(
        [&](const auto& x) { return distill::inter_loss(x[0], proj, x[1]); },
        {torch::randn({4, 8}), torch::randn({4, 6})});
    CHECK(e2 < 1e-4);
}

TEST_CASE("distillation keeps teachers frozen and reports a consistent total") {
    const auto spec = nets::NetworkSpec::tiny();
    const auto imgs = toy_images(16, 2);
    distill::TeacherBundle t;
    t.inter = contrastive::pretrain_on_images(imgs, spec, toy_policy(), toy_pretrain(3)).checkpoint;
    t.k = 2;
    for (int k = 0; k < 2; ++k) {
        contrastive::PretrainOptions o;
        o.stage = nets::Stage::intra;
        o.stage_index = k;
        auto c = toy_pretrain(3);
        c.seed = 10 + static_cast<std::uint64_t>(k);
        t.intra.push_back(contrastive::pretrain_on_images(imgs, spec, toy_policy(), c, o).checkpoint);
    }
    const auto hash = distill::teacher_hash(t);
    std::vector<int> ids;
    for (int i = 0; i < 16; ++i)
        ids.push_back(i % 2);
    distill::DistillConfig cfg;
    cfg.iterations = 6;
    cfg.batch_size = 8;
    cfg.w_intra = 0.7;
    cfg.w_inter = 1.3;
    const auto r = distill::distill_on_images(imgs, ids, t, toy_policy(), cfg);
    CHECK(r.teacher_hash_before == r.teacher_hash_after);
    CHECK(distill::teacher_hash(t) == hash);
    REQUIRE(r.steps.size() == 6);
    for (const auto& s : r.steps)
        CHECK(s.total == doctest::Approx(0.7 * s.intra + 1.3 * s.inter).epsilon(1e-6));
    CHECK(r.student.stage == nets::Stage::student);
    CHECK(r.student.tensors.count("projector.fc1.weight"));

    cfg.w_intra = 0;
    const auto inter_only = distill::distill_on_images(imgs, ids, t, toy_policy(), cfg);
    for (const auto& s : inter_only.steps)
        CHECK(s.total == doctest::Approx(1.3 * s.inter).epsilon(1e-6));

    ids[3] = 5;
    CHECK_THROWS_AS(distill::distill_on_images(imgs, ids, t, toy_policy(), cfg), ValidationError);
}

TEST_CASE("intra teachers: one per non-empty subset, empty ones skipped") {
    regions::RegionSetManifest empty;
    CHECK_THROWS_AS(distill::pretrain_intra({empty, empty}, nets::NetworkSpec::tiny(), toy_policy(), toy_pretrain(2)),
                    ValidationError);
}

}
