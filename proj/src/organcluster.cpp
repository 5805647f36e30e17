// SPDX-License-Identifier: Apache-2.0

#include "separeg/organcluster.hpp"

#include "separeg/augment.hpp"
#include "separeg/contrastive.hpp"
#include "separeg/errors.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <random>

namespace separeg::cluster {

using nlohmann::json;
namespace fs = std::filesystem;

Matrix embed_images(const std::vector<ImageF>& images, const nets::Checkpoint& inter, int batch_size) {
    if (inter.stage != nets::Stage::inter && inter.stage != nets::Stage::intra)
        throw ValidationError("embedding needs a contrastive checkpoint, got stage " + inter.stage_tag());
    if (images.empty())
        throw ValidationError("nothing to embed: empty region set");
    for (const auto& im : images)
        if (im.rows != inter.spec.input_size || im.cols != inter.spec.input_size)
            throw ValidationError("region image size " + std::to_string(im.rows) + "x" +
                                  std::to_string(im.cols) + " does not match checkpoint input_size " +
                                  std::to_string(inter.spec.input_size));

    torch::set_num_threads(1);
    auto net = contrastive::simsiam_from_checkpoint(inter);
    net->eval();
    torch::NoGradGuard no_grad;
    Matrix z(static_cast<Eigen::Index>(images.size()), inter.spec.proj_out);
    for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto stop = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
        const std::vector<ImageF> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                        images.begin() + static_cast<std::ptrdiff_t>(stop));
        const auto out = net->projector(net->encoder(augment::to_batch(chunk)))
                             .to(torch::kFloat64)
                             .contiguous();
        const double* p = out.data_ptr<double>();
        for (std::size_t r = 0; r < chunk.size(); ++r)
            for (Eigen::Index c = 0; c < z.cols(); ++c)
                z(static_cast<Eigen::Index>(start + r), c) = p[r * static_cast<std::size_t>(z.cols()) + c];
    }
    return z;
}

Matrix embed_regions(const regions::RegionSetManifest& regions, const nets::Checkpoint& inter) {
    if (regions.empty())
        throw ValidationError("nothing to embed: empty region set");
    return embed_images(regions::load_region_images(regions, static_cast<int>(inter.spec.input_size)), inter);
}

Matrix normalize_rows(const Matrix& z) {
    Matrix out = z;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const double n = out.row(i).norm();
        if (n > 0)
            out.row(i) /= n;
    }
    return out;
}

std::vector<int> ClusterModel::cluster_sizes() const {
    std::vector<int> sizes(static_cast<std::size_t>(k), 0);
    for (int l : labels)
        ++sizes[static_cast<std::size_t>(l)];
    return sizes;
}

double inertia_of(const Matrix& z, const Matrix& centroids, const std::vector<int>& labels) {
    double total = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i)
        total += (z.row(i) - centroids.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
    return total;
}

namespace {

struct Run {
    Matrix centroids;
    std::vector<int> labels;
    std::vector<double> trace;
};

Matrix plus_plus(const Matrix& z, int k, std::mt19937_64& rng) {
    const Eigen::Index n = z.rows();
    Matrix c(k, z.cols());
    c.row(0) = z.row(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng));
    Eigen::VectorXd d2(n);
    for (Eigen::Index i = 0; i < n; ++i)
        d2(i) = (z.row(i) - c.row(0)).squaredNorm();
    for (int j = 1; j < k; ++j) {
        const double total = d2.sum();
        Eigen::Index pick = 0;
        if (total > 0) {
            const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
            double acc = 0;
            pick = n - 1;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += d2(i);
                if (u < acc && d2(i) > 0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
        }
        c.row(j) = z.row(pick);
        for (Eigen::Index i = 0; i < n; ++i)
            d2(i) = std::min(d2(i), (z.row(i) - c.row(j)).squaredNorm());
    }
    return c;
}

/// Nearest-centroid assignment; returns whether any label changed.
bool assign(const Matrix& z, const Matrix& c, std::vector<int>& labels, Eigen::VectorXd& dist) {
    bool changed = false;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        int best = 0;
        double best_d = (z.row(i) - c.row(0)).squaredNorm();
        for (Eigen::Index j = 1; j < c.rows(); ++j) {
            const double d = (z.row(i) - c.row(j)).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(j);
            }
        }
        dist(i) = best_d;
        auto& l = labels[static_cast<std::size_t>(i)];
        if (l != best) {
            l = best;
            changed = true;
        }
    }
    return changed;
}

void update(const Matrix& z, Matrix& c, std::vector<int>& labels, Eigen::VectorXd& dist) {
    const int k = static_cast<int>(c.rows());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    Matrix sums = Matrix::Zero(k, z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const int l = labels[static_cast<std::size_t>(i)];
        sums.row(l) += z.row(i);
        ++counts[static_cast<std::size_t>(l)];
    }
    for (int j = 0; j < k; ++j) {
        if (counts[static_cast<std::size_t>(j)] > 0) {
            c.row(j) = sums.row(j) / counts[static_cast<std::size_t>(j)];
            continue;
        }
        // Reseed to the farthest point whose cluster can spare it.
        Eigen::Index far = -1;
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            if (counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] < 2)
                continue;
            if (far < 0 || dist(i) > dist(far))
                far = i;
        }
        if (far < 0)
            continue;
        --counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(far)])];
        labels[static_cast<std::size_t>(far)] = j;
        counts[static_cast<std::size_t>(j)] = 1;
        c.row(j) = z.row(far);
        dist(far) = 0;
    }
}

Run lloyd(const Matrix& z, int k, int max_iter, std::mt19937_64& rng) {
    Run run;
    run.centroids = plus_plus(z, k, rng);
    run.labels.assign(static_cast<std::size_t>(z.rows()), -1);
    Eigen::VectorXd dist(z.rows());
    assign(z, run.centroids, run.labels, dist);
    run.trace.push_back(dist.sum());
    for (int it = 0; it < max_iter; ++it) {
        update(z, run.centroids, run.labels, dist);
        const bool changed = assign(z, run.centroids, run.labels, dist);
        run.trace.push_back(dist.sum());
        if (!changed)
            break;
    }
    return run;
}

} // namespace

ClusterModel kmeans(const Matrix& z, int k, std::uint64_t seed, int restarts, int max_iter) {
    if (k < 1)
        throw ValidationError("k must be at least 1");
    if (z.rows() < k)
        throw ValidationError("k-means needs at least k=" + std::to_string(k) + " points, got " +
                              std::to_string(z.rows()));
    if (restarts < 1 || max_iter < 0)
        throw ValidationError("restarts must be >= 1 and max_iter >= 0");
    if (!z.allFinite())
        throw ValidationError("k-means input contains non-finite values");

    std::mt19937_64 rng(seed);
    ClusterModel best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        Run run = lloyd(z, k, max_iter, rng);
        const double inertia = run.trace.back();
        if (inertia < best.inertia) {
            best.inertia = inertia;
            best.centroids = std::move(run.centroids);
            best.labels = std::move(run.labels);
            best.inertia_trace = std::move(run.trace);
            best.best_restart = r;
        }
    }
    best.k = k;
    best.seed = seed;
    best.restarts = restarts;
    best.max_iter = max_iter;
    return best;
}

json to_json(const ClusterModel& m) {
    json centroids = json::array();
    for (Eigen::Index i = 0; i < m.centroids.rows(); ++i) {
        std::vector<double> row;
        for (Eigen::Index j = 0; j < m.centroids.cols(); ++j)
            row.push_back(m.centroids(i, j));
        centroids.push_back(row);
    }
    json assignments = json::array();
    for (std::size_t i = 0; i < m.labels.size(); ++i)
        assignments.push_back({{"index", i},
                               {"region_id", i < m.region_ids.size() ? json(m.region_ids[i]) : json(nullptr)},
                               {"cluster", m.labels[i]}});
    return json{{"k", m.k},
                {"centroids", centroids},
                {"assignments", assignments},
                {"inertia", m.inertia},
                {"seed", m.seed},
                {"restarts", m.restarts},
                {"max_iter", m.max_iter},
                {"normalized", m.normalized},
                {"best_restart", m.best_restart},
                {"inertia_trace", m.inertia_trace},
                {"cluster_sizes", m.cluster_sizes()}};
}

ClusterModel cluster_model_from_json(const json& j) {
    ClusterModel m;
    try {
        m.k = j.at("k").get<int>();
        const auto rows = j.at("centroids").get<std::vector<std::vector<double>>>();
        if (static_cast<int>(rows.size()) != m.k)
            throw FormatError("cluster model lists " + std::to_string(rows.size()) +
                              " centroids for k=" + std::to_string(m.k));
        const std::size_t d = rows.empty() ? 0 : rows.front().size();
        m.centroids.resize(m.k, static_cast<Eigen::Index>(d));
        for (int i = 0; i < m.k; ++i) {
            if (rows[static_cast<std::size_t>(i)].size() != d)
                throw FormatError("cluster model centroids have ragged dimensions");
            for (std::size_t c = 0; c < d; ++c)
                m.centroids(i, static_cast<Eigen::Index>(c)) = rows[static_cast<std::size_t>(i)][c];
        }
        for (const auto& a : j.at("assignments")) {
            const int l = a.at("cluster").get<int>();
            if (l < 0 || l >= m.k)
                throw FormatError("assignment outside [0, k)");
            m.labels.push_back(l);
            if (!a.at("region_id").is_null())
                m.region_ids.push_back(a.at("region_id").get<std::string>());
        }
        if (!m.region_ids.empty() && m.region_ids.size() != m.labels.size())
            throw FormatError("cluster model has region ids for only some assignments");
        m.inertia = j.at("inertia").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.restarts = j.at("restarts").get<int>();
        m.max_iter = j.at("max_iter").get<int>();
        m.normalized = j.at("normalized").get<bool>();
        m.best_restart = j.value("best_restart", 0);
        m.inertia_trace = j.value("inertia_trace", std::vector<double>{});
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed cluster model: ") + e.what());
    }
    return m;
}

void save_cluster_model(const ClusterModel& m, const fs::path& path) {
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoError("cannot write cluster model: " + path.string());
    out << to_json(m).dump(1) << '\n';
}

ClusterModel load_cluster_model(const fs::path& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open cluster model: " + path.string());
    try {
        return cluster_model_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

ClusterModel cluster_regions(const regions::RegionSetManifest& regions, const nets::Checkpoint& inter,
                             const ClusterOptions& opts) {
    if (inter.stage != nets::Stage::inter)
        throw ValidationError("clustering needs the inter-organ checkpoint, got " + inter.stage_tag());
    Matrix z = embed_regions(regions, inter);
    if (opts.normalize)
        z = normalize_rows(z);
    ClusterModel m = kmeans(z, opts.k, opts.seed, opts.restarts, opts.max_iter);
    m.normalized = opts.normalize;
    for (const auto& e : regions.records)
        m.region_ids.push_back(e.id);
    return m;
}

SplitResult split_region_set(const regions::RegionSetManifest& regions, const ClusterModel& cm,
                             const fs::path& out_dir) {
    if (cm.labels.size() != regions.size())
        throw ValidationError("cluster model covers " + std::to_string(cm.labels.size()) +
                              " regions, manifest has " + std::to_string(regions.size()));
    std::map<std::string, int> by_id;
    const bool use_ids = !cm.region_ids.empty();
    if (use_ids)
        for (std::size_t i = 0; i < cm.labels.size(); ++i)
            by_id.emplace(cm.region_ids[i], cm.labels[i]);

    SplitResult out;
    out.labelled = regions;
    out.subsets.resize(static_cast<std::size_t>(cm.k));
    for (auto& s : out.subsets) {
        s.root = regions.root;
        s.shuffle_seed = regions.shuffle_seed;
        s.separation = regions.separation;
    }
    for (std::size_t i = 0; i < regions.records.size(); ++i) {
        auto& e = out.labelled.records[i];
        int label = cm.labels[i];
        if (use_ids) {
            const auto it = by_id.find(e.id);
            if (it == by_id.end())
                throw ValidationError("region '" + e.id + "' has no cluster assignment");
            label = it->second;
        }
        e.cluster_id = label;
        out.subsets[static_cast<std::size_t>(label)].records.push_back(e);
    }
    if (!out_dir.empty()) {
        regions::save_region_manifest(out.labelled, out_dir / "regions.jsonl");
        for (std::size_t k = 0; k < out.subsets.size(); ++k)
            regions::save_region_manifest(out.subsets[k], out_dir / ("cluster_" + std::to_string(k) + ".jsonl"));
    }
    return out;
}

double cluster_purity(const regions::RegionSetManifest& labelled) {
    std::map<int, std::map<int, int>> votes;
    int total = 0;
    for (const auto& e : labelled.records) {
        if (!e.cluster_id || !e.gt_label)
            continue;
        ++votes[*e.cluster_id][*e.gt_label];
        ++total;
    }
    if (total == 0)
        throw ValidationError("purity needs regions with both cluster_id and gt_label");
    int agree = 0;
    for (const auto& [cluster, counts] : votes) {
        int best = 0;
        for (const auto& [label, n] : counts)
            best = std::max(best, n);
        agree += best;
    }
    return static_cast<double>(agree) / total;
}

} // namespace separeg::cluster
