// SPDX-License-Identifier: Apache-2.0

#include "separeg/metrics.hpp"

#include "separeg/errors.hpp"
#include "separeg/plotting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace separeg::metrics {

using nlohmann::json;
namespace fs = std::filesystem;

torch::Tensor dice_loss(const torch::Tensor& scores, const torch::Tensor& target, double eps) {
    if (scores.dim() != 4 || target.dim() != 3 || scores.size(0) != target.size(0) ||
        scores.size(2) != target.size(1) || scores.size(3) != target.size(2))
        throw ValidationError("dice loss needs scores (B, C, H, W) and target (B, H, W), got " +
                              c10::str(scores.sizes()) + " and " + c10::str(target.sizes()));
    if (scores.size(0) == 0)
        throw ValidationError("dice loss on an empty batch");
    const auto c = scores.size(1);
    if (c < 2)
        throw ValidationError("dice loss needs at least two classes");
    const auto t = target.to(torch::kInt64);
    if (t.min().item<std::int64_t>() < 0 || t.max().item<std::int64_t>() >= c)
        throw ValidationError("target labels must lie in [0, " + std::to_string(c) + ")");

    const auto probs = torch::softmax(scores, 1);
    const auto onehot = torch::one_hot(t, c).permute({0, 3, 1, 2}).to(probs.scalar_type());
    const std::vector<std::int64_t> dims{0, 2, 3};
    const auto inter = (probs * onehot).sum(dims);
    const auto denom = probs.sum(dims) + onehot.sum(dims);
    const auto dice = (2 * inter + eps) / (denom + eps);
    return 1 - dice.slice(0, 1).mean();
}

namespace {

void check_same(const BinaryVolume& a, const BinaryVolume& b) {
    if (a.shape != b.shape)
        throw ValidationError("mask shapes differ");
}

} // namespace

double dsc(const BinaryVolume& pred, const BinaryVolume& gt) {
    check_same(pred, gt);
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred.data[i] != 0, b = gt.data[i] != 0;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0)
        return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<std::array<int, 3>> boundary_voxels(const BinaryVolume& m) {
    std::vector<std::array<int, 3>> out;
    const auto& s = m.shape;
    auto bg = [&](int i, int j, int k) {
        if (i < 0 || j < 0 || k < 0 || i >= s[0] || j >= s[1] || k >= s[2])
            return true;
        return m(i, j, k) == 0;
    };
    for (int i = 0; i < s[0]; ++i)
        for (int j = 0; j < s[1]; ++j)
            for (int k = 0; k < s[2]; ++k)
                if (m(i, j, k) && (bg(i - 1, j, k) || bg(i + 1, j, k) || bg(i, j - 1, k) ||
                                   bg(i, j + 1, k) || bg(i, j, k - 1) || bg(i, j, k + 1)))
                    out.push_back({i, j, k});
    return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Felzenszwalb-Huttenlocher lower envelope of parabolas along one line.
void edt_line(std::vector<double>& f, double w2, std::vector<double>& d, std::vector<int>& v,
              std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf)
            continue;
        while (k >= 0) {
            const int p = v[k];
            const double s = ((f[q] + w2 * q * q) - (f[p] + w2 * p * p)) / (2.0 * w2 * (q - p));
            if (s <= z[k])
                --k;
            else
                break;
        }
        ++k;
        v[k] = q;
        if (k == 0) {
            z[k] = -kInf;
        } else {
            const int p = v[k - 1];
            z[k] = ((f[q] + w2 * q * q) - (f[p] + w2 * p * p)) / (2.0 * w2 * (q - p));
        }
    }
    if (k < 0)
        return;
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (j < k && z[j + 1] < q)
            ++j;
        const double diff = q - v[j];
        d[q] = w2 * diff * diff + f[v[j]];
    }
    f.swap(d);
}

} // namespace

std::vector<double> squared_distance_transform(const BinaryVolume& seeds,
                                               const std::array<double, 3>& spacing) {
    const auto& s = seeds.shape;
    std::vector<double> dt(seeds.size(), kInf);
    for (std::size_t i = 0; i < seeds.size(); ++i)
        if (seeds.data[i])
            dt[i] = 0;
    const int longest = std::max({s[0], s[1], s[2]});
    std::vector<double> line, d(longest);
    std::vector<int> v(longest);
    std::vector<double> z(longest + 1);
    for (int axis = 0; axis < 3; ++axis) {
        const double w2 = spacing[axis] * spacing[axis];
        const int a = (axis + 1) % 3, b = (axis + 2) % 3;
        for (int u = 0; u < s[a]; ++u)
            for (int w = 0; w < s[b]; ++w) {
                line.assign(s[axis], kInf);
                d.assign(s[axis], kInf);
                std::array<int, 3> idx{};
                idx[a] = u;
                idx[b] = w;
                for (int q = 0; q < s[axis]; ++q) {
                    idx[axis] = q;
                    line[q] = dt[seeds.index(idx[0], idx[1], idx[2])];
                }
                edt_line(line, w2, d, v, z);
                for (int q = 0; q < s[axis]; ++q) {
                    idx[axis] = q;
                    dt[seeds.index(idx[0], idx[1], idx[2])] = line[q];
                }
            }
    }
    return dt;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty())
        throw ValidationError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

std::optional<double> hd95(const BinaryVolume& pred, const BinaryVolume& gt,
                           const std::array<double, 3>& spacing, bool directed) {
    check_same(pred, gt);
    for (double sp : spacing)
        if (!(sp > 0))
            throw ValidationError("spacing must be positive");
    const auto bp = boundary_voxels(pred);
    const auto bg = boundary_voxels(gt);
    if (bp.empty() && bg.empty())
        return 0.0;
    if (bp.empty() || bg.empty())
        return std::nullopt;

    auto surface = [](const BinaryVolume& m, const std::vector<std::array<int, 3>>& pts) {
        BinaryVolume s(m.shape, 0);
        for (const auto& p : pts)
            s(p[0], p[1], p[2]) = 1;
        return s;
    };
    std::vector<double> dist;
    const auto to_gt = squared_distance_transform(surface(gt, bg), spacing);
    for (const auto& p : bp)
        dist.push_back(std::sqrt(to_gt[gt.index(p[0], p[1], p[2])]));
    if (!directed) {
        const auto to_pred = squared_distance_transform(surface(pred, bp), spacing);
        for (const auto& p : bg)
            dist.push_back(std::sqrt(to_pred[pred.index(p[0], p[1], p[2])]));
    }
    return percentile(std::move(dist), 95.0);
}

double PatientMetrics::mean_dsc() const {
    if (dsc.empty())
        return 0.0;
    double s = 0;
    for (double d : dsc)
        s += d;
    return s / static_cast<double>(dsc.size());
}

Stat summarize(const std::vector<double>& values, int excluded) {
    Stat st;
    st.n = static_cast<int>(values.size());
    st.excluded = excluded;
    if (values.empty())
        return st;
    double sum = 0;
    for (double v : values)
        sum += v;
    st.mean = sum / st.n;
    if (st.n > 1) {
        double ss = 0;
        for (double v : values)
            ss += (v - st.mean) * (v - st.mean);
        st.stderr_ = std::sqrt(ss / (st.n - 1)) / std::sqrt(static_cast<double>(st.n));
    }
    return st;
}

void MetricsReport::recompute() {
    const int fg = n_classes - 1;
    dsc.assign(static_cast<std::size_t>(fg), {});
    hd95.assign(static_cast<std::size_t>(fg), {});
    std::vector<double> means;
    for (int c = 0; c < fg; ++c) {
        std::vector<double> d, h;
        int excluded = 0;
        for (const auto& row : per_patient) {
            d.push_back(row.dsc.at(static_cast<std::size_t>(c)));
            const auto& hv = row.hd95.at(static_cast<std::size_t>(c));
            if (hv)
                h.push_back(*hv);
            else
                ++excluded;
        }
        dsc[static_cast<std::size_t>(c)] = summarize(d);
        hd95[static_cast<std::size_t>(c)] = summarize(h, excluded);
    }
    for (const auto& row : per_patient)
        means.push_back(row.mean_dsc());
    mean_dsc = summarize(means);
}

MetricsReport make_report(std::vector<PatientMetrics> rows, int n_classes) {
    if (n_classes < 2)
        throw ValidationError("a report needs at least one foreground class");
    for (const auto& r : rows)
        if (static_cast<int>(r.dsc.size()) != n_classes - 1 || static_cast<int>(r.hd95.size()) != n_classes - 1)
            throw ValidationError("patient '" + r.patient_id + "' has the wrong number of class metrics");
    MetricsReport rep;
    rep.n_classes = n_classes;
    rep.per_patient = std::move(rows);
    rep.recompute();
    return rep;
}

namespace {

json stat_json(const Stat& s) {
    return json{{"mean", s.mean}, {"stderr", s.stderr_}, {"n", s.n}, {"excluded", s.excluded}};
}

Stat stat_from(const json& j) {
    return Stat{j.at("mean").get<double>(), j.at("stderr").get<double>(), j.at("n").get<int>(),
                j.at("excluded").get<int>()};
}

} // namespace

json to_json(const MetricsReport& r) {
    json rows = json::array();
    for (const auto& p : r.per_patient) {
        json hd = json::array();
        for (const auto& h : p.hd95)
            hd.push_back(h ? json(*h) : json(nullptr));
        rows.push_back({{"patient_id", p.patient_id}, {"dsc", p.dsc}, {"hd95", hd}});
    }
    json dsc = json::array(), hd = json::array();
    for (const auto& s : r.dsc)
        dsc.push_back(stat_json(s));
    for (const auto& s : r.hd95)
        hd.push_back(stat_json(s));
    return json{{"n_classes", r.n_classes},
                {"per_patient", rows},
                {"aggregate", {{"dsc", dsc}, {"hd95", hd}, {"mean_dsc", stat_json(r.mean_dsc)}}},
                {"config_hash", r.config_hash},
                {"seeds", r.seeds},
                {"meta", r.meta}};
}

MetricsReport report_from_json(const json& j) {
    MetricsReport r;
    try {
        r.n_classes = j.at("n_classes").get<int>();
        for (const auto& row : j.at("per_patient")) {
            PatientMetrics p;
            p.patient_id = row.at("patient_id").get<std::string>();
            p.dsc = row.at("dsc").get<std::vector<double>>();
            for (const auto& h : row.at("hd95"))
                p.hd95.push_back(h.is_null() ? std::nullopt : std::optional<double>(h.get<double>()));
            r.per_patient.push_back(std::move(p));
        }
        const auto& agg = j.at("aggregate");
        for (const auto& s : agg.at("dsc"))
            r.dsc.push_back(stat_from(s));
        for (const auto& s : agg.at("hd95"))
            r.hd95.push_back(stat_from(s));
        r.mean_dsc = stat_from(agg.at("mean_dsc"));
        r.config_hash = j.at("config_hash").get<std::string>();
        r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        r.meta = j.value("meta", json::object());
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed metrics report: ") + e.what());
    }
    return r;
}

void write_report(const MetricsReport& r, const fs::path& dir, const std::string& stem) {
    fs::create_directories(dir);
    {
        std::ofstream out(dir / (stem + ".json"), std::ios::trunc);
        if (!out)
            throw IoError("cannot write " + (dir / (stem + ".json")).string());
        out << to_json(r).dump(1) << '\n';
    }
    {
        std::ofstream out(dir / (stem + ".csv"), std::ios::trunc);
        if (!out)
            throw IoError("cannot write " + (dir / (stem + ".csv")).string());
        out << "patient_id";
        for (int c = 1; c < r.n_classes; ++c)
            out << ",dsc_" << c << ",hd95_" << c;
        out << ",mean_dsc\n";
        char buf[64];
        for (const auto& p : r.per_patient) {
            out << p.patient_id;
            for (std::size_t c = 0; c < p.dsc.size(); ++c) {
                std::snprintf(buf, sizeof buf, ",%.6f", p.dsc[c]);
                out << buf;
                if (p.hd95[c]) {
                    std::snprintf(buf, sizeof buf, ",%.6f", *p.hd95[c]);
                    out << buf;
                } else {
                    out << ",NA";
                }
            }
            std::snprintf(buf, sizeof buf, ",%.6f\n", p.mean_dsc());
            out << buf;
        }
    }
    std::vector<std::string> labels;
    std::vector<double> values, errors;
    for (std::size_t c = 0; c < r.dsc.size(); ++c) {
        labels.push_back("class " + std::to_string(c + 1));
        values.push_back(100 * r.dsc[c].mean);
        errors.push_back(100 * r.dsc[c].stderr_);
    }
    labels.push_back("mean");
    values.push_back(100 * r.mean_dsc.mean);
    errors.push_back(100 * r.mean_dsc.stderr_);
    plotting::bar_plot(dir / (stem + ".png"), "test DSC (%)", labels, values, errors, "DSC %");
}

MetricsReport load_report(const fs::path& json_path) {
    std::ifstream in(json_path);
    if (!in)
        throw IoError("cannot open metrics report: " + json_path.string());
    try {
        return report_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw FormatError(json_path.string() + ": " + e.what());
    }
}

} // namespace separeg::metrics
