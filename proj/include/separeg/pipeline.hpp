// SPDX-License-Identifier: Apache-2.0
//
// Declarative end-to-end runs: separate -> pretrain -> cluster (+ intra
// teachers) -> distill -> finetune, with a resumable ledger.
//
// Run directory layout:
//   config.json          resolved configuration (hash = sha256 of its compact text)
//   ledger.jsonl         append-only stage log
//   data/                prepared dataset (synthetic volumes + dataset.json)
//   regions/             region set (regions.jsonl + crops/)
//   pretrain/            inter.ckpt, log.jsonl, loss.png
//   cluster/             clusters.json, regions.jsonl, cluster_<k>.jsonl, intra_<k>.ckpt
//   distill/             student.ckpt, log.jsonl, loss.png
//   finetune/            finetuned.ckpt, metrics.{json,csv,png}, history.jsonl
//
// Stage seeds derive from the single top-level `seed`.

#pragma once

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace separeg::pipeline {

inline const std::vector<std::string> kStages{"separate", "pretrain", "cluster", "distill", "finetune"};

/// Complete default configuration for "tiny" or "paper".
nlohmann::json profile_defaults(const std::string& profile);

/// Names accepted by preset(): table4-row{1,2,3}, table5-row{1,2,3}, table6-row{1,2,3}.
std::vector<std::string> preset_names();
/// Ablation section for a named preset.
nlohmann::json preset(const std::string& name);

/// Profile defaults with `patch` merged in (RFC 7386) and `seed` set; validated.
nlohmann::json make_config(const std::string& profile, std::uint64_t seed,
                           const nlohmann::json& patch = nlohmann::json::object());

/// Throws ConfigError describing the first problem.
void validate_config(const nlohmann::json& config);

std::string run_hash(const nlohmann::json& config);

/// Short label for the ablation setting, e.g. "sis+iid", "regular", "random-init".
std::string ablation_label(const nlohmann::json& config);

struct LedgerEntry {
    std::string stage;
    std::string status;  // completed | skipped | reused | failed | interrupted
    std::string config_hash;
    nlohmann::json artifacts = nlohmann::json::object();
    nlohmann::json detail = nlohmann::json::object();
    double wall_time_s = 0;
};

nlohmann::json to_json(const LedgerEntry& e);
LedgerEntry ledger_entry_from_json(const nlohmann::json& j);

struct RunLedger {
    std::filesystem::path path;
    std::vector<LedgerEntry> entries;

    /// Last "completed" or "skipped" entry for the stage, if any.
    const LedgerEntry* finished(const std::string& stage) const;
    /// Number of entries with the given stage and status.
    int count(const std::string& stage, const std::string& status) const;
};

RunLedger load_ledger(const std::filesystem::path& path);

struct RunOptions {
    /// Continue a run directory that already has a ledger.
    bool resume = false;
    /// Stop cleanly after this stage completes (simulated interruption).
    std::optional<std::string> stop_after;
};

/// Executes all stages honouring the ablation switches. A failing stage is
/// logged and rethrown as StageError; a config mismatch on resume is a ConfigError.
RunLedger run(const nlohmann::json& config, const std::filesystem::path& out_dir,
              const RunOptions& opts = {});

struct ReportRow {
    std::string label;
    int n_runs = 0;
    double dsc_mean = 0;
    double dsc_stderr = 0;
    double hd95_mean = 0;
    double hd95_stderr = 0;
    std::optional<long> pretrain_iterations;
};

struct Report {
    std::vector<ReportRow> rows;
    std::string table;
    bool sweep = false;
};

/// Groups completed runs by configuration (seed ignored) and tabulates
/// mean and standard error of test DSC (%) and HD95. Runs whose dataset,
/// finetune, network or profile settings disagree are refused with a diff.
/// With a non-empty out_dir writes report.txt, report.csv and report.png
/// (an iteration sweep when the groups differ only in pretraining length).
Report report(const std::vector<std::filesystem::path>& run_dirs,
              const std::filesystem::path& out_dir = {});

} // namespace separeg::pipeline
