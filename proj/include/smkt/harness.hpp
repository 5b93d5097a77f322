#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "smkt/config.hpp"

namespace smkt {

/// One named acceptance check with its verdict and machine-readable data.
struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
    nlohmann::json data;
};

/// Row of the fixed plot-summary schema:
/// mode,N,level,quantile05,median,quantile95,n_replicas.
struct PlotRow {
    std::string mode;
    std::int64_t n = 0;
    int level = 0;
    double q05 = 0.0;
    double med = 0.0;
    double q95 = 0.0;
    std::size_t n_replicas = 0;
};

struct ResultBundle {
    std::string output_dir;
    std::vector<CheckResult> checks;
    std::vector<PlotRow> plot_rows;
    std::size_t failed_replicas = 0;
    std::size_t total_replicas = 0;
    bool complete = true;  // false when > 1% of replicas failed
    nlohmann::json summary;

    bool all_pass() const;
};

/// Runs the experiment described by the config: solves the fluid path(s),
/// runs replica batches in parallel with per-replica streams
/// (base_seed XOR replica index), aggregates, evaluates the enabled
/// checks, and writes CSV + summary JSON into output_dir.
ResultBundle run_experiment(const ExperimentConfig& cfg);

/// Writes the tidy plot CSVs out of a bundle (called by run_experiment;
/// exposed for `report`).
void emit_plotdata(const ResultBundle& bundle, const std::string& dir);

/// Reads a bundle's summary.json back and prints one line per check.
/// Returns true iff every recorded check passed.
bool report_bundle(const std::string& dir, std::string& out_text);

/// Deterministic parallel map over replica indices: results land in
/// index-order slots, so worker count never affects the outcome.
void parallel_replicas(int n_replicas, int n_threads,
                       const std::function<void(int)>& body);

}  // namespace smkt
