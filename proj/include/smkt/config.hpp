#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace smkt {

/// Threshold specification: a fixed number, or calibrated on a pilot
/// batch at a given percentile and validated on fresh replicas.
struct ThresholdSpec {
    enum class Kind { unset, fixed, auto_percentile };
    Kind kind = Kind::unset;
    double value = 0.0;       // fixed
    double percentile = 0.9;  // auto
};

/// One experiment description, parsed from a flat key = value file.
struct ExperimentConfig {
    std::string mode;  // lln | jump | diffusion | cutoff | bounds-audit | fixed-point
    double lambda = 0.7;
    int d = 2;
    std::vector<std::int64_t> n_list;
    double t0 = 1.0;
    double rho = 1.0;
    int replicas = 100;
    std::uint64_t base_seed = 1;
    double dt = 0.0;    // 0: default t0/2048
    int k_max = 0;      // 0: auto, cutoff level + 3
    bool a_paper_default = true;
    double a_threshold = 0.0;  // used when !a_paper_default
    std::string initial_state = "rounded-a";  // empty | rounded-a | counts:<c1,c2,...>
    std::vector<std::int64_t> explicit_counts;
    ThresholdSpec thr_R, thr_R_tilde, thr_R_bar, thr_r;
    double rr_constant = 1.0;  // Prop-RR style constant C
    std::string output_dir = "out";
    std::vector<std::string> checks;  // named acceptance checks to enforce
    int threads = 0;                  // 0: hardware concurrency
    int obs_points = 64;              // observation grid resolution

    /// Regression pins: `pin_<name> = value` keys. A check that knows
    /// <name> asserts exact reproduction of a previously verified run.
    std::map<std::string, double> pins;

    /// Raw key/value pairs as parsed, for provenance echo.
    std::map<std::string, std::string> raw;

    void validate() const;  // throws std::invalid_argument with a message
};

/// Parses the flat config grammar:
///   key = value         # comment
/// Values: numbers, bare or quoted strings, [v1, v2, ...] lists.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

/// Canonical serialization (sorted keys) used in bundle provenance.
std::string config_echo(const ExperimentConfig& cfg);

}  // namespace smkt
