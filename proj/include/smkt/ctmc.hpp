#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "smkt/fluid.hpp"
#include "smkt/model.hpp"
#include "smkt/rng.hpp"

namespace smkt {

/// Thrown when the truncated tail chain would occupy level k_max, i.e.
/// the state can no longer be represented without growing the vector.
struct TruncationOverflow : std::runtime_error {
    using std::runtime_error::runtime_error;
    double at_time = 0.0;
};

struct Event {
    double t = 0.0;
    std::uint8_t type = 0;  // 0 = arrival (+e_k/N), 1 = departure (-e_k/N)
    std::uint16_t level = 0;
};

struct EventLog {
    std::vector<Event> events;
    /// Packed little-endian records: f64 time, u8 type, u16 level.
    void write_binary(const std::string& path) const;
};

constexpr double kNever = std::numeric_limits<double>::infinity();

/// Deviation of a sample path from a fluid path, in the natural per-level scales.
struct DeviationReport {
    std::vector<double> sup_abs_dev;  // per level, 1-based via [k-1]
    double scaled_sup = 0.0;          // sup over k <= levels_checked, t of sqrt(N)|X-x|/sqrt(a_k)
    int levels_checked = 0;
    double first_hit_above_cutoff = kNever;  // first t with X^{m+1} != 0
    double first_hit_scaled = kNever;        // first t with scaled dev > threshold
    bool occupied_m = false;
    bool occupied_m_plus_1 = false;
    double horizon = 0.0;
};

struct SamplePath {
    std::vector<double> obs_times;
    std::vector<std::vector<std::int64_t>> snapshots;  // counts 1..k_max per obs time
    std::uint64_t n_events = 0;
    RngStream stream;
    EventLog log;  // populated only when requested

    bool has_deviation = false;
    DeviationReport deviation;  // event-exact, filled when a fluid path was supplied

    TailState state_at(std::size_t obs_index, std::int64_t n_servers) const;
    void write_csv(const std::string& path) const;
};

struct TailSimOptions {
    const FluidPath* fluid = nullptr;       // enables event-exact deviation tracking
    const ScaleVector* scale = nullptr;     // required with fluid
    int deviation_levels = 0;               // scaled sup over k <= this (typically m-1)
    int cutoff_m = 0;                       // track occupancy of levels m, m+1
    double scaled_threshold = kNever;       // R for the first-hit record
    bool record_events = false;
    bool suppress_service = false;          // validation mode: all service rates forced 0
};

/// Exact Gillespie simulation of the tail chain: component k jumps by
/// +-1/N at rates N rate_plus / N rate_minus. Aborts with
/// TruncationOverflow if level k_max would become occupied.
SamplePath simulate_tail(const ModelParams& params, const TailState& x0,
                         const std::vector<double>& obs_times, RngStream stream,
                         const TailSimOptions& opts = {});

/// Individual-queue system: lengths per queue plus a clock.
struct QueueSystem {
    std::vector<std::int32_t> lengths;
    double clock = 0.0;

    static QueueSystem empty(std::int64_t n_servers);
    /// Queue counts n_k for k = 1..k_max (lengths above k_max still count
    /// toward every level below them).
    std::vector<std::int64_t> tail_counts(int k_max) const;
};

/// Event-driven simulation at queue granularity: Poisson(N lambda)
/// arrivals, d choices uniform with replacement, ties broken uniformly,
/// exponential(1) head-of-line services. Emits the derived tail path.
SamplePath simulate_queues(const ModelParams& params, const QueueSystem& q0,
                           const std::vector<double>& obs_times, RngStream stream,
                           const TailSimOptions& opts = {});

/// Instantaneous up/down jump rates of the queue-level generator at a
/// fixed configuration, derived by inclusion-exclusion over the order
/// statistics of the d choices. Equal (exactly) to the kernel rates.
std::vector<double> queue_level_up_rates(const ModelParams& params, const QueueSystem& q,
                                         int k_max);
std::vector<double> queue_level_down_rates(const ModelParams& params, const QueueSystem& q,
                                           int k_max);

/// The rate table simulate_tail draws events from: up rates
/// N rate_plus(X) and down rates n_k - n_{k+1} (exact integers).
struct KernelRates {
    std::vector<double> up;
    std::vector<double> down;
};
KernelRates kernel_jump_rates(const ModelParams& params, const TailState& x);

/// Grid-based deviation statistics of a recorded path against a fluid
/// solution. Snapshots must lie inside the fluid's time range.
DeviationReport path_statistics(const SamplePath& path, const FluidPath& fluid,
                                const ScaleVector& a, std::int64_t n_servers, int m,
                                double scaled_threshold = kNever);

}  // namespace smkt
