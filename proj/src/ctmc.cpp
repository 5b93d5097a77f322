#include "smkt/ctmc.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

namespace smkt {

void EventLog::write_binary(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("EventLog::write_binary: cannot open " + path);
    char rec[11];
    for (const Event& e : events) {
        static_assert(sizeof(double) == 8);
        std::memcpy(rec, &e.t, 8);
        rec[8] = static_cast<char>(e.type);
        rec[9] = static_cast<char>(e.level & 0xff);
        rec[10] = static_cast<char>((e.level >> 8) & 0xff);
        out.write(rec, sizeof(rec));
    }
}

TailState SamplePath::state_at(std::size_t obs_index, std::int64_t n_servers) const {
    TailState st;
    st.counts = snapshots.at(obs_index);
    st.n_servers = n_servers;
    return st;
}

void SamplePath::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("SamplePath::write_csv: cannot open " + path);
    const int k_max = snapshots.empty() ? 0 : static_cast<int>(snapshots.front().size());
    out << "t";
    for (int k = 1; k <= k_max; ++k) out << ",n" << k;
    out << "\n";
    out.precision(17);
    for (std::size_t i = 0; i < obs_times.size(); ++i) {
        out << obs_times[i];
        for (std::int64_t c : snapshots[i]) out << "," << c;
        out << "\n";
    }
}

namespace {

inline double pow_int(double base, int e) {
    double r = 1.0;
    while (e > 0) {
        if (e & 1) r *= base;
        base *= base;
        e >>= 1;
    }
    return r;
}

// Event-exact deviation tracker shared by both simulators.
class DeviationTracker {
public:
    DeviationTracker(const TailSimOptions& opts, std::int64_t n_servers, int k_max)
        : opts_(opts), n_(static_cast<double>(n_servers)), k_max_(k_max) {
        active_ = opts_.fluid != nullptr && opts_.scale != nullptr;
        if (active_) {
            levels_ = std::min(std::max(opts_.deviation_levels, 1), k_max_);
            report_.sup_abs_dev.assign(static_cast<std::size_t>(levels_), 0.0);
            report_.levels_checked = opts_.deviation_levels;
            sqrt_n_ = std::sqrt(n_);
        }
    }

    bool active() const { return active_; }

    // Evaluate |X - x(t)| for the current counts; counts is 1-based via [k-1].
    void observe(double t, const std::vector<std::int64_t>& counts) {
        if (active_) {
            for (int k = 1; k <= levels_; ++k) {
                const double xk = opts_.fluid->eval_level(t, k);
                const double dev =
                    std::abs(static_cast<double>(counts[static_cast<std::size_t>(k) - 1]) / n_ - xk);
                auto& slot = report_.sup_abs_dev[static_cast<std::size_t>(k) - 1];
                slot = std::max(slot, dev);
                if (k <= opts_.deviation_levels) {
                    const double ak = opts_.scale->at(k);
                    const double scaled = ak > 0.0 ? sqrt_n_ * dev / std::sqrt(ak) : 0.0;
                    if (scaled > report_.scaled_sup) report_.scaled_sup = scaled;
                    if (scaled > opts_.scaled_threshold && report_.first_hit_scaled == kNever)
                        report_.first_hit_scaled = t;
                }
            }
        }
        if (opts_.cutoff_m > 0) {
            const int m = opts_.cutoff_m;
            if (m <= k_max_ && counts[static_cast<std::size_t>(m) - 1] > 0)
                report_.occupied_m = true;
            if (m + 1 <= k_max_ && counts[static_cast<std::size_t>(m)] > 0) {
                report_.occupied_m_plus_1 = true;
                if (report_.first_hit_above_cutoff == kNever) report_.first_hit_above_cutoff = t;
            }
        }
    }

    DeviationReport finish(double horizon) {
        report_.horizon = horizon;
        return report_;
    }

    bool enabled() const { return active_ || opts_.cutoff_m > 0; }

private:
    const TailSimOptions& opts_;
    double n_;
    int k_max_;
    int levels_ = 0;
    bool active_ = false;
    double sqrt_n_ = 1.0;
    DeviationReport report_;
};

void check_obs_times(const std::vector<double>& obs_times) {
    if (obs_times.empty()) throw std::invalid_argument("simulate: obs_times empty");
    for (std::size_t i = 1; i < obs_times.size(); ++i)
        if (obs_times[i] <= obs_times[i - 1])
            throw std::invalid_argument("simulate: obs_times must be strictly increasing");
    if (obs_times.front() < 0.0) throw std::invalid_argument("simulate: negative obs time");
}

}  // namespace

SamplePath simulate_tail(const ModelParams& params, const TailState& x0,
                         const std::vector<double>& obs_times, RngStream stream,
                         const TailSimOptions& opts) {
    check_obs_times(obs_times);
    if (!x0.is_valid()) throw std::invalid_argument("simulate_tail: invalid initial counts");
    if (x0.n_servers != params.n_servers)
        throw std::invalid_argument("simulate_tail: N mismatch");
    if (x0.levels() != params.k_max)
        throw std::invalid_argument("simulate_tail: truncation mismatch");
    if (x0.count(params.k_max) > 0)
        throw TruncationOverflow("simulate_tail: level k_max occupied at t=0");

    const int k_max = params.k_max;
    const double n = static_cast<double>(params.n_servers);
    const double horizon = obs_times.back();

    std::vector<std::int64_t> counts = x0.counts;
    auto frac = [&](int k) -> double {
        if (k <= 0) return 1.0;
        if (k > k_max) return 0.0;
        return static_cast<double>(counts[static_cast<std::size_t>(k) - 1]) / n;
    };

    // Per-level kernel rates; recomputed over all (few) levels every event.
    std::vector<double> up(static_cast<std::size_t>(k_max) + 1, 0.0);
    std::vector<double> down(static_cast<std::size_t>(k_max) + 1, 0.0);
    auto recompute = [&]() -> double {
        double total = 0.0;
        double prev_pow = 1.0;  // (x^0)^d
        for (int k = 1; k <= k_max; ++k) {
            const double xk = frac(k);
            const double cur_pow = pow_int(xk, params.d);
            up[static_cast<std::size_t>(k)] = n * params.lambda * (prev_pow - cur_pow);
            prev_pow = cur_pow;
            down[static_cast<std::size_t>(k)] =
                opts.suppress_service
                    ? 0.0
                    : static_cast<double>(counts[static_cast<std::size_t>(k) - 1] -
                                          (k < k_max ? counts[static_cast<std::size_t>(k)] : 0));
            total += up[static_cast<std::size_t>(k)] + down[static_cast<std::size_t>(k)];
        }
        return total;
    };

    Rng rng(stream);
    SamplePath path;
    path.stream = stream;
    path.obs_times = obs_times;
    path.snapshots.reserve(obs_times.size());

    DeviationTracker tracker(opts, params.n_servers, k_max);
    double t = 0.0;
    std::size_t obs_idx = 0;
    if (tracker.enabled()) tracker.observe(0.0, counts);

    double total = recompute();
    while (true) {
        double t_next = horizon + 1.0;
        if (total > 0.0) t_next = t + rng.exponential(total);

        // Snapshots for all observation times passed by this waiting interval.
        while (obs_idx < obs_times.size() && obs_times[obs_idx] <= std::min(t_next, horizon)) {
            path.snapshots.push_back(counts);
            ++obs_idx;
        }
        if (t_next > horizon || total <= 0.0) break;
        t = t_next;

        if (tracker.enabled()) tracker.observe(t, counts);  // pre-jump (interval end)

        // Select the event.
        double u = rng.uniform() * total;
        int level = 0;
        bool is_up = true;
        for (int k = 1; k <= k_max; ++k) {
            const double rp = up[static_cast<std::size_t>(k)];
            if (u < rp) {
                level = k;
                is_up = true;
                break;
            }
            u -= rp;
            const double rm = down[static_cast<std::size_t>(k)];
            if (u < rm) {
                level = k;
                is_up = false;
                break;
            }
            u -= rm;
        }
        if (level == 0) {  // float roundoff at the top edge: retry via re-draw
            total = recompute();
            continue;
        }

        if (is_up) {
            if (level == k_max) {
                TruncationOverflow err(
                    "simulate_tail: X^{k_max} became positive (truncation overflow)");
                err.at_time = t;
                throw err;
            }
            ++counts[static_cast<std::size_t>(level) - 1];
        } else {
            --counts[static_cast<std::size_t>(level) - 1];
        }
        ++path.n_events;
        if (opts.record_events)
            path.log.events.push_back(
                {t, static_cast<std::uint8_t>(is_up ? 0 : 1), static_cast<std::uint16_t>(level)});
        if (tracker.enabled()) tracker.observe(t, counts);  // post-jump (interval start)
        total = recompute();
    }

    if (tracker.enabled()) {
        tracker.observe(horizon, counts);
        path.deviation = tracker.finish(horizon);
        path.has_deviation = tracker.active();
    }
    return path;
}

QueueSystem QueueSystem::empty(std::int64_t n_servers) {
    QueueSystem q;
    q.lengths.assign(static_cast<std::size_t>(n_servers), 0);
    return q;
}

std::vector<std::int64_t> QueueSystem::tail_counts(int k_max) const {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k_max), 0);
    for (std::int32_t len : lengths) {
        const int top = std::min<std::int32_t>(len, k_max);
        for (int k = 1; k <= top; ++k) ++counts[static_cast<std::size_t>(k) - 1];
    }
    return counts;
}

SamplePath simulate_queues(const ModelParams& params, const QueueSystem& q0,
                           const std::vector<double>& obs_times, RngStream stream,
                           const TailSimOptions& opts) {
    check_obs_times(obs_times);
    const auto n = static_cast<std::int64_t>(q0.lengths.size());
    if (n != params.n_servers) throw std::invalid_argument("simulate_queues: N mismatch");
    if (params.d > 16) throw std::invalid_argument("simulate_queues: d > 16 unsupported");
    const int k_max = params.k_max;
    const double horizon = obs_times.back();

    std::vector<std::int32_t> lengths = q0.lengths;
    std::vector<std::int64_t> counts = q0.tail_counts(k_max);

    // Dense index of nonempty queues for uniform departure sampling.
    std::vector<std::int32_t> nonempty;
    std::vector<std::int32_t> slot(lengths.size(), -1);
    nonempty.reserve(lengths.size());
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] > 0) {
            slot[i] = static_cast<std::int32_t>(nonempty.size());
            nonempty.push_back(static_cast<std::int32_t>(i));
        }
    }

    Rng rng(stream);
    SamplePath path;
    path.stream = stream;
    path.obs_times = obs_times;
    path.snapshots.reserve(obs_times.size());

    DeviationTracker tracker(opts, n, k_max);
    if (tracker.enabled()) tracker.observe(0.0, counts);

    const double arrival_rate = static_cast<double>(n) * params.lambda;
    double t = 0.0;
    std::size_t obs_idx = 0;
    std::array<std::int32_t, 16> picks{};

    while (true) {
        const double service_rate =
            opts.suppress_service ? 0.0 : static_cast<double>(nonempty.size());
        const double total = arrival_rate + service_rate;
        double t_next = horizon + 1.0;
        if (total > 0.0) t_next = t + rng.exponential(total);
        while (obs_idx < obs_times.size() && obs_times[obs_idx] <= std::min(t_next, horizon)) {
            path.snapshots.push_back(counts);
            ++obs_idx;
        }
        if (t_next > horizon || total <= 0.0) break;
        t = t_next;
        if (tracker.enabled()) tracker.observe(t, counts);

        const bool arrival = rng.uniform() * total < arrival_rate;
        if (arrival) {
            // d choices with replacement; join the shortest, ties uniform.
            std::int32_t best_len = std::numeric_limits<std::int32_t>::max();
            int n_best = 0;
            for (int c = 0; c < params.d; ++c) {
                const auto q = static_cast<std::int32_t>(rng.uniform_int(
                    static_cast<std::uint64_t>(n)));
                const std::int32_t len = lengths[static_cast<std::size_t>(q)];
                if (len < best_len) {
                    best_len = len;
                    n_best = 0;
                }
                if (len == best_len) picks[static_cast<std::size_t>(n_best++)] = q;
            }
            const std::int32_t q =
                picks[static_cast<std::size_t>(n_best == 1 ? 0 : static_cast<int>(rng.uniform_int(
                                                                    static_cast<std::uint64_t>(n_best))))];
            const std::int32_t new_len = ++lengths[static_cast<std::size_t>(q)];
            if (new_len == 1) {
                slot[static_cast<std::size_t>(q)] = static_cast<std::int32_t>(nonempty.size());
                nonempty.push_back(q);
            }
            if (new_len <= k_max) ++counts[static_cast<std::size_t>(new_len) - 1];
            ++path.n_events;
            if (opts.record_events && new_len <= k_max)
                path.log.events.push_back(
                    {t, 0, static_cast<std::uint16_t>(std::min<std::int32_t>(new_len, k_max))});
        } else {
            const auto pick = static_cast<std::size_t>(rng.uniform_int(nonempty.size()));
            const std::int32_t q = nonempty[pick];
            const std::int32_t old_len = lengths[static_cast<std::size_t>(q)]--;
            if (old_len == 1) {
                // Swap-remove from the nonempty index.
                const std::int32_t last = nonempty.back();
                nonempty[pick] = last;
                slot[static_cast<std::size_t>(last)] = static_cast<std::int32_t>(pick);
                nonempty.pop_back();
                slot[static_cast<std::size_t>(q)] = -1;
            }
            if (old_len <= k_max) --counts[static_cast<std::size_t>(old_len) - 1];
            ++path.n_events;
            if (opts.record_events && old_len <= k_max)
                path.log.events.push_back({t, 1, static_cast<std::uint16_t>(old_len)});
        }
        if (tracker.enabled()) tracker.observe(t, counts);
    }

    if (tracker.enabled()) {
        tracker.observe(horizon, counts);
        path.deviation = tracker.finish(horizon);
        path.has_deviation = tracker.active();
    }
    return path;
}

std::vector<double> queue_level_up_rates(const ModelParams& params, const QueueSystem& q,
                                         int k_max) {
    const auto n = static_cast<double>(q.lengths.size());
    std::vector<std::int64_t> counts = q.tail_counts(k_max);
    std::vector<double> rates(static_cast<std::size_t>(k_max), 0.0);
    // N lambda P(shortest of the d sampled queues has length k-1), and
    //   P(min length = k-1) = P(all >= k-1) - P(all >= k)
    //                       = (n_{k-1}/N)^d - (n_k/N)^d.
    double prev_pow = 1.0;
    for (int k = 1; k <= k_max; ++k) {
        const double xk = static_cast<double>(counts[static_cast<std::size_t>(k) - 1]) / n;
        const double cur_pow = pow_int(xk, params.d);
        rates[static_cast<std::size_t>(k) - 1] = n * params.lambda * (prev_pow - cur_pow);
        prev_pow = cur_pow;
    }
    return rates;
}

KernelRates kernel_jump_rates(const ModelParams& params, const TailState& x) {
    const int k_max = x.levels();
    const double n = static_cast<double>(x.n_servers);
    KernelRates kr;
    kr.up.resize(static_cast<std::size_t>(k_max));
    kr.down.resize(static_cast<std::size_t>(k_max));
    double prev_pow = 1.0;
    for (int k = 1; k <= k_max; ++k) {
        const double cur_pow = pow_int(x.fraction(k), params.d);
        kr.up[static_cast<std::size_t>(k) - 1] = n * params.lambda * (prev_pow - cur_pow);
        prev_pow = cur_pow;
        kr.down[static_cast<std::size_t>(k) - 1] =
            static_cast<double>(x.count(k) - x.count(k + 1));
    }
    return kr;
}

std::vector<double> queue_level_down_rates(const ModelParams&, const QueueSystem& q,
                                           int k_max) {
    std::vector<double> rates(static_cast<std::size_t>(k_max), 0.0);
    for (std::int32_t len : q.lengths)
        if (len >= 1 && len <= k_max) rates[static_cast<std::size_t>(len) - 1] += 1.0;
    return rates;
}

DeviationReport path_statistics(const SamplePath& path, const FluidPath& fluid,
                                const ScaleVector& a, std::int64_t n_servers, int m,
                                double scaled_threshold) {
    if (path.obs_times.empty()) throw std::invalid_argument("path_statistics: empty path");
    if (path.obs_times.back() > fluid.t_end() + 1e-9 ||
        path.obs_times.front() < fluid.t_begin() - 1e-9)
        throw std::invalid_argument("path_statistics: observation grid outside fluid grid");

    const int k_max = static_cast<int>(path.snapshots.front().size());
    const double n = static_cast<double>(n_servers);
    const double sqrt_n = std::sqrt(n);

    DeviationReport rep;
    rep.sup_abs_dev.assign(static_cast<std::size_t>(k_max), 0.0);
    rep.levels_checked = std::min(m - 1, k_max);
    rep.horizon = path.obs_times.back();

    for (std::size_t i = 0; i < path.obs_times.size(); ++i) {
        const double t = path.obs_times[i];
        const FluidState x = fluid.eval(t);
        const auto& counts = path.snapshots[i];
        for (int k = 1; k <= k_max; ++k) {
            const double dev =
                std::abs(static_cast<double>(counts[static_cast<std::size_t>(k) - 1]) / n -
                         x.level(k));
            auto& slot = rep.sup_abs_dev[static_cast<std::size_t>(k) - 1];
            slot = std::max(slot, dev);
            if (k <= rep.levels_checked && a.at(k) > 0.0) {
                const double scaled = sqrt_n * dev / std::sqrt(a.at(k));
                rep.scaled_sup = std::max(rep.scaled_sup, scaled);
                if (scaled > scaled_threshold && rep.first_hit_scaled == kNever)
                    rep.first_hit_scaled = t;
            }
        }
        if (m <= k_max && counts[static_cast<std::size_t>(m) - 1] > 0) rep.occupied_m = true;
        if (m + 1 <= k_max && counts[static_cast<std::size_t>(m)] > 0) {
            rep.occupied_m_plus_1 = true;
            if (rep.first_hit_above_cutoff == kNever) rep.first_hit_above_cutoff = t;
        }
    }
    return rep;
}

}  // namespace smkt
