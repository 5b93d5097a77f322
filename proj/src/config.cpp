#include "smkt/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace smkt {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::string strip_quotes(std::string v) {
    if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') ||
                          (v.front() == '\'' && v.back() == '\'')))
        return v.substr(1, v.size() - 2);
    return v;
}

std::vector<std::string> split_list(const std::string& v) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
        throw std::invalid_argument("config: expected [list]: " + v);
    std::vector<std::string> items;
    std::string body = v.substr(1, v.size() - 2);
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) items.push_back(strip_quotes(item));
    }
    return items;
}

double to_real(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
    }
}

std::int64_t to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw std::invalid_argument("config: " + key + " expects an integer, got '" + v + "'");
    }
}

ThresholdSpec to_threshold(const std::string& key, const std::string& v) {
    ThresholdSpec t;
    const std::string prefix = "auto-percentile:";
    if (v.rfind(prefix, 0) == 0) {
        t.kind = ThresholdSpec::Kind::auto_percentile;
        t.percentile = to_real(key, v.substr(prefix.size())) / 100.0;
        if (!(t.percentile > 0.0 && t.percentile < 1.0))
            throw std::invalid_argument("config: " + key + " percentile outside (0,100)");
    } else {
        t.kind = ThresholdSpec::Kind::fixed;
        t.value = to_real(key, v);
    }
    return t;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": empty key or value");
        cfg.raw[key] = value;
    }

    for (const auto& [key, value] : cfg.raw) {
        if (key == "mode") {
            cfg.mode = strip_quotes(value);
        } else if (key == "lambda") {
            cfg.lambda = to_real(key, value);
        } else if (key == "d") {
            cfg.d = static_cast<int>(to_int(key, value));
        } else if (key == "n_list") {
            cfg.n_list.clear();
            for (const std::string& item : split_list(value))
                cfg.n_list.push_back(to_int(key, item));
        } else if (key == "t0") {
            cfg.t0 = to_real(key, value);
        } else if (key == "rho") {
            cfg.rho = to_real(key, value);
        } else if (key == "replicas") {
            cfg.replicas = static_cast<int>(to_int(key, value));
        } else if (key == "base_seed") {
            cfg.base_seed = static_cast<std::uint64_t>(to_int(key, value));
        } else if (key == "dt") {
            cfg.dt = to_real(key, value);
        } else if (key == "k_max") {
            const std::string v = strip_quotes(value);
            cfg.k_max = v == "auto" ? 0 : static_cast<int>(to_int(key, v));
        } else if (key == "A") {
            const std::string v = strip_quotes(value);
            if (v == "paper-default") {
                cfg.a_paper_default = true;
            } else {
                cfg.a_paper_default = false;
                cfg.a_threshold = to_real(key, v);
            }
        } else if (key == "initial_state") {
            const std::string v = strip_quotes(value);
            if (v.rfind("counts:", 0) == 0) {
                cfg.initial_state = "counts";
                cfg.explicit_counts.clear();
                std::stringstream cs(v.substr(7));
                std::string item;
                while (std::getline(cs, item, ',')) {
                    item = trim(item);
                    if (!item.empty()) cfg.explicit_counts.push_back(to_int(key, item));
                }
            } else {
                cfg.initial_state = v;
            }
        } else if (key == "R") {
            cfg.thr_R = to_threshold(key, strip_quotes(value));
        } else if (key == "R_tilde") {
            cfg.thr_R_tilde = to_threshold(key, strip_quotes(value));
        } else if (key == "R_bar") {
            cfg.thr_R_bar = to_threshold(key, strip_quotes(value));
        } else if (key == "r") {
            cfg.thr_r = to_threshold(key, strip_quotes(value));
        } else if (key == "rr_constant") {
            cfg.rr_constant = to_real(key, value);
        } else if (key == "output_dir") {
            cfg.output_dir = strip_quotes(value);
        } else if (key == "checks") {
            cfg.checks = split_list(value);
        } else if (key == "threads") {
            cfg.threads = static_cast<int>(to_int(key, value));
        } else if (key == "obs_points") {
            cfg.obs_points = static_cast<int>(to_int(key, value));
        } else if (key.rfind("pin_", 0) == 0) {
            cfg.pins[key.substr(4)] = to_real(key, value);
        } else {
            throw std::invalid_argument("config: unknown key '" + key + "'");
        }
    }
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void ExperimentConfig::validate() const {
    static const std::vector<std::string> modes = {"lln",    "jump",         "diffusion",
                                                   "cutoff", "bounds-audit", "fixed-point"};
    if (std::find(modes.begin(), modes.end(), mode) == modes.end())
        throw std::invalid_argument("config: unknown mode '" + mode + "'");
    if (!(lambda > 0.0 && lambda < 1.0))
        throw std::invalid_argument("config: lambda outside (0,1)");
    if (d < 2) throw std::invalid_argument("config: d < 2");
    if (mode != "fixed-point" && n_list.empty())
        throw std::invalid_argument("config: n_list empty");
    const bool wants_lln_scaling =
        mode == "lln" &&
        (checks.empty() || std::find(checks.begin(), checks.end(), "lln-scaling") != checks.end());
    if (wants_lln_scaling && n_list.size() < 2)
        throw std::invalid_argument(
            "config: lln-scaling compares medians across N; give at least two N values "
            "(or select checks = [sim-equivalence])");
    if (replicas < 1) throw std::invalid_argument("config: replicas < 1");
    if (!(t0 > 0.0)) throw std::invalid_argument("config: t0 <= 0");
    if (initial_state != "empty" && initial_state != "rounded-a" && initial_state != "counts")
        throw std::invalid_argument("config: initial_state must be empty, rounded-a or counts:...");
    if (initial_state == "counts" && explicit_counts.empty())
        throw std::invalid_argument("config: counts initial state needs explicit counts");
    if (!a_paper_default && a_threshold < 1.0)
        throw std::invalid_argument("config: A must be >= 1");
    if (output_dir.empty()) throw std::invalid_argument("config: output_dir empty");
}

std::string config_echo(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& [key, value] : cfg.raw) {
        out += key;
        out += " = ";
        out += value;
        out += "\n";
    }
    return out;
}

}  // namespace smkt
