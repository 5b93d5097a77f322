// Acceptance suite: each numbered criterion runs the named config shipped
// under configs/ through the same pipeline as `smkt run`, and prints one
// pass/fail line. Exit code 0 iff every requested criterion passed.

#include <cstring>
#include <iostream>
#include <string>
#include <vector>

#include "smkt/config.hpp"
#include "smkt/harness.hpp"

namespace {

struct Criterion {
    int number;
    const char* config;
    const char* label;
};

const Criterion kCriteria[] = {
    {1, "configs/criterion01_fixed_point.conf", "fixed point of the limit dynamics"},
    {2, "configs/criterion02_fluid_attraction.conf", "fluid stationarity and attraction"},
    {3, "configs/criterion03_sim_equivalence.conf", "simulator equivalence"},
    {4, "configs/criterion04_lln_scaling.conf", "law-of-large-numbers scaling"},
    {5, "configs/criterion05_cutoff.conf", "cutoff behaviour"},
    {6, "configs/criterion06_jump_coupling.conf", "jump-process refinement"},
    {7, "configs/criterion07_diffusion.conf", "diffusion law"},
    {8, "configs/criterion08_variance_domination.conf", "variance-domination ratio"},
    {9, "configs/criterion09_bounds_audit.conf", "error-bound audit"},
    {10, "configs/criterion10_numerics.conf", "numerical analysis cross-checks"},
};

int run_criterion(const Criterion& c) {
    try {
        const smkt::ExperimentConfig cfg = smkt::parse_config_file(c.config);
        const smkt::ResultBundle bundle = smkt::run_experiment(cfg);
        bool pass = bundle.all_pass();
        for (const smkt::CheckResult& r : bundle.checks)
            std::cout << "criterion " << c.number << (r.pass ? " [PASS] " : " [FAIL] ")
                      << c.label << " (" << r.name << "): " << r.detail << "\n";
        if (!bundle.complete)
            std::cout << "criterion " << c.number
                      << " [FAIL] replica failure rate above 1%\n";
        return pass ? 0 : 1;
    } catch (const std::exception& e) {
        std::cout << "criterion " << c.number << " [FAIL] " << c.label << ": " << e.what()
                  << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc)
            only = std::atoi(argv[++i]);
    }
    int failures = 0;
    for (const Criterion& c : kCriteria) {
        if (only != 0 && c.number != only) continue;
        failures += run_criterion(c);
    }
    return failures == 0 ? 0 : 1;
}
