#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "smkt/config.hpp"
#include "smkt/harness.hpp"

int main(int argc, char** argv) {
    CLI::App app{"supermarket-sim: join-the-shortest-queue simulation toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string bundle_dir;

    CLI::App* run = app.add_subcommand("run", "run the experiment described by a config file");
    run->add_option("config", config_path, "config file")->required();

    CLI::App* validate =
        app.add_subcommand("validate", "parse and validate a config file without running");
    validate->add_option("config", config_path, "config file")->required();

    CLI::App* report = app.add_subcommand("report", "summarize a previously written bundle");
    report->add_option("bundle", bundle_dir, "bundle directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            const smkt::ExperimentConfig cfg = smkt::parse_config_file(config_path);
            const smkt::ResultBundle bundle = smkt::run_experiment(cfg);
            for (const smkt::CheckResult& c : bundle.checks)
                std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << ": " << c.detail
                          << "\n";
            std::cout << "bundle written to " << bundle.output_dir << "\n";
            return bundle.all_pass() ? 0 : 1;
        }
        if (validate->parsed()) {
            const smkt::ExperimentConfig cfg = smkt::parse_config_file(config_path);
            cfg.validate();
            std::cout << "config ok: mode=" << cfg.mode << ", checks="
                      << (cfg.checks.empty() ? "(mode defaults)" : std::to_string(cfg.checks.size()))
                      << "\n";
            return 0;
        }
        // report
        std::string text;
        const bool ok = smkt::report_bundle(bundle_dir, text);
        std::cout << text;
        return ok ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
