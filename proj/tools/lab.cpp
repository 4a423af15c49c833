#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mammolab/harness.hpp"

using namespace mammolab;

int main(int argc, char** argv) {
    CLI::App app{"experiment lab: ablation matrix orchestration"};
    app.require_subcommand(1);

    std::string config_path, run_dir;
    std::vector<std::string> overrides;

    auto* run = app.add_subcommand("run", "run all configured variants and tasks");
    run->add_option("--config", config_path, "flat key=value config file")->required();
    run->add_option("--set", overrides, "config overrides as key=value (repeatable)");

    auto* report = app.add_subcommand("report", "re-emit reports from a finished run tree");
    report->add_option("rundir", run_dir, "run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(report)) {
            emit_report(run_dir);
            return 0;
        }
        std::ifstream in(config_path);
        if (!in) throw IoError("cannot open config: " + config_path);
        auto entries = parse_config_text(in);
        for (const auto& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos) throw BadConfig("override missing '=': " + o);
            entries[o.substr(0, eq)] = o.substr(eq + 1);
        }
        ExperimentConfig cfg = config_from_entries(entries);
        ExperimentResult result = run_experiment(cfg);
        for (const auto& v : result.completed) std::cout << v << ": completed\n";
        for (const auto& [v, err] : result.failed) std::cout << v << ": failed (" << err << ")\n";
        return result.failed.empty() ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
