#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mammolab/harness.hpp"

namespace fs = std::filesystem;
using namespace mammolab;

namespace {

// results CSV: header "model,<task1>,<task2>,..."; one row of metric values
// per model, higher is better
void run_rank(const std::string& results_path, const std::string& out_path, bool with_cd) {
    std::ifstream in(results_path);
    if (!in) throw IoError("cannot open: " + results_path);
    std::string line;
    if (!std::getline(in, line)) throw BadConfig("empty results file");
    auto header = detail::split_list(line);
    if (header.size() < 2) throw BadConfig("results header needs at least one task column");
    std::vector<std::string> tasks(header.begin() + 1, header.end());

    std::vector<std::string> models;
    std::vector<std::vector<double>> values;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto parts = detail::split_list(line);
        if (parts.size() != header.size())
            throw BadConfig("ragged results row: " + line);
        models.push_back(parts[0]);
        std::vector<double> row;
        for (std::size_t i = 1; i < parts.size(); ++i) row.push_back(std::stod(parts[i]));
        values.push_back(std::move(row));
    }
    if (models.empty()) throw BadConfig("no model rows in " + results_path);

    RankTable table = build_rank_table(models, tasks, values,
                                       std::vector<char>(tasks.size(), 1),
                                       with_cd && models.size() >= 2 && models.size() <= 10);
    write_rank_table_csv(table, out_path);
    const fs::path out(out_path);
    write_cd_diagram_csv(table, out.parent_path() / (out.stem().string() + "_cd_diagram.csv"));
}

// values CSV: one number per line
void run_ci(const std::string& values_path, std::size_t replicates, std::uint64_t seed) {
    std::ifstream in(values_path);
    if (!in) throw IoError("cannot open: " + values_path);
    std::vector<double> values;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) values.push_back(std::stod(line));
    auto r = bootstrap_ci(values, mean_of, replicates, 0.05, seed, "mean");
    std::cout << "point,ci_low,ci_high,n_replicates\n"
              << detail::fmt6(r.point) << "," << detail::fmt6(r.ci_low) << ","
              << detail::fmt6(r.ci_high) << "," << r.n_replicates << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"benchmark statistics"};
    app.require_subcommand(1);

    std::string results_path, out_path, values_path;
    bool with_cd = false;
    std::size_t replicates = 1000;
    std::uint64_t seed = 0;

    auto* rank = app.add_subcommand("rank", "tie-averaged rank table across models");
    rank->add_option("--results", results_path, "metric values CSV (model,task...)")->required();
    rank->add_option("--out", out_path, "output rank table CSV")->required();
    rank->add_flag("--cd", with_cd, "include the Nemenyi critical difference");

    auto* ci = app.add_subcommand("ci", "percentile bootstrap CI of the mean");
    ci->add_option("--values", values_path, "per-sample values, one per line")->required();
    ci->add_option("--B", replicates, "bootstrap replicates");
    ci->add_option("--seed", seed, "bootstrap seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(rank)) run_rank(results_path, out_path, with_cd);
        else run_ci(values_path, replicates, seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
