#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mammolab/harness.hpp"

namespace fs = std::filesystem;
using namespace mammolab;

int main(int argc, char** argv) {
    CLI::App app{"downstream task training and evaluation"};
    app.require_subcommand(1);

    std::string config_path, encoder_ckpt, corpus_dir, task_name, out_dir;
    std::uint64_t seed = 0;
    bool finetune = false;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "flat key=value config file");
        sub->add_option("--encoder", encoder_ckpt, "encoder checkpoint")->required();
        sub->add_option("--corpus", corpus_dir, "corpus directory")->required();
        sub->add_option("--task", task_name, "label task name (classification only)");
        sub->add_option("--out", out_dir, "run directory")->required();
        sub->add_option("--seed", seed, "training seed");
        return sub;
    };
    auto* detect = add_common(app.add_subcommand("detect", "lesion detection"));
    auto* segment = add_common(app.add_subcommand("segment", "lesion segmentation"));
    auto* classify = add_common(app.add_subcommand("classify", "linear-probe classification"));
    auto* vqa = add_common(app.add_subcommand("vqa", "visual question answering"));
    classify->add_flag("--finetune", finetune, "unfreeze the encoder");

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg;
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw IoError("cannot open config: " + config_path);
            for (const auto& [k, v] : parse_config_text(in)) apply_config_entry(cfg, k, v);
        }
        cfg.seed = seed;
        if (finetune) cfg.classify.frozen = false;

        std::string task;
        if (app.got_subcommand(detect)) task = "detect";
        else if (app.got_subcommand(segment)) task = "segment";
        else if (app.got_subcommand(vqa)) task = "vqa";
        else {
            if (task_name.empty()) throw BadConfig("classify requires --task");
            task = "classify:" + task_name;
        }

        auto encoder = load_checkpoint(encoder_ckpt);
        Manifest manifest = load_manifest(fs::path(corpus_dir) / "manifest.jsonl");
        auto split = split_by_patient(manifest, {0.7, 0.1, 0.2}, seed);
        auto samples = detail::run_task(*encoder, task, manifest, split, cfg, out_dir);
        auto metrics = detail::task_metrics(task, samples, cfg.bootstrap_replicates, seed);
        for (const auto& m : metrics)
            std::cout << m.metric << "," << detail::fmt6(m.point) << ","
                      << detail::fmt6(m.ci_low) << "," << detail::fmt6(m.ci_high) << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
