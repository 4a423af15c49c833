#include <cstdint>
#include <iostream>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "mammolab/preprocess.hpp"

int main(int argc, char** argv) {
    CLI::App app{"phantom mammogram corpus generator"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen", "generate a corpus of PGM images plus a manifest");
    std::size_t patients = 100, per_patient = 2, image_size = 64;
    std::uint64_t seed = 0;
    std::string out;
    std::vector<std::string> tasks;
    gen->add_option("--patients", patients, "number of patients");
    gen->add_option("--per-patient", per_patient, "images per patient");
    gen->add_option("--image-size", image_size, "square image side in pixels");
    gen->add_option("--seed", seed, "corpus seed");
    gen->add_option("--tasks", tasks, "restrict label tasks (default: all)");
    gen->add_option("--out", out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        std::set<std::string> task_mix(tasks.begin(), tasks.end());
        mammolab::Manifest manifest =
            mammolab::generate_corpus(patients, per_patient, task_mix, seed, image_size);
        mammolab::write_corpus(manifest, out);
        std::cout << manifest.size() << " records written to " << out << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
