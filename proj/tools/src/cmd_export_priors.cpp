#include <chrono>
#include <iostream>

#include "cli_common.hpp"
#include "pseg/checkpoint.hpp"
#include "pseg/inference.hpp"

namespace psegcli {

namespace fs = std::filesystem;

int run_export_priors(const CommonArgs& args) {
    const auto t0 = std::chrono::steady_clock::now();
    pseg::ConfigFile cf = pseg::ConfigFile::parse_file(args.config);
    const std::string ckpt = cf.get_str("export", "checkpoint");
    const std::string data = cf.get_str("export", "data");
    const int n_per_task = static_cast<int>(cf.get_int("export", "n_per_task"));
    uint64_t seed = static_cast<uint64_t>(cf.get_int_or("export", "seed", 0));
    cf.finish();
    if (args.seed) seed = static_cast<uint64_t>(*args.seed);

    auto loaded = pseg::load_checkpoint<float>(ckpt);
    DataRoot root = load_data_root(data);
    pseg::export_priors(*loaded.model, dataset_ptrs(root), n_per_task, args.out, pseg::Rng(seed));

    pseg::RunManifest m;
    m.command = "export-priors";
    m.config_path = args.config;
    m.seed = seed;
    m.inputs_hash = inputs_hash(cf, seed,
                                {fs::path(ckpt) / "manifest.json", fs::path(data) / "registry.txt"});
    m.outputs = {"manifest.json", "rows.csv"};
    finish_run(args.out, m,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    std::cout << "export-priors: " << n_per_task << " rows per task -> " << args.out << "\n";
    return 0;
}

}  // namespace psegcli
