#include <chrono>
#include <iostream>

#include "cli_common.hpp"
#include "pseg/checkpoint.hpp"
#include "pseg/error.hpp"
#include "pseg/io.hpp"

namespace psegcli {

namespace fs = std::filesystem;
using nlohmann::json;

int run_train(const CommonArgs& args, const std::string& variant_override) {
    const auto t0 = std::chrono::steady_clock::now();
    pseg::ConfigFile cf = pseg::ConfigFile::parse_file(args.config);
    pseg::ModelConfig mc = parse_model_section(cf);
    pseg::TrainConfig tc = parse_train_section(cf);
    const std::string data = cf.get_str("train", "data");
    cf.finish();
    if (args.seed) tc.seed = static_cast<uint64_t>(*args.seed);
    if (!variant_override.empty()) {
        mc.variant = pseg::variant_from_string(variant_override);
        mc.validate();
    }

    DataRoot root = load_data_root(data);
    pseg::Model<float> model(mc, root.registry, pseg::Rng(tc.seed));
    pseg::Trainer<float> trainer(model, tc);
    const auto datasets = dataset_ptrs(root);
    std::cout << "train: variant " << pseg::to_string(mc.variant) << ", " << datasets.size()
              << " datasets, " << tc.max_epochs * tc.iterations_per_dataset * int(datasets.size())
              << " iterations\n";
    pseg::TrainResult result = trainer.run(datasets);

    fs::create_directories(args.out);
    const std::string trace = trace_to_csv(result.trace);
    pseg::write_text_file(fs::path(args.out) / "loss_trace.csv", trace);
    pseg::write_text_file(fs::path(args.out) / "config_snapshot.ini", cf.canonical());

    json extra{{"command", "train"},
               {"data", data},
               {"seed", tc.seed},
               {"iterations", result.iterations}};
    pseg::save_checkpoint(fs::path(args.out) / "checkpoint", model, &trainer.optimizer(),
                          tc.max_epochs, extra, trace);

    pseg::RunManifest m;
    m.command = "train";
    m.config_path = args.config;
    m.seed = tc.seed;
    m.inputs_hash = inputs_hash(cf, tc.seed, {fs::path(data) / "registry.txt"});
    m.outputs = {"checkpoint/manifest.json", "loss_trace.csv", "config_snapshot.ini"};
    finish_run(args.out, m,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    std::cout << "train: final loss " << result.trace.back().loss << ", checkpoint at " << args.out
              << "/checkpoint\n";
    return 0;
}

}  // namespace psegcli
