#include <chrono>
#include <iostream>

#include "cli_common.hpp"
#include "pseg/checkpoint.hpp"
#include "pseg/io.hpp"

namespace psegcli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<int> parse_task_list(const std::string& s) {
    std::vector<int> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    return out;
}

}  // namespace

int run_extend(const CommonArgs& args, const std::string& tasks_override) {
    const auto t0 = std::chrono::steady_clock::now();
    pseg::ConfigFile cf = pseg::ConfigFile::parse_file(args.config);
    const std::string ckpt = cf.get_str("extend", "checkpoint");
    const std::string data = cf.get_str("extend", "data");
    std::string tasks_str = cf.get_str_or("extend", "tasks", "");
    pseg::LoraConfig lc;
    lc.rank = static_cast<int>(cf.get_int_or("extend", "rank", lc.rank));
    lc.alpha = cf.get_double_or("extend", "alpha", lc.alpha);
    pseg::TrainConfig tc = parse_train_section(cf);
    cf.finish();
    if (args.seed) tc.seed = static_cast<uint64_t>(*args.seed);
    if (!tasks_override.empty()) tasks_str = tasks_override;
    if (tasks_str.empty())
        throw pseg::ConfigError("extend: no tasks given ([extend].tasks or --tasks)");
    const std::vector<int> tasks = parse_task_list(tasks_str);

    auto loaded = pseg::load_checkpoint<float>(ckpt);
    DataRoot root = load_data_root(data);
    pseg::LoraExtension<float> ext(*loaded.model, lc, tasks, pseg::Rng(tc.seed));

    // Identity sanity: logits of the extended model must match the frozen
    // base on a random input at init (zero-initialized up maps).
    double identity_maxabs = 0;
    {
        const pseg::Dataset& ds = root.datasets.front();
        pseg::Rng probe(tc.seed ^ 0x9e3779b9);
        pseg::SampleBatch sb = pseg::sample_batch(ds, 1, probe);
        pseg::Tape<float> tape;
        pseg::NoGradGuard<float> g(tape);
        auto with = loaded.model->forward(tape, sb.images, sb.task_id, sb.modal_id);
        loaded.model->attach_lora(nullptr);
        auto without = loaded.model->forward(tape, sb.images, sb.task_id, sb.modal_id);
        loaded.model->attach_lora(&ext);
        for (size_t s = 0; s < with.logits.size(); ++s)
            for (int64_t i = 0; i < with.logits[s]->value.size(); ++i)
                identity_maxabs = std::max(identity_maxabs,
                                           std::abs(double(with.logits[s]->value[i]) -
                                                    double(without.logits[s]->value[i])));
    }

    std::vector<const pseg::Dataset*> subset;
    for (const auto& ds : root.datasets)
        if (ext.task_active(ds.task_id)) subset.push_back(&ds);
    if (subset.empty()) throw pseg::DataError("extend: none of the requested tasks has a dataset");

    pseg::Trainer<float> trainer(*loaded.model, tc);
    pseg::TrainResult result = trainer.run(subset, &ext.params());

    fs::create_directories(args.out);
    const std::string trace = trace_to_csv(result.trace);
    pseg::write_text_file(fs::path(args.out) / "loss_trace.csv", trace);
    json extra{{"command", "extend"}, {"tasks", tasks}, {"iterations", result.iterations}};
    pseg::save_extension_checkpoint(fs::path(args.out) / "checkpoint", ext, ckpt,
                                    &trainer.optimizer(), tc.max_epochs, extra, trace);
    write_run_log(args.out, json{{"init_identity_max_abs", identity_maxabs},
                                 {"trainable_parameters", ext.trainable_param_count()}});

    pseg::RunManifest m;
    m.command = "extend";
    m.config_path = args.config;
    m.seed = tc.seed;
    m.inputs_hash = inputs_hash(cf, tc.seed,
                                {fs::path(ckpt) / "manifest.json", fs::path(data) / "registry.txt"});
    m.outputs = {"checkpoint/manifest.json", "loss_trace.csv", "run_log.json"};
    finish_run(args.out, m,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    std::cout << "extend: " << ext.trainable_param_count() << " trainable params, init identity "
              << identity_maxabs << "\n";
    return 0;
}

}  // namespace psegcli
