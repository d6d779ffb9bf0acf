#include <chrono>
#include <iostream>

#include "cli_common.hpp"
#include "pseg/checkpoint.hpp"
#include "pseg/io.hpp"

namespace psegcli {

namespace fs = std::filesystem;
using nlohmann::json;

int run_finetune(const CommonArgs& args) {
    const auto t0 = std::chrono::steady_clock::now();
    pseg::ConfigFile cf = pseg::ConfigFile::parse_file(args.config);
    const std::string ckpt = cf.get_str("finetune", "checkpoint");
    const std::string data = cf.get_str("finetune", "data");
    const std::string ds_name = cf.get_str("finetune", "dataset");
    const std::string modal_init = cf.get_str_or("finetune", "modal_init", "copy");
    pseg::TrainConfig tc = parse_train_section(cf);
    cf.finish();
    if (args.seed) tc.seed = static_cast<uint64_t>(*args.seed);

    auto loaded = pseg::load_checkpoint<float>(ckpt);
    DataRoot root = load_data_root(data);
    const pseg::Dataset* target = nullptr;
    for (const auto& ds : root.datasets)
        if (ds.name == ds_name) target = &ds;
    if (!target) throw pseg::LookupError("finetune: dataset '" + ds_name + "' not found under " + data);

    pseg::FinetuneOptions opts;
    opts.modal_init = modal_init == "fresh" ? pseg::ModalPromptInit::fresh
                     : modal_init == "copy" ? pseg::ModalPromptInit::copy
                                            : throw pseg::ConfigError(
                                                  "finetune: modal_init must be fresh or copy");
    opts.init_seed = tc.seed;
    std::vector<std::string> transfer_log;
    auto model = pseg::make_finetune_model(*loaded.model, root.registry, opts, &transfer_log);

    // Frozen modal prompt integrity, recorded in the run log.
    json frozen_pre = json::object();
    for (const auto& name : model->prompt_param_names()) {
        if (name.rfind("prompt.modal", 0) != 0) continue;
        const auto& v = model->param(name)->value;
        frozen_pre[name] = pseg::sha256_hex(v.data(), static_cast<size_t>(v.size()) * sizeof(float));
    }

    pseg::Trainer<float> trainer(*model, tc);
    pseg::TrainResult result = trainer.run({target});

    json frozen_post = json::object();
    bool unchanged = true;
    for (const auto& [name, pre] : frozen_pre.items()) {
        const auto& v = model->param(name)->value;
        const std::string post =
            pseg::sha256_hex(v.data(), static_cast<size_t>(v.size()) * sizeof(float));
        frozen_post[name] = post;
        unchanged = unchanged && post == pre.get<std::string>();
    }

    fs::create_directories(args.out);
    const std::string trace = trace_to_csv(result.trace);
    pseg::write_text_file(fs::path(args.out) / "loss_trace.csv", trace);
    json extra{{"command", "finetune"},
               {"base_checkpoint", ckpt},
               {"dataset", ds_name},
               {"modal_init", modal_init}};
    pseg::save_checkpoint(fs::path(args.out) / "checkpoint", *model, &trainer.optimizer(),
                          tc.max_epochs, extra, trace);
    write_run_log(args.out, json{{"frozen_prompt_sha256_pre", frozen_pre},
                                 {"frozen_prompt_sha256_post", frozen_post},
                                 {"frozen_prompt_unchanged", unchanged},
                                 {"transfer_log", transfer_log}});
    if (!unchanged) throw pseg::Error("finetune: a frozen modal prompt changed during training");

    pseg::RunManifest m;
    m.command = "finetune";
    m.config_path = args.config;
    m.seed = tc.seed;
    m.inputs_hash = inputs_hash(cf, tc.seed,
                                {fs::path(ckpt) / "manifest.json", fs::path(data) / "registry.txt"});
    m.outputs = {"checkpoint/manifest.json", "loss_trace.csv", "run_log.json"};
    finish_run(args.out, m,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    std::cout << "finetune: done, frozen prompt unchanged = " << (unchanged ? "true" : "false")
              << "\n";
    return 0;
}

}  // namespace psegcli
