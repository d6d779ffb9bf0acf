#include <chrono>
#include <iostream>

#include "cli_common.hpp"
#include "pseg/error.hpp"

namespace psegcli {

namespace fs = std::filesystem;

int run_synth(const CommonArgs& args) {
    const auto t0 = std::chrono::steady_clock::now();
    pseg::ConfigFile cf = pseg::ConfigFile::parse_file(args.config);
    SynthPlan plan = parse_synth_plan(cf);
    cf.finish();
    if (args.seed) plan.seed = static_cast<uint64_t>(*args.seed);

    pseg::Registry reg;
    for (const auto& m : plan.modalities) {
        pseg::ModalityDescriptor md;
        md.name = m.name;
        md.channel_count = m.channels;
        md.dimensionality = m.dim;
        reg.register_modality(md);
    }
    auto modality_id = [&](const std::string& name) {
        for (const auto& m : reg.modalities())
            if (m.name == name) return m.modal_id;
        throw pseg::LookupError("dataset references unknown modality '" + name + "'");
    };
    for (const auto& d : plan.datasets) {
        pseg::TaskDescriptor td;
        td.name = d.name;
        td.class_count = d.classes;
        td.modal_id = modality_id(d.modality);
        reg.register_task(td);
    }
    reg.freeze();

    fs::create_directories(args.out);
    reg.save(fs::path(args.out) / "registry.txt");

    pseg::Rng master(plan.seed);
    std::vector<std::string> outputs{"registry.txt"};
    for (size_t i = 0; i < plan.datasets.size(); ++i) {
        const SynthDataset& d = plan.datasets[i];
        const pseg::TaskDescriptor& task = reg.task(static_cast<int>(i));
        const pseg::ModalityDescriptor& mod = reg.modality(task.modal_id);
        const SynthModality* sm = nullptr;
        for (const auto& m : plan.modalities)
            if (m.name == mod.name) sm = &m;
        pseg::PhantomSpec spec;
        spec.family = d.family;
        spec.dims = d.dims;
        spec.class_count = d.classes;
        spec.channel_means = sm->means;
        spec.channel_stds = sm->stds;
        spec.class_offsets = d.class_offsets;
        spec.noise_std = d.noise_std;
        spec.lesion_absent_fraction = d.lesion_absent_fraction;
        spec.seed = master.substream("dataset/" + d.name).seed_value();
        pseg::Dataset ds = pseg::generate_dataset(spec, task, mod, d.n_train, d.n_test, d.name);
        pseg::save_dataset(fs::path(args.out) / d.name, ds);
        outputs.push_back(d.name + "/manifest.json");
        std::cout << "synth: wrote dataset '" << d.name << "' (" << d.n_train << " train, "
                  << d.n_test << " test)\n";
    }

    pseg::RunManifest m;
    m.command = "synth";
    m.config_path = args.config;
    m.seed = plan.seed;
    m.inputs_hash = inputs_hash(cf, plan.seed, {});
    m.outputs = outputs;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    finish_run(args.out, m, secs);
    return 0;
}

}  // namespace psegcli
