#include "cli_common.hpp"

#include <algorithm>

#include "pseg/error.hpp"
#include "pseg/io.hpp"

namespace psegcli {

namespace fs = std::filesystem;
using nlohmann::json;

DataRoot load_data_root(const fs::path& root) {
    if (!fs::exists(root / "registry.txt"))
        throw pseg::IoError("data root has no registry file: " + (root / "registry.txt").string());
    DataRoot out;
    out.registry = pseg::Registry::load(root / "registry.txt");
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        if (!fs::exists(entry.path() / "manifest.json")) continue;
        out.datasets.push_back(pseg::load_dataset(entry.path()));
    }
    if (out.datasets.empty()) throw pseg::IoError("no datasets found under " + root.string());
    std::sort(out.datasets.begin(), out.datasets.end(),
              [](const pseg::Dataset& a, const pseg::Dataset& b) { return a.task_id < b.task_id; });
    return out;
}

std::vector<const pseg::Dataset*> dataset_ptrs(const DataRoot& root) {
    std::vector<const pseg::Dataset*> out;
    for (const auto& d : root.datasets) out.push_back(&d);
    return out;
}

std::string inputs_hash(const pseg::ConfigFile& cf, uint64_t seed,
                        const std::vector<fs::path>& input_manifests) {
    std::string acc = cf.canonical();
    acc += "\nseed=" + std::to_string(seed) + "\n";
    for (const auto& p : input_manifests) {
        if (!fs::exists(p)) throw pseg::IoError("referenced input not found: " + p.string());
        acc += p.filename().string() + ":" + pseg::sha256_file(p) + "\n";
    }
    return pseg::sha256_hex(acc);
}

void finish_run(const fs::path& out, pseg::RunManifest manifest, double wall_seconds) {
    manifest.wall_clock_seconds = wall_seconds;
    pseg::write_run_manifest(out, manifest);
}

void write_run_log(const fs::path& out, const json& log) {
    pseg::write_text_file(out / "run_log.json", log.dump(2) + "\n");
}

SynthPlan parse_synth_plan(pseg::ConfigFile& cf) {
    SynthPlan plan;
    plan.seed = static_cast<uint64_t>(cf.get_int_or("synth", "seed", 0));
    for (const auto& sec : cf.section_names()) {
        if (sec.rfind("modality:", 0) == 0) {
            SynthModality m;
            m.name = sec.substr(std::string("modality:").size());
            m.channels = static_cast<int>(cf.get_int(sec, "channels"));
            m.dim = pseg::dimensionality_from_string(cf.get_str(sec, "dim"));
            m.means = cf.get_doubles(sec, "means");
            m.stds = cf.get_doubles_or(sec, "stds", std::vector<double>(m.means.size(), 0.0));
            plan.modalities.push_back(std::move(m));
        } else if (sec.rfind("dataset:", 0) == 0) {
            SynthDataset d;
            d.name = sec.substr(std::string("dataset:").size());
            d.modality = cf.get_str(sec, "modality");
            d.classes = static_cast<int>(cf.get_int(sec, "classes"));
            d.family = pseg::shape_family_from_string(cf.get_str(sec, "family"));
            const auto dims = cf.get_ints(sec, "dims");
            if (dims.size() != 3) throw pseg::ConfigError("[" + sec + "].dims needs D,H,W");
            d.dims = {dims[0], dims[1], dims[2]};
            d.n_train = static_cast<int>(cf.get_int(sec, "n_train"));
            d.n_test = static_cast<int>(cf.get_int(sec, "n_test"));
            d.noise_std = cf.get_double_or(sec, "noise_std", d.noise_std);
            d.class_offsets = cf.get_doubles(sec, "class_offsets");
            d.lesion_absent_fraction =
                cf.get_double_or(sec, "lesion_absent_fraction", d.lesion_absent_fraction);
            plan.datasets.push_back(std::move(d));
        } else if (sec != "synth") {
            throw pseg::ConfigError("unexpected section [" + sec + "] in synth config");
        }
    }
    if (plan.datasets.empty()) throw pseg::ConfigError("synth config defines no [dataset:*] sections");
    return plan;
}

}  // namespace psegcli
