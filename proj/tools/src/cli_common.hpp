#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pseg/config_file.hpp"
#include "pseg/manifest.hpp"
#include "pseg/phantom.hpp"
#include "pseg/registry.hpp"

namespace psegcli {

struct CommonArgs {
    std::string config;
    std::string out;
    std::optional<int64_t> seed;  // --seed override
};

struct DataRoot {
    pseg::Registry registry;
    std::vector<pseg::Dataset> datasets;  // sorted by task_id
};

DataRoot load_data_root(const std::filesystem::path& root);

std::vector<const pseg::Dataset*> dataset_ptrs(const DataRoot& root);

// Content hash over the canonicalized config, the effective seed and any
// referenced input manifests.
std::string inputs_hash(const pseg::ConfigFile& cf, uint64_t seed,
                        const std::vector<std::filesystem::path>& input_manifests);

void finish_run(const std::filesystem::path& out, pseg::RunManifest manifest, double wall_seconds);

void write_run_log(const std::filesystem::path& out, const nlohmann::json& log);

// Parsed synth sections.
struct SynthModality {
    std::string name;
    int channels = 1;
    pseg::Dimensionality dim = pseg::Dimensionality::k3d;
    std::vector<double> means, stds;
};

struct SynthDataset {
    std::string name;
    std::string modality;
    int classes = 2;
    pseg::ShapeFamily family = pseg::ShapeFamily::sphere;
    std::array<int64_t, 3> dims{8, 64, 64};
    int n_train = 8, n_test = 4;
    double noise_std = 0.05;
    std::vector<double> class_offsets;
    double lesion_absent_fraction = 0;
};

struct SynthPlan {
    uint64_t seed = 0;
    std::vector<SynthModality> modalities;
    std::vector<SynthDataset> datasets;
};

SynthPlan parse_synth_plan(pseg::ConfigFile& cf);

int run_synth(const CommonArgs& args);
int run_train(const CommonArgs& args, const std::string& variant_override);
int run_eval(const CommonArgs& args, bool wrong_task_id);
int run_extend(const CommonArgs& args, const std::string& tasks_override);
int run_finetune(const CommonArgs& args);
int run_export_priors(const CommonArgs& args);

}  // namespace psegcli
