#pragma once

#include <filesystem>

#include "pseg/model.hpp"
#include "pseg/objectives.hpp"
#include "pseg/phantom.hpp"

namespace pseg {

// Patch-wise sliding-window prediction with 0.5 overlap and uniform
// probability averaging; volumes smaller than the patch are zero-padded and
// the result is cropped back. select_task_id overrides FUSE routing.
template <typename T>
Tensor<uint8_t> predict_volume(Model<T>& model, const Tensor<float>& image, int task_id,
                               int modal_id, int select_task_id = -1);

struct EvalOptions {
    bool wrong_task_id = false;  // route every sample through (task_id+1) % N
};

template <typename T>
DatasetMetric evaluate_dataset(Model<T>& model, const Dataset& ds, EvalOptions opts = {});

template <typename T>
MetricReport evaluate_datasets(Model<T>& model, const std::vector<const Dataset*>& datasets,
                               EvalOptions opts = {});

// Writes, per task, n_per_task flattened task-specific priors taken at the
// universal prompt dims (train+test pool; resampled with replacement when the
// pool is smaller than n_per_task). Layout: priors_task<t>.f32 + rows.csv +
// manifest.json.
template <typename T>
void export_priors(Model<T>& model, const std::vector<const Dataset*>& datasets, int n_per_task,
                   const std::filesystem::path& out_dir, Rng rng);

}  // namespace pseg
