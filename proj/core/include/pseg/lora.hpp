#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "pseg/model.hpp"

namespace pseg {

struct LoraConfig {
    int rank = 32;
    double alpha = 64.0;
    double scale() const { return alpha / static_cast<double>(rank); }
};

// Low-rank branch parallel to one frozen conv: scale * up(down(x)). The down
// map keeps the base kernel/stride geometry and emits rank channels; the up
// map is a zero-initialized 1x1x1 conv, so the adapter is exactly zero at
// creation.
template <typename T>
struct LoraAdapter {
    Var<T> down_w;  // [r, Cin, k, k, k]
    Var<T> up_w;    // [Cout, r, 1, 1, 1], zero at init
    std::array<int, 3> stride{1, 1, 1};
    double scale = 1.0;
};

// Residual deconvolution + segmentation head per supervised scale, added to
// the frozen logits for the relearned tasks only.
template <typename T>
struct ResidualHead {
    Var<T> up_w, up_b;      // transposed conv mirroring the decoder upsample
    Var<T> head_w, head_b;  // zero-initialized 1x1x1 head
    std::array<int, 3> stride{1, 1, 1};
};

// Freezes the base model and attaches adapters + residual heads; only the
// new modules are trainable.
template <typename T>
class LoraExtension {
public:
    LoraExtension(Model<T>& base, LoraConfig cfg, std::vector<int> tasks_to_relearn, Rng rng);
    ~LoraExtension();

    LoraExtension(const LoraExtension&) = delete;
    LoraExtension& operator=(const LoraExtension&) = delete;

    const LoraAdapter<T>* adapter_for(const std::string& conv_name) const;
    bool task_active(int task_id) const { return active_tasks_.count(task_id) > 0; }
    const std::set<int>& active_tasks() const { return active_tasks_; }

    // Residual head for a supervised scale (0 = finest).
    const ResidualHead<T>& residual_head(int head_index) const;

    std::map<std::string, Var<T>>& params() { return params_; }
    const std::map<std::string, Var<T>>& params() const { return params_; }
    int64_t trainable_param_count() const;

    const LoraConfig& config() const { return cfg_; }
    Model<T>& base() { return base_; }

private:
    Model<T>& base_;
    LoraConfig cfg_;
    std::set<int> active_tasks_;
    std::map<std::string, LoraAdapter<T>> adapters_;
    std::vector<ResidualHead<T>> heads_;
    std::map<std::string, Var<T>> params_;
};

}  // namespace pseg
