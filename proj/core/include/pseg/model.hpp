#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pseg/autograd.hpp"
#include "pseg/model_config.hpp"
#include "pseg/ops.hpp"
#include "pseg/registry.hpp"
#include "pseg/rng.hpp"

namespace pseg {

template <typename T>
class LoraExtension;

// Which priors a variant owns and where they enter the network.
enum class InjectionSite { none, encoder_entry, bottleneck, decoder_end };

struct VariantWiring {
    bool modal_pathway = false;        // any modal prior at all
    bool per_modal_prompts = false;    // one prompt per modality (vs one shared)
    bool per_task_prompts = false;     // one prompt per task (vs one universal)
    bool prompts_trainable = true;     // false: zero-initialized and frozen
    InjectionSite modal_site = InjectionSite::none;
    InjectionSite task_site = InjectionSite::bottleneck;
    int injection_count = 0;
};

VariantWiring variant_wiring(Variant v);

template <typename T>
struct ConvBlockParams {
    Var<T> w, b;         // conv
    Var<T> gamma, beta;  // instance norm affine
    std::array<int, 3> stride{1, 1, 1};
    std::string name;
};

template <typename T>
struct UpParams {
    Var<T> w, b;  // transposed conv, kernel == stride
    std::array<int, 3> stride{1, 1, 1};
    std::string name;
};

template <typename T>
struct HeadParams {
    Var<T> w, b;
    std::string name;
};

template <typename T>
struct EncoderFeatures {
    std::vector<Var<T>> stages;  // outputs of stages 1..6; back() is the bottleneck F
    Var<T> bottleneck() const { return stages.back(); }
};

template <typename T>
struct DecoderOutput {
    std::vector<Var<T>> logits;   // finest scale first
    std::vector<Var<T>> features; // decoder outputs, finest first (stage1..stage5 res)
};

template <typename T>
struct ForwardResult {
    std::vector<Var<T>> logits;       // finest first
    Var<T> encoder_input;             // image plus modal prior (Eq. 2 result)
    Var<T> task_prior;                // F_tp at the sample's bottleneck dims (null if absent)
    Var<T> task_prior_uni;            // F_tp at the universal prompt dims (null if absent)
    std::vector<std::pair<std::string, Shape>> shapes;  // per-layer output shapes
};

// A conv eligible for a LoRA adapter (encoder/decoder blocks; stems, FUSE and
// segmentation heads excluded).
struct AdapterSite {
    std::string name;
    int64_t cin = 0, cout = 0;
    int kernel = 3;
    std::array<int, 3> stride{1, 1, 1};
};

// Geometry of one residual deconv+head pair (per supervised scale).
struct ResidualSite {
    int head_index = 0;  // 0 = finest
    int64_t cin = 0, cmid = 0, cout = 0;
    std::array<int, 3> stride{1, 1, 1};
};

// Pruned 3d encoder-decoder with multi-channel stems, prompt pathways and
// deep-supervision heads. One instance serves 2d (depth-1) and 3d inputs.
template <typename T>
class Model {
public:
    Model(const ModelConfig& config, const Registry& registry, Rng init_rng);

    const ModelConfig& config() const { return config_; }
    const Registry& registry() const { return registry_; }
    int max_class_count() const { return registry_.max_class_count(); }
    static constexpr int supervised_scales = 4;

    std::map<std::string, Var<T>>& params() { return params_; }
    const std::map<std::string, Var<T>>& params() const { return params_; }
    Var<T> param(const std::string& name) const;

    // Modal prior pathway (Eq. 2): affine l->144, reshape 12x12 or 4x6x6 by
    // the sample's dimensionality, linear interpolation to (D,H,W).
    Var<T> mmap_apply(Tape<T>& tape, int modal_id, ops::Dims3 target_dhw, bool is2d);

    // Task prior pathway (Eq. 1): concat prompt with F, fuse blocks, split,
    // select. 2d features are resampled to the universal dims and back.
    struct FuseOut {
        Var<T> at_feature_dims;
        Var<T> at_universal_dims;
    };
    FuseOut fuse_apply(Tape<T>& tape, const Var<T>& bottleneck, int task_id);

    EncoderFeatures<T> encode(Tape<T>& tape, const Var<T>& input, bool is2d,
                              std::vector<std::pair<std::string, Shape>>* shapes = nullptr);
    DecoderOutput<T> decode(Tape<T>& tape, const EncoderFeatures<T>& enc, const Var<T>& bottleneck_in,
                            bool is2d, const Var<T>& decoder_end_prior = nullptr, int task_id = -1,
                            std::vector<std::pair<std::string, Shape>>* shapes = nullptr);

    // Full variant-wired pipeline. select_task_id overrides the FUSE routing
    // (wrong-task-id ablation); -1 means route by task_id.
    ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& images, int task_id, int modal_id,
                             int select_task_id = -1);

    std::vector<AdapterSite> adapter_sites() const;
    std::vector<ResidualSite> residual_sites() const;
    void attach_lora(const LoraExtension<T>* ext) { lora_ = ext; }
    const LoraExtension<T>* lora() const { return lora_; }

    // Names of the prompt parameters (modal bank, universal/task prompts).
    std::vector<std::string> prompt_param_names() const;

private:
    ModelConfig config_;
    Registry registry_;
    VariantWiring wiring_;
    int n_tasks_ = 0;
    int n_modalities_ = 0;
    std::map<std::string, Var<T>> params_;

    std::vector<ConvBlockParams<T>> stems_;  // 4 entries, channel counts 1..4
    ConvBlockParams<T> stage1_shared_;
    std::vector<std::array<ConvBlockParams<T>, 2>> enc_;  // stages 2..6
    struct DecStage {
        UpParams<T> up;
        ConvBlockParams<T> b0, b1;
    };
    std::vector<DecStage> dec_;  // index 0 -> stage5 res, ..., index 4 -> stage1 res
    std::vector<HeadParams<T>> heads_;  // heads_[k] at stage (k+1) resolution, k=0 finest

    std::vector<Var<T>> modal_prompts_;  // per modality (may be empty)
    Var<T> uni_modal_prompt_;            // UniversalPrompts only
    Var<T> mmap_w_, mmap_b_;
    Var<T> task_prompt_uni_;             // F_uni (all variants but MultiplePrompts)
    std::vector<Var<T>> task_prompts_;   // MultiplePrompts only
    struct FuseBlock {
        Var<T> w, b, gamma, beta;
        bool has_norm_act = true;
        std::string name;
    };
    std::vector<FuseBlock> fuse_;

    const LoraExtension<T>* lora_ = nullptr;

    Var<T> reg(const std::string& name, Tensor<T> init, bool trainable = true);
    ConvBlockParams<T> make_block(const std::string& name, int64_t cin, int64_t cout,
                                  std::array<int, 3> stride, Rng& rng);
    Var<T> run_block(Tape<T>& tape, const ConvBlockParams<T>& blk, const Var<T>& x,
                     std::vector<std::pair<std::string, Shape>>* shapes);
    Var<T> modal_prior(Tape<T>& tape, int modal_id, ops::Dims3 target, bool is2d);
    int64_t fuse_mid_channels() const;
};

}  // namespace pseg
