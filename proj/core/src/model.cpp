#include "pseg/model.hpp"

#include <cmath>

#include "pseg/lora.hpp"

namespace pseg {

namespace {

constexpr double kLeakySlope = 0.01;
constexpr double kNormEps = 1e-5;
constexpr int64_t kMmapLen = 144;  // 12x12 (2d) or 4x6x6 (3d)

template <typename T>
Tensor<T> he_normal(Shape shape, int64_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
    const double stddev = gain / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

}  // namespace

VariantWiring variant_wiring(Variant v) {
    VariantWiring w;
    switch (v) {
        case Variant::MedUniSeg:
            w = {true, true, false, true, InjectionSite::encoder_entry, InjectionSite::bottleneck, 2};
            break;
        case Variant::UniSeg:
            w = {false, false, false, true, InjectionSite::none, InjectionSite::bottleneck, 1};
            break;
        case Variant::MultiplePrompts:
            w = {true, true, true, true, InjectionSite::encoder_entry, InjectionSite::bottleneck, 2};
            break;
        case Variant::UniversalPrompts:
            w = {true, false, false, true, InjectionSite::encoder_entry, InjectionSite::bottleneck, 2};
            break;
        case Variant::FixedPrompts:
            w = {true, true, false, false, InjectionSite::encoder_entry, InjectionSite::bottleneck, 2};
            break;
        case Variant::BottleneckPrompts:
            w = {true, true, false, true, InjectionSite::bottleneck, InjectionSite::bottleneck, 2};
            break;
        case Variant::MedUniSegT:
            w = {true, true, false, true, InjectionSite::encoder_entry, InjectionSite::decoder_end, 2};
            break;
    }
    return w;
}

template <typename T>
Var<T> Model<T>::reg(const std::string& name, Tensor<T> init, bool trainable) {
    auto v = make_var(std::move(init), trainable);
    if (!params_.emplace(name, v).second) throw ConfigError("duplicate parameter name " + name);
    return v;
}

template <typename T>
Var<T> Model<T>::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw LookupError("unknown parameter '" + name + "'");
    return it->second;
}

template <typename T>
ConvBlockParams<T> Model<T>::make_block(const std::string& name, int64_t cin, int64_t cout,
                                        std::array<int, 3> stride, Rng& rng) {
    ConvBlockParams<T> b;
    const int k = config_.kernel;
    Rng r = rng.substream(name);
    b.w = reg(name + ".conv.w", he_normal<T>(Shape{cout, cin, k, k, k}, cin * k * k * k, r));
    b.b = reg(name + ".conv.b", Tensor<T>(Shape{cout}));
    b.gamma = reg(name + ".norm.g", Tensor<T>(Shape{cout}, T(1)));
    b.beta = reg(name + ".norm.b", Tensor<T>(Shape{cout}));
    b.stride = stride;
    b.name = name;
    return b;
}

template <typename T>
Model<T>::Model(const ModelConfig& config, const Registry& registry, Rng init_rng)
    : config_(config), registry_(registry), wiring_(variant_wiring(config.variant)) {
    config_.validate();
    if (!registry_.frozen()) throw ConfigError("build_model requires a frozen registry");
    if (registry_.task_count() < 1) throw ConfigError("registry has no tasks");
    n_tasks_ = registry_.task_count();
    n_modalities_ = registry_.modality_count();

    const auto& w = config_.stage_widths;
    const int k = config_.kernel;
    Rng rng = init_rng.substream("model");

    // Encoder: four stems (one per channel count), shared second stage-1
    // block, then stages 2..6 with a strided first block.
    for (int c = 1; c <= 4; ++c)
        stems_.push_back(make_block("enc.s1.stem" + std::to_string(c), c, w[0], {1, 1, 1}, rng));
    stage1_shared_ = make_block("enc.s1.b1", w[0], w[0], {1, 1, 1}, rng);
    for (int s = 2; s <= 6; ++s) {
        const auto tag = "enc.s" + std::to_string(s);
        std::array<ConvBlockParams<T>, 2> stage{
            make_block(tag + ".b0", w[static_cast<size_t>(s - 2)], w[static_cast<size_t>(s - 1)],
                       config_.stage_strides[static_cast<size_t>(s - 1)], rng),
            make_block(tag + ".b1", w[static_cast<size_t>(s - 1)], w[static_cast<size_t>(s - 1)],
                       {1, 1, 1}, rng)};
        enc_.push_back(std::move(stage));
    }

    // Decoder: dec_[i] recovers the resolution of encoder stage 5-i.
    const bool bottleneck_prior = wiring_.task_site == InjectionSite::bottleneck;
    for (int s = 5; s >= 1; --s) {
        const auto tag = "dec.to" + std::to_string(s);
        DecStage d;
        const int64_t cin = (s == 5) ? w[5] + (bottleneck_prior ? 1 : 0) : w[static_cast<size_t>(s)];
        const int64_t cout = w[static_cast<size_t>(s - 1)];
        const auto stride = config_.stage_strides[static_cast<size_t>(s)];
        Rng r = rng.substream(tag + ".up");
        d.up.w = reg(tag + ".up.w",
                     he_normal<T>(Shape{cin, cout, stride[0], stride[1], stride[2]},
                                  cin * stride[0] * stride[1] * stride[2], r));
        d.up.b = reg(tag + ".up.b", Tensor<T>(Shape{cout}));
        d.up.stride = stride;
        d.up.name = tag + ".up";
        d.b0 = make_block(tag + ".b0", 2 * cout, cout, {1, 1, 1}, rng);
        d.b1 = make_block(tag + ".b1", cout, cout, {1, 1, 1}, rng);
        dec_.push_back(std::move(d));
    }

    const int cmax = registry_.max_class_count();
    for (int h = 0; h < supervised_scales; ++h) {
        const auto tag = "head." + std::to_string(h);
        HeadParams<T> hp;
        int64_t cin = w[static_cast<size_t>(h)];
        if (h == 0 && wiring_.task_site == InjectionSite::decoder_end) cin += 1;
        Rng r = rng.substream(tag);
        hp.w = reg(tag + ".w", he_normal<T>(Shape{cmax, cin, 1, 1, 1}, cin, r));
        hp.b = reg(tag + ".b", Tensor<T>(Shape{cmax}));
        hp.name = tag;
        heads_.push_back(std::move(hp));
    }

    // Prompt parameters.
    const auto& pc = config_.prompt;
    const bool trainable = wiring_.prompts_trainable;
    auto prompt_init = [&](const std::string& name, Shape shape) {
        Rng r = rng.substream(name);
        Tensor<T> t = trainable ? normal_init<T>(shape, 0.02, r) : Tensor<T>(shape);
        return reg(name, std::move(t), trainable);
    };
    if (wiring_.modal_pathway) {
        const int64_t l = pc.modal_prompt_length;
        if (wiring_.per_modal_prompts) {
            for (int m = 0; m < n_modalities_; ++m)
                modal_prompts_.push_back(prompt_init("prompt.modal." + std::to_string(m), Shape{l}));
        } else {
            uni_modal_prompt_ = prompt_init("prompt.uni_modal", Shape{l});
        }
        const int64_t out = wiring_.per_modal_prompts ? kMmapLen : kMmapLen * n_modalities_;
        Rng r = rng.substream("mmap");
        mmap_w_ = reg("mmap.w", normal_init<T>(Shape{out, l}, 1.0 / std::sqrt(double(l)), r));
        mmap_b_ = reg("mmap.b", Tensor<T>(Shape{out}));
    }

    const auto bn = config_.bottleneck3d();
    const int64_t K = pc.task_prompt_channels;
    if (wiring_.per_task_prompts) {
        for (int t = 0; t < n_tasks_; ++t)
            task_prompts_.push_back(
                prompt_init("prompt.task." + std::to_string(t), Shape{K, bn[0], bn[1], bn[2]}));
    } else {
        task_prompt_uni_ = prompt_init("prompt.task_uni", Shape{K, bn[0], bn[1], bn[2]});
    }

    // FUSE stack: (K + C1) -> mid -> ... -> N channels (1 when the task
    // prompt is selected before fusion).
    const int64_t c1 = w[5];
    const int64_t fuse_in = K + c1;
    const int64_t mid = fuse_mid_channels();
    const int64_t fuse_out = wiring_.per_task_prompts ? 1 : n_tasks_;
    for (int i = 0; i < pc.fuse_blocks; ++i) {
        const bool last = i == pc.fuse_blocks - 1;
        const int64_t cin = i == 0 ? fuse_in : mid;
        const int64_t cout = last ? fuse_out : mid;
        FuseBlock fb;
        const auto tag = "fuse.b" + std::to_string(i);
        Rng r = rng.substream(tag);
        fb.w = reg(tag + ".conv.w", he_normal<T>(Shape{cout, cin, k, k, k}, cin * k * k * k, r));
        fb.b = reg(tag + ".conv.b", Tensor<T>(Shape{cout}));
        fb.has_norm_act = !last;
        if (fb.has_norm_act) {
            fb.gamma = reg(tag + ".norm.g", Tensor<T>(Shape{cout}, T(1)));
            fb.beta = reg(tag + ".norm.b", Tensor<T>(Shape{cout}));
        }
        fb.name = tag;
        fuse_.push_back(std::move(fb));
    }
}

template <typename T>
int64_t Model<T>::fuse_mid_channels() const {
    const int64_t c = config_.prompt.task_prompt_channels + config_.stage_widths[5];
    return std::max<int64_t>(1, c / config_.prompt.fuse_reduction);
}

template <typename T>
Var<T> Model<T>::run_block(Tape<T>& tape, const ConvBlockParams<T>& blk, const Var<T>& x,
                           std::vector<std::pair<std::string, Shape>>* shapes) {
    const int k = config_.kernel;
    ops::ConvGeom geom;
    geom.stride = blk.stride;
    geom.pad = {k / 2, k / 2, k / 2};
    Var<T> y = ops::conv3d(tape, x, blk.w, blk.b, geom);
    if (lora_) {
        if (const LoraAdapter<T>* ad = lora_->adapter_for(blk.name)) {
            Var<T> down = ops::conv3d(tape, x, ad->down_w, Var<T>{}, geom);
            ops::ConvGeom unit;
            Var<T> up = ops::conv3d(tape, down, ad->up_w, Var<T>{}, unit);
            y = ops::add(tape, y, up, ad->scale);
        }
    }
    y = ops::instance_norm(tape, y, blk.gamma, blk.beta, kNormEps);
    y = ops::leaky_relu(tape, y, kLeakySlope);
    if (shapes) shapes->emplace_back(blk.name, y->value.shape());
    return y;
}

template <typename T>
Var<T> Model<T>::modal_prior(Tape<T>& tape, int modal_id, ops::Dims3 target, bool is2d) {
    if (!wiring_.modal_pathway)
        throw ConfigError("variant " + to_string(config_.variant) + " has no modal prompt pathway");
    if (modal_id < 0 || modal_id >= n_modalities_)
        throw LookupError("mmap: unknown modal_id " + std::to_string(modal_id));

    Var<T> mapped;
    if (wiring_.per_modal_prompts) {
        mapped = ops::affine_map(tape, mmap_w_, modal_prompts_[static_cast<size_t>(modal_id)], mmap_b_);
    } else {
        // One shared prompt; the affine map emits M x 144 and selection
        // extracts the modality's block.
        Var<T> all = ops::affine_map(tape, mmap_w_, uni_modal_prompt_, mmap_b_);
        Var<T> grid = ops::reshape(tape, all, Shape{1, n_modalities_, 1, 1, kMmapLen});
        mapped = ops::select_channel(tape, grid, modal_id);
    }
    const Shape grid_shape = is2d ? Shape{1, 1, 1, 12, 12} : Shape{1, 1, 4, 6, 6};
    Var<T> grid = ops::reshape(tape, mapped, grid_shape);
    Var<T> vol = ops::interp_linear(tape, grid, target);
    return ops::reshape(tape, vol, Shape{1, target[0], target[1], target[2]});
}

template <typename T>
Var<T> Model<T>::mmap_apply(Tape<T>& tape, int modal_id, ops::Dims3 target_dhw, bool is2d) {
    return modal_prior(tape, modal_id, target_dhw, is2d);
}

template <typename T>
typename Model<T>::FuseOut Model<T>::fuse_apply(Tape<T>& tape, const Var<T>& bottleneck,
                                                int task_id) {
    if (task_id < 0 || task_id >= n_tasks_)
        throw LookupError("fuse: task_id " + std::to_string(task_id) + " out of range [0," +
                          std::to_string(n_tasks_) + ")");
    const Shape& fs = bottleneck->value.shape();
    const auto uni = config_.bottleneck3d();
    const bool resample = fs[2] != uni[0] || fs[3] != uni[1] || fs[4] != uni[2];

    Var<T> f = bottleneck;
    if (resample) f = ops::interp_linear(tape, f, {uni[0], uni[1], uni[2]});
    Var<T> prompt = wiring_.per_task_prompts ? task_prompts_[static_cast<size_t>(task_id)]
                                             : task_prompt_uni_;
    Var<T> h = ops::concat_prompt(tape, prompt, f);
    const int k = config_.kernel;
    ops::ConvGeom geom;
    geom.pad = {k / 2, k / 2, k / 2};
    for (const auto& fb : fuse_) {
        h = ops::conv3d(tape, h, fb.w, fb.b, geom);
        if (fb.has_norm_act) {
            h = ops::instance_norm(tape, h, fb.gamma, fb.beta, kNormEps);
            h = ops::leaky_relu(tape, h, kLeakySlope);
        }
    }
    FuseOut out;
    out.at_universal_dims = wiring_.per_task_prompts ? h : ops::select_channel(tape, h, task_id);
    out.at_feature_dims = resample
                              ? ops::interp_linear(tape, out.at_universal_dims, {fs[2], fs[3], fs[4]})
                              : out.at_universal_dims;
    return out;
}

template <typename T>
EncoderFeatures<T> Model<T>::encode(Tape<T>& tape, const Var<T>& input, bool is2d,
                                    std::vector<std::pair<std::string, Shape>>* shapes) {
    const Shape& s = input->value.shape();
    if (s.size() != 5) throw ShapeError("encode: input must be [B,C,D,H,W]");
    const int64_t C = s[1];
    if (C < 1 || C > 4)
        throw LookupError("encode: no stem for channel count " + std::to_string(C));
    if (is2d && s[2] != 1) throw DataError("encode: 2d input must have depth 1");

    // Input dims must divide the cumulative strides so skip shapes line up.
    const auto p = config_.cumulative_stride(6);
    if (!is2d && s[2] % p[0] != 0)
        throw ShapeError("encode: depth " + std::to_string(s[2]) + " not divisible by stride product");
    if (s[3] % p[1] != 0 || s[4] % p[2] != 0)
        throw ShapeError("encode: plane dims not divisible by stride product");

    EncoderFeatures<T> out;
    Var<T> x = run_block(tape, stems_[static_cast<size_t>(C - 1)], input, shapes);
    x = run_block(tape, stage1_shared_, x, shapes);
    out.stages.push_back(x);
    for (const auto& stage : enc_) {
        x = run_block(tape, stage[0], x, shapes);
        x = run_block(tape, stage[1], x, shapes);
        out.stages.push_back(x);
    }
    return out;
}

template <typename T>
DecoderOutput<T> Model<T>::decode(Tape<T>& tape, const EncoderFeatures<T>& enc,
                                  const Var<T>& bottleneck_in, bool is2d,
                                  const Var<T>& decoder_end_prior, int task_id,
                                  std::vector<std::pair<std::string, Shape>>* shapes) {
    if (enc.stages.size() != 6) throw ShapeError("decode: expected 6 encoder stages");
    DecoderOutput<T> out;
    std::vector<Var<T>> logits_coarse_first;
    Var<T> x = bottleneck_in;
    for (size_t i = 0; i < dec_.size(); ++i) {
        const int stage = 5 - static_cast<int>(i);  // resolution being recovered
        const DecStage& d = dec_[i];
        Var<T> pre_up = x;
        Var<T> up = ops::conv_transpose3d(tape, x, d.up.w, d.up.b, d.up.stride, is2d);
        if (shapes) shapes->emplace_back(d.up.name, up->value.shape());
        Var<T> cat = ops::concat_channels(tape, up, enc.stages[static_cast<size_t>(stage - 1)]);
        x = run_block(tape, d.b0, cat, shapes);
        x = run_block(tape, d.b1, x, shapes);
        out.features.push_back(x);

        const int head_idx = stage - 1;
        if (head_idx >= supervised_scales) continue;
        Var<T> head_in = x;
        if (head_idx == 0 && decoder_end_prior) {
            const Shape& hs = x->value.shape();
            Var<T> prior = ops::interp_linear(tape, decoder_end_prior, {hs[2], hs[3], hs[4]});
            head_in = ops::concat_channels(tape, x, prior);
        }
        const HeadParams<T>& hp = heads_[static_cast<size_t>(head_idx)];
        ops::ConvGeom unit;
        Var<T> lg = ops::conv3d(tape, head_in, hp.w, hp.b, unit);
        if (lora_ && task_id >= 0 && lora_->task_active(task_id)) {
            const ResidualHead<T>& rh = lora_->residual_head(head_idx);
            Var<T> rup = ops::conv_transpose3d(tape, pre_up, rh.up_w, rh.up_b, rh.stride, is2d);
            Var<T> rlg = ops::conv3d(tape, rup, rh.head_w, rh.head_b, unit);
            lg = ops::add(tape, lg, rlg);
        }
        if (shapes) shapes->emplace_back(hp.name, lg->value.shape());
        logits_coarse_first.push_back(lg);
    }
    std::reverse(out.features.begin(), out.features.end());
    out.logits.assign(logits_coarse_first.rbegin(), logits_coarse_first.rend());
    return out;
}

template <typename T>
ForwardResult<T> Model<T>::forward(Tape<T>& tape, const Tensor<T>& images, int task_id,
                                   int modal_id, int select_task_id) {
    const ModalityDescriptor& mod = registry_.modality(modal_id);
    const TaskDescriptor& task = registry_.task(task_id);
    if (task.modal_id != modal_id)
        throw DataError("forward: task '" + task.name + "' belongs to modality " +
                        std::to_string(task.modal_id) + ", batch says " + std::to_string(modal_id));
    if (images.rank() != 5) throw ShapeError("forward: images must be [B,C,D,H,W]");
    if (images.dim(1) != mod.channel_count)
        throw DataError("forward: channel count " + std::to_string(images.dim(1)) +
                        " does not match modality '" + mod.name + "'");
    const bool is2d = mod.dimensionality == Dimensionality::k2d;
    const int fuse_id = select_task_id >= 0 ? select_task_id : task_id;

    ForwardResult<T> res;
    Var<T> input = make_var(images, false);
    Var<T> x = input;
    if (wiring_.modal_site == InjectionSite::encoder_entry) {
        Var<T> prior =
            modal_prior(tape, modal_id, {images.dim(2), images.dim(3), images.dim(4)}, is2d);
        x = ops::add_broadcast_prior(tape, x, prior);
    }
    res.encoder_input = x;

    EncoderFeatures<T> enc = encode(tape, x, is2d, &res.shapes);
    Var<T> F = enc.bottleneck();
    if (wiring_.modal_site == InjectionSite::bottleneck) {
        const Shape& fs = F->value.shape();
        Var<T> prior = modal_prior(tape, modal_id, {fs[2], fs[3], fs[4]}, is2d);
        F = ops::add_broadcast_prior(tape, F, prior);
    }

    Var<T> bottleneck_in = F;
    Var<T> decoder_end_prior;
    FuseOut fo = fuse_apply(tape, F, fuse_id);
    res.task_prior = fo.at_feature_dims;
    res.task_prior_uni = fo.at_universal_dims;
    if (wiring_.task_site == InjectionSite::bottleneck)
        bottleneck_in = ops::concat_channels(tape, F, fo.at_feature_dims);
    else
        decoder_end_prior = fo.at_feature_dims;

    DecoderOutput<T> dec = decode(tape, enc, bottleneck_in, is2d, decoder_end_prior, task_id,
                                  &res.shapes);
    res.logits = std::move(dec.logits);
    return res;
}

template <typename T>
std::vector<AdapterSite> Model<T>::adapter_sites() const {
    std::vector<AdapterSite> sites;
    auto add = [&](const ConvBlockParams<T>& b) {
        const Shape& ws = b.w->value.shape();
        sites.push_back({b.name, ws[1], ws[0], config_.kernel, b.stride});
    };
    add(stage1_shared_);  // stems excluded
    for (const auto& stage : enc_) {
        add(stage[0]);
        add(stage[1]);
    }
    for (const auto& d : dec_) {
        add(d.b0);
        add(d.b1);
    }
    return sites;
}

template <typename T>
std::vector<ResidualSite> Model<T>::residual_sites() const {
    std::vector<ResidualSite> sites;
    const auto& w = config_.stage_widths;
    for (int h = 0; h < supervised_scales; ++h) {
        ResidualSite rs;
        rs.head_index = h;
        rs.cin = w[static_cast<size_t>(h + 1)];
        rs.cmid = w[static_cast<size_t>(h)];
        rs.cout = registry_.max_class_count();
        rs.stride = config_.stage_strides[static_cast<size_t>(h + 1)];
        sites.push_back(rs);
    }
    return sites;
}

template <typename T>
std::vector<std::string> Model<T>::prompt_param_names() const {
    std::vector<std::string> names;
    for (const auto& [name, v] : params_)
        if (name.rfind("prompt.", 0) == 0) names.push_back(name);
    return names;
}

template class Model<float>;
template class Model<double>;

}  // namespace pseg
