#include "pseg/lora.hpp"

#include <cmath>

namespace pseg {

namespace {

template <typename T>
Tensor<T> he_normal(Shape shape, int64_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double stddev = std::sqrt(2.0 / (1.0 + 0.01 * 0.01)) / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

}  // namespace

template <typename T>
LoraExtension<T>::LoraExtension(Model<T>& base, LoraConfig cfg, std::vector<int> tasks_to_relearn,
                                Rng rng)
    : base_(base), cfg_(cfg) {
    if (cfg_.rank < 1) throw ConfigError("lora rank must be >= 1");
    if (tasks_to_relearn.empty()) throw ArgumentError("lora: tasks_to_relearn must be non-empty");
    for (int t : tasks_to_relearn) {
        base_.registry().task(t);  // throws for unknown tasks
        active_tasks_.insert(t);
    }

    // The base stays frozen for the whole extension lifetime.
    for (auto& [name, v] : base_.params()) {
        v->requires_grad = false;
        v->zero_grad();
    }

    Rng root = rng.substream("lora");
    auto regp = [&](const std::string& name, Tensor<T> init, bool trainable = true) {
        auto v = make_var(std::move(init), trainable);
        if (!params_.emplace(name, v).second) throw ConfigError("duplicate lora parameter " + name);
        return v;
    };

    for (const AdapterSite& site : base_.adapter_sites()) {
        LoraAdapter<T> ad;
        Rng r = root.substream(site.name);
        const int k = site.kernel;
        ad.down_w = regp("lora." + site.name + ".down.w",
                         he_normal<T>(Shape{cfg_.rank, site.cin, k, k, k}, site.cin * k * k * k, r));
        ad.up_w = regp("lora." + site.name + ".up.w", Tensor<T>(Shape{site.cout, cfg_.rank, 1, 1, 1}));
        ad.stride = site.stride;
        ad.scale = cfg_.scale();
        adapters_.emplace(site.name, std::move(ad));
    }

    for (const ResidualSite& site : base_.residual_sites()) {
        ResidualHead<T> rh;
        const auto tag = "res.h" + std::to_string(site.head_index);
        Rng r = root.substream(tag);
        const auto st = site.stride;
        rh.up_w = regp(tag + ".up.w", he_normal<T>(Shape{site.cin, site.cmid, st[0], st[1], st[2]},
                                                   site.cin * st[0] * st[1] * st[2], r));
        rh.up_b = regp(tag + ".up.b", Tensor<T>(Shape{site.cmid}));
        rh.head_w = regp(tag + ".head.w", Tensor<T>(Shape{site.cout, site.cmid, 1, 1, 1}));
        rh.head_b = regp(tag + ".head.b", Tensor<T>(Shape{site.cout}));
        rh.stride = st;
        heads_.push_back(std::move(rh));
    }

    base_.attach_lora(this);
}

template <typename T>
LoraExtension<T>::~LoraExtension() {
    base_.attach_lora(nullptr);
}

template <typename T>
const LoraAdapter<T>* LoraExtension<T>::adapter_for(const std::string& conv_name) const {
    auto it = adapters_.find(conv_name);
    return it == adapters_.end() ? nullptr : &it->second;
}

template <typename T>
const ResidualHead<T>& LoraExtension<T>::residual_head(int head_index) const {
    return heads_.at(static_cast<size_t>(head_index));
}

template <typename T>
int64_t LoraExtension<T>::trainable_param_count() const {
    int64_t n = 0;
    for (const auto& [name, v] : params_)
        if (v->requires_grad) n += v->value.size();
    return n;
}

template class LoraExtension<float>;
template class LoraExtension<double>;

}  // namespace pseg
