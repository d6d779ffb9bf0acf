#include "pseg/trainer.hpp"

#include <cmath>
#include <sstream>

namespace pseg {

double lr_at_epoch(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw ArgumentError("lr_at_epoch: epoch must be >= 0");
    const double frac = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(cfg.max_epochs));
    return cfg.initial_lr * std::pow(1.0 - frac, cfg.lr_power);
}

std::string trace_to_csv(const std::vector<LossTraceRow>& trace) {
    std::ostringstream os;
    os << "iteration,epoch,dataset,task_id,loss,lr\n";
    char buf[128];
    for (const auto& r : trace) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%d,%d,%.9g,%.9g\n", r.iteration, r.epoch, r.dataset,
                      r.task_id, r.loss, r.lr);
        os << buf;
    }
    return os.str();
}

void ensure_finite_loss(double loss, int iteration) {
    if (!std::isfinite(loss))
        throw DivergenceError("non-finite loss at iteration " + std::to_string(iteration));
}

template <typename T>
Trainer<T>::Trainer(Model<T>& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg),
      opt_(SgdConfig{cfg.momentum, true, cfg.weight_decay, cfg.clip_norm}) {}

template <typename T>
double Trainer<T>::train_iteration(const Dataset& ds, Rng& sampler, double lr,
                                   std::map<std::string, Var<T>>& updatable) {
    const bool flat = ds.dim == Dimensionality::k2d;
    const auto& mc = model_.config();
    const std::array<int64_t, 3> patch =
        flat ? std::array<int64_t, 3>{1, mc.patch2d[0], mc.patch2d[1]} : mc.patch3d;
    const int batch = flat ? cfg_.batch_2d : cfg_.batch_3d;
    AugmentConfig aug{cfg_.augment_flips, cfg_.augment_jitter};
    const bool crop = ds.dims != patch;
    SampleBatch sb = sample_batch(ds, batch, sampler, crop ? std::optional(patch) : std::nullopt,
                                  (cfg_.augment_flips || cfg_.augment_jitter > 0) ? &aug : nullptr);

    Tape<T> tape;
    Tensor<T> images;
    if constexpr (std::is_same_v<T, float>) images = std::move(sb.images);
    else images = sb.images.template cast<T>();
    ForwardResult<T> fwd = model_.forward(tape, images, sb.task_id, sb.modal_id);
    auto [loss, report] = deep_supervised_loss(tape, fwd.logits, sb.labels, ds.class_count);
    ensure_finite_loss(report.total, iteration_);

    opt_.zero_grad(model_.params());
    opt_.zero_grad(updatable);
    tape.backward(loss);
    // Freeze integrity: a frozen array must never accumulate gradient.
    for (const auto& [name, p] : model_.params())
        if (!p->requires_grad && p->has_grad())
            throw Error("gradient detected on frozen parameter " + name);
    opt_.step(updatable, lr);
    tape.clear();
    return report.total;
}

template <typename T>
TrainResult Trainer<T>::run(const std::vector<const Dataset*>& datasets,
                            std::map<std::string, Var<T>>* updatable,
                            const std::function<void(int, int)>& after_iteration) {
    if (datasets.empty()) throw ArgumentError("train: need at least one dataset");
    std::map<std::string, Var<T>>& upd = updatable ? *updatable : model_.params();

    Rng master(cfg_.seed);
    std::vector<Rng> samplers;
    for (size_t i = 0; i < datasets.size(); ++i)
        samplers.push_back(master.substream("sampler", static_cast<uint64_t>(i)));

    TrainResult res;
    iteration_ = 0;
    for (int epoch = 0; epoch < cfg_.max_epochs; ++epoch) {
        const double lr = lr_at_epoch(epoch, cfg_);
        // iteration-level round robin: every dataset gets its quota, order
        // shuffled per epoch
        std::vector<int> slots;
        for (size_t d = 0; d < datasets.size(); ++d)
            for (int i = 0; i < cfg_.iterations_per_dataset; ++i) slots.push_back(static_cast<int>(d));
        Rng sched = master.substream("schedule", static_cast<uint64_t>(epoch));
        for (size_t i = slots.size(); i > 1; --i)
            std::swap(slots[i - 1], slots[static_cast<size_t>(sched.uniform_int(0, static_cast<int64_t>(i) - 1))]);

        for (int d : slots) {
            const Dataset& ds = *datasets[static_cast<size_t>(d)];
            const double loss = train_iteration(ds, samplers[static_cast<size_t>(d)], lr, upd);
            res.trace.push_back({iteration_, epoch, d, ds.task_id, loss, lr});
            ++iteration_;
            if (after_iteration) after_iteration(iteration_, epoch);
        }
    }
    res.iterations = iteration_;
    return res;
}

template class Trainer<float>;
template class Trainer<double>;

namespace {

template <typename T>
int find_upstream_modality(const Registry& up, const ModalityDescriptor& m, ModalPromptInit init) {
    for (const auto& um : up.modalities())
        if (um.name == m.name) return um.modal_id;
    if (init == ModalPromptInit::copy) {
        for (const auto& um : up.modalities())
            if (um.channel_count == m.channel_count && um.dimensionality == m.dimensionality)
                return um.modal_id;
    }
    return -1;
}

}  // namespace

template <typename T>
std::unique_ptr<Model<T>> make_finetune_model(const Model<T>& upstream, const Registry& new_registry,
                                              FinetuneOptions opts,
                                              std::vector<std::string>* transfer_log) {
    auto log = [&](const std::string& line) {
        if (transfer_log) transfer_log->push_back(line);
    };
    auto model = std::make_unique<Model<T>>(upstream.config(), new_registry, Rng(opts.init_seed));
    const auto& up_params = upstream.params();
    for (auto& [name, p] : model->params()) {
        if (name.rfind("head.", 0) == 0) {
            log("reinit " + name);
            continue;  // segmentation heads start fresh
        }
        if (name.rfind("prompt.modal.", 0) == 0) {
            const int mid = std::stoi(name.substr(std::string("prompt.modal.").size()));
            const int src = find_upstream_modality<T>(upstream.registry(),
                                                      new_registry.modality(mid), opts.modal_init);
            if (src >= 0) {
                const auto& sp = up_params.at("prompt.modal." + std::to_string(src));
                if (shape_eq(sp->value.shape(), p->value.shape())) {
                    p->value = sp->value;
                    log("copy prompt.modal." + std::to_string(src) + " -> " + name);
                }
            } else {
                log("fresh " + name);
            }
            p->requires_grad = false;  // frozen for the whole fine-tune
            continue;
        }
        auto it = up_params.find(name);
        if (it != up_params.end() && shape_eq(it->second->value.shape(), p->value.shape())) {
            p->value = it->second->value;
            log("transfer " + name);
        } else {
            log("reinit " + name);
        }
    }
    return model;
}

template std::unique_ptr<Model<float>> make_finetune_model<float>(const Model<float>&,
                                                                  const Registry&, FinetuneOptions,
                                                                  std::vector<std::string>*);
template std::unique_ptr<Model<double>> make_finetune_model<double>(const Model<double>&,
                                                                    const Registry&, FinetuneOptions,
                                                                    std::vector<std::string>*);

}  // namespace pseg
