#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "pseg/model.hpp"
#include "pseg/objectives.hpp"
#include "pseg/optimizer.hpp"
#include "pseg/phantom.hpp"

namespace pseg {

struct TrainConfig {
    int max_epochs = 1000;
    int iterations_per_dataset = 50;  // per dataset per epoch
    double initial_lr = 0.01;
    double lr_power = 0.9;
    double momentum = 0.99;
    double weight_decay = 3e-5;
    double clip_norm = 12.0;
    int batch_3d = 2;
    int batch_2d = 12;
    uint64_t seed = 1;
    bool augment_flips = false;
    double augment_jitter = 0.0;
};

// Polynomial decay, constant within an epoch: lr0 * (1 - e/E)^power.
double lr_at_epoch(int epoch, const TrainConfig& cfg);

struct LossTraceRow {
    int iteration = 0;
    int epoch = 0;
    int dataset = 0;
    int task_id = 0;
    double loss = 0;
    double lr = 0;
};

struct TrainResult {
    std::vector<LossTraceRow> trace;
    int iterations = 0;
};

std::string trace_to_csv(const std::vector<LossTraceRow>& trace);

void ensure_finite_loss(double loss, int iteration);

// Universal joint trainer: per epoch every dataset receives an equal
// iteration quota and the (dataset, slot) order is reshuffled; every
// iteration is single-dataset. Updates flow into `updatable` (defaults to
// the model's own parameters so LoRA extensions can pass theirs instead).
template <typename T>
class Trainer {
public:
    Trainer(Model<T>& model, const TrainConfig& cfg);

    TrainResult run(const std::vector<const Dataset*>& datasets,
                    std::map<std::string, Var<T>>* updatable = nullptr,
                    const std::function<void(int iteration, int epoch)>& after_iteration = {});

    // One optimizer step on one batch; returns the loss.
    double train_iteration(const Dataset& ds, Rng& sampler, double lr,
                           std::map<std::string, Var<T>>& updatable);

    Sgd<T>& optimizer() { return opt_; }
    const TrainConfig& config() const { return cfg_; }

private:
    Model<T>& model_;
    TrainConfig cfg_;
    Sgd<T> opt_;
    int iteration_ = 0;
};

// Transfer-learning setup: fresh model for the downstream registry with the
// upstream encoder-decoder, MMap pathway and FUSE stack copied in where the
// shapes match. Segmentation heads stay freshly initialized and downstream
// modal prompts are frozen (copied from the upstream modality when one
// matches, otherwise per `modal_init`).
enum class ModalPromptInit { fresh, copy };

struct FinetuneOptions {
    ModalPromptInit modal_init = ModalPromptInit::copy;
    uint64_t init_seed = 7;
};

template <typename T>
std::unique_ptr<Model<T>> make_finetune_model(const Model<T>& upstream, const Registry& new_registry,
                                              FinetuneOptions opts,
                                              std::vector<std::string>* transfer_log = nullptr);

}  // namespace pseg
