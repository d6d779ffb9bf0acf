#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pseg/autograd.hpp"
#include "pseg/ops.hpp"
#include "pseg/registry.hpp"

namespace pseg {

inline constexpr double kDiceSmooth = 1e-5;

struct LossReport {
    double total = 0;
    std::vector<double> dice;     // per supervised scale, finest first
    std::vector<double> ce;       // per supervised scale, finest first
    std::vector<double> weights;  // positive, sum to 1
};

// Geometrically decaying deep-supervision weights (finest first), normalized.
std::vector<double> supervision_weights(int scales);

Tensor<uint8_t> downsample_labels_nearest(const Tensor<uint8_t>& labels,
                                          std::array<int64_t, 3> out_dhw);

// Deep-supervised masked loss: per scale, softmax/Dice/CE over logit channels
// [0, class_count) with nearest-downsampled labels; channels beyond the task's
// class count contribute nothing. total = sum_s w_s (dice_s + ce_s).
template <typename T>
std::pair<Var<T>, LossReport> deep_supervised_loss(Tape<T>& tape, const std::vector<Var<T>>& logits,
                                                   const Tensor<uint8_t>& labels, int class_count);

// Hard-label Dice (%) per foreground class; empty-vs-empty scores 100.
std::vector<double> dice_score_per_class(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt,
                                         int class_count);

// Inverse-frequency weights for the normal/lesion split.
std::pair<double, double> inverse_frequency_weights(int64_t n0, int64_t n1);

// WDice = w0 * mean(normal) + w1 * mean(lesion) with inverse-frequency weights.
double weighted_dice(const std::vector<double>& normal_dice, const std::vector<double>& lesion_dice);

struct DatasetMetric {
    std::string name;
    Dimensionality dim = Dimensionality::k3d;
    std::vector<double> per_class_dice;  // %
    double mean_dice = 0;                // mean over foreground classes
    std::optional<double> wdice;
};

struct MetricReport {
    std::vector<DatasetMetric> datasets;
    std::optional<double> mean3d;  // absent (flagged) when no 3d dataset
    std::optional<double> mean2d;
    double mean_overall = 0;  // unweighted mean over all datasets

    std::string to_csv() const;  // one header row + one value row
};

MetricReport aggregate(std::vector<DatasetMetric> rows);

}  // namespace pseg
