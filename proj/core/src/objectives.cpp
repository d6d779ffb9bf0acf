#include "pseg/objectives.hpp"

#include <cmath>
#include <sstream>

namespace pseg {

std::vector<double> supervision_weights(int scales) {
    if (scales < 1) throw ArgumentError("supervision_weights: need at least one scale");
    std::vector<double> w(static_cast<size_t>(scales));
    double sum = 0;
    for (int s = 0; s < scales; ++s) {
        w[static_cast<size_t>(s)] = std::pow(2.0, -s);
        sum += w[static_cast<size_t>(s)];
    }
    for (auto& x : w) x /= sum;
    return w;
}

Tensor<uint8_t> downsample_labels_nearest(const Tensor<uint8_t>& labels,
                                          std::array<int64_t, 3> out_dhw) {
    if (labels.rank() != 4) throw ShapeError("downsample_labels: labels must be [B,D,H,W]");
    const int64_t B = labels.dim(0), D = labels.dim(1), H = labels.dim(2), W = labels.dim(3);
    const auto [Do, Ho, Wo] = out_dhw;
    Tensor<uint8_t> out(Shape{B, Do, Ho, Wo});
    auto src_idx = [](int64_t o, int64_t in, int64_t outn) {
        const double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                         static_cast<double>(outn);
        int64_t i = static_cast<int64_t>(std::floor(s));
        return std::min(std::max<int64_t>(i, 0), in - 1);
    };
    for (int64_t b = 0; b < B; ++b)
        for (int64_t d = 0; d < Do; ++d) {
            const int64_t sd = src_idx(d, D, Do);
            for (int64_t h = 0; h < Ho; ++h) {
                const int64_t sh = src_idx(h, H, Ho);
                for (int64_t w = 0; w < Wo; ++w) {
                    const int64_t sw = src_idx(w, W, Wo);
                    out[((b * Do + d) * Ho + h) * Wo + w] = labels[((b * D + sd) * H + sh) * W + sw];
                }
            }
        }
    return out;
}

template <typename T>
std::pair<Var<T>, LossReport> deep_supervised_loss(Tape<T>& tape, const std::vector<Var<T>>& logits,
                                                   const Tensor<uint8_t>& labels, int class_count) {
    if (logits.empty()) throw ArgumentError("deep_supervised_loss: no logits");
    const Shape& fs = logits[0]->value.shape();
    if (labels.dim(1) != fs[2] || labels.dim(2) != fs[3] || labels.dim(3) != fs[4])
        throw ShapeError("deep_supervised_loss: finest logits must match label dims");

    LossReport report;
    report.weights = supervision_weights(static_cast<int>(logits.size()));
    std::vector<Var<T>> terms;
    std::vector<double> coeffs;
    for (size_t s = 0; s < logits.size(); ++s) {
        const Shape& ls = logits[s]->value.shape();
        Tensor<uint8_t> lab =
            (s == 0) ? labels : downsample_labels_nearest(labels, {ls[2], ls[3], ls[4]});
        auto [dice, ce] = ops::masked_seg_loss(tape, logits[s], lab, class_count, kDiceSmooth);
        report.dice.push_back(static_cast<double>(dice->value[0]));
        report.ce.push_back(static_cast<double>(ce->value[0]));
        terms.push_back(dice);
        terms.push_back(ce);
        coeffs.push_back(report.weights[s]);
        coeffs.push_back(report.weights[s]);
    }
    Var<T> total = ops::weighted_sum(tape, terms, coeffs);
    report.total = static_cast<double>(total->value[0]);
    return {total, report};
}

template std::pair<Var<float>, LossReport> deep_supervised_loss<float>(Tape<float>&,
                                                                       const std::vector<Var<float>>&,
                                                                       const Tensor<uint8_t>&, int);
template std::pair<Var<double>, LossReport> deep_supervised_loss<double>(
    Tape<double>&, const std::vector<Var<double>>&, const Tensor<uint8_t>&, int);

std::vector<double> dice_score_per_class(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt,
                                         int class_count) {
    if (!shape_eq(pred.shape(), gt.shape()))
        throw ShapeError("dice_score: prediction and ground truth shapes differ");
    if (class_count < 2) throw ArgumentError("dice_score: class_count must be >= 2");
    std::vector<int64_t> p(static_cast<size_t>(class_count), 0),
        g(static_cast<size_t>(class_count), 0), inter(static_cast<size_t>(class_count), 0);
    for (int64_t i = 0; i < pred.size(); ++i) {
        const uint8_t pv = pred[i], gv = gt[i];
        if (pv < class_count) ++p[pv];
        if (gv < class_count) ++g[gv];
        if (pv == gv && pv < class_count) ++inter[pv];
    }
    std::vector<double> out;
    for (int c = 1; c < class_count; ++c) {
        const int64_t denom = p[static_cast<size_t>(c)] + g[static_cast<size_t>(c)];
        out.push_back(denom == 0 ? 100.0
                                 : 200.0 * static_cast<double>(inter[static_cast<size_t>(c)]) /
                                       static_cast<double>(denom));
    }
    return out;
}

std::pair<double, double> inverse_frequency_weights(int64_t n0, int64_t n1) {
    if (n0 < 1 || n1 < 1) throw ArgumentError("inverse_frequency_weights: counts must be >= 1");
    const double i0 = 1.0 / static_cast<double>(n0), i1 = 1.0 / static_cast<double>(n1);
    return {i0 / (i0 + i1), i1 / (i0 + i1)};
}

double weighted_dice(const std::vector<double>& normal_dice, const std::vector<double>& lesion_dice) {
    const auto [w0, w1] = inverse_frequency_weights(static_cast<int64_t>(normal_dice.size()),
                                                    static_cast<int64_t>(lesion_dice.size()));
    auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    return w0 * mean(normal_dice) + w1 * mean(lesion_dice);
}

MetricReport aggregate(std::vector<DatasetMetric> rows) {
    if (rows.empty()) throw ArgumentError("aggregate: no datasets");
    MetricReport rep;
    rep.datasets = std::move(rows);
    double s3 = 0, s2 = 0, sall = 0;
    int n3 = 0, n2 = 0;
    for (const auto& d : rep.datasets) {
        sall += d.mean_dice;
        if (d.dim == Dimensionality::k3d) {
            s3 += d.mean_dice;
            ++n3;
        } else {
            s2 += d.mean_dice;
            ++n2;
        }
    }
    if (n3 > 0) rep.mean3d = s3 / n3;
    if (n2 > 0) rep.mean2d = s2 / n2;
    rep.mean_overall = sall / static_cast<double>(rep.datasets.size());
    return rep;
}

std::string MetricReport::to_csv() const {
    std::ostringstream h, v;
    v.precision(10);
    for (const auto& d : datasets) {
        h << d.name << ",";
        v << d.mean_dice << ",";
    }
    h << "3d_mean,2d_mean,mean";
    if (mean3d) v << *mean3d; else v << "absent";
    v << ",";
    if (mean2d) v << *mean2d; else v << "absent";
    v << "," << mean_overall;
    return h.str() + "\n" + v.str() + "\n";
}

}  // namespace pseg
