#pragma once

#include <array>
#include <utility>
#include <vector>

#include "pseg/autograd.hpp"
#include "pseg/tensor.hpp"

namespace pseg::ops {

using Dims3 = std::array<int64_t, 3>;
using Stride3 = std::array<int, 3>;

struct ConvGeom {
    Stride3 stride{1, 1, 1};
    Stride3 pad{0, 0, 0};
};

// 3d convolution, x [B,Ci,D,H,W], w [Co,Ci,kd,kh,kw], optional b [Co].
// When the input depth is 1 and kd > 1 the kernel falls back to its central
// depth slice with zero depth padding; the outer slices would only ever see
// zero padding, so values and gradients are unchanged by the collapse.
template <typename T>
Var<T> conv3d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b, ConvGeom geom);

// Transposed convolution with kernel == stride (exact upsampling).
// x [B,Ci,d,h,w], w [Ci,Co,kd,kh,kw], optional b [Co]. collapse_depth selects
// the central depth slice and keeps depth at 1 (pseudo-3d inputs).
template <typename T>
Var<T> conv_transpose3d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b,
                        Stride3 stride, bool collapse_depth);

template <typename T>
Var<T> instance_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                     double eps);

template <typename T>
Var<T> leaky_relu(Tape<T>& tape, const Var<T>& x, double negative_slope);

// Linear (bi/trilinear) resize with half-pixel mapping and edge clamping.
template <typename T>
Var<T> interp_linear(Tape<T>& tape, const Var<T>& x, Dims3 out_dhw);

template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

// Concatenates a batchless prompt [K,D,H,W] (broadcast over batch) with
// features [B,C,D,H,W] -> [B,K+C,D,H,W].
template <typename T>
Var<T> concat_prompt(Tape<T>& tape, const Var<T>& prompt, const Var<T>& x);

template <typename T>
Var<T> select_channel(Tape<T>& tape, const Var<T>& x, int64_t channel);

// x [B,C,D,H,W] + prior [1,D,H,W] broadcast over batch and channels.
template <typename T>
Var<T> add_broadcast_prior(Tape<T>& tape, const Var<T>& x, const Var<T>& prior);

// y = w x + b for vectors; w [out,in], x [in], b [out].
template <typename T>
Var<T> affine_map(Tape<T>& tape, const Var<T>& w, const Var<T>& x, const Var<T>& b);

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape shape);

// out = a + alpha * b, same shapes.
template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b, double alpha = 1.0);

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, double k);

// Weighted sum of scalar variables -> scalar.
template <typename T>
Var<T> weighted_sum(Tape<T>& tape, const std::vector<Var<T>>& xs, const std::vector<double>& coeffs);

// Soft Dice (foreground classes, batch-pooled) and cross entropy (all
// classes, voxel mean), both restricted to logit channels [0, class_count).
// logits [B,Cmax,D,H,W], labels [B,D,H,W]. Returns {dice, ce} scalars.
template <typename T>
std::pair<Var<T>, Var<T>> masked_seg_loss(Tape<T>& tape, const Var<T>& logits,
                                          const Tensor<uint8_t>& labels, int class_count,
                                          double smooth);

}  // namespace pseg::ops
