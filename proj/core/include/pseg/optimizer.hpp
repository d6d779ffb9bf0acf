#pragma once

#include <map>
#include <string>

#include "pseg/autograd.hpp"

namespace pseg {

struct SgdConfig {
    double momentum = 0.99;
    bool nesterov = true;
    double weight_decay = 3e-5;
    double clip_norm = 12.0;  // <= 0 disables clipping
};

// SGD with Nesterov momentum over a named parameter map. Frozen parameters
// (requires_grad == false) are skipped entirely; gradient clipping happens on
// the raw gradients before weight decay enters.
template <typename T>
class Sgd {
public:
    explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}

    void step(std::map<std::string, Var<T>>& params, double lr);
    void zero_grad(std::map<std::string, Var<T>>& params);
    double last_grad_norm() const { return last_grad_norm_; }

    std::map<std::string, Tensor<T>>& state() { return velocity_; }
    const std::map<std::string, Tensor<T>>& state() const { return velocity_; }
    const SgdConfig& config() const { return cfg_; }

private:
    SgdConfig cfg_;
    std::map<std::string, Tensor<T>> velocity_;
    double last_grad_norm_ = 0;
};

}  // namespace pseg
