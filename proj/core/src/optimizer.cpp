#include "pseg/optimizer.hpp"

#include <cmath>

namespace pseg {

template <typename T>
void Sgd<T>::step(std::map<std::string, Var<T>>& params, double lr) {
    double sq = 0;
    for (auto& [name, p] : params) {
        if (!p->requires_grad || !p->has_grad()) continue;
        for (int64_t i = 0; i < p->grad.size(); ++i) {
            const double g = p->grad[i];
            sq += g * g;
        }
    }
    last_grad_norm_ = std::sqrt(sq);
    const double clip = (cfg_.clip_norm > 0 && last_grad_norm_ > cfg_.clip_norm)
                            ? cfg_.clip_norm / last_grad_norm_
                            : 1.0;

    for (auto& [name, p] : params) {
        if (!p->requires_grad || !p->has_grad()) continue;
        auto [it, fresh] = velocity_.try_emplace(name, p->value.shape());
        Tensor<T>& v = it->second;
        for (int64_t i = 0; i < p->value.size(); ++i) {
            double g = static_cast<double>(p->grad[i]) * clip;
            g += cfg_.weight_decay * static_cast<double>(p->value[i]);
            double vel = cfg_.momentum * static_cast<double>(v[i]) + g;
            v[i] = static_cast<T>(vel);
            const double update = cfg_.nesterov ? g + cfg_.momentum * vel : vel;
            p->value[i] -= static_cast<T>(lr * update);
        }
    }
}

template <typename T>
void Sgd<T>::zero_grad(std::map<std::string, Var<T>>& params) {
    for (auto& [name, p] : params) p->zero_grad();
}

template class Sgd<float>;
template class Sgd<double>;

}  // namespace pseg
