#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg {

// Reverse-mode autodiff over a recorded tape. Values are computed eagerly;
// each op pushes one closure that scatters the output gradient back into its
// inputs. Parameters are long-lived nodes; activations live as long as the
// tape that recorded them.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad = Tensor<T>(value.shape());
    }
    void zero_grad() { grad = Tensor<T>(); }
    bool has_grad() const { return !grad.empty(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> make_param(Tensor<T> value) {
    return make_var(std::move(value), true);
}

template <typename T>
class Tape {
public:
    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    void push(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

    // Seeds d(loss)/d(loss) = 1 and runs the tape in reverse.
    void backward(const Var<T>& loss) {
        if (loss->value.size() != 1) throw ShapeError("backward: loss must be a scalar");
        loss->ensure_grad();
        loss->grad[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    void clear() { steps_.clear(); }
    size_t size() const { return steps_.size(); }

private:
    std::vector<std::function<void()>> steps_;
    bool recording_ = true;
};

// RAII guard that disables recording (inference mode).
template <typename T>
class NoGradGuard {
public:
    explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) {
        tape_.set_recording(false);
    }
    ~NoGradGuard() { tape_.set_recording(prev_); }

private:
    Tape<T>& tape_;
    bool prev_;
};

}  // namespace pseg
