#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmvq/autodiff.hpp"
#include "mmvq/errors.hpp"

namespace mmvq::ad {

// A named trainable tensor with optimizer state living outside any tape.
template <typename T>
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // accumulated between zero_grad calls
    std::vector<T> m, v;  // Adam moments

    Parameter() = default;
    Parameter(std::string n, Shape s, std::vector<T> val)
        : name(std::move(n)), shape(std::move(s)), value(std::move(val)) {
        if (numel(shape) != static_cast<int64_t>(value.size()))
            throw ValidationError("Parameter " + name + ": shape/data mismatch");
        m.assign(value.size(), T(0));
        v.assign(value.size(), T(0));
    }

    void zero_grad() { grad.assign(value.size(), T(0)); }
    bool has_grad() const { return !grad.empty(); }
    int64_t size() const { return static_cast<int64_t>(value.size()); }
};

// Put a parameter on the tape as a leaf; call collect_grad after backward to
// pull the node gradient back into the parameter accumulator.
template <typename T>
struct BoundParam {
    Var<T> var;
    Parameter<T>* param;

    void collect_grad() {
        if (param->grad.empty()) param->zero_grad();
        const auto& g = var.tape->node(var.id).grad;
        if (g.empty()) return;
        for (size_t i = 0; i < g.size(); ++i) param->grad[i] += g[i];
    }
};

template <typename T>
BoundParam<T> bind(Tape<T>& tape, Parameter<T>& p) {
    return BoundParam<T>{tape.leaf(p.shape, p.value, true), &p};
}

// Standard Adam with bias correction. Steps are counted across calls.
template <typename T>
struct Adam {
    T lr;
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    int64_t step_count = 0;

    explicit Adam(T learning_rate) : lr(learning_rate) {}

    void step(std::vector<Parameter<T>*>& params) {
        ++step_count;
        const T bc1 = T(1) - std::pow(beta1, static_cast<T>(step_count));
        const T bc2 = T(1) - std::pow(beta2, static_cast<T>(step_count));
        for (Parameter<T>* p : params) {
            if (!p->has_grad())
                throw ValidationError("adam_step: parameter '" + p->name + "' has no gradient");
            for (size_t i = 0; i < p->value.size(); ++i) {
                const T g = p->grad[i];
                p->m[i] = beta1 * p->m[i] + (T(1) - beta1) * g;
                p->v[i] = beta2 * p->v[i] + (T(1) - beta2) * g * g;
                const T mhat = p->m[i] / bc1;
                const T vhat = p->v[i] / bc2;
                p->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

// ---- parameter initialization ----

// Uniform in [-bound, bound], bound = sqrt(1/fan_in): the usual default for
// conv/linear layers.
template <typename T>
std::vector<T> uniform_fan_in(std::mt19937_64& rng, int64_t n, int64_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> out(static_cast<size_t>(n));
    for (auto& x : out) x = static_cast<T>(dist(rng));
    return out;
}

template <typename T>
std::vector<T> uniform_range(std::mt19937_64& rng, int64_t n, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> out(static_cast<size_t>(n));
    for (auto& x : out) x = static_cast<T>(dist(rng));
    return out;
}

}  // namespace mmvq::ad
