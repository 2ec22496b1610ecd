#pragma once

// Central finite-difference verification of analytic gradients.

#include <cmath>
#include <functional>
#include <vector>

#include "mmvq/autodiff.hpp"
#include "mmvq/optim.hpp"

namespace mmvq::ad {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Checks d(build)/dx at x0 against (f(x+eps) - f(x-eps)) / (2 eps) per
// coordinate. Returns the max relative error.
template <typename T>
double grad_check(const std::function<Var<T>(Tape<T>&, Var<T>)>& build, const Shape& shape,
                  const std::vector<T>& x0, T eps) {
    if (eps <= T(0)) throw ValidationError("grad_check: eps must be positive");
    Tape<T> tape;
    Var<T> x = tape.leaf(shape, x0, true);
    Var<T> loss = build(tape, x);
    tape.backward(loss);
    std::vector<T> analytic = tape.ensure_grad(x.id);

    auto eval = [&](const std::vector<T>& pt) -> double {
        Tape<T> t2;
        Var<T> x2 = t2.leaf(shape, pt, false);
        return static_cast<double>(build(t2, x2).value()[0]);
    };

    double max_err = 0.0;
    std::vector<T> pt = x0;
    for (size_t i = 0; i < x0.size(); ++i) {
        pt[i] = x0[i] + eps;
        const double fp = eval(pt);
        pt[i] = x0[i] - eps;
        const double fm = eval(pt);
        pt[i] = x0[i];
        const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
        max_err = std::max(max_err, rel_err(static_cast<double>(analytic[i]), numeric));
    }
    return max_err;
}

// Same check for a model with many parameters. `loss_value` must rebuild the
// loss from the current parameter values; `analytic` is the gradient already
// accumulated in each parameter.
template <typename T>
double grad_check_params(const std::function<double()>& loss_value, std::vector<Parameter<T>*> params, T eps) {
    if (eps <= T(0)) throw ValidationError("grad_check_params: eps must be positive");
    double max_err = 0.0;
    for (Parameter<T>* p : params) {
        for (size_t i = 0; i < p->value.size(); ++i) {
            const T saved = p->value[i];
            p->value[i] = saved + eps;
            const double fp = loss_value();
            p->value[i] = saved - eps;
            const double fm = loss_value();
            p->value[i] = saved;
            const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
            const double a = p->has_grad() ? static_cast<double>(p->grad[i]) : 0.0;
            max_err = std::max(max_err, rel_err(a, numeric));
        }
    }
    return max_err;
}

}  // namespace mmvq::ad
