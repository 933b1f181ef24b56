// SPDX-License-Identifier: Apache-2.0

#include "mckd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mckd {

namespace {

double evaluate(const LossFn& f, const std::function<void(Tape&)>& configure) {
    Tape tape;
    if (configure) configure(tape);
    return f(tape).item();
}

}  // namespace

GradCheckResult grad_check(const LossFn& f, std::span<Tensor* const> params, double h,
                           const std::function<void(Tape&)>& configure) {
    GradCheckResult result;
    for (Tensor* p : params) p->zero_grad();
    {
        Tape tape;
        if (configure) configure(tape);
        Var loss = f(tape);
        tape.backward(loss);
        result.min_kink_distance = tape.min_kink_distance();
    }
    result.min_nonzero_grad = std::numeric_limits<double>::infinity();
    for (Tensor* p : params) {
        for (double g : p->grad())
            if (g != 0.0) result.min_nonzero_grad = std::min(result.min_nonzero_grad, std::abs(g));
    }
    for (Tensor* p : params) {
        std::vector<double> analytic(p->grad().begin(), p->grad().end());
        auto data = p->data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = evaluate(f, configure);
            data[i] = saved - h;
            const double down = evaluate(f, configure);
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err =
                std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
            result.max_rel_error = std::max(result.max_rel_error, err);
        }
    }
    return result;
}

}  // namespace mckd
