// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mckd/tensor.hpp"

namespace mckd {

/// Builds a scalar loss on the given tape, binding parameters with
/// `tape.param(...)`. Must be deterministic.
using LossFn = std::function<Var(Tape&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    /// Smallest distance to a relu/abs kink seen during the analytic pass.
    double min_kink_distance = 0.0;
    /// Smallest nonzero |analytic| element. Central differences cannot resolve
    /// values near their rounding floor, so callers may redraw such points.
    double min_nonzero_grad = 0.0;
};

/// Compares the tape gradient of `f` with central finite differences over
/// every element of every tensor in `params`. The per-element error is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
///
/// `configure` runs on each fresh tape before `f` (used to inject faults).
GradCheckResult grad_check(const LossFn& f, std::span<Tensor* const> params, double h = 1e-5,
                           const std::function<void(Tape&)>& configure = {});

}  // namespace mckd
