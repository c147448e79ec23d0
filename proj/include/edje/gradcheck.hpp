#pragma once

#include <functional>
#include <span>
#include <string>

#include "edje/autograd.hpp"

namespace edje {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_parameter = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Relative errors use max(|analytic|, |numeric|, kGradCheckFloor) as the
/// denominator, so gradients far below the floor are compared absolutely.
inline constexpr double kGradCheckFloor = 1e-3;

/// Builds a one-element loss from the parameters, on `tape` when non-null.
using LossFn = std::function<Var(Tape* tape)>;

/// Compares reverse-mode gradients of `loss` against central finite
/// differences for every entry of every parameter. `f` must be
/// deterministic; a non-finite evaluation throws NumericError. Parameters
/// are perturbed in place and restored.
GradCheckReport grad_check(const LossFn& loss, std::span<Parameter* const> params,
                           double step = 1e-5);

}  // namespace edje
