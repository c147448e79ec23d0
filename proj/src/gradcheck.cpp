#include "edje/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "edje/errors.hpp"

namespace edje {

namespace {

double evaluate(const LossFn& loss) {
  const double v = scalar(loss(nullptr));
  if (!std::isfinite(v)) throw NumericError("grad_check: loss evaluated to a non-finite value");
  return v;
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss, std::span<Parameter* const> params, double step) {
  Tape tape;
  // Bind every parameter up front so unused ones report a zero gradient.
  for (Parameter* p : params) tape.param(*p);
  Var out = loss(&tape);
  if (!std::isfinite(scalar(out))) {
    throw NumericError("grad_check: loss evaluated to a non-finite value");
  }
  tape.backward(out);

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const Tensor* analytic = tape.grad(p);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double original = p.value[i];
      p.value[i] = original + step;
      const double up = evaluate(loss);
      p.value[i] = original - step;
      const double down = evaluate(loss);
      p.value[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic ? (*analytic)[i] : 0.0;
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_parameter = pi;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace edje
