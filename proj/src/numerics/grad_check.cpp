#include "apa/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "apa/errors.hpp"

namespace apa::num {

template <typename T>
double grad_check(const ScalarFn<T>& f, const Tensor<T>& x, double h, std::span<const std::size_t> coords) {
  if (!(h >= 1e-5 && h <= 1e-3)) throw ContractError("grad_check: step h must lie in [1e-5, 1e-3]");

  auto probe = x.detach();
  probe.set_requires_grad(true);
  auto out = f(probe);
  if (out.numel() != 1) throw ContractError("grad_check: f must return a scalar, got " + shape_str(out.shape()));
  out.backward();
  std::vector<T> analytic(probe.numel(), T(0));
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  std::vector<std::size_t> indices(coords.begin(), coords.end());
  if (indices.empty()) {
    indices.resize(probe.numel());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  }

  NoGradGuard no_grad;
  auto shifted = x.detach();
  auto values = shifted.mutable_data();
  double worst = 0.0;
  for (std::size_t i : indices) {
    if (i >= values.size()) throw ContractError("grad_check: coordinate out of range");
    const T saved = values[i];
    values[i] = static_cast<T>(saved + h);
    const double up = static_cast<double>(f(shifted).item());
    values[i] = static_cast<T>(saved - h);
    const double down = static_cast<double>(f(shifted).item());
    values[i] = saved;
    // Divide by the step actually realized in T to cancel representation error.
    const double realized = static_cast<double>(static_cast<T>(saved + h)) -
                            static_cast<double>(static_cast<T>(saved - h));
    const double numeric = (up - down) / realized;
    const double a = static_cast<double>(analytic[i]);
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

template double grad_check<float>(const ScalarFn<float>&, const Tensor<float>&, double, std::span<const std::size_t>);
template double grad_check<double>(const ScalarFn<double>&, const Tensor<double>&, double,
                                   std::span<const std::size_t>);

}  // namespace apa::num
