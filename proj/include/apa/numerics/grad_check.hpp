#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "apa/numerics/tensor.hpp"

namespace apa::num {

template <typename T>
using ScalarFn = std::function<Tensor<T>(const Tensor<T>&)>;

// Compares the reverse-mode gradient of f at x with central differences.
// Returns max over checked coordinates of |analytic - numeric| / max(1, |analytic|).
// `coords` restricts the check to a subset of flat indices (all when empty).
// Throws ContractError if f does not return a single element or h is outside [1e-5, 1e-3].
template <typename T>
double grad_check(const ScalarFn<T>& f, const Tensor<T>& x, double h, std::span<const std::size_t> coords = {});

}  // namespace apa::num
