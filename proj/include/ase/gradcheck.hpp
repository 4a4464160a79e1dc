#pragma once

// Central-difference gradient estimates, used as the independent oracle for
// reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <type_traits>

#include "ase/tensor.hpp"

namespace ase {

namespace detail {
template <typename S, typename R>
S as_scalar(const R& r) {
  if constexpr (std::is_same_v<R, Tensor<S>>) {
    return r.item();
  } else {
    return static_cast<S>(r);
  }
}
}  // namespace detail

/// (f(x + h e_i) - f(x - h e_i)) / 2h for every element i of x.
/// `f` maps a Tensor to a scalar (or to a one-element Tensor).
template <typename S, typename F>
Tensor<S> finite_diff_gradient(F&& f, const Tensor<S>& x, S h) {
  if (!(h > S(0))) throw ContractError("finite_diff_gradient: step must be positive");
  const MatrixX<S>& base = x.value();
  MatrixX<S> grad(base.rows(), base.cols());
  MatrixX<S> probe = base;
  for (Index i = 0; i < base.size(); ++i) {
    const S orig = base.data()[i];
    probe.data()[i] = orig + h;
    const S up = detail::as_scalar<S>(f(Tensor<S>(x.shape(), probe)));
    probe.data()[i] = orig - h;
    const S down = detail::as_scalar<S>(f(Tensor<S>(x.shape(), probe)));
    probe.data()[i] = orig;
    grad.data()[i] = (up - down) / (S(2) * h);
  }
  return Tensor<S>(x.shape(), std::move(grad));
}

/// Same estimate with respect to a parameter, perturbed in place and restored.
/// `f` takes no arguments and reads the parameter through the model.
template <typename S, typename F>
MatrixX<S> finite_diff_parameter(F&& f, Parameter<S>& p, S h) {
  if (!(h > S(0))) throw ContractError("finite_diff_parameter: step must be positive");
  MatrixX<S> grad(p.value.rows(), p.value.cols());
  for (Index i = 0; i < p.value.size(); ++i) {
    const S orig = p.value.data()[i];
    p.value.data()[i] = orig + h;
    const S up = detail::as_scalar<S>(f());
    p.value.data()[i] = orig - h;
    const S down = detail::as_scalar<S>(f());
    p.value.data()[i] = orig;
    grad.data()[i] = (up - down) / (S(2) * h);
  }
  return grad;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps elements whose
/// true gradient is ~0 from dominating through round-off.
template <typename DerivedA, typename DerivedB>
double max_relative_error(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                          double floor = 1e-6) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("max_relative_error: shape mismatch");
  double worst = 0.0;
  for (Index r = 0; r < a.rows(); ++r) {
    for (Index c = 0; c < a.cols(); ++c) {
      const double x = static_cast<double>(a(r, c));
      const double y = static_cast<double>(b(r, c));
      const double denom = std::max({std::abs(x), std::abs(y), floor});
      worst = std::max(worst, std::abs(x - y) / denom);
    }
  }
  return worst;
}

}  // namespace ase
