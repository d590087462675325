#pragma once

// Central finite-difference gradient checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "aclam/tensor.hpp"

namespace aclam::ad {

/// Scalar-valued function of a set of leaf tensors captured by the closure.
/// It must build its result through the given graph and be deterministic.
template <typename T>
using ScalarFn = std::function<Tensor<T>(Graph<T>&)>;

/// max over all elements of every tensor in `wrt` of
///   |analytic - central| / max(1, |central|).
/// Leaves the tensors' data unchanged and their gradients cleared.
template <typename T>
T finite_diff_check(const ScalarFn<T>& f, std::vector<Tensor<T>> wrt, T eps) {
  if (!(eps > T(0))) {
    throw std::invalid_argument("finite_diff_check: eps must be positive");
  }
  auto eval = [&f]() {
    Graph<T> g(false);
    const T v = f(g).item();
    if (!std::isfinite(v)) {
      throw std::domain_error("finite_diff_check: function returned a non-finite value");
    }
    return v;
  };

  std::vector<std::vector<T>> analytic;
  {
    for (auto& t : wrt) {
      t.set_requires_grad(true);
      t.zero_grad();
    }
    Graph<T> g;
    Tensor<T> loss = f(g);
    if (!std::isfinite(loss.item())) {
      throw std::domain_error("finite_diff_check: function returned a non-finite value");
    }
    g.backward(loss);
    for (auto& t : wrt) {
      analytic.push_back(t.grad_or_zeros());
      t.zero_grad();
    }
  }

  T worst = T(0);
  for (std::size_t w = 0; w < wrt.size(); ++w) {
    auto data = wrt[w].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T saved = data[i];
      data[i] = saved + eps;
      const T up = eval();
      data[i] = saved - eps;
      const T down = eval();
      data[i] = saved;
      const T numeric = (up - down) / (T(2) * eps);
      const T err = std::abs(analytic[w][i] - numeric) / std::max(T(1), std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Single-input convenience form: f receives the graph and x.
template <typename T>
T finite_diff_check(const std::function<Tensor<T>(Graph<T>&, const Tensor<T>&)>& f, Tensor<T> x,
                    T eps) {
  return finite_diff_check<T>([&f, x](Graph<T>& g) { return f(g, x); }, {x}, eps);
}

}  // namespace aclam::ad
