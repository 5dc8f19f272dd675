#pragma once

#include "strata/ops.hpp"

#include <random>
#include <string>
#include <vector>

namespace strata {

template <class S>
using ParamList = std::vector<Parameter<S>*>;

template <class S>
Mat<S> xavier_uniform(Index rows, Index cols, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / double(rows + cols));
  std::uniform_real_distribution<double> dist(-a, a);
  Mat<S> w(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) w(i, j) = S(dist(rng));
  return w;
}

// Affine layer holding its own parameters and the input saved for backward.
template <class S>
struct Linear {
  Parameter<S> W;  // Cin x Cout
  Parameter<S> b;  // 1 x Cout
  Mat<S> x_saved;

  void init(Index cin, Index cout, std::mt19937_64& rng) {
    W = Parameter<S>(xavier_uniform<S>(cin, cout, rng));
    b = Parameter<S>(Mat<S>::Zero(1, cout));
  }

  Mat<S> forward(const Mat<S>& x) {
    x_saved = x;
    return linear_forward(x, W.value(), b.value());
  }

  Mat<S> forward_const(const Mat<S>& x) const {
    return linear_forward(x, W.value(), b.value());
  }

  Mat<S> backward(const Mat<S>& gy) {
    return linear_backward(x_saved, W.value(), gy, W.grad(), b.grad());
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    W.name = prefix + ".weight";
    b.name = prefix + ".bias";
    out.push_back(&W);
    out.push_back(&b);
  }
};

template <class S>
struct LayerNorm {
  Parameter<S> gamma;
  Parameter<S> beta;
  S eps = S(1e-5);
  LayerNormCtx<S> ctx;

  void init(Index c) {
    gamma = Parameter<S>(Mat<S>::Ones(1, c));
    beta = Parameter<S>(Mat<S>::Zero(1, c));
  }

  Mat<S> forward(const Mat<S>& x) {
    return layer_norm_forward(x, gamma.value(), beta.value(), eps, &ctx);
  }

  Mat<S> backward(const Mat<S>& gy) {
    return layer_norm_backward(ctx, gamma.value(), gy, gamma.grad(), beta.grad());
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    gamma.name = prefix + ".gamma";
    beta.name = prefix + ".beta";
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

}  // namespace strata
