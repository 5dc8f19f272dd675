#pragma once

#include "strata/tensor.hpp"

#include <cstdlib>
#include <limits>
#include <vector>

namespace strata {

// ---------------------------------------------------------------------------
// linear: y = x W + b
// ---------------------------------------------------------------------------

template <class S>
Mat<S> linear_forward(const Mat<S>& x, const Mat<S>& W, const Mat<S>& b) {
  require_inner_dims(x, W, "linear");
  if (b.size() != 0 && (b.rows() != 1 || b.cols() != W.cols())) {
    throw std::invalid_argument("linear: bias shape " + shape_str(b) + " does not match W" +
                                shape_str(W));
  }
  Mat<S> y = x * W;
  if (b.size() != 0) y.rowwise() += b.row(0);
  return y;
}

// Accumulates dW/db, returns dx.
template <class S>
Mat<S> linear_backward(const Mat<S>& x, const Mat<S>& W, const Mat<S>& gy, Mat<S>& gW,
                       Mat<S>& gb) {
  gW += x.transpose() * gy;
  if (gb.size() != 0) gb += gy.colwise().sum();
  return gy * W.transpose();
}

// ---------------------------------------------------------------------------
// layer_norm: per-row standardization, affine gamma/beta
// ---------------------------------------------------------------------------

template <class S>
struct LayerNormCtx {
  Mat<S> xhat;     // (x - mean) * inv_std, per row
  Mat<S> inv_std;  // N x 1
};

template <class S>
Mat<S> layer_norm_forward(const Mat<S>& x, const Mat<S>& gamma, const Mat<S>& beta, S eps,
                          LayerNormCtx<S>* ctx = nullptr) {
  const Index n = x.rows(), c = x.cols();
  if (c < 1) throw std::invalid_argument("layer_norm: needs at least one channel");
  if (gamma.cols() != c || beta.cols() != c) {
    throw std::invalid_argument("layer_norm: gamma/beta width " + shape_str(gamma) +
                                " does not match x" + shape_str(x));
  }
  Mat<S> xhat(n, c);
  Mat<S> inv_std(n, 1);
  for (Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().sum() / S(c);
    const S istd = S(1) / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mean) * istd;
    inv_std(i, 0) = istd;
  }
  Mat<S> y = xhat.array().rowwise() * gamma.row(0).array();
  y.array().rowwise() += beta.row(0).array();
  if (ctx) {
    ctx->xhat = std::move(xhat);
    ctx->inv_std = std::move(inv_std);
  }
  return y;
}

template <class S>
Mat<S> layer_norm_backward(const LayerNormCtx<S>& ctx, const Mat<S>& gamma, const Mat<S>& gy,
                           Mat<S>& ggamma, Mat<S>& gbeta) {
  const Index n = gy.rows(), c = gy.cols();
  ggamma += (gy.array() * ctx.xhat.array()).colwise().sum().matrix();
  gbeta += gy.colwise().sum();
  Mat<S> gx(n, c);
  for (Index i = 0; i < n; ++i) {
    auto g = (gy.row(i).array() * gamma.row(0).array()).eval();
    const S gm = g.mean();
    const S gxm = (g * ctx.xhat.row(i).array()).mean();
    gx.row(i) = ((g - gm - ctx.xhat.row(i).array() * gxm) * ctx.inv_std(i, 0)).matrix();
  }
  return gx;
}

// ---------------------------------------------------------------------------
// activation: exact Gaussian-error gate, x * Phi(x)
// ---------------------------------------------------------------------------

template <class S>
S gauss_cdf(S x) {
  return S(0.5) * std::erfc(-x * S(0.7071067811865475244));
}

template <class S>
Mat<S> gelu_forward(const Mat<S>& x) {
  return x.unaryExpr([](S v) { return v * gauss_cdf(v); });
}

template <class S>
Mat<S> gelu_backward(const Mat<S>& x, const Mat<S>& gy) {
  Mat<S> d = x.unaryExpr([](S v) {
    constexpr S inv_sqrt_2pi = S(0.3989422804014326779);
    const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
    return gauss_cdf(v) + v * pdf;
  });
  return (gy.array() * d.array()).matrix();
}

// ---------------------------------------------------------------------------
// cross_entropy_mean: mean negative log-softmax of the true class
// ---------------------------------------------------------------------------

template <class S>
struct CrossEntropyCtx {
  Mat<S> softmax;           // N x K
  std::vector<int> labels;  // copy, with ignore entries preserved
  int ignore_index = -1;
  Index counted = 0;
};

template <class S>
S cross_entropy_mean(const Mat<S>& logits, const std::vector<int>& labels, int ignore_index,
                     CrossEntropyCtx<S>* ctx = nullptr) {
  const Index n = logits.rows(), k = logits.cols();
  if (Index(labels.size()) != n) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " rows");
  }
  Mat<S> soft(n, k);
  S total = 0;
  Index counted = 0;
  for (Index i = 0; i < n; ++i) {
    const S m = logits.row(i).maxCoeff();
    auto ex = (logits.row(i).array() - m).exp().eval();
    const S z = ex.sum();
    soft.row(i) = (ex / z).matrix();
    const int lab = labels[size_t(i)];
    if (lab == ignore_index) continue;
    if (lab < 0 || lab >= int(k)) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(lab) +
                                  " out of range [0," + std::to_string(k) + ") at row " +
                                  std::to_string(i));
    }
    total += m + std::log(z) - logits(i, lab);
    ++counted;
  }
  if (ctx) {
    ctx->softmax = std::move(soft);
    ctx->labels = labels;
    ctx->ignore_index = ignore_index;
    ctx->counted = counted;
  }
  return counted == 0 ? S(0) : total / S(counted);
}

template <class S>
Mat<S> cross_entropy_backward(const CrossEntropyCtx<S>& ctx, S upstream = S(1)) {
  const Index n = ctx.softmax.rows();
  Mat<S> gx = Mat<S>::Zero(n, ctx.softmax.cols());
  if (ctx.counted == 0) return gx;
  const S scale = upstream / S(ctx.counted);
  for (Index i = 0; i < n; ++i) {
    const int lab = ctx.labels[size_t(i)];
    if (lab == ctx.ignore_index) continue;
    gx.row(i) = ctx.softmax.row(i) * scale;
    gx(i, lab) -= scale;
  }
  return gx;
}

}  // namespace strata
