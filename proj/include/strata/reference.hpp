#pragma once

#include "strata/attention.hpp"

#include <cmath>
#include <vector>

namespace strata {

// Reference attention over the padded-row mask: dense masked softmax per
// query, naive loops throughout. Kept deliberately independent of the
// gather/scatter implementation so the two routes can be diffed; only the
// layer's parameter values are shared.
template <class S>
Mat<S> reference_attention_forward(const Mat<S>& x, const Mat<S>& positions,
                                   const PaddedMask& mask, const AttentionLayer<S>& layer) {
  const Index n = x.rows(), c = x.cols();
  const Index heads = layer.n_heads;
  const Index nd = c / heads;

  auto project = [&](const Linear<S>& lin) {
    Mat<S> out = Mat<S>::Zero(n, c);
    for (Index i = 0; i < n; ++i) {
      for (Index o = 0; o < c; ++o) {
        S acc = lin.b.value()(0, o);
        for (Index d = 0; d < c; ++d) acc += x(i, d) * lin.W.value()(d, o);
        out(i, o) = acc;
      }
    }
    return out;
  };

  Mat<S> q = project(layer.proj_q);
  const Mat<S> k = project(layer.proj_k);
  const Mat<S> v = project(layer.proj_v);
  if (layer.scale_logits) q *= S(1.0 / std::sqrt(double(nd)));

  const bool use_crpe = layer.crpe.has_value();
  const bool use_mlp = layer.mlp_bias.has_value();

  auto table_row_sum = [&](int role, Index qi, Index ki, Index col) {
    S acc = S(0);
    for (int axis = 0; axis < 3; ++axis) {
      const double r = double(positions(qi, axis)) - double(positions(ki, axis));
      const double step = 2.0 * double(layer.crpe->s_range) / double(layer.crpe->bins);
      long idx = long(std::floor((r + double(layer.crpe->s_range)) / step));
      if (idx < 0) idx = 0;
      if (idx > long(layer.crpe->bins - 1)) idx = long(layer.crpe->bins - 1);
      acc += layer.crpe->tables[size_t(role)][size_t(axis)].value()(Index(idx), col);
    }
    return acc;
  };

  auto mlp_bias_at = [&](Index qi, Index ki, Index h) {
    const auto& fc1 = layer.mlp_bias->fc1;
    const auto& fc2 = layer.mlp_bias->fc2;
    const Index hidden = fc1.W.value().cols();
    std::vector<double> hvec(static_cast<size_t>(hidden));
    for (Index u = 0; u < hidden; ++u) {
      double acc = double(fc1.b.value()(0, u));
      for (int axis = 0; axis < 3; ++axis) {
        const double r = double(positions(qi, axis)) - double(positions(ki, axis));
        acc += r * double(fc1.W.value()(axis, u));
      }
      hvec[size_t(u)] = acc * 0.5 * (1.0 + std::erf(acc / std::sqrt(2.0)));
    }
    double out = double(fc2.b.value()(0, h));
    for (Index u = 0; u < hidden; ++u) out += hvec[size_t(u)] * double(fc2.W.value()(u, h));
    return S(out);
  };

  Mat<S> y = Mat<S>::Zero(n, c);
  std::vector<S> logits(static_cast<size_t>(mask.k_max));
  for (Index i = 0; i < n; ++i) {
    for (Index h = 0; h < heads; ++h) {
      const Index o = h * nd;
      S mx = std::numeric_limits<S>::lowest();
      Index valid_count = 0;
      for (Index s = 0; s < mask.k_max; ++s) {
        if (!mask.is_valid(i, s)) continue;
        const Index j = mask.key(i, s);
        S a = S(0);
        for (Index d = 0; d < nd; ++d) a += q(i, o + d) * k(j, o + d);
        if (use_crpe) {
          for (Index d = 0; d < nd; ++d) {
            a += q(i, o + d) * table_row_sum(CrpeTables<S>::kRoleQ, i, j, o + d);
            a += k(j, o + d) * table_row_sum(CrpeTables<S>::kRoleK, i, j, o + d);
          }
        }
        if (use_mlp) a += mlp_bias_at(i, j, h);
        logits[size_t(s)] = a;
        mx = std::max(mx, a);
        ++valid_count;
      }
      if (valid_count == 0) continue;
      S z = S(0);
      for (Index s = 0; s < mask.k_max; ++s) {
        if (mask.is_valid(i, s)) z += std::exp(logits[size_t(s)] - mx);
      }
      for (Index s = 0; s < mask.k_max; ++s) {
        if (!mask.is_valid(i, s)) continue;
        const Index j = mask.key(i, s);
        const S p = std::exp(logits[size_t(s)] - mx) / z;
        for (Index d = 0; d < nd; ++d) {
          S val = v(j, o + d);
          if (use_crpe) val += table_row_sum(CrpeTables<S>::kRoleV, i, j, o + d);
          y(i, o + d) += p * val;
        }
      }
    }
  }

  Mat<S> z_out = Mat<S>::Zero(n, c);
  for (Index i = 0; i < n; ++i) {
    for (Index o = 0; o < c; ++o) {
      S acc = layer.proj_out.b.value()(0, o);
      for (Index d = 0; d < c; ++d) acc += y(i, d) * layer.proj_out.W.value()(d, o);
      z_out(i, o) = acc;
    }
  }
  return z_out;
}

}  // namespace strata
