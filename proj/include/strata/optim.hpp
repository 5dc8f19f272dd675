#pragma once

#include "strata/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace strata {

// Adaptive-moment optimizer with decoupled weight decay.
// Moment buffers are lazily sized on the first step and stay parallel to the
// parameter list; the step counter is shared across all parameters.
template <class S>
struct AdamW {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;

  std::vector<Mat<S>> m_, v_;

  void step(const std::vector<Parameter<S>*>& params) {
    if (m_.empty()) {
      m_.reserve(params.size());
      v_.reserve(params.size());
      for (const auto* p : params) {
        m_.push_back(Mat<S>::Zero(p->value().rows(), p->value().cols()));
        v_.push_back(Mat<S>::Zero(p->value().rows(), p->value().cols()));
      }
    }
    if (m_.size() != params.size()) {
      throw std::logic_error("AdamW: parameter list changed size between steps");
    }
    ++step_count;
    const S bc1 = S(1) - S(std::pow(beta1, double(step_count)));
    const S bc2 = S(1) - S(std::pow(beta2, double(step_count)));
    for (size_t i = 0; i < params.size(); ++i) {
      Parameter<S>& p = *params[i];
      const Mat<S>& g = p.grad();
      if (!g.allFinite()) {
        throw std::runtime_error("optimizer_step: non-finite gradient for parameter '" +
                                 p.name + "'");
      }
      m_[i] = S(beta1) * m_[i] + (S(1) - S(beta1)) * g;
      v_[i] = S(beta2) * v_[i] + (S(1) - S(beta2)) * g.cwiseProduct(g);
      auto mhat = (m_[i] / bc1).array();
      auto vhat = (v_[i] / bc2).array();
      p.value().array() -= S(lr) * (mhat / (vhat.sqrt() + S(eps)) +
                                    S(weight_decay) * p.value().array());
    }
  }

  static void zero_grad(const std::vector<Parameter<S>*>& params) {
    for (auto* p : params) p->zero_grad();
  }
};

}  // namespace strata
