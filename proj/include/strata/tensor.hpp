#pragma once

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace strata {

using Index = Eigen::Index;

// Dense row-major storage throughout; rows are points/pairs, columns are channels.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_str(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <class S>
std::string shape_str(const Mat<S>& m) {
  return shape_str(m.rows(), m.cols());
}

template <class S>
void require_same_shape(const Mat<S>& a, const Mat<S>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
  }
}

template <class S>
void require_inner_dims(const Mat<S>& x, const Mat<S>& w, const char* what) {
  if (x.cols() != w.rows()) {
    throw std::invalid_argument(std::string(what) + ": inner dimensions disagree, x" +
                                shape_str(x) + " * W" + shape_str(w));
  }
}

// Value block with an optional same-shape gradient buffer.
template <class S>
struct Tensor {
  Mat<S> values;
  Mat<S> grad;  // kept at values' shape while requires_grad is set, else 0x0
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Mat<S> v, bool req = false) : values(std::move(v)) { set_requires_grad(req); }
  Tensor(Index rows, Index cols, bool req = false) : values(Mat<S>::Zero(rows, cols)) {
    set_requires_grad(req);
  }

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
  Index size() const { return values.size(); }

  void set_requires_grad(bool req) {
    requires_grad = req;
    if (req) {
      grad = Mat<S>::Zero(values.rows(), values.cols());
    } else {
      grad.resize(0, 0);
    }
  }

  void zero_grad() {
    if (requires_grad) grad.setZero(values.rows(), values.cols());
  }

  void accumulate_grad(const Mat<S>& g) {
    if (!requires_grad) return;
    require_same_shape<S>(values, g, "Tensor::accumulate_grad");
    grad += g;
  }

  bool all_finite() const { return values.allFinite(); }
};

// Named trainable tensor; the name doubles as the checkpoint record key.
template <class S>
struct Parameter {
  std::string name;
  Tensor<S> tensor;

  Parameter() { tensor.set_requires_grad(true); }
  explicit Parameter(Mat<S> v, std::string n = {}) : name(std::move(n)), tensor(std::move(v), true) {}

  Mat<S>& value() { return tensor.values; }
  const Mat<S>& value() const { return tensor.values; }
  Mat<S>& grad() { return tensor.grad; }
  const Mat<S>& grad() const { return tensor.grad; }
  void zero_grad() { tensor.zero_grad(); }
};

}  // namespace strata
