#pragma once

#include "strata/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace strata {

template <class S>
struct PointCloud {
  Mat<S> positions;            // N x 3, meters
  Mat<S> features;             // N x C, rgb in [0,1] at input
  std::vector<int> labels;     // empty or length N

  Index size() const { return positions.rows(); }
  bool has_labels() const { return !labels.empty(); }

  void validate() const {
    if (positions.cols() != 3 && positions.rows() > 0) {
      throw std::invalid_argument("PointCloud: positions must be Nx3, got " +
                                  shape_str(positions));
    }
    if (features.rows() != positions.rows()) {
      throw std::invalid_argument("PointCloud: feature rows " + shape_str(features) +
                                  " do not match positions " + shape_str(positions));
    }
    if (!labels.empty() && Index(labels.size()) != positions.rows()) {
      throw std::invalid_argument("PointCloud: label count " + std::to_string(labels.size()) +
                                  " does not match N=" + std::to_string(positions.rows()));
    }
    if (!positions.allFinite()) throw std::invalid_argument("PointCloud: non-finite position");
  }
};

// Integer window-grid cell coordinates.
using WindowId = std::array<std::int64_t, 3>;

struct WindowIdHash {
  size_t operator()(const WindowId& w) const {
    std::uint64_t h = 1469598103934665603ull;
    for (std::int64_t v : w) {
      h ^= std::uint64_t(v);
      h *= 1099511628211ull;
    }
    return size_t(h);
  }
};

template <class S>
struct NeighborTable {
  Mat<std::int64_t> indices;  // Q x k
  Mat<S> distances;           // Q x k, nondecreasing per row
};

namespace detail {

// Lexicographic comparison of two position rows; the universal spatial
// tie-break so that results depend on coordinates, never on input order.
template <class S>
bool lex_less(const Mat<S>& pos, Index a, Index b) {
  for (int d = 0; d < 3; ++d) {
    if (pos(a, d) < pos(b, d)) return true;
    if (pos(a, d) > pos(b, d)) return false;
  }
  return false;
}

template <class S>
std::int64_t cell_floor(S v, S cell) {
  return std::int64_t(std::floor(double(v) / double(cell)));
}

template <class S>
double sq_dist(const Mat<S>& a, Index i, const Mat<S>& b, Index j) {
  double s = 0;
  for (int d = 0; d < 3; ++d) {
    const double diff = double(a(i, d)) - double(b(j, d));
    s += diff * diff;
  }
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// grid_sample: one representative point per occupied voxel cell
// ---------------------------------------------------------------------------

template <class S>
PointCloud<S> grid_sample(const PointCloud<S>& cloud, S cell_size) {
  if (!(cell_size > S(0))) throw std::invalid_argument("grid_sample: cell_size must be > 0");
  cloud.validate();
  const Index n = cloud.size();
  const Index c = cloud.features.cols();

  // Ordered map gives the lexicographic cell-coordinate output order directly.
  std::map<WindowId, std::vector<Index>> cells;
  for (Index i = 0; i < n; ++i) {
    cells[WindowId{detail::cell_floor(cloud.positions(i, 0), cell_size),
                   detail::cell_floor(cloud.positions(i, 1), cell_size),
                   detail::cell_floor(cloud.positions(i, 2), cell_size)}]
        .push_back(i);
  }

  // Cell members are reduced in (position, feature) order so the means do not
  // depend on the input point order.
  auto content_less = [&](Index a, Index b) {
    for (int d = 0; d < 3; ++d) {
      if (cloud.positions(a, d) != cloud.positions(b, d))
        return cloud.positions(a, d) < cloud.positions(b, d);
    }
    for (Index j = 0; j < c; ++j) {
      if (cloud.features(a, j) != cloud.features(b, j))
        return cloud.features(a, j) < cloud.features(b, j);
    }
    return false;
  };

  PointCloud<S> out;
  out.positions.resize(Index(cells.size()), 3);
  out.features.resize(Index(cells.size()), c);
  if (cloud.has_labels()) out.labels.resize(cells.size());
  Index row = 0;
  for (auto& [id, members] : cells) {
    std::sort(members.begin(), members.end(), content_less);
    Eigen::Matrix<double, 1, 3> pos_sum = Eigen::Matrix<double, 1, 3>::Zero();
    Eigen::Matrix<double, Eigen::Dynamic, 1> feat_sum =
        Eigen::Matrix<double, Eigen::Dynamic, 1>::Zero(c);
    std::map<int, Index> votes;
    for (Index i : members) {
      for (int d = 0; d < 3; ++d) pos_sum(0, d) += double(cloud.positions(i, d));
      for (Index j = 0; j < c; ++j) feat_sum(j) += double(cloud.features(i, j));
      if (cloud.has_labels()) votes[cloud.labels[size_t(i)]]++;
    }
    const double inv = 1.0 / double(members.size());
    for (int d = 0; d < 3; ++d) out.positions(row, d) = S(pos_sum(0, d) * inv);
    for (Index j = 0; j < c; ++j) out.features(row, j) = S(feat_sum(j) * inv);
    if (cloud.has_labels()) {
      // Majority label; ties resolve to the smallest id via the ordered vote
      // map and the strict-greater comparison.
      int best = 0;
      Index best_count = -1;
      for (const auto& [lab, cnt] : votes) {
        if (cnt > best_count) {
          best = lab;
          best_count = cnt;
        }
      }
      out.labels[size_t(row)] = best;
    }
    ++row;
  }
  return out;
}

// ---------------------------------------------------------------------------
// fps: deterministic farthest point sampling
// ---------------------------------------------------------------------------

// Seed = point nearest the centroid; every later pick maximizes the minimum
// distance to the chosen set. All ties resolve to the lexicographically
// smallest position, making the picked sequence a function of the point set.
template <class S>
std::vector<Index> farthest_point_sample(const Mat<S>& positions, Index m) {
  const Index n = positions.rows();
  if (m < 1 || m > n) {
    throw std::invalid_argument("fps: m=" + std::to_string(m) + " outside [1, N=" +
                                std::to_string(n) + "]");
  }
  // Centroid accumulated in lexicographic position order so the seed choice
  // cannot drift with input permutation.
  std::vector<Index> order(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) order[size_t(i)] = i;
  std::sort(order.begin(), order.end(),
            [&](Index a, Index b) { return detail::lex_less(positions, a, b); });
  Eigen::Matrix<double, 1, 3> centroid = Eigen::Matrix<double, 1, 3>::Zero();
  for (Index i : order)
    for (int d = 0; d < 3; ++d) centroid(0, d) += double(positions(i, d));
  centroid /= double(n);

  Index seed = 0;
  double seed_d = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < n; ++i) {
    double s = 0;
    for (int d = 0; d < 3; ++d) {
      const double diff = double(positions(i, d)) - centroid(0, d);
      s += diff * diff;
    }
    if (s < seed_d || (s == seed_d && detail::lex_less(positions, i, seed))) {
      seed = i;
      seed_d = s;
    }
  }

  std::vector<Index> picks;
  picks.reserve(size_t(m));
  picks.push_back(seed);
  std::vector<double> min_d(size_t(n), std::numeric_limits<double>::infinity());
  Index last = seed;
  while (Index(picks.size()) < m) {
    Index best = -1;
    double best_d = -1.0;
    for (Index i = 0; i < n; ++i) {
      const double d = detail::sq_dist(positions, i, positions, last);
      if (d < min_d[size_t(i)]) min_d[size_t(i)] = d;
      if (min_d[size_t(i)] == 0.0) continue;  // already chosen (or coincident with a pick)
      if (min_d[size_t(i)] > best_d ||
          (min_d[size_t(i)] == best_d && detail::lex_less(positions, i, best))) {
        best = i;
        best_d = min_d[size_t(i)];
      }
    }
    if (best < 0) {
      // Remaining points all coincide with picks; fall back to unpicked order.
      std::vector<bool> taken(size_t(n), false);
      for (Index p : picks) taken[size_t(p)] = true;
      for (Index i = 0; i < n && Index(picks.size()) < m; ++i)
        if (!taken[size_t(i)]) picks.push_back(i);
      break;
    }
    picks.push_back(best);
    last = best;
  }
  return picks;
}

// ---------------------------------------------------------------------------
// knn: exact k nearest neighbors, grid-bucket accelerated
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void knn_brute_row(const Mat<S>& queries, Index qi, const Mat<S>& refs, Index k,
                   NeighborTable<S>& out) {
  const Index r = refs.rows();
  std::vector<Index> order(static_cast<size_t>(r));
  for (Index i = 0; i < r; ++i) order[size_t(i)] = i;
  auto cmp = [&](Index a, Index b) {
    const double da = sq_dist(queries, qi, refs, a);
    const double db = sq_dist(queries, qi, refs, b);
    if (da != db) return da < db;
    return lex_less(refs, a, b);
  };
  std::partial_sort(order.begin(), order.begin() + k, order.end(), cmp);
  for (Index j = 0; j < k; ++j) {
    out.indices(qi, j) = order[size_t(j)];
    out.distances(qi, j) = S(std::sqrt(sq_dist(queries, qi, refs, order[size_t(j)])));
  }
}

}  // namespace detail

template <class S>
NeighborTable<S> knn(const Mat<S>& queries, const Mat<S>& refs, Index k) {
  const Index q = queries.rows(), r = refs.rows();
  if (k < 1 || k > r) {
    throw std::invalid_argument("knn: k=" + std::to_string(k) + " outside [1, R=" +
                                std::to_string(r) + "]");
  }
  NeighborTable<S> out;
  out.indices.resize(q, k);
  out.distances.resize(q, k);

  if (r <= 512) {
    for (Index i = 0; i < q; ++i) detail::knn_brute_row(queries, i, refs, k, out);
    return out;
  }

  // Bucket references on a grid sized so cells hold a handful of points, then
  // expand rings per query until no unvisited cell can beat the current k-th
  // distance. Candidate selection reuses the brute comparator, so results are
  // identical to brute force including tie order.
  Eigen::Matrix<double, 1, 3> lo, hi;
  for (int d = 0; d < 3; ++d) {
    lo(0, d) = double(refs.col(d).minCoeff());
    hi(0, d) = double(refs.col(d).maxCoeff());
  }
  const double extent = std::max({hi(0, 0) - lo(0, 0), hi(0, 1) - lo(0, 1), hi(0, 2) - lo(0, 2)});
  const double cell = std::max(extent / std::cbrt(double(r)), 1e-9);

  std::unordered_map<WindowId, std::vector<Index>, WindowIdHash> buckets;
  buckets.reserve(size_t(r));
  auto cell_of = [&](const Mat<S>& m, Index i) {
    return WindowId{std::int64_t(std::floor((double(m(i, 0)) - lo(0, 0)) / cell)),
                    std::int64_t(std::floor((double(m(i, 1)) - lo(0, 1)) / cell)),
                    std::int64_t(std::floor((double(m(i, 2)) - lo(0, 2)) / cell))};
  };
  WindowId cmin{0, 0, 0}, cmax{0, 0, 0};
  for (Index i = 0; i < r; ++i) {
    const WindowId c = cell_of(refs, i);
    for (int d = 0; d < 3; ++d) {
      cmin[d] = i == 0 ? c[d] : std::min(cmin[d], c[d]);
      cmax[d] = i == 0 ? c[d] : std::max(cmax[d], c[d]);
    }
    buckets[c].push_back(i);
  }

  std::vector<Index> cand;
  for (Index qi = 0; qi < q; ++qi) {
    cand.clear();
    const WindowId qc = cell_of(queries, qi);
    // Past this ring every bucket has been swept, regardless of where the
    // query sits relative to the reference bounding box.
    std::int64_t ring_max = 0;
    for (int d = 0; d < 3; ++d) {
      ring_max = std::max({ring_max, std::abs(qc[d] - cmin[d]), std::abs(cmax[d] - qc[d])});
    }
    auto kth_dist = [&]() {
      if (Index(cand.size()) < k) return std::numeric_limits<double>::infinity();
      return detail::sq_dist(queries, qi, refs, cand[size_t(k - 1)]);
    };
    auto cmp = [&](Index a, Index b) {
      const double da = detail::sq_dist(queries, qi, refs, a);
      const double db = detail::sq_dist(queries, qi, refs, b);
      if (da != db) return da < db;
      return detail::lex_less(refs, a, b);
    };
    for (std::int64_t ring = 0;; ++ring) {
      if (ring > 0 && Index(cand.size()) >= k) {
        // Any point in an unvisited cell is at least (ring-1)*cell away.
        const double lb = double(ring - 1) * cell;
        if (lb * lb > kth_dist()) break;
      }
      bool any_cell = false;
      for (std::int64_t dx = -ring; dx <= ring; ++dx) {
        for (std::int64_t dy = -ring; dy <= ring; ++dy) {
          for (std::int64_t dz = -ring; dz <= ring; ++dz) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            auto it = buckets.find(WindowId{qc[0] + dx, qc[1] + dy, qc[2] + dz});
            if (it == buckets.end()) continue;
            any_cell = true;
            cand.insert(cand.end(), it->second.begin(), it->second.end());
          }
        }
      }
      if (any_cell) {
        const Index keep = std::min<Index>(Index(cand.size()), k);
        std::partial_sort(cand.begin(), cand.begin() + keep, cand.end(), cmp);
        cand.resize(size_t(keep));
      }
      if (ring >= ring_max) break;
    }
    for (Index j = 0; j < k; ++j) {
      out.indices(qi, j) = cand[size_t(j)];
      out.distances(qi, j) = S(std::sqrt(detail::sq_dist(queries, qi, refs, cand[size_t(j)])));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// window_assign
// ---------------------------------------------------------------------------

template <class S>
std::vector<WindowId> window_assign(const Mat<S>& positions, S s_win, bool shifted) {
  if (!(s_win > S(0))) throw std::invalid_argument("window_assign: s_win must be > 0");
  const S offset = shifted ? s_win / S(2) : S(0);
  std::vector<WindowId> ids(static_cast<size_t>(positions.rows()));
  for (Index i = 0; i < positions.rows(); ++i) {
    ids[size_t(i)] = {detail::cell_floor(S(positions(i, 0) + offset), s_win),
                      detail::cell_floor(S(positions(i, 1) + offset), s_win),
                      detail::cell_floor(S(positions(i, 2) + offset), s_win)};
  }
  return ids;
}

// ---------------------------------------------------------------------------
// interp_weights: inverse-square-distance weights over the 3 nearest sources
// ---------------------------------------------------------------------------

template <class S>
struct InterpWeights {
  Mat<std::int64_t> indices;  // T x 3
  Mat<S> weights;             // T x 3, rows sum to 1
};

template <class S>
InterpWeights<S> interp_weights(const Mat<S>& targets, const Mat<S>& sources) {
  if (sources.rows() < 3) {
    throw std::invalid_argument("interp_weights: need at least 3 sources, got " +
                                std::to_string(sources.rows()));
  }
  const NeighborTable<S> nbrs = knn(targets, sources, 3);
  InterpWeights<S> out;
  out.indices = nbrs.indices;
  out.weights.resize(targets.rows(), 3);
  for (Index i = 0; i < targets.rows(); ++i) {
    if (nbrs.distances(i, 0) == S(0)) {
      out.weights.row(i) << S(1), S(0), S(0);
      continue;
    }
    double w[3], total = 0;
    for (int j = 0; j < 3; ++j) {
      const double d = double(nbrs.distances(i, j));
      w[j] = 1.0 / (d * d);
      total += w[j];
    }
    for (int j = 0; j < 3; ++j) out.weights(i, j) = S(w[j] / total);
  }
  return out;
}

// ---------------------------------------------------------------------------
// augment: training-time transformations, applied in listed order
// ---------------------------------------------------------------------------

struct Augmentation {
  enum class Kind { RotateZ, Scale, Jitter, DropColor };
  Kind kind;
  // RotateZ: lo/hi angle in radians. Scale: lo/hi factor.
  // Jitter: sigma/clip in meters. DropColor: probability in lo.
  double lo = 0, hi = 0;

  static Augmentation rotate_z(double lo_rad, double hi_rad) {
    return {Kind::RotateZ, lo_rad, hi_rad};
  }
  static Augmentation scale(double lo_f, double hi_f) { return {Kind::Scale, lo_f, hi_f}; }
  static Augmentation jitter(double sigma, double clip) { return {Kind::Jitter, sigma, clip}; }
  static Augmentation drop_color(double prob) { return {Kind::DropColor, prob, 0}; }
};

template <class S>
void rotate_z_inplace(Mat<S>& positions, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  for (Index i = 0; i < positions.rows(); ++i) {
    const double x = double(positions(i, 0)), y = double(positions(i, 1));
    positions(i, 0) = S(c * x - s * y);
    positions(i, 1) = S(s * x + c * y);
  }
}

template <class S>
PointCloud<S> augment(const PointCloud<S>& cloud, const std::vector<Augmentation>& spec,
                      std::mt19937_64& rng) {
  PointCloud<S> out = cloud;
  for (const auto& a : spec) {
    switch (a.kind) {
      case Augmentation::Kind::RotateZ: {
        std::uniform_real_distribution<double> dist(a.lo, a.hi);
        rotate_z_inplace(out.positions, dist(rng));
        break;
      }
      case Augmentation::Kind::Scale: {
        std::uniform_real_distribution<double> dist(a.lo, a.hi);
        out.positions *= S(dist(rng));
        break;
      }
      case Augmentation::Kind::Jitter: {
        std::normal_distribution<double> noise(0.0, a.lo);
        for (Index i = 0; i < out.positions.rows(); ++i) {
          for (int d = 0; d < 3; ++d) {
            const double eps = std::clamp(noise(rng), -a.hi, a.hi);
            out.positions(i, d) += S(eps);
          }
        }
        break;
      }
      case Augmentation::Kind::DropColor: {
        std::uniform_real_distribution<double> dist(0.0, 1.0);
        if (dist(rng) < a.lo) {
          const Index rgb = std::min<Index>(3, out.features.cols());
          out.features.leftCols(rgb).setZero();
        }
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// perturb: test-time robustness perturbations
// ---------------------------------------------------------------------------

struct Perturbation {
  enum class Kind { None, Permute, RotateZ90, RotateZ180, RotateZ270, Shift, Scale, Jitter };
  Kind kind = Kind::None;
  double amount = 0;       // Shift: meters on all axes; Scale: factor
  std::uint64_t seed = 0;  // Permute / Jitter

  std::string name() const {
    switch (kind) {
      case Kind::None: return "none";
      case Kind::Permute: return "permute";
      case Kind::RotateZ90: return "rot90";
      case Kind::RotateZ180: return "rot180";
      case Kind::RotateZ270: return "rot270";
      case Kind::Shift: return amount >= 0 ? "shift+" : "shift-";
      case Kind::Scale: return amount > 1 ? "scale1.2" : "scale0.8";
      case Kind::Jitter: return "jitter";
    }
    return "?";
  }
};

template <class S>
PointCloud<S> perturb(const PointCloud<S>& cloud, const Perturbation& kind) {
  PointCloud<S> out = cloud;
  using K = Perturbation::Kind;
  switch (kind.kind) {
    case K::None:
      break;
    case K::Permute: {
      std::mt19937_64 rng(kind.seed);
      std::vector<Index> perm(size_t(cloud.size()));
      for (Index i = 0; i < cloud.size(); ++i) perm[size_t(i)] = i;
      std::shuffle(perm.begin(), perm.end(), rng);
      for (Index i = 0; i < cloud.size(); ++i) {
        out.positions.row(i) = cloud.positions.row(perm[size_t(i)]);
        out.features.row(i) = cloud.features.row(perm[size_t(i)]);
        if (cloud.has_labels()) out.labels[size_t(i)] = cloud.labels[size_t(perm[size_t(i)])];
      }
      break;
    }
    case K::RotateZ90:
    case K::RotateZ180:
    case K::RotateZ270: {
      // Exact axis swaps, no trigonometric rounding.
      const int quarter = kind.kind == K::RotateZ90 ? 1 : kind.kind == K::RotateZ180 ? 2 : 3;
      for (Index i = 0; i < out.positions.rows(); ++i) {
        S x = out.positions(i, 0), y = out.positions(i, 1);
        for (int t = 0; t < quarter; ++t) {
          const S nx = -y, ny = x;
          x = nx;
          y = ny;
        }
        out.positions(i, 0) = x;
        out.positions(i, 1) = y;
      }
      break;
    }
    case K::Shift:
      out.positions.array() += S(kind.amount);
      break;
    case K::Scale:
      out.positions *= S(kind.amount);
      break;
    case K::Jitter: {
      std::mt19937_64 rng(kind.seed);
      std::normal_distribution<double> noise(0.0, 0.01);
      for (Index i = 0; i < out.positions.rows(); ++i)
        for (int d = 0; d < 3; ++d)
          out.positions(i, d) += S(std::clamp(noise(rng), -0.05, 0.05));
      break;
    }
  }
  return out;
}

}  // namespace strata
