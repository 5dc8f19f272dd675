#pragma once

#include "strata/geometry.hpp"

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <utility>
#include <vector>

namespace strata {

// Flat (query, key) pair list, sorted by (index_q, index_k) and grouped by
// query. Keys index the same point set as queries.
struct IndexPairs {
  std::vector<Index> index_q;
  std::vector<Index> index_k;
  std::vector<Index> query_group_offsets;  // length Nq+1; run of query i is [off[i], off[i+1])
  Index n_points = 0;

  Index pair_count() const { return Index(index_q.size()); }

  void rebuild_offsets() {
    query_group_offsets.assign(size_t(n_points) + 1, 0);
    for (Index q : index_q) query_group_offsets[size_t(q) + 1]++;
    for (size_t i = 1; i < query_group_offsets.size(); ++i) {
      query_group_offsets[i] += query_group_offsets[i - 1];
    }
  }

  void validate() const {
    if (Index(query_group_offsets.size()) != n_points + 1) {
      throw std::logic_error("IndexPairs: offsets length mismatch");
    }
    if (index_q.size() != index_k.size()) throw std::logic_error("IndexPairs: q/k length mismatch");
    for (size_t m = 0; m < index_q.size(); ++m) {
      if (index_q[m] < 0 || index_q[m] >= n_points || index_k[m] < 0 || index_k[m] >= n_points) {
        throw std::out_of_range("IndexPairs: pair " + std::to_string(m) + " references point " +
                                std::to_string(std::max(index_q[m], index_k[m])) +
                                " outside [0," + std::to_string(n_points) + ")");
      }
      if (m > 0 && (index_q[m] < index_q[m - 1] ||
                    (index_q[m] == index_q[m - 1] && index_k[m] <= index_k[m - 1]))) {
        throw std::logic_error("IndexPairs: pairs not strictly sorted by (q,k) at " +
                               std::to_string(m));
      }
    }
  }
};

namespace detail {

inline IndexPairs pairs_from_sorted(std::vector<std::pair<Index, Index>> qk, Index n_points) {
  std::sort(qk.begin(), qk.end());
  qk.erase(std::unique(qk.begin(), qk.end()), qk.end());
  IndexPairs out;
  out.n_points = n_points;
  out.index_q.reserve(qk.size());
  out.index_k.reserve(qk.size());
  for (const auto& [q, k] : qk) {
    out.index_q.push_back(q);
    out.index_k.push_back(k);
  }
  out.rebuild_offsets();
  return out;
}

}  // namespace detail

// Every pair of points sharing a window, self-pairs included: M = sum k_t^2.
inline IndexPairs build_dense_pairs(const std::vector<WindowId>& window_ids) {
  const Index n = Index(window_ids.size());
  std::unordered_map<WindowId, std::vector<Index>, WindowIdHash> groups;
  for (Index i = 0; i < n; ++i) groups[window_ids[size_t(i)]].push_back(i);
  std::vector<std::pair<Index, Index>> qk;
  size_t total = 0;
  for (const auto& [id, members] : groups) total += members.size() * members.size();
  qk.reserve(total);
  for (const auto& [id, members] : groups) {
    for (Index qi : members) {
      for (Index ki : members) qk.emplace_back(qi, ki);
    }
  }
  return detail::pairs_from_sorted(std::move(qk), n);
}

template <class S>
IndexPairs build_sparse_pairs_from_candidates(const Mat<S>& positions,
                                              const std::vector<Index>& candidates,
                                              S s_win_large, bool shifted) {
  const Index n = positions.rows();
  const std::vector<WindowId> ids = window_assign(positions, s_win_large, shifted);
  std::unordered_map<WindowId, std::vector<Index>, WindowIdHash> cand_by_window;
  for (Index c : candidates) cand_by_window[ids[size_t(c)]].push_back(c);
  std::vector<std::pair<Index, Index>> qk;
  for (Index i = 0; i < n; ++i) {
    auto it = cand_by_window.find(ids[size_t(i)]);
    if (it == cand_by_window.end()) continue;
    for (Index c : it->second) qk.emplace_back(i, c);
  }
  return detail::pairs_from_sorted(std::move(qk), n);
}

// Sparse long-range pairs: keys are the FPS-selected candidates (ceil(N/s) of
// them, at full-resolution indices) that share the query's larger window.
template <class S>
IndexPairs build_sparse_pairs(const Mat<S>& positions, Index s, S s_win_large, bool shifted) {
  const Index n = positions.rows();
  if (s < 1) throw std::invalid_argument("build_sparse_pairs: scale s must be >= 1");
  if (!(s_win_large > S(0))) {
    throw std::invalid_argument("build_sparse_pairs: s_win_large must be > 0");
  }
  if (n == 0) {
    IndexPairs empty;
    empty.n_points = 0;
    empty.rebuild_offsets();
    return empty;
  }
  const Index m = (n + s - 1) / s;
  const std::vector<Index> candidates = farthest_point_sample(positions, m);
  return build_sparse_pairs_from_candidates(positions, candidates, s_win_large, shifted);
}

// Set union of two pair lists over the same point set.
inline IndexPairs merge_dedup(const IndexPairs& dense, const IndexPairs& sparse) {
  if (dense.n_points != sparse.n_points) {
    throw std::invalid_argument("merge_dedup: pair lists cover different point sets (" +
                                std::to_string(dense.n_points) + " vs " +
                                std::to_string(sparse.n_points) + ")");
  }
  std::vector<std::pair<Index, Index>> qk;
  qk.reserve(dense.index_q.size() + sparse.index_q.size());
  for (size_t i = 0; i < dense.index_q.size(); ++i) {
    qk.emplace_back(dense.index_q[i], dense.index_k[i]);
  }
  for (size_t i = 0; i < sparse.index_q.size(); ++i) {
    qk.emplace_back(sparse.index_q[i], sparse.index_k[i]);
  }
  return detail::pairs_from_sorted(std::move(qk), dense.n_points);
}

// Padded-row equivalent of a pair list: per query, its key list padded to the
// maximum key count, with a validity mask. This is the layout the dense
// masked-attention oracle consumes.
struct PaddedMask {
  Index n_points = 0;
  Index k_max = 0;
  std::vector<Index> keys;     // n_points * k_max, -1 where padded
  std::vector<uint8_t> valid;  // n_points * k_max

  Index key(Index q, Index slot) const { return keys[size_t(q * k_max + slot)]; }
  bool is_valid(Index q, Index slot) const { return valid[size_t(q * k_max + slot)] != 0; }

  IndexPairs to_pairs() const {
    IndexPairs out;
    out.n_points = n_points;
    for (Index q = 0; q < n_points; ++q) {
      for (Index s = 0; s < k_max; ++s) {
        if (is_valid(q, s)) {
          out.index_q.push_back(q);
          out.index_k.push_back(key(q, s));
        }
      }
    }
    out.rebuild_offsets();
    return out;
  }
};

inline PaddedMask build_padded_oracle(const IndexPairs& pairs, Index n_points) {
  if (pairs.n_points != n_points) {
    throw std::invalid_argument("build_padded_oracle: pair list covers " +
                                std::to_string(pairs.n_points) + " points, expected " +
                                std::to_string(n_points));
  }
  PaddedMask mask;
  mask.n_points = n_points;
  for (Index q = 0; q < n_points; ++q) {
    mask.k_max = std::max(mask.k_max,
                          pairs.query_group_offsets[size_t(q) + 1] -
                              pairs.query_group_offsets[size_t(q)]);
  }
  mask.keys.assign(size_t(n_points * mask.k_max), -1);
  mask.valid.assign(size_t(n_points * mask.k_max), 0);
  for (Index q = 0; q < n_points; ++q) {
    const Index begin = pairs.query_group_offsets[size_t(q)];
    const Index end = pairs.query_group_offsets[size_t(q) + 1];
    for (Index m = begin; m < end; ++m) {
      const Index slot = m - begin;
      mask.keys[size_t(q * mask.k_max + slot)] = pairs.index_k[size_t(m)];
      mask.valid[size_t(q * mask.k_max + slot)] = 1;
    }
  }
  return mask;
}

// Text dump, one "q k" line per pair, for diffing against oracles.
inline void dump_pairs(const IndexPairs& pairs, std::ostream& os) {
  for (size_t m = 0; m < pairs.index_q.size(); ++m) {
    os << pairs.index_q[m] << ' ' << pairs.index_k[m] << '\n';
  }
}

}  // namespace strata
