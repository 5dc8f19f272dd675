#pragma once

#include "strata/indexing.hpp"
#include "strata/layers.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace strata {

// ---------------------------------------------------------------------------
// Relative-coordinate quantization
// ---------------------------------------------------------------------------

// idx = floor((r + s_range) / (2 s_range / L)), clamped to [0, L). Clamping
// absorbs out-of-range offsets from large-window sparse keys.
template <class S>
Index quantize_rel(S r, S s_range, Index bins) {
  const double step = 2.0 * double(s_range) / double(bins);
  const Index idx = Index(std::floor((double(r) + double(s_range)) / step));
  return std::clamp<Index>(idx, 0, bins - 1);
}

// ---------------------------------------------------------------------------
// Contextual relative position encoding tables
// ---------------------------------------------------------------------------

// Nine learnable tables: one per (role, axis), each bins x (heads*head_dim).
// Role tables are not shared between query, key and value.
template <class S>
struct CrpeTables {
  static constexpr int kRoleQ = 0, kRoleK = 1, kRoleV = 2;

  std::array<std::array<Parameter<S>, 3>, 3> tables;  // [role][axis]
  Index bins = 0;
  S s_range = S(0);

  void init(Index bins_, Index channels, S s_range_, S init_scale, std::mt19937_64& rng) {
    if (bins_ < 2 || bins_ % 2 != 0) {
      throw std::invalid_argument("CrpeTables: bin count must be even and >= 2, got " +
                                  std::to_string(bins_));
    }
    if (!(s_range_ > S(0))) throw std::invalid_argument("CrpeTables: s_range must be > 0");
    bins = bins_;
    s_range = s_range_;
    std::uniform_real_distribution<double> dist(-double(init_scale), double(init_scale));
    for (auto& role : tables) {
      for (auto& t : role) {
        Mat<S> v(bins, channels);
        for (Index i = 0; i < bins; ++i)
          for (Index j = 0; j < channels; ++j) v(i, j) = S(dist(rng));
        t = Parameter<S>(std::move(v));
      }
    }
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    static const char* role_names[3] = {"q", "k", "v"};
    static const char* axis_names[3] = {"x", "y", "z"};
    for (int r = 0; r < 3; ++r) {
      for (int a = 0; a < 3; ++a) {
        tables[r][a].name = prefix + ".t" + axis_names[a] + "_" + role_names[r];
        out.push_back(&tables[r][a]);
      }
    }
  }
};

// Per-pair encoding e = t_x[idx_x] + t_y[idx_y] + t_z[idx_z] for one role.
template <class S>
Mat<S> crpe_encode(const Mat<Index>& bin_idx, const CrpeTables<S>& tables, int role) {
  const Index m = bin_idx.rows();
  const Index c = tables.tables[role][0].value().cols();
  Mat<S> e(m, c);
  for (Index i = 0; i < m; ++i) {
    e.row(i) = tables.tables[role][0].value().row(bin_idx(i, 0)) +
               tables.tables[role][1].value().row(bin_idx(i, 1)) +
               tables.tables[role][2].value().row(bin_idx(i, 2));
  }
  return e;
}

// Scatter-adds upstream per-pair gradients into the three hit table rows.
template <class S>
void crpe_encode_backward(const Mat<Index>& bin_idx, const Mat<S>& ge, CrpeTables<S>& tables,
                          int role) {
  for (Index i = 0; i < ge.rows(); ++i) {
    for (int a = 0; a < 3; ++a) {
      tables.tables[role][a].grad().row(bin_idx(i, a)) += ge.row(i);
    }
  }
}

// ---------------------------------------------------------------------------
// Scatter softmax over query segments
// ---------------------------------------------------------------------------

// Softmax applied independently per (query segment, head), max-subtracted.
// Segment reduction order is the sorted pair order, so sums are deterministic.
template <class S>
Mat<S> scatter_softmax(const Mat<S>& logits, const IndexPairs& pairs) {
  const Index heads = logits.cols();
  Mat<S> probs(logits.rows(), heads);
  for (Index q = 0; q < pairs.n_points; ++q) {
    const Index begin = pairs.query_group_offsets[size_t(q)];
    const Index end = pairs.query_group_offsets[size_t(q) + 1];
    if (begin == end) continue;
    for (Index h = 0; h < heads; ++h) {
      S mx = logits(begin, h);
      for (Index m = begin + 1; m < end; ++m) mx = std::max(mx, logits(m, h));
      S z = S(0);
      for (Index m = begin; m < end; ++m) {
        const S e = std::exp(logits(m, h) - mx);
        probs(m, h) = e;
        z += e;
      }
      for (Index m = begin; m < end; ++m) probs(m, h) /= z;
    }
  }
  return probs;
}

template <class S>
Mat<S> scatter_softmax_backward(const Mat<S>& probs, const Mat<S>& gprobs,
                                const IndexPairs& pairs) {
  const Index heads = probs.cols();
  Mat<S> glogits(probs.rows(), heads);
  for (Index q = 0; q < pairs.n_points; ++q) {
    const Index begin = pairs.query_group_offsets[size_t(q)];
    const Index end = pairs.query_group_offsets[size_t(q) + 1];
    for (Index h = 0; h < heads; ++h) {
      S dot = S(0);
      for (Index m = begin; m < end; ++m) dot += probs(m, h) * gprobs(m, h);
      for (Index m = begin; m < end; ++m) {
        glogits(m, h) = probs(m, h) * (gprobs(m, h) - dot);
      }
    }
  }
  return glogits;
}

// ---------------------------------------------------------------------------
// MLP positional-bias baseline: raw relative coordinates -> per-head bias
// ---------------------------------------------------------------------------

template <class S>
struct MlpPositionBias {
  Linear<S> fc1;  // 3 -> hidden
  Linear<S> fc2;  // hidden -> heads
  Mat<S> hidden_pre;

  void init(Index hidden, Index heads, std::mt19937_64& rng) {
    fc1.init(3, hidden, rng);
    fc2.init(hidden, heads, rng);
  }

  Mat<S> forward(const Mat<S>& rel) {
    hidden_pre = fc1.forward(rel);
    return fc2.forward(gelu_forward(hidden_pre));
  }

  // Relative coordinates are not differentiated; only parameters get grads.
  void backward(const Mat<S>& gbias) {
    const Mat<S> gh = fc2.backward(gbias);
    (void)fc1.backward(gelu_backward(hidden_pre, gh));
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// ---------------------------------------------------------------------------
// Gather / scatter multi-head attention over index pairs
// ---------------------------------------------------------------------------

template <class S>
struct AttentionWorkspace {
  IndexPairs pairs;
  Mat<S> q, k, v;          // N x C, q already scaled
  Mat<S> eq, ek, ev;       // M x C when cRPE is active, else empty
  Mat<S> rel;              // M x 3 when a position encoding is active
  Mat<Index> bin_idx;      // M x 3 when cRPE is active
  Mat<S> logits;           // M x heads
  Mat<S> probs;            // M x heads, post-softmax attention weights
  Mat<S> pos_bias;         // M x heads when a position encoding is active
  Mat<S> y;                // N x C, pre output projection
  bool valid = false;
};

template <class S>
struct AttentionLayer {
  Index n_heads = 1;
  bool scale_logits = true;
  Linear<S> proj_q, proj_k, proj_v, proj_out;
  std::optional<CrpeTables<S>> crpe;
  std::optional<MlpPositionBias<S>> mlp_bias;
  AttentionWorkspace<S> ws;

  void init(Index channels, Index heads, bool scale, std::mt19937_64& rng) {
    if (channels % heads != 0) {
      throw std::invalid_argument("attention: channels " + std::to_string(channels) +
                                  " not divisible by heads " + std::to_string(heads));
    }
    n_heads = heads;
    scale_logits = scale;
    proj_q.init(channels, channels, rng);
    proj_k.init(channels, channels, rng);
    proj_v.init(channels, channels, rng);
    proj_out.init(channels, channels, rng);
  }

  void enable_crpe(Index bins, Index channels, S s_range, S init_scale, std::mt19937_64& rng) {
    crpe.emplace();
    crpe->init(bins, channels, s_range, init_scale, rng);
  }

  void enable_mlp_bias(Index hidden, std::mt19937_64& rng) {
    mlp_bias.emplace();
    mlp_bias->init(hidden, n_heads, rng);
  }

  Mat<S> forward(const Mat<S>& x, const Mat<S>& positions, const IndexPairs& pairs) {
    const Index n = x.rows(), c = x.cols();
    if (pairs.n_points != n) {
      throw std::invalid_argument("attention: pairs cover " + std::to_string(pairs.n_points) +
                                  " points, input has " + std::to_string(n));
    }
    if (crpe && mlp_bias) {
      throw std::logic_error("attention: cRPE and MLP position bias are mutually exclusive");
    }
    const Index nd = c / n_heads;
    const Index m = pairs.pair_count();

    ws.pairs = pairs;
    ws.q = proj_q.forward(x);
    if (scale_logits) ws.q *= S(1.0 / std::sqrt(double(nd)));
    ws.k = proj_k.forward(x);
    ws.v = proj_v.forward(x);

    const bool use_pe = crpe.has_value() || mlp_bias.has_value();
    if (use_pe) {
      ws.rel.resize(m, 3);
      for (Index p = 0; p < m; ++p) {
        ws.rel.row(p) = positions.row(pairs.index_q[size_t(p)]) -
                        positions.row(pairs.index_k[size_t(p)]);
      }
    } else {
      ws.rel.resize(0, 0);
    }
    if (crpe) {
      ws.bin_idx.resize(m, 3);
      for (Index p = 0; p < m; ++p) {
        for (int a = 0; a < 3; ++a) {
          ws.bin_idx(p, a) = quantize_rel(ws.rel(p, a), crpe->s_range, crpe->bins);
        }
      }
      ws.eq = crpe_encode(ws.bin_idx, *crpe, CrpeTables<S>::kRoleQ);
      ws.ek = crpe_encode(ws.bin_idx, *crpe, CrpeTables<S>::kRoleK);
      ws.ev = crpe_encode(ws.bin_idx, *crpe, CrpeTables<S>::kRoleV);
    } else {
      ws.eq.resize(0, 0);
      ws.ek.resize(0, 0);
      ws.ev.resize(0, 0);
      ws.bin_idx.resize(0, 0);
    }

    ws.logits.resize(m, n_heads);
    if (crpe) ws.pos_bias.setZero(m, n_heads);
    for (Index p = 0; p < m; ++p) {
      const Index i = pairs.index_q[size_t(p)];
      const Index j = pairs.index_k[size_t(p)];
      for (Index h = 0; h < n_heads; ++h) {
        const Index o = h * nd;
        S a = ws.q.row(i).segment(o, nd).dot(ws.k.row(j).segment(o, nd));
        if (crpe) {
          const S bias = ws.q.row(i).segment(o, nd).dot(ws.eq.row(p).segment(o, nd)) +
                         ws.k.row(j).segment(o, nd).dot(ws.ek.row(p).segment(o, nd));
          ws.pos_bias(p, h) = bias;
          a += bias;
        }
        ws.logits(p, h) = a;
      }
    }
    if (mlp_bias) {
      ws.pos_bias = mlp_bias->forward(ws.rel);
      ws.logits += ws.pos_bias;
    }

    ws.probs = scatter_softmax(ws.logits, pairs);

    ws.y.setZero(n, c);
    for (Index p = 0; p < m; ++p) {
      const Index i = pairs.index_q[size_t(p)];
      const Index j = pairs.index_k[size_t(p)];
      for (Index h = 0; h < n_heads; ++h) {
        const Index o = h * nd;
        if (crpe) {
          ws.y.row(i).segment(o, nd) +=
              ws.probs(p, h) * (ws.v.row(j).segment(o, nd) + ws.ev.row(p).segment(o, nd));
        } else {
          ws.y.row(i).segment(o, nd) += ws.probs(p, h) * ws.v.row(j).segment(o, nd);
        }
      }
    }
    ws.valid = true;
    return proj_out.forward(ws.y);
  }

  Mat<S> backward(const Mat<S>& gz) {
    if (!ws.valid) throw std::logic_error("attention: backward called without forward workspace");
    const Index n = ws.q.rows(), c = ws.q.cols();
    const Index nd = c / n_heads;
    const Index m = ws.pairs.pair_count();

    const Mat<S> gy = proj_out.backward(gz);

    Mat<S> gq = Mat<S>::Zero(n, c), gk = Mat<S>::Zero(n, c), gv = Mat<S>::Zero(n, c);
    Mat<S> gprobs(m, n_heads);
    Mat<S> geq, gek, gev;
    if (crpe) {
      geq = Mat<S>::Zero(m, c);
      gek = Mat<S>::Zero(m, c);
      gev = Mat<S>::Zero(m, c);
    }
    for (Index p = 0; p < m; ++p) {
      const Index i = ws.pairs.index_q[size_t(p)];
      const Index j = ws.pairs.index_k[size_t(p)];
      for (Index h = 0; h < n_heads; ++h) {
        const Index o = h * nd;
        auto gyi = gy.row(i).segment(o, nd);
        if (crpe) {
          gprobs(p, h) =
              gyi.dot(ws.v.row(j).segment(o, nd) + ws.ev.row(p).segment(o, nd));
          gev.row(p).segment(o, nd) = ws.probs(p, h) * gyi;
        } else {
          gprobs(p, h) = gyi.dot(ws.v.row(j).segment(o, nd));
        }
        gv.row(j).segment(o, nd) += ws.probs(p, h) * gyi;
      }
    }

    const Mat<S> glogits = scatter_softmax_backward(ws.probs, gprobs, ws.pairs);

    for (Index p = 0; p < m; ++p) {
      const Index i = ws.pairs.index_q[size_t(p)];
      const Index j = ws.pairs.index_k[size_t(p)];
      for (Index h = 0; h < n_heads; ++h) {
        const Index o = h * nd;
        const S ga = glogits(p, h);
        if (crpe) {
          gq.row(i).segment(o, nd) +=
              ga * (ws.k.row(j).segment(o, nd) + ws.eq.row(p).segment(o, nd));
          gk.row(j).segment(o, nd) +=
              ga * (ws.q.row(i).segment(o, nd) + ws.ek.row(p).segment(o, nd));
          geq.row(p).segment(o, nd) = ga * ws.q.row(i).segment(o, nd);
          gek.row(p).segment(o, nd) = ga * ws.k.row(j).segment(o, nd);
        } else {
          gq.row(i).segment(o, nd) += ga * ws.k.row(j).segment(o, nd);
          gk.row(j).segment(o, nd) += ga * ws.q.row(i).segment(o, nd);
        }
      }
    }

    if (mlp_bias) mlp_bias->backward(glogits);
    if (crpe) {
      crpe_encode_backward(ws.bin_idx, geq, *crpe, CrpeTables<S>::kRoleQ);
      crpe_encode_backward(ws.bin_idx, gek, *crpe, CrpeTables<S>::kRoleK);
      crpe_encode_backward(ws.bin_idx, gev, *crpe, CrpeTables<S>::kRoleV);
    }

    if (scale_logits) gq *= S(1.0 / std::sqrt(double(nd)));
    Mat<S> gx = proj_q.backward(gq);
    gx += proj_k.backward(gk);
    gx += proj_v.backward(gv);
    return gx;
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    proj_q.collect(prefix + ".q", out);
    proj_k.collect(prefix + ".k", out);
    proj_v.collect(prefix + ".v", out);
    proj_out.collect(prefix + ".out", out);
    if (crpe) crpe->collect(prefix + ".crpe", out);
    if (mlp_bias) mlp_bias->collect(prefix + ".mlp_pos", out);
  }
};

// ---------------------------------------------------------------------------
// Memory accounting: gather/scatter buffers vs the padded-window baseline
// ---------------------------------------------------------------------------

struct MemoryFootprint {
  // gather/scatter route
  std::int64_t gather_attn = 0;   // M * heads, the attn map
  std::int64_t gather_probs = 0;  // M * heads, softmax output
  std::int64_t gather_pe = 0;     // 3 * M * C gathered table rows when cRPE is on
  // padded-window baseline
  std::int64_t padded_attn = 0;   // windows * k_max^2 * heads
  std::int64_t padded_feats = 0;  // windows * k_max * C * 3 padded q/k/v

  std::int64_t gather_scatter() const { return gather_attn + gather_probs + gather_pe; }
  std::int64_t padded() const { return padded_attn + padded_feats; }
  double ratio() const {
    return padded() == 0 ? 0.0 : double(gather_scatter()) / double(padded());
  }
};

inline MemoryFootprint memory_footprint(const IndexPairs& pairs,
                                        const std::vector<Index>& window_occupancies,
                                        Index n_heads, Index head_dim, bool crpe_enabled) {
  std::int64_t m_check = 0, k_max = 0;
  for (Index k : window_occupancies) {
    m_check += std::int64_t(k) * std::int64_t(k);
    k_max = std::max<std::int64_t>(k_max, k);
  }
  if (m_check != pairs.pair_count()) {
    throw std::invalid_argument("memory_footprint: occupancies give sum k^2 = " +
                                std::to_string(m_check) + " but pairs hold M = " +
                                std::to_string(pairs.pair_count()));
  }
  const std::int64_t m = pairs.pair_count();
  const std::int64_t c = std::int64_t(n_heads) * std::int64_t(head_dim);
  const std::int64_t windows = std::int64_t(window_occupancies.size());
  MemoryFootprint fp;
  fp.gather_attn = m * n_heads;
  fp.gather_probs = m * n_heads;
  fp.gather_pe = crpe_enabled ? 3 * m * c : 0;
  fp.padded_attn = windows * k_max * k_max * n_heads;
  fp.padded_feats = windows * k_max * c * 3;
  return fp;
}

}  // namespace strata
