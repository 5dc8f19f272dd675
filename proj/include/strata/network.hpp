#pragma once

#include "strata/attention.hpp"
#include "strata/geometry.hpp"
#include "strata/layers.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace strata {

enum class EmbeddingVariant { Linear, MaxPool, AvgPool, KPConv };

inline const char* to_string(EmbeddingVariant v) {
  switch (v) {
    case EmbeddingVariant::Linear: return "linear";
    case EmbeddingVariant::MaxPool: return "maxpool";
    case EmbeddingVariant::AvgPool: return "avgpool";
    case EmbeddingVariant::KPConv: return "kpconv";
  }
  return "?";
}

struct ModelConfig {
  std::vector<int> depths{2, 2, 6, 2};
  Index base_channels = 48;
  Index base_heads = 3;
  double s_win0 = 0.16;
  double s_win_large_factor = 2.0;
  Index downsample_scale = 8;  // FPS scale for the sparse long-range keys
  Index knn_k = 16;
  Index quant_bins = 16;
  Index num_classes = 13;
  EmbeddingVariant embedding_variant = EmbeddingVariant::KPConv;
  bool use_crpe = true;
  bool use_mlp_pos = false;
  bool use_stratified = true;
  bool use_shift = true;
  bool shift_original = true;
  bool shift_large = true;
  bool extra_early_downsample = false;
  bool input_xyz = true;  // append absolute xyz to the input features
  bool scale_logits = true;
  double grid_size = 0.04;  // preprocessing voxel size, 0 disables
  double table_init_scale = 0.02;
  Index mlp_pos_hidden = 16;

  Index stages() const { return Index(depths.size()); }
  Index channels_at(Index s) const { return base_channels << s; }
  Index heads_at(Index s) const { return base_heads << s; }
  double s_win_at(Index s) const { return s_win0 * double(Index(1) << s); }

  void validate() const {
    if (depths.empty()) throw std::invalid_argument("config: depths must be nonempty");
    for (int d : depths) {
      if (d < 1) throw std::invalid_argument("config: every stage needs at least one block");
    }
    if (base_channels < 1 || base_heads < 1 || base_channels % base_heads != 0) {
      throw std::invalid_argument("config: base_channels must be a positive multiple of base_heads");
    }
    if (!(s_win0 > 0)) throw std::invalid_argument("config: s_win0 must be > 0");
    if (!(s_win_large_factor > 0)) {
      throw std::invalid_argument("config: s_win_large_factor must be > 0");
    }
    if (downsample_scale < 1) throw std::invalid_argument("config: downsample_scale must be >= 1");
    if (knn_k < 1) throw std::invalid_argument("config: knn_k must be >= 1");
    if (num_classes < 1) throw std::invalid_argument("config: num_classes must be >= 1");
    if (use_crpe && (quant_bins < 2 || quant_bins % 2 != 0)) {
      throw std::invalid_argument("config: quant_bins must be even and >= 2");
    }
    if (use_crpe && use_mlp_pos) {
      throw std::invalid_argument("config: use_crpe and use_mlp_pos are mutually exclusive");
    }
    if (grid_size < 0) throw std::invalid_argument("config: grid_size must be >= 0");
  }
};

template <class S>
struct StageState {
  Mat<S> positions;  // N_s x 3
  Mat<S> features;   // N_s x C_s
};

// ---------------------------------------------------------------------------
// Rigid kernel-point convolution (13 points: center + icosahedron)
// ---------------------------------------------------------------------------

template <class S>
struct KernelPointSet {
  Mat<S> offsets;  // K x 3, meters
  S sigma = S(0.08);

  static KernelPointSet make(S radius, S sigma) {
    KernelPointSet k;
    k.sigma = sigma;
    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    const double nrm = std::sqrt(1.0 + phi * phi);
    k.offsets = Mat<S>::Zero(13, 3);
    Index row = 1;
    const double a = double(radius) / nrm;
    for (int s1 : {-1, 1}) {
      for (int s2 : {-1, 1}) {
        k.offsets.row(row++) << S(0), S(s1 * a), S(s2 * a * phi);
        k.offsets.row(row++) << S(s1 * a), S(s2 * a * phi), S(0);
        k.offsets.row(row++) << S(s1 * a * phi), S(0), S(s2 * a);
      }
    }
    return k;
  }

  Index count() const { return offsets.rows(); }
};

// out_i = sum_{j in nbr(i)} sum_k max(0, 1 - |p_j - p_i - x_k| / sigma) W_k f_j
template <class S>
struct KPConv {
  KernelPointSet<S> kernel;
  Parameter<S> W;  // (K * Cin) x Cout, stacked per kernel point

  // saved for backward
  Mat<S> x_saved;                    // N x Cin
  std::vector<Mat<S>> corr;          // per kernel point: N x k_eff correlations
  Mat<Index> nbr_idx;                // N x k_eff
  std::vector<Mat<S>> gathered;      // per kernel point: N x Cin weighted neighbor sums

  void init(Index cin, Index cout, S radius, S sigma, std::mt19937_64& rng) {
    kernel = KernelPointSet<S>::make(radius, sigma);
    W = Parameter<S>(xavier_uniform<S>(kernel.count() * cin, cout, rng));
  }

  Mat<S> forward(const Mat<S>& positions, const Mat<S>& features,
                 const NeighborTable<S>& neighbors) {
    const Index n = features.rows(), cin = features.cols();
    const Index k_eff = neighbors.indices.cols();
    const Index kp = kernel.count();
    const Index cout = W.value().cols();
    x_saved = features;
    nbr_idx = neighbors.indices;
    corr.assign(size_t(kp), Mat<S>::Zero(n, k_eff));
    gathered.assign(size_t(kp), Mat<S>::Zero(n, cin));
    Mat<S> out = Mat<S>::Zero(n, cout);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < k_eff; ++j) {
        const Index nb = neighbors.indices(i, j);
        const S dx = positions(nb, 0) - positions(i, 0);
        const S dy = positions(nb, 1) - positions(i, 1);
        const S dz = positions(nb, 2) - positions(i, 2);
        for (Index k = 0; k < kp; ++k) {
          const S ox = dx - kernel.offsets(k, 0);
          const S oy = dy - kernel.offsets(k, 1);
          const S oz = dz - kernel.offsets(k, 2);
          const S dist = std::sqrt(ox * ox + oy * oy + oz * oz);
          const S h = std::max(S(0), S(1) - dist / kernel.sigma);
          if (h > S(0)) {
            corr[size_t(k)](i, j) = h;
            gathered[size_t(k)].row(i) += h * features.row(nb);
          }
        }
      }
    }
    for (Index k = 0; k < kp; ++k) {
      out.noalias() += gathered[size_t(k)] * W.value().middleRows(k * cin, cin);
    }
    return out;
  }

  Mat<S> backward(const Mat<S>& gy) {
    const Index n = x_saved.rows(), cin = x_saved.cols();
    const Index kp = kernel.count();
    const Index k_eff = nbr_idx.cols();
    Mat<S> gx = Mat<S>::Zero(n, cin);
    for (Index k = 0; k < kp; ++k) {
      W.grad().middleRows(k * cin, cin).noalias() += gathered[size_t(k)].transpose() * gy;
      const Mat<S> back = gy * W.value().middleRows(k * cin, cin).transpose();  // N x Cin
      for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < k_eff; ++j) {
          const S h = corr[size_t(k)](i, j);
          if (h > S(0)) gx.row(nbr_idx(i, j)) += h * back.row(i);
        }
      }
    }
    return gx;
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    W.name = prefix + ".weight";
    out.push_back(&W);
  }
};

// ---------------------------------------------------------------------------
// First-layer point embedding
// ---------------------------------------------------------------------------

template <class S>
struct PointEmbedding {
  EmbeddingVariant variant = EmbeddingVariant::Linear;
  Index knn_k = 16;
  Linear<S> proj;                 // linear / pool variants
  std::optional<KPConv<S>> conv;  // kpconv variant

  // pool bookkeeping
  Mat<Index> nbr_idx;
  Mat<Index> argmax;
  Index pool_n = 0;

  void init(EmbeddingVariant v, Index cin, Index cout, Index k, S radius, S sigma,
            std::mt19937_64& rng) {
    variant = v;
    knn_k = k;
    if (v == EmbeddingVariant::KPConv) {
      conv.emplace();
      conv->init(cin, cout, radius, sigma, rng);
    } else {
      proj.init(cin, cout, rng);
    }
  }

  Mat<S> forward(const Mat<S>& positions, const Mat<S>& input_feats) {
    const Index n = positions.rows();
    const Index k_eff = std::min<Index>(knn_k, n);
    if (variant == EmbeddingVariant::Linear) return proj.forward(input_feats);
    const NeighborTable<S> nbrs = knn(positions, positions, k_eff);
    nbr_idx = nbrs.indices;
    if (variant == EmbeddingVariant::KPConv) return conv->forward(positions, input_feats, nbrs);

    const Mat<S> p = proj.forward(input_feats);
    const Index c = p.cols();
    pool_n = n;
    Mat<S> out(n, c);
    if (variant == EmbeddingVariant::MaxPool) {
      argmax.resize(n, c);
      for (Index i = 0; i < n; ++i) {
        for (Index ch = 0; ch < c; ++ch) {
          S best = p(nbr_idx(i, 0), ch);
          Index arg = nbr_idx(i, 0);
          for (Index j = 1; j < k_eff; ++j) {
            const Index nb = nbr_idx(i, j);
            if (p(nb, ch) > best) {
              best = p(nb, ch);
              arg = nb;
            }
          }
          out(i, ch) = best;
          argmax(i, ch) = arg;
        }
      }
    } else {  // AvgPool
      out.setZero();
      for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < k_eff; ++j) out.row(i) += p.row(nbr_idx(i, j));
        out.row(i) /= S(k_eff);
      }
    }
    return out;
  }

  Mat<S> backward(const Mat<S>& gy) {
    if (variant == EmbeddingVariant::Linear) return proj.backward(gy);
    if (variant == EmbeddingVariant::KPConv) return conv->backward(gy);
    const Index k_eff = nbr_idx.cols();
    Mat<S> gp = Mat<S>::Zero(pool_n, gy.cols());
    if (variant == EmbeddingVariant::MaxPool) {
      for (Index i = 0; i < pool_n; ++i) {
        for (Index ch = 0; ch < gy.cols(); ++ch) gp(argmax(i, ch), ch) += gy(i, ch);
      }
    } else {
      for (Index i = 0; i < pool_n; ++i) {
        for (Index j = 0; j < k_eff; ++j) gp.row(nbr_idx(i, j)) += gy.row(i) / S(k_eff);
      }
    }
    return proj.backward(gp);
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    if (variant == EmbeddingVariant::KPConv) {
      conv->collect(prefix + ".kpconv", out);
    } else {
      proj.collect(prefix + ".proj", out);
    }
  }
};

// ---------------------------------------------------------------------------
// Transformer block: Pre-LN attention and FFN with residuals
// ---------------------------------------------------------------------------

template <class S>
struct TransformerBlock {
  LayerNorm<S> norm1, norm2;
  AttentionLayer<S> attn;
  Linear<S> ffn1, ffn2;
  Mat<S> ffn_hidden_pre;

  void init(Index channels, Index heads, const ModelConfig& cfg, S s_win, std::mt19937_64& rng) {
    norm1.init(channels);
    norm2.init(channels);
    attn.init(channels, heads, cfg.scale_logits, rng);
    // The position-encoding seed is drawn whether or not one is enabled, so
    // toggling cRPE/MLP bias leaves every other parameter's init untouched.
    std::mt19937_64 pe_rng(rng());
    if (cfg.use_crpe) {
      attn.enable_crpe(cfg.quant_bins, channels, s_win, S(cfg.table_init_scale), pe_rng);
    } else if (cfg.use_mlp_pos) {
      attn.enable_mlp_bias(cfg.mlp_pos_hidden, pe_rng);
    }
    ffn1.init(channels, 4 * channels, rng);
    ffn2.init(4 * channels, channels, rng);
  }

  Mat<S> forward(const Mat<S>& x, const Mat<S>& positions, const IndexPairs& pairs) {
    Mat<S> h = x + attn.forward(norm1.forward(x), positions, pairs);
    ffn_hidden_pre = ffn1.forward(norm2.forward(h));
    return h + ffn2.forward(gelu_forward(ffn_hidden_pre));
  }

  Mat<S> backward(const Mat<S>& gy) {
    Mat<S> gh = gy + norm2.backward(ffn1.backward(
                         gelu_backward(ffn_hidden_pre, ffn2.backward(gy))));
    return gh + norm1.backward(attn.backward(gh));
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    norm1.collect(prefix + ".norm1", out);
    attn.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    ffn1.collect(prefix + ".ffn1", out);
    ffn2.collect(prefix + ".ffn2", out);
  }
};

// ---------------------------------------------------------------------------
// Downsample: FPS centroids, kNN grouping, Pre-LN projection, max pool
// ---------------------------------------------------------------------------

template <class S>
struct Downsample {
  LayerNorm<S> norm;
  Linear<S> proj;
  Index knn_k = 16;

  Mat<Index> group_idx;  // N' x k
  Mat<Index> argmax;     // N' x Cout
  Index src_n = 0;

  void init(Index cin, Index cout, Index k, std::mt19937_64& rng) {
    norm.init(cin);
    proj.init(cin, cout, rng);
    knn_k = k;
  }

  StageState<S> forward(const StageState<S>& in) {
    const Index n = in.positions.rows();
    const Index m = (n + 3) / 4;  // ceil(N/4)
    const std::vector<Index> centroids = farthest_point_sample(in.positions, m);
    StageState<S> out;
    out.positions.resize(m, 3);
    for (Index t = 0; t < m; ++t) out.positions.row(t) = in.positions.row(centroids[size_t(t)]);
    const Index k_eff = std::min<Index>(knn_k, n);
    group_idx = knn(out.positions, in.positions, k_eff).indices;
    const Mat<S> p = proj.forward(norm.forward(in.features));
    const Index cout = p.cols();
    src_n = n;
    out.features.resize(m, cout);
    argmax.resize(m, cout);
    for (Index t = 0; t < m; ++t) {
      for (Index ch = 0; ch < cout; ++ch) {
        S best = p(group_idx(t, 0), ch);
        Index arg = group_idx(t, 0);
        for (Index j = 1; j < k_eff; ++j) {
          const Index nb = group_idx(t, j);
          if (p(nb, ch) > best) {
            best = p(nb, ch);
            arg = nb;
          }
        }
        out.features(t, ch) = best;
        argmax(t, ch) = arg;
      }
    }
    return out;
  }

  Mat<S> backward(const Mat<S>& gy) {
    Mat<S> gp = Mat<S>::Zero(src_n, gy.cols());
    for (Index t = 0; t < gy.rows(); ++t) {
      for (Index ch = 0; ch < gy.cols(); ++ch) gp(argmax(t, ch), ch) += gy(t, ch);
    }
    return norm.backward(proj.backward(gp));
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    norm.collect(prefix + ".norm", out);
    proj.collect(prefix + ".proj", out);
  }
};

// ---------------------------------------------------------------------------
// Upsample: Pre-LN projections on both paths, inverse-distance interpolation
// ---------------------------------------------------------------------------

template <class S>
struct Upsample {
  LayerNorm<S> norm_skip;
  Linear<S> proj_skip;  // C_fine -> C_fine
  LayerNorm<S> norm_dec;
  Linear<S> proj_dec;  // C_coarse -> C_fine

  Mat<Index> interp_idx;  // T x k, k <= 3
  Mat<S> interp_w;        // T x k
  Index coarse_n = 0;

  void init(Index c_fine, Index c_coarse, std::mt19937_64& rng) {
    norm_skip.init(c_fine);
    proj_skip.init(c_fine, c_fine, rng);
    norm_dec.init(c_coarse);
    proj_dec.init(c_coarse, c_fine, rng);
  }

  StageState<S> forward(const StageState<S>& dec, const StageState<S>& enc) {
    const Index t_count = enc.positions.rows();
    coarse_n = dec.positions.rows();
    if (coarse_n >= 3) {
      const InterpWeights<S> iw = interp_weights(enc.positions, dec.positions);
      interp_idx = iw.indices;
      interp_w = iw.weights;
    } else {
      // Degenerate coarse sets fall back to the same inverse-square rule over
      // whatever sources exist.
      const Index k = coarse_n;
      const NeighborTable<S> nbrs = knn(enc.positions, dec.positions, k);
      interp_idx = nbrs.indices;
      interp_w.resize(t_count, k);
      for (Index t = 0; t < t_count; ++t) {
        if (nbrs.distances(t, 0) == S(0)) {
          interp_w.row(t).setZero();
          interp_w(t, 0) = S(1);
          continue;
        }
        double total = 0;
        for (Index j = 0; j < k; ++j) total += 1.0 / double(nbrs.distances(t, j) * nbrs.distances(t, j));
        for (Index j = 0; j < k; ++j) {
          interp_w(t, j) =
              S((1.0 / double(nbrs.distances(t, j) * nbrs.distances(t, j))) / total);
        }
      }
    }
    const Mat<S> skip = proj_skip.forward(norm_skip.forward(enc.features));
    const Mat<S> decp = proj_dec.forward(norm_dec.forward(dec.features));
    StageState<S> out;
    out.positions = enc.positions;
    out.features = skip;
    for (Index t = 0; t < t_count; ++t) {
      for (Index j = 0; j < interp_idx.cols(); ++j) {
        out.features.row(t) += interp_w(t, j) * decp.row(interp_idx(t, j));
      }
    }
    return out;
  }

  // Returns (grad wrt enc features, grad wrt dec features).
  std::pair<Mat<S>, Mat<S>> backward(const Mat<S>& gy) {
    Mat<S> g_enc = norm_skip.backward(proj_skip.backward(gy));
    Mat<S> g_decp = Mat<S>::Zero(coarse_n, proj_dec.W.value().cols());
    for (Index t = 0; t < gy.rows(); ++t) {
      for (Index j = 0; j < interp_idx.cols(); ++j) {
        g_decp.row(interp_idx(t, j)) += interp_w(t, j) * gy.row(t);
      }
    }
    Mat<S> g_dec = norm_dec.backward(proj_dec.backward(g_decp));
    return {std::move(g_enc), std::move(g_dec)};
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    norm_skip.collect(prefix + ".skip_norm", out);
    proj_skip.collect(prefix + ".skip_proj", out);
    norm_dec.collect(prefix + ".dec_norm", out);
    proj_dec.collect(prefix + ".dec_proj", out);
  }
};

// ---------------------------------------------------------------------------
// Full encoder-decoder segmentation model
// ---------------------------------------------------------------------------

template <class S>
class Model {
 public:
  // Input features are rgb; absolute xyz is appended when input_xyz is set.
  static constexpr Index kRgbChannels = 3;

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    // Each component draws from its own child stream, in a fixed order, so
    // config toggles only reinitialize the component they govern.
    std::mt19937_64 master(seed);
    auto child = [&master] { return std::mt19937_64(master()); };
    const Index c0 = cfg_.base_channels;
    const Index s_count = cfg_.stages();
    input_channels_ = kRgbChannels + (cfg_.input_xyz ? 3 : 0);

    const S radius = S(cfg_.s_win0 / 2);
    {
      std::mt19937_64 rng = child();
      embedding_.init(cfg_.embedding_variant, input_channels_, c0, cfg_.knn_k, radius, radius,
                      rng);
    }
    {
      std::mt19937_64 rng = child();
      if (cfg_.extra_early_downsample) {
        early_down_.emplace();
        early_down_->init(c0, c0, cfg_.knn_k, rng);
      }
    }
    blocks_.resize(size_t(s_count));
    for (Index s = 0; s < s_count; ++s) {
      const Index c = cfg_.channels_at(s);
      const Index h = cfg_.heads_at(s);
      blocks_[size_t(s)].resize(size_t(cfg_.depths[size_t(s)]));
      for (size_t b = 0; b < blocks_[size_t(s)].size(); ++b) {
        std::mt19937_64 rng = child();
        blocks_[size_t(s)][b].init(c, h, cfg_, S(cfg_.s_win_at(s)), rng);
      }
      if (s + 1 < s_count) {
        std::mt19937_64 rng = child();
        downs_.emplace_back();
        downs_.back().init(c, cfg_.channels_at(s + 1), cfg_.knn_k, rng);
      }
    }
    for (Index s = 0; s + 1 < s_count; ++s) {
      std::mt19937_64 rng = child();
      ups_.emplace_back();
      ups_.back().init(cfg_.channels_at(s), cfg_.channels_at(s + 1), rng);
    }
    {
      std::mt19937_64 rng = child();
      if (cfg_.extra_early_downsample) {
        up_early_.emplace();
        up_early_->init(c0, c0, rng);
      }
    }
    {
      std::mt19937_64 rng = child();
      head_norm_.init(c0);
      head_.init(c0, cfg_.num_classes, rng);
    }
  }

  const ModelConfig& config() const { return cfg_; }

  ParamList<S>& parameters() {
    if (params_.empty()) collect_all();
    return params_;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  // Forward over a cloud; returns logits aligned with the input point order.
  Mat<S> forward(const PointCloud<S>& cloud) {
    cloud.validate();
    const Index n = cloud.size();
    if (n < 1) throw std::invalid_argument("model: empty cloud");
    if (cloud.features.cols() != kRgbChannels) {
      throw std::invalid_argument("model: expected " + std::to_string(kRgbChannels) +
                                  " rgb feature channels, got " +
                                  std::to_string(cloud.features.cols()));
    }

    // Canonical internal ordering: points sorted by (position, features).
    // Every reduction downstream then sees the same operand order no matter
    // how the caller permuted the input, which is what makes the pipeline
    // exactly permutation-equivariant.
    perm_ = sort_permutation(cloud);
    Mat<S> pos(n, 3);
    Mat<S> feats_raw(n, cloud.features.cols());
    for (Index i = 0; i < n; ++i) {
      pos.row(i) = cloud.positions.row(perm_[size_t(i)]);
      feats_raw.row(i) = cloud.features.row(perm_[size_t(i)]);
    }
    Mat<S> input(n, input_channels_);
    input.leftCols(feats_raw.cols()) = feats_raw;
    if (cfg_.input_xyz) input.rightCols(3) = pos;

    pair_cache_.clear();
    fps_cache_.clear();

    input_pos_ = pos;
    emb_out_ = embedding_.forward(pos, input);

    const Index s_count = cfg_.stages();
    states_.assign(size_t(s_count), {});
    if (early_down_) {
      states_[0] = early_down_->forward({pos, emb_out_});
    } else {
      states_[0] = {pos, emb_out_};
    }

    enc_feats_.assign(size_t(s_count), {});
    for (Index s = 0; s < s_count; ++s) {
      Mat<S> x = states_[size_t(s)].features;
      for (size_t b = 0; b < blocks_[size_t(s)].size(); ++b) {
        const bool odd = (b % 2 == 1) && cfg_.use_shift;
        const IndexPairs& pairs =
            pairs_for(s, odd && cfg_.shift_original, odd && cfg_.shift_large);
        x = blocks_[size_t(s)][b].forward(x, states_[size_t(s)].positions, pairs);
      }
      enc_feats_[size_t(s)] = x;
      if (s + 1 < s_count) {
        states_[size_t(s + 1)] =
            downs_[size_t(s)].forward({states_[size_t(s)].positions, x});
      }
    }

    // decoder: deepest features upsampled stage by stage
    Mat<S> dec = enc_feats_[size_t(s_count - 1)];
    for (Index s = s_count - 1; s >= 1; --s) {
      StageState<S> out = ups_[size_t(s - 1)].forward(
          {states_[size_t(s)].positions, dec},
          {states_[size_t(s - 1)].positions, enc_feats_[size_t(s - 1)]});
      dec = std::move(out.features);
    }
    if (up_early_) {
      StageState<S> out =
          up_early_->forward({states_[0].positions, dec}, {input_pos_, emb_out_});
      dec = std::move(out.features);
    }
    pre_head_ = dec;

    Mat<S> logits_internal = head_.forward(head_norm_.forward(pre_head_));
    Mat<S> logits(n, logits_internal.cols());
    for (Index i = 0; i < n; ++i) logits.row(perm_[size_t(i)]) = logits_internal.row(i);
    return logits;
  }

  // Backward from logits gradients (input point order). Parameter grads
  // accumulate; the input-feature gradient lands in input_feature_grad().
  void backward(const Mat<S>& glogits) {
    const Index n = glogits.rows();
    Mat<S> g(n, glogits.cols());
    for (Index i = 0; i < n; ++i) g.row(i) = glogits.row(perm_[size_t(i)]);
    backward_internal(head_norm_.backward(head_.backward(g)));
  }

  // Backward from gradients of the pre-head decoder features (internal
  // order); used by the receptive-field export.
  void backward_from_pre_head(const Mat<S>& g_pre_head) { backward_internal(g_pre_head); }

  const Mat<S>& input_feature_grad() const { return input_grad_; }
  const Mat<S>& pre_head_features() const { return pre_head_; }
  const std::vector<Index>& sort_perm() const { return perm_; }

  // Gradient saliency of one output point's pre-head feature norm with
  // respect to every input point's features, normalized to [0, 1].
  std::vector<S> erf_saliency(const PointCloud<S>& cloud, Index target_index) {
    const Index n = cloud.size();
    if (target_index < 0 || target_index >= n) {
      throw std::out_of_range("erf: target index " + std::to_string(target_index) +
                              " outside [0," + std::to_string(n) + ")");
    }
    zero_grad();
    forward(cloud);
    Index internal = -1;
    for (Index i = 0; i < n; ++i) {
      if (perm_[size_t(i)] == target_index) {
        internal = i;
        break;
      }
    }
    Mat<S> g = Mat<S>::Zero(pre_head_.rows(), pre_head_.cols());
    const S nrm = pre_head_.row(internal).norm();
    if (nrm > S(0)) g.row(internal) = pre_head_.row(internal) / nrm;
    backward_from_pre_head(g);
    std::vector<S> saliency(size_t(n), S(0));
    S mx = S(0);
    for (Index i = 0; i < n; ++i) {
      const S v = input_grad_.row(i).norm();
      saliency[size_t(i)] = v;
      mx = std::max(mx, v);
    }
    if (mx > S(0)) {
      for (auto& v : saliency) v /= mx;
    }
    zero_grad();
    return saliency;
  }

 private:
  void backward_internal(const Mat<S>& g_pre_head) {
    const Index s_count = cfg_.stages();
    Mat<S> g_dec = g_pre_head;
    Mat<S> g_emb_skip;
    if (up_early_) {
      auto [g_enc, g_d] = up_early_->backward(g_dec);
      g_emb_skip = std::move(g_enc);
      g_dec = std::move(g_d);
    }
    // decoder chain backward, shallow to deep
    std::vector<Mat<S>> g_enc_feats(static_cast<size_t>(s_count));
    for (Index s = 1; s < s_count; ++s) {
      auto [g_enc, g_deeper] = ups_[size_t(s - 1)].backward(g_dec);
      g_enc_feats[size_t(s - 1)] = std::move(g_enc);
      g_dec = std::move(g_deeper);
    }
    g_enc_feats[size_t(s_count - 1)] = g_dec;

    // encoder stages, deep to shallow
    Mat<S> g_stage_input;
    for (Index s = s_count - 1; s >= 0; --s) {
      Mat<S> gx = g_enc_feats[size_t(s)];
      if (s + 1 < s_count) gx += downs_[size_t(s)].backward(g_stage_input);
      for (Index b = Index(blocks_[size_t(s)].size()) - 1; b >= 0; --b) {
        gx = blocks_[size_t(s)][size_t(b)].backward(gx);
      }
      g_stage_input = std::move(gx);
    }

    Mat<S> g_emb = early_down_ ? Mat<S>(early_down_->backward(g_stage_input)) : g_stage_input;
    if (g_emb_skip.size() != 0) g_emb += g_emb_skip;
    const Mat<S> g_input_internal = embedding_.backward(g_emb);
    input_grad_.resize(g_input_internal.rows(), g_input_internal.cols());
    for (Index i = 0; i < g_input_internal.rows(); ++i) {
      input_grad_.row(perm_[size_t(i)]) = g_input_internal.row(i);
    }
  }

  std::vector<Index> sort_permutation(const PointCloud<S>& cloud) const {
    const Index n = cloud.size();
    std::vector<Index> perm(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) perm[size_t(i)] = i;
    std::sort(perm.begin(), perm.end(), [&](Index a, Index b) {
      for (int d = 0; d < 3; ++d) {
        if (cloud.positions(a, d) != cloud.positions(b, d)) {
          return cloud.positions(a, d) < cloud.positions(b, d);
        }
      }
      for (Index j = 0; j < cloud.features.cols(); ++j) {
        if (cloud.features(a, j) != cloud.features(b, j)) {
          return cloud.features(a, j) < cloud.features(b, j);
        }
      }
      return false;
    });
    return perm;
  }

  const IndexPairs& pairs_for(Index stage, bool shift_small, bool shift_large) {
    const auto key = std::make_tuple(stage, shift_small, shift_large);
    auto it = pair_cache_.find(key);
    if (it != pair_cache_.end()) return it->second;
    const Mat<S>& pos = states_[size_t(stage)].positions;
    const S s_win = S(cfg_.s_win_at(stage));
    IndexPairs pairs = build_dense_pairs(window_assign(pos, s_win, shift_small));
    if (cfg_.use_stratified) {
      const std::vector<Index>& cand = fps_candidates(stage);
      const S s_large = S(cfg_.s_win_large_factor) * s_win;
      pairs = merge_dedup(pairs,
                          build_sparse_pairs_from_candidates(pos, cand, s_large, shift_large));
    }
    return pair_cache_.emplace(key, std::move(pairs)).first->second;
  }

  const std::vector<Index>& fps_candidates(Index stage) {
    auto it = fps_cache_.find(stage);
    if (it != fps_cache_.end()) return it->second;
    const Mat<S>& pos = states_[size_t(stage)].positions;
    const Index n = pos.rows();
    const Index m = (n + cfg_.downsample_scale - 1) / cfg_.downsample_scale;
    return fps_cache_.emplace(stage, farthest_point_sample(pos, m)).first->second;
  }

  void collect_all() {
    params_.clear();
    embedding_.collect("embed", params_);
    if (early_down_) early_down_->collect("early_down", params_);
    for (Index s = 0; s < cfg_.stages(); ++s) {
      for (size_t b = 0; b < blocks_[size_t(s)].size(); ++b) {
        blocks_[size_t(s)][b].collect("enc" + std::to_string(s) + ".block" + std::to_string(b),
                                      params_);
      }
      if (s + 1 < cfg_.stages()) {
        downs_[size_t(s)].collect("enc" + std::to_string(s) + ".down", params_);
      }
    }
    for (size_t i = 0; i < ups_.size(); ++i) {
      ups_[i].collect("up" + std::to_string(i), params_);
    }
    if (up_early_) up_early_->collect("up_early", params_);
    head_norm_.collect("head.norm", params_);
    head_.collect("head.linear", params_);
  }

  ModelConfig cfg_;
  PointEmbedding<S> embedding_;
  std::optional<Downsample<S>> early_down_;
  std::vector<std::vector<TransformerBlock<S>>> blocks_;
  std::vector<Downsample<S>> downs_;
  std::vector<Upsample<S>> ups_;
  std::optional<Upsample<S>> up_early_;
  LayerNorm<S> head_norm_;
  Linear<S> head_;

  ParamList<S> params_;
  Index input_channels_ = 0;

  // forward bookkeeping
  std::vector<Index> perm_;
  Mat<S> input_pos_;
  Mat<S> emb_out_;
  std::vector<StageState<S>> states_;
  std::vector<Mat<S>> enc_feats_;
  Mat<S> pre_head_;
  Mat<S> input_grad_;
  std::map<std::tuple<Index, bool, bool>, IndexPairs> pair_cache_;
  std::map<Index, std::vector<Index>> fps_cache_;
};

}  // namespace strata
