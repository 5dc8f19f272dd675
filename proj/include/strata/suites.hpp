#pragma once

// Gradient and oracle-equivalence suites shared by the CLI and the
// acceptance tests. All checks run in 64-bit.

#include "strata/gradcheck.hpp"
#include "strata/io.hpp"
#include "strata/network.hpp"
#include "strata/reference.hpp"
#include "strata/training.hpp"

#include <functional>
#include <random>
#include <string>
#include <vector>

namespace strata {

struct SuiteResult {
  std::string name;
  double max_err = 0.0;
  int instances = 0;
  bool pass = true;
  std::string note;
};

namespace detail {

inline Mat<double> rand_mat(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Mat<double> m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline Mat<double> rand_positions(Index n, std::mt19937_64& rng, double extent = 1.0) {
  std::uniform_real_distribution<double> dist(0.0, extent);
  Mat<double> p(n, 3);
  for (Index i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) p(i, d) = dist(rng);
  return p;
}

inline IndexPairs rand_stratified_pairs(const Mat<double>& pos, double s_win, bool shifted,
                                        Index scale = 4) {
  auto dense = build_dense_pairs(window_assign(pos, s_win, shifted));
  auto sparse = build_sparse_pairs(pos, scale, 2 * s_win, shifted);
  return merge_dedup(dense, sparse);
}

inline void fold(SuiteResult& r, const GradcheckReport& rep, double tol) {
  ++r.instances;
  if (!rep.finite) {
    r.pass = false;
    r.note = rep.worst;
    r.max_err = std::numeric_limits<double>::infinity();
    return;
  }
  if (rep.max_rel_err > r.max_err) {
    r.max_err = rep.max_rel_err;
    r.note = rep.worst;
  }
  if (rep.max_rel_err > tol) r.pass = false;
}

}  // namespace detail

// Finite-difference checks for every differentiable operation plus the
// end-to-end model. `instances` scales the per-op repetition count.
inline std::vector<SuiteResult> run_gradient_suite(std::uint64_t seed, double tol,
                                                   int instances = 20) {
  std::mt19937_64 rng(seed);
  std::vector<SuiteResult> results;

  {
    SuiteResult r;
    r.name = "linear";
    for (int t = 0; t < instances; ++t) {
      const Index n = 1 + Index(rng() % 4), cin = 1 + Index(rng() % 4),
                  cout = 1 + Index(rng() % 4);
      Mat<double> x = detail::rand_mat(n, cin, rng);
      Mat<double> W = detail::rand_mat(cin, cout, rng);
      Mat<double> b = detail::rand_mat(1, cout, rng);
      Mat<double> u = detail::rand_mat(n, cout, rng);
      auto loss = [&] { return (linear_forward(x, W, b).array() * u.array()).sum(); };
      Mat<double> gW = Mat<double>::Zero(cin, cout), gb = Mat<double>::Zero(1, cout);
      Mat<double> gx = linear_backward(x, W, u, gW, gb);
      detail::fold(r, gradcheck(loss, {&x, &W, &b}, {gx, gW, gb}), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "layer_norm";
    for (int t = 0; t < instances; ++t) {
      const Index n = 1 + Index(rng() % 4), c = 2 + Index(rng() % 5);
      Mat<double> x = detail::rand_mat(n, c, rng);
      Mat<double> gamma = detail::rand_mat(1, c, rng);
      Mat<double> beta = detail::rand_mat(1, c, rng);
      Mat<double> u = detail::rand_mat(n, c, rng);
      auto loss = [&] {
        return (layer_norm_forward(x, gamma, beta, 1e-5).array() * u.array()).sum();
      };
      LayerNormCtx<double> ctx;
      layer_norm_forward(x, gamma, beta, 1e-5, &ctx);
      Mat<double> gg = Mat<double>::Zero(1, c), gb = Mat<double>::Zero(1, c);
      Mat<double> gx = layer_norm_backward(ctx, gamma, u, gg, gb);
      detail::fold(r, gradcheck(loss, {&x, &gamma, &beta}, {gx, gg, gb}), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "activation";
    for (int t = 0; t < instances; ++t) {
      Mat<double> x = detail::rand_mat(3, 4, rng, 2.0);
      Mat<double> u = detail::rand_mat(3, 4, rng);
      auto loss = [&] { return (gelu_forward(x).array() * u.array()).sum(); };
      Mat<double> gx = gelu_backward(x, u);
      detail::fold(r, gradcheck(loss, {&x}, {gx}), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "cross_entropy";
    for (int t = 0; t < instances; ++t) {
      const Index n = 3 + Index(rng() % 3), k = 2 + Index(rng() % 3);
      Mat<double> logits = detail::rand_mat(n, k, rng, 2.0);
      std::vector<int> labels(static_cast<size_t>(n));
      for (auto& l : labels) l = int(rng() % std::uint64_t(k + 1)) - 1;
      auto loss = [&] { return cross_entropy_mean(logits, labels, -1); };
      CrossEntropyCtx<double> ctx;
      cross_entropy_mean(logits, labels, -1, &ctx);
      Mat<double> gx = cross_entropy_backward(ctx);
      detail::fold(r, gradcheck(loss, {&logits}, {gx}), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "scatter_softmax";
    for (int t = 0; t < instances; ++t) {
      const Index n = 5 + Index(rng() % 8);
      Mat<double> pos = detail::rand_positions(n, rng, 0.7);
      auto pairs = detail::rand_stratified_pairs(pos, 0.3, t % 2 == 1);
      const Index heads = 1 + Index(rng() % 3);
      Mat<double> logits = detail::rand_mat(pairs.pair_count(), heads, rng, 2.0);
      Mat<double> u = detail::rand_mat(pairs.pair_count(), heads, rng);
      auto loss = [&] { return (scatter_softmax(logits, pairs).array() * u.array()).sum(); };
      Mat<double> probs = scatter_softmax(logits, pairs);
      Mat<double> gl = scatter_softmax_backward(probs, u, pairs);
      detail::fold(r, gradcheck(loss, {&logits}, {gl}), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "crpe_encode";
    for (int t = 0; t < instances; ++t) {
      CrpeTables<double> tables;
      std::mt19937_64 trng(rng());
      tables.init(4, 6, 0.25, 0.5, trng);
      const Index m = 4 + Index(rng() % 6);
      Mat<Index> idx(m, 3);
      for (Index i = 0; i < m; ++i)
        for (int a = 0; a < 3; ++a) idx(i, a) = Index(rng() % 4);
      Mat<double> u = detail::rand_mat(m, 6, rng);
      const int role = int(rng() % 3);
      auto loss = [&] { return (crpe_encode(idx, tables, role).array() * u.array()).sum(); };
      for (auto& rr : tables.tables)
        for (auto& p : rr) p.zero_grad();
      crpe_encode_backward(idx, u, tables, role);
      std::vector<Mat<double>*> inputs;
      std::vector<Mat<double>> analytic;
      for (int a = 0; a < 3; ++a) {
        inputs.push_back(&tables.tables[size_t(role)][size_t(a)].value());
        analytic.push_back(tables.tables[size_t(role)][size_t(a)].grad());
      }
      detail::fold(r, gradcheck(loss, inputs, analytic), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "mlp_position_bias";
    for (int t = 0; t < instances; ++t) {
      MlpPositionBias<double> mlp;
      std::mt19937_64 mrng(rng());
      mlp.init(5, 2, mrng);
      const Index m = 4 + Index(rng() % 6);
      Mat<double> rel = detail::rand_mat(m, 3, rng, 0.3);
      Mat<double> u = detail::rand_mat(m, 2, rng);
      auto loss = [&] {
        MlpPositionBias<double> probe = mlp;
        return (probe.forward(rel).array() * u.array()).sum();
      };
      ParamList<double> ps;
      mlp.collect("mlp", ps);
      for (auto* p : ps) p->zero_grad();
      mlp.forward(rel);
      mlp.backward(u);
      std::vector<Mat<double>*> inputs;
      std::vector<Mat<double>> analytic;
      for (auto* p : ps) {
        inputs.push_back(&p->value());
        analytic.push_back(p->grad());
      }
      detail::fold(r, gradcheck(loss, inputs, analytic), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "attention";
    for (int t = 0; t < instances; ++t) {
      const Index heads = 1 + Index(rng() % 2), nd = 2, c = heads * nd;
      const Index n = 6 + Index(rng() % 6);
      Mat<double> x = detail::rand_mat(n, c, rng);
      Mat<double> pos = detail::rand_positions(n, rng, 0.5);
      auto pairs = detail::rand_stratified_pairs(pos, 0.25, t % 2 == 1);
      AttentionLayer<double> layer;
      std::mt19937_64 lrng(rng());
      layer.init(c, heads, true, lrng);
      if (t % 3 == 0) layer.enable_crpe(4, c, 0.25, 0.1, lrng);
      if (t % 3 == 1) layer.enable_mlp_bias(4, lrng);
      Mat<double> u = detail::rand_mat(n, c, rng);
      auto loss = [&] {
        AttentionLayer<double> probe = layer;
        return (probe.forward(x, pos, pairs).array() * u.array()).sum();
      };
      layer.forward(x, pos, pairs);
      ParamList<double> ps;
      layer.collect("attn", ps);
      for (auto* p : ps) p->zero_grad();
      Mat<double> gx = layer.backward(u);
      std::vector<Mat<double>*> inputs{&x};
      std::vector<Mat<double>> analytic{gx};
      for (auto* p : ps) {
        inputs.push_back(&p->value());
        analytic.push_back(p->grad());
      }
      detail::fold(r, gradcheck(loss, inputs, analytic), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "kpconv";
    for (int t = 0; t < std::max(1, instances / 2); ++t) {
      const Index n = 6 + Index(rng() % 4), cin = 2 + Index(rng() % 2), cout = 3;
      KPConv<double> conv;
      std::mt19937_64 crng(rng());
      conv.init(cin, cout, 0.15, 0.12, crng);
      Mat<double> pos = detail::rand_positions(n, rng, 0.4);
      Mat<double> feats = detail::rand_mat(n, cin, rng);
      auto nbrs = knn(pos, pos, std::min<Index>(3, n));
      Mat<double> u = detail::rand_mat(n, cout, rng);
      auto loss = [&] {
        KPConv<double> probe = conv;
        return (probe.forward(pos, feats, nbrs).array() * u.array()).sum();
      };
      conv.forward(pos, feats, nbrs);
      conv.W.zero_grad();
      Mat<double> gf = conv.backward(u);
      detail::fold(r, gradcheck(loss, {&feats, &conv.W.value()}, {gf, conv.W.grad()}), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "transformer_block";
    ModelConfig cfg;
    cfg.depths = {1};
    cfg.base_channels = 6;
    cfg.base_heads = 2;
    cfg.quant_bins = 4;
    cfg.num_classes = 2;
    for (int t = 0; t < std::max(1, instances / 4); ++t) {
      TransformerBlock<double> block;
      std::mt19937_64 brng(rng());
      block.init(6, 2, cfg, 0.3, brng);
      const Index n = 6 + Index(rng() % 4);
      Mat<double> x = detail::rand_mat(n, 6, rng);
      Mat<double> pos = detail::rand_positions(n, rng, 0.5);
      auto pairs = detail::rand_stratified_pairs(pos, 0.3, false);
      Mat<double> u = detail::rand_mat(n, 6, rng);
      auto loss = [&] {
        TransformerBlock<double> probe = block;
        return (probe.forward(x, pos, pairs).array() * u.array()).sum();
      };
      block.forward(x, pos, pairs);
      ParamList<double> ps;
      block.collect("blk", ps);
      for (auto* p : ps) p->zero_grad();
      Mat<double> gx = block.backward(u);
      std::vector<Mat<double>*> inputs{&x};
      std::vector<Mat<double>> analytic{gx};
      for (auto* p : ps) {
        inputs.push_back(&p->value());
        analytic.push_back(p->grad());
      }
      detail::fold(r, gradcheck(loss, inputs, analytic), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "downsample";
    for (int t = 0; t < std::max(1, instances / 4); ++t) {
      Downsample<double> down;
      std::mt19937_64 drng(rng());
      down.init(4, 8, 3, drng);
      StageState<double> in;
      const Index n = 8 + Index(rng() % 6);
      in.positions = detail::rand_positions(n, rng, 0.8);
      in.features = detail::rand_mat(n, 4, rng);
      Mat<double> u = detail::rand_mat((n + 3) / 4, 8, rng);
      auto loss = [&] {
        Downsample<double> probe = down;
        StageState<double> s{in.positions, in.features};
        return (probe.forward(s).features.array() * u.array()).sum();
      };
      down.forward(in);
      ParamList<double> ps;
      down.collect("down", ps);
      for (auto* p : ps) p->zero_grad();
      Mat<double> gf = down.backward(u);
      std::vector<Mat<double>*> inputs{&in.features};
      std::vector<Mat<double>> analytic{gf};
      for (auto* p : ps) {
        inputs.push_back(&p->value());
        analytic.push_back(p->grad());
      }
      detail::fold(r, gradcheck(loss, inputs, analytic), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "upsample";
    for (int t = 0; t < std::max(1, instances / 4); ++t) {
      Upsample<double> up;
      std::mt19937_64 urng(rng());
      up.init(4, 6, urng);
      StageState<double> coarse, fine;
      coarse.positions = detail::rand_positions(4, rng, 0.6);
      coarse.features = detail::rand_mat(4, 6, rng);
      fine.positions = detail::rand_positions(10, rng, 0.6);
      fine.features = detail::rand_mat(10, 4, rng);
      Mat<double> u = detail::rand_mat(10, 4, rng);
      auto loss = [&] {
        Upsample<double> probe = up;
        return (probe.forward(coarse, fine).features.array() * u.array()).sum();
      };
      up.forward(coarse, fine);
      ParamList<double> ps;
      up.collect("up", ps);
      for (auto* p : ps) p->zero_grad();
      auto [g_enc, g_dec] = up.backward(u);
      std::vector<Mat<double>*> inputs{&fine.features, &coarse.features};
      std::vector<Mat<double>> analytic{g_enc, g_dec};
      for (auto* p : ps) {
        inputs.push_back(&p->value());
        analytic.push_back(p->grad());
      }
      detail::fold(r, gradcheck(loss, inputs, analytic), tol);
    }
    results.push_back(r);
  }

  {
    SuiteResult r;
    r.name = "point_embedding";
    for (EmbeddingVariant v : {EmbeddingVariant::Linear, EmbeddingVariant::MaxPool,
                               EmbeddingVariant::AvgPool, EmbeddingVariant::KPConv}) {
      PointEmbedding<double> emb;
      std::mt19937_64 erng(rng());
      emb.init(v, 6, 5, 3, 0.15, 0.15, erng);
      const Index n = 8;
      Mat<double> pos = detail::rand_positions(n, rng, 0.4);
      Mat<double> feats = detail::rand_mat(n, 6, rng);
      Mat<double> u = detail::rand_mat(n, 5, rng);
      auto loss = [&] {
        PointEmbedding<double> probe = emb;
        return (probe.forward(pos, feats).array() * u.array()).sum();
      };
      emb.forward(pos, feats);
      ParamList<double> ps;
      emb.collect("emb", ps);
      for (auto* p : ps) p->zero_grad();
      Mat<double> gf = emb.backward(u);
      std::vector<Mat<double>*> inputs{&feats};
      std::vector<Mat<double>> analytic{gf};
      for (auto* p : ps) {
        inputs.push_back(&p->value());
        analytic.push_back(p->grad());
      }
      detail::fold(r, gradcheck(loss, inputs, analytic), tol);
    }
    results.push_back(r);
  }

  {
    // end-to-end: two-stage model under the segmentation loss, grads for all
    // parameters and the input features
    SuiteResult r;
    r.name = "model_end_to_end";
    ModelConfig cfg;
    cfg.depths = {1, 1};
    cfg.base_channels = 6;
    cfg.base_heads = 2;
    cfg.s_win0 = 0.35;
    cfg.knn_k = 4;
    cfg.quant_bins = 4;
    cfg.num_classes = 3;
    cfg.embedding_variant = EmbeddingVariant::KPConv;
    cfg.table_init_scale = 0.05;
    const Index n = 24;
    PointCloud<double> cloud;
    cloud.positions = detail::rand_positions(n, rng, 0.9);
    cloud.features = detail::rand_mat(n, 3, rng, 0.5).array() + 0.5;
    cloud.labels.resize(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) cloud.labels[size_t(i)] = int(i % 3);
    Model<double> model(cfg, rng());
    auto loss = [&] {
      Model<double> probe = model;
      return double(cross_entropy_mean(probe.forward(cloud), cloud.labels, -1));
    };
    model.zero_grad();
    Mat<double> logits = model.forward(cloud);
    CrossEntropyCtx<double> ctx;
    cross_entropy_mean(logits, cloud.labels, -1, &ctx);
    model.backward(cross_entropy_backward(ctx));
    std::vector<Mat<double>*> inputs{&cloud.features};
    std::vector<Mat<double>> analytic{model.input_feature_grad().leftCols(3)};
    for (auto* p : model.parameters()) {
      inputs.push_back(&p->value());
      analytic.push_back(p->grad());
    }
    detail::fold(r, gradcheck(loss, inputs, analytic), tol);
    results.push_back(r);
  }

  return results;
}

// Random gather/scatter-vs-padded-oracle comparisons; returns the largest
// absolute output deviation seen.
inline double run_oracle_compare(int trials, std::uint64_t seed, Index max_n = 256) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const Index heads = 1 + Index(rng() % 4);
    const Index nd = 2 + Index(rng() % 4);
    const Index c = heads * nd;
    const Index n = 8 + Index(rng() % std::uint64_t(max_n - 7));
    Mat<double> x = detail::rand_mat(n, c, rng);
    // extent varies so window occupancies range from a handful of points to
    // a few hundred
    const double extent = 0.5 + 0.1 * double(rng() % 10);
    Mat<double> pos = detail::rand_positions(n, rng, extent);
    const double s_win = 0.2 + 0.1 * double(rng() % 4);
    auto pairs = detail::rand_stratified_pairs(pos, s_win, t % 2 == 1, 4 + Index(rng() % 5));
    AttentionLayer<double> layer;
    std::mt19937_64 lrng(rng());
    layer.init(c, heads, true, lrng);
    if (t % 2 == 0) layer.enable_crpe(8, c, s_win, 0.2, lrng);
    Mat<double> fast = layer.forward(x, pos, pairs);
    Mat<double> ref = reference_attention_forward(x, pos, build_padded_oracle(pairs, n), layer);
    worst = std::max(worst, double((fast - ref).cwiseAbs().maxCoeff()));
  }
  return worst;
}

}  // namespace strata
