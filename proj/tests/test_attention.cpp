#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "strata/attention.hpp"
#include "strata/gradcheck.hpp"
#include "strata/reference.hpp"

#include <random>

using namespace strata;

namespace {

Mat<double> random_mat(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Mat<double> m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

Mat<double> random_positions(Index n, std::mt19937_64& rng, double extent = 1.0) {
  std::uniform_real_distribution<double> dist(0.0, extent);
  Mat<double> p(n, 3);
  for (Index i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) p(i, d) = dist(rng);
  return p;
}

// Stratified pairs over random geometry.
IndexPairs stratified_pairs(const Mat<double>& pos, double s_win, bool shifted = false) {
  auto dense = build_dense_pairs(window_assign(pos, s_win, shifted));
  auto sparse = build_sparse_pairs(pos, 4, 2 * s_win, shifted);
  return merge_dedup(dense, sparse);
}

AttentionLayer<double> make_layer(Index channels, Index heads, std::mt19937_64& rng,
                                  bool with_crpe, double s_range = 0.3) {
  AttentionLayer<double> layer;
  layer.init(channels, heads, true, rng);
  if (with_crpe) layer.enable_crpe(8, channels, s_range, 0.1, rng);
  return layer;
}

}  // namespace

TEST_CASE("quantize_rel: edges, midpoint, clamping") {
  CHECK(quantize_rel(-0.16 + 1e-9, 0.16, 16) == 0);
  CHECK(quantize_rel(0.0, 0.16, 16) == 8);
  CHECK(quantize_rel(1.5 * 0.16, 0.16, 16) == 15);
  CHECK(quantize_rel(-10.0, 0.16, 16) == 0);
}

TEST_CASE("CrpeTables: odd bin count rejected") {
  std::mt19937_64 rng(1);
  CrpeTables<double> t;
  CHECK_THROWS_AS(t.init(7, 4, 0.1, 0.1, rng), std::invalid_argument);
  CHECK_THROWS_AS(t.init(0, 4, 0.1, 0.1, rng), std::invalid_argument);
}

TEST_CASE("crpe_encode: zero tables, one-hot rows, naive loop oracle") {
  std::mt19937_64 rng(3);
  CrpeTables<double> tables;
  tables.init(8, 6, 0.2, 0.0, rng);  // zero init scale -> all-zero tables
  Mat<Index> idx(4, 3);
  idx << 0, 1, 2, 7, 7, 7, 3, 0, 5, 2, 2, 2;
  CHECK(crpe_encode(idx, tables, CrpeTables<double>::kRoleQ).cwiseAbs().maxCoeff() == 0.0);

  tables.tables[0][1].value()(7, 2) = 5.0;  // one-hot: axis y, bin 7
  auto e = crpe_encode(idx, tables, CrpeTables<double>::kRoleQ);
  CHECK(e(1, 2) == 5.0);  // row with idx_y == 7
  CHECK(e(0, 2) == 0.0);

  // random tables vs a naive per-pair three-lookup sum
  CrpeTables<double> rnd;
  rnd.init(8, 6, 0.2, 0.5, rng);
  auto got = crpe_encode(idx, rnd, CrpeTables<double>::kRoleV);
  for (Index i = 0; i < idx.rows(); ++i) {
    for (Index c = 0; c < 6; ++c) {
      const double want = rnd.tables[2][0].value()(idx(i, 0), c) +
                          rnd.tables[2][1].value()(idx(i, 1), c) +
                          rnd.tables[2][2].value()(idx(i, 2), c);
      CHECK(got(i, c) == want);
    }
  }
}

TEST_CASE("scatter_softmax: uniform, two-entry oracle, singletons, sums to one") {
  IndexPairs pairs;
  pairs.n_points = 3;
  pairs.index_q = {0, 0, 0, 1, 1, 2};
  pairs.index_k = {0, 1, 2, 0, 1, 2};
  pairs.rebuild_offsets();

  Mat<double> logits(6, 1);
  logits << 1, 1, 1, 0, std::log(2.0), 5;
  auto probs = scatter_softmax(logits, pairs);
  for (int m = 0; m < 3; ++m) CHECK(probs(m, 0) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(probs(3, 0) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(probs(4, 0) == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(probs(5, 0) == 1.0);

  std::mt19937_64 rng(5);
  Mat<double> big = random_mat(6, 4, rng, 30.0);  // exercise max-subtraction
  probs = scatter_softmax(big, pairs);
  for (Index q = 0; q < 3; ++q) {
    for (Index h = 0; h < 4; ++h) {
      double sum = 0;
      for (Index m = pairs.query_group_offsets[size_t(q)];
           m < pairs.query_group_offsets[size_t(q) + 1]; ++m)
        sum += probs(m, h);
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("attention: singleton pair aggregates to its own value row") {
  std::mt19937_64 rng(7);
  const Index c = 6, heads = 2;
  auto layer = make_layer(c, heads, rng, false);
  Mat<double> x = random_mat(1, c, rng);
  Mat<double> pos = random_positions(1, rng);
  IndexPairs pairs;
  pairs.n_points = 1;
  pairs.index_q = {0};
  pairs.index_k = {0};
  pairs.rebuild_offsets();
  layer.forward(x, pos, pairs);
  CHECK((layer.ws.y - layer.ws.v).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attention: all-zero tables reduce exactly to the no-cRPE forward") {
  std::mt19937_64 rng(11);
  const Index n = 20, c = 8, heads = 2;
  Mat<double> x = random_mat(n, c, rng);
  Mat<double> pos = random_positions(n, rng, 0.6);
  auto pairs = stratified_pairs(pos, 0.3);

  auto plain = make_layer(c, heads, rng, false);
  auto with_tables = plain;  // same projection weights
  with_tables.enable_crpe(8, c, 0.3, 0.0, rng);  // zero-scale init -> zero tables
  Mat<double> a = plain.forward(x, pos, pairs);
  Mat<double> b = with_tables.forward(x, pos, pairs);
  CHECK((a.array() == b.array()).all());
}

TEST_CASE("attention: matches the padded masked-attention oracle") {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 8; ++t) {
    const Index heads = 1 + Index(rng() % 4);
    const Index nd = 2 + Index(rng() % 3);
    const Index c = heads * nd;
    const Index n = 8 + Index(rng() % 56);
    Mat<double> x = random_mat(n, c, rng);
    Mat<double> pos = random_positions(n, rng, 0.8);
    auto pairs = stratified_pairs(pos, 0.25, t % 2 == 0);
    const bool use_crpe = t % 2 == 0;
    auto layer = make_layer(c, heads, rng, use_crpe, 0.25);
    Mat<double> fast = layer.forward(x, pos, pairs);
    auto mask = build_padded_oracle(pairs, n);
    Mat<double> ref = reference_attention_forward(x, pos, mask, layer);
    CHECK((fast - ref).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("attention: 32-bit path matches the 32-bit oracle within 1e-5") {
  std::mt19937_64 rng(15);
  for (int t = 0; t < 4; ++t) {
    const Index heads = 1 + Index(rng() % 3);
    const Index c = heads * 4;
    const Index n = 16 + Index(rng() % 32);
    std::uniform_real_distribution<float> dist(-1.f, 1.f);
    Mat<float> x(n, c);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < c; ++j) x(i, j) = dist(rng);
    Mat<float> pos(n, 3);
    for (Index i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d) pos(i, d) = 0.5f * (dist(rng) + 1.f);
    auto pairs = merge_dedup(build_dense_pairs(window_assign(pos, 0.25f, false)),
                             build_sparse_pairs(pos, Index(4), 0.5f, false));
    AttentionLayer<float> layer;
    layer.init(c, heads, true, rng);
    if (t % 2 == 0) layer.enable_crpe(8, c, 0.25f, 0.1f, rng);
    Mat<float> fast = layer.forward(x, pos, pairs);
    Mat<float> ref = reference_attention_forward(x, pos, build_padded_oracle(pairs, n), layer);
    CHECK((fast - ref).cwiseAbs().maxCoeff() < 1e-5f);
  }
}

TEST_CASE("attention: scaling the tables keeps shapes and softmax normalization") {
  std::mt19937_64 rng(21);
  const Index c = 8, heads = 2, n = 18;
  Mat<double> x = random_mat(n, c, rng);
  Mat<double> pos = random_positions(n, rng, 0.6);
  auto pairs = stratified_pairs(pos, 0.3);
  auto layer = make_layer(c, heads, rng, true, 0.3);
  Mat<double> base = layer.forward(x, pos, pairs);
  for (auto& role : layer.crpe->tables)
    for (auto& t : role) t.value() *= 5.0;
  Mat<double> scaled = layer.forward(x, pos, pairs);
  CHECK(scaled.rows() == base.rows());
  CHECK(scaled.cols() == base.cols());
  for (Index q = 0; q < n; ++q) {
    for (Index h = 0; h < heads; ++h) {
      double sum = 0;
      for (Index m = pairs.query_group_offsets[size_t(q)];
           m < pairs.query_group_offsets[size_t(q) + 1]; ++m)
        sum += layer.ws.probs(m, h);
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("attention: mlp position bias matches a naive per-pair loop via the oracle") {
  std::mt19937_64 rng(17);
  const Index heads = 2, c = 8, n = 16;
  Mat<double> x = random_mat(n, c, rng);
  Mat<double> pos = random_positions(n, rng, 0.6);
  auto pairs = stratified_pairs(pos, 0.3);
  auto layer = make_layer(c, heads, rng, false);
  layer.enable_mlp_bias(8, rng);
  Mat<double> fast = layer.forward(x, pos, pairs);
  Mat<double> ref = reference_attention_forward(x, pos, build_padded_oracle(pairs, n), layer);
  CHECK((fast - ref).cwiseAbs().maxCoeff() < 1e-10);

  // zero-weight MLP equals the no-position-encoding model
  auto no_pe = make_layer(c, heads, rng, false);
  no_pe.proj_q = layer.proj_q;
  no_pe.proj_k = layer.proj_k;
  no_pe.proj_v = layer.proj_v;
  no_pe.proj_out = layer.proj_out;
  layer.mlp_bias->fc2.W.value().setZero();
  layer.mlp_bias->fc2.b.value().setZero();
  Mat<double> zeroed = layer.forward(x, pos, pairs);
  Mat<double> bare = no_pe.forward(x, pos, pairs);
  CHECK((zeroed - bare).cwiseAbs().maxCoeff() == 0.0);

  // rows with identical relative offset produce identical bias
  Mat<double> rel(3, 3);
  rel << 0, 0, 0, 0, 0, 0, 0.1, 0, 0;
  MlpPositionBias<double> mlp;
  mlp.init(6, heads, rng);
  Mat<double> bias = mlp.forward(rel);
  CHECK((bias.row(0).array() == bias.row(1).array()).all());
}

TEST_CASE("attention backward: zero upstream, single-pair value path") {
  std::mt19937_64 rng(19);
  const Index c = 6, heads = 2, n = 10;
  Mat<double> x = random_mat(n, c, rng);
  Mat<double> pos = random_positions(n, rng, 0.5);
  auto pairs = stratified_pairs(pos, 0.25);
  auto layer = make_layer(c, heads, rng, true, 0.25);
  layer.forward(x, pos, pairs);
  Mat<double> gx = layer.backward(Mat<double>::Zero(n, c));
  CHECK(gx.cwiseAbs().maxCoeff() == 0.0);
  CHECK(layer.proj_q.W.grad().cwiseAbs().maxCoeff() == 0.0);
  CHECK(layer.crpe->tables[0][0].grad().cwiseAbs().maxCoeff() == 0.0);

  // single pair with identity projections: dL/dv_j equals the upstream row
  AttentionLayer<double> ident;
  ident.init(c, 1, false, rng);
  ident.proj_q.W.value().setIdentity();
  ident.proj_k.W.value().setIdentity();
  ident.proj_v.W.value().setIdentity();
  ident.proj_out.W.value().setIdentity();
  ident.proj_q.b.value().setZero();
  ident.proj_k.b.value().setZero();
  ident.proj_v.b.value().setZero();
  ident.proj_out.b.value().setZero();
  IndexPairs single;
  single.n_points = 2;
  single.index_q = {0, 1};
  single.index_k = {0, 1};
  single.rebuild_offsets();
  Mat<double> x2 = random_mat(2, c, rng);
  ident.forward(x2, random_positions(2, rng), single);
  Mat<double> up = Mat<double>::Zero(2, c);
  up.row(0) = random_mat(1, c, rng);
  // with identity out/value projections the input grad of point 0 is its
  // upstream row (value path) plus the attention-logit path, which vanishes
  // for a softmax singleton
  Mat<double> gin = ident.backward(up);
  CHECK((gin.row(0) - up.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(gin.row(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attention: output depends only on paired points") {
  std::mt19937_64 rng(23);
  const Index c = 6, heads = 3, n = 24;
  Mat<double> x = random_mat(n, c, rng);
  Mat<double> pos = random_positions(n, rng, 1.0);
  auto pairs = stratified_pairs(pos, 0.25);
  auto layer = make_layer(c, heads, rng, true, 0.25);
  const Mat<double> base = layer.forward(x, pos, pairs);

  // find a (query, non-key) pair
  for (Index q = 0; q < n; ++q) {
    std::set<Index> keys;
    for (Index m = pairs.query_group_offsets[size_t(q)];
         m < pairs.query_group_offsets[size_t(q) + 1]; ++m)
      keys.insert(pairs.index_k[size_t(m)]);
    Index outsider = -1;
    for (Index j = 0; j < n; ++j) {
      if (!keys.count(j)) {
        outsider = j;
        break;
      }
    }
    if (outsider < 0) continue;
    Mat<double> x2 = x;
    x2.row(outsider).array() += 0.37;
    auto layer2 = layer;
    const Mat<double> moved = layer2.forward(x2, pos, pairs);
    CHECK((moved.row(q).array() == base.row(q).array()).all());
    break;
  }
}

TEST_CASE("attention: gradcheck for inputs, projections and tables") {
  std::mt19937_64 rng(29);
  for (int t = 0; t < 4; ++t) {
    const Index heads = 1 + Index(rng() % 2);
    const Index nd = 2;
    const Index c = heads * nd;
    const Index n = 6 + Index(rng() % 6);
    Mat<double> x = random_mat(n, c, rng);
    Mat<double> pos = random_positions(n, rng, 0.5);
    auto pairs = stratified_pairs(pos, 0.25);
    auto layer = make_layer(c, heads, rng, true, 0.25);
    Mat<double> u = random_mat(n, c, rng);

    auto loss = [&] {
      AttentionLayer<double> probe = layer;
      return (probe.forward(x, pos, pairs).array() * u.array()).sum();
    };
    layer.forward(x, pos, pairs);
    ParamList<double> params;
    layer.collect("attn", params);
    for (auto* p : params) p->zero_grad();
    Mat<double> gx = layer.backward(u);

    std::vector<Mat<double>*> inputs{&x};
    std::vector<Mat<double>> analytic{gx};
    for (auto* p : params) {
      inputs.push_back(&p->value());
      analytic.push_back(p->grad());
    }
    auto rep = gradcheck(loss, inputs, analytic);
    CHECK_MESSAGE(rep.pass(1e-4), "instance ", t, " err ", rep.max_rel_err, " at ", rep.worst);
  }
}

TEST_CASE("memory_footprint: uniform window, the (1,9) case, empty cloud") {
  // single window of k points: padded and gathered attn maps coincide
  std::vector<WindowId> one(6, WindowId{0, 0, 0});
  auto pairs = build_dense_pairs(one);
  auto fp = memory_footprint(pairs, {6}, 3, 4, false);
  CHECK(fp.gather_attn == fp.padded_attn);

  // windows with occupancies (1, 9): attn-map ratio is 82/162
  std::vector<WindowId> skew;
  skew.push_back({5, 5, 5});
  for (int i = 0; i < 9; ++i) skew.push_back({0, 0, 0});
  auto pairs2 = build_dense_pairs(skew);
  auto fp2 = memory_footprint(pairs2, {1, 9}, 3, 4, false);
  CHECK(fp2.gather_attn == 82 * 3);
  CHECK(fp2.padded_attn == 162 * 3);

  IndexPairs none;
  none.n_points = 0;
  none.rebuild_offsets();
  auto fp3 = memory_footprint(none, {}, 3, 4, true);
  CHECK(fp3.gather_scatter() == 0);
  CHECK(fp3.padded() == 0);
}

TEST_CASE("memory_footprint: inconsistent occupancies rejected") {
  std::vector<WindowId> one(4, WindowId{0, 0, 0});
  auto pairs = build_dense_pairs(one);
  CHECK_THROWS_AS(memory_footprint(pairs, {3}, 2, 2, false), std::invalid_argument);
}
