// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria are property-based plus scaled experiments; every
// tolerance and protocol constant is pinned here.

#include "strata/cli.hpp"
#include "strata/io.hpp"
#include "strata/suites.hpp"
#include "strata/training.hpp"

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

using namespace strata;

namespace {

struct Criterion {
  int id;
  bool pass;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

ModelConfig toy_model_config() {
  RunConfig cfg;
  apply_preset(cfg, "toy");
  return cfg.model;
}

// ---------------------------------------------------------------------------
// 1. gather/scatter attention equals the padded masked dense oracle
// ---------------------------------------------------------------------------
Criterion criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  const double worst = run_oracle_compare(100, 11, 256);
  const double secs = seconds_since(t0);
  const bool pass = std::isfinite(worst) && worst <= 1e-10 && secs < 60.0;
  return {1, pass,
          fmt("100 random instances (N<=256, heads<=4, cRPE on/off, stratified pairs): "
              "max |fast - oracle| = %.3e (tol 1e-10), %.1fs (budget 60s)",
              worst, secs)};
}

// ---------------------------------------------------------------------------
// 2. finite-difference gradient suite, every op plus the end-to-end model
// ---------------------------------------------------------------------------
Criterion criterion_2() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradient_suite(7, 1e-4, 20);
  const double secs = seconds_since(t0);
  bool pass = secs < 300.0;
  double worst = 0.0;
  std::string worst_name = "-";
  for (const auto& r : results) {
    if (!r.pass) pass = false;
    if (r.max_err > worst) {
      worst = r.max_err;
      worst_name = r.name;
    }
  }
  return {2, pass,
          fmt("%zu op suites + end-to-end model, h=1e-5, 64-bit: worst rel err %.3e (%s, tol "
              "1e-4), %.1fs (budget 300s)",
              results.size(), worst, worst_name.c_str(), secs)};
}

// ---------------------------------------------------------------------------
// 3. stratified superset and sparse-key cost share
// ---------------------------------------------------------------------------
Criterion criterion_3() {
  const auto cloud = synth_scene<double>(room_spec(1, 2000));
  const double s_win = 0.5;
  const auto dense = build_dense_pairs(window_assign(cloud.positions, s_win, false));
  const auto sparse = build_sparse_pairs(cloud.positions, Index(8), 2 * s_win, false);
  const auto merged = merge_dedup(dense, sparse);

  // exact superset check over the sorted pair lists
  bool superset = true;
  size_t j = 0;
  for (size_t i = 0; i < dense.index_q.size() && superset; ++i) {
    while (j < merged.index_q.size() &&
           (merged.index_q[j] < dense.index_q[i] ||
            (merged.index_q[j] == dense.index_q[i] && merged.index_k[j] < dense.index_k[i]))) {
      ++j;
    }
    superset = j < merged.index_q.size() && merged.index_q[j] == dense.index_q[i] &&
               merged.index_k[j] == dense.index_k[i];
  }

  const double share =
      double(merged.pair_count() - dense.pair_count()) / double(merged.pair_count());
  const bool pass = superset && share < 0.30;
  return {3, pass,
          fmt("2000-pt surface cloud, s=8, s_win_large=2*s_win: merged %lld pairs >= dense %lld "
              "(superset %s), sparse-only share %.1f%% (< 30%%)",
              (long long)merged.pair_count(), (long long)dense.pair_count(),
              superset ? "exact" : "VIOLATED", 100.0 * share)};
}

// ---------------------------------------------------------------------------
// 4. memory accounting: skewed preset ratio and the analytic (1,9) case
// ---------------------------------------------------------------------------
Criterion criterion_4() {
  const auto cloud = synth_scene<double>(skewed_spec(5));
  const double s_win = 0.4;
  const auto ids = window_assign(cloud.positions, s_win, false);
  std::map<WindowId, Index> hist;
  for (const auto& id : ids) hist[id]++;
  std::vector<Index> occ;
  for (const auto& [id, k] : hist) occ.push_back(k);
  const auto pairs = build_dense_pairs(ids);
  const auto fp = memory_footprint(pairs, occ, 2, 12, false);
  const double ratio = fp.ratio();

  // two windows with occupancies (1, 9)
  std::vector<WindowId> two;
  two.push_back({9, 9, 9});
  for (int i = 0; i < 9; ++i) two.push_back({0, 0, 0});
  const auto fp2 = memory_footprint(build_dense_pairs(two), {1, 9}, 3, 4, false);
  const bool exact = fp2.gather_attn == 82 * 3 && fp2.padded_attn == 162 * 3;

  const bool pass = ratio < 0.7 && exact;
  return {4, pass,
          fmt("skewed preset (%zu windows, k_max %lld): gather/padded = %.4f (< 0.7); "
              "(1,9) case attn counts %lld/%lld = 82/162 %s",
              occ.size(), (long long)*std::max_element(occ.begin(), occ.end()), ratio,
              (long long)(fp2.gather_attn / 3), (long long)(fp2.padded_attn / 3),
              exact ? "exactly" : "MISMATCH")};
}

// ---------------------------------------------------------------------------
// 5. toy overfit: 2-class scene, 2-stage model
// ---------------------------------------------------------------------------
Criterion criterion_5() {
  const auto t0 = std::chrono::steady_clock::now();
  auto scene = synth_scene<float>(two_class_spec(7, 2000));
  ModelConfig cfg = toy_model_config();
  Model<float> model(cfg, 7);
  TrainOptions opt;
  opt.steps = 500;
  opt.lr = 1e-3;
  opt.weight_decay = 0.1;
  opt.seed = 7;
  const TrainResult res = train_toy(model, scene, opt);
  const double secs = seconds_since(t0);

  long first95 = -1;
  for (const auto& row : res.history) {
    if (row.oa >= 0.95) {
      first95 = row.step;
      break;
    }
  }
  const bool loss_drop = res.history[200].loss < res.history[0].loss;
  const bool pass = first95 >= 0 && loss_drop && secs < 300.0;
  return {5, pass,
          fmt("2000 pts, 2 stages: train OA >= 95%% first at step %ld (budget 500), "
              "loss step200 %.4f < step0 %.4f: %s, final OA %.4f, %.1fs (budget 300s)",
              first95, res.history[200].loss, res.history[0].loss, loss_drop ? "yes" : "NO",
              res.final_metrics.oa, secs)};
}

// ---------------------------------------------------------------------------
// 6. ablation direction checks, 3 seeds averaged
// ---------------------------------------------------------------------------
Criterion criterion_6() {
  const std::vector<std::uint64_t> seeds = {1, 2, 3};

  // (a) kpconv vs linear first-layer embedding on a geometry-labeled scene
  double acc_kpconv = 0, acc_linear = 0;
  for (std::uint64_t seed : seeds) {
    auto scene = synth_scene<float>(geometry_spec(seed));
    for (const auto variant : {EmbeddingVariant::KPConv, EmbeddingVariant::Linear}) {
      ModelConfig cfg = toy_model_config();
      cfg.embedding_variant = variant;
      cfg.input_xyz = false;
      Model<float> model(cfg, seed);
      TrainOptions opt;
      opt.steps = 100;
      opt.lr = 1e-3;
      opt.weight_decay = 0.01;
      opt.seed = seed;
      const TrainResult res = train_toy(model, scene, opt);
      (variant == EmbeddingVariant::KPConv ? acc_kpconv : acc_linear) +=
          res.final_metrics.oa / double(seeds.size());
    }
  }
  const bool dir_a = acc_kpconv >= acc_linear;

  // (b) stratified vs vanilla steps-to-threshold on the beacon scene
  const double threshold = 0.30;
  const long budget = 200;
  double steps_strat = 0, steps_vanilla = 0;
  for (std::uint64_t seed : seeds) {
    auto scene = synth_scene<float>(beacon_spec(seed));
    for (const bool strat : {true, false}) {
      ModelConfig cfg = toy_model_config();
      cfg.s_win0 = 0.25;
      cfg.embedding_variant = EmbeddingVariant::Linear;
      cfg.input_xyz = false;
      cfg.use_stratified = strat;
      Model<float> model(cfg, seed);
      TrainOptions opt;
      opt.steps = budget;
      opt.lr = 1e-3;
      opt.weight_decay = 0.01;
      opt.seed = seed;
      const TrainResult res = train_toy(model, scene, opt);
      long first = budget;
      for (const auto& row : res.history) {
        if (row.loss <= threshold) {
          first = row.step;
          break;
        }
      }
      (strat ? steps_strat : steps_vanilla) += double(first) / double(seeds.size());
    }
  }
  const bool dir_b = steps_strat <= steps_vanilla;

  return {6, dir_a && dir_b,
          fmt("(a) embedding mean train OA over 3 seeds: kpconv %.4f >= linear %.4f: %s; "
              "(b) mean steps to loss<=%.2f: stratified %.1f <= vanilla %.1f: %s",
              acc_kpconv, acc_linear, dir_a ? "yes" : "NO", threshold, steps_strat,
              steps_vanilla, dir_b ? "yes" : "NO")};
}

// ---------------------------------------------------------------------------
// 7. exact permutation robustness
// ---------------------------------------------------------------------------
Criterion criterion_7() {
  auto scene = synth_scene<float>(two_class_spec(19, 1200));
  ModelConfig cfg = toy_model_config();
  Model<float> model(cfg, 19);
  TrainOptions opt;
  opt.steps = 80;
  opt.lr = 1e-3;
  opt.weight_decay = 0.1;
  opt.seed = 19;
  train_toy(model, scene, opt);
  const auto rows = robustness_eval(
      model, scene,
      {{Perturbation::Kind::None, 0, 0}, {Perturbation::Kind::Permute, 0, 4242}});
  const bool equal = rows[0].second == rows[1].second;
  return {7, equal,
          fmt("trained model: Perm. row (mIoU %.6f, OA %.6f, confusion) %s None row "
              "(mIoU %.6f, OA %.6f)",
              rows[1].second.miou, rows[1].second.oa, equal ? "==" : "!=", rows[0].second.miou,
              rows[0].second.oa)};
}

// ---------------------------------------------------------------------------
// 8. CLI determinism: byte-identical metrics CSV across two runs
// ---------------------------------------------------------------------------
Criterion criterion_8() {
  namespace fs = std::filesystem;
  const fs::path base = fs::temp_directory_path() / "strata_acceptance_c8";
  fs::remove_all(base);
  fs::create_directories(base);
  const std::string run_a = (base / "a").string();
  const std::string run_b = (base / "b").string();
  const std::vector<std::string> common = {"train-toy", "--threads", "1", "--seed", "7",
                                           "--steps", "40"};
  auto args_a = common;
  args_a.push_back("--out");
  args_a.push_back(run_a);
  auto args_b = common;
  args_b.push_back("--out");
  args_b.push_back(run_b);
  const int rc_a = run_command(args_a);
  const int rc_b = run_command(args_b);
  bool identical = false;
  if (rc_a == 0 && rc_b == 0) {
    identical = detail::read_file(run_a + "/metrics.csv") ==
                detail::read_file(run_b + "/metrics.csv");
  }
  fs::remove_all(base);
  return {8, rc_a == 0 && rc_b == 0 && identical,
          fmt("train-toy --threads 1 --seed 7 --steps 40 twice: exits (%d,%d), metrics.csv "
              "byte-identical: %s",
              rc_a, rc_b, identical ? "yes" : "NO")};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  if (argc > 1 && std::strcmp(argv[1], "--only") == 0 && argc > 2) only = std::atoi(argv[2]);

  std::vector<Criterion (*)()> criteria = {criterion_1, criterion_2, criterion_3, criterion_4,
                                           criterion_5, criterion_6, criterion_7, criterion_8};
  int failures = 0;
  for (int i = 0; i < int(criteria.size()); ++i) {
    if (only != 0 && only != i + 1) continue;
    const Criterion c = criteria[size_t(i)]();
    std::printf("[%d/8] %s  %s\n", c.id, c.pass ? "PASS" : "FAIL", c.detail.c_str());
    std::fflush(stdout);
    if (!c.pass) ++failures;
  }
  if (only == 0) {
    std::printf("acceptance: %d/8 criteria pass\n", 8 - failures);
  }
  return failures == 0 ? 0 : 1;
}
