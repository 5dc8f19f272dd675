#include "strata/cli.hpp"

#include "strata/io.hpp"
#include "strata/suites.hpp"
#include "strata/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace strata {
namespace {

using json = nlohmann::json;

PointCloud<float> scene_by_name(const std::string& name, std::uint64_t seed) {
  if (name == "two-class") return synth_scene<float>(two_class_spec(seed));
  if (name == "beacon") return synth_scene<float>(beacon_spec(seed));
  if (name == "geometry") return synth_scene<float>(geometry_spec(seed));
  if (name == "room") return synth_scene<float>(room_spec(seed));
  if (name == "skewed") return synth_scene<float>(skewed_spec(seed));
  throw std::runtime_error("unknown scene '" + name +
                           "' (expected two-class|beacon|geometry|room|skewed)");
}

std::string metrics_csv(const std::vector<TrainRow>& history) {
  std::string out = "step,loss,oa,macc,miou\n";
  char buf[160];
  for (const auto& row : history) {
    const int len = std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g\n", row.step,
                                  row.loss, row.oa, row.macc, row.miou);
    out.append(buf, size_t(len));
  }
  return out;
}

RunConfig resolve_config(const std::string& config_path, const std::string& fallback_preset) {
  if (!config_path.empty()) return load_config(config_path);
  RunConfig cfg;
  apply_preset(cfg, fallback_preset);
  return cfg;
}

PointCloud<float> preprocess(const PointCloud<float>& cloud, const RunConfig& cfg) {
  if (cfg.model.grid_size > 0) return grid_sample(cloud, float(cfg.model.grid_size));
  return cloud;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, double tol, int instances) {
  const auto results = run_gradient_suite(seed, tol, instances);
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("%-18s instances=%-3d max_rel_err=%.3e  %s\n", r.name.c_str(), r.instances,
                r.max_err, r.pass ? "pass" : "FAIL");
    if (!r.pass) {
      std::printf("  worst: %s\n", r.note.c_str());
      all_pass = false;
    }
  }
  std::printf("gradcheck: %s (tol %.1e, seed %llu)\n", all_pass ? "all suites pass" : "FAILED",
              tol, (unsigned long long)seed);
  return all_pass ? 0 : 1;
}

int cmd_oracle_compare(int trials, std::uint64_t seed, double tol, long max_n) {
  const double worst = run_oracle_compare(trials, seed, Index(max_n));
  std::printf("oracle-compare: %d trials, max |gather/scatter - padded oracle| = %.3e\n", trials,
              worst);
  const bool ok = std::isfinite(worst) && worst <= tol;
  std::printf("oracle-compare: %s (tol %.1e)\n", ok ? "pass" : "FAIL", tol);
  return ok ? 0 : 1;
}

int cmd_bench_memory(const std::string& cloud_path, const std::string& preset,
                     const std::string& config_path, std::uint64_t seed, bool with_crpe) {
  RunConfig cfg = resolve_config(config_path, "toy");
  PointCloud<float> cloud =
      cloud_path.empty() ? scene_by_name(preset, seed) : read_cloud<float>(cloud_path);
  cloud = preprocess(cloud, cfg);

  const float s_win = float(cfg.model.s_win0);
  const auto ids = window_assign(cloud.positions, s_win, false);
  std::map<WindowId, Index> hist;
  for (const auto& id : ids) hist[id]++;
  std::vector<Index> occupancies;
  occupancies.reserve(hist.size());
  Index k_max = 0;
  for (const auto& [id, k] : hist) {
    occupancies.push_back(k);
    k_max = std::max(k_max, k);
  }
  const auto pairs = build_dense_pairs(ids);
  const Index head_dim = cfg.model.base_channels / cfg.model.base_heads;
  const MemoryFootprint fp =
      memory_footprint(pairs, occupancies, cfg.model.base_heads, head_dim, with_crpe);

  std::printf("points            %lld\n", (long long)cloud.size());
  std::printf("windows           %zu (k_max %lld, window %.3f m)\n", occupancies.size(),
              (long long)k_max, double(s_win));
  std::printf("pairs M           %lld\n", (long long)pairs.pair_count());
  std::printf("gather/scatter    %lld scalars (attn %lld + probs %lld + pe %lld)\n",
              (long long)fp.gather_scatter(), (long long)fp.gather_attn,
              (long long)fp.gather_probs, (long long)fp.gather_pe);
  std::printf("padded baseline   %lld scalars (attn %lld + qkv %lld)\n", (long long)fp.padded(),
              (long long)fp.padded_attn, (long long)fp.padded_feats);
  std::printf("attn-map ratio    %.4f\n", double(fp.gather_attn) / double(fp.padded_attn));
  std::printf("total ratio       %.4f\n", fp.ratio());
  return 0;
}

int cmd_train_toy(const std::string& config_path, const std::string& scene_name, long steps,
                  long seed, double lr, const std::string& out_dir) {
  RunConfig cfg = resolve_config(config_path, "toy");
  if (steps >= 0) cfg.steps = steps;
  if (seed >= 0) cfg.seed = std::uint64_t(seed);
  if (lr > 0) cfg.lr = lr;
  cfg.model.validate();

  PointCloud<float> scene = scene_by_name(scene_name, cfg.seed);
  scene = preprocess(scene, cfg);
  int classes = 0;
  for (int lab : scene.labels) classes = std::max(classes, lab + 1);
  if (cfg.model.num_classes != classes) {
    std::printf("note: scene '%s' has %d classes, overriding config num_classes=%lld\n",
                scene_name.c_str(), classes, (long long)cfg.model.num_classes);
    cfg.model.num_classes = classes;
  }
  cfg.model.validate();

  Model<float> model(cfg.model, cfg.seed);
  TrainOptions opt;
  opt.steps = cfg.steps;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  opt.seed = cfg.seed;
  opt.augmentations = cfg.augmentations();

  const TrainResult result = train_toy(model, scene, opt);

  std::filesystem::create_directories(out_dir);
  const auto path = [&](const char* name) {
    return (std::filesystem::path(out_dir) / name).string();
  };
  detail::write_file(path("metrics.csv"), metrics_csv(result.history));
  save_checkpoint(model.parameters(), path("model.stw1"));
  detail::write_file(path("config.cfg"), config_to_text(cfg));

  json summary;
  summary["scene"] = scene_name;
  summary["points"] = long(scene.size());
  summary["classes"] = classes;
  summary["steps"] = cfg.steps;
  summary["seed"] = cfg.seed;
  summary["parameters"] = model.parameters().size();
  summary["final"] = {{"loss", result.history.empty() ? 0.0 : result.history.back().loss},
                      {"oa", result.final_metrics.oa},
                      {"macc", result.final_metrics.macc},
                      {"miou", result.final_metrics.miou}};
  detail::write_file(path("summary.json"), summary.dump(2) + "\n");

  std::printf("train-toy: scene=%s steps=%ld final oa=%.4f macc=%.4f miou=%.4f\n",
              scene_name.c_str(), cfg.steps, result.final_metrics.oa, result.final_metrics.macc,
              result.final_metrics.miou);
  std::printf("train-toy: wrote %s, %s, %s, %s\n", path("metrics.csv").c_str(),
              path("model.stw1").c_str(), path("config.cfg").c_str(),
              path("summary.json").c_str());
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& config_path,
              const std::string& cloud_path, const std::string& out_path) {
  RunConfig cfg = load_config(config_path);
  Model<float> model(cfg.model, 0);
  load_checkpoint(model.parameters(), checkpoint);
  PointCloud<float> cloud = preprocess(read_cloud<float>(cloud_path), cfg);
  const Mat<float> logits = model.forward(cloud);
  cloud.labels = argmax_labels(logits);
  write_cloud(cloud, out_path);
  std::printf("infer: %lld points labeled, wrote %s\n", (long long)cloud.size(),
              out_path.c_str());
  return 0;
}

int cmd_erf(const std::string& checkpoint, const std::string& config_path,
            const std::string& cloud_path, long target, const std::string& out_path) {
  RunConfig cfg = load_config(config_path);
  Model<float> model(cfg.model, 0);
  load_checkpoint(model.parameters(), checkpoint);
  PointCloud<float> cloud = read_cloud<float>(cloud_path);
  const auto saliency = model.erf_saliency(cloud, Index(target));
  PointCloud<float> out = cloud;
  for (Index i = 0; i < out.size(); ++i) {
    out.features.row(i).setConstant(saliency[size_t(i)]);
  }
  write_cloud(out, out_path);
  std::printf("erf: target %ld, wrote per-point saliency to %s\n", target, out_path.c_str());
  return 0;
}

int cmd_robustness(const std::string& checkpoint, const std::string& config_path,
                   const std::string& cloud_path, std::uint64_t seed) {
  RunConfig cfg = load_config(config_path);
  Model<float> model(cfg.model, 0);
  load_checkpoint(model.parameters(), checkpoint);
  PointCloud<float> cloud = preprocess(read_cloud<float>(cloud_path), cfg);
  if (!cloud.has_labels()) {
    throw std::runtime_error("robustness: cloud file carries no labels");
  }
  const auto rows = robustness_eval(model, cloud, standard_perturbations(seed));
  std::printf("%-8s", "");
  for (const auto& [kind, m] : rows) std::printf(" %8s", kind.name().c_str());
  std::printf("\n%-8s", "mIoU");
  for (const auto& [kind, m] : rows) std::printf(" %8.4f", m.miou);
  std::printf("\n%-8s", "OA");
  for (const auto& [kind, m] : rows) std::printf(" %8.4f", m.oa);
  std::printf("\n");
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  CLI::App app{"stratified window-attention point cloud toolkit"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads,
                 "internal parallelism (kernels in this build are serial; any fixed "
                 "value is bitwise deterministic)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites (64-bit)");
  std::uint64_t gc_seed = 7;
  double gc_tol = 1e-4;
  int gc_instances = 20;
  gc->add_option("--seed", gc_seed, "rng seed");
  gc->add_option("--tol", gc_tol, "max relative error");
  gc->add_option("--instances", gc_instances, "instances per op");

  // oracle-compare
  auto* oc = app.add_subcommand("oracle-compare",
                                "gather/scatter attention vs padded masked oracle");
  int oc_trials = 100;
  std::uint64_t oc_seed = 11;
  double oc_tol = 1e-10;
  long oc_max_n = 256;
  oc->add_option("--trials", oc_trials, "random instances");
  oc->add_option("--seed", oc_seed, "rng seed");
  oc->add_option("--tol", oc_tol, "max absolute deviation");
  oc->add_option("--max-n", oc_max_n, "max points per instance");

  // bench-memory
  auto* bm = app.add_subcommand("bench-memory", "gather/scatter vs padded buffer accounting");
  std::string bm_cloud, bm_preset = "skewed", bm_config;
  std::uint64_t bm_seed = 5;
  bool bm_crpe = false;
  bm->add_option("--cloud", bm_cloud, "cloud file (text or SPTC binary)");
  bm->add_option("--preset", bm_preset, "synthetic preset when no cloud is given");
  bm->add_option("--config", bm_config, "config file (default: toy preset)");
  bm->add_option("--seed", bm_seed, "synthetic preset seed");
  bm->add_flag("--crpe", bm_crpe, "count the gathered position-encoding rows too");

  // train-toy
  auto* tt = app.add_subcommand("train-toy", "train on a synthetic scene");
  std::string tt_config, tt_scene = "two-class", tt_out = "toy_run";
  long tt_steps = -1, tt_seed = -1;
  double tt_lr = -1;
  tt->add_option("--config", tt_config, "config file (default: toy preset)");
  tt->add_option("--scene", tt_scene, "two-class|beacon|geometry|room");
  tt->add_option("--steps", tt_steps, "override steps");
  tt->add_option("--seed", tt_seed, "override seed");
  tt->add_option("--lr", tt_lr, "override learning rate");
  tt->add_option("--out", tt_out, "output directory");

  // infer
  auto* in = app.add_subcommand("infer", "label a cloud with a trained checkpoint");
  std::string in_ckpt, in_config, in_cloud, in_out = "labeled.sptc";
  in->add_option("--checkpoint", in_ckpt)->required();
  in->add_option("--config", in_config)->required();
  in->add_option("--cloud", in_cloud)->required();
  in->add_option("--out", in_out, "output cloud path");

  // erf
  auto* erf = app.add_subcommand("erf", "export gradient-saliency of one output point");
  std::string erf_ckpt, erf_config, erf_cloud, erf_out = "saliency.sptc";
  long erf_target = 0;
  erf->add_option("--checkpoint", erf_ckpt)->required();
  erf->add_option("--config", erf_config)->required();
  erf->add_option("--cloud", erf_cloud)->required();
  erf->add_option("--target", erf_target, "point index whose receptive field to export");
  erf->add_option("--out", erf_out, "output cloud path (saliency in the color channels)");

  // robustness
  auto* rb = app.add_subcommand("robustness", "test-time perturbation sweep");
  std::string rb_ckpt, rb_config, rb_cloud;
  std::uint64_t rb_seed = 99;
  rb->add_option("--checkpoint", rb_ckpt)->required();
  rb->add_option("--config", rb_config)->required();
  rb->add_option("--cloud", rb_cloud)->required();
  rb->add_option("--seed", rb_seed, "permutation/jitter seed");

  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
    sub->fallthrough();  // let --threads appear after the subcommand too
  }

  std::vector<const char*> argv;
  argv.push_back("strata");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  Eigen::setNbThreads(threads);
  try {
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_tol, gc_instances);
    if (oc->parsed()) return cmd_oracle_compare(oc_trials, oc_seed, oc_tol, oc_max_n);
    if (bm->parsed()) return cmd_bench_memory(bm_cloud, bm_preset, bm_config, bm_seed, bm_crpe);
    if (tt->parsed()) return cmd_train_toy(tt_config, tt_scene, tt_steps, tt_seed, tt_lr, tt_out);
    if (in->parsed()) return cmd_infer(in_ckpt, in_config, in_cloud, in_out);
    if (erf->parsed()) return cmd_erf(erf_ckpt, erf_config, erf_cloud, erf_target, erf_out);
    if (rb->parsed()) return cmd_robustness(rb_ckpt, rb_config, rb_cloud, rb_seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}

}  // namespace strata
