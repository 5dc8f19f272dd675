#pragma once

#include "strata/network.hpp"
#include "strata/ops.hpp"
#include "strata/optim.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace strata {

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

struct SynthPrimitive {
  enum class Kind { Plane, Box, Sphere };
  Kind kind = Kind::Plane;
  int class_id = 0;
  std::array<double, 3> center{0, 0, 0};
  // Plane: rectangular patch spanning the axes with nonzero extent.
  // Box: full edge lengths, surface sampled. Sphere: size[0] is the radius,
  // surface sampled.
  std::array<double, 3> size{1, 1, 0};
  std::array<double, 3> color{0.5, 0.5, 0.5};
  Index points = 100;
};

struct SynthSpec {
  std::vector<SynthPrimitive> primitives;
  double noise_sigma = 0.01;   // positional jitter
  double color_noise = 0.05;   // per-channel uniform color jitter
  std::uint64_t seed = 0;

  int num_classes() const {
    int k = 0;
    for (const auto& p : primitives) k = std::max(k, p.class_id + 1);
    return k;
  }

  void validate() const {
    if (primitives.empty()) throw std::invalid_argument("synth: no primitives");
    if (num_classes() < 2) throw std::invalid_argument("synth: need at least 2 classes");
    for (const auto& p : primitives) {
      if (p.points < 1) throw std::invalid_argument("synth: primitive with no points");
      if (p.class_id < 0) throw std::invalid_argument("synth: negative class id");
    }
  }
};

template <class S>
PointCloud<S> synth_scene(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::uniform_real_distribution<double> uni01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Index total = 0;
  for (const auto& p : spec.primitives) total += p.points;
  PointCloud<S> cloud;
  cloud.positions.resize(total, 3);
  cloud.features.resize(total, 3);
  cloud.labels.resize(size_t(total));

  Index row = 0;
  for (const auto& prim : spec.primitives) {
    for (Index i = 0; i < prim.points; ++i) {
      double x = 0, y = 0, z = 0;
      switch (prim.kind) {
        case SynthPrimitive::Kind::Plane: {
          // spans the axes with nonzero extent (floor: x/y, wall: x/z or y/z)
          x = 0.5 * prim.size[0] * uni(rng);
          y = 0.5 * prim.size[1] * uni(rng);
          z = 0.5 * prim.size[2] * uni(rng);
          break;
        }
        case SynthPrimitive::Kind::Box: {
          // pick a face with probability proportional to its area
          const double ax = prim.size[1] * prim.size[2];
          const double ay = prim.size[0] * prim.size[2];
          const double az = prim.size[0] * prim.size[1];
          const double pick = uni01(rng) * 2.0 * (ax + ay + az);
          const double u = uni(rng), v = uni(rng);
          if (pick < 2 * ax) {
            x = (pick < ax ? -0.5 : 0.5) * prim.size[0];
            y = 0.5 * prim.size[1] * u;
            z = 0.5 * prim.size[2] * v;
          } else if (pick < 2 * (ax + ay)) {
            y = (pick - 2 * ax < ay ? -0.5 : 0.5) * prim.size[1];
            x = 0.5 * prim.size[0] * u;
            z = 0.5 * prim.size[2] * v;
          } else {
            z = (pick - 2 * (ax + ay) < az ? -0.5 : 0.5) * prim.size[2];
            x = 0.5 * prim.size[0] * u;
            y = 0.5 * prim.size[1] * v;
          }
          break;
        }
        case SynthPrimitive::Kind::Sphere: {
          double vx = gauss(rng), vy = gauss(rng), vz = gauss(rng);
          const double nrm = std::sqrt(vx * vx + vy * vy + vz * vz) + 1e-12;
          x = prim.size[0] * vx / nrm;
          y = prim.size[0] * vy / nrm;
          z = prim.size[0] * vz / nrm;
          break;
        }
      }
      cloud.positions(row, 0) = S(prim.center[0] + x + spec.noise_sigma * gauss(rng));
      cloud.positions(row, 1) = S(prim.center[1] + y + spec.noise_sigma * gauss(rng));
      cloud.positions(row, 2) = S(prim.center[2] + z + spec.noise_sigma * gauss(rng));
      for (int ch = 0; ch < 3; ++ch) {
        const double c = prim.color[size_t(ch)] + spec.color_noise * uni(rng);
        cloud.features(row, ch) = S(std::clamp(c, 0.0, 1.0));
      }
      cloud.labels[size_t(row)] = prim.class_id;
      ++row;
    }
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Canned scenes used by the CLI presets and the acceptance experiments
// ---------------------------------------------------------------------------

// Floor plane vs colored objects; trivially overfittable two-class scene.
inline SynthSpec two_class_spec(std::uint64_t seed, Index n_points = 2000) {
  SynthSpec spec;
  spec.seed = seed;
  spec.noise_sigma = 0.01;
  spec.color_noise = 0.08;
  const Index floor_pts = n_points * 3 / 5;
  const Index rest = n_points - floor_pts;
  spec.primitives.push_back({SynthPrimitive::Kind::Plane, 0, {2.0, 2.0, 0.0}, {4.0, 4.0, 0},
                             {0.45, 0.45, 0.42}, floor_pts});
  const Index per = rest / 6;
  const double obj_col[3] = {0.8, 0.3, 0.25};
  for (int i = 0; i < 4; ++i) {
    spec.primitives.push_back({SynthPrimitive::Kind::Box, 1,
                               {0.7 + 0.9 * i, 1.0 + 0.5 * (i % 2), 0.3},
                               {0.5, 0.5, 0.6},
                               {obj_col[0], obj_col[1], obj_col[2]},
                               per});
  }
  for (int i = 0; i < 2; ++i) {
    spec.primitives.push_back({SynthPrimitive::Kind::Sphere, 1,
                               {1.0 + 1.6 * i, 2.8, 0.35},
                               {0.35, 0, 0},
                               {obj_col[0], obj_col[1], obj_col[2]},
                               rest - 5 * per > per && i == 1 ? rest - 5 * per : per});
  }
  return spec;
}

// Field strips whose labels are set by the color of a distant beacon cluster
// in the same large window; local color is uninformative, so the label signal
// only reaches a field point through long-range attention.
inline SynthSpec beacon_spec(std::uint64_t seed, int regions = 6, Index field_per_region = 150,
                             Index beacon_points = 40) {
  SynthSpec spec;
  spec.seed = seed;
  spec.noise_sigma = 0.005;
  spec.color_noise = 0.03;
  for (int r = 0; r < regions; ++r) {
    const int bit = int((r + seed) % 2);
    spec.primitives.push_back({SynthPrimitive::Kind::Plane, bit,
                               {r + 0.5, 0.25, 0.05},
                               {0.9, 0.38, 0},
                               {0.5, 0.5, 0.5},
                               field_per_region});
    spec.primitives.push_back({SynthPrimitive::Kind::Sphere, bit,
                               {r + 0.5, 0.85, 0.05},
                               {0.04, 0, 0},
                               bit ? std::array<double, 3>{0.9, 0.1, 0.1}
                                   : std::array<double, 3>{0.1, 0.1, 0.9},
                               beacon_points});
  }
  return spec;
}

// Small spheres resting on a plane, every primitive the same color: the class
// signal is local geometry, which a point-wise projection cannot see.
inline SynthSpec geometry_spec(std::uint64_t seed, int spheres = 16,
                               Index plane_points = 1100, Index sphere_points = 55) {
  SynthSpec spec;
  spec.seed = seed;
  spec.noise_sigma = 0.004;
  spec.color_noise = 0.1;
  spec.primitives.push_back({SynthPrimitive::Kind::Plane, 0, {1.5, 1.5, 0.0}, {3.0, 3.0, 0},
                             {0.5, 0.5, 0.5}, plane_points});
  std::mt19937_64 rng(seed * 7919 + 13);
  std::uniform_real_distribution<double> pos(0.25, 2.75);
  for (int i = 0; i < spheres; ++i) {
    spec.primitives.push_back({SynthPrimitive::Kind::Sphere, 1,
                               {pos(rng), pos(rng), 0.09},
                               {0.09, 0, 0},
                               {0.5, 0.5, 0.5},
                               sphere_points});
  }
  return spec;
}

// Heavy-tailed cluster sizes in separate windows; the padded baseline pays
// k_max^2 for every window.
inline SynthSpec skewed_spec(std::uint64_t seed) {
  SynthSpec spec;
  spec.seed = seed;
  spec.noise_sigma = 0.0;
  spec.color_noise = 0.05;
  const std::vector<Index> sizes = {220, 90, 40, 18, 8, 8, 6, 6, 4, 4,
                                    3,   3,  3,  2, 2, 2, 2, 1, 1, 1};
  int i = 0;
  for (Index k : sizes) {
    spec.primitives.push_back({SynthPrimitive::Kind::Sphere, i % 2,
                               {double(i) * 2.0 + 0.2, 0.2, 0.2},
                               {0.12, 0, 0},
                               {0.3 + 0.02 * i, 0.5, 0.6},
                               k});
    ++i;
  }
  return spec;
}

// Room-like surface cloud (floor and walls); uniform sampling on 2D surfaces
// mimics how real scans occupy windows.
inline SynthSpec room_spec(std::uint64_t seed, Index n_points = 2000) {
  SynthSpec spec;
  spec.seed = seed;
  spec.noise_sigma = 0.005;
  spec.color_noise = 0.06;
  const double sx = 3.2, sy = 2.4, h = 1.6;
  const double floor_area = sx * sy;
  const double wall_area = 2 * (sx + sy) * h;
  const Index floor_pts = Index(double(n_points) * floor_area / (floor_area + wall_area));
  const Index wall_total = n_points - floor_pts;
  spec.primitives.push_back({SynthPrimitive::Kind::Plane, 0, {sx / 2, sy / 2, 0.0},
                             {sx, sy, 0}, {0.45, 0.4, 0.35}, floor_pts});
  // four walls as thin boxes
  const double wx = sx * h, wy = sy * h;
  const Index per_x = Index(double(wall_total) * wx / (2 * wx + 2 * wy) + 0.5);
  const Index per_y = (wall_total - 2 * per_x) / 2;
  spec.primitives.push_back({SynthPrimitive::Kind::Plane, 1, {sx / 2, 0.0, h / 2},
                             {sx, 0.0, h}, {0.7, 0.68, 0.6}, per_x});
  spec.primitives.push_back({SynthPrimitive::Kind::Plane, 1, {sx / 2, sy, h / 2},
                             {sx, 0.0, h}, {0.7, 0.68, 0.6}, per_x});
  spec.primitives.push_back({SynthPrimitive::Kind::Plane, 1, {0.0, sy / 2, h / 2},
                             {0.0, sy, h}, {0.7, 0.68, 0.6}, per_y});
  spec.primitives.push_back({SynthPrimitive::Kind::Plane, 1, {sx, sy / 2, h / 2},
                             {0.0, sy, h}, {0.7, 0.68, 0.6},
                             wall_total - 2 * per_x - per_y});
  return spec;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
  Mat<std::int64_t> confusion;  // rows = ground truth, cols = prediction
  double oa = 0, macc = 0, miou = 0;

  bool operator==(const Metrics& o) const {
    return oa == o.oa && macc == o.macc && miou == o.miou &&
           confusion.rows() == o.confusion.rows() &&
           (confusion.array() == o.confusion.array()).all();
  }
};

template <class S>
std::vector<int> argmax_labels(const Mat<S>& logits) {
  std::vector<int> pred(static_cast<size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < logits.cols(); ++k) {
      if (logits(i, k) > logits(i, best)) best = k;
    }
    pred[size_t(i)] = int(best);
  }
  return pred;
}

inline Metrics evaluate_predictions(const std::vector<int>& pred, const std::vector<int>& labels,
                                    int num_classes) {
  if (pred.size() != labels.size()) {
    throw std::invalid_argument("evaluate: prediction/label length mismatch");
  }
  Metrics m;
  m.confusion = Mat<std::int64_t>::Zero(num_classes, num_classes);
  for (size_t i = 0; i < pred.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || pred[i] < 0 || pred[i] >= num_classes) {
      throw std::invalid_argument("evaluate: class id outside [0," +
                                  std::to_string(num_classes) + ")");
    }
    m.confusion(labels[i], pred[i])++;
  }
  const double total = double(m.confusion.sum());
  double trace = 0;
  double acc_sum = 0, iou_sum = 0;
  int supported = 0;
  for (Index c = 0; c < num_classes; ++c) {
    const double tp = double(m.confusion(c, c));
    const double row = double(m.confusion.row(c).sum());
    const double col = double(m.confusion.col(c).sum());
    trace += tp;
    if (row > 0) {
      ++supported;
      acc_sum += tp / row;
      const double denom = row + col - tp;  // tp + fn + fp
      iou_sum += denom > 0 ? tp / denom : 0.0;
    }
  }
  m.oa = total > 0 ? trace / total : 0.0;
  m.macc = supported > 0 ? acc_sum / supported : 0.0;
  m.miou = supported > 0 ? iou_sum / supported : 0.0;
  return m;
}

template <class S>
Metrics evaluate(const Mat<S>& logits, const std::vector<int>& labels) {
  return evaluate_predictions(argmax_labels(logits), labels, int(logits.cols()));
}

// ---------------------------------------------------------------------------
// Toy training loop
// ---------------------------------------------------------------------------

struct TrainRow {
  long step = 0;
  double loss = 0, oa = 0, macc = 0, miou = 0;
};

struct TrainResult {
  std::vector<TrainRow> history;
  Metrics final_metrics;  // on the clean scene after the last step
};

struct TrainOptions {
  long steps = 500;
  double lr = 1e-3;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;
  bool cosine_schedule = true;
  std::vector<Augmentation> augmentations;
};

template <class S>
TrainResult train_toy(Model<S>& model, const PointCloud<S>& scene, const TrainOptions& opt) {
  if (!scene.has_labels()) throw std::invalid_argument("train: scene has no labels");
  AdamW<S> optim;
  optim.lr = opt.lr;
  optim.weight_decay = opt.weight_decay;
  std::mt19937_64 aug_rng(opt.seed);
  TrainResult result;
  result.history.reserve(size_t(opt.steps));

  for (long step = 0; step < opt.steps; ++step) {
    PointCloud<S> batch =
        opt.augmentations.empty() ? scene : augment(scene, opt.augmentations, aug_rng);
    model.zero_grad();
    Mat<S> logits = model.forward(batch);
    CrossEntropyCtx<S> ctx;
    const S loss = cross_entropy_mean(logits, batch.labels, -1, &ctx);
    if (!std::isfinite(double(loss))) {
      throw std::runtime_error("train: loss diverged (non-finite) at step " +
                               std::to_string(step));
    }
    const Metrics m = evaluate(logits, batch.labels);
    result.history.push_back({step, double(loss), m.oa, m.macc, m.miou});

    model.backward(cross_entropy_backward(ctx));
    if (opt.cosine_schedule) {
      optim.lr = opt.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) /
                                                double(std::max<long>(1, opt.steps))));
    }
    optim.step(model.parameters());
  }

  model.zero_grad();
  result.final_metrics = evaluate(model.forward(scene), scene.labels);
  return result;
}

// ---------------------------------------------------------------------------
// Robustness evaluation harness
// ---------------------------------------------------------------------------

inline std::vector<Perturbation> standard_perturbations(std::uint64_t seed = 99) {
  using K = Perturbation::Kind;
  return {
      {K::None, 0, 0},          {K::Permute, 0, seed},    {K::RotateZ90, 0, 0},
      {K::RotateZ180, 0, 0},    {K::RotateZ270, 0, 0},    {K::Shift, 0.2, 0},
      {K::Shift, -0.2, 0},      {K::Scale, 0.8, 0},       {K::Scale, 1.2, 0},
      {K::Jitter, 0, seed + 1},
  };
}

template <class S>
std::vector<std::pair<Perturbation, Metrics>> robustness_eval(
    Model<S>& model, const PointCloud<S>& cloud, const std::vector<Perturbation>& kinds) {
  if (!cloud.has_labels()) throw std::invalid_argument("robustness: cloud has no labels");
  std::vector<std::pair<Perturbation, Metrics>> rows;
  rows.reserve(kinds.size());
  for (const auto& kind : kinds) {
    const PointCloud<S> view = perturb(cloud, kind);
    rows.emplace_back(kind, evaluate(model.forward(view), view.labels));
  }
  return rows;
}

}  // namespace strata
