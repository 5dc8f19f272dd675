#pragma once

#include "strata/geometry.hpp"
#include "strata/network.hpp"

#include <bit>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace strata {

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

struct ByteReader {
  const std::string& data;
  size_t pos = 0;
  std::string what;

  void need(size_t n) const {
    if (pos + n > data.size()) {
      throw std::runtime_error(what + ": truncated at byte offset " + std::to_string(pos) +
                               ", expected " + std::to_string(n) + " more bytes of " +
                               std::to_string(data.size()) + " total");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(data[pos + size_t(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(data[pos + size_t(i)])) << (8 * i);
    pos += 8;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return std::uint8_t(data[pos++]);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(size_t n) {
    need(n);
    std::string s = data.substr(pos, n);
    pos += n;
    return s;
  }
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(data.data(), std::streamsize(data.size()));
  if (!out) throw std::runtime_error("short write to '" + path + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Cloud files. Binary: "SPTC" magic, version, N, C, label flag, then f32
// positions/features and u32 labels, all little-endian. Text: one point per
// line, "x y z r g b [label]".
// ---------------------------------------------------------------------------

inline constexpr char kCloudMagic[4] = {'S', 'P', 'T', 'C'};
inline constexpr std::uint32_t kCloudVersion = 1;

template <class S>
std::string encode_cloud_binary(const PointCloud<S>& cloud) {
  cloud.validate();
  std::string out;
  out.append(kCloudMagic, 4);
  detail::put_u32(out, kCloudVersion);
  detail::put_u64(out, std::uint64_t(cloud.size()));
  detail::put_u32(out, std::uint32_t(cloud.features.cols()));
  out.push_back(cloud.has_labels() ? char(1) : char(0));
  for (Index i = 0; i < cloud.size(); ++i) {
    for (int d = 0; d < 3; ++d) detail::put_f32(out, float(cloud.positions(i, d)));
  }
  for (Index i = 0; i < cloud.size(); ++i) {
    for (Index c = 0; c < cloud.features.cols(); ++c) {
      detail::put_f32(out, float(cloud.features(i, c)));
    }
  }
  if (cloud.has_labels()) {
    for (Index i = 0; i < cloud.size(); ++i) {
      detail::put_u32(out, std::uint32_t(cloud.labels[size_t(i)]));
    }
  }
  return out;
}

template <class S>
PointCloud<S> decode_cloud_binary(const std::string& data, const std::string& origin) {
  detail::ByteReader r{data, 0, "cloud '" + origin + "'"};
  const std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), kCloudMagic, 4) != 0) {
    throw std::runtime_error(r.what + ": bad magic, expected SPTC");
  }
  const std::uint32_t version = r.u32();
  if (version != kCloudVersion) {
    throw std::runtime_error(r.what + ": unsupported version " + std::to_string(version));
  }
  const std::uint64_t n = r.u64();
  const std::uint32_t c = r.u32();
  const std::uint8_t has_labels = r.u8();
  if (has_labels > 1) throw std::runtime_error(r.what + ": label flag must be 0 or 1");
  PointCloud<S> cloud;
  cloud.positions.resize(Index(n), 3);
  cloud.features.resize(Index(n), Index(c));
  for (std::uint64_t i = 0; i < n; ++i) {
    for (int d = 0; d < 3; ++d) {
      const float v = r.f32();
      if (!std::isfinite(v)) {
        throw std::runtime_error(r.what + ": non-finite position at byte offset " +
                                 std::to_string(r.pos - 4));
      }
      cloud.positions(Index(i), d) = S(v);
    }
  }
  for (std::uint64_t i = 0; i < n; ++i) {
    for (std::uint32_t ch = 0; ch < c; ++ch) {
      const float v = r.f32();
      if (!std::isfinite(v)) {
        throw std::runtime_error(r.what + ": non-finite feature at byte offset " +
                                 std::to_string(r.pos - 4));
      }
      cloud.features(Index(i), Index(ch)) = S(v);
    }
  }
  if (has_labels) {
    cloud.labels.resize(size_t(n));
    for (std::uint64_t i = 0; i < n; ++i) cloud.labels[size_t(i)] = int(r.u32());
  }
  if (r.pos != data.size()) {
    throw std::runtime_error(r.what + ": " + std::to_string(data.size() - r.pos) +
                             " trailing bytes after payload");
  }
  return cloud;
}

template <class S>
std::string encode_cloud_text(const PointCloud<S>& cloud) {
  cloud.validate();
  if (cloud.features.cols() != 3) {
    throw std::runtime_error("text cloud form requires exactly 3 feature channels, have " +
                             std::to_string(cloud.features.cols()));
  }
  std::string out;
  char buf[256];
  for (Index i = 0; i < cloud.size(); ++i) {
    int len = std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g %.9g %.9g %.9g",
                            double(cloud.positions(i, 0)), double(cloud.positions(i, 1)),
                            double(cloud.positions(i, 2)), double(cloud.features(i, 0)),
                            double(cloud.features(i, 1)), double(cloud.features(i, 2)));
    out.append(buf, size_t(len));
    if (cloud.has_labels()) {
      len = std::snprintf(buf, sizeof buf, " %d", cloud.labels[size_t(i)]);
      out.append(buf, size_t(len));
    }
    out.push_back('\n');
  }
  return out;
}

template <class S>
PointCloud<S> decode_cloud_text(const std::string& data, const std::string& origin) {
  std::istringstream in(data);
  std::string line;
  std::vector<std::array<double, 6>> rows;
  std::vector<int> labels;
  int line_no = 0;
  int label_mode = -1;  // -1 undecided, 0 none, 1 labeled
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::array<double, 6> vals{};
    for (int k = 0; k < 6; ++k) {
      if (!(ls >> vals[size_t(k)])) {
        throw std::runtime_error("cloud '" + origin + "': line " + std::to_string(line_no) +
                                 ": expected 6 or 7 fields");
      }
      if (!std::isfinite(vals[size_t(k)])) {
        throw std::runtime_error("cloud '" + origin + "': line " + std::to_string(line_no) +
                                 ": non-finite value");
      }
    }
    int label = 0;
    bool has_label = bool(ls >> label);
    std::string rest;
    if (ls >> rest) {
      throw std::runtime_error("cloud '" + origin + "': line " + std::to_string(line_no) +
                               ": trailing fields");
    }
    if (label_mode == -1) {
      label_mode = has_label ? 1 : 0;
    } else if (label_mode != (has_label ? 1 : 0)) {
      throw std::runtime_error("cloud '" + origin + "': line " + std::to_string(line_no) +
                               ": inconsistent label column");
    }
    rows.push_back(vals);
    if (has_label) labels.push_back(label);
  }
  PointCloud<S> cloud;
  cloud.positions.resize(Index(rows.size()), 3);
  cloud.features.resize(Index(rows.size()), 3);
  for (size_t i = 0; i < rows.size(); ++i) {
    for (int d = 0; d < 3; ++d) cloud.positions(Index(i), d) = S(rows[i][size_t(d)]);
    for (int d = 0; d < 3; ++d) cloud.features(Index(i), d) = S(rows[i][size_t(3 + d)]);
  }
  cloud.labels = std::move(labels);
  return cloud;
}

// Reads either form: binary when the SPTC magic is present, text otherwise.
template <class S>
PointCloud<S> read_cloud(const std::string& path) {
  const std::string data = detail::read_file(path);
  if (data.size() >= 4 && std::memcmp(data.data(), kCloudMagic, 4) == 0) {
    return decode_cloud_binary<S>(data, path);
  }
  return decode_cloud_text<S>(data, path);
}

// Writes text for .txt/.xyz paths, binary otherwise.
template <class S>
void write_cloud(const PointCloud<S>& cloud, const std::string& path) {
  const bool text = path.size() >= 4 && (path.ends_with(".txt") || path.ends_with(".xyz"));
  detail::write_file(path, text ? encode_cloud_text(cloud) : encode_cloud_binary(cloud));
}

// ---------------------------------------------------------------------------
// Checkpoints: "STW1" magic, record count, then (name, shape, f32 values)
// records, little-endian.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'S', 'T', 'W', '1'};

template <class S>
std::string encode_checkpoint(const ParamList<S>& params) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, std::uint32_t(params.size()));
  for (const auto* p : params) {
    detail::put_u32(out, std::uint32_t(p->name.size()));
    out.append(p->name);
    detail::put_u32(out, 2);
    detail::put_u64(out, std::uint64_t(p->value().rows()));
    detail::put_u64(out, std::uint64_t(p->value().cols()));
    for (Index i = 0; i < p->value().rows(); ++i) {
      for (Index j = 0; j < p->value().cols(); ++j) {
        detail::put_f32(out, float(p->value()(i, j)));
      }
    }
  }
  return out;
}

template <class S>
void save_checkpoint(const ParamList<S>& params, const std::string& path) {
  detail::write_file(path, encode_checkpoint(params));
}

// Strict load: every parameter must be present with a matching shape, and
// every record must belong to a parameter.
template <class S>
void load_checkpoint(const ParamList<S>& params, const std::string& path) {
  const std::string data = detail::read_file(path);
  detail::ByteReader r{data, 0, "checkpoint '" + path + "'"};
  const std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
    throw std::runtime_error(r.what + ": bad magic, expected STW1");
  }
  const std::uint32_t count = r.u32();
  std::map<std::string, std::pair<Index, Index>> shapes;
  std::map<std::string, std::vector<float>> values;
  for (std::uint32_t rec = 0; rec < count; ++rec) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    const std::uint32_t ndims = r.u32();
    if (ndims != 2) {
      throw std::runtime_error(r.what + ": record '" + name + "' has " +
                               std::to_string(ndims) + " dims, expected 2");
    }
    const Index rows = Index(r.u64());
    const Index cols = Index(r.u64());
    std::vector<float> vals(static_cast<size_t>(rows * cols));
    for (auto& v : vals) v = r.f32();
    if (!shapes.emplace(name, std::make_pair(rows, cols)).second) {
      throw std::runtime_error(r.what + ": duplicate record '" + name + "'");
    }
    values.emplace(name, std::move(vals));
  }
  if (r.pos != data.size()) {
    throw std::runtime_error(r.what + ": trailing bytes after last record");
  }
  std::set<std::string> used;
  for (auto* p : params) {
    auto it = shapes.find(p->name);
    if (it == shapes.end()) {
      throw std::runtime_error(r.what + ": missing parameter '" + p->name + "'");
    }
    if (it->second.first != p->value().rows() || it->second.second != p->value().cols()) {
      throw std::runtime_error(r.what + ": parameter '" + p->name + "' has shape " +
                               shape_str(it->second.first, it->second.second) + ", model wants " +
                               shape_str(p->value().rows(), p->value().cols()));
    }
    const auto& vals = values[p->name];
    for (Index i = 0; i < p->value().rows(); ++i) {
      for (Index j = 0; j < p->value().cols(); ++j) {
        p->value()(i, j) = S(vals[size_t(i * p->value().cols() + j)]);
      }
    }
    used.insert(p->name);
  }
  for (const auto& [name, shape] : shapes) {
    if (!used.count(name)) {
      throw std::runtime_error(r.what + ": unknown parameter record '" + name + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Config files: flat "key = value" lines, '#' comments, unknown keys rejected.
// ---------------------------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  double lr = 1e-3;
  double weight_decay = 0.1;
  long steps = 500;
  std::uint64_t seed = 0;
  bool aug_rotate = true;
  bool aug_scale = true;
  bool aug_jitter = true;
  bool aug_drop_color = true;

  std::vector<Augmentation> augmentations() const {
    std::vector<Augmentation> a;
    if (aug_rotate) a.push_back(Augmentation::rotate_z(0.0, 6.283185307179586));
    if (aug_scale) a.push_back(Augmentation::scale(0.8, 1.2));
    if (aug_jitter) a.push_back(Augmentation::jitter(0.01, 0.05));
    if (aug_drop_color) a.push_back(Augmentation::drop_color(0.2));
    return a;
  }
};

// Defaults are the S3DIS configuration; named presets switch whole groups.
inline void apply_preset(RunConfig& cfg, const std::string& name) {
  if (name == "s3dis") {
    cfg.model = ModelConfig{};
  } else if (name == "scannet") {
    cfg.model = ModelConfig{};
    cfg.model.depths = {3, 9, 3, 3};
    cfg.model.grid_size = 0.02;
    cfg.model.s_win0 = 0.1;
    cfg.model.downsample_scale = 4;
    cfg.model.extra_early_downsample = true;
  } else if (name == "toy") {
    cfg.model = ModelConfig{};
    cfg.model.depths = {2, 2};
    cfg.model.base_channels = 24;
    cfg.model.base_heads = 2;
    cfg.model.s_win0 = 0.4;
    cfg.model.downsample_scale = 8;
    cfg.model.knn_k = 8;
    cfg.model.quant_bins = 16;
    cfg.model.num_classes = 2;
    cfg.model.grid_size = 0.0;
    cfg.aug_rotate = false;
    cfg.aug_scale = false;
    cfg.aug_jitter = false;
    cfg.aug_drop_color = false;
  } else {
    throw std::runtime_error("config: unknown preset '" + name + "'");
  }
}

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::runtime_error("config: key '" + key + "' wants a boolean, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
  std::vector<int> out;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' wants integers, got '" + item + "'");
    }
  }
  if (out.empty()) throw std::runtime_error("config: key '" + key + "' is empty");
  return out;
}

inline EmbeddingVariant parse_variant(const std::string& v) {
  if (v == "linear") return EmbeddingVariant::Linear;
  if (v == "maxpool") return EmbeddingVariant::MaxPool;
  if (v == "avgpool") return EmbeddingVariant::AvgPool;
  if (v == "kpconv") return EmbeddingVariant::KPConv;
  throw std::runtime_error("config: unknown embedding_variant '" + v + "'");
}

}  // namespace detail

inline RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw std::runtime_error("config '" + origin + "': line " + std::to_string(line_no) + ": " +
                             msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    const std::string trimmed = trim(line);
    if (trimmed.empty()) continue;
    const size_t eq = trimmed.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    const std::string key = trim(trimmed.substr(0, eq));
    const std::string value = trim(trimmed.substr(eq + 1));
    if (key.empty() || value.empty()) fail("expected 'key = value'");

    try {
      if (key == "preset") apply_preset(cfg, value);
      else if (key == "depths") cfg.model.depths = detail::parse_int_list(value, key);
      else if (key == "base_channels") cfg.model.base_channels = std::stol(value);
      else if (key == "base_heads") cfg.model.base_heads = std::stol(value);
      else if (key == "s_win0") cfg.model.s_win0 = std::stod(value);
      else if (key == "s_win_large_factor") cfg.model.s_win_large_factor = std::stod(value);
      else if (key == "downsample_scale") cfg.model.downsample_scale = std::stol(value);
      else if (key == "knn_k") cfg.model.knn_k = std::stol(value);
      else if (key == "quant_bins") cfg.model.quant_bins = std::stol(value);
      else if (key == "num_classes") cfg.model.num_classes = std::stol(value);
      else if (key == "embedding_variant") cfg.model.embedding_variant = detail::parse_variant(value);
      else if (key == "use_crpe") cfg.model.use_crpe = detail::parse_bool(value, key);
      else if (key == "use_mlp_pos") cfg.model.use_mlp_pos = detail::parse_bool(value, key);
      else if (key == "use_stratified") cfg.model.use_stratified = detail::parse_bool(value, key);
      else if (key == "use_shift") cfg.model.use_shift = detail::parse_bool(value, key);
      else if (key == "shift_original") cfg.model.shift_original = detail::parse_bool(value, key);
      else if (key == "shift_large") cfg.model.shift_large = detail::parse_bool(value, key);
      else if (key == "extra_early_downsample")
        cfg.model.extra_early_downsample = detail::parse_bool(value, key);
      else if (key == "input_xyz") cfg.model.input_xyz = detail::parse_bool(value, key);
      else if (key == "scale_logits") cfg.model.scale_logits = detail::parse_bool(value, key);
      else if (key == "grid_size") cfg.model.grid_size = std::stod(value);
      else if (key == "table_init_scale") cfg.model.table_init_scale = std::stod(value);
      else if (key == "mlp_pos_hidden") cfg.model.mlp_pos_hidden = std::stol(value);
      else if (key == "lr") cfg.lr = std::stod(value);
      else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
      else if (key == "steps") cfg.steps = std::stol(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "aug_rotate") cfg.aug_rotate = detail::parse_bool(value, key);
      else if (key == "aug_scale") cfg.aug_scale = detail::parse_bool(value, key);
      else if (key == "aug_jitter") cfg.aug_jitter = detail::parse_bool(value, key);
      else if (key == "aug_drop_color") cfg.aug_drop_color = detail::parse_bool(value, key);
      else fail("unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      fail("bad value '" + value + "' for key '" + key + "'");
    } catch (const std::out_of_range&) {
      fail("value '" + value + "' out of range for key '" + key + "'");
    }
  }
  cfg.model.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  return parse_config_text(detail::read_file(path), path);
}

inline std::string config_to_text(const RunConfig& cfg) {
  std::ostringstream out;
  out << "depths = ";
  for (size_t i = 0; i < cfg.model.depths.size(); ++i) {
    out << (i ? "," : "") << cfg.model.depths[i];
  }
  out << "\n";
  out << "base_channels = " << cfg.model.base_channels << "\n";
  out << "base_heads = " << cfg.model.base_heads << "\n";
  out << "s_win0 = " << cfg.model.s_win0 << "\n";
  out << "s_win_large_factor = " << cfg.model.s_win_large_factor << "\n";
  out << "downsample_scale = " << cfg.model.downsample_scale << "\n";
  out << "knn_k = " << cfg.model.knn_k << "\n";
  out << "quant_bins = " << cfg.model.quant_bins << "\n";
  out << "num_classes = " << cfg.model.num_classes << "\n";
  out << "embedding_variant = " << to_string(cfg.model.embedding_variant) << "\n";
  out << "use_crpe = " << (cfg.model.use_crpe ? "true" : "false") << "\n";
  out << "use_mlp_pos = " << (cfg.model.use_mlp_pos ? "true" : "false") << "\n";
  out << "use_stratified = " << (cfg.model.use_stratified ? "true" : "false") << "\n";
  out << "use_shift = " << (cfg.model.use_shift ? "true" : "false") << "\n";
  out << "shift_original = " << (cfg.model.shift_original ? "true" : "false") << "\n";
  out << "shift_large = " << (cfg.model.shift_large ? "true" : "false") << "\n";
  out << "extra_early_downsample = " << (cfg.model.extra_early_downsample ? "true" : "false")
      << "\n";
  out << "input_xyz = " << (cfg.model.input_xyz ? "true" : "false") << "\n";
  out << "scale_logits = " << (cfg.model.scale_logits ? "true" : "false") << "\n";
  out << "grid_size = " << cfg.model.grid_size << "\n";
  out << "table_init_scale = " << cfg.model.table_init_scale << "\n";
  out << "mlp_pos_hidden = " << cfg.model.mlp_pos_hidden << "\n";
  out << "lr = " << cfg.lr << "\n";
  out << "weight_decay = " << cfg.weight_decay << "\n";
  out << "steps = " << cfg.steps << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "aug_rotate = " << (cfg.aug_rotate ? "true" : "false") << "\n";
  out << "aug_scale = " << (cfg.aug_scale ? "true" : "false") << "\n";
  out << "aug_jitter = " << (cfg.aug_jitter ? "true" : "false") << "\n";
  out << "aug_drop_color = " << (cfg.aug_drop_color ? "true" : "false") << "\n";
  return out.str();
}

}  // namespace strata
