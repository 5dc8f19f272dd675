#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "strata/io.hpp"
#include "strata/training.hpp"

#include <cstdio>
#include <filesystem>
#include <random>

using namespace strata;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("strata_test_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

PointCloud<float> sample_cloud(Index n, std::uint64_t seed, bool labels) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.f, 1.f);
  PointCloud<float> c;
  c.positions.resize(n, 3);
  c.features.resize(n, 3);
  for (Index i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) c.positions(i, j) = d(rng);
    for (int j = 0; j < 3; ++j) c.features(i, j) = d(rng);
  }
  if (labels) {
    c.labels.resize(size_t(n));
    for (Index i = 0; i < n; ++i) c.labels[size_t(i)] = int(rng() % 5);
  }
  return c;
}

}  // namespace

TEST_CASE("cloud binary: write then read is bitwise identical") {
  TempDir tmp;
  auto cloud = sample_cloud(37, 3, true);
  const std::string path = tmp.file("cloud.sptc");
  write_cloud(cloud, path);
  auto back = read_cloud<float>(path);
  CHECK((back.positions.array() == cloud.positions.array()).all());
  CHECK((back.features.array() == cloud.features.array()).all());
  CHECK(back.labels == cloud.labels);

  // and the bytes themselves are stable across a second round trip
  write_cloud(back, tmp.file("cloud2.sptc"));
  CHECK(detail::read_file(path) == detail::read_file(tmp.file("cloud2.sptc")));
}

TEST_CASE("cloud text: parser handles the documented line form") {
  auto cloud = decode_cloud_text<double>("0 0 0 1 1 1 2\n", "inline");
  REQUIRE(cloud.size() == 1);
  CHECK(cloud.positions.row(0).norm() == 0.0);
  CHECK((cloud.features.row(0).array() == 1.0).all());
  REQUIRE(cloud.has_labels());
  CHECK(cloud.labels[0] == 2);

  auto unlabeled = decode_cloud_text<double>("0.5 -1 2 0.25 0.5 0.75\n", "inline");
  CHECK_FALSE(unlabeled.has_labels());
  CHECK(unlabeled.positions(0, 1) == -1.0);

  // text round trip within printed precision
  TempDir tmp;
  auto c = sample_cloud(20, 7, true);
  write_cloud(c, tmp.file("cloud.txt"));
  auto back = read_cloud<float>(tmp.file("cloud.txt"));
  CHECK((back.positions - c.positions).cwiseAbs().maxCoeff() < 1e-6f);
  CHECK(back.labels == c.labels);
}

TEST_CASE("cloud text: malformed lines name the line number") {
  CHECK_THROWS_WITH_AS(decode_cloud_text<double>("0 0 0 1 1\n", "bad"),
                       doctest::Contains("line 1"), std::runtime_error);
  CHECK_THROWS_WITH_AS(decode_cloud_text<double>("0 0 0 1 1 1\n0 0 0 1 1 1 3\n", "bad"),
                       doctest::Contains("line 2"), std::runtime_error);
  CHECK_THROWS_AS(decode_cloud_text<double>("0 0 nan 1 1 1\n", "bad"), std::runtime_error);
}

TEST_CASE("cloud binary: truncation and bad magic are reported with offsets") {
  auto cloud = sample_cloud(5, 11, false);
  std::string bytes = encode_cloud_binary(cloud);
  std::string cut = bytes.substr(0, bytes.size() - 7);
  CHECK_THROWS_WITH_AS(decode_cloud_binary<float>(cut, "cut"), doctest::Contains("truncated"),
                       std::runtime_error);
  std::string mangled = bytes;
  mangled[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_cloud_binary<float>(mangled, "mangled"),
                       doctest::Contains("bad magic"), std::runtime_error);
  std::string padded = bytes + "zz";
  CHECK_THROWS_WITH_AS(decode_cloud_binary<float>(padded, "padded"),
                       doctest::Contains("trailing"), std::runtime_error);
}

TEST_CASE("checkpoint: save/load round trip restores every parameter") {
  TempDir tmp;
  ModelConfig cfg;
  cfg.depths = {1, 1};
  cfg.base_channels = 8;
  cfg.base_heads = 2;
  cfg.quant_bins = 4;
  cfg.num_classes = 3;
  cfg.embedding_variant = EmbeddingVariant::KPConv;
  Model<float> a(cfg, 3), b(cfg, 99);  // different seeds -> different params
  const std::string path = tmp.file("model.stw1");
  save_checkpoint(a.parameters(), path);
  load_checkpoint(b.parameters(), path);
  for (size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i]->name == b.parameters()[i]->name);
    CHECK((a.parameters()[i]->value().array() == b.parameters()[i]->value().array()).all());
  }
}

TEST_CASE("checkpoint: missing, extra and mis-shaped records are rejected") {
  TempDir tmp;
  ModelConfig cfg;
  cfg.depths = {1};
  cfg.base_channels = 8;
  cfg.base_heads = 2;
  cfg.quant_bins = 4;
  cfg.num_classes = 2;
  cfg.embedding_variant = EmbeddingVariant::Linear;
  Model<float> model(cfg, 3);

  // missing: drop the last parameter
  ParamList<float> partial = model.parameters();
  partial.pop_back();
  save_checkpoint(partial, tmp.file("partial.stw1"));
  CHECK_THROWS_WITH_AS(load_checkpoint(model.parameters(), tmp.file("partial.stw1")),
                       doctest::Contains("missing parameter"), std::runtime_error);

  // extra: add an unknown record
  ParamList<float> extra = model.parameters();
  Parameter<float> stray(Mat<float>::Zero(2, 2), "stray.weight");
  extra.push_back(&stray);
  save_checkpoint(extra, tmp.file("extra.stw1"));
  CHECK_THROWS_WITH_AS(load_checkpoint(model.parameters(), tmp.file("extra.stw1")),
                       doctest::Contains("unknown parameter"), std::runtime_error);

  // shape mismatch
  Model<float> wider([&] {
    ModelConfig c2 = cfg;
    c2.base_channels = 16;
    return c2;
  }(), 3);
  save_checkpoint(wider.parameters(), tmp.file("wider.stw1"));
  CHECK_THROWS_WITH_AS(load_checkpoint(model.parameters(), tmp.file("wider.stw1")),
                       doctest::Contains("shape"), std::runtime_error);

  // corrupt magic
  std::string bytes = detail::read_file(tmp.file("partial.stw1"));
  bytes[0] = 'Q';
  detail::write_file(tmp.file("bad.stw1"), bytes);
  CHECK_THROWS_WITH_AS(load_checkpoint(model.parameters(), tmp.file("bad.stw1")),
                       doctest::Contains("bad magic"), std::runtime_error);
}

TEST_CASE("config: defaults are the S3DIS values") {
  RunConfig cfg;
  CHECK(cfg.model.s_win0 == 0.16);
  CHECK(cfg.model.grid_size == 0.04);
  CHECK(cfg.model.downsample_scale == 8);
  CHECK(cfg.model.base_channels == 48);
  CHECK(cfg.model.base_heads == 3);
  CHECK(cfg.model.depths == std::vector<int>{2, 2, 6, 2});
}

TEST_CASE("config: scannet preset") {
  RunConfig cfg;
  apply_preset(cfg, "scannet");
  CHECK(cfg.model.grid_size == 0.02);
  CHECK(cfg.model.s_win0 == 0.1);
  CHECK(cfg.model.downsample_scale == 4);
  CHECK(cfg.model.depths == std::vector<int>{3, 9, 3, 3});
  CHECK(cfg.model.extra_early_downsample);
}

TEST_CASE("config: parse, unknown keys rejected, text round trip") {
  const std::string text =
      "# comment\n"
      "preset = toy\n"
      "depths = 1,2\n"
      "lr = 0.005\n"
      "use_crpe = false\n"
      "embedding_variant = avgpool\n";
  RunConfig cfg = parse_config_text(text, "inline");
  CHECK(cfg.model.depths == std::vector<int>{1, 2});
  CHECK(cfg.lr == 0.005);
  CHECK_FALSE(cfg.model.use_crpe);
  CHECK(cfg.model.embedding_variant == EmbeddingVariant::AvgPool);
  CHECK(cfg.model.base_channels == 24);  // from the toy preset

  CHECK_THROWS_WITH_AS(parse_config_text("bogus_key = 3\n", "inline"),
                       doctest::Contains("unknown key"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config_text("use_crpe = maybe\n", "inline"),
                       doctest::Contains("boolean"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config_text("lr 0.1\n", "inline"),
                       doctest::Contains("key = value"), std::runtime_error);

  // serialize -> parse -> serialize is a fixed point
  const std::string dumped = config_to_text(cfg);
  RunConfig reparsed = parse_config_text(dumped, "dump");
  CHECK(config_to_text(reparsed) == dumped);
}

TEST_CASE("config: invalid combinations rejected by validation") {
  CHECK_THROWS_AS(parse_config_text("depths = 0\n", "inline"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("use_crpe = true\nuse_mlp_pos = true\n", "inline"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("quant_bins = 7\n", "inline"), std::invalid_argument);
}
