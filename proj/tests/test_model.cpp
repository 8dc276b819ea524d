#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "dsmr/checkpoint.hpp"
#include "dsmr/errors.hpp"
#include "dsmr/model.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dsmr;

namespace {

ModelConfig small_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.depth = 2;
  c.channels = {8, 16, 32};
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("parameter count matches the hand count") {
  // enc0 1*8*16+8+8, enc1 8*16*16+16+16, bottleneck 16*32*16+32+32,
  // dec1 32*16*16+16, dec0 16*8*16+8, head 8*1*16+1
  CHECK(param_count(small_config()) == 144 + 2080 + 8256 + 8208 + 2056 + 129);
  CHECK(param_count(small_config()) == 20873);
  CHECK(param_count(ModelConfig{}) == 55846721);

  const auto model = Model<float>::build(small_config());
  std::size_t total = 0;
  for (const auto& p : model.parameters()) total += p.tensor.size();
  CHECK(total == 20873);
}

TEST_CASE("parameter names and shapes") {
  const auto layout = parameter_layout(small_config());
  std::vector<std::string> names;
  for (const auto& [n, s] : layout) names.push_back(n);
  const std::vector<std::string> expected{
      "enc0.conv.weight",       "enc0.conv.bias",       "enc0.prelu.slope",
      "enc1.conv.weight",       "enc1.conv.bias",       "enc1.prelu.slope",
      "bottleneck.conv.weight", "bottleneck.conv.bias", "bottleneck.prelu.slope",
      "dec1.conv.weight",       "dec1.conv.bias",       "dec0.conv.weight",
      "dec0.conv.bias",         "head.conv.weight",     "head.conv.bias"};
  CHECK(names == expected);
  CHECK(layout[9].second == Shape{16, 32, 4, 4});
  CHECK(layout[13].second == Shape{1, 8, 4, 4});
}

TEST_CASE("initialization") {
  const auto model = Model<double>::build(small_config(11));
  for (const auto& p : model.parameters()) {
    if (p.name.ends_with(".bias")) {
      for (double v : p.tensor.data()) CHECK(v == 0.0);
    } else if (p.name.ends_with(".slope")) {
      for (double v : p.tensor.data()) CHECK(v == 0.25);
    }
  }
  // Kaiming: std of the bottleneck kernel is sqrt(gain / fan_in).
  const auto& k = model.param("bottleneck.conv.weight");
  double ss = 0.0;
  for (double v : k.data()) ss += v * v;
  const double expected = std::sqrt(2.0 / (1.0 + 0.0625) / (16.0 * 16.0));
  CHECK(std::sqrt(ss / double(k.size())) == doctest::Approx(expected).epsilon(0.05));

  const auto again = Model<double>::build(small_config(11));
  const auto other = Model<double>::build(small_config(12));
  CHECK(oracle::values(again.param("enc1.conv.weight")) ==
        oracle::values(model.param("enc1.conv.weight")));
  CHECK(oracle::values(other.param("enc1.conv.weight")) !=
        oracle::values(model.param("enc1.conv.weight")));
}

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.channels = {8, 16};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.in_channels = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.depth = 0;
  c.channels = {8};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("forward rejects sizes that are not multiples of 2^depth") {
  const auto model = Model<float>::build(small_config());
  auto g = Graph<float>::inference();
  try {
    model.forward_residual(g, Tensor<float>(Shape{1, 1, 12, 10}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("multiples of 4") != std::string::npos);
  }
  CHECK_THROWS_AS(model.forward_residual(g, Tensor<float>(Shape{1, 2, 8, 8})), DimensionError);
  CHECK(model.forward_residual(g, Tensor<float>(Shape{2, 1, 12, 8})).refined.shape() ==
        Shape{2, 1, 12, 8});
}

TEST_CASE("forward matches the straight-line oracle") {
  CounterRng rng(5);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto model = Model<double>::build(small_config(seed));
    // Non-trivial slopes and biases so every parameter matters.
    for (auto& p : model.parameters())
      if (!p.name.ends_with(".weight"))
        for (auto& v : p.tensor.data()) v = rng.uniform(-0.3, 0.3);
    auto x = oracle::random_tensor<double>(rng, {2, 1, 8, 12});
    auto g = Graph<double>::inference();
    const auto out = model.forward_residual(g, x);
    const auto ref = oracle::model_residual(model, oracle::from_tensor(x));
    CHECK(oracle::max_abs_diff(oracle::values(out.residual), ref.v) < 1e-12);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(out.refined[i] == x[i] + out.residual[i]);

    const auto mf = model.cast<float>();
    const auto xf = Tensor<float>(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
    auto gf = Graph<float>::inference();
    const auto outf = mf.forward_residual(gf, xf);
    CHECK(oracle::max_abs_diff(oracle::values(outf.residual), ref.v) < 1e-5);
  }
}

TEST_CASE("zero head gives the exact identity") {
  auto model = Model<float>::build(small_config());
  model.zero_head();
  CounterRng rng(9);
  auto x = oracle::random_tensor<float>(rng, {3, 1, 8, 8}, -100.0, 100.0);
  auto g = Graph<float>::inference();
  const auto out = model.forward_residual(g, x);
  CHECK(std::memcmp(out.refined.ptr(), x.ptr(), x.size() * sizeof(float)) == 0);
}

TEST_CASE("checkpoint round trip") {
  testutil::TempDir dir;
  auto model = Model<float>::build(small_config(21));
  const auto path = dir.path / "m.ckpt";
  save_model(model, path, NormStats{2.5});
  const auto ck = load_model(path);
  CHECK(ck.model.config() == model.config());
  REQUIRE(ck.stats.has_value());
  CHECK(ck.stats->global_std == 2.5);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    CHECK(ck.model.parameters()[i].name == model.parameters()[i].name);
    CHECK(oracle::values(ck.model.parameters()[i].tensor) ==
          oracle::values(model.parameters()[i].tensor));
  }
  save_model(model, dir.path / "nostats.ckpt");
  CHECK_FALSE(load_model(dir.path / "nostats.ckpt").stats.has_value());
}

TEST_CASE("checkpoint corruption is reported by kind") {
  testutil::TempDir dir;
  const auto model = Model<float>::build(small_config());
  const auto path = dir.path / "m.ckpt";
  save_model(model, path);
  const std::string bytes = testutil::read_file(path);

  std::string bad = bytes;
  bad[0] = 'X';
  testutil::write_file(dir.path / "magic.ckpt", bad);
  CHECK_THROWS_AS(load_model(dir.path / "magic.ckpt"), FormatError);

  testutil::write_file(dir.path / "short.ckpt", bytes.substr(0, bytes.size() - 4));
  CHECK_THROWS_AS(load_model(dir.path / "short.ckpt"), PayloadError);

  testutil::write_file(dir.path / "long.ckpt", bytes + "abcd");
  CHECK_THROWS_AS(load_model(dir.path / "long.ckpt"), PayloadError);

  CHECK_THROWS_AS(load_model(dir.path / "missing.ckpt"), DataError);

  // A manifest that declares a different architecture than the tensors hold.
  auto c = read_container(path, kCheckpointMagic);
  c.set("model.channels", "8,16,64");
  write_container(c, dir.path / "shape.ckpt");
  CHECK_THROWS_AS(load_model(dir.path / "shape.ckpt"), ShapeMismatchError);
}
