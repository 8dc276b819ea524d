#include <doctest.h>

#include "dsmr/config.hpp"
#include "dsmr/errors.hpp"
#include "dsmr/random.hpp"
#include "test_util.hpp"

using namespace dsmr;

TEST_CASE("defaults survive a text round trip") {
  RunConfig a;
  RunConfig b;
  b.apply_text(a.to_text());
  CHECK(a.to_text() == b.to_text());
  CHECK(a.train.loss.img == 1.0);
  CHECK(a.train.loss.weights == 1e-6);
  CHECK(a.train.loss.activity == 1e-5);
  CHECK(a.train.loss.feat == 0.0);
  CHECK(a.model.depth == 5);
  CHECK(a.prepare.patch_size == 256);
}

TEST_CASE("every listed key is settable from text and echoed back") {
  const auto keys = RunConfig::keys();
  CHECK(keys.size() > 40);
  const auto text = RunConfig{}.to_text();
  for (const auto& k : keys) CHECK(text.find(k + " = ") != std::string::npos);
}

TEST_CASE("overrides, comments, and errors") {
  RunConfig c;
  c.apply_text("# comment\nmodel.depth = 2\n\nmodel.channels = 8,16,32  # trailing\n");
  CHECK(c.model.depth == 2);
  CHECK(c.model.channels == std::vector<std::size_t>{8, 16, 32});
  c.apply_override("train.learning_rate=0.01");
  CHECK(c.train.adam.lr == 0.01);
  c.apply_override("prepare.augment=false");
  CHECK_FALSE(c.prepare.augment);
  CHECK_NOTHROW(c.validate());

  CHECK_THROWS_AS(c.set("model.nonsense", "1"), ConfigError);
  CHECK_THROWS_AS(c.set("model.depth", "two"), ConfigError);
  CHECK_THROWS_AS(c.set("model.depth", "-1"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("no_equals_sign"), ConfigError);
  CHECK_THROWS_AS(c.apply_text("just words\n"), ConfigError);
  CHECK_THROWS_AS(c.apply_file("/nonexistent/dsmr.cfg"), ConfigError);

  c.set("model.depth", "3");
  CHECK_THROWS_AS(c.validate(), ConfigError);  // channel list no longer matches
}

TEST_CASE("module seeds derive from the master seed") {
  RunConfig c;
  c.seed = 42;
  c.resolve_seeds();
  CHECK(c.model.seed == derive_seed(42, 1));
  CHECK(c.train.seed == derive_seed(42, 2));
  CHECK(c.prepare.seed == derive_seed(42, 3));
  CHECK(c.scene.seed == 42);
  RunConfig d;
  d.seed = 43;
  d.resolve_seeds();
  CHECK(d.model.seed != c.model.seed);
}

TEST_CASE("config files") {
  testutil::TempDir dir;
  testutil::write_file(dir.path / "a.cfg", "seed = 7\nthreads = 2\ninfer.tile = 256\n");
  RunConfig c;
  c.apply_file(dir.path / "a.cfg");
  CHECK(c.seed == 7);
  CHECK(c.threads == 2);
  CHECK(c.tile == 256);
}
