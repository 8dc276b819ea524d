#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dsmr/errors.hpp"
#include "dsmr/raster.hpp"
#include "dsmr/synth.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dsmr;

namespace {

double mae_valid(const Raster& a, const Raster& b) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.valid[i] && b.valid[i]) {
      s += std::abs(double(a.heights[i]) - double(b.heights[i]));
      ++n;
    }
  return s / double(n);
}

}  // namespace

TEST_CASE("scenes are deterministic in the seed") {
  SceneSpec spec;
  spec.seed = 17;
  const auto a = generate_clean(spec);
  const auto b = generate_clean(spec);
  CHECK(same_raster(a, b));
  CHECK(same_raster(degrade(a, spec), degrade(b, spec)));
  spec.seed = 18;
  CHECK_FALSE(same_raster(a, generate_clean(spec)));
  CHECK(a.fully_valid());
  CHECK(a.width == 256);
  CHECK(a.gsd == 0.10);
}

TEST_CASE("terrain stays within its amplitude") {
  SceneSpec spec;
  spec.building_count = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    spec.seed = s;
    spec.terrain_base = 100.0;
    spec.terrain_amplitude = 0.5 + double(s);
    const auto r = generate_clean(spec);
    const auto [lo, hi] = std::minmax_element(r.heights.begin(), r.heights.end());
    CHECK(*hi - *lo <= spec.terrain_amplitude + 1e-4);
    CHECK(*hi - *lo > 0.0f);
    CHECK(std::abs((*lo + *hi) / 2.0 - 100.0) <= spec.terrain_amplitude / 2.0 + 1e-4);
  }
}

TEST_CASE("flat roofs are level and gabled halves are planar") {
  SceneSpec spec;
  spec.width = spec.height = 192;
  spec.building_count = 4;
  spec.roof_dormers = false;
  std::size_t flat_seen = 0, gabled_seen = 0;
  for (std::uint64_t s = 0; s < 12; ++s) {
    spec.seed = s;
    const auto scene = generate_scene(spec);
    for (std::size_t b = 0; b < scene.buildings.size(); ++b) {
      const auto& bld = scene.buildings[b];
      std::vector<double> xs[2], ys[2], zs[2];
      for (std::size_t i = 0; i < scene.surface.size(); ++i) {
        if (scene.building_id[i] != int(b)) continue;
        const double row = double(i / spec.width), col = double(i % spec.width);
        double u, v;
        bld.local(row, col, u, v);
        if (std::abs(v) < 1e-9) continue;
        const int half = v > 0 ? 1 : 0;
        xs[half].push_back(col);
        ys[half].push_back(row);
        zs[half].push_back(scene.surface[i]);
      }
      if (bld.roof == RoofType::kFlat) {
        ++flat_seen;
        std::vector<double> all = zs[0];
        all.insert(all.end(), zs[1].begin(), zs[1].end());
        REQUIRE(!all.empty());
        const auto [lo, hi] = std::minmax_element(all.begin(), all.end());
        CHECK(*hi == *lo);
      } else {
        REQUIRE(bld.roof == RoofType::kGabled);
        for (int h = 0; h < 2; ++h) {
          if (xs[h].size() < 3) continue;
          ++gabled_seen;
          CHECK(oracle::plane_fit_max_residual(xs[h], ys[h], zs[h]) < 1e-6);
        }
      }
    }
  }
  CHECK(flat_seen > 0);
  CHECK(gabled_seen > 0);
}

TEST_CASE("dormers sit on the upper slope") {
  SceneSpec spec;
  spec.roof_flat = false;
  spec.roof_gabled = false;
  spec.building_min_size = 6.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    spec.seed = s;
    const auto scene = generate_scene(spec);
    for (const auto& b : scene.buildings) {
      CHECK(b.roof == RoofType::kGabledDormers);
      CHECK(!b.dormers.empty());
      CHECK(b.dormers.size() <= 2);
      for (const auto& d : b.dormers) {
        CHECK(d.v0 > 0.0);
        CHECK(d.v1 <= b.half_v);
        CHECK(d.u0 >= -b.half_u);
        CHECK(d.u1 <= b.half_u);
      }
    }
  }
}

TEST_CASE("buildings never overlap and placement failure is reported") {
  SceneSpec spec;
  spec.building_count = 8;
  for (std::uint64_t s = 0; s < 10; ++s) {
    spec.seed = s;
    const auto scene = generate_scene(spec);
    CHECK(scene.buildings.size() == 8);
    for (std::size_t i = 0; i < scene.surface.size(); ++i) {
      const double row = double(i / spec.width), col = double(i % spec.width);
      int covering = 0;
      for (const auto& b : scene.buildings) covering += b.covers(row, col) ? 1 : 0;
      CHECK(covering <= 1);
      if (covering == 1) CHECK(scene.building_id[i] >= 0);
    }
  }
  spec.width = spec.height = 64;
  spec.building_count = 40;
  spec.placement_retries = 20;
  CHECK_THROWS_AS(generate_scene(spec), PlacementError);
}

TEST_CASE("degradation: exact hole count, sigma monotonicity, clean input untouched") {
  SceneSpec spec;
  spec.seed = 5;
  const auto clean = generate_clean(spec);
  const auto before = clean;
  const auto d = degrade(clean, spec);
  CHECK(same_raster(clean, before));
  CHECK(d.size() - d.count_valid() == std::size_t(std::llround(spec.hole_rate * double(d.size()))));

  double last = -1.0;
  for (double sigma : {0.0, 0.1, 0.3, 0.6, 1.0}) {
    spec.noise_sigma = sigma;
    spec.vegetation_blob_count = 0;
    const double m = mae_valid(clean, degrade(clean, spec));
    CHECK(m > last);
    last = m;
  }

  spec.noise_sigma = 0.0;
  spec.vegetation_blob_count = 0;
  spec.hole_rate = 0.0;
  CHECK(same_raster(degrade(clean, spec), clean));

  spec.vegetation_blob_count = 30;
  const auto veg = degrade(clean, spec);
  for (std::size_t i = 0; i < clean.size(); ++i) CHECK(veg.heights[i] >= clean.heights[i]);
}

TEST_CASE("scene spec validation") {
  SceneSpec s;
  s.hole_rate = 1.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SceneSpec{};
  s.building_min_size = 9.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SceneSpec{};
  s.roof_flat = s.roof_gabled = s.roof_dormers = false;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SceneSpec{};
  s.width = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("synth sets are identical for any thread count and round-trip the manifest") {
  testutil::TempDir a, b;
  SceneSpec spec;
  spec.width = spec.height = 64;
  spec.building_count = 1;
  const auto sa = write_synth_set(a.path, spec, 5, 99, 1);
  const auto sb = write_synth_set(b.path, spec, 5, 99, 3);
  REQUIRE(sa.size() == 5);
  CHECK(testutil::read_file(a.path / "manifest.tsv") == testutil::read_file(b.path / "manifest.tsv"));
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(sa[k].seed == sample_seed(99, k));
    CHECK(testutil::read_file(a.path / sa[k].clean) == testutil::read_file(b.path / sb[k].clean));
    CHECK(testutil::read_file(a.path / sa[k].degraded) ==
          testutil::read_file(b.path / sb[k].degraded));
  }
  const auto back = read_manifest(a.path / "manifest.tsv");
  REQUIRE(back.size() == 5);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(back[k].seed == sa[k].seed);
    spec.seed = sa[k].seed;
    const auto clean = generate_clean(spec);
    CHECK(same_raster(read_raster(back[k].clean), clean));
    CHECK(same_raster(read_raster(back[k].degraded), degrade(clean, spec)));
  }
  CHECK(write_synth_set(a.path / "empty", spec, 0, 1).empty());
  CHECK(read_manifest(a.path / "empty" / "manifest.tsv").empty());
}
