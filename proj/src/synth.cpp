#include "dsmr/synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "dsmr/errors.hpp"
#include "dsmr/format.hpp"
#include "dsmr/random.hpp"

namespace dsmr {
namespace {

// Stream identifiers; each concern draws from its own counter-based stream.
enum Stream : std::uint64_t {
  kTerrain = 1,
  kBuildings = 2,
  kNoise = 101,
  kVegetation = 102,
  kHoles = 103,
};

struct TerrainWave {
  double amp, fx, fy, phase;
};

std::vector<TerrainWave> terrain_waves(const SceneSpec& spec) {
  CounterRng rng(derive_seed(spec.seed, kTerrain));
  constexpr int kWaves = 3;
  std::vector<TerrainWave> waves;
  const double extent = static_cast<double>(std::max(spec.width, spec.height));
  for (int k = 0; k < kWaves; ++k) {
    // Wavelengths between one and four scene extents keep the terrain smooth.
    const double wavelength = extent * rng.uniform(1.0, 4.0);
    const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amp = spec.terrain_amplitude / (2.0 * kWaves) * rng.uniform(0.5, 1.0);
    waves.push_back({amp, std::cos(dir) / wavelength, std::sin(dir) / wavelength, phase});
  }
  return waves;
}

double terrain_at(const std::vector<TerrainWave>& waves, double base, double row, double col) {
  double z = base;
  for (const auto& w : waves)
    z += w.amp * std::cos(2.0 * std::numbers::pi * (w.fx * (col + 0.5) + w.fy * (row + 0.5)) + w.phase);
  return z;
}

}  // namespace

const char* to_string(RoofType roof) {
  switch (roof) {
    case RoofType::kFlat: return "flat";
    case RoofType::kGabled: return "gabled";
    case RoofType::kGabledDormers: return "gabled-with-dormers";
  }
  return "?";
}

void SceneSpec::validate() const {
  if (width == 0 || height == 0) throw ConfigError("scene extent must be positive");
  if (!(gsd > 0)) throw ConfigError("scene gsd must be positive");
  if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma must be >= 0");
  if (!(hole_rate >= 0 && hole_rate <= 1)) throw ConfigError("hole_rate must lie in [0, 1]");
  if (!(hole_cluster_size > 0)) throw ConfigError("hole_cluster_size must be positive");
  if (!(terrain_amplitude >= 0)) throw ConfigError("terrain_amplitude must be >= 0");
  if (!(building_min_size > 0 && building_max_size >= building_min_size))
    throw ConfigError("building size range is invalid");
  if (!(building_min_height >= 0 && building_max_height >= building_min_height))
    throw ConfigError("building height range is invalid");
  if (!(ridge_min_rise >= 0 && ridge_max_rise >= ridge_min_rise))
    throw ConfigError("ridge rise range is invalid");
  if (!(rotated_fraction >= 0 && rotated_fraction <= 1))
    throw ConfigError("rotated_fraction must lie in [0, 1]");
  if (building_count > 0 && !roof_flat && !roof_gabled && !roof_dormers)
    throw ConfigError("at least one roof type must be enabled");
  if (!(vegetation_min_height > 0 && vegetation_max_height >= vegetation_min_height))
    throw ConfigError("vegetation height range is invalid");
  if (!(vegetation_min_radius > 0 && vegetation_max_radius >= vegetation_min_radius))
    throw ConfigError("vegetation radius range is invalid");
  if (!(vegetation_speckle >= 0)) throw ConfigError("vegetation_speckle must be >= 0");
}

void Building::local(double row, double col, double& u, double& v) const {
  const double x = col + 0.5 - cx, y = row + 0.5 - cy;
  const double c = std::cos(angle), s = std::sin(angle);
  u = c * x + s * y;
  v = -s * x + c * y;
}

bool Building::covers(double row, double col) const {
  double u, v;
  local(row, col, u, v);
  return std::abs(u) <= half_u && std::abs(v) <= half_v;
}

double Building::roof_height(double row, double col) const {
  double u, v;
  local(row, col, u, v);
  const double eaves = base + eave;
  if (roof == RoofType::kFlat) return eaves;
  double z = eaves + rise * (1.0 - std::abs(v) / half_v);
  for (const auto& d : dormers)
    if (u >= d.u0 && u <= d.u1 && v >= d.v0 && v <= d.v1) z = std::max(z, d.top);
  return z;
}

Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  const std::size_t w = spec.width, h = spec.height;
  const auto waves = terrain_waves(spec);

  Scene scene;
  scene.raster = Raster(w, h, spec.gsd);
  scene.surface.resize(w * h);
  scene.building_id.assign(w * h, -1);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      scene.surface[r * w + c] = terrain_at(waves, spec.terrain_base, double(r), double(c));

  std::vector<RoofType> roofs;
  if (spec.roof_flat) roofs.push_back(RoofType::kFlat);
  if (spec.roof_gabled) roofs.push_back(RoofType::kGabled);
  if (spec.roof_dormers) roofs.push_back(RoofType::kGabledDormers);

  CounterRng rng(derive_seed(spec.seed, kBuildings));
  const double px = 1.0 / spec.gsd;  // pixels per metre
  constexpr double kGap = 2.0;       // pixels kept clear between buildings and the border
  for (std::size_t b = 0; b < spec.building_count; ++b) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < spec.placement_retries && !placed; ++attempt) {
      Building bld{};
      const double su = rng.uniform(spec.building_min_size, spec.building_max_size) * px;
      const double sv = rng.uniform(spec.building_min_size, spec.building_max_size) * px;
      bld.half_u = std::max(su, sv) / 2.0;
      bld.half_v = std::min(su, sv) / 2.0;
      bld.angle = rng.uniform() < spec.rotated_fraction ? rng.uniform(0.0, std::numbers::pi) : 0.0;
      const double c = std::abs(std::cos(bld.angle)), s = std::abs(std::sin(bld.angle));
      const double ext_x = c * bld.half_u + s * bld.half_v;
      const double ext_y = s * bld.half_u + c * bld.half_v;
      const double lo_x = ext_x + kGap, hi_x = double(w) - ext_x - kGap;
      const double lo_y = ext_y + kGap, hi_y = double(h) - ext_y - kGap;
      if (hi_x <= lo_x || hi_y <= lo_y) {
        rng.next();
        rng.next();
        continue;
      }
      bld.cx = rng.uniform(lo_x, hi_x);
      bld.cy = rng.uniform(lo_y, hi_y);
      bld.roof = roofs[rng.below(roofs.size())];
      bld.base = terrain_at(waves, spec.terrain_base, bld.cy - 0.5, bld.cx - 0.5);
      bld.eave = rng.uniform(spec.building_min_height, spec.building_max_height);
      bld.rise = bld.roof == RoofType::kFlat ? 0.0 : rng.uniform(spec.ridge_min_rise, spec.ridge_max_rise);
      if (bld.roof == RoofType::kGabledDormers) {
        const std::size_t n = 1 + rng.below(2);
        for (std::size_t k = 0; k < n; ++k) {
          Building::Dormer d{};
          const double du = bld.half_u * rng.uniform(0.2, 0.4);
          const double centre = rng.uniform(-bld.half_u + du, bld.half_u - du);
          d.u0 = centre - du / 2;
          d.u1 = centre + du / 2;
          d.v0 = bld.half_v * rng.uniform(0.3, 0.5);
          d.v1 = bld.half_v * rng.uniform(0.8, 0.95);
          d.top = bld.base + bld.eave + bld.rise * (1.0 - d.v0 / bld.half_v);
          bld.dormers.push_back(d);
        }
      }

      // Reject overlap with earlier buildings, including the gap margin.
      const long r0 = std::max<long>(0, long(std::floor(bld.cy - ext_y - kGap)));
      const long r1 = std::min<long>(long(h) - 1, long(std::ceil(bld.cy + ext_y + kGap)));
      const long c0 = std::max<long>(0, long(std::floor(bld.cx - ext_x - kGap)));
      const long c1 = std::min<long>(long(w) - 1, long(std::ceil(bld.cx + ext_x + kGap)));
      Building grown = bld;
      grown.half_u += kGap;
      grown.half_v += kGap;
      bool clash = false;
      for (long r = r0; r <= r1 && !clash; ++r)
        for (long cc = c0; cc <= c1 && !clash; ++cc)
          clash = grown.covers(double(r), double(cc)) && scene.building_id[r * w + cc] >= 0;
      if (clash) continue;

      const int id = static_cast<int>(scene.buildings.size());
      std::size_t covered = 0;
      for (long r = r0; r <= r1; ++r)
        for (long cc = c0; cc <= c1; ++cc)
          if (bld.covers(double(r), double(cc))) {
            scene.building_id[r * w + cc] = id;
            scene.surface[r * w + cc] = bld.roof_height(double(r), double(cc));
            ++covered;
          }
      scene.buildings.push_back(std::move(bld));
      placed = covered > 0;
    }
    if (!placed)
      throw PlacementError("could not place building " + std::to_string(b + 1) + " of " +
                           std::to_string(spec.building_count) + " after " +
                           std::to_string(spec.placement_retries) + " attempts");
  }
  for (std::size_t i = 0; i < w * h; ++i) scene.raster.heights[i] = static_cast<float>(scene.surface[i]);
  return scene;
}

Raster generate_clean(const SceneSpec& spec) { return generate_scene(spec).raster; }

Raster degrade(const Raster& clean, const SceneSpec& spec) {
  spec.validate();
  clean.validate();
  Raster out = clean;
  const std::size_t w = clean.width, h = clean.height, n = clean.size();

  if (spec.noise_sigma > 0) {
    CounterRng rng(derive_seed(spec.seed, kNoise));
    for (std::size_t i = 0; i < n; ++i) {
      const double e = spec.noise_sigma * rng.normal();
      if (out.valid[i]) out.heights[i] = static_cast<float>(out.heights[i] + e);
    }
  }

  CounterRng veg(derive_seed(spec.seed, kVegetation));
  const double px = 1.0 / clean.gsd;
  for (std::size_t b = 0; b < spec.vegetation_blob_count; ++b) {
    const double cx = veg.uniform(0.0, double(w)), cy = veg.uniform(0.0, double(h));
    const double rx = veg.uniform(spec.vegetation_min_radius, spec.vegetation_max_radius) * px;
    const double ry = veg.uniform(spec.vegetation_min_radius, spec.vegetation_max_radius) * px;
    const double top = veg.uniform(spec.vegetation_min_height, spec.vegetation_max_height);
    const std::uint64_t speckle_key = veg.next();
    const long r0 = std::max<long>(0, long(std::floor(cy - ry)));
    const long r1 = std::min<long>(long(h) - 1, long(std::ceil(cy + ry)));
    const long c0 = std::max<long>(0, long(std::floor(cx - rx)));
    const long c1 = std::min<long>(long(w) - 1, long(std::ceil(cx + rx)));
    for (long r = r0; r <= r1; ++r)
      for (long c = c0; c <= c1; ++c) {
        const double dx = (c + 0.5 - cx) / rx, dy = (r + 0.5 - cy) / ry;
        const double rho2 = dx * dx + dy * dy;
        if (rho2 >= 1.0) continue;
        const std::size_t i = std::size_t(r) * w + std::size_t(c);
        // Speckle is indexed by pixel so overlapping blobs stay deterministic.
        CounterRng sp(speckle_key, i * 2);
        const double bump = std::max(
            0.0, top * std::sqrt(1.0 - rho2) * (1.0 + spec.vegetation_speckle * sp.normal()));
        if (out.valid[i]) out.heights[i] = static_cast<float>(out.heights[i] + bump);
      }
  }

  const auto target = static_cast<std::size_t>(std::llround(spec.hole_rate * double(n)));
  std::size_t holes = 0;
  for (std::size_t i = 0; i < n; ++i) holes += !out.valid[i];
  CounterRng hr(derive_seed(spec.seed, kHoles));
  while (holes < target) {
    const double cx = hr.uniform(0.0, double(w)), cy = hr.uniform(0.0, double(h));
    const double radius = spec.hole_cluster_size * hr.uniform(0.5, 1.5);
    const long r0 = std::max<long>(0, long(std::floor(cy - radius)));
    const long r1 = std::min<long>(long(h) - 1, long(std::ceil(cy + radius)));
    const long c0 = std::max<long>(0, long(std::floor(cx - radius)));
    const long c1 = std::min<long>(long(w) - 1, long(std::ceil(cx + radius)));
    for (long r = r0; r <= r1 && holes < target; ++r)
      for (long c = c0; c <= c1 && holes < target; ++c) {
        const double dx = c + 0.5 - cx, dy = r + 0.5 - cy;
        const std::size_t i = std::size_t(r) * w + std::size_t(c);
        if (dx * dx + dy * dy <= radius * radius && out.valid[i]) {
          out.set_nodata(i);
          ++holes;
        }
      }
  }
  return out;
}

std::uint64_t sample_seed(std::uint64_t master_seed, std::size_t index) {
  return derive_seed(master_seed, 0x5CE0E000ULL + index);
}

std::vector<SynthSample> write_synth_set(const std::filesystem::path& dir, const SceneSpec& spec,
                                         std::size_t count, std::uint64_t seed,
                                         std::size_t threads) {
  spec.validate();
  std::filesystem::create_directories(dir);
  std::vector<SynthSample> samples(count);
  for (std::size_t k = 0; k < count; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "%05zu", k);
    samples[k] = {sample_seed(seed, k), std::string("clean_") + name + ".dsm",
                  std::string("degraded_") + name + ".dsm"};
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  const auto worker = [&] {
    for (std::size_t k; !failed && (k = next++) < count;) {
      try {
        SceneSpec s = spec;
        s.seed = samples[k].seed;
        const Raster clean = generate_clean(s);
        write_raster(clean, dir / samples[k].clean);
        write_raster(degrade(clean, s), dir / samples[k].degraded);
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::max<std::size_t>(1, threads); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::ofstream out(dir / "manifest.tsv");
  if (!out) throw DataError("cannot write manifest in '" + dir.string() + "'");
  out << "seed\tclean\tdegraded\n";
  for (const auto& s : samples) out << s.seed << '\t' << s.clean << '\t' << s.degraded << '\n';
  if (!out) throw DataError("failed writing manifest in '" + dir.string() + "'");
  return samples;
}

std::vector<SynthSample> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("seed\tclean\tdegraded", 0) != 0)
    throw FormatError("'" + path.string() + "': missing manifest header");
  const auto base = path.parent_path();
  std::vector<SynthSample> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string seed, clean, degraded;
    if (!std::getline(fields, seed, '\t') || !std::getline(fields, clean, '\t') ||
        !std::getline(fields, degraded))
      throw FormatError("'" + path.string() + "': malformed manifest row '" + line + "'");
    std::uint64_t s;
    try {
      s = parse_number<std::uint64_t>(seed);
    } catch (const ConfigError&) {
      throw FormatError("'" + path.string() + "': bad seed '" + seed + "'");
    }
    out.push_back({s, (base / clean).string(), (base / degraded).string()});
  }
  return out;
}

}  // namespace dsmr
