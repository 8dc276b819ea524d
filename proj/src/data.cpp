#include "dsmr/data.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <sstream>

#include "dsmr/checkpoint.hpp"
#include "dsmr/errors.hpp"
#include "dsmr/format.hpp"
#include "dsmr/random.hpp"

namespace dsmr {

// ---------------------------------------------------------------------------
// fill_holes

Raster fill_holes(const Raster& raster, const FillOptions& options) {
  raster.validate();
  const std::size_t w = raster.width, h = raster.height, n = raster.size();
  if (raster.count_valid() == 0) throw DataError("fill_holes: raster has no valid cells");
  Raster out = raster;
  if (raster.count_valid() == n) return out;

  std::vector<double> z(n, 0.0);
  std::vector<std::uint8_t> known(raster.valid);
  std::vector<std::size_t> holes;
  for (std::size_t i = 0; i < n; ++i) {
    if (raster.valid[i])
      z[i] = raster.heights[i];
    else
      holes.push_back(i);
  }

  const auto for_neighbours = [&](std::size_t i, auto&& fn) {
    const std::size_t r = i / w, c = i % w;
    if (r > 0) fn(i - w);
    if (r + 1 < h) fn(i + w);
    if (c > 0) fn(i - 1);
    if (c + 1 < w) fn(i + 1);
  };

  // Initial guess: peel layers inward, each cell taking the mean of the
  // neighbours assigned in earlier layers.
  std::vector<std::size_t> frontier;
  for (auto i : holes) {
    bool touches = false;
    for_neighbours(i, [&](std::size_t j) { touches |= known[j] != 0; });
    if (touches) frontier.push_back(i);
  }
  std::vector<std::uint8_t> queued(n, 0);
  for (auto i : frontier) queued[i] = 1;
  while (!frontier.empty()) {
    std::vector<double> values(frontier.size());
    for (std::size_t k = 0; k < frontier.size(); ++k) {
      double sum = 0;
      int cnt = 0;
      for_neighbours(frontier[k], [&](std::size_t j) {
        if (known[j]) {
          sum += z[j];
          ++cnt;
        }
      });
      values[k] = sum / cnt;
    }
    std::vector<std::size_t> next;
    for (std::size_t k = 0; k < frontier.size(); ++k) {
      z[frontier[k]] = values[k];
      known[frontier[k]] = 1;
    }
    for (auto i : frontier)
      for_neighbours(i, [&](std::size_t j) {
        if (!known[j] && !queued[j]) {
          queued[j] = 1;
          next.push_back(j);
        }
      });
    frontier = std::move(next);
  }

  for (std::size_t sweep = 0; sweep < options.max_sweeps; ++sweep) {
    double max_delta = 0;
    for (auto i : holes) {
      double sum = 0;
      int cnt = 0;
      for_neighbours(i, [&](std::size_t j) {
        sum += z[j];
        ++cnt;
      });
      const double v = sum / cnt;
      max_delta = std::max(max_delta, std::abs(v - z[i]));
      z[i] = v;
    }
    if (max_delta < options.tolerance) break;
  }

  for (auto i : holes) {
    out.heights[i] = static_cast<float>(z[i]);
    out.valid[i] = 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Regions

bool Region::intersects(const Region& o) const {
  if (empty() || o.empty()) return false;
  return row < o.row + o.rows && o.row < row + rows && col < o.col + o.cols && o.col < col + cols;
}

Split split_regions(std::size_t width, std::size_t height, std::size_t patch_size,
                    double val_frac, double test_frac) {
  if (patch_size == 0) throw ConfigError("patch size must be positive");
  if (!(val_frac >= 0 && test_frac >= 0 && val_frac + test_frac < 1))
    throw ConfigError("split fractions must be >= 0 and sum to less than 1");
  if (width < patch_size || height < patch_size)
    throw DataError("raster " + std::to_string(width) + "x" + std::to_string(height) +
                    " is smaller than one " + std::to_string(patch_size) + " px patch");
  Split s;
  if (val_frac == 0 && test_frac == 0) {
    s.train = {0, 0, height, width};
    return s;
  }
  const double area = static_cast<double>(width) * static_cast<double>(height);
  for (std::size_t band = patch_size; band + patch_size <= height; band += patch_size) {
    const auto cols_for = [&](double frac) {
      return static_cast<std::size_t>(std::llround(frac * area / static_cast<double>(band)));
    };
    const std::size_t val_cols = cols_for(val_frac), test_cols = cols_for(test_frac);
    if (val_cols + test_cols > width) continue;
    if ((val_frac > 0 && val_cols < patch_size) || (test_frac > 0 && test_cols < patch_size))
      break;
    s.train = {0, 0, height - band, width};
    if (val_frac > 0) s.val = {height - band, 0, band, val_cols};
    if (test_frac > 0) s.test = {height - band, val_cols, band, test_cols};
    return s;
  }
  throw DataError("raster " + std::to_string(width) + "x" + std::to_string(height) +
                  " is too small to hold one " + std::to_string(patch_size) +
                  " px patch per region at the requested fractions");
}

// ---------------------------------------------------------------------------
// Dihedral group

namespace {

struct Mat2 {
  int a, b, c, d;  // [[a, b], [c, d]] acting on centred (row, col)
  bool operator==(const Mat2&) const = default;
};

constexpr std::array<Mat2, 8> kSourceMaps{{
    {1, 0, 0, 1},    // identity
    {0, 1, -1, 0},   // rot90: src = (j, n-1-i)
    {-1, 0, 0, -1},  // rot180
    {0, -1, 1, 0},   // rot270: src = (n-1-j, i)
    {1, 0, 0, -1},   // flipH
    {-1, 0, 0, 1},   // flipV
    {0, 1, 1, 0},    // transpose
    {0, -1, -1, 0},  // anti-transpose
}};

Mat2 mul(const Mat2& x, const Mat2& y) {
  return {x.a * y.a + x.b * y.c, x.a * y.b + x.b * y.d, x.c * y.a + x.d * y.c,
          x.c * y.b + x.d * y.d};
}

}  // namespace

const char* to_string(Dihedral op) {
  static constexpr const char* names[] = {"identity", "rot90", "rot180", "rot270",
                                          "flipH",    "flipV", "transpose", "antitranspose"};
  return names[static_cast<int>(op)];
}

Dihedral compose(Dihedral first, Dihedral second) {
  const Mat2 m = mul(kSourceMaps[static_cast<int>(first)], kSourceMaps[static_cast<int>(second)]);
  for (std::size_t k = 0; k < kSourceMaps.size(); ++k)
    if (kSourceMaps[k] == m) return static_cast<Dihedral>(k);
  throw ContractError("dihedral composition left the group");
}

template <typename T>
std::vector<T> augment(std::span<const T> values, std::size_t n, Dihedral op) {
  if (values.size() != n * n)
    throw DimensionError("augment needs a square patch: " + std::to_string(values.size()) +
                         " values for side " + std::to_string(n));
  const Mat2 m = kSourceMaps[static_cast<int>(op)];
  const long last = static_cast<long>(n) - 1;
  std::vector<T> out(values.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      // Doubled centred coordinates keep the arithmetic integral.
      const long y = 2 * static_cast<long>(i) - last, x = 2 * static_cast<long>(j) - last;
      const long sy = m.a * y + m.b * x, sx = m.c * y + m.d * x;
      out[i * n + j] = values[static_cast<std::size_t>((sy + last) / 2) * n +
                              static_cast<std::size_t>((sx + last) / 2)];
    }
  return out;
}

template <typename T>
std::pair<std::vector<T>, std::vector<T>> augment_pair(std::span<const T> input,
                                                       std::span<const T> target, std::size_t n,
                                                       Dihedral op) {
  return {augment(input, n, op), augment(target, n, op)};
}

template std::vector<float> augment(std::span<const float>, std::size_t, Dihedral);
template std::vector<double> augment(std::span<const double>, std::size_t, Dihedral);
template std::vector<std::uint8_t> augment(std::span<const std::uint8_t>, std::size_t, Dihedral);
template std::pair<std::vector<float>, std::vector<float>> augment_pair(std::span<const float>,
                                                                        std::span<const float>,
                                                                        std::size_t, Dihedral);
template std::pair<std::vector<double>, std::vector<double>> augment_pair(
    std::span<const double>, std::span<const double>, std::size_t, Dihedral);

// ---------------------------------------------------------------------------
// Normalization

std::pair<std::vector<double>, double> normalize(std::span<const double> patch,
                                                 const NormStats& stats) {
  if (!(stats.global_std > 0)) throw ConfigError("global_std must be positive");
  if (patch.empty()) return {{}, 0.0};
  const double center = std::accumulate(patch.begin(), patch.end(), 0.0) /
                        static_cast<double>(patch.size());
  std::vector<double> out(patch.size());
  for (std::size_t i = 0; i < patch.size(); ++i) out[i] = (patch[i] - center) / stats.global_std;
  return {std::move(out), center};
}

std::vector<double> denormalize(std::span<const double> patch, double center,
                                const NormStats& stats) {
  if (!(stats.global_std > 0)) throw ConfigError("global_std must be positive");
  std::vector<double> out(patch.size());
  for (std::size_t i = 0; i < patch.size(); ++i) out[i] = patch[i] * stats.global_std + center;
  return out;
}

// ---------------------------------------------------------------------------
// Patches

const char* to_string(PatchRole role) {
  switch (role) {
    case PatchRole::kTrain: return "train";
    case PatchRole::kVal: return "val";
    case PatchRole::kTest: return "test";
  }
  return "?";
}

PatchRole parse_role(const std::string& text) {
  if (text == "train") return PatchRole::kTrain;
  if (text == "val") return PatchRole::kVal;
  if (text == "test") return PatchRole::kTest;
  throw FormatError("unknown patch role '" + text + "'");
}

std::vector<Origin> sample_origins(const Region& region, PatchRole role, std::size_t count,
                                   std::size_t patch_size, std::uint64_t seed) {
  if (patch_size == 0) throw ConfigError("patch size must be positive");
  if (region.rows < patch_size || region.cols < patch_size)
    throw DataError("patch of " + std::to_string(patch_size) + " px does not fit region " +
                    std::to_string(region.rows) + "x" + std::to_string(region.cols));
  std::vector<Origin> out;
  if (role == PatchRole::kTrain) {
    const std::size_t span_r = region.rows - patch_size + 1, span_c = region.cols - patch_size + 1;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      CounterRng rng(derive_seed(seed, i));
      const std::size_t r = rng.below(span_r);
      const std::size_t c = rng.below(span_c);
      out.push_back({region.row + r, region.col + c});
    }
  } else {
    for (std::size_t r = 0; r + patch_size <= region.rows; r += patch_size)
      for (std::size_t c = 0; c + patch_size <= region.cols; c += patch_size)
        out.push_back({region.row + r, region.col + c});
  }
  return out;
}

PatchSet sample_patches(const RasterPair& pair, std::size_t source, const Region& region,
                        PatchRole role, std::size_t count, std::size_t patch_size,
                        std::uint64_t seed, bool augment_patches) {
  if (pair.input.width != pair.target.width || pair.input.height != pair.target.height)
    throw DimensionError("input and target rasters differ in size");
  if (!pair.input.fully_valid() || !pair.target.fully_valid())
    throw DataError("sample_patches expects hole-filled rasters");
  if (region.row + region.rows > pair.input.height || region.col + region.cols > pair.input.width)
    throw DataError("region extends past the raster");

  PatchSet set;
  set.role = role;
  set.patch_size = patch_size;
  const std::size_t w = pair.input.width, p = patch_size;
  const auto origins = sample_origins(region, role, count, patch_size, seed);
  for (std::size_t k = 0; k < origins.size(); ++k) {
    const auto [r0, c0] = origins[k];
    Patch patch;
    patch.source = source;
    patch.row = r0;
    patch.col = c0;
    patch.input.resize(p * p);
    patch.target.resize(p * p);
    patch.target_valid.resize(p * p, 1);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) {
        const std::size_t src = (r0 + i) * w + c0 + j;
        patch.input[i * p + j] = pair.input.heights[src];
        patch.target[i * p + j] = pair.target.heights[src];
        if (!pair.target_valid.empty()) patch.target_valid[i * p + j] = pair.target_valid[src];
      }
    if (role == PatchRole::kTrain && augment_patches) {
      CounterRng rng(derive_seed(seed ^ 0xA5A5A5A5ULL, k));
      patch.aug = kAllDihedral[rng.below(kAllDihedral.size())];
      patch.input = augment<float>(patch.input, p, patch.aug);
      patch.target = augment<float>(patch.target, p, patch.aug);
      patch.target_valid = augment<std::uint8_t>(patch.target_valid, p, patch.aug);
    }
    set.patches.push_back(std::move(patch));
  }
  return set;
}

NormStats compute_norm_stats(const PatchSet& train) {
  if (train.normalized) throw ContractError("compute_norm_stats needs patches in metres");
  double ss = 0;
  std::size_t n = 0;
  for (const auto& p : train.patches) {
    const double mean = std::accumulate(p.input.begin(), p.input.end(), 0.0) /
                        static_cast<double>(p.input.size());
    for (float v : p.input) ss += (v - mean) * (v - mean);
    n += p.input.size();
  }
  if (n == 0) throw DataError("no training patches to derive normalization statistics");
  const double stddev = std::sqrt(ss / static_cast<double>(n));
  if (!(stddev > 0)) throw DataError("training heights have zero spread");
  return NormStats{stddev};
}

void normalize_patchset(PatchSet& set, const NormStats& stats) {
  if (set.normalized) throw ContractError("patch set is already normalized");
  for (auto& p : set.patches) {
    std::vector<double> in(p.input.begin(), p.input.end());
    auto [norm, center] = normalize(in, stats);
    p.center = center;
    for (std::size_t i = 0; i < norm.size(); ++i) {
      p.input[i] = static_cast<float>(norm[i]);
      p.target[i] = static_cast<float>((p.target[i] - center) / stats.global_std);
    }
  }
  set.normalized = true;
}

// ---------------------------------------------------------------------------
// Dataset

RasterPair make_pair(const Raster& degraded, const Raster& clean, const FillOptions& fill) {
  if (degraded.width != clean.width || degraded.height != clean.height)
    throw DimensionError("degraded and clean rasters differ in size");
  return RasterPair{fill_holes(degraded, fill), fill_holes(clean, fill), clean.valid};
}

Dataset prepare_dataset(std::span<const RasterPair> pairs, const PrepareConfig& config) {
  if (pairs.empty()) throw DataError("no raster pairs to prepare");
  if (config.patch_size == 0 || (config.patch_size & (config.patch_size - 1)))
    throw ConfigError("patch size must be a power of two");
  Dataset ds;
  ds.train.role = PatchRole::kTrain;
  ds.val.role = PatchRole::kVal;
  ds.test.role = PatchRole::kTest;
  for (auto* s : {&ds.train, &ds.val, &ds.test}) s->patch_size = config.patch_size;

  const auto append = [](PatchSet& dst, PatchSet&& src) {
    for (auto& p : src.patches) dst.patches.push_back(std::move(p));
  };
  // Per-(source, role) sampling seeds.
  const auto seed_for = [&](std::size_t source, PatchRole role) {
    return derive_seed(derive_seed(config.seed, source), static_cast<std::uint64_t>(role) + 1);
  };

  if (pairs.size() == 1) {
    const auto& pair = pairs[0];
    const Split split = split_regions(pair.input.width, pair.input.height, config.patch_size,
                                      config.val_frac, config.test_frac);
    ds.splits.push_back(split);
    append(ds.train, sample_patches(pair, 0, split.train, PatchRole::kTrain, config.train_patches,
                                    config.patch_size, seed_for(0, PatchRole::kTrain),
                                    config.augment));
    if (!split.val.empty())
      append(ds.val, sample_patches(pair, 0, split.val, PatchRole::kVal, 0, config.patch_size,
                                    seed_for(0, PatchRole::kVal), false));
    if (!split.test.empty())
      append(ds.test, sample_patches(pair, 0, split.test, PatchRole::kTest, 0, config.patch_size,
                                     seed_for(0, PatchRole::kTest), false));
  } else {
    if (!(config.val_frac >= 0 && config.test_frac >= 0 && config.val_frac + config.test_frac < 1))
      throw ConfigError("split fractions must be >= 0 and sum to less than 1");
    const std::size_t n = pairs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    CounterRng rng(derive_seed(config.seed, 0x5EED));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const auto n_test = static_cast<std::size_t>(std::llround(config.test_frac * n));
    const auto n_val = static_cast<std::size_t>(std::llround(config.val_frac * n));
    if (n_test + n_val >= n) throw DataError("too few raster pairs for the requested split");
    std::vector<PatchRole> roles(n, PatchRole::kTrain);
    for (std::size_t k = 0; k < n_test; ++k) roles[order[k]] = PatchRole::kTest;
    for (std::size_t k = n_test; k < n_test + n_val; ++k) roles[order[k]] = PatchRole::kVal;

    for (std::size_t s = 0; s < n; ++s) {
      const auto& pair = pairs[s];
      const Region whole{0, 0, pair.input.height, pair.input.width};
      Split split;
      PatchSet* dst = &ds.train;
      switch (roles[s]) {
        case PatchRole::kTrain: split.train = whole; break;
        case PatchRole::kVal: split.val = whole; dst = &ds.val; break;
        case PatchRole::kTest: split.test = whole; dst = &ds.test; break;
      }
      ds.splits.push_back(split);
      append(*dst, sample_patches(pair, s, whole, roles[s], config.train_patches, config.patch_size,
                                  seed_for(s, roles[s]), config.augment));
    }
  }
  if (ds.train.patches.empty()) throw DataError("dataset has no training patches");
  ds.stats = compute_norm_stats(ds.train);
  for (auto* s : {&ds.train, &ds.val, &ds.test}) normalize_patchset(*s, ds.stats);
  return ds;
}

namespace {

std::string region_text(const Region& r) {
  return std::to_string(r.row) + "," + std::to_string(r.col) + "," + std::to_string(r.rows) + "," +
         std::to_string(r.cols);
}

Region parse_region(const std::string& text) {
  const auto v = parse_size_list(text);
  if (v.size() != 4) throw FormatError("region needs four fields: '" + text + "'");
  return {v[0], v[1], v[2], v[3]};
}

void put_set(Container& c, const PatchSet& set) {
  const std::string role = to_string(set.role);
  const std::size_t n = set.patches.size(), p = set.patch_size;
  c.set(role + ".count", std::to_string(n));
  std::string centers;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) centers += ',';
    centers += format_double(set.patches[i].center);
  }
  c.set(role + ".centers", centers);
  if (n == 0) return;
  Tensor<float> input(Shape{n, 1, p, p}), target(Shape{n, 1, p, p}), valid(Shape{n, 1, p, p}),
      meta(Shape{n, 4});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& patch = set.patches[i];
    std::copy(patch.input.begin(), patch.input.end(), input.ptr() + i * p * p);
    std::copy(patch.target.begin(), patch.target.end(), target.ptr() + i * p * p);
    std::copy(patch.target_valid.begin(), patch.target_valid.end(), valid.ptr() + i * p * p);
    meta[i * 4 + 0] = static_cast<float>(patch.source);
    meta[i * 4 + 1] = static_cast<float>(patch.row);
    meta[i * 4 + 2] = static_cast<float>(patch.col);
    meta[i * 4 + 3] = static_cast<float>(static_cast<int>(patch.aug));
  }
  c.tensors.push_back({role + ".input", input});
  c.tensors.push_back({role + ".target", target});
  c.tensors.push_back({role + ".valid", valid});
  c.tensors.push_back({role + ".meta", meta});
}

PatchSet get_set(const Container& c, PatchRole role, std::size_t p) {
  PatchSet set;
  set.role = role;
  set.patch_size = p;
  set.normalized = true;
  const std::string name = to_string(role);
  const std::size_t n = parse_number<std::size_t>(c.get(name + ".count"));
  if (n == 0) return set;
  const auto centers = c.get(name + ".centers");
  std::vector<double> center_values;
  std::stringstream ss(centers);
  std::string item;
  while (std::getline(ss, item, ',')) center_values.push_back(parse_number<double>(item));
  const auto find = [&](const std::string& key) -> const Tensor<float>& {
    for (const auto& t : c.tensors)
      if (t.name == key) return t.tensor;
    throw FormatError("dataset is missing tensor '" + key + "'");
  };
  const auto& input = find(name + ".input");
  const auto& target = find(name + ".target");
  const auto& valid = find(name + ".valid");
  const auto& meta = find(name + ".meta");
  if (center_values.size() != n || input.shape() != Shape{n, 1, p, p} ||
      target.shape() != input.shape() || valid.shape() != input.shape() ||
      meta.shape() != Shape{n, 4})
    throw ShapeMismatchError("dataset tensors for '" + name + "' do not match count " +
                             std::to_string(n));
  for (std::size_t i = 0; i < n; ++i) {
    Patch patch;
    patch.input.assign(input.ptr() + i * p * p, input.ptr() + (i + 1) * p * p);
    patch.target.assign(target.ptr() + i * p * p, target.ptr() + (i + 1) * p * p);
    patch.target_valid.resize(p * p);
    for (std::size_t q = 0; q < p * p; ++q) patch.target_valid[q] = valid[i * p * p + q] != 0.0f;
    patch.source = static_cast<std::size_t>(meta[i * 4 + 0]);
    patch.row = static_cast<std::size_t>(meta[i * 4 + 1]);
    patch.col = static_cast<std::size_t>(meta[i * 4 + 2]);
    const int aug = static_cast<int>(meta[i * 4 + 3]);
    if (aug < 0 || aug >= 8) throw FormatError("dataset patch has invalid augmentation tag");
    patch.aug = static_cast<Dihedral>(aug);
    patch.center = center_values[i];
    set.patches.push_back(std::move(patch));
  }
  return set;
}

}  // namespace

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  Container c;
  c.magic = kDatasetMagic;
  c.set("kind", "dataset");
  c.set("patch_size", std::to_string(data.train.patch_size));
  c.set("norm.global_std", format_double(data.stats.global_std));
  c.set("sources", std::to_string(data.splits.size()));
  for (std::size_t s = 0; s < data.splits.size(); ++s) {
    const auto& sp = data.splits[s];
    c.set("split." + std::to_string(s) + ".train", region_text(sp.train));
    c.set("split." + std::to_string(s) + ".val", region_text(sp.val));
    c.set("split." + std::to_string(s) + ".test", region_text(sp.test));
  }
  for (const auto* set : {&data.train, &data.val, &data.test}) put_set(c, *set);
  write_container(c, path);
}

Dataset read_dataset(const std::filesystem::path& path) {
  const Container c = read_container(path, kDatasetMagic);
  Dataset ds;
  try {
    const auto p = parse_number<std::size_t>(c.get("patch_size"));
    ds.stats.global_std = parse_number<double>(c.get("norm.global_std"));
    const auto sources = parse_number<std::size_t>(c.get("sources"));
    for (std::size_t s = 0; s < sources; ++s) {
      Split sp;
      sp.train = parse_region(c.get("split." + std::to_string(s) + ".train"));
      sp.val = parse_region(c.get("split." + std::to_string(s) + ".val"));
      sp.test = parse_region(c.get("split." + std::to_string(s) + ".test"));
      ds.splits.push_back(sp);
    }
    ds.train = get_set(c, PatchRole::kTrain, p);
    ds.val = get_set(c, PatchRole::kVal, p);
    ds.test = get_set(c, PatchRole::kTest, p);
  } catch (const ConfigError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  return ds;
}

}  // namespace dsmr
