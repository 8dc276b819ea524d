#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dsmr/norm_stats.hpp"
#include "dsmr/raster.hpp"

namespace dsmr {

// ---------------------------------------------------------------------------
// Hole interpolation

struct FillOptions {
  double tolerance = 1e-4;        ///< metres; stop when no cell moves more than this
  std::size_t max_sweeps = 10000;
};

/// Laplace interpolation of nodata cells by Gauss-Seidel sweeps over the
/// 4-neighbourhood (edge cells average their in-bounds neighbours). Cells are
/// seeded by peeling inward from the valid boundary. Valid cells are copied
/// through untouched. Throws DataError when no cell is valid.
Raster fill_holes(const Raster& raster, const FillOptions& options = {});

// ---------------------------------------------------------------------------
// Regions

struct Region {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  bool empty() const { return rows == 0 || cols == 0; }
  std::size_t area() const { return rows * cols; }
  bool contains(std::size_t r, std::size_t c) const {
    return r >= row && r < row + rows && c >= col && c < col + cols;
  }
  /// True when the patch with top-left (r, c) lies entirely inside.
  bool contains_patch(std::size_t r, std::size_t c, std::size_t size) const {
    return r >= row && c >= col && r + size <= row + rows && c + size <= col + cols;
  }
  bool intersects(const Region& o) const;
  bool operator==(const Region&) const = default;
};

struct Split {
  Region train, val, test;
};

/// Carves validation and test rectangles side by side out of a band along the
/// bottom edge; the training region is everything above the band. The band
/// height is the smallest multiple of the patch size that fits both. With both
/// fractions zero the whole raster is training area.
Split split_regions(std::size_t width, std::size_t height, std::size_t patch_size,
                    double val_frac = 0.09, double test_frac = 0.09);

// ---------------------------------------------------------------------------
// Augmentation: the eight right-angle symmetries of a square

enum class Dihedral : std::uint8_t {
  kIdentity = 0,
  kRot90,   ///< counter-clockwise
  kRot180,
  kRot270,
  kFlipH,   ///< mirror left-right
  kFlipV,   ///< mirror top-bottom
  kTranspose,
  kAntiTranspose,
};

inline constexpr std::array<Dihedral, 8> kAllDihedral{
    Dihedral::kIdentity, Dihedral::kRot90, Dihedral::kRot180,    Dihedral::kRot270,
    Dihedral::kFlipH,    Dihedral::kFlipV, Dihedral::kTranspose, Dihedral::kAntiTranspose};

const char* to_string(Dihedral op);

/// Applies op to a square row-major n x n image. Throws DimensionError when
/// values.size() != n * n.
template <typename T>
std::vector<T> augment(std::span<const T> values, std::size_t n, Dihedral op);

/// Same transform on an (input, target) pair.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> augment_pair(std::span<const T> input,
                                                       std::span<const T> target, std::size_t n,
                                                       Dihedral op);

/// The single op equivalent to applying `first` and then `second`.
Dihedral compose(Dihedral first, Dihedral second);

// ---------------------------------------------------------------------------
// Normalization

/// Centres on the patch mean and divides by stats.global_std. Returns the
/// normalized values and the centre.
std::pair<std::vector<double>, double> normalize(std::span<const double> patch,
                                                 const NormStats& stats);
std::vector<double> denormalize(std::span<const double> patch, double center,
                                const NormStats& stats);

// ---------------------------------------------------------------------------
// Patches

enum class PatchRole : std::uint8_t { kTrain, kVal, kTest };
const char* to_string(PatchRole role);
PatchRole parse_role(const std::string& text);

struct Patch {
  std::vector<float> input;
  std::vector<float> target;
  std::vector<std::uint8_t> target_valid;  ///< ground truth existed before hole filling
  std::size_t source = 0;                  ///< index of the raster pair it was cut from
  std::size_t row = 0;
  std::size_t col = 0;
  Dihedral aug = Dihedral::kIdentity;
  double center = 0.0;  ///< subtracted from both input and target (metres)
};

struct PatchSet {
  PatchRole role = PatchRole::kTrain;
  std::size_t patch_size = 256;
  bool normalized = false;
  std::vector<Patch> patches;
};

struct Origin {
  std::size_t row;
  std::size_t col;
  bool operator==(const Origin&) const = default;
};

/// Training: `count` top-left corners drawn uniformly over all positions where
/// a patch fits (overlap allowed). Validation/test: non-overlapping grid from
/// the region's top-left corner; count is ignored. Corner i of a training draw
/// depends only on (seed, i).
std::vector<Origin> sample_origins(const Region& region, PatchRole role, std::size_t count,
                                   std::size_t patch_size, std::uint64_t seed);

struct RasterPair {
  Raster input;   ///< degraded, hole-filled
  Raster target;  ///< ground truth, hole-filled
  std::vector<std::uint8_t> target_valid;  ///< ground-truth mask before filling
};

/// Cuts patches at sample_origins(...). Training patches get a random
/// symmetry each (when augment is set); patch i's choice depends only on
/// (seed, i). Values are left in metres (center 0).
PatchSet sample_patches(const RasterPair& pair, std::size_t source, const Region& region,
                        PatchRole role, std::size_t count, std::size_t patch_size,
                        std::uint64_t seed, bool augment = true);

/// Pooled standard deviation of per-patch-centred input heights.
NormStats compute_norm_stats(const PatchSet& train);

/// Centres every patch on its input mean and scales by stats.global_std.
void normalize_patchset(PatchSet& set, const NormStats& stats);

// ---------------------------------------------------------------------------
// Dataset preparation

struct PrepareConfig {
  std::size_t patch_size = 256;
  double val_frac = 0.09;
  double test_frac = 0.09;
  std::size_t train_patches = 64;  ///< per training region
  bool augment = true;
  std::uint64_t seed = 0;
  FillOptions fill;
};

struct Dataset {
  NormStats stats;
  PatchSet train, val, test;
  /// Per source raster: the regions patches were drawn from.
  std::vector<Split> splits;
};

/// Hole-fills both rasters, keeping the target's original validity mask.
RasterPair make_pair(const Raster& degraded, const Raster& clean, const FillOptions& fill = {});

/// With a single pair, splits it into train/val/test regions. With several
/// pairs, whole pairs are assigned to roles (a seeded shuffle, then
/// round(frac * count) pairs each for test and validation) and each pair is
/// one region. Then samples, augments, and normalizes.
Dataset prepare_dataset(std::span<const RasterPair> pairs, const PrepareConfig& config);

void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

inline constexpr const char* kDatasetMagic = "DSMRDSET";

}  // namespace dsmr
