#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dsmr/raster.hpp"

namespace dsmr {

enum class RoofType : std::uint8_t { kFlat, kGabled, kGabledDormers };
const char* to_string(RoofType roof);

/// Parameters of one procedural urban scene and its degradation.
struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t width = 256;   ///< pixels
  std::size_t height = 256;  ///< pixels
  double gsd = 0.10;         ///< metres per pixel

  double terrain_base = 0.0;       ///< metres
  double terrain_amplitude = 2.0;  ///< peak-to-peak bound of the terrain (m)

  std::size_t building_count = 3;
  double building_min_size = 3.0;  ///< footprint side, metres
  double building_max_size = 8.0;
  double building_min_height = 3.0;  ///< eave height above ground, metres
  double building_max_height = 12.0;
  double ridge_min_rise = 1.0;  ///< gable rise above the eaves, metres
  double ridge_max_rise = 3.0;
  double rotated_fraction = 0.5;  ///< share of buildings not aligned to the grid
  bool roof_flat = true;
  bool roof_gabled = true;
  bool roof_dormers = true;
  std::size_t placement_retries = 200;

  double noise_sigma = 0.3;  ///< metres
  double hole_rate = 0.03;   ///< fraction of pixels turned to nodata
  double hole_cluster_size = 4.0;  ///< mean hole radius, pixels
  std::size_t vegetation_blob_count = 20;
  double vegetation_min_height = 0.5;
  double vegetation_max_height = 3.0;
  double vegetation_min_radius = 0.3;  ///< metres
  double vegetation_max_radius = 1.0;
  double vegetation_speckle = 0.25;  ///< speckle std as a fraction of blob height

  void validate() const;
};

/// A placed building. Centre in pixel units; half extents along its local axes.
struct Building {
  double cx, cy;
  double half_u, half_v;  ///< ridge runs along u for gabled roofs
  double angle;           ///< radians, counter-clockwise
  double base;            ///< ground height at the centre
  double eave;            ///< eave height above base
  double rise;            ///< ridge rise (0 for flat roofs)
  RoofType roof;
  struct Dormer {
    double u0, u1, v0, v1;  ///< local rectangle on the v > 0 slope
    double top;             ///< absolute height of the flat top
  };
  std::vector<Dormer> dormers;

  /// Local coordinates of pixel (row, col)'s centre.
  void local(double row, double col, double& u, double& v) const;
  bool covers(double row, double col) const;
  /// Roof surface height at a covered pixel.
  double roof_height(double row, double col) const;
};

struct Scene {
  Raster raster;                 ///< clean surface, float heights
  std::vector<double> surface;   ///< the same surface before rounding to float
  std::vector<Building> buildings;
  std::vector<int> building_id;  ///< per pixel: index into buildings, or -1
};

/// Smooth terrain plus non-overlapping buildings with piecewise-planar roofs.
/// Throws PlacementError if a building cannot be placed after
/// spec.placement_retries attempts.
Scene generate_scene(const SceneSpec& spec);
Raster generate_clean(const SceneSpec& spec);

/// Adds Gaussian noise, vegetation blobs, and clustered nodata holes. The
/// clean raster is not modified.
Raster degrade(const Raster& clean, const SceneSpec& spec);

struct SynthSample {
  std::uint64_t seed;
  std::string clean;
  std::string degraded;
};

/// Seed of sample k in a set generated from a master seed.
std::uint64_t sample_seed(std::uint64_t master_seed, std::size_t index);

/// Writes `count` (clean, degraded) pairs and manifest.tsv into `dir`.
/// Samples are generated on up to `threads` worker threads; output is identical
/// for any thread count.
std::vector<SynthSample> write_synth_set(const std::filesystem::path& dir, const SceneSpec& spec,
                                         std::size_t count, std::uint64_t seed,
                                         std::size_t threads = 1);

/// Parses a manifest.tsv; paths are resolved relative to its directory.
std::vector<SynthSample> read_manifest(const std::filesystem::path& path);

}  // namespace dsmr
