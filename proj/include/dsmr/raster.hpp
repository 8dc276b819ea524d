#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

namespace dsmr {

/// Single-band height grid. Invalid (nodata) cells hold NaN in `heights` and 0
/// in `valid`.
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  double gsd = 0.10;  ///< metres per pixel
  std::vector<float> heights;
  std::vector<std::uint8_t> valid;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, double gsd_m = 0.10, float fill = 0.0f)
      : width(w), height(h), gsd(gsd_m), heights(w * h, fill), valid(w * h, 1) {}

  std::size_t size() const { return width * height; }
  float& at(std::size_t row, std::size_t col) { return heights[row * width + col]; }
  float at(std::size_t row, std::size_t col) const { return heights[row * width + col]; }
  bool is_valid(std::size_t row, std::size_t col) const { return valid[row * width + col] != 0; }
  void set_nodata(std::size_t i) {
    valid[i] = 0;
    heights[i] = std::numeric_limits<float>::quiet_NaN();
  }
  std::size_t count_valid() const;
  bool fully_valid() const { return count_valid() == size(); }

  /// Throws DimensionError/DataError if extents or the height/mask invariants are violated.
  void validate() const;
};

/// Field-by-field equality; NaN heights compare equal at invalid cells.
bool same_raster(const Raster& a, const Raster& b);

enum class RasterFormat { kBinary, kAsciiGrid };

inline constexpr double kAsciiNodata = -9999.0;

/// Reads either format; the binary magic "DSMRAS1" selects the binary reader,
/// anything else is parsed as an ESRI ASCII grid.
Raster read_raster(const std::filesystem::path& path);

/// Binary: "DSMRAS1", u32 width, u32 height, f64 gsd, width*height f32 heights
/// (little-endian, row-major from the top row, NaN = nodata).
/// ASCII: ncols/nrows/xllcorner/yllcorner/cellsize/NODATA_value header, then
/// rows top to bottom.
void write_raster(const Raster& raster, const std::filesystem::path& path,
                  RasterFormat format = RasterFormat::kBinary);

/// Format implied by the extension: ".asc" is ASCII grid, anything else binary.
RasterFormat format_for_path(const std::filesystem::path& path);

}  // namespace dsmr
