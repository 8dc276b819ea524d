#include "dsmr/raster.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>
#include <string>

#include "dsmr/errors.hpp"
#include "dsmr/format.hpp"

namespace dsmr {
namespace {

constexpr char kBinaryMagic[] = "DSMRAS1";
constexpr std::size_t kMagicLen = 7;
// Anything larger is treated as a corrupt header rather than an allocation request.
constexpr std::uint64_t kMaxCells = std::uint64_t{1} << 32;

std::string lower(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

Raster read_binary(const std::string& bytes, const std::string& source) {
  ByteReader r(bytes, source);
  r.take(kMagicLen, "magic");
  const auto w = r.le<std::uint32_t>("width");
  const auto h = r.le<std::uint32_t>("height");
  const auto gsd = r.le<double>("gsd");
  if (w == 0 || h == 0)
    throw DimensionError("'" + source + "': degenerate raster " + std::to_string(w) + "x" +
                         std::to_string(h));
  if (static_cast<std::uint64_t>(w) * h > kMaxCells)
    throw DimensionError("'" + source + "': raster dimensions overflow");
  if (!(gsd > 0.0) || !std::isfinite(gsd)) throw FormatError("'" + source + "': invalid gsd");
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (r.remaining() < n * sizeof(float))
    throw PayloadError("'" + source + "': payload truncated, expected " +
                       std::to_string(n * sizeof(float)) + " bytes, found " +
                       std::to_string(r.remaining()));
  if (r.remaining() > n * sizeof(float))
    throw PayloadError("'" + source + "': trailing bytes after payload");
  Raster out(w, h, gsd);
  for (std::size_t i = 0; i < n; ++i) {
    const float v = r.le<float>("heights");
    out.heights[i] = v;
    if (std::isnan(v)) out.set_nodata(i);
  }
  return out;
}

Raster read_ascii(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::uint64_t ncols = 0, nrows = 0;
  double cellsize = 0.10, nodata = kAsciiNodata;
  bool have_cols = false, have_rows = false;
  // Header keys in any order and case; the first numeric token ends the header.
  std::string key;
  std::streampos data_start = in.tellg();
  while (in >> key) {
    const std::string k = lower(key);
    if (k.empty() || std::isdigit(static_cast<unsigned char>(k[0])) || k[0] == '-' ||
        k[0] == '+' || k[0] == '.') {
      break;
    }
    std::string value;
    if (!(in >> value)) throw FormatError("'" + source + "': header key '" + key + "' has no value");
    try {
      if (k == "ncols") {
        ncols = parse_number<std::uint64_t>(value);
        have_cols = true;
      } else if (k == "nrows") {
        nrows = parse_number<std::uint64_t>(value);
        have_rows = true;
      } else if (k == "cellsize") {
        cellsize = parse_number<double>(value);
      } else if (k == "nodata_value") {
        nodata = parse_number<double>(value);
      } else if (k == "xllcorner" || k == "yllcorner" || k == "xllcenter" || k == "yllcenter") {
        parse_number<double>(value);
      } else {
        throw FormatError("'" + source + "': unknown header key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      throw FormatError("'" + source + "': " + e.what());
    }
    data_start = in.tellg();
  }
  if (!have_cols || !have_rows) throw FormatError("'" + source + "': not a raster file");
  if (ncols == 0 || nrows == 0)
    throw DimensionError("'" + source + "': degenerate raster " + std::to_string(ncols) + "x" +
                         std::to_string(nrows));
  if (ncols * nrows > kMaxCells) throw DimensionError("'" + source + "': raster dimensions overflow");
  if (!(cellsize > 0.0)) throw FormatError("'" + source + "': invalid cellsize");

  in.clear();
  in.seekg(data_start);
  Raster out(ncols, nrows, cellsize);
  std::string token;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(in >> token))
      throw PayloadError("'" + source + "': expected " + std::to_string(out.size()) +
                         " values, found " + std::to_string(i));
    double v;
    try {
      v = parse_number<double>(token);
    } catch (const ConfigError& e) {
      throw FormatError("'" + source + "': " + e.what());
    }
    if (v == nodata || std::isnan(v))
      out.set_nodata(i);
    else
      out.heights[i] = static_cast<float>(v);
  }
  if (in >> token) throw PayloadError("'" + source + "': trailing values after grid");
  return out;
}

}  // namespace

std::size_t Raster::count_valid() const {
  std::size_t n = 0;
  for (auto v : valid) n += v != 0;
  return n;
}

void Raster::validate() const {
  if (width == 0 || height == 0)
    throw DimensionError("degenerate raster " + std::to_string(width) + "x" + std::to_string(height));
  if (heights.size() != width * height || valid.size() != width * height)
    throw DataError("raster buffers do not match " + std::to_string(width) + "x" +
                    std::to_string(height));
  for (std::size_t i = 0; i < size(); ++i)
    if (valid[i] && !std::isfinite(heights[i]))
      throw DataError("non-finite height at valid cell " + std::to_string(i));
}

bool same_raster(const Raster& a, const Raster& b) {
  if (a.width != b.width || a.height != b.height || a.gsd != b.gsd || a.valid != b.valid)
    return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.valid[i] && std::memcmp(&a.heights[i], &b.heights[i], sizeof(float)) != 0) return false;
  return true;
}

RasterFormat format_for_path(const std::filesystem::path& path) {
  return lower(path.extension().string()) == ".asc" ? RasterFormat::kAsciiGrid
                                                      : RasterFormat::kBinary;
}

Raster read_raster(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open raster '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= kMagicLen && bytes.compare(0, kMagicLen, kBinaryMagic) == 0)
    return read_binary(bytes, path.string());
  if (bytes.size() >= 3 && bytes.compare(0, 3, "DSM") == 0)
    throw FormatError("'" + path.string() + "': unknown raster magic");
  return read_ascii(bytes, path.string());
}

void write_raster(const Raster& raster, const std::filesystem::path& path, RasterFormat format) {
  raster.validate();
  if (format == RasterFormat::kBinary) {
    if (raster.width > UINT32_MAX || raster.height > UINT32_MAX)
      throw DimensionError("raster too large for the binary format");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    out.write(kBinaryMagic, kMagicLen);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(raster.width));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(raster.height));
    write_le<double>(out, raster.gsd);
    for (std::size_t i = 0; i < raster.size(); ++i)
      write_le<float>(out, raster.valid[i] ? raster.heights[i]
                                           : std::numeric_limits<float>::quiet_NaN());
    if (!out) throw DataError("failed writing '" + path.string() + "'");
    return;
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << "ncols " << raster.width << "\n"
      << "nrows " << raster.height << "\n"
      << "xllcorner 0\n"
      << "yllcorner 0\n"
      << "cellsize " << format_double(raster.gsd) << "\n"
      << "NODATA_value " << format_double(kAsciiNodata) << "\n";
  std::string line;
  for (std::size_t r = 0; r < raster.height; ++r) {
    line.clear();
    for (std::size_t c = 0; c < raster.width; ++c) {
      if (c) line += ' ';
      const std::size_t i = r * raster.width + c;
      line += raster.valid[i] ? format_double(static_cast<double>(raster.heights[i]))
                              : format_double(kAsciiNodata);
    }
    out << line << '\n';
  }
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

}  // namespace dsmr
