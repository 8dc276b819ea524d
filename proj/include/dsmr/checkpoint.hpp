#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dsmr/model.hpp"
#include "dsmr/norm_stats.hpp"

namespace dsmr {

/// Binary parameter container shared by model checkpoints and feature-extractor
/// weight files.
///
///   magic        8 bytes ("DSMRCKPT" or "DSMRFEAT")
///   version      u16 little-endian
///   manifest_len u32 little-endian
///   manifest     manifest_len bytes of "key=value\n" lines; tensors are listed
///                as tensor.count, tensor.<i>.name, tensor.<i>.shape (comma list)
///   payload      float32 little-endian values of every tensor, manifest order
struct Container {
  static constexpr std::uint16_t kVersion = 1;

  std::string magic;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<NamedTensor<float>> tensors;

  /// Value of a metadata key; throws FormatError if absent.
  const std::string& get(const std::string& key) const;
  std::optional<std::string> find(const std::string& key) const;
  void set(const std::string& key, std::string value);
};

inline constexpr const char* kCheckpointMagic = "DSMRCKPT";
inline constexpr const char* kExtractorMagic = "DSMRFEAT";

void write_container(const Container& c, const std::filesystem::path& path);
/// Reads a container and checks its magic against the expected one.
Container read_container(const std::filesystem::path& path, const std::string& expected_magic);

struct Checkpoint {
  Model<float> model;
  std::optional<NormStats> stats;
};

void save_model(const Model<float>& model, const std::filesystem::path& path,
                std::optional<NormStats> stats = std::nullopt);
Checkpoint load_model(const std::filesystem::path& path);

// Helpers for the comma-separated list values used in manifests and configs.
std::string join_list(const std::vector<std::size_t>& values);
std::vector<std::size_t> parse_size_list(const std::string& text);

}  // namespace dsmr
