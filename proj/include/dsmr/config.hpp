#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dsmr/data.hpp"
#include "dsmr/engine.hpp"
#include "dsmr/loss.hpp"
#include "dsmr/model.hpp"
#include "dsmr/synth.hpp"

namespace dsmr {

/// Everything a pipeline run can be configured with.
///
/// Text form: one `key = value` per line, `#` starts a comment. Keys are
/// grouped by prefix (model., train., loss., extractor., scene., prepare.,
/// infer.) plus the top-level `seed` and `threads`. Unknown keys are errors.
/// Module seeds are derived from `seed`.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  ModelConfig model;
  TrainConfig train;
  ExtractorConfig extractor;
  std::string extractor_path;  ///< weights file; empty means a seeded random extractor
  SceneSpec scene;
  PrepareConfig prepare;
  std::size_t tile = 512;
  std::size_t overlap = 64;

  /// Applies one key/value pair. Throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Applies every line of a config text; `source` names it in error messages.
  void apply_text(const std::string& text, const std::string& source = "config");
  void apply_file(const std::filesystem::path& path);
  /// Applies a `key=value` override.
  void apply_override(const std::string& assignment);

  /// Copies `seed` into the module configs (model, train, scene, prepare, extractor).
  void resolve_seeds();
  void validate() const;

  /// Every key with its current value, in a fixed order; parseable by apply_text.
  std::string to_text() const;
  static std::vector<std::string> keys();
};

}  // namespace dsmr
