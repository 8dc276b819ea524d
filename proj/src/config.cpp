#include "dsmr/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include "dsmr/checkpoint.hpp"
#include "dsmr/errors.hpp"
#include "dsmr/format.hpp"
#include "dsmr/random.hpp"

namespace dsmr {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<double>(trim(item)));
  return out;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define DSMR_SIZE(KEY, MEMBER)                                                               \
  Field {                                                                                    \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<std::size_t>(v); }, \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }                          \
  }
#define DSMR_U64(KEY, MEMBER)                                                                  \
  Field {                                                                                      \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<std::uint64_t>(v); }, \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }                            \
  }
#define DSMR_DOUBLE(KEY, MEMBER)                                                        \
  Field {                                                                               \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<double>(v); }, \
        [](const RunConfig& c) { return format_double(c.MEMBER); }                      \
  }
#define DSMR_BOOL(KEY, MEMBER)                                                    \
  Field {                                                                         \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_bool(v); },     \
        [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); } \
  }
#define DSMR_SIZES(KEY, MEMBER)                                                        \
  Field {                                                                              \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_size_list(v); },     \
        [](const RunConfig& c) { return join_list(c.MEMBER); }                         \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      DSMR_U64("seed", seed),
      DSMR_SIZE("threads", threads),

      DSMR_SIZE("model.depth", model.depth),
      DSMR_SIZES("model.channels", model.channels),
      DSMR_DOUBLE("model.prelu_init", model.prelu_init),

      DSMR_SIZE("train.batch_size", train.batch_size),
      DSMR_SIZE("train.steps", train.steps),
      Field{"train.optimizer", [](RunConfig& c, const std::string& v) { c.train.optimizer = v; },
            [](const RunConfig& c) { return c.train.optimizer; }},
      DSMR_DOUBLE("train.learning_rate", train.adam.lr),
      DSMR_DOUBLE("train.beta1", train.adam.beta1),
      DSMR_DOUBLE("train.beta2", train.adam.beta2),
      DSMR_DOUBLE("train.eps", train.adam.eps),
      DSMR_SIZE("train.val_every", train.val_every),
      DSMR_SIZE("train.checkpoint_every", train.checkpoint_every),
      DSMR_SIZE("train.log_every", train.log_every),
      DSMR_BOOL("train.deterministic", train.deterministic),

      DSMR_DOUBLE("loss.img", train.loss.img),
      DSMR_DOUBLE("loss.weights", train.loss.weights),
      DSMR_DOUBLE("loss.activity", train.loss.activity),
      DSMR_DOUBLE("loss.feat", train.loss.feat),
      Field{"loss.feat_taps",
            [](RunConfig& c, const std::string& v) { c.train.loss.feat_taps = parse_double_list(v); },
            [](const RunConfig& c) { return join_doubles(c.train.loss.feat_taps); }},

      Field{"extractor.path", [](RunConfig& c, const std::string& v) { c.extractor_path = v; },
            [](const RunConfig& c) { return c.extractor_path; }},
      DSMR_SIZES("extractor.convs_per_block", extractor.convs_per_block),
      DSMR_SIZES("extractor.widths", extractor.widths),
      Field{"extractor.taps",
            [](RunConfig& c, const std::string& v) {
              c.extractor.taps = trim(v).empty() ? std::vector<std::size_t>{} : parse_size_list(v);
            },
            [](const RunConfig& c) { return join_list(c.extractor.taps); }},

      DSMR_SIZE("scene.width", scene.width),
      DSMR_SIZE("scene.height", scene.height),
      DSMR_DOUBLE("scene.gsd", scene.gsd),
      DSMR_DOUBLE("scene.terrain_base", scene.terrain_base),
      DSMR_DOUBLE("scene.terrain_amplitude", scene.terrain_amplitude),
      DSMR_SIZE("scene.building_count", scene.building_count),
      DSMR_DOUBLE("scene.building_min_size", scene.building_min_size),
      DSMR_DOUBLE("scene.building_max_size", scene.building_max_size),
      DSMR_DOUBLE("scene.building_min_height", scene.building_min_height),
      DSMR_DOUBLE("scene.building_max_height", scene.building_max_height),
      DSMR_DOUBLE("scene.ridge_min_rise", scene.ridge_min_rise),
      DSMR_DOUBLE("scene.ridge_max_rise", scene.ridge_max_rise),
      DSMR_DOUBLE("scene.rotated_fraction", scene.rotated_fraction),
      DSMR_BOOL("scene.roof_flat", scene.roof_flat),
      DSMR_BOOL("scene.roof_gabled", scene.roof_gabled),
      DSMR_BOOL("scene.roof_dormers", scene.roof_dormers),
      DSMR_SIZE("scene.placement_retries", scene.placement_retries),
      DSMR_DOUBLE("scene.noise_sigma", scene.noise_sigma),
      DSMR_DOUBLE("scene.hole_rate", scene.hole_rate),
      DSMR_DOUBLE("scene.hole_cluster_size", scene.hole_cluster_size),
      DSMR_SIZE("scene.vegetation_blob_count", scene.vegetation_blob_count),
      DSMR_DOUBLE("scene.vegetation_min_height", scene.vegetation_min_height),
      DSMR_DOUBLE("scene.vegetation_max_height", scene.vegetation_max_height),
      DSMR_DOUBLE("scene.vegetation_min_radius", scene.vegetation_min_radius),
      DSMR_DOUBLE("scene.vegetation_max_radius", scene.vegetation_max_radius),
      DSMR_DOUBLE("scene.vegetation_speckle", scene.vegetation_speckle),

      DSMR_SIZE("prepare.patch_size", prepare.patch_size),
      DSMR_DOUBLE("prepare.val_frac", prepare.val_frac),
      DSMR_DOUBLE("prepare.test_frac", prepare.test_frac),
      DSMR_SIZE("prepare.train_patches", prepare.train_patches),
      DSMR_BOOL("prepare.augment", prepare.augment),
      DSMR_DOUBLE("prepare.fill_tolerance", prepare.fill.tolerance),
      DSMR_SIZE("prepare.fill_max_sweeps", prepare.fill.max_sweeps),

      DSMR_SIZE("infer.tile", tile),
      DSMR_SIZE("infer.overlap", overlap),
  };
  return table;
}

#undef DSMR_SIZE
#undef DSMR_U64
#undef DSMR_DOUBLE
#undef DSMR_BOOL
#undef DSMR_SIZES

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key != f.key) continue;
    try {
      f.set(*this, trim(value));
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    } catch (const DataError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::apply_text(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str(), path.string());
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::resolve_seeds() {
  model.seed = derive_seed(seed, 1);
  train.seed = derive_seed(seed, 2);
  prepare.seed = derive_seed(seed, 3);
  extractor.seed = derive_seed(seed, 4);
  scene.seed = seed;
}

void RunConfig::validate() const {
  if (threads == 0) throw ConfigError("threads must be at least 1");
  model.validate();
  train.validate();
  extractor.validate();
  scene.validate();
  if (tile == 0 || tile % model.size_multiple())
    throw ConfigError("infer.tile must be a positive multiple of " +
                      std::to_string(model.size_multiple()));
  if (2 * overlap >= tile) throw ConfigError("infer.overlap must be less than half of infer.tile");
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

}  // namespace dsmr
