#include "dsmr/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "dsmr/format.hpp"

namespace dsmr {

const std::string& Container::get(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  throw FormatError("manifest is missing key '" + key + "'");
}

std::optional<std::string> Container::find(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  return std::nullopt;
}

void Container::set(const std::string& key, std::string value) {
  for (auto& [k, v] : meta)
    if (k == key) {
      v = std::move(value);
      return;
    }
  meta.emplace_back(key, std::move(value));
}

std::string join_list(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(item));
  return out;
}

void write_container(const Container& c, const std::filesystem::path& path) {
  if (c.magic.size() != 8) throw ContractError("container magic must be 8 bytes");
  std::string manifest;
  for (const auto& [k, v] : c.meta) manifest += k + "=" + v + "\n";
  manifest += "tensor.count=" + std::to_string(c.tensors.size()) + "\n";
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    const auto& t = c.tensors[i];
    manifest += "tensor." + std::to_string(i) + ".name=" + t.name + "\n";
    manifest += "tensor." + std::to_string(i) + ".shape=" + join_list(t.tensor.shape()) + "\n";
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(c.magic.data(), 8);
  write_le<std::uint16_t>(out, Container::kVersion);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(manifest.size()));
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  for (const auto& t : c.tensors)
    for (float v : t.tensor.data()) write_le<float>(out, v);
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path, const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ByteReader r(bytes, path.string());

  Container c;
  c.magic = r.take(8, "magic");
  if (c.magic != expected_magic)
    throw FormatError("'" + path.string() + "': bad magic, expected " + expected_magic);
  const auto version = r.le<std::uint16_t>("version");
  if (version != Container::kVersion)
    throw FormatError("'" + path.string() + "': unsupported format version " +
                      std::to_string(version));
  const auto manifest_len = r.le<std::uint32_t>("manifest length");
  if (manifest_len > r.remaining())
    throw FormatError("'" + path.string() + "': manifest extends past end of file");
  const std::string manifest = r.take(manifest_len, "manifest");

  std::istringstream lines(manifest);
  std::string line;
  std::vector<std::pair<std::string, std::string>> entries;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw FormatError("'" + path.string() + "': malformed manifest line '" + line + "'");
    entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  Container all;
  all.meta = entries;

  std::size_t count;
  try {
    count = parse_number<std::size_t>(all.get("tensor.count"));
  } catch (const ConfigError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  std::vector<std::pair<std::string, Shape>> decls;
  std::size_t total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string prefix = "tensor." + std::to_string(i);
    Shape shape;
    try {
      shape = parse_size_list(all.get(prefix + ".shape"));
    } catch (const ConfigError& e) {
      throw FormatError("'" + path.string() + "': " + e.what());
    }
    for (auto d : shape)
      if (d == 0) throw FormatError("'" + path.string() + "': zero extent in " + prefix);
    total += numel(shape);
    decls.emplace_back(all.get(prefix + ".name"), shape);
  }
  for (auto& [k, v] : entries)
    if (!k.starts_with("tensor.")) c.meta.emplace_back(k, v);

  if (r.remaining() != total * sizeof(float))
    throw PayloadError("'" + path.string() + "': manifest declares " + std::to_string(total) +
                       " floats (" + std::to_string(total * sizeof(float)) + " bytes), payload has " +
                       std::to_string(r.remaining()) + " bytes");
  for (auto& [name, shape] : decls) {
    std::vector<float> values(numel(shape));
    for (auto& v : values) v = r.le<float>("payload");
    c.tensors.push_back({name, Tensor<float>(shape, std::move(values))});
  }
  return c;
}

void save_model(const Model<float>& model, const std::filesystem::path& path,
                std::optional<NormStats> stats) {
  Container c;
  c.magic = kCheckpointMagic;
  const auto& cfg = model.config();
  c.set("kind", "model");
  c.set("model.depth", std::to_string(cfg.depth));
  c.set("model.channels", join_list(cfg.channels));
  c.set("model.in_channels", std::to_string(cfg.in_channels));
  c.set("model.prelu_init", format_double(cfg.prelu_init));
  c.set("model.seed", std::to_string(cfg.seed));
  if (stats) c.set("norm.global_std", format_double(stats->global_std));
  for (const auto& p : model.parameters()) c.tensors.push_back({p.name, p.tensor.clone()});
  write_container(c, path);
}

Checkpoint load_model(const std::filesystem::path& path) {
  Container c = read_container(path, kCheckpointMagic);
  ModelConfig cfg;
  try {
    cfg.depth = parse_number<std::size_t>(c.get("model.depth"));
    cfg.channels = parse_size_list(c.get("model.channels"));
    cfg.in_channels = parse_number<std::size_t>(c.get("model.in_channels"));
    cfg.prelu_init = parse_number<double>(c.get("model.prelu_init"));
    cfg.seed = parse_number<std::uint64_t>(c.get("model.seed"));
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ShapeMismatchError("'" + path.string() + "': invalid model config: " + e.what());
  }
  Checkpoint ck{Model<float>::from_parameters(cfg, std::move(c.tensors)), std::nullopt};
  if (auto s = c.find("norm.global_std")) {
    try {
      ck.stats = NormStats{parse_number<double>(*s)};
    } catch (const ConfigError& e) {
      throw FormatError("'" + path.string() + "': " + e.what());
    }
  }
  return ck;
}

}  // namespace dsmr
