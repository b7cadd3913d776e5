#include "icod/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "icod/config.hpp"
#include "icod/errors.hpp"

namespace icod {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kDtype = "f64";

ParamGroup group_from_string(const std::string& name) {
  for (auto g : {ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Decomposer})
    if (to_string(g) == name) return g;
  throw ParseError("unknown parameter group '" + name + "'");
}

void put_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[k])) << (8 * k);
  return std::bit_cast<double>(bits);
}

fs::path blob_path(const std::string& manifest_path) { return fs::path(manifest_path + ".bin"); }

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_arrays(const ParamSet& arrays, json manifest, const std::string& path) {
  std::string blob;
  json entries = json::array();
  for (const auto& p : arrays) {
    const std::size_t offset = blob.size();
    for (double v : p.value.values()) put_le(blob, v);
    entries.push_back({{"name", p.name},
                       {"group", to_string(p.group)},
                       {"shape", p.value.shape()},
                       {"dtype", kDtype},
                       {"offset", offset},
                       {"nbytes", blob.size() - offset}});
  }
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["entries"] = entries;
  manifest["blob"] = blob_path(path).filename().string();
  manifest["blob_bytes"] = blob.size();
  manifest["blob_sha256"] = sha256_hex(blob.data(), blob.size());
  write_file(blob_path(path), blob);
  write_file(path, manifest.dump(2) + "\n");
}

struct Loaded {
  json manifest;
  ParamSet arrays;
};

Loaded read_arrays(const std::string& path) {
  Loaded out;
  try {
    out.manifest = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError("checkpoint manifest '" + path + "' is not valid JSON: " + e.what());
  }
  const json& m = out.manifest;
  try {
    const int version = m.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw VersionError("checkpoint '" + path + "' has format version " + std::to_string(version) +
                         "; this build reads version " + std::to_string(kCheckpointFormatVersion));

    const std::string blob = read_file(fs::path(path).parent_path() / m.at("blob").get<std::string>());
    const auto expected = m.at("blob_bytes").get<std::size_t>();
    if (blob.size() < expected)
      throw IntegrityError("checkpoint blob truncated: " + std::to_string(blob.size()) + " of " +
                           std::to_string(expected) + " bytes");
    if (blob.size() > expected)
      throw IntegrityError("checkpoint blob has " + std::to_string(blob.size() - expected) + " trailing bytes");
    if (sha256_hex(blob.data(), blob.size()) != m.at("blob_sha256").get<std::string>())
      throw IntegrityError("checkpoint blob hash does not match its manifest");

    std::size_t cursor = 0;
    for (const auto& e : m.at("entries")) {
      const auto name = e.at("name").get<std::string>();
      if (e.at("dtype").get<std::string>() != kDtype)
        throw ParseError("entry " + name + ": unsupported dtype " + e.at("dtype").get<std::string>());
      const auto shape = e.at("shape").get<std::vector<int>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      const std::size_t n = Tensor::count(shape);
      if (offset != cursor || nbytes != 8 * n || offset + nbytes > blob.size())
        throw IntegrityError("entry " + name + ": offset/length inconsistent with the blob layout");
      std::vector<double> values(n);
      for (std::size_t i = 0; i < n; ++i) values[i] = get_le(blob.data() + offset + 8 * i);
      out.arrays.add(name, group_from_string(e.at("group").get<std::string>()), Tensor(shape, std::move(values)));
      cursor = offset + nbytes;
    }
    if (cursor != blob.size()) throw IntegrityError("checkpoint entries do not cover the blob");
  } catch (const json::exception& e) {
    throw ParseError("checkpoint manifest '" + path + "': " + e.what());
  }
  return out;
}

}  // namespace

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::string& path) {
  model.check_layout();
  json manifest = {{"kind", "model"},
                   {"model", to_json(model.config)},
                   {"step", meta.step},
                   {"epoch", meta.epoch},
                   {"config_hash", meta.config_hash},
                   {"mode", meta.mode}};
  write_arrays(model.params, std::move(manifest), path);
}

Checkpoint load_checkpoint(const std::string& path) {
  Loaded l = read_arrays(path);
  Checkpoint c;
  try {
    if (l.manifest.at("kind").get<std::string>() != "model")
      throw ParseError("'" + path + "' is not a model checkpoint");
    c.model.config = model_config_from_json(l.manifest.at("model"));
    c.meta.step = l.manifest.at("step").get<std::int64_t>();
    c.meta.epoch = l.manifest.at("epoch").get<int>();
    c.meta.config_hash = l.manifest.at("config_hash").get<std::string>();
    c.meta.mode = l.manifest.at("mode").get<std::string>();
  } catch (const json::exception& e) {
    throw ParseError("checkpoint manifest '" + path + "': " + e.what());
  } catch (const ConfigError& e) {
    throw ParseError("checkpoint manifest '" + path + "': " + e.what());
  }
  c.model.params = std::move(l.arrays);
  try {
    c.model.check_layout();
  } catch (const ArgumentError& e) {
    throw ParseError("checkpoint '" + path + "': " + e.what());
  }
  return c;
}

void save_ewc_state(const EWCState& state, const std::string& path) {
  state.validate();
  ParamSet arrays;
  for (const auto& p : state.theta_star) arrays.add("theta_star/" + p.name, p.group, p.value);
  for (const auto& p : state.fisher) arrays.add("fisher/" + p.name, p.group, p.value);
  json manifest = {{"kind", "ewc_state"}, {"lambda", state.lambda}, {"scope", to_string(state.scope)}};
  write_arrays(arrays, std::move(manifest), path);
}

EWCState load_ewc_state(const std::string& path) {
  Loaded l = read_arrays(path);
  EWCState s;
  try {
    if (l.manifest.at("kind").get<std::string>() != "ewc_state")
      throw ParseError("'" + path + "' is not an EWC state");
    s.lambda = l.manifest.at("lambda").get<double>();
    s.scope = ewc_scope_from_string(l.manifest.at("scope").get<std::string>());
  } catch (const json::exception& e) {
    throw ParseError("EWC manifest '" + path + "': " + e.what());
  }
  for (const auto& p : l.arrays) {
    const auto slash = p.name.find('/');
    const std::string prefix = p.name.substr(0, slash);
    const std::string name = slash == std::string::npos ? "" : p.name.substr(slash + 1);
    if (prefix == "theta_star")
      s.theta_star.add(name, p.group, p.value);
    else if (prefix == "fisher")
      s.fisher.add(name, p.group, p.value);
    else
      throw ParseError("EWC state entry '" + p.name + "' has no theta_star/ or fisher/ prefix");
  }
  try {
    s.validate();
  } catch (const ArgumentError& e) {
    throw ParseError("EWC state '" + path + "': " + e.what());
  }
  return s;
}

}  // namespace icod
