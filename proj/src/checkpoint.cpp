// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "mtlora/errors.hpp"

namespace mtlora {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'T', 'L', 'R'};

struct Record {
  const Parameter<float>* param;
  Tensor<float> value;
  bool merged;
};

void write_file(const std::string& path, const CheckpointManifest& m, const std::vector<Record>& records) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"name", e.name},
                       {"shape", e.shape},
                       {"dtype", e.dtype},
                       {"offset", e.offset},
                       {"merged", e.merged}});
  }
  const nlohmann::json manifest{{"config", m.config},   {"seed", m.seed},       {"steps", m.steps},
                                {"merged", m.merged},   {"entries", entries}};
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const std::uint32_t version = m.version;
  const std::uint64_t length = text.size();
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& r : records) {
    const auto d = r.value.data();
    out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
  }
  out.flush();
  if (!out) throw IoError("failed writing '" + path + "'");
}

CheckpointManifest make_manifest(MultiTaskModel<float>& model, RunConfig run, std::int64_t steps, bool merged,
                                 const std::vector<Record>& records) {
  run.model = model.config();
  CheckpointManifest m;
  m.config = to_json(run);
  m.seed = model.seed();
  m.steps = steps;
  m.merged = merged;
  std::uint64_t offset = 0;
  for (const auto& r : records) {
    m.entries.push_back({r.param->name, r.value.shape(), "f32", offset, r.merged});
    offset += static_cast<std::uint64_t>(r.value.numel()) * sizeof(float);
  }
  return m;
}

template <typename V>
V field(const nlohmann::json& j, const char* key, const std::string& path) {
  if (!j.contains(key)) throw FormatError("checkpoint '" + path + "': manifest lacks '" + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + path + "': bad manifest field '" + key + "': " + e.what());
  }
}

struct RawFile {
  CheckpointManifest manifest;
  std::vector<char> data;
};

RawFile read_file(const std::string& path, bool with_data) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in) throw FormatError("checkpoint '" + path + "' is truncated");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("'" + path + "' is not an MTLR checkpoint");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint '" + path + "' has unsupported version " + std::to_string(version));
  }
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::uint64_t>(in.tellg());
  const std::uint64_t header = 4 + sizeof version + sizeof length;
  if (length > size - header) throw FormatError("checkpoint '" + path + "' is truncated");
  in.seekg(static_cast<std::streamoff>(header));
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + path + "': manifest is not valid JSON: " + e.what());
  }
  RawFile f;
  auto& m = f.manifest;
  m.version = version;
  m.config = field<nlohmann::json>(j, "config", path);
  m.seed = field<std::uint64_t>(j, "seed", path);
  m.steps = field<std::int64_t>(j, "steps", path);
  m.merged = field<bool>(j, "merged", path);
  const auto entries = field<nlohmann::json>(j, "entries", path);
  if (!entries.is_array()) throw FormatError("checkpoint '" + path + "': entries must be an array");
  const std::uint64_t data_size = size - header - length;
  std::uint64_t expected = 0;
  for (const auto& e : entries) {
    CheckpointEntry ce;
    ce.name = field<std::string>(e, "name", path);
    ce.shape = field<Shape>(e, "shape", path);
    ce.dtype = field<std::string>(e, "dtype", path);
    ce.offset = field<std::uint64_t>(e, "offset", path);
    ce.merged = field<bool>(e, "merged", path);
    if (ce.dtype != "f32") throw FormatError("entry '" + ce.name + "' has unsupported dtype " + ce.dtype);
    for (auto d : ce.shape) {
      if (d < 0) throw FormatError("entry '" + ce.name + "' has a negative dimension");
    }
    if (ce.offset != expected) {
      throw FormatError("entry '" + ce.name + "' is not contiguous with the previous one");
    }
    expected += static_cast<std::uint64_t>(shape_numel(ce.shape)) * sizeof(float);
    m.entries.push_back(std::move(ce));
  }
  if (expected != data_size) {
    throw FormatError("checkpoint '" + path + "' holds " + std::to_string(data_size) + " data bytes, manifest needs " +
                      std::to_string(expected));
  }
  if (with_data) {
    f.data.resize(data_size);
    in.read(f.data.data(), static_cast<std::streamsize>(data_size));
    if (!in) throw IoError("failed reading '" + path + "'");
  }
  return f;
}

}  // namespace

void save_checkpoint(MultiTaskModel<float>& model, const std::string& path, RunConfig run, std::int64_t steps) {
  std::vector<Record> records;
  for (auto& ref : model.params()) records.push_back({ref.param, ref.param->value, false});
  const bool merged = model.shared_merged();
  if (merged) {
    for (auto* lin : model.backbone().adapted_linears()) {
      if (!lin->has_shared()) {
        for (auto& r : records) {
          if (r.param == &lin->base().weight) r.merged = true;
        }
      }
    }
  }
  write_file(path, make_manifest(model, std::move(run), steps, merged, records), records);
}

void export_merged(MultiTaskModel<float>& model, const std::string& path, RunConfig run, std::int64_t steps) {
  std::map<const Parameter<float>*, Tensor<float>> folded;
  std::set<const Parameter<float>*> dropped;
  for (auto* lin : model.backbone().adapted_linears()) {
    if (!lin->has_shared() || !lin->task_adapters().empty()) continue;
    folded[&lin->base().weight] = lin->merged().weight.value;
    dropped.insert(&lin->shared().a);
    dropped.insert(&lin->shared().b);
  }
  std::vector<Record> records;
  for (auto& ref : model.params()) {
    if (dropped.count(ref.param)) continue;
    auto it = folded.find(ref.param);
    if (it != folded.end()) {
      records.push_back({ref.param, it->second, true});
    } else {
      records.push_back({ref.param, ref.param->value, false});
    }
  }
  if (model.shared_merged()) {
    // Already folded in place earlier; mark those weights as well.
    for (auto* lin : model.backbone().adapted_linears()) {
      if (lin->has_shared()) continue;
      for (auto& r : records) {
        if (r.param == &lin->base().weight) r.merged = true;
      }
    }
  }
  write_file(path, make_manifest(model, std::move(run), steps, true, records), records);
}

CheckpointManifest read_manifest(const std::string& path) { return read_file(path, false).manifest; }

LoadedCheckpoint load_checkpoint(const std::string& path) {
  RawFile f = read_file(path, true);
  LoadedCheckpoint out;
  try {
    out.run = run_config_from_json(f.manifest.config);
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint '" + path + "': config echo rejected: " + e.what());
  }
  out.model = std::make_unique<MultiTaskModel<float>>(out.run.model, f.manifest.seed);
  if (f.manifest.merged) out.model->merge_shared_adapters();

  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : f.manifest.entries) {
    if (!by_name.emplace(e.name, &e).second) throw FormatError("entry '" + e.name + "' appears twice");
  }
  std::size_t used = 0;
  for (auto& ref : out.model->params()) {
    auto& p = *ref.param;
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint '" + path + "' has no entry for '" + p.name + "'");
    const auto& e = *it->second;
    if (e.shape != p.value.shape()) {
      throw FormatError("entry '" + e.name + "' has shape " + shape_str(e.shape) + ", model expects " +
                        shape_str(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    std::memcpy(dst.data(), f.data.data() + e.offset, dst.size() * sizeof(float));
    ++used;
  }
  if (used != by_name.size()) {
    throw FormatError("checkpoint '" + path + "' has " + std::to_string(by_name.size() - used) +
                      " entries the model does not use");
  }
  out.manifest = std::move(f.manifest);
  return out;
}

}  // namespace mtlora
