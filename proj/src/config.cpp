// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "mtlora/errors.hpp"
#include "mtlora/toml.hpp"

namespace mtlora {

using nlohmann::json;

namespace {

template <typename E, std::size_t N>
std::optional<E> lookup(const std::pair<E, const char*> (&table)[N], std::string_view s) {
  for (const auto& [e, name] : table) {
    if (s == name) return e;
  }
  return std::nullopt;
}

template <typename E, std::size_t N>
std::string name_of(const std::pair<E, const char*> (&table)[N], E e) {
  for (const auto& [v, name] : table) {
    if (v == e) return name;
  }
  return "?";
}

constexpr std::pair<Strategy, const char*> kStrategies[] = {
    {Strategy::kMtlora, "mtlora"},
    {Strategy::kMtloraPlus, "mtlora_plus"},
    {Strategy::kLoraOnly, "lora_only"},
    {Strategy::kDecodersOnly, "decoders_only"},
    {Strategy::kFullFinetune, "full_ft"},
};
constexpr std::pair<PatchMergeMode, const char*> kMergeModes[] = {
    {PatchMergeMode::kFrozen, "frozen"},
    {PatchMergeMode::kUnfrozen, "unfrozen"},
    {PatchMergeMode::kLora, "lora"},
};
constexpr std::pair<AdaptLocation, const char*> kLocations[] = {
    {AdaptLocation::kQkv, "qkv"},
    {AdaptLocation::kProj, "proj"},
    {AdaptLocation::kFc1, "fc1"},
    {AdaptLocation::kFc2, "fc2"},
};
constexpr std::pair<LossKind, const char*> kLosses[] = {
    {LossKind::kCrossEntropy, "cross_entropy"},
    {LossKind::kL1, "l1"},
    {LossKind::kBalancedBce, "balanced_bce"},
};
constexpr std::pair<MetricKind, const char*> kMetrics[] = {
    {MetricKind::kMiou, "miou"},
    {MetricKind::kAngularRmse, "angular_rmse"},
};
constexpr std::pair<TaskTarget, const char*> kTargets[] = {
    {TaskTarget::kSemseg, "semseg"},
    {TaskTarget::kParts, "parts"},
    {TaskTarget::kSaliency, "saliency"},
    {TaskTarget::kNormals, "normals"},
};

// Reads keys out of one table and rejects anything left over.
class Section {
 public:
  Section(const json& j, std::string name) : name_(std::move(name)) {
    if (j.is_null()) return;
    if (!j.is_object()) throw ConfigError("[" + name_ + "] must be a table");
    j_ = j;
  }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename V>
  void read(const std::string& key, V& out) {
    const json* v = get(key);
    if (v == nullptr) return;
    try {
      if constexpr (std::is_same_v<V, double>) {
        if (!v->is_number()) throw ConfigError("");
        out = v->get<double>();
      } else if constexpr (std::is_same_v<V, bool>) {
        if (!v->is_boolean()) throw ConfigError("");
        out = v->get<bool>();
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v->is_string()) throw ConfigError("");
        out = v->get<std::string>();
      } else if constexpr (std::is_same_v<V, std::uint64_t>) {
        if (!v->is_number_integer() || v->get<std::int64_t>() < 0) throw ConfigError("");
        out = v->get<std::uint64_t>();
      } else if constexpr (std::is_same_v<V, std::int64_t>) {
        if (!v->is_number_integer()) throw ConfigError("");
        out = v->get<std::int64_t>();
      } else {
        if (!v->is_array()) throw ConfigError("");
        out.clear();
        for (const auto& e : *v) {
          if (!e.is_number_integer()) throw ConfigError("");
          out.push_back(e.get<std::int64_t>());
        }
      }
    } catch (const ConfigError&) {
      throw ConfigError("[" + name_ + "] " + key + " has the wrong type");
    }
  }

  template <typename E, std::size_t N>
  void read_enum(const std::string& key, const std::pair<E, const char*> (&table)[N], E& out) {
    std::string s;
    read(key, s);
    if (get(key) == nullptr) return;
    auto e = lookup(table, s);
    if (!e) throw ConfigError("[" + name_ + "] " + key + " has unknown value '" + s + "'");
    out = *e;
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (auto it = j_.begin(); it != j_.end(); ++it) out.push_back(it.key());
    return out;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError("unknown key '" + it.key() + "' in [" + name_ + "]");
      }
    }
  }

 private:
  json j_ = json::object();
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace

std::string to_string(Strategy s) { return name_of(kStrategies, s); }
std::string to_string(PatchMergeMode m) { return name_of(kMergeModes, m); }
std::string to_string(AdaptLocation l) { return name_of(kLocations, l); }
std::string to_string(LossKind k) { return name_of(kLosses, k); }
std::string to_string(MetricKind k) { return name_of(kMetrics, k); }
std::string to_string(TaskTarget t) { return name_of(kTargets, t); }
std::optional<Strategy> parse_strategy(std::string_view s) { return lookup(kStrategies, s); }

void BackboneConfig::validate() const {
  if (depths.empty()) throw ConfigError("backbone needs at least one stage");
  if (depths.size() != heads.size()) {
    throw ConfigError("backbone depths and heads must have the same length");
  }
  if (in_channels <= 0 || patch_size <= 0 || embed_dim <= 0 || mlp_ratio <= 0) {
    throw ConfigError("backbone sizes must be positive");
  }
  if (!(ln_eps > 0.0)) throw ConfigError("layer norm eps must be positive");
  for (std::size_t s = 0; s < depths.size(); ++s) {
    if (depths[s] < 1) throw ConfigError("every stage needs depth >= 1");
    if (heads[s] < 1 || stage_dim(static_cast<int>(s)) % heads[s] != 0) {
      throw ConfigError("stage " + std::to_string(s) + " width " +
                        std::to_string(stage_dim(static_cast<int>(s))) +
                        " is not divisible by its head count");
    }
  }
  if (image_size % patch_size != 0) {
    throw DimensionError("image size " + std::to_string(image_size) +
                         " is not divisible by patch size " + std::to_string(patch_size));
  }
  const std::int64_t g = image_size / patch_size;
  if (g < 1 || g % (std::int64_t{1} << (depths.size() - 1)) != 0) {
    throw DimensionError("token grid " + std::to_string(g) + " cannot be halved " +
                         std::to_string(depths.size() - 1) + " times");
  }
}

bool AdapterConfig::has_shared() const {
  return strategy == Strategy::kMtlora || strategy == Strategy::kMtloraPlus ||
         strategy == Strategy::kLoraOnly;
}

bool AdapterConfig::has_task_specific() const {
  return strategy == Strategy::kMtlora || strategy == Strategy::kMtloraPlus;
}

double AdapterConfig::alpha_for(const std::string& layer) const {
  double a = alpha;
  std::size_t best = 0;
  for (const auto& [prefix, value] : alpha_overrides) {
    if (layer.compare(0, prefix.size(), prefix) == 0 && prefix.size() >= best) {
      best = prefix.size();
      a = value;
    }
  }
  return a;
}

FreezePolicy FreezePolicy::for_strategy(Strategy s) {
  FreezePolicy p;
  switch (s) {
    case Strategy::kMtlora:
    case Strategy::kLoraOnly:
      break;
    case Strategy::kMtloraPlus:
      p.train_patch_merging = false;
      break;
    case Strategy::kDecodersOnly:
      p = FreezePolicy{false, false, false, false, false, false};
      break;
    case Strategy::kFullFinetune:
      p.train_base_weights = true;
      break;
  }
  return p;
}

void TaskSpec::validate() const {
  if (id.empty()) throw ConfigError("task id must not be empty");
  if (!(weight >= 0.0)) throw ConfigError("task '" + id + "' weight must be >= 0");
  if (out_channels < 1) throw ConfigError("task '" + id + "' needs out_channels >= 1");
  const bool regression = target == TaskTarget::kNormals;
  if (regression != (loss == LossKind::kL1) || regression != (metric == MetricKind::kAngularRmse)) {
    throw ConfigError("task '" + id + "': target " + to_string(target) +
                      " is incompatible with loss " + to_string(loss) + " / metric " +
                      to_string(metric));
  }
  if (regression && out_channels != 3) {
    throw ConfigError("task '" + id + "' predicts normals and needs 3 output channels");
  }
  if (loss == LossKind::kBalancedBce && out_channels != 1) {
    throw ConfigError("task '" + id + "' uses balanced_bce and needs 1 output channel");
  }
  if (loss == LossKind::kCrossEntropy && out_channels < 2) {
    throw ConfigError("task '" + id + "' uses cross_entropy and needs >= 2 output channels");
  }
  if (target == TaskTarget::kSaliency && loss != LossKind::kBalancedBce) {
    throw ConfigError("task '" + id + "' predicts saliency and needs balanced_bce");
  }
}

PatchMergeMode ModelConfig::merge_mode() const {
  if (backbone.patch_merge_mode) return *backbone.patch_merge_mode;
  if (adapters.strategy == Strategy::kMtloraPlus) return PatchMergeMode::kLora;
  return freeze.train_patch_merging ? PatchMergeMode::kUnfrozen : PatchMergeMode::kFrozen;
}

std::int64_t ModelConfig::fusion_dim() const {
  return head.fusion_dim > 0 ? head.fusion_dim : backbone.stage_dim(0);
}

std::vector<TaskId> ModelConfig::task_ids() const {
  std::vector<TaskId> ids;
  for (const auto& t : tasks) ids.push_back(t.id);
  return ids;
}

const TaskSpec& ModelConfig::task(const TaskId& id) const {
  for (const auto& t : tasks) {
    if (t.id == id) return t;
  }
  throw ConfigError("unknown task '" + id + "'");
}

void ModelConfig::validate() const {
  backbone.validate();
  if (tasks.empty()) throw ConfigError("at least one task is required");
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    tasks[i].validate();
    if (i > 0 && !(tasks[i - 1].id < tasks[i].id)) {
      throw ConfigError("task ids must be unique and sorted");
    }
  }
  if (adapters.has_shared() && adapters.r_shared < 1) throw ConfigError("r_shared must be >= 1");
  if (adapters.has_task_specific() && adapters.r_ts < 1) throw ConfigError("r_ts must be >= 1");
  if (!(adapters.alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (merge_mode() == PatchMergeMode::kLora && !adapters.has_shared()) {
    throw ConfigError("patch_merge_mode = lora needs a strategy with shared adapters");
  }
  if (head.residual_blocks < 0 || head.fusion_dim < 0) {
    throw ConfigError("head sizes must be non-negative");
  }
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train.steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
}

std::vector<TaskSpec> default_tasks(std::int64_t num_classes) {
  return {
      {"normals", TaskTarget::kNormals, 3, LossKind::kL1, MetricKind::kAngularRmse, 1.0},
      {"parts", TaskTarget::kParts, 5, LossKind::kCrossEntropy, MetricKind::kMiou, 1.0},
      {"saliency", TaskTarget::kSaliency, 1, LossKind::kBalancedBce, MetricKind::kMiou, 1.0},
      {"semseg", TaskTarget::kSemseg, num_classes + 1, LossKind::kCrossEntropy, MetricKind::kMiou,
       1.0},
  };
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a table");
  RunConfig c;
  auto& m = c.model;
  std::set<std::string> known{"backbone", "adapters", "freeze", "head", "tasks",
                              "train",    "data",     "baselines"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown section [" + it.key() + "]");
  }
  auto section = [&](const char* name) { return j.contains(name) ? j.at(name) : json(); };

  Section bb(section("backbone"), "backbone");
  bb.read("in_channels", m.backbone.in_channels);
  bb.read("image_size", m.backbone.image_size);
  bb.read("patch_size", m.backbone.patch_size);
  bb.read("embed_dim", m.backbone.embed_dim);
  bb.read("depths", m.backbone.depths);
  bb.read("heads", m.backbone.heads);
  bb.read("mlp_ratio", m.backbone.mlp_ratio);
  bb.read("ln_eps", m.backbone.ln_eps);
  if (bb.get("patch_merge_mode") != nullptr) {
    PatchMergeMode mode = PatchMergeMode::kFrozen;
    bb.read_enum("patch_merge_mode", kMergeModes, mode);
    m.backbone.patch_merge_mode = mode;
  }
  bb.finish();

  Section ad(section("adapters"), "adapters");
  ad.read_enum("strategy", kStrategies, m.adapters.strategy);
  ad.read("r_shared", m.adapters.r_shared);
  ad.read("r_ts", m.adapters.r_ts);
  ad.read("alpha", m.adapters.alpha);
  ad.read("ts_on_qkv", m.adapters.ts_on_qkv);
  if (const json* locs = ad.get("locations")) {
    if (!locs->is_array()) throw ConfigError("[adapters] locations must be an array");
    m.adapters.locations.clear();
    for (const auto& e : *locs) {
      auto l = e.is_string() ? lookup(kLocations, e.get<std::string>()) : std::nullopt;
      if (!l) throw ConfigError("[adapters] locations has unknown entry " + e.dump());
      m.adapters.locations.insert(*l);
    }
  }
  if (const json* ov = ad.get("alpha_overrides")) {
    if (!ov->is_object()) throw ConfigError("[adapters.alpha_overrides] must be a table");
    for (auto it = ov->begin(); it != ov->end(); ++it) {
      if (!it->is_number()) throw ConfigError("alpha override '" + it.key() + "' must be a number");
      m.adapters.alpha_overrides[it.key()] = it->get<double>();
    }
  }
  ad.finish();

  m.freeze = FreezePolicy::for_strategy(m.adapters.strategy);
  Section fr(section("freeze"), "freeze");
  fr.read("train_patch_embed", m.freeze.train_patch_embed);
  fr.read("train_patch_merging", m.freeze.train_patch_merging);
  fr.read("train_layer_norm", m.freeze.train_layer_norm);
  fr.read("train_position_bias", m.freeze.train_position_bias);
  fr.read("train_biases", m.freeze.train_biases);
  fr.read("train_base_weights", m.freeze.train_base_weights);
  fr.finish();

  Section hd(section("head"), "head");
  hd.read("fusion_dim", m.head.fusion_dim);
  hd.read("residual_blocks", m.head.residual_blocks);
  hd.finish();

  const json tasks = section("tasks");
  if (tasks.is_null()) {
    m.tasks = default_tasks();
  } else {
    if (!tasks.is_object()) throw ConfigError("[tasks] must contain [tasks.<id>] tables");
    for (auto it = tasks.begin(); it != tasks.end(); ++it) {
      TaskSpec t;
      t.id = it.key();
      Section ts(it.value(), "tasks." + t.id);
      ts.read_enum("target", kTargets, t.target);
      ts.read_enum("loss", kLosses, t.loss);
      ts.read_enum("metric", kMetrics, t.metric);
      ts.read("out_channels", t.out_channels);
      ts.read("weight", t.weight);
      ts.finish();
      m.tasks.push_back(std::move(t));
    }
    std::sort(m.tasks.begin(), m.tasks.end(),
              [](const TaskSpec& a, const TaskSpec& b) { return a.id < b.id; });
  }

  Section tr(section("train"), "train");
  tr.read("steps", c.train.steps);
  tr.read("batch_size", c.train.batch_size);
  tr.read("lr", c.train.lr);
  tr.read("beta1", c.train.beta1);
  tr.read("beta2", c.train.beta2);
  tr.read("adam_eps", c.train.adam_eps);
  tr.read("weight_decay", c.train.weight_decay);
  tr.read("seed", c.train.seed);
  tr.finish();

  Section da(section("data"), "data");
  da.read("train_size", c.data.train_size);
  da.read("val_size", c.data.val_size);
  da.read("seed", c.data.seed);
  da.finish();
  if (c.data.train_size < 1 || c.data.val_size < 1) {
    throw ConfigError("data split sizes must be >= 1");
  }

  const json bl = section("baselines");
  if (!bl.is_null()) {
    if (!bl.is_object()) throw ConfigError("[baselines] must be a table");
    for (auto it = bl.begin(); it != bl.end(); ++it) {
      if (!it->is_number()) throw ConfigError("baseline '" + it.key() + "' must be a number");
      c.baselines[it.key()] = it->get<double>();
    }
  }

  m.validate();
  c.train.validate();
  return c;
}

RunConfig parse_run_config(std::string_view toml_text) {
  return run_config_from_json(parse_toml(toml_text));
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

json to_json(const RunConfig& c) {
  const auto& m = c.model;
  json j;
  j["backbone"] = {{"in_channels", m.backbone.in_channels},
                   {"image_size", m.backbone.image_size},
                   {"patch_size", m.backbone.patch_size},
                   {"embed_dim", m.backbone.embed_dim},
                   {"depths", m.backbone.depths},
                   {"heads", m.backbone.heads},
                   {"mlp_ratio", m.backbone.mlp_ratio},
                   {"ln_eps", m.backbone.ln_eps}};
  if (m.backbone.patch_merge_mode) {
    j["backbone"]["patch_merge_mode"] = to_string(*m.backbone.patch_merge_mode);
  }
  json locs = json::array();
  for (auto l : m.adapters.locations) locs.push_back(to_string(l));
  j["adapters"] = {{"strategy", to_string(m.adapters.strategy)},
                   {"r_shared", m.adapters.r_shared},
                   {"r_ts", m.adapters.r_ts},
                   {"alpha", m.adapters.alpha},
                   {"ts_on_qkv", m.adapters.ts_on_qkv},
                   {"locations", locs}};
  if (!m.adapters.alpha_overrides.empty()) {
    j["adapters"]["alpha_overrides"] = m.adapters.alpha_overrides;
  }
  j["freeze"] = {{"train_patch_embed", m.freeze.train_patch_embed},
                 {"train_patch_merging", m.freeze.train_patch_merging},
                 {"train_layer_norm", m.freeze.train_layer_norm},
                 {"train_position_bias", m.freeze.train_position_bias},
                 {"train_biases", m.freeze.train_biases},
                 {"train_base_weights", m.freeze.train_base_weights}};
  j["head"] = {{"fusion_dim", m.head.fusion_dim}, {"residual_blocks", m.head.residual_blocks}};
  j["tasks"] = json::object();
  for (const auto& t : m.tasks) {
    j["tasks"][t.id] = {{"target", to_string(t.target)},
                        {"loss", to_string(t.loss)},
                        {"metric", to_string(t.metric)},
                        {"out_channels", t.out_channels},
                        {"weight", t.weight}};
  }
  j["train"] = {{"steps", c.train.steps},         {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},               {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},         {"adam_eps", c.train.adam_eps},
                {"weight_decay", c.train.weight_decay}, {"seed", c.train.seed}};
  j["data"] = {{"train_size", c.data.train_size}, {"val_size", c.data.val_size},
               {"seed", c.data.seed}};
  if (!c.baselines.empty()) j["baselines"] = c.baselines;
  return j;
}

}  // namespace mtlora
