// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/audit.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "mtlora/errors.hpp"
#include "mtlora/model.hpp"

namespace mtlora {

namespace {

using u64 = std::uint64_t;

// Which adapters one block linear carries.
struct LayerPlan {
  bool shared = false;
  bool task = false;
};

LayerPlan plan(const ModelConfig& cfg, AdaptLocation loc, bool task_specific) {
  const auto& ad = cfg.adapters;
  LayerPlan p;
  if (!ad.locations.count(loc)) return p;
  p.shared = ad.has_shared();
  p.task = task_specific && ad.has_task_specific() && (loc != AdaptLocation::kQkv || ad.ts_on_qkv);
  return p;
}

bool block_is_ts(const ModelConfig& cfg, std::int64_t b, std::int64_t depth) {
  return cfg.adapters.has_task_specific() && b == depth - 1;
}

// Side of the attention neighbourhood at a stage grid.
std::int64_t attention_side(std::int64_t grid, std::int64_t window) {
  return window > 0 ? std::min(grid, window) : grid;
}

class Counter {
 public:
  Counter(const ModelConfig& cfg, AuditReport& r)
      : r_(r), policy_(cfg.freeze), mode_(cfg.merge_mode()) {}

  void add(ParamGroup g, std::int64_t n, bool adapter = false, bool unreachable = false) {
    auto& gc = r_.groups[g];
    gc.total += n;
    r_.total_params += n;
    if (!is_trainable(g, adapter, policy_, mode_)) return;
    gc.trainable += n;
    r_.trainable_params += n;
    if (unreachable) r_.unreachable_trainable += n;
  }

  void linear(std::int64_t in, std::int64_t out, ParamGroup weight_group, ParamGroup adapter_group,
              std::int64_t r_shared, std::int64_t r_task, std::int64_t tasks,
              bool shared_unreachable = false) {
    add(weight_group, in * out);
    add(ParamGroup::kBiases, out);
    if (r_shared > 0) add(adapter_group, r_shared * (in + out), true, shared_unreachable);
    if (r_task > 0) add(ParamGroup::kTaskAdapters, tasks * r_task * (in + out), true);
  }

 private:
  AuditReport& r_;
  FreezePolicy policy_;
  PatchMergeMode mode_;
};

// FLOPs of one linear application over `rows` tokens, plus an optional
// low-rank adapter of rank r (x A^T, then B^T).
u64 linear_flops(std::int64_t rows, std::int64_t in, std::int64_t out, std::int64_t r = 0) {
  u64 f = 2ULL * rows * in * out;
  if (r > 0) f += 2ULL * rows * r * (in + out);
  return f;
}

// Q K^T and attention-times-V, summed over heads.
u64 attention_flops(std::int64_t batch, std::int64_t grid, std::int64_t dim, std::int64_t window) {
  const std::int64_t n = grid * grid;
  const std::int64_t side = attention_side(grid, window);
  return 4ULL * batch * n * side * side * dim;
}

struct BlockFlops {
  u64 trunk = 0;
  u64 per_task = 0;
};

BlockFlops block_flops(const ModelConfig& cfg, int stage, bool ts, std::int64_t batch,
                       std::int64_t window) {
  const auto& bb = cfg.backbone;
  const std::int64_t c = bb.stage_dim(stage);
  const std::int64_t hidden = bb.mlp_ratio * c;
  const std::int64_t grid = bb.grid(stage);
  const std::int64_t rows = batch * grid * grid;
  const auto& ad = cfg.adapters;
  auto rs = [&](const LayerPlan& p) { return p.shared ? ad.r_shared : 0; };
  auto rt = [&](const LayerPlan& p) { return p.task ? ad.r_ts : 0; };
  const auto qkv = plan(cfg, AdaptLocation::kQkv, ts);
  const auto proj = plan(cfg, AdaptLocation::kProj, ts);
  const auto fc1 = plan(cfg, AdaptLocation::kFc1, ts);
  const auto fc2 = plan(cfg, AdaptLocation::kFc2, ts);
  const u64 attn = attention_flops(batch, grid, c, window);

  BlockFlops f;
  f.trunk = linear_flops(rows, c, 3 * c, rs(qkv)) + attn + linear_flops(rows, c, c, rs(proj)) +
            linear_flops(rows, c, hidden, rs(fc1)) + linear_flops(rows, hidden, c, rs(fc2));
  if (!ts) return f;
  if (qkv.task) {
    // Each task attends over its own q, k, v and runs proj on its own stream.
    f.per_task += linear_flops(rows, c, 3 * c, ad.r_ts) - linear_flops(rows, c, 3 * c) + attn;
    f.per_task += linear_flops(rows, c, c, rt(proj));
  } else if (proj.task) {
    // Tasks reuse the shared W x + b and add their own low-rank term.
    f.per_task += linear_flops(rows, c, c, ad.r_ts) - linear_flops(rows, c, c);
  }
  f.per_task += linear_flops(rows, c, hidden, rt(fc1)) + linear_flops(rows, hidden, c, rt(fc2));
  return f;
}

u64 trunk_flops(const ModelConfig& cfg, std::int64_t batch, std::int64_t window) {
  const auto& bb = cfg.backbone;
  const std::int64_t g0 = bb.grid(0);
  u64 f = linear_flops(batch * g0 * g0, bb.in_channels * bb.patch_size * bb.patch_size, bb.embed_dim);
  for (int s = 0; s < bb.num_stages(); ++s) {
    const std::int64_t depth = bb.depths[static_cast<std::size_t>(s)];
    for (std::int64_t b = 0; b < depth; ++b) {
      f += block_flops(cfg, s, block_is_ts(cfg, b, depth), batch, window).trunk;
    }
    if (s + 1 < bb.num_stages()) {
      const std::int64_t c = bb.stage_dim(s);
      const std::int64_t g = bb.grid(s + 1);
      const std::int64_t r = cfg.merge_mode() == PatchMergeMode::kLora ? cfg.adapters.r_shared : 0;
      f += linear_flops(batch * g * g, 4 * c, 2 * c, r);
    }
  }
  return f;
}

u64 head_flops(const ModelConfig& cfg, const TaskSpec& task, std::int64_t batch) {
  const auto& bb = cfg.backbone;
  const std::int64_t d = cfg.fusion_dim();
  const std::int64_t g0 = bb.grid(0);
  const std::int64_t rows0 = batch * g0 * g0;
  u64 f = 0;
  for (int s = 0; s < bb.num_stages(); ++s) {
    const std::int64_t g = bb.grid(s);
    f += linear_flops(batch * g * g, bb.stage_dim(s), d);
  }
  f += static_cast<u64>(cfg.head.residual_blocks) * 2 * linear_flops(rows0, d, d);
  f += linear_flops(rows0, d, task.out_channels);
  return f;
}

u64 branch_flops(const ModelConfig& cfg, std::int64_t batch, std::int64_t window) {
  const auto& bb = cfg.backbone;
  u64 f = 0;
  for (int s = 0; s < bb.num_stages(); ++s) {
    const std::int64_t depth = bb.depths[static_cast<std::size_t>(s)];
    for (std::int64_t b = 0; b < depth; ++b) {
      if (block_is_ts(cfg, b, depth)) f += block_flops(cfg, s, true, batch, window).per_task;
    }
  }
  return f;
}

ModelConfig only_tasks(const ModelConfig& cfg, std::size_t first, std::size_t count) {
  ModelConfig out = cfg;
  out.tasks.assign(cfg.tasks.begin() + static_cast<std::ptrdiff_t>(first),
                   cfg.tasks.begin() + static_cast<std::ptrdiff_t>(first + count));
  return out;
}

std::string with_commas(std::uint64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

}  // namespace

std::vector<std::string> preset_names() { return {"swin-tiny"}; }

ArchPreset find_preset(std::string_view name) {
  if (name != "swin-tiny") {
    throw UsageError("unknown preset '" + std::string(name) + "' (known: swin-tiny)");
  }
  ArchPreset p;
  p.name = "swin-tiny";
  p.window = 7;
  auto& m = p.model;
  m.backbone.image_size = 224;
  m.backbone.patch_size = 4;
  m.backbone.embed_dim = 96;
  m.backbone.depths = {2, 2, 6, 2};
  m.backbone.heads = {3, 6, 12, 24};
  m.adapters.r_shared = 16;
  m.adapters.r_ts = 4;
  m.head.fusion_dim = 208;
  m.head.residual_blocks = 2;
  // Dense-prediction benchmark label spaces: 21 semantic classes, 7 part
  // labels, saliency and surface normals.
  m.tasks = default_tasks();
  for (auto& t : m.tasks) {
    if (t.target == TaskTarget::kSemseg) t.out_channels = 21;
    if (t.target == TaskTarget::kParts) t.out_channels = 7;
  }
  m.freeze = FreezePolicy::for_strategy(m.adapters.strategy);
  return p;
}

ModelConfig with_strategy(ModelConfig cfg, std::string_view strategy) {
  const auto s = parse_strategy(strategy);
  if (!s) {
    throw UsageError("unknown strategy '" + std::string(strategy) +
                     "' (expected mtlora, mtlora_plus, lora_only, decoders_only or full_ft)");
  }
  cfg.adapters.strategy = *s;
  cfg.freeze = FreezePolicy::for_strategy(*s);
  return cfg;
}

AuditReport count_trainable(const ModelConfig& cfg, std::int64_t window) {
  cfg.validate();
  AuditReport r;
  r.strategy = to_string(cfg.adapters.strategy);
  for (int g = 0; g < kNumParamGroups; ++g) r.groups[static_cast<ParamGroup>(g)] = {};
  Counter count(cfg, r);
  const auto& bb = cfg.backbone;
  const auto& ad = cfg.adapters;
  const auto tasks = static_cast<std::int64_t>(cfg.tasks.size());

  count.add(ParamGroup::kPatchEmbed, bb.in_channels * bb.patch_size * bb.patch_size * bb.embed_dim);
  count.add(ParamGroup::kPatchEmbed, bb.embed_dim);
  count.add(ParamGroup::kLayerNorm, 2 * bb.embed_dim);
  for (int s = 0; s < bb.num_stages(); ++s) {
    const std::int64_t c = bb.stage_dim(s);
    const std::int64_t hidden = bb.mlp_ratio * c;
    const std::int64_t side = attention_side(bb.grid(s), window);
    const std::int64_t depth = bb.depths[static_cast<std::size_t>(s)];
    const bool last_stage = s + 1 == bb.num_stages();
    for (std::int64_t b = 0; b < depth; ++b) {
      const bool ts = block_is_ts(cfg, b, depth);
      const auto qkv = plan(cfg, AdaptLocation::kQkv, ts);
      // In the final task-specific block the trunk output is never read, so
      // shared adapters feeding only the trunk get no gradient. With qkv
      // task adapters that includes qkv itself.
      const bool dead_tail = ts && last_stage;
      auto rs = [&](const LayerPlan& p) { return p.shared ? ad.r_shared : 0; };
      auto rt = [&](const LayerPlan& p) { return p.task ? ad.r_ts : 0; };
      count.add(ParamGroup::kLayerNorm, 2 * c);
      count.linear(c, 3 * c, ParamGroup::kBaseWeights, ParamGroup::kSharedAdapters, rs(qkv), rt(qkv),
                   tasks, dead_tail && qkv.task);
      count.add(ParamGroup::kPositionBias, bb.heads[static_cast<std::size_t>(s)] * (2 * side - 1) * (2 * side - 1));
      const auto proj = plan(cfg, AdaptLocation::kProj, ts);
      count.linear(c, c, ParamGroup::kBaseWeights, ParamGroup::kSharedAdapters, rs(proj), rt(proj), tasks,
                   dead_tail);
      count.add(ParamGroup::kLayerNorm, 2 * c);
      const auto fc1 = plan(cfg, AdaptLocation::kFc1, ts);
      count.linear(c, hidden, ParamGroup::kBaseWeights, ParamGroup::kSharedAdapters, rs(fc1), rt(fc1),
                   tasks, dead_tail);
      const auto fc2 = plan(cfg, AdaptLocation::kFc2, ts);
      count.linear(hidden, c, ParamGroup::kBaseWeights, ParamGroup::kSharedAdapters, rs(fc2), rt(fc2),
                   tasks, dead_tail);
    }
    if (!last_stage) {
      count.add(ParamGroup::kLayerNorm, 2 * 4 * c);
      const std::int64_t r = cfg.merge_mode() == PatchMergeMode::kLora ? ad.r_shared : 0;
      count.linear(4 * c, 2 * c, ParamGroup::kPatchMerging, ParamGroup::kPatchMerging, r, 0, 0);
    }
  }

  const std::int64_t d = cfg.fusion_dim();
  for (const auto& task : cfg.tasks) {
    for (int s = 0; s < bb.num_stages(); ++s) count.add(ParamGroup::kDecoders, bb.stage_dim(s) * d + d);
    count.add(ParamGroup::kDecoders, cfg.head.residual_blocks * 2 * (d * d + d));
    count.add(ParamGroup::kDecoders, d * task.out_channels + task.out_channels);
  }
  return r;
}

std::uint64_t task_path_flops(const ModelConfig& cfg, const TaskId& task, std::int64_t window,
                              std::int64_t batch) {
  return branch_flops(cfg, batch, window) + head_flops(cfg, cfg.task(task), batch);
}

std::uint64_t estimate_flops(const ModelConfig& cfg, std::int64_t k, FlopsMode mode, std::int64_t window,
                             std::int64_t batch) {
  if (k < 1 || k > static_cast<std::int64_t>(cfg.tasks.size())) {
    throw UsageError("task count must lie in [1, " + std::to_string(cfg.tasks.size()) + "], got " +
                     std::to_string(k));
  }
  if (batch < 1) throw UsageError("batch must be >= 1");
  const auto n = static_cast<std::size_t>(k);
  u64 total = 0;
  if (mode == FlopsMode::kShared) {
    const auto sub = only_tasks(cfg, 0, n);
    total = trunk_flops(sub, batch, window);
    for (const auto& t : sub.tasks) total += task_path_flops(sub, t.id, window, batch);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto single = only_tasks(cfg, i, 1);
      total += trunk_flops(single, batch, window) +
               task_path_flops(single, single.tasks.front().id, window, batch);
    }
  }
  return total;
}

AuditReport audit(const ModelConfig& cfg, std::int64_t window) {
  AuditReport r = count_trainable(cfg, window);
  for (std::int64_t k = 1; k <= static_cast<std::int64_t>(cfg.tasks.size()); ++k) {
    r.flops.push_back({k, estimate_flops(cfg, k, FlopsMode::kShared, window),
                       estimate_flops(cfg, k, FlopsMode::kIndividual, window)});
  }
  return r;
}

nlohmann::json to_json(const AuditReport& r) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [g, c] : r.groups) groups[to_string(g)] = {{"total", c.total}, {"trainable", c.trainable}};
  nlohmann::json flops = nlohmann::json::array();
  for (const auto& f : r.flops) {
    flops.push_back({{"tasks", f.tasks}, {"shared", f.shared}, {"individual", f.individual}});
  }
  return {{"strategy", r.strategy},
          {"groups", groups},
          {"total_params", r.total_params},
          {"trainable_params", r.trainable_params},
          {"unreachable_trainable", r.unreachable_trainable},
          {"flops_convention", "multiply-add = 2 FLOPs; matmuls and linear layers only"},
          {"flops", flops}};
}

std::string format_report(const AuditReport& r) {
  std::ostringstream os;
  char line[160];
  os << "strategy: " << r.strategy << "\n";
  std::snprintf(line, sizeof line, "%-16s %14s %14s\n", "group", "trainable", "total");
  os << line;
  for (const auto& [g, c] : r.groups) {
    std::snprintf(line, sizeof line, "%-16s %14s %14s\n", to_string(g).c_str(),
                  with_commas(static_cast<u64>(c.trainable)).c_str(),
                  with_commas(static_cast<u64>(c.total)).c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "%-16s %14s %14s\n", "sum", with_commas(static_cast<u64>(r.trainable_params)).c_str(),
                with_commas(static_cast<u64>(r.total_params)).c_str());
  os << line;
  std::snprintf(line, sizeof line, "trainable: %.3fM (%s unreachable from any task loss)\n",
                static_cast<double>(r.trainable_params) / 1e6,
                with_commas(static_cast<u64>(r.unreachable_trainable)).c_str());
  os << line;
  if (!r.flops.empty()) {
    os << "FLOPs per image (multiply-add = 2 FLOPs; matmuls and linear layers only)\n";
    std::snprintf(line, sizeof line, "%-6s %18s %18s\n", "tasks", "shared", "individual");
    os << line;
    for (const auto& f : r.flops) {
      std::snprintf(line, sizeof line, "%-6lld %18s %18s\n", static_cast<long long>(f.tasks),
                    with_commas(f.shared).c_str(), with_commas(f.individual).c_str());
      os << line;
    }
  }
  return os.str();
}

}  // namespace mtlora
