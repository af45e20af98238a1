// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/backbone.hpp"

#include <cmath>

#include "mtlora/errors.hpp"
#include "mtlora/ops.hpp"

namespace mtlora {

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBaseWeights: return "base_weights";
    case ParamGroup::kSharedAdapters: return "shared_adapters";
    case ParamGroup::kTaskAdapters: return "task_adapters";
    case ParamGroup::kDecoders: return "decoders";
    case ParamGroup::kPatchEmbed: return "patch_embed";
    case ParamGroup::kPatchMerging: return "patch_merging";
    case ParamGroup::kLayerNorm: return "layer_norm";
    case ParamGroup::kPositionBias: return "position_bias";
    case ParamGroup::kBiases: return "biases";
  }
  return "?";
}

namespace {

template <typename T>
void collect_linear(MTLoRALinear<T>& lin, ParamGroup weight_group, ParamGroup adapter_group,
                    std::vector<ParamRef<T>>& out) {
  out.push_back({&lin.base().weight, weight_group});
  if (lin.base().has_bias()) out.push_back({&lin.base().bias, ParamGroup::kBiases});
  if (lin.has_shared()) {
    out.push_back({&lin.shared().a, adapter_group, true});
    out.push_back({&lin.shared().b, adapter_group, true});
  }
  for (auto& [task, ad] : lin.task_adapters()) {
    out.push_back({&ad.a, ParamGroup::kTaskAdapters, true});
    out.push_back({&ad.b, ParamGroup::kTaskAdapters, true});
  }
}

template <typename T>
void init_linear(MTLoRALinear<T>& lin, const Rng& rng) {
  lin.init_base(rng);
  lin.init_adapters(rng);
}

// Relative offsets (dy, dx) of every token pair, flattened into the bias table.
std::vector<std::int64_t> relative_index(std::int64_t h, std::int64_t w) {
  const std::int64_t n = h * w;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n * n));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      const std::int64_t dy = i / w - j / w + h - 1;
      const std::int64_t dx = i % w - j % w + w - 1;
      idx[static_cast<std::size_t>(i * n + j)] = dy * (2 * w - 1) + dx;
    }
  }
  return idx;
}

}  // namespace

template <typename T>
LayerNorm<T>::LayerNorm(const std::string& name, std::int64_t dim, double e)
    : gamma(name + ".gamma", Tensor<T>::full({dim}, T(1))),
      beta(name + ".beta", Tensor<T>::zeros({dim})),
      eps(static_cast<T>(e)) {}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) const {
  return layer_norm(x, gamma.value, beta.value, eps);
}

template <typename T>
void LayerNorm<T>::collect(std::vector<ParamRef<T>>& out) {
  out.push_back({&gamma, ParamGroup::kLayerNorm});
  out.push_back({&beta, ParamGroup::kLayerNorm});
}

template <typename T>
Block<T>::Block(const std::string& name, const ModelConfig& cfg, int stage, BlockKind kind)
    : name_(name),
      kind_(kind),
      dim_(cfg.backbone.stage_dim(stage)),
      heads_(cfg.backbone.heads[static_cast<std::size_t>(stage)]),
      grid_(cfg.backbone.grid(stage)),
      norm1_(name + ".norm1", dim_, cfg.backbone.ln_eps),
      norm2_(name + ".norm2", dim_, cfg.backbone.ln_eps),
      qkv_(name + ".attn.qkv", dim_, 3 * dim_),
      proj_(name + ".attn.proj", dim_, dim_),
      fc1_(name + ".mlp.fc1", dim_, cfg.backbone.mlp_ratio * dim_),
      fc2_(name + ".mlp.fc2", cfg.backbone.mlp_ratio * dim_, dim_) {
  const auto& ad = cfg.adapters;
  const std::pair<AdaptLocation, MTLoRALinear<T>*> layers[] = {
      {AdaptLocation::kQkv, &qkv_},
      {AdaptLocation::kProj, &proj_},
      {AdaptLocation::kFc1, &fc1_},
      {AdaptLocation::kFc2, &fc2_},
  };
  const auto tasks = cfg.task_ids();
  bool any_task = false;
  for (const auto& [loc, lin] : layers) {
    lin->set_alpha(static_cast<T>(ad.alpha_for(lin->name())));
    if (!ad.locations.count(loc)) continue;
    if (ad.has_shared()) lin->add_shared_adapter(ad.r_shared);
    const bool carries_task = loc != AdaptLocation::kQkv || ad.ts_on_qkv;
    if (kind == BlockKind::kTaskSpecific && carries_task) {
      lin->add_task_adapters(tasks, ad.r_ts);
      any_task = true;
    }
  }
  if (kind == BlockKind::kTaskSpecific && !any_task) {
    throw ConfigError("task-specific block '" + name + "' has no layer to carry task adapters");
  }
  const std::int64_t table = (2 * grid_ - 1) * (2 * grid_ - 1);
  pos_bias_ = Parameter<T>(name + ".attn.rel_pos_bias", Tensor<T>::zeros({heads_, table}));
  pos_index_ = relative_index(grid_, grid_);
}

template <typename T>
void Block<T>::init(const Rng& rng) {
  for (auto* lin : linears()) init_linear(*lin, rng);
  Rng r = rng.fork(pos_bias_.name);
  std::vector<T> data(static_cast<std::size_t>(pos_bias_.numel()));
  for (auto& v : data) v = static_cast<T>(0.02 * r.normal());
  const bool trainable = pos_bias_.trainable();
  pos_bias_.value = Tensor<T>(pos_bias_.value.shape(), std::move(data));
  pos_bias_.set_trainable(trainable);
}

template <typename T>
Tensor<T> Block<T>::attend(const Tensor<T>& qkv_out) const {
  const std::int64_t b = qkv_out.dim(0);
  const std::int64_t n = qkv_out.dim(1);
  const std::int64_t hd = dim_ / heads_;
  // [B, N, 3, H, hd] -> [3, B, H, N, hd]
  const auto parts = permute(reshape(qkv_out, {b, n, 3, heads_, hd}), {2, 0, 3, 1, 4});
  const auto q = scale(select(parts, 0), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  const auto k = select(parts, 1);
  const auto v = select(parts, 2);
  auto scores = matmul(q, transpose(k, 2, 3));
  const auto bias = reshape(gather_lastdim(pos_bias_.value, std::span<const std::int64_t>(pos_index_)),
                            {heads_, n, n});
  const auto attn = softmax_lastdim(add(scores, bias));
  const auto ctx = matmul(attn, v);  // [B, H, N, hd]
  return reshape(permute(ctx, {0, 2, 1, 3}), {b, n, dim_});
}

template <typename T>
Tensor<T> Block<T>::forward(const Tensor<T>& x) const {
  const auto a = attend(qkv_.forward(norm1_.forward(x)));
  const auto x1 = add(x, proj_.forward(a));
  return add(x1, fc2_.forward(gelu(fc1_.forward(norm2_.forward(x1)))));
}

template <typename T>
MultiOutput<T> Block<T>::forward_ts(const Tensor<T>& x, std::span<const TaskId> tasks) const {
  if (kind_ != BlockKind::kTaskSpecific) {
    throw ConfigError("block '" + name_ + "' has no task-specific adapters");
  }
  const auto h = norm1_.forward(x);
  MultiOutput<T> p;
  if (!qkv_.task_adapters().empty()) {
    const auto q = qkv_.forward_multi(h, nullptr, tasks);
    TaskTensors<T> streams;
    for (const auto& [task, t] : q.tasks) streams[task] = attend(t);
    p = proj_.forward_multi(attend(q.shared), &streams, tasks);
  } else {
    p = proj_.forward_multi(attend(qkv_.forward(h)), nullptr, tasks);
  }
  // Task streams take their first residual from the shared block input.
  MultiOutput<T> x1;
  x1.shared = add(x, p.shared);
  TaskTensors<T> n2;
  for (const auto& [task, t] : p.tasks) {
    x1.tasks[task] = add(x, t);
    n2[task] = norm2_.forward(x1.tasks[task]);
  }
  auto f1 = fc1_.forward_multi(norm2_.forward(x1.shared), &n2, tasks);
  f1.shared = gelu(f1.shared);
  for (auto& [task, t] : f1.tasks) t = gelu(t);
  const auto f2 = fc2_.forward_multi(f1.shared, &f1.tasks, tasks);
  MultiOutput<T> out;
  out.shared = add(x1.shared, f2.shared);
  for (const auto& [task, t] : f2.tasks) out.tasks[task] = add(x1.tasks.at(task), t);
  return out;
}

template <typename T>
void Block<T>::collect(std::vector<ParamRef<T>>& out) {
  norm1_.collect(out);
  collect_linear(qkv_, ParamGroup::kBaseWeights, ParamGroup::kSharedAdapters, out);
  out.push_back({&pos_bias_, ParamGroup::kPositionBias});
  collect_linear(proj_, ParamGroup::kBaseWeights, ParamGroup::kSharedAdapters, out);
  norm2_.collect(out);
  collect_linear(fc1_, ParamGroup::kBaseWeights, ParamGroup::kSharedAdapters, out);
  collect_linear(fc2_, ParamGroup::kBaseWeights, ParamGroup::kSharedAdapters, out);
}

template <typename T>
PatchMerging<T>::PatchMerging(const std::string& name, const ModelConfig& cfg, int stage)
    : norm_(name + ".norm", 4 * cfg.backbone.stage_dim(stage), cfg.backbone.ln_eps),
      reduction_(name + ".reduction", 4 * cfg.backbone.stage_dim(stage),
                 2 * cfg.backbone.stage_dim(stage)) {
  reduction_.set_alpha(static_cast<T>(cfg.adapters.alpha_for(reduction_.name())));
  if (cfg.merge_mode() == PatchMergeMode::kLora) reduction_.add_shared_adapter(cfg.adapters.r_shared);
}

template <typename T>
void PatchMerging<T>::init(const Rng& rng) {
  init_linear(reduction_, rng);
}

template <typename T>
Tensor<T> PatchMerging<T>::forward(const Tensor<T>& x, std::int64_t h, std::int64_t w) const {
  return reduction_.forward(norm_.forward(merge_2x2(x, h, w)));
}

template <typename T>
void PatchMerging<T>::collect(std::vector<ParamRef<T>>& out) {
  norm_.collect(out);
  collect_linear(reduction_, ParamGroup::kPatchMerging, ParamGroup::kPatchMerging, out);
}

template <typename T>
Backbone<T>::Backbone(const ModelConfig& cfg)
    : cfg_(cfg.backbone),
      tasks_(cfg.task_ids()),
      embed_("backbone.patch_embed.proj",
             cfg.backbone.in_channels * cfg.backbone.patch_size * cfg.backbone.patch_size,
             cfg.backbone.embed_dim),
      embed_norm_("backbone.patch_embed.norm", cfg.backbone.embed_dim, cfg.backbone.ln_eps) {
  cfg.validate();
  const bool ts = cfg.adapters.has_task_specific();
  for (int s = 0; s < cfg_.num_stages(); ++s) {
    std::vector<Block<T>> blocks;
    const std::int64_t depth = cfg_.depths[static_cast<std::size_t>(s)];
    for (std::int64_t b = 0; b < depth; ++b) {
      const auto kind =
          ts && b == depth - 1 ? BlockKind::kTaskSpecific : BlockKind::kTaskAgnostic;
      blocks.emplace_back(
          "backbone.stages." + std::to_string(s) + ".blocks." + std::to_string(b), cfg, s, kind);
    }
    stages_.push_back(std::move(blocks));
    if (s + 1 < cfg_.num_stages()) {
      merges_.emplace_back("backbone.stages." + std::to_string(s) + ".merge", cfg, s);
    }
  }
}

template <typename T>
void Backbone<T>::init(const Rng& rng) {
  embed_.init(rng.fork(embed_.weight.name));
  for (auto& blocks : stages_) {
    for (auto& b : blocks) b.init(rng);
  }
  for (auto& m : merges_) m.init(rng);
}

template <typename T>
std::vector<StageOutput<T>> Backbone<T>::forward(const Tensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != cfg_.in_channels ||
      images.dim(2) != cfg_.image_size || images.dim(3) != cfg_.image_size) {
    throw DimensionError("backbone expects images [B, " + std::to_string(cfg_.in_channels) + ", " +
                         std::to_string(cfg_.image_size) + ", " +
                         std::to_string(cfg_.image_size) + "], got " + shape_str(images.shape()));
  }
  Tensor<T> x = embed_norm_.forward(embed_.forward(patchify(images, cfg_.patch_size)));
  std::vector<StageOutput<T>> outs;
  for (int s = 0; s < num_stages(); ++s) {
    StageOutput<T> so;
    so.h = so.w = cfg_.grid(s);
    for (const auto& block : stage(s)) {
      if (block.kind() == BlockKind::kTaskSpecific) {
        auto mo = block.forward_ts(x, tasks_);
        x = mo.shared;
        so.per_task = std::move(mo.tasks);
      } else {
        x = block.forward(x);
      }
    }
    if (so.per_task.empty()) {
      for (const auto& task : tasks_) so.per_task[task] = x;
    }
    so.shared = x;
    outs.push_back(std::move(so));
    if (s + 1 < num_stages()) x = merges_[static_cast<std::size_t>(s)].forward(x, outs.back().h, outs.back().w);
  }
  return outs;
}

template <typename T>
void Backbone<T>::collect(std::vector<ParamRef<T>>& out) {
  out.push_back({&embed_.weight, ParamGroup::kPatchEmbed});
  out.push_back({&embed_.bias, ParamGroup::kPatchEmbed});
  embed_norm_.collect(out);
  for (int s = 0; s < num_stages(); ++s) {
    for (auto& b : stage(s)) b.collect(out);
    if (s + 1 < num_stages()) merges_[static_cast<std::size_t>(s)].collect(out);
  }
}

template <typename T>
std::vector<MTLoRALinear<T>*> Backbone<T>::adapted_linears() {
  std::vector<MTLoRALinear<T>*> out;
  for (auto& blocks : stages_) {
    for (auto& b : blocks) {
      for (auto* lin : b.linears()) out.push_back(lin);
    }
  }
  for (auto& m : merges_) out.push_back(&m.reduction());
  return out;
}

template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct LayerNorm<long double>;
template class Block<float>;
template class Block<double>;
template class Block<long double>;
template class PatchMerging<float>;
template class PatchMerging<double>;
template class PatchMerging<long double>;
template class Backbone<float>;
template class Backbone<double>;
template class Backbone<long double>;

}  // namespace mtlora
