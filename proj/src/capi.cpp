// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "mtlora/audit.hpp"
#include "mtlora/checkpoint.hpp"
#include "mtlora/errors.hpp"
#include "mtlora/experiment.hpp"
#include "mtlora/metrics.hpp"
#include "mtlora/mtlora.h"

struct mtlora_run {
  mtlora::RunConfig cfg;
};

struct mtlora_model {
  mtlora::RunConfig run;
  std::unique_ptr<mtlora::MultiTaskModel<float>> model;
  std::int64_t steps = 0;
};

namespace {

thread_local std::string g_last_error;

mtlora_status fail(mtlora_status s, std::string msg) {
  g_last_error = std::move(msg);
  return s;
}

// Runs `fn`, mapping library exceptions onto status codes.
template <typename F>
mtlora_status guarded(F&& fn) {
  try {
    fn();
    g_last_error.clear();
    return MTLORA_OK;
  } catch (const mtlora::Error& e) {
    return fail(e.kind() == mtlora::ErrorKind::kValidation ? MTLORA_ERR_VALIDATION : MTLORA_ERR_RUNTIME, e.what());
  } catch (const std::bad_alloc&) {
    return fail(MTLORA_ERR_RUNTIME, "out of memory");
  } catch (const std::exception& e) {
    return fail(MTLORA_ERR_RUNTIME, e.what());
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw mtlora::UsageError(what);
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void set_string(char** out, const std::string& s) {
  if (out) *out = dup(s);
}

nlohmann::json evaluation_json(mtlora_model& m, const mtlora::RunConfig& run) {
  const auto size = m.run.model.backbone.image_size;
  const mtlora::Dataset val(mtlora::Split::kVal, run.data, size);
  auto report = mtlora::evaluate(*m.model, val);
  report.steps = m.steps;
  nlohmann::json j{{"report", mtlora::to_json(report)}, {"delta_m", nullptr}};
  std::map<mtlora::TaskId, double> base;
  for (const auto& t : m.run.model.tasks) {
    auto it = run.baselines.find(t.id);
    if (it != run.baselines.end()) base[t.id] = it->second;
  }
  if (!base.empty() && base.size() == m.run.model.tasks.size()) {
    j["delta_m"] = mtlora::delta_m(report.metrics, base, mtlora::lower_is_better(m.run.model));
  }
  return j;
}

}  // namespace

extern "C" {

const char* mtlora_version(void) { return "0.1.0"; }

const char* mtlora_last_error(void) { return g_last_error.c_str(); }

void mtlora_string_free(char* s) { std::free(s); }

mtlora_status mtlora_run_load(const char* toml_path, mtlora_run** out) {
  return guarded([&] {
    require(out, "output handle is null");
    auto r = std::make_unique<mtlora_run>();
    if (toml_path && *toml_path) r->cfg = mtlora::load_run_config(toml_path);
    else r->cfg = mtlora::parse_run_config("");
    *out = r.release();
  });
}

mtlora_status mtlora_run_parse(const char* toml_text, mtlora_run** out) {
  return guarded([&] {
    require(out, "output handle is null");
    auto r = std::make_unique<mtlora_run>();
    r->cfg = mtlora::parse_run_config(toml_text ? toml_text : "");
    *out = r.release();
  });
}

void mtlora_run_destroy(mtlora_run* run) { delete run; }

mtlora_status mtlora_run_set_seed(mtlora_run* run, uint64_t seed) {
  return guarded([&] {
    require(run, "run handle is null");
    run->cfg.train.seed = seed;
    run->cfg.data.seed = seed;
  });
}

mtlora_status mtlora_run_set_steps(mtlora_run* run, int64_t steps) {
  return guarded([&] {
    require(run, "run handle is null");
    if (steps < 1) throw mtlora::ConfigError("steps must be at least 1");
    run->cfg.train.steps = steps;
  });
}

mtlora_status mtlora_run_set_baseline(mtlora_run* run, const char* task, double value) {
  return guarded([&] {
    require(run && task, "run handle or task is null");
    run->cfg.model.task(task);  // throws for an unknown task
    if (!(value > 0.0)) throw mtlora::ConfigError("baseline for '" + std::string(task) + "' must be positive");
    run->cfg.baselines[task] = value;
  });
}

mtlora_status mtlora_run_to_json(const mtlora_run* run, char** json) {
  return guarded([&] {
    require(run && json, "run handle or output is null");
    *json = dup(mtlora::to_json(run->cfg).dump(2));
  });
}

mtlora_status mtlora_train(const mtlora_run* run, mtlora_step_fn on_step, void* user, mtlora_model** model_out,
                           char** report_json) {
  return guarded([&] {
    require(run, "run handle is null");
    const auto splits = mtlora::make_splits(run->cfg);
    mtlora::StepCallback cb;
    if (on_step) cb = [&](std::int64_t step, const mtlora::StepResult& r) { on_step(step, r.loss, user); };
    auto m = std::make_unique<mtlora_model>();
    const auto report = mtlora::run_training(run->cfg, splits, cb, &m->model);
    m->run = run->cfg;
    m->steps = report.metrics.steps;
    // Allocate the string before handing out the model so a failure leaks nothing.
    char* text = report_json ? dup(mtlora::to_json(report).dump(2)) : nullptr;
    if (report_json) *report_json = text;
    if (model_out) *model_out = m.release();
  });
}

mtlora_status mtlora_model_create(const mtlora_run* run, mtlora_model** out) {
  return guarded([&] {
    require(run && out, "run handle or output is null");
    auto m = std::make_unique<mtlora_model>();
    m->run = run->cfg;
    m->model = std::make_unique<mtlora::MultiTaskModel<float>>(run->cfg.model, run->cfg.train.seed);
    *out = m.release();
  });
}

mtlora_status mtlora_model_load(const char* path, mtlora_model** out) {
  return guarded([&] {
    require(path && out, "path or output is null");
    auto loaded = mtlora::load_checkpoint(path);
    auto m = std::make_unique<mtlora_model>();
    m->run = loaded.run;
    m->steps = loaded.manifest.steps;
    m->model = std::move(loaded.model);
    *out = m.release();
  });
}

void mtlora_model_destroy(mtlora_model* model) { delete model; }

mtlora_status mtlora_model_trainable_count(const mtlora_model* model, int64_t* count) {
  return guarded([&] {
    require(model && count, "model handle or output is null");
    *count = model->model->trainable_count();
  });
}

mtlora_status mtlora_model_run(const mtlora_model* model, mtlora_run** out) {
  return guarded([&] {
    require(model && out, "model handle or output is null");
    auto r = std::make_unique<mtlora_run>();
    r->cfg = model->run;
    *out = r.release();
  });
}

mtlora_status mtlora_model_evaluate(mtlora_model* model, const mtlora_run* run, char** report_json) {
  return guarded([&] {
    require(model && report_json, "model handle or output is null");
    *report_json = dup(evaluation_json(*model, run ? run->cfg : model->run).dump(2));
  });
}

mtlora_status mtlora_model_save(mtlora_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "model handle or path is null");
    mtlora::save_checkpoint(*model->model, path, model->run, model->steps);
  });
}

mtlora_status mtlora_model_export_merged(mtlora_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "model handle or path is null");
    mtlora::export_merged(*model->model, path, model->run, model->steps);
  });
}

mtlora_status mtlora_model_output_shape(const mtlora_model* model, const char* task, int64_t shape[3]) {
  return guarded([&] {
    require(model && task && shape, "model handle, task or output is null");
    const auto& cfg = model->model->config();
    shape[0] = cfg.task(task).out_channels;
    shape[1] = shape[2] = cfg.backbone.image_size;
  });
}

mtlora_status mtlora_model_predict(mtlora_model* model, const float* images, int64_t batch, const char* task,
                                   float* out, size_t out_len) {
  return guarded([&] {
    require(model && images && task && out, "model handle, images, task or output is null");
    if (batch < 1) throw mtlora::DimensionError("batch must be at least 1");
    const auto& cfg = model->model->config();
    cfg.task(task);
    const auto s = cfg.backbone.image_size;
    std::vector<float> data(images, images + batch * 3 * s * s);
    const mtlora::Tensor<float> x({batch, 3, s, s}, data);
    const auto logits = model->model->forward(x);
    const auto d = logits.at(task).data();
    if (out_len != d.size()) {
      throw mtlora::DimensionError("output buffer holds " + std::to_string(out_len) + " floats, prediction needs " +
                                   std::to_string(d.size()));
    }
    std::memcpy(out, d.data(), d.size() * sizeof(float));
  });
}

mtlora_status mtlora_audit(const char* preset, const mtlora_run* run, const char* strategy, int64_t rank,
                           char** report_json, char** table) {
  return guarded([&] {
    require((preset && *preset) != (run != nullptr), "give exactly one of a preset or a run");
    mtlora::ModelConfig cfg;
    std::int64_t window = 0;
    if (run) {
      cfg = run->cfg.model;
    } else {
      const auto p = mtlora::find_preset(preset);
      cfg = p.model;
      window = p.window;
    }
    if (strategy && *strategy) cfg = mtlora::with_strategy(cfg, strategy);
    if (rank < 0) throw mtlora::UsageError("rank must be positive");
    if (rank > 0) cfg.adapters.r_shared = rank;
    const auto report = mtlora::audit(cfg, window);
    set_string(report_json, mtlora::to_json(report).dump(2));
    set_string(table, mtlora::format_report(report));
  });
}

mtlora_status mtlora_gradcheck(uint64_t seed, double* max_rel_error, char** report_json) {
  return guarded([&] {
    const auto r = mtlora::model_grad_check(seed);
    if (max_rel_error) *max_rel_error = r.max_rel_error;
    const nlohmann::json j{{"seed", seed},
                           {"max_rel_error", r.max_rel_error},
                           {"worst_parameter", r.worst_parameter},
                           {"worst_index", r.worst_index},
                           {"worst_analytic", r.worst_analytic},
                           {"worst_numeric", r.worst_numeric},
                           {"checked", r.checked}};
    set_string(report_json, j.dump(2));
  });
}

mtlora_status mtlora_generate_dataset(const mtlora_run* run, const char* dir) {
  return guarded([&] {
    require(run && dir && *dir, "run handle or directory is null");
    mtlora::export_dataset(dir, run->cfg.data, run->cfg.model.backbone.image_size);
  });
}

}  // extern "C"
