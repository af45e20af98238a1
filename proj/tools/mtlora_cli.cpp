// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Everything goes through the C interface.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtlora/mtlora.h"

namespace {

using nlohmann::json;

// Carries a library status out of a subcommand.
struct Failure {
  int code;
  std::string message;
};

void check(mtlora_status s) {
  if (s != MTLORA_OK) throw Failure{static_cast<int>(s), mtlora_last_error()};
}

// Owns a string handed out by the library.
class LibString {
 public:
  LibString() = default;
  LibString(const LibString&) = delete;
  LibString& operator=(const LibString&) = delete;
  ~LibString() { mtlora_string_free(p_); }
  char** out() { return &p_; }
  std::string str() const { return p_ ? p_ : ""; }

 private:
  char* p_ = nullptr;
};

struct RunHandle {
  mtlora_run* p = nullptr;
  ~RunHandle() { mtlora_run_destroy(p); }
};

struct ModelHandle {
  mtlora_model* p = nullptr;
  ~ModelHandle() { mtlora_model_destroy(p); }
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_is_report = true) {
  cmd->add_option("--config", c.config, "TOML run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed for initialisation and data");
  if (out_is_report) cmd->add_option("--out", c.out, "write the JSON report here");
}

void load_run(const Common& c, RunHandle& run) {
  check(mtlora_run_load(c.config.c_str(), &run.p));
  if (c.seed) check(mtlora_run_set_seed(run.p, *c.seed));
}

void write_report(const std::string& path, const std::string& text) {
  if (path.empty()) return;
  std::ofstream f(path, std::ios::trunc);
  f << text << '\n';
  if (!f) throw Failure{MTLORA_ERR_RUNTIME, "cannot write report to '" + path + "'"};
}

void print_metrics(const json& report, const json& delta) {
  std::printf("%-10s %12s\n", "task", "metric");
  for (const auto& [task, v] : report.at("metrics").items()) {
    std::printf("%-10s %12.4f  %s\n", task.c_str(), v.get<double>(), task == "normals" ? "rmse deg" : "mIoU");
  }
  std::printf("trainable params  %lld\n", static_cast<long long>(report.at("trainable_params").get<std::int64_t>()));
  std::printf("steps             %lld\n", static_cast<long long>(report.at("steps").get<std::int64_t>()));
  if (!delta.is_null()) std::printf("delta_m           %+.3f %%\n", delta.get<double>());
}

void on_step(std::int64_t step, double loss, void* user) {
  const auto every = *static_cast<std::int64_t*>(user);
  if (every > 0 && step % every == 0) std::fprintf(stderr, "step %lld  loss %.5f\n", static_cast<long long>(step), loss);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task low-rank adaptation toolkit", "mtlora"};
  app.set_version_flag("--version", mtlora_version());
  app.require_subcommand(1);

  Common train_c, eval_c, audit_c, grad_c, merge_c, data_c;
  std::int64_t steps = 0, log_every = 100, rank = 0;
  std::string save, checkpoint, merge_in, merge_to, preset, strategy;

  auto* train = app.add_subcommand("train", "train a model and evaluate it on the val split");
  add_common(train, train_c);
  train->add_option("--steps", steps, "override the configured step count")->check(CLI::PositiveNumber);
  train->add_option("--save", save, "write a checkpoint of the trained model");
  train->add_option("--log-every", log_every, "print the loss every N steps (0 for never)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the val split");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required()->check(CLI::ExistingFile);

  auto* audit = app.add_subcommand("audit", "count trainable parameters and FLOPs");
  add_common(audit, audit_c);
  audit->add_option("--preset", preset, "architecture preset, e.g. swin-tiny");
  audit->add_option("--strategy", strategy, "mtlora, mtlora_plus, lora_only, decoders_only or full_ft");
  audit->add_option("--rank", rank, "shared adapter rank")->check(CLI::PositiveNumber);

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the tiny model");
  add_common(grad, grad_c);

  auto* merge = app.add_subcommand("merge", "fold shared adapters into a checkpoint's base weights");
  add_common(merge, merge_c);
  merge->add_option("--checkpoint", merge_in, "source checkpoint")->required()->check(CLI::ExistingFile);
  merge->add_option("--to", merge_to, "merged checkpoint to write")->required();

  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset to a directory");
  add_common(gen, data_c, false);
  gen->add_option("--out", data_c.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*train) {
      RunHandle run;
      load_run(train_c, run);
      if (steps > 0) check(mtlora_run_set_steps(run.p, steps));
      ModelHandle model;
      LibString report;
      check(mtlora_train(run.p, on_step, &log_every, &model.p, report.out()));
      const auto j = json::parse(report.str());
      std::printf("final loss        %.6f\n", j.at("final_loss").get<double>());
      print_metrics(j.at("report"), j.at("delta_m"));
      std::printf("seconds           %.1f\n", j.at("seconds").get<double>());
      write_report(train_c.out, report.str());
      if (!save.empty()) check(mtlora_model_save(model.p, save.c_str()));
    } else if (*eval) {
      ModelHandle model;
      check(mtlora_model_load(checkpoint.c_str(), &model.p));
      RunHandle run;
      if (eval_c.config.empty()) {
        check(mtlora_model_run(model.p, &run.p));
        if (eval_c.seed) check(mtlora_run_set_seed(run.p, *eval_c.seed));
      } else {
        load_run(eval_c, run);
      }
      LibString report;
      check(mtlora_model_evaluate(model.p, run.p, report.out()));
      const auto j = json::parse(report.str());
      print_metrics(j.at("report"), j.at("delta_m"));
      write_report(eval_c.out, report.str());
    } else if (*audit) {
      RunHandle run;
      if (preset.empty()) load_run(audit_c, run);
      LibString report, table;
      check(mtlora_audit(preset.empty() ? nullptr : preset.c_str(), run.p, strategy.c_str(), rank, report.out(),
                         table.out()));
      std::fputs(table.str().c_str(), stdout);
      write_report(audit_c.out, report.str());
    } else if (*grad) {
      double err = 0.0;
      LibString report;
      check(mtlora_gradcheck(grad_c.seed.value_or(0), &err, report.out()));
      const auto j = json::parse(report.str());
      const bool ok = err <= 1e-5;
      std::printf("checked %lld scalars, max relative error %.3e (%s), worst %s[%lld]\n",
                  static_cast<long long>(j.at("checked").get<std::int64_t>()), err, ok ? "ok" : "above 1e-5",
                  j.at("worst_parameter").get<std::string>().c_str(),
                  static_cast<long long>(j.at("worst_index").get<std::int64_t>()));
      write_report(grad_c.out, report.str());
      if (!ok) return 2;
    } else if (*merge) {
      ModelHandle model;
      check(mtlora_model_load(merge_in.c_str(), &model.p));
      check(mtlora_model_export_merged(model.p, merge_to.c_str()));
      std::printf("wrote %s\n", merge_to.c_str());
      write_report(merge_c.out, json{{"source", merge_in}, {"merged", merge_to}}.dump(2));
    } else if (*gen) {
      RunHandle run;
      load_run(data_c, run);
      check(mtlora_generate_dataset(run.p, data_c.out.c_str()));
      std::printf("wrote %s\n", data_c.out.c_str());
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << '\n';
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
