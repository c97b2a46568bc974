// Copyright 2026 The evstr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// evstr command-line tool.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 config mismatch,
// 4 numeric failure.

#include <cstdio>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "evstr/evstr.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kConfig = 3, kNumeric = 4 };

evstr::RunConfig run_config(const std::string& path, const std::string& task) {
  evstr::RunConfig cfg = path.empty() ? evstr::RunConfig::defaults(evstr::parse_task(task))
                                      : evstr::load_run_config(path);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training reallocates the same large activation buffers every step; keep
  // them on the heap instead of unmapping and faulting them back in.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Event voxel set transformer: data synthesis, training and evaluation"};
  app.require_subcommand(1);

  std::string config_path, out, task = "object";
  std::optional<std::uint64_t> seed;
  bool force = false;

  auto* synth = app.add_subcommand("synth", "render a labelled synthetic event dataset");
  synth->add_option("--config", config_path, "scene recipe (key = value)");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--seed", seed, "random seed");
  synth->add_flag("--force", force, "overwrite existing files");

  std::string events_path;
  auto* convert = app.add_subcommand("convert", "voxelize an event file into an EVX1 file");
  convert->add_option("events", events_path, "event file (.csv or .bin)")->required();
  convert->add_option("--config", config_path, "run config");
  convert->add_option("--task", task, "task defaults when no config is given")
      ->check(CLI::IsMember({"object", "action"}));
  convert->add_option("--out", out, "output EVX1 file")->required();
  convert->add_option("--seed", seed, "voxel sampling seed");

  std::optional<std::size_t> epochs;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "run config")->required();
  train->add_option("--out", out, "run directory (metrics.csv, checkpoints)")->required();
  train->add_option("--seed", seed, "random seed");
  train->add_option("--epochs", epochs, "override the configured epoch count");

  std::string checkpoint, manifest;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  eval->add_option("--checkpoint", checkpoint, "EVCK checkpoint")->required();
  eval->add_option("--manifest", manifest, "dataset manifest")->required();
  eval->add_option("--out", out, "directory for confusion.csv");

  std::string component;
  double corrupt = 1.0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("component", component, "linear, bn, mnel, vsal, s2tm or full")
      ->required()
      ->check(CLI::IsMember(evstr::gradcheck_components()));
  gradcheck->add_option("--seed", seed, "instance seed");
  gradcheck->add_option("--corrupt", corrupt, "scale analytic gradients (negative control)");

  auto* info = app.add_subcommand("info", "print layer table, parameter count and MAC estimate");
  info->add_option("--config", config_path, "run config");
  info->add_option("--task", task, "task defaults when no config is given")
      ->check(CLI::IsMember({"object", "action"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (synth->parsed()) {
      evstr::SynthConfig cfg = config_path.empty() ? evstr::SynthConfig{} : evstr::load_synth_config(config_path);
      if (seed) cfg.seed = *seed;
      const auto r = evstr::run_synth(cfg, out, force);
      std::cout << "wrote " << r.files << " event files\n"
                << r.train_manifest << "\n"
                << r.test_manifest << "\n";
    } else if (convert->parsed()) {
      evstr::RunConfig cfg = run_config(config_path, task);
      if (seed) cfg.seed = *seed;
      const auto set = evstr::run_convert(events_path, out, cfg);
      std::cout << "wrote " << set.size() << " voxels (patch " << set.patch_size << ") to " << out << "\n";
    } else if (train->parsed()) {
      evstr::RunConfig cfg = run_config(config_path, task);
      if (seed) cfg.seed = *seed;
      if (epochs) cfg.epochs = *epochs;
      evstr::run_train(cfg, out, std::cout);
    } else if (eval->parsed()) {
      evstr::run_eval(checkpoint, manifest, out, std::cout);
    } else if (gradcheck->parsed()) {
      const auto r = evstr::run_gradcheck(component, seed.value_or(0), corrupt);
      for (const auto& p : r.params) std::printf("  %-40s %zu coords  rel_err %.3e\n", p.name.c_str(), p.checked, p.max_rel_error);
      std::printf("%s %s: max relative error %.3e (tolerance %.0e)%s%s\n", r.passed ? "PASS" : "FAIL",
                  component.c_str(), r.max_rel_error, r.tol, r.message.empty() ? "" : ", ", r.message.c_str());
      return r.passed ? kOk : kNumeric;
    } else if (info->parsed()) {
      evstr::RunConfig cfg = run_config(config_path, task);
      std::cout << evstr::run_info(cfg).text;
    }
  } catch (const evstr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const evstr::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const evstr::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}
