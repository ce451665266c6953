// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: synthetic data generation, training, evaluation,
// the ablation grid, and similarity-matrix export.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vtr/checkpoint.hpp"
#include "vtr/train.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("-c,--config", opts.config_path,
                  "sectioned key=value config file");
  cmd->add_option("--set", opts.overrides,
                  "override as section.key=value (repeatable)");
}

void print_report(const vtr::RetrievalReport& r) {
  std::printf("  %s  R@1 %.4f  R@5 %.4f  R@10 %.4f  MdR %.1f  MnR %.2f\n",
              vtr::direction_name(r.direction).c_str(), r.r1, r.r5, r.r10,
              r.mdr, r.mnr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw vtr::IoError("cannot write " + path.string());
  out << text << '\n';
}

int run_generate(const CommonOpts& opts, const std::string& out_path) {
  vtr::ExperimentConfig cfg = vtr::load_config(opts.config_path,
                                               opts.overrides);
  std::string path = out_path.empty() ? cfg.dataset_path : out_path;
  if (path.empty()) path = "data.vtds";
  const vtr::data::Dataset ds =
      vtr::data::generate(cfg.generation_spec(), cfg.seed);
  vtr::data::save_dataset(path, ds);
  const auto v = vtr::data::validate_dataset(ds);
  std::printf("wrote %zu samples (%zu concepts) to %s\n", ds.size(),
              ds.concepts, path.c_str());
  std::printf("concept separation %.3f, template accuracy %.4f\n",
              v.min_concept_distance, v.classification_accuracy);
  return 0;
}

int run_train(const CommonOpts& opts) {
  vtr::ExperimentConfig cfg = vtr::load_config(opts.config_path,
                                               opts.overrides);
  const vtr::TrainResult result = vtr::train(cfg);
  std::printf("trained %zu steps over %zu epochs\n", result.steps,
              result.epochs_run);
  std::printf("final checkpoint: %s\n", result.final_checkpoint.c_str());
  std::printf("log: %s\n", result.log_path.c_str());
  if (result.last_eval) {
    std::printf("last evaluation:\n");
    print_report(result.last_eval->t2v);
    print_report(result.last_eval->v2t);
  }
  return 0;
}

int run_evaluate(const std::string& checkpoint, const std::string& data_path,
                 bool dual, const std::string& out_prefix) {
  const vtr::data::Dataset ds = vtr::data::load_dataset(data_path);
  const vtr::EvalResult ev = vtr::evaluate_checkpoint(checkpoint, ds, dual);
  std::printf("evaluated %zu pairs (dual %s)\n", ds.size(),
              dual ? "on" : "off");
  print_report(ev.t2v);
  print_report(ev.v2t);
  write_text(out_prefix + "_report.json",
             vtr::evaluation_json(ev.t2v, ev.v2t, dual));
  vtr::save_simmat(out_prefix + "_sim.bin", ev.sim);
  vtr::save_simmat_csv(out_prefix + "_sim.csv", ev.sim);
  std::printf("wrote %s_report.json, %s_sim.bin, %s_sim.csv\n",
              out_prefix.c_str(), out_prefix.c_str(), out_prefix.c_str());
  return 0;
}

int run_ablate(const CommonOpts& opts) {
  vtr::ExperimentConfig cfg = vtr::load_config(opts.config_path,
                                               opts.overrides);
  const auto rows = vtr::run_ablation(cfg);
  const std::string table = vtr::ablation_table(rows);
  std::fputs(table.c_str(), stdout);
  const fs::path out = fs::path(cfg.out_dir) / "ablation.json";
  write_text(out, vtr::ablation_json(rows));
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

int run_export_sim(const std::string& checkpoint,
                   const std::string& data_path, bool dual,
                   const std::string& out_prefix) {
  const vtr::data::Dataset ds = vtr::data::load_dataset(data_path);
  const vtr::EvalResult ev = vtr::evaluate_checkpoint(checkpoint, ds, false);
  vtr::save_simmat(out_prefix + ".bin", ev.sim);
  vtr::save_simmat_csv(out_prefix + ".csv", ev.sim);
  std::printf("wrote %s.bin, %s.csv (%zux%zu)\n", out_prefix.c_str(),
              out_prefix.c_str(), ev.sim.rows, ev.sim.cols);
  if (dual) {
    const vtr::SimMatrix revised = vtr::dual_softmax(ev.sim);
    vtr::save_simmat(out_prefix + ".dual.bin", revised);
    vtr::save_simmat_csv(out_prefix + ".dual.csv", revised);
    std::printf("wrote %s.dual.bin, %s.dual.csv\n", out_prefix.c_str(),
                out_prefix.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"video-text retrieval trainer and evaluation harness"};
  app.require_subcommand(1);

  CommonOpts gen_opts;
  std::string gen_out;
  CLI::App* gen = app.add_subcommand("generate-data",
                                     "render a synthetic paired dataset");
  add_common(gen, gen_opts);
  gen->add_option("-o,--out", gen_out, "output dataset path");

  CommonOpts train_opts;
  CLI::App* tr = app.add_subcommand("train", "run the training loop");
  add_common(tr, train_opts);

  std::string eval_ckpt, eval_data, eval_out = "eval";
  bool eval_dual = false;
  CLI::App* ev = app.add_subcommand("evaluate",
                                    "score a checkpoint on a dataset");
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--data", eval_data, "dataset file")->required();
  ev->add_flag("--dual", eval_dual, "apply the dual-softmax reviser");
  ev->add_option("-o,--out", eval_out, "output prefix");

  CommonOpts ablate_opts;
  CLI::App* ab = app.add_subcommand("ablate",
                                    "train and evaluate the toggle grid");
  add_common(ab, ablate_opts);

  std::string exp_ckpt, exp_data, exp_out = "sim";
  bool exp_dual = false;
  CLI::App* ex = app.add_subcommand("export-sim",
                                    "export the similarity matrix");
  ex->add_option("--checkpoint", exp_ckpt, "checkpoint file")->required();
  ex->add_option("--data", exp_data, "dataset file")->required();
  ex->add_flag("--dual", exp_dual, "also export the revised matrix");
  ex->add_option("-o,--out", exp_out, "output prefix");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return run_generate(gen_opts, gen_out);
    if (tr->parsed()) return run_train(train_opts);
    if (ev->parsed()) {
      return run_evaluate(eval_ckpt, eval_data, eval_dual, eval_out);
    }
    if (ab->parsed()) return run_ablate(ablate_opts);
    if (ex->parsed()) {
      return run_export_sim(exp_ckpt, exp_data, exp_dual, exp_out);
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const vtr::TrainAbort& e) {
    std::fprintf(stderr, "aborted: %s\n", e.what());
    return 2;
  } catch (const vtr::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const vtr::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
