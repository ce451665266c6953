// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vtr/data.hpp"
#include "vtr/metrics.hpp"
#include "vtr/model.hpp"
#include "vtr/objectives.hpp"

namespace vtr {

struct ExperimentConfig {
  ModelConfig model;
  DistillConfig distill;
  data::GenerateSpec data;  // frame/token dims are taken from `model`

  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  std::size_t k = 3;  // hard negatives per anchor
  double lr_base = 1e-3;
  double lr_new = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 42;
  std::size_t eval_every = 1;    // epochs between eval snapshots
  double early_stop_r1 = 0.0;    // stop once min(R@1) reaches this; 0 = off
  double holdout_fraction = 0.0; // evaluate on a held-out tail instead
  bool log_timing = false;       // wall time makes logs non-reproducible

  AblationFlags flags;
  std::string dataset_path;  // empty: generate in memory from `data`
  std::string out_dir = "out";

  void validate() const;
  data::GenerateSpec generation_spec() const;
};

/// Sectioned key=value config file; unknown keys are errors. Returns the
/// defaults when `path` is empty. Does not validate.
ExperimentConfig parse_config_file(const std::filesystem::path& path);
/// "section.key=value" override, same registry as the file parser.
void apply_override(ExperimentConfig& config, const std::string& key,
                    const std::string& value);
std::vector<std::string> config_keys();
/// File, then overrides ("section.key=value"), then validation.
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides);

// ---- optimizer ----

enum class LrGroup { kBase, kNewLayers };
LrGroup lr_group_for(const std::string& parameter_name);

struct AdamState {
  struct Slot {
    std::vector<double> m, v;
  };
  std::uint64_t step = 0;
  std::map<std::string, Slot> slots;
};

struct AdamSettings {
  double lr_base = 1e-3;
  double lr_new = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam step over named parameters; a parameter with
/// no gradient recorded counts as zero gradient. Grads are consumed
/// (zeroed) afterwards.
void adam_step(std::vector<std::pair<std::string, Tensor>>& params,
               AdamState& state, const AdamSettings& settings);

// ---- batch encoding ----

struct EncodedBatch {
  Tensor v;  // [B x D] unit rows
  Tensor w;
  std::vector<Tensor> video_embs;       // per-sample [N_v x D]
  std::vector<TextEncoding> texts;      // per-sample
};

EncodedBatch encode_batch(const ModelState& state, const data::Dataset& ds,
                          const data::Batch& batch, bool use_temporal);

// ---- runs ----

struct EvalResult {
  RetrievalReport t2v;
  RetrievalReport v2t;
  SimMatrix sim;  // raw cosine matrix, before any dual revision
};

EvalResult evaluate_model(const ModelState& state, const data::Dataset& ds,
                          bool use_temporal, bool apply_dual);
EvalResult evaluate_checkpoint(const std::filesystem::path& checkpoint,
                               const data::Dataset& ds, bool apply_dual);

struct TrainResult {
  std::string final_checkpoint;
  std::string log_path;
  std::size_t steps = 0;
  std::size_t epochs_run = 0;
  std::optional<EvalResult> last_eval;
};

/// Full training loop: Adam with two learning-rate groups, optional
/// momentum distillation with queues, optional fusion matching with
/// hard negatives. Writes a JSONL log and one checkpoint per epoch.
/// Bit-reproducible for a fixed (config, seed).
TrainResult train(const ExperimentConfig& config);

data::Dataset obtain_dataset(const ExperimentConfig& config);

// ---- ablation harness ----

struct AblationRow {
  std::string name;
  AblationFlags flags;
  bool trained = false;       // false: checkpoint reused from source_row
  std::string checkpoint;
  std::string source_row;     // set when the checkpoint was reused
  RetrievalReport t2v, v2t;
};

/// The eight-row toggle grid; dual rows re-evaluate the matching
/// non-dual row's checkpoint instead of retraining.
std::vector<AblationRow> ablation_rows();
std::vector<AblationRow> run_ablation(const ExperimentConfig& config);
std::string ablation_json(const std::vector<AblationRow>& rows);
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace vtr
