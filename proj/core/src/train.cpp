// SPDX-License-Identifier: Apache-2.0
#include "vtr/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vtr/checkpoint.hpp"

namespace vtr {

namespace {

namespace fs = std::filesystem;

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing chars");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(str("config: key '", key, "' expects an unsigned "
                          "integer, got '", value, "'"));
  }
}

double parse_f64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing chars");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(str("config: key '", key, "' expects a number, got '",
                          value, "'"));
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") {
    return true;
  }
  if (value == "false" || value == "0" || value == "off" || value == "no") {
    return false;
  }
  throw ConfigError(str("config: key '", key, "' expects a boolean, got '",
                        value, "'"));
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void check_compat(const ModelConfig& m, const data::Dataset& ds) {
  if (ds.n_frames != m.n_frames || ds.height != m.frame_h ||
      ds.width != m.frame_w || ds.n_tokens != m.n_tokens ||
      ds.vocab != m.vocab) {
    throw ConfigError(str(
        "dataset/model mismatch: dataset frames=", ds.n_frames, " ",
        ds.height, "x", ds.width, " tokens=", ds.n_tokens, " vocab=",
        ds.vocab, " vs model frames=", m.n_frames, " ", m.frame_h, "x",
        m.frame_w, " tokens=", m.n_tokens, " vocab=", m.vocab));
  }
}

std::vector<std::vector<double>> unit_rows_of(const Tensor& t) {
  const std::size_t rows = t.shape()[0], d = t.shape()[1];
  std::vector<std::vector<double>> out(rows);
  const auto& v = t.values();
  for (std::size_t r = 0; r < rows; ++r) {
    out[r].assign(v.begin() + r * d, v.begin() + (r + 1) * d);
  }
  return out;
}

nlohmann::json report_fields(const RetrievalReport& r) {
  return nlohmann::json::parse(report_json(r));
}

std::string row_dir_name(const std::string& row_name) {
  std::string out = "row_" + row_name;
  std::replace(out.begin(), out.end(), '+', '_');
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  distill.validate();
  data::GenerateSpec gen = generation_spec();
  gen.validate();
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (k + 1 > batch_size) {
    throw ConfigError(str("train.k = ", k, " must be <= batch_size - 1 = ",
                          batch_size - 1));
  }
  if (flags.fusion && k < 1) {
    throw ConfigError("train.k must be >= 1 when fusion is enabled");
  }
  if (!(lr_base > 0.0)) throw ConfigError("train.lr_base must be positive");
  if (!(lr_new > 0.0)) throw ConfigError("train.lr_new must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) {
    throw ConfigError("train.beta1 must be in [0, 1)");
  }
  if (!(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.beta2 must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (early_stop_r1 < 0.0 || early_stop_r1 > 1.0) {
    throw ConfigError("train.early_stop_r1 must be in [0, 1]");
  }
  if (holdout_fraction < 0.0 || holdout_fraction > 0.9) {
    throw ConfigError("train.holdout_fraction must be in [0, 0.9]");
  }
  if (model.vocab != data::builtin_vocab_size()) {
    throw ConfigError(str("model.vocab = ", model.vocab,
                          " must match the built-in vocabulary size ",
                          data::builtin_vocab_size()));
  }
}

data::GenerateSpec ExperimentConfig::generation_spec() const {
  data::GenerateSpec gen = data;
  gen.n_frames = model.n_frames;
  gen.n_tokens = model.n_tokens;
  gen.height = model.frame_h;
  gen.width = model.frame_w;
  return gen;
}

void apply_override(ExperimentConfig& c, const std::string& key,
                    const std::string& value) {
  if (key == "model.frame_h") c.model.frame_h = parse_u64(key, value);
  else if (key == "model.frame_w") c.model.frame_w = parse_u64(key, value);
  else if (key == "model.patch") c.model.patch = parse_u64(key, value);
  else if (key == "model.n_frames") c.model.n_frames = parse_u64(key, value);
  else if (key == "model.n_tokens") c.model.n_tokens = parse_u64(key, value);
  else if (key == "model.vocab") c.model.vocab = parse_u64(key, value);
  else if (key == "model.d_video") c.model.d_video = parse_u64(key, value);
  else if (key == "model.d_text") c.model.d_text = parse_u64(key, value);
  else if (key == "model.d_shared") c.model.d_shared = parse_u64(key, value);
  else if (key == "model.heads") c.model.heads = parse_u64(key, value);
  else if (key == "model.mlp_ratio") c.model.mlp_ratio = parse_u64(key, value);
  else if (key == "model.video_layers") {
    c.model.video_layers = parse_u64(key, value);
  } else if (key == "model.text_layers") {
    c.model.text_layers = parse_u64(key, value);
  } else if (key == "model.temporal_layers") {
    c.model.temporal_layers = parse_u64(key, value);
  } else if (key == "model.fusion_layers") {
    c.model.fusion_layers = parse_u64(key, value);
  } else if (key == "distill.alpha") {
    c.distill.alpha = parse_f64(key, value);
  } else if (key == "distill.momentum") {
    c.distill.momentum = parse_f64(key, value);
  } else if (key == "distill.queue_capacity") {
    c.distill.queue_capacity = parse_u64(key, value);
  } else if (key == "train.batch_size") {
    c.batch_size = parse_u64(key, value);
  } else if (key == "train.epochs") {
    c.epochs = parse_u64(key, value);
  } else if (key == "train.k") {
    c.k = parse_u64(key, value);
  } else if (key == "train.lr_base") {
    c.lr_base = parse_f64(key, value);
  } else if (key == "train.lr_new") {
    c.lr_new = parse_f64(key, value);
  } else if (key == "train.beta1") {
    c.beta1 = parse_f64(key, value);
  } else if (key == "train.beta2") {
    c.beta2 = parse_f64(key, value);
  } else if (key == "train.adam_eps") {
    c.adam_eps = parse_f64(key, value);
  } else if (key == "train.seed") {
    c.seed = parse_u64(key, value);
  } else if (key == "train.eval_every") {
    c.eval_every = parse_u64(key, value);
  } else if (key == "train.early_stop_r1") {
    c.early_stop_r1 = parse_f64(key, value);
  } else if (key == "train.holdout_fraction") {
    c.holdout_fraction = parse_f64(key, value);
  } else if (key == "train.log_timing") {
    c.log_timing = parse_bool(key, value);
  } else if (key == "flags.temporal") {
    c.flags.temporal = parse_bool(key, value);
  } else if (key == "flags.distill") {
    c.flags.distill = parse_bool(key, value);
  } else if (key == "flags.fusion") {
    c.flags.fusion = parse_bool(key, value);
  } else if (key == "flags.dual_softmax") {
    c.flags.dual_softmax = parse_bool(key, value);
  } else if (key == "data.concepts") {
    c.data.concepts = parse_u64(key, value);
  } else if (key == "data.per_concept") {
    c.data.per_concept = parse_u64(key, value);
  } else if (key == "data.jitter") {
    c.data.jitter = parse_f64(key, value);
  } else if (key == "paths.dataset") {
    c.dataset_path = value;
  } else if (key == "paths.out_dir") {
    c.out_dir = value;
  } else {
    throw ConfigError(str("config: unknown key '", key, "'"));
  }
}

std::vector<std::string> config_keys() {
  return {"model.frame_h", "model.frame_w", "model.patch", "model.n_frames",
          "model.n_tokens", "model.vocab", "model.d_video", "model.d_text",
          "model.d_shared", "model.heads", "model.mlp_ratio",
          "model.video_layers", "model.text_layers", "model.temporal_layers",
          "model.fusion_layers", "distill.alpha", "distill.momentum",
          "distill.queue_capacity", "train.batch_size", "train.epochs",
          "train.k", "train.lr_base", "train.lr_new", "train.beta1",
          "train.beta2", "train.adam_eps", "train.seed", "train.eval_every",
          "train.early_stop_r1", "train.holdout_fraction", "train.log_timing",
          "flags.temporal", "flags.distill", "flags.fusion",
          "flags.dual_softmax", "data.concepts", "data.per_concept",
          "data.jitter", "paths.dataset", "paths.out_dir"};
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  ExperimentConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw IoError(str("config: cannot open ", path.string()));
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw ConfigError(str("config: malformed section at line ", line_no));
      }
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(str("config: expected key=value at line ", line_no,
                            ": '", t, "'"));
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const std::string full =
        key.find('.') != std::string::npos || section.empty()
            ? key
            : section + "." + key;
    apply_override(cfg, full, value);
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides) {
  ExperimentConfig cfg = parse_config_file(path);
  for (const std::string& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(str("config: override '", item,
                            "' is not key=value"));
    }
    apply_override(cfg, trim(item.substr(0, eq)), trim(item.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

// ---- optimizer ----

LrGroup lr_group_for(const std::string& name) {
  // "new layers": frame positions, temporal and fusion stacks, matching
  // head; everything initialized from the base encoders stays base.
  for (const char* prefix : {"frame_pos", "temporal.", "fusion.", "match."}) {
    if (name.rfind(prefix, 0) == 0) return LrGroup::kNewLayers;
  }
  return LrGroup::kBase;
}

void adam_step(std::vector<std::pair<std::string, Tensor>>& params,
               AdamState& state, const AdamSettings& s) {
  ++state.step;
  const double bc1 =
      1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double bc2 =
      1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  for (auto& [name, tensor] : params) {
    auto& slot = state.slots[name];
    auto& vals = tensor.mutable_values();
    if (slot.m.empty()) {
      slot.m.assign(vals.size(), 0.0);
      slot.v.assign(vals.size(), 0.0);
    }
    if (slot.m.size() != vals.size()) {
      throw ShapeError(str("adam: state size ", slot.m.size(),
                           " vs parameter '", name, "' size ", vals.size()));
    }
    const double lr =
        lr_group_for(name) == LrGroup::kBase ? s.lr_base : s.lr_new;
    const std::vector<double>* grad =
        tensor.has_grad() ? &tensor.grad() : nullptr;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double g = grad ? (*grad)[i] : 0.0;
      slot.m[i] = s.beta1 * slot.m[i] + (1.0 - s.beta1) * g;
      slot.v[i] = s.beta2 * slot.v[i] + (1.0 - s.beta2) * g * g;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      vals[i] -= lr * mhat / (std::sqrt(vhat) + s.eps);
    }
    tensor.zero_grad();
  }
}

// ---- batch encoding ----

EncodedBatch encode_batch(const ModelState& state, const data::Dataset& ds,
                          const data::Batch& batch, bool use_temporal) {
  const ModelConfig& cfg = state.config;
  EncodedBatch out;
  std::vector<Tensor> v_rows, w_rows;
  v_rows.reserve(batch.indices.size());
  w_rows.reserve(batch.indices.size());
  for (std::size_t idx : batch.indices) {
    const data::Sample& sample = ds.samples.at(idx);
    Tensor frames = Tensor::leaf({cfg.n_frames, cfg.frame_h, cfg.frame_w},
                                 sample.video, false);
    Tensor v_emb = encode_video_embeddings(frames, state, use_temporal);
    v_rows.push_back(
        reshape(video_representation(v_emb), {1, cfg.d_shared}));
    out.video_embs.push_back(std::move(v_emb));
    TextEncoding te = encode_text(sample.caption, state);
    w_rows.push_back(reshape(te.rep, {1, cfg.d_shared}));
    out.texts.push_back(std::move(te));
  }
  out.v = l2_normalize(concat(std::span<const Tensor>(v_rows), 0), 1);
  out.w = l2_normalize(concat(std::span<const Tensor>(w_rows), 0), 1);
  return out;
}

// ---- evaluation ----

EvalResult evaluate_model(const ModelState& state, const data::Dataset& ds,
                          bool use_temporal, bool apply_dual) {
  check_compat(state.config, ds);
  const std::size_t n = ds.size();
  if (n == 0) throw ConfigError("evaluate: empty dataset");
  std::vector<std::vector<double>> vreps, wreps;
  vreps.reserve(n);
  wreps.reserve(n);
  const ModelConfig& cfg = state.config;
  for (const data::Sample& sample : ds.samples) {
    Tensor frames = Tensor::leaf({cfg.n_frames, cfg.frame_h, cfg.frame_w},
                                 sample.video, false);
    Tensor v = l2_normalize(
        video_representation(
            encode_video_embeddings(frames, state, use_temporal)),
        0);
    vreps.push_back(v.values());
    Tensor w = l2_normalize(encode_text(sample.caption, state).rep, 0);
    wreps.push_back(w.values());
  }
  EvalResult out;
  out.sim = SimMatrix::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cfg.d_shared; ++c) {
        dot += vreps[i][c] * wreps[j][c];
      }
      out.sim.at(i, j) = dot;
    }
  }
  auto [t2v, v2t] = evaluate(out.sim, apply_dual);
  out.t2v = t2v;
  out.v2t = v2t;
  return out;
}

EvalResult evaluate_checkpoint(const std::filesystem::path& checkpoint,
                               const data::Dataset& ds, bool apply_dual) {
  LoadedCheckpoint loaded = load_checkpoint(checkpoint, false);
  return evaluate_model(loaded.state, ds, loaded.flags.temporal, apply_dual);
}

data::Dataset obtain_dataset(const ExperimentConfig& config) {
  if (config.dataset_path.empty()) {
    return data::generate(config.generation_spec(), config.seed);
  }
  data::Dataset ds = data::load_dataset(config.dataset_path);
  check_compat(config.model, ds);
  return ds;
}

// ---- training loop ----

TrainResult train(const ExperimentConfig& config) {
  config.validate();
  const data::Dataset full = obtain_dataset(config);
  check_compat(config.model, full);

  data::Dataset train_ds = full;
  data::Dataset eval_ds = full;
  if (config.holdout_fraction > 0.0) {
    const auto held = static_cast<std::size_t>(
        std::ceil(config.holdout_fraction * static_cast<double>(full.size())));
    if (held == 0 || held >= full.size()) {
      throw ConfigError("train: holdout split leaves an empty side");
    }
    train_ds.samples.assign(full.samples.begin(),
                            full.samples.end() - static_cast<long>(held));
    eval_ds.samples.assign(full.samples.end() - static_cast<long>(held),
                           full.samples.end());
  }
  if (config.batch_size > train_ds.size()) {
    throw ConfigError(str("train: batch size ", config.batch_size,
                          " exceeds training split size ", train_ds.size()));
  }

  fs::create_directories(config.out_dir);
  const fs::path out_dir(config.out_dir);
  const fs::path log_path = out_dir / "train_log.jsonl";
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw IoError(str("train: cannot write ", log_path.string()));

  ModelState student = ModelState::init(config.model, config.seed);
  std::optional<ModelState> teacher;
  if (config.flags.distill) teacher = student.clone(false);
  RepresentationQueue queue_v(config.distill.queue_capacity,
                              config.model.d_shared);
  RepresentationQueue queue_t(config.distill.queue_capacity,
                              config.model.d_shared);
  AdamState adam;
  const AdamSettings adam_settings{config.lr_base, config.lr_new,
                                   config.beta1, config.beta2,
                                   config.adam_eps};
  auto params = student.named_parameters();

  TrainResult result;
  result.log_path = log_path.string();
  std::string last_ckpt;
  std::size_t step = 0;
  bool stop = false;

  for (std::size_t epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    const auto epoch_batches =
        data::batches(train_ds, config.batch_size,
                      mix_seed(config.seed, 0xe90c0000ULL + epoch), true);
    for (const data::Batch& batch : epoch_batches) {
      const auto t0 = std::chrono::steady_clock::now();
      LossReport rep;
      try {
        EncodedBatch fwd =
            encode_batch(student, train_ds, batch, config.flags.temporal);
        BatchForward bf;
        bf.v = fwd.v;
        bf.w = fwd.w;
        bf.inv_tau = student.inv_temperature();
        if (config.flags.distill) {
          EncodedBatch teacher_fwd =
              encode_batch(*teacher, train_ds, batch, config.flags.temporal);
          bf.teacher_v = unit_rows_of(teacher_fwd.v);
          bf.teacher_w = unit_rows_of(teacher_fwd.w);
        }
        LossOptions options;
        options.distill = config.flags.distill;
        options.fusion = config.flags.fusion;
        options.k = config.k;
        options.alpha = config.distill.alpha;
        PairScorer scorer;
        if (config.flags.fusion) {
          scorer = [&fwd, &student](std::size_t vi, std::size_t ti) {
            const TextEncoding& te = fwd.texts[ti];
            Tensor f = fuse(fwd.video_embs[vi], te.tokens, te.eos_index,
                            te.mask, student);
            return matching_score(f, student);
          };
        }
        rep = training_loss(bf, options, queue_v, queue_t, scorer);
        if (!std::isfinite(rep.total)) {
          throw TrainAbort(str("train: non-finite loss at step ", step,
                               "; last good checkpoint: ",
                               last_ckpt.empty() ? "none" : last_ckpt));
        }
        backward(rep.loss);
      } catch (const DomainError& e) {
        throw TrainAbort(str("train: numeric failure at step ", step, " (",
                             e.what(), "); last good checkpoint: ",
                             last_ckpt.empty() ? "none" : last_ckpt));
      }
      if (config.flags.distill) {
        ema_update(*teacher, student, config.distill.momentum);
      }
      adam_step(params, adam, adam_settings);
      student.clamp_temperature();

      nlohmann::json record{{"type", "step"},
                            {"step", step},
                            {"epoch", epoch},
                            {"l_vta", rep.l_vta},
                            {"l_vtm", rep.l_vtm},
                            {"total", rep.total},
                            {"tau", rep.tau},
                            {"fusion_pairs", rep.fusion_pairs}};
      if (config.log_timing) {
        record["wall_ms"] =
            std::chrono::duration<double, std::milli>(
                std::chrono::steady_clock::now() - t0)
                .count();
      }
      log << record.dump() << '\n';
      ++step;
    }

    for (const auto& [pname, tensor] : params) {
      for (double v : tensor.values()) {
        if (!std::isfinite(v)) {
          throw TrainAbort(str("train: non-finite parameter '", pname,
                               "' after epoch ", epoch,
                               "; last good checkpoint: ",
                               last_ckpt.empty() ? "none" : last_ckpt));
        }
      }
    }
    std::ostringstream name;
    name << "checkpoint_epoch_";
    name.width(4);
    name.fill('0');
    name << (epoch + 1);
    name << ".ckpt";
    const fs::path ckpt_path = out_dir / name.str();
    save_checkpoint(ckpt_path, student, config.flags);
    last_ckpt = ckpt_path.string();
    // filename only: logs stay byte-identical across relocated out dirs
    log << nlohmann::json{{"type", "checkpoint"},
                          {"epoch", epoch},
                          {"file", name.str()}}
               .dump()
        << '\n';
    result.epochs_run = epoch + 1;

    const bool final_epoch = epoch + 1 == config.epochs;
    if ((epoch + 1) % config.eval_every == 0 || final_epoch) {
      EvalResult ev;
      try {
        ev = evaluate_model(student, eval_ds, config.flags.temporal, false);
      } catch (const DomainError& e) {
        throw TrainAbort(str("train: numeric failure in evaluation after "
                             "epoch ", epoch, " (", e.what(),
                             "); last good checkpoint: ", last_ckpt));
      }
      log << nlohmann::json{{"type", "eval"},
                            {"epoch", epoch},
                            {"dual", false},
                            {"t2v", report_fields(ev.t2v)},
                            {"v2t", report_fields(ev.v2t)}}
                 .dump()
          << '\n';
      if (config.flags.dual_softmax) {
        auto [t2v_dual, v2t_dual] = evaluate(ev.sim, true);
        log << nlohmann::json{{"type", "eval"},
                              {"epoch", epoch},
                              {"dual", true},
                              {"t2v", report_fields(t2v_dual)},
                              {"v2t", report_fields(v2t_dual)}}
                   .dump()
            << '\n';
      }
      result.last_eval = ev;
      if (config.early_stop_r1 > 0.0 &&
          std::min(ev.t2v.r1, ev.v2t.r1) >= config.early_stop_r1) {
        log << nlohmann::json{{"type", "early_stop"},
                              {"epoch", epoch},
                              {"r1_t2v", ev.t2v.r1},
                              {"r1_v2t", ev.v2t.r1}}
                   .dump()
            << '\n';
        stop = true;
      }
    }
  }

  result.final_checkpoint = last_ckpt;
  result.steps = step;
  return result;
}

// ---- ablation harness ----

std::vector<AblationRow> ablation_rows() {
  auto row = [](const char* name, bool temporal, bool distill, bool fusion,
                bool dual) {
    AblationRow r;
    r.name = name;
    r.flags = AblationFlags{temporal, distill, fusion, dual};
    return r;
  };
  return {row("base", false, false, false, false),
          row("base+md", false, true, false, false),
          row("base+fusion", false, false, true, false),
          row("base+md+fusion", false, true, true, false),
          row("base+temp+fusion", true, false, true, false),
          row("base+md+dual", false, true, false, true),
          row("base+temp+md+fusion", true, true, true, false),
          row("base+temp+fusion+dual", true, false, true, true)};
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& config) {
  ExperimentConfig base = config;
  base.validate();
  fs::create_directories(base.out_dir);
  if (base.dataset_path.empty()) {
    const fs::path ds_path = fs::path(base.out_dir) / "ablation_data.vtds";
    data::save_dataset(ds_path,
                       data::generate(base.generation_spec(), base.seed));
    base.dataset_path = ds_path.string();
  }
  const data::Dataset ds = data::load_dataset(base.dataset_path);

  std::vector<AblationRow> rows = ablation_rows();
  // trained (temporal, distill, fusion) combinations -> row index
  auto key_of = [](const AblationFlags& f) {
    return (f.temporal ? 4 : 0) | (f.distill ? 2 : 0) | (f.fusion ? 1 : 0);
  };
  std::map<int, std::size_t> trained;
  for (AblationRow& row : rows) {
    const int key = key_of(row.flags);
    if (row.flags.dual_softmax && trained.count(key)) {
      const AblationRow& twin = rows[trained.at(key)];
      row.trained = false;
      row.checkpoint = twin.checkpoint;
      row.source_row = twin.name;
      EvalResult ev = evaluate_checkpoint(row.checkpoint, ds, true);
      row.t2v = ev.t2v;
      row.v2t = ev.v2t;
      continue;
    }
    ExperimentConfig rcfg = base;
    rcfg.flags = row.flags;
    rcfg.flags.dual_softmax = false;  // dual never touches training
    rcfg.dataset_path = base.dataset_path;
    rcfg.out_dir =
        (fs::path(base.out_dir) / row_dir_name(row.name)).string();
    TrainResult tr = train(rcfg);
    row.trained = true;
    row.checkpoint = tr.final_checkpoint;
    EvalResult ev =
        evaluate_checkpoint(row.checkpoint, ds, row.flags.dual_softmax);
    row.t2v = ev.t2v;
    row.v2t = ev.v2t;
    if (!row.flags.dual_softmax) {
      trained.emplace(key_of(row.flags), &row - rows.data());
    }
  }
  return rows;
}

std::string ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const AblationRow& r : rows) {
    out.push_back(nlohmann::json{
        {"name", r.name},
        {"flags",
         {{"temporal", r.flags.temporal},
          {"distill", r.flags.distill},
          {"fusion", r.flags.fusion},
          {"dual_softmax", r.flags.dual_softmax}}},
        {"trained", r.trained},
        {"checkpoint", r.checkpoint},
        {"source_row", r.source_row},
        {"t2v", report_fields(r.t2v)},
        {"v2t", report_fields(r.v2t)}});
  }
  return out.dump(2);
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "row                     temp md  fus  dual | t2v R@1   R@5   R@10  "
        "MdR   MnR  | v2t R@1\n";
  auto mark = [](bool b) { return b ? "y   " : ".   "; };
  for (const AblationRow& r : rows) {
    os.width(24);
    os.setf(std::ios::left);
    os << r.name;
    os.unsetf(std::ios::left);
    os << mark(r.flags.temporal) << mark(r.flags.distill)
       << mark(r.flags.fusion) << mark(r.flags.dual_softmax) << "|   ";
    os.precision(3);
    os << std::fixed;
    os << r.t2v.r1 << " " << r.t2v.r5 << " " << r.t2v.r10 << " ";
    os.precision(1);
    os << r.t2v.mdr << "  " << r.t2v.mnr << "  |   ";
    os.precision(3);
    os << r.v2t.r1;
    os.unsetf(std::ios::fixed);
    os << (r.trained ? "" : str("   (reuses ", r.source_row, ")")) << "\n";
  }
  return os.str();
}

}  // namespace vtr
