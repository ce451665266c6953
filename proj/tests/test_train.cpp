// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "vtr/checkpoint.hpp"
#include "vtr/train.hpp"

using namespace vtr;

namespace {

namespace fs = std::filesystem;

ExperimentConfig tiny_config(const fs::path& out_dir) {
  ExperimentConfig c;
  c.model.frame_h = 8;
  c.model.frame_w = 8;
  c.model.patch = 4;
  c.model.n_frames = 2;
  c.model.n_tokens = 8;
  c.model.vocab = data::builtin_vocab_size();
  c.model.d_video = 8;
  c.model.d_text = 8;
  c.model.d_shared = 8;
  c.model.heads = 2;
  c.model.mlp_ratio = 2;
  c.model.video_layers = 1;
  c.model.text_layers = 1;
  c.model.temporal_layers = 1;
  c.model.fusion_layers = 1;
  c.data.concepts = 8;
  c.data.per_concept = 1;
  c.distill.queue_capacity = 8;
  c.batch_size = 4;
  c.epochs = 1;
  c.k = 1;
  c.seed = 77;
  c.out_dir = out_dir.string();
  return c;
}

fs::path temp_dir() {
  static int counter = 0;
  auto dir = fs::temp_directory_path() /
             str("vtr_train_test_", ::getpid(), "_", counter++);
  fs::create_directories(dir);
  return dir;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<nlohmann::json> log_records(const fs::path& p,
                                        const std::string& type) {
  std::ifstream in(p);
  REQUIRE(in);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.at("type") == type) out.push_back(j);
  }
  return out;
}

}  // namespace

TEST_CASE("config parsing: defaults, file, overrides, unknown keys") {
  const auto dir = temp_dir();

  SUBCASE("empty path yields valid defaults") {
    ExperimentConfig cfg = load_config("", {});
    CHECK(cfg.distill.alpha == 0.4);
    CHECK(cfg.distill.momentum == 0.995);
    CHECK(cfg.batch_size == 16);
    CHECK(cfg.k == 3);
  }
  SUBCASE("file values load and flags override them") {
    const auto path = dir / "exp.cfg";
    std::ofstream out(path);
    out << "# experiment\n[distill]\nalpha = 0.4\n\n[train]\nbatch_size = 8\n"
        << "[flags]\nfusion = true\n";
    out.close();
    ExperimentConfig from_file = load_config(path, {});
    CHECK(from_file.distill.alpha == 0.4);
    CHECK(from_file.batch_size == 8);
    CHECK(from_file.flags.fusion);
    ExperimentConfig overridden = load_config(path, {"distill.alpha=0.0"});
    CHECK(overridden.distill.alpha == 0.0);
  }
  SUBCASE("unknown keys and bad types name the key") {
    const auto path = dir / "bad.cfg";
    std::ofstream(path) << "[train]\nbatch_sise = 8\n";
    CHECK_THROWS_WITH_AS(load_config(path, {}),
                         doctest::Contains("batch_sise"), ConfigError);
    std::ofstream(path, std::ios::trunc) << "[train]\nepochs = soon\n";
    CHECK_THROWS_WITH_AS(load_config(path, {}),
                         doctest::Contains("train.epochs"), ConfigError);
  }
  SUBCASE("k = batch_size violates the invariant") {
    ExperimentConfig cfg = tiny_config(dir);
    cfg.k = cfg.batch_size;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  fs::remove_all(dir);
}

TEST_CASE("adam_step") {
  auto named = [](Tensor t) {
    std::vector<std::pair<std::string, Tensor>> p;
    p.emplace_back("video_proj", t);
    return p;
  };

  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor p = Tensor::leaf({3}, {1.0, -2.0, 0.5}, true);
    auto params = named(p);
    AdamState state;
    adam_step(params, state, {});
    CHECK(p.values() == std::vector<double>{1.0, -2.0, 0.5});
    CHECK(state.step == 1);
  }
  SUBCASE("first step moves by about lr against the gradient sign") {
    Tensor p = Tensor::leaf({2}, {0.0, 0.0}, true);
    backward(sum_all(mul(p, Tensor::leaf({2}, {3.0, -0.25}))));
    auto params = named(p);
    AdamState state;
    AdamSettings s;
    s.lr_base = 1e-3;
    adam_step(params, state, s);
    CHECK(p.values()[0] == doctest::Approx(-1e-3).epsilon(1e-6));
    CHECK(p.values()[1] == doctest::Approx(1e-3).epsilon(1e-6));
    CHECK_FALSE(p.has_grad());  // grads consumed
  }
  SUBCASE("two groups: zero base lr freezes base parameters only") {
    Tensor base_param = Tensor::leaf({2}, {1.0, 1.0}, true);
    Tensor new_param = Tensor::leaf({2}, {1.0, 1.0}, true);
    backward(add(sum_all(base_param), sum_all(new_param)));
    std::vector<std::pair<std::string, Tensor>> params;
    params.emplace_back("token_table", base_param);
    params.emplace_back("match.fc1_w", new_param);
    AdamState state;
    AdamSettings s;
    s.lr_base = 0.0;
    s.lr_new = 1e-2;
    adam_step(params, state, s);
    CHECK(base_param.values() == std::vector<double>{1.0, 1.0});
    CHECK(new_param.values()[0] < 1.0);
  }
}

TEST_CASE("learning-rate group assignment") {
  CHECK(lr_group_for("patch.w") == LrGroup::kBase);
  CHECK(lr_group_for("video.layer0.q_w") == LrGroup::kBase);
  CHECK(lr_group_for("token_table") == LrGroup::kBase);
  CHECK(lr_group_for("text.final_g") == LrGroup::kBase);
  CHECK(lr_group_for("video_proj") == LrGroup::kBase);
  CHECK(lr_group_for("text_proj") == LrGroup::kBase);
  CHECK(lr_group_for("temperature") == LrGroup::kBase);
  CHECK(lr_group_for("frame_pos") == LrGroup::kNewLayers);
  CHECK(lr_group_for("temporal.layer0.o_w") == LrGroup::kNewLayers);
  CHECK(lr_group_for("fusion.final_b") == LrGroup::kNewLayers);
  CHECK(lr_group_for("match.fc2_b") == LrGroup::kNewLayers);
}

TEST_CASE("one step with all flags off: total equals l_vta") {
  const auto dir = temp_dir();
  ExperimentConfig cfg = tiny_config(dir);
  cfg.batch_size = 8;  // one batch per epoch
  TrainResult result = train(cfg);
  CHECK(result.steps == 1);
  const auto steps = log_records(dir / "train_log.jsonl", "step");
  REQUIRE(steps.size() == 1);
  CHECK(steps[0].at("total").get<double>() ==
        steps[0].at("l_vta").get<double>());
  CHECK(steps[0].at("l_vtm").get<double>() == 0.0);
  CHECK(steps[0].at("fusion_pairs").get<std::size_t>() == 0);
  CHECK_FALSE(steps[0].contains("wall_ms"));
  fs::remove_all(dir);
}

TEST_CASE("fusion with B=4, K=1 logs 12 pairs per step") {
  const auto dir = temp_dir();
  ExperimentConfig cfg = tiny_config(dir);
  cfg.flags.fusion = true;
  TrainResult result = train(cfg);
  CHECK(result.steps == 2);  // 8 samples / batch 4
  const auto steps = log_records(dir / "train_log.jsonl", "step");
  REQUIRE(steps.size() == 2);
  for (const auto& s : steps) {
    CHECK(s.at("fusion_pairs").get<std::size_t>() == 12);
    CHECK(s.at("total").get<double>() ==
          s.at("l_vta").get<double>() + s.at("l_vtm").get<double>());
  }
  fs::remove_all(dir);
}

TEST_CASE("fixed seed reproduces checkpoints and logs bitwise") {
  const auto dir_a = temp_dir();
  const auto dir_b = temp_dir();
  ExperimentConfig cfg = tiny_config(dir_a);
  cfg.epochs = 2;
  cfg.flags.temporal = true;
  cfg.flags.distill = true;
  cfg.flags.fusion = true;
  TrainResult a = train(cfg);
  cfg.out_dir = dir_b.string();
  TrainResult b = train(cfg);
  CHECK(file_bytes(a.final_checkpoint) == file_bytes(b.final_checkpoint));
  CHECK(file_bytes(dir_a / "train_log.jsonl") ==
        file_bytes(dir_b / "train_log.jsonl"));
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("the dual flag changes no parameter bytes") {
  const auto dir_a = temp_dir();
  const auto dir_b = temp_dir();
  ExperimentConfig cfg = tiny_config(dir_a);
  TrainResult plain = train(cfg);
  cfg.out_dir = dir_b.string();
  cfg.flags.dual_softmax = true;
  TrainResult dual = train(cfg);
  LoadedCheckpoint a = load_checkpoint(plain.final_checkpoint);
  LoadedCheckpoint b = load_checkpoint(dual.final_checkpoint);
  auto pa = a.state.named_parameters();
  auto pb = b.state.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].second.values() == pb[i].second.values());
  }
  CHECK(b.flags.dual_softmax);
  // and the log carries both revised and raw eval records
  const auto evals = log_records(dir_b / "train_log.jsonl", "eval");
  REQUIRE(evals.size() == 2);
  CHECK(evals[0].at("dual") == false);
  CHECK(evals[1].at("dual") == true);
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("distillation trains, keeps the teacher gradient-free") {
  const auto dir = temp_dir();
  ExperimentConfig cfg = tiny_config(dir);
  cfg.flags.distill = true;
  cfg.epochs = 2;
  TrainResult result = train(cfg);
  CHECK(result.steps == 4);
  const auto steps = log_records(dir / "train_log.jsonl", "step");
  for (const auto& s : steps) {
    CHECK(std::isfinite(s.at("l_vta").get<double>()));
  }
  fs::remove_all(dir);
}

TEST_CASE("teacher clone never accumulates gradients through a loss") {
  ModelConfig mc = tiny_config("unused").model;
  ModelState student = ModelState::init(mc, 3);
  ModelState teacher = student.clone(false);
  for (const auto& [name, t] : teacher.named_parameters()) {
    CHECK_FALSE(t.requires_grad());
  }
  data::GenerateSpec spec = tiny_config("unused").generation_spec();
  spec.concepts = 4;
  spec.per_concept = 1;
  const data::Dataset ds = data::generate(spec, 5);
  const auto bs = data::batches(ds, 4, 1, false);
  EncodedBatch sfwd = encode_batch(student, ds, bs[0], true);
  EncodedBatch tfwd = encode_batch(teacher, ds, bs[0], true);
  Tensor loss = contrastive_loss(cosine_sim_matrix(sfwd.v, sfwd.w),
                                 student.inv_temperature());
  backward(loss);
  for (const auto& [name, t] : teacher.named_parameters()) {
    CHECK_FALSE(t.has_grad());
  }
  bool any_student_grad = false;
  for (const auto& [name, t] : student.named_parameters()) {
    any_student_grad |= t.has_grad();
  }
  CHECK(any_student_grad);
}

TEST_CASE("runaway learning rate aborts citing the last good checkpoint") {
  const auto dir = temp_dir();
  ExperimentConfig cfg = tiny_config(dir);
  cfg.batch_size = 8;  // one step per epoch
  cfg.epochs = 4;
  cfg.lr_base = 1e200;
  cfg.lr_new = 1e200;
  CHECK_THROWS_WITH_AS(train(cfg), doctest::Contains("last good checkpoint"),
                       TrainAbort);
  fs::remove_all(dir);
}

TEST_CASE("early stopping halts once both directions hit the target") {
  const auto dir = temp_dir();
  ExperimentConfig cfg = tiny_config(dir);
  cfg.epochs = 100;
  cfg.early_stop_r1 = 0.01;  // any evaluation satisfies this
  TrainResult result = train(cfg);
  CHECK(result.epochs_run == 1);
  CHECK(log_records(dir / "train_log.jsonl", "early_stop").size() == 1);
  fs::remove_all(dir);
}

TEST_CASE("holdout split trains on the head and evaluates the tail") {
  const auto dir = temp_dir();
  ExperimentConfig cfg = tiny_config(dir);
  cfg.data.per_concept = 2;  // 16 samples
  cfg.holdout_fraction = 0.25;
  cfg.batch_size = 4;
  TrainResult result = train(cfg);
  CHECK(result.steps == 3);  // 12 training samples / 4
  REQUIRE(result.last_eval.has_value());
  CHECK(result.last_eval->sim.rows == 4);  // 16 * 0.25 held out
  fs::remove_all(dir);
}

TEST_CASE("evaluate_checkpoint rejects a mismatched dataset") {
  const auto dir = temp_dir();
  ExperimentConfig cfg = tiny_config(dir);
  TrainResult result = train(cfg);
  data::GenerateSpec other = cfg.generation_spec();
  other.n_frames = 3;
  const data::Dataset ds = data::generate(other, 1);
  CHECK_THROWS_AS(evaluate_checkpoint(result.final_checkpoint, ds, false),
                  ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("log timing flag adds wall time records") {
  const auto dir = temp_dir();
  ExperimentConfig cfg = tiny_config(dir);
  cfg.log_timing = true;
  train(cfg);
  const auto steps = log_records(dir / "train_log.jsonl", "step");
  REQUIRE(!steps.empty());
  CHECK(steps[0].contains("wall_ms"));
  fs::remove_all(dir);
}
