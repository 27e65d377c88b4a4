#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hypofuse/checkpoint.hpp"
#include "hypofuse/hypo.hpp"
#include "hypofuse/lm.hpp"
#include "hypofuse/rng.hpp"
#include "hypofuse/tokenizer.hpp"
#include "hypofuse/trainer.hpp"

using namespace hypofuse;
using Catch::Matchers::ContainsSubstring;

namespace {

LmConfig small_config(TuneMode mode, int vocab) {
  LmConfig cfg;
  cfg.layers = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.block = 32;
  cfg.vocab = vocab;
  cfg.prompt_len = 4;
  cfg.tunable_layers = 1;
  cfg.mode = mode;
  return cfg;
}

Lm make_model(const LmConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return Lm(cfg, rng);
}

// Short synthetic next-token records; every record masks at least three
// positions so each step sees a real loss.
std::vector<EncodedExample> synthetic_data(int count, int vocab,
                                           std::uint64_t seed) {
  Rng rng(seed);
  std::vector<EncodedExample> out;
  for (int r = 0; r < count; ++r) {
    const int len = 5 + static_cast<int>(rng.uniform() * 4.0);
    EncodedExample ex;
    for (int t = 0; t < len; ++t) {
      ex.ids.push_back(static_cast<int>(rng.uniform() * vocab));
      ex.targets.push_back(static_cast<int>(rng.uniform() * vocab));
      ex.mask.push_back(t >= 2 ? 1 : 0);
    }
    out.push_back(ex);
  }
  return out;
}

std::vector<std::vector<double>> param_values(const Lm& model) {
  std::vector<std::vector<double>> out;
  for (auto& [name, t] : model.named_parameters()) out.push_back(t.value());
  return out;
}

std::vector<std::vector<double>> tunable_values(const Lm& model) {
  std::vector<std::vector<double>> out;
  for (auto& [name, t] : model.trainable_parameters()) out.push_back(t.value());
  return out;
}

double max_abs_diff(const std::vector<std::vector<double>>& a,
                    const std::vector<std::vector<double>>& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].size() == b[i].size());
    for (size_t j = 0; j < a[i].size(); ++j)
      worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  }
  return worst;
}

}  // namespace

TEST_CASE("learning rate interpolates linearly from lr_start to lr_end") {
  TrainConfig cfg;
  cfg.lr_start = 1e-2;
  cfg.lr_end = 1e-5;

  CHECK(linear_lr(cfg, 0, 10) == 1e-2);
  CHECK_THAT(linear_lr(cfg, 9, 10), Catch::Matchers::WithinAbs(1e-5, 1e-15));
  // interior points sit on the straight line between the endpoints
  for (long long s = 1; s < 9; ++s) {
    const double expect =
        1e-2 + (1e-5 - 1e-2) * static_cast<double>(s) / 9.0;
    CHECK_THAT(linear_lr(cfg, s, 10), Catch::Matchers::WithinAbs(expect, 1e-15));
  }
  // a single-step run never leaves lr_start
  CHECK(linear_lr(cfg, 0, 1) == 1e-2);
  CHECK(linear_lr(cfg, 0, 0) == 1e-2);

  // a real run's curve carries the same endpoints
  const int vocab = 12;
  LmConfig mc = small_config(TuneMode::adapter, vocab);
  Lm model = make_model(mc, 11);
  auto data = synthetic_data(8, vocab, 21);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch = 2;
  tc.accum = 1;
  tc.lr_start = 1e-2;
  tc.lr_end = 1e-5;
  tc.seed = 5;
  TrainerState state;
  TrainReport report = train_lm(model, data, tc, state);
  REQUIRE(report.curve.size() == 8);
  CHECK(report.curve.front().lr == 1e-2);
  CHECK_THAT(report.curve.back().lr, Catch::Matchers::WithinAbs(1e-5, 1e-15));
  CHECK(report.curve.front().step == 0);
  CHECK(report.curve.back().step == 7);
  CHECK(report.completed);
  CHECK(report.steps_completed == 8);
}

TEST_CASE("one optimizer step applies the hand-computed update") {
  const int vocab = 12;
  LmConfig mc = small_config(TuneMode::adapter, vocab);
  Lm trained = make_model(mc, 33);
  Lm probe = make_model(mc, 33);  // same seed, same initialization
  auto data = synthetic_data(3, vocab, 44);

  TrainConfig tc;
  tc.epochs = 1;
  tc.batch = 3;
  tc.accum = 1;        // one macro step over all three records
  tc.lr_start = 5e-3;
  tc.lr_end = 5e-3;
  tc.weight_decay = 0.0;
  tc.grad_clip = 1e9;  // keep the norm clip inactive
  tc.seed = 7;

  // independent oracle: accumulate per-record gradients by hand, then apply
  // the first decoupled-weight-decay adaptive step, which collapses to
  //   w <- w - lr * g / (|g| + eps)
  // because the bias-corrected moments equal g and g^2 at step one
  probe.zero_grad();
  double loss_sum = 0.0;
  for (const EncodedExample& ex : data) {
    Tape tape;
    Tensor loss = probe.loss(tape, ex.ids, ex.targets, ex.mask);
    tape.backward(loss);
    loss_sum += loss.item();
  }
  auto probe_params = probe.trainable_parameters();
  std::vector<std::vector<double>> expected;
  for (auto& [name, p] : probe_params) {
    std::vector<double> w = p.value();
    const double* g = p.grad_data();
    for (size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] / 3.0;
      w[i] -= 5e-3 * gi / (std::abs(gi) + 1e-8);
    }
    expected.push_back(w);
  }

  TrainerState state;
  TrainReport report = train_lm(trained, data, tc, state);
  REQUIRE(report.curve.size() == 1);
  CHECK_THAT(report.curve[0].loss,
             Catch::Matchers::WithinAbs(loss_sum / 3.0, 1e-12));
  CHECK(max_abs_diff(tunable_values(trained), expected) < 1e-12);
}

TEST_CASE("accumulation groupings with equal macro-batch are equivalent") {
  const int vocab = 12;
  LmConfig mc = small_config(TuneMode::adapter, vocab);
  auto data = synthetic_data(8, vocab, 99);

  auto run = [&](int batch, int accum) {
    Lm model = make_model(mc, 55);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch = batch;
    tc.accum = accum;
    tc.seed = 13;
    TrainerState state;
    TrainReport report = train_lm(model, data, tc, state);
    return std::make_pair(param_values(model), report);
  };

  auto [p_a, r_a] = run(4, 2);
  auto [p_b, r_b] = run(8, 1);
  auto [p_c, r_c] = run(2, 4);

  // the optimizer consumes whole macro-batches, so any (batch, accum)
  // factorization of the same product is the same computation
  CHECK(max_abs_diff(p_a, p_b) == 0.0);
  CHECK(max_abs_diff(p_a, p_c) == 0.0);
  REQUIRE(r_a.curve.size() == r_b.curve.size());
  for (size_t i = 0; i < r_a.curve.size(); ++i) {
    CHECK(r_a.curve[i].loss == r_b.curve[i].loss);
    CHECK(r_a.curve[i].loss == r_c.curve[i].loss);
  }
}

TEST_CASE("fixed seed reproduces the loss curve and final parameters") {
  const int vocab = 12;
  LmConfig mc = small_config(TuneMode::adapter, vocab);
  auto data = synthetic_data(5, vocab, 3);

  auto run = [&]() {
    Lm model = make_model(mc, 70);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch = 2;
    tc.accum = 1;
    tc.seed = 31;
    TrainerState state;
    TrainReport report = train_lm(model, data, tc, state);
    return std::make_pair(param_values(model), report);
  };

  auto [p1, r1] = run();
  auto [p2, r2] = run();
  CHECK(max_abs_diff(p1, p2) == 0.0);
  REQUIRE(r1.curve.size() == r2.curve.size());
  for (size_t i = 0; i < r1.curve.size(); ++i) {
    CHECK(r1.curve[i].loss == r2.curve[i].loss);
    CHECK(r1.curve[i].lr == r2.curve[i].lr);
  }
}

TEST_CASE("training changes only tunable parameters") {
  const int vocab = 12;
  LmConfig mc = small_config(TuneMode::adapter, vocab);
  Lm model = make_model(mc, 17);
  auto data = synthetic_data(6, vocab, 29);

  const std::uint64_t frozen_before = model.frozen_fingerprint();
  std::vector<std::vector<double>> frozen_values;
  std::vector<std::string> frozen_names;
  for (auto& [name, t] : model.named_parameters()) {
    if (!t.requires_grad()) {
      frozen_names.push_back(name);
      frozen_values.push_back(t.value());
    }
  }
  REQUIRE_FALSE(frozen_names.empty());

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch = 2;
  tc.accum = 1;
  tc.seed = 19;
  TrainerState state;
  train_lm(model, data, tc, state);

  CHECK(model.frozen_fingerprint() == frozen_before);
  size_t i = 0;
  for (auto& [name, t] : model.named_parameters()) {
    if (!t.requires_grad()) {
      INFO("frozen tensor " << name);
      CHECK(t.value() == frozen_values[i]);
      ++i;
    }
  }

  // and the tunables did move
  bool moved = false;
  for (auto& [name, t] : model.trainable_parameters())
    for (double x : t.value())
      if (x != 0.0) moved = true;
  CHECK(moved);
}

TEST_CASE("interrupting and resuming reproduces the uninterrupted run") {
  const int vocab = 12;
  LmConfig mc = small_config(TuneMode::adapter, vocab);
  auto data = synthetic_data(6, vocab, 61);

  TrainConfig tc;
  tc.epochs = 3;
  tc.batch = 1;
  tc.accum = 2;  // macro 2 -> 3 steps per epoch, 9 total
  tc.seed = 23;

  Lm full = make_model(mc, 91);
  TrainerState full_state;
  TrainReport full_report = train_lm(full, data, tc, full_state);
  REQUIRE(full_report.completed);
  REQUIRE(full_report.curve.size() == 9);

  Lm part = make_model(mc, 91);
  TrainerState part_state;
  TrainReport first = train_lm(part, data, tc, part_state, nullptr, 4);
  CHECK_FALSE(first.completed);
  CHECK(first.steps_completed == 4);
  REQUIRE(first.curve.size() == 4);
  CHECK(part_state.step == 4);

  // round-trip the model and the optimizer state through their wire formats
  nlohmann::json ckpt = checkpoint_to_json(part);
  nlohmann::json state_json = part_state.to_json();
  Rng dress_rng(123456);  // initialization is overwritten by the checkpoint
  Lm resumed = checkpoint_from_json(ckpt, mc, dress_rng);
  TrainerState resumed_state = TrainerState::from_json(state_json);
  CHECK(resumed_state.step == 4);

  TrainReport second = train_lm(resumed, data, tc, resumed_state);
  CHECK(second.completed);
  CHECK(second.steps_completed == 5);
  REQUIRE(second.curve.size() == 5);

  CHECK(max_abs_diff(param_values(resumed), param_values(full)) == 0.0);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(first.curve[i].loss == full_report.curve[i].loss);
    CHECK(first.curve[i].step == full_report.curve[i].step);
  }
  for (size_t i = 0; i < 5; ++i) {
    CHECK(second.curve[i].loss == full_report.curve[i + 4].loss);
    CHECK(second.curve[i].step == full_report.curve[i + 4].step);
  }
}

TEST_CASE("non-finite loss aborts before touching the parameters") {
  const int vocab = 12;
  LmConfig mc = small_config(TuneMode::adapter, vocab);
  Lm model = make_model(mc, 41);
  auto data = synthetic_data(4, vocab, 42);

  // poison one frozen weight: the very first forward pass now yields NaN
  for (auto& [name, t] : model.named_parameters())
    if (name == "tok_emb") t.data()[0] = std::nan("");
  const auto before = param_values(model);

  TrainConfig tc;
  tc.epochs = 1;
  tc.batch = 4;
  tc.accum = 1;
  tc.seed = 3;
  TrainerState state;
  REQUIRE_THROWS_MATCHES(
      train_lm(model, data, tc, state), TrainingError,
      Catch::Matchers::MessageMatches(
          ContainsSubstring("model holds the last good parameters")));

  // no partial update was applied
  const auto after = param_values(model);
  REQUIRE(before.size() == after.size());
  for (size_t i = 0; i < before.size(); ++i) {
    REQUIRE(before[i].size() == after[i].size());
    for (size_t j = 0; j < before[i].size(); ++j) {
      if (std::isnan(before[i][j])) {
        CHECK(std::isnan(after[i][j]));
      } else {
        CHECK(before[i][j] == after[i][j]);
      }
    }
  }
}

TEST_CASE("dev scoring snapshots the best epoch and restores it at the end") {
  const int vocab = 12;
  LmConfig mc = small_config(TuneMode::adapter, vocab);
  Lm model = make_model(mc, 47);
  auto data = synthetic_data(4, vocab, 48);

  TrainConfig tc;
  tc.epochs = 3;
  tc.batch = 2;
  tc.accum = 1;
  tc.seed = 9;

  // scripted dev scores: the middle epoch wins
  const std::vector<double> script = {1.0, 5.0, 2.0};
  int calls = 0;
  std::vector<std::vector<std::vector<double>>> snapshots;
  DevScorer scorer = [&](const Lm& m) {
    snapshots.push_back(tunable_values(m));
    return script[static_cast<size_t>(calls++)];
  };

  TrainerState state;
  TrainReport report = train_lm(model, data, tc, state, scorer);
  REQUIRE(calls == 3);
  REQUIRE(report.dev_scores == script);
  CHECK(report.best_epoch == 1);
  CHECK(report.best_score == 5.0);

  // final parameters are the epoch-1 snapshot, not the last epoch's
  CHECK(max_abs_diff(tunable_values(model), snapshots[1]) == 0.0);
  CHECK(max_abs_diff(snapshots[1], snapshots[2]) > 0.0);
}

TEST_CASE("a single record is overfit and reproduced") {
  // charset covers the fixed prompt text plus the toy sentences
  Tokenizer tok("Fuse:\n12. Outnopq");

  // the base model learns to copy the first hypothesis; the finetune record's
  // reference is the SECOND hypothesis, so low loss demands real learning
  HypoRecord rec;
  rec.id = "r0";
  rec.lang_pair = "toy";
  rec.hypotheses = {"non", "nqn"};
  rec.reference = "nqn";

  std::vector<HypoRecord> pre;
  const char letters[] = "nopq";
  Rng make(3);
  for (int i = 0; i < 64; ++i) {
    std::string h1, h2;
    for (int k = 0; k < 3; ++k) {
      h1.push_back(letters[static_cast<int>(make.uniform() * 4.0)]);
      h2.push_back(letters[static_cast<int>(make.uniform() * 4.0)]);
    }
    pre.push_back({"p" + std::to_string(i), "toy", {h1, h2}, h1});
  }

  LmConfig bc;
  bc.layers = 2;
  bc.dim = 32;
  bc.heads = 2;
  bc.block = 64;
  bc.vocab = tok.vocab_size();
  bc.mode = TuneMode::full;
  Lm base = make_model(bc, 8);
  std::vector<EncodedExample> pretrain_data;
  for (const HypoRecord& r : pre)
    pretrain_data.push_back(
        render_fusion_example(tok, r, 2, "Fuse:", "Out: ", bc.block));
  TrainConfig ptc;
  ptc.epochs = 100;
  ptc.batch = 8;
  ptc.accum = 1;
  ptc.lr_start = 1e-2;
  ptc.lr_end = 1e-4;
  ptc.seed = 5;
  TrainerState pstate;
  train_lm(base, pretrain_data, ptc, pstate);

  const std::string prompt = render_fusion_prompt(rec, 2, "Fuse:", "Out: ");
  EncodedExample ex = render_fusion_example(tok, rec, 2, "Fuse:", "Out: ", 54);

  // the base copies hypothesis one and is confidently wrong on this record
  Lm::Generation base_gen = base.generate(tok.encode(prompt), 8, 1.0, false,
                                          Tokenizer::kEos, nullptr);
  CHECK(tok.decode(base_gen.ids) == "non");
  Tape base_eval(false);
  const double base_loss =
      base.loss(base_eval, ex.ids, ex.targets, ex.mask).item();
  CHECK(base_loss > 1.0);

  const nlohmann::json ckpt = checkpoint_to_json(base);
  for (TuneMode mode : {TuneMode::adapter, TuneMode::lora}) {
    LmConfig fc = bc;
    fc.mode = mode;
    fc.prompt_len = 10;
    fc.tunable_layers = 2;
    fc.lora_rank = 4;
    Rng dress_rng(9);
    Lm model = checkpoint_from_json(ckpt, fc, dress_rng);

    TrainConfig tc;
    tc.epochs = 200;  // one record, one step per epoch
    tc.batch = 1;
    tc.accum = 1;
    tc.lr_start = 1e-2;
    tc.lr_end = 1e-4;
    tc.seed = 77;
    TrainerState state;
    TrainReport report = train_lm(model, {ex}, tc, state);
    REQUIRE(report.curve.size() == 200);

    // zero-initialized tuning starts exactly at the base model's loss
    CHECK_THAT(report.curve[0].loss,
               Catch::Matchers::WithinAbs(base_loss, 1e-9));

    Tape eval(false);
    const double final_loss =
        model.loss(eval, ex.ids, ex.targets, ex.mask).item();
    INFO("mode " << (mode == TuneMode::adapter ? "adapter" : "lora"));
    CHECK(final_loss < 0.05);

    // greedy decoding now reproduces the reference, not the base's copy
    Lm::Generation gen = model.generate(tok.encode(prompt), 8, 1.0, false,
                                        Tokenizer::kEos, nullptr);
    CHECK(gen.hit_eos);
    CHECK(tok.decode(gen.ids) == "nqn");
  }
}

TEST_CASE("trainer rejects bad configs, empty data, and mismatched state") {
  const int vocab = 12;
  auto data = synthetic_data(2, vocab, 1);

  TrainConfig bad;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.batch = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.lr_end = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.grad_clip = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.weight_decay = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  LmConfig mc = small_config(TuneMode::adapter, vocab);
  Lm adapter = make_model(mc, 2);
  TrainConfig tc;
  TrainerState fresh;
  CHECK_THROWS_AS(train_lm(adapter, {}, tc, fresh), TrainingError);

  // a fully frozen model has nothing to train
  LmConfig fc = small_config(TuneMode::frozen, vocab);
  Lm frozen = make_model(fc, 2);
  TrainerState fstate;
  CHECK_THROWS_AS(train_lm(frozen, data, tc, fstate), TrainingError);

  // optimizer state sized for a different parameter census is rejected
  LmConfig lc = small_config(TuneMode::lora, vocab);
  Lm lora = make_model(lc, 2);
  TrainerState mismatched;
  tc.epochs = 1;
  tc.batch = 2;
  tc.accum = 1;
  train_lm(adapter, data, tc, mismatched);  // shapes state for the adapter
  CHECK_THROWS_AS(train_lm(lora, data, tc, mismatched), TrainingError);
}
