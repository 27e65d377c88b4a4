#pragma once

// Training loop for any tuning mode of the LM.
//
// One optimizer step consumes batch*accum records (the final step of an
// epoch may hold fewer). The step gradient is the mean over its records of
// the per-record gradient of the mean-masked cross-entropy, accumulated in
// record order, so regrouping batch/accum cannot change the result. AdamW
// uses decoupled weight decay; the learning rate moves linearly from
// lr_start at step 0 to lr_end at the final step. Gradients are clipped to a
// global L2 norm before the update.
//
// Data order per epoch is a pure function of (seed, epoch), which together
// with the serializable optimizer state makes interrupted runs resumable
// bit-for-bit.
//
// A non-finite step loss aborts the run: the model still holds the params
// from before the poisoned update ("last good"), and the error names the
// step. An optional dev scorer runs at each epoch end; the best-scoring
// epoch's trainable parameters are restored at the end of training.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypofuse/common.hpp"
#include "hypofuse/lm.hpp"
#include "hypofuse/rng.hpp"
#include "hypofuse/translator.hpp"

namespace hypofuse {

struct TrainConfig {
  int epochs = 2;
  int batch = 4;
  int accum = 8;
  double lr_start = 1e-2;
  double lr_end = 1e-5;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch < 1 || accum < 1)
      throw ConfigError("train: batch and accum must be >= 1");
    if (lr_start <= 0.0 || lr_end <= 0.0)
      throw ConfigError("train: learning rates must be positive");
    if (grad_clip <= 0.0) throw ConfigError("train: grad_clip must be positive");
    if (weight_decay < 0.0)
      throw ConfigError("train: weight_decay must be >= 0");
  }
};

struct LossCurveRow {
  long long step;
  double lr;
  double loss;
};

// Serializable optimizer + progress state; enough to resume a run exactly.
struct TrainerState {
  long long step = 0;
  std::vector<std::vector<double>> m, v;  // AdamW moments per trainable tensor
  std::array<std::uint64_t, 4> rng_state{};  // reserved training stream
  std::uint64_t config_hash = 0;

  nlohmann::json to_json() const {
    return nlohmann::json{{"step", step},
                          {"m", m},
                          {"v", v},
                          {"rng_state", rng_state},
                          {"config_hash", to_hex(config_hash)}};
  }
  static TrainerState from_json(const nlohmann::json& j) {
    TrainerState s;
    s.step = j.at("step").get<long long>();
    s.m = j.at("m").get<std::vector<std::vector<double>>>();
    s.v = j.at("v").get<std::vector<std::vector<double>>>();
    auto rs = j.at("rng_state").get<std::vector<std::uint64_t>>();
    if (rs.size() != 4) throw DataError("trainer state: bad rng state");
    std::copy(rs.begin(), rs.end(), s.rng_state.begin());
    s.config_hash =
        std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    return s;
  }
};

struct TrainReport {
  std::vector<LossCurveRow> curve;
  std::vector<double> dev_scores;
  int best_epoch = -1;
  double best_score = 0.0;
  long long steps_completed = 0;  // in this call
  bool completed = true;          // false when max_steps interrupted the run
};

using DevScorer = std::function<double(const Lm&)>;

inline double linear_lr(const TrainConfig& cfg, long long step,
                        long long total_steps) {
  if (total_steps <= 1) return cfg.lr_start;
  return cfg.lr_start + (cfg.lr_end - cfg.lr_start) *
                            static_cast<double>(step) /
                            static_cast<double>(total_steps - 1);
}

// Trains `model` in place. `state` carries progress across calls; pass a
// fresh TrainerState for a new run. max_steps > 0 stops after that many
// optimizer steps in this call (the interruption point for resume tests).
inline TrainReport train_lm(Lm& model, const std::vector<EncodedExample>& data,
                            const TrainConfig& cfg, TrainerState& state,
                            const DevScorer& dev_scorer = nullptr,
                            int max_steps = -1) {
  cfg.validate();
  if (data.empty()) throw TrainingError("train: no examples");
  auto params = model.trainable_parameters();
  if (params.empty()) throw TrainingError("train: model has no trainable parameters");

  const long long n = static_cast<long long>(data.size());
  const long long macro = static_cast<long long>(cfg.batch) * cfg.accum;
  const long long steps_per_epoch = (n + macro - 1) / macro;
  const long long total_steps = steps_per_epoch * cfg.epochs;

  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].second.size(), 0.0);
      state.v[i].assign(params[i].second.size(), 0.0);
    }
    state.rng_state = Rng(derive_seed(cfg.seed, "trainer")).state();
  } else if (state.m.size() != params.size()) {
    throw TrainingError("train: optimizer state does not match model");
  }

  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  TrainReport report;
  std::vector<std::vector<double>> best_params;
  long long done_this_call = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // data order is a pure function of (seed, epoch)
    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng order_rng(derive_seed(cfg.seed, "order-epoch-" + std::to_string(epoch)));
    order_rng.shuffle(order);

    for (long long s = 0; s < steps_per_epoch; ++s) {
      const long long global = static_cast<long long>(epoch) * steps_per_epoch + s;
      if (global < state.step) continue;  // resume fast-forward
      if (max_steps >= 0 && done_this_call >= max_steps) {
        report.completed = false;
        report.steps_completed = done_this_call;
        return report;
      }

      const long long lo = s * macro;
      const long long hi = std::min(n, lo + macro);
      const long long count = hi - lo;

      model.zero_grad();
      double loss_sum = 0.0;
      for (long long i = lo; i < hi; ++i) {
        const EncodedExample& ex = data[order[static_cast<size_t>(i)]];
        Tape tape;
        Tensor loss = model.loss(tape, ex.ids, ex.targets, ex.mask);
        tape.backward(loss);
        loss_sum += loss.item();
      }
      const double step_loss = loss_sum / static_cast<double>(count);
      const double lr = linear_lr(cfg, global, total_steps);
      if (!std::isfinite(step_loss))
        throw TrainingError(
            "train: non-finite loss at step " + std::to_string(global) +
            " (lr " + std::to_string(lr) +
            "); model holds the last good parameters");

      // mean gradient, then global-norm clip
      const double inv_count = 1.0 / static_cast<double>(count);
      double norm_sq = 0.0;
      for (auto& [name, p] : params) {
        Tensor t = p;
        const double* g = t.grad_data();
        for (size_t i = 0; i < t.size(); ++i) {
          const double gi = g[i] * inv_count;
          norm_sq += gi * gi;
        }
      }
      if (!std::isfinite(norm_sq))
        throw TrainingError(
            "train: non-finite gradient at step " + std::to_string(global) +
            "; model holds the last good parameters");
      const double norm = std::sqrt(norm_sq);
      const double clip_scale =
          norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;

      const double t_adam = static_cast<double>(state.step + 1);
      const double bc1 = 1.0 - std::pow(beta1, t_adam);
      const double bc2 = 1.0 - std::pow(beta2, t_adam);
      for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor t = params[pi].second;
        const double* g = t.grad_data();
        double* w = t.data();
        double* m = state.m[pi].data();
        double* v = state.v[pi].data();
        for (size_t i = 0; i < t.size(); ++i) {
          const double gi = g[i] * inv_count * clip_scale;
          m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
          v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
          const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps) +
                                cfg.weight_decay * w[i];
          w[i] -= lr * update;
        }
      }

      report.curve.push_back({global, lr, step_loss});
      ++state.step;
      ++done_this_call;
    }

    if (dev_scorer) {
      const double score = dev_scorer(model);
      report.dev_scores.push_back(score);
      if (report.best_epoch < 0 || score > report.best_score) {
        report.best_epoch = epoch;
        report.best_score = score;
        best_params.clear();
        for (auto& [name, p] : params) best_params.push_back(p.value());
      }
    }
  }

  if (dev_scorer && !best_params.empty()) {
    for (size_t pi = 0; pi < params.size(); ++pi) {
      Tensor t = params[pi].second;
      t.value() = best_params[pi];
    }
  }
  report.steps_completed = done_this_call;
  return report;
}

}  // namespace hypofuse
