#pragma once

// Decoder-only character language model with pluggable tuning modes.
//
// Architecture: learned absolute positional embeddings, pre-norm blocks with
// RMSNorm (gain only, no biases anywhere), multi-head causal self-attention,
// SiLU feed-forward with hidden size 4*dim, untied output head.
//
// Tuning modes over one shared forward path:
//   full    every parameter trains (used to pretrain bases from scratch)
//   frozen  nothing trains
//   adapter zero-init gated prompt attention in the top `tunable` layers:
//           U learned prompt rows per layer join the key/value sequence, the
//           prompt attention segment gets its own softmax and is scaled by a
//           per-layer scalar gate initialized to exactly 0, so a fresh
//           adapter model computes bit-for-bit the frozen base function
//   lora    rank-r updates on the q and v projections of the top `tunable`
//           layers, up factor zero-init so the initial delta is zero
//
// Prompt rows carry no positional embedding and are projected by the frozen
// Wk/Wv directly; any normalization could be absorbed into the free rows.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hypofuse/common.hpp"
#include "hypofuse/rng.hpp"
#include "hypofuse/tensor.hpp"

namespace hypofuse {

enum class TuneMode { full, frozen, adapter, lora };

inline std::string to_string(TuneMode m) {
  switch (m) {
    case TuneMode::full: return "full";
    case TuneMode::frozen: return "frozen";
    case TuneMode::adapter: return "adapter";
    case TuneMode::lora: return "lora";
  }
  return "?";
}

inline TuneMode tune_mode_from(const std::string& s) {
  if (s == "full") return TuneMode::full;
  if (s == "frozen") return TuneMode::frozen;
  if (s == "adapter") return TuneMode::adapter;
  if (s == "lora") return TuneMode::lora;
  throw ConfigError("unknown tuning mode '" + s +
                    "' (expected full|frozen|adapter|lora)");
}

struct LmConfig {
  int layers = 4;
  int dim = 64;
  int heads = 4;
  int block = 256;        // positional table size; max token positions
  int vocab = 0;          // set from the tokenizer
  int prompt_len = 10;    // U, adapter mode
  int tunable_layers = -1;  // L; -1 resolves to layers-1 (layer 0 stays frozen)
  int lora_rank = 4;
  double lora_scale = 2.0;  // alpha/r, fixed
  TuneMode mode = TuneMode::frozen;

  int resolved_tunable() const {
    return tunable_layers < 0 ? layers - 1 : tunable_layers;
  }
  int first_tunable() const { return layers - resolved_tunable(); }
  int head_dim() const { return dim / heads; }

  void validate() const {
    if (layers < 1) throw ConfigError("model: layers must be >= 1");
    if (dim < 1 || heads < 1 || dim % heads != 0)
      throw ConfigError("model: dim " + std::to_string(dim) +
                        " must be a positive multiple of heads " +
                        std::to_string(heads));
    if (block < 2) throw ConfigError("model: block must be >= 2");
    if (vocab < 2) throw ConfigError("model: vocab must be >= 2");
    if (prompt_len < 1) throw ConfigError("model: prompt_len must be >= 1");
    // tunable-layer geometry only matters when something is dressed on top
    if (mode == TuneMode::adapter || mode == TuneMode::lora) {
      const int L = resolved_tunable();
      if (L < 1 || L > layers)
        throw ConfigError("model: tunable_layers " + std::to_string(L) +
                          " outside [1, layers=" + std::to_string(layers) + "]");
    }
    if (lora_rank < 1) throw ConfigError("model: lora_rank must be >= 1");
    if (mode == TuneMode::adapter && prompt_len >= block)
      throw ConfigError("model: prompt_len must be < block");
  }
};

class Lm {
 public:
  Lm(LmConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const size_t d = static_cast<size_t>(cfg_.dim);
    const size_t v = static_cast<size_t>(cfg_.vocab);
    const size_t u = static_cast<size_t>(cfg_.prompt_len);
    const size_t r = static_cast<size_t>(cfg_.lora_rank);
    const bool base_rg = cfg_.mode == TuneMode::full;

    tok_emb_ = init_normal({v, d}, rng, base_rg);
    pos_emb_ = init_normal({static_cast<size_t>(cfg_.block), d}, rng, base_rg);
    final_gain_ = init_ones({d}, base_rg);
    head_ = init_normal({d, v}, rng, base_rg);

    layers_.resize(static_cast<size_t>(cfg_.layers));
    for (int l = 0; l < cfg_.layers; ++l) {
      Layer& lp = layers_[static_cast<size_t>(l)];
      lp.attn_gain = init_ones({d}, base_rg);
      lp.wq = init_normal({d, d}, rng, base_rg);
      lp.wk = init_normal({d, d}, rng, base_rg);
      lp.wv = init_normal({d, d}, rng, base_rg);
      lp.wo = init_normal({d, d}, rng, base_rg);
      lp.mlp_gain = init_ones({d}, base_rg);
      lp.w1 = init_normal({d, 4 * d}, rng, base_rg);
      lp.w2 = init_normal({4 * d, d}, rng, base_rg);
      const bool tunable = l >= cfg_.first_tunable();
      if (cfg_.mode == TuneMode::adapter && tunable) {
        lp.prompt = init_normal({u, d}, rng, true);
        lp.gate = Tensor::scalar(0.0, true);  // exact zero: identity at init
      }
      if (cfg_.mode == TuneMode::lora && tunable) {
        lp.lq_down = init_normal({d, r}, rng, true);
        lp.lq_up = Tensor::zeros({r, d}, true);
        lp.lv_down = init_normal({d, r}, rng, true);
        lp.lv_up = Tensor::zeros({r, d}, true);
      }
    }
  }

  const LmConfig& config() const { return cfg_; }

  // Token positions this model accepts; adapter prompts occupy part of the
  // attention width, so they shrink the budget.
  int max_positions() const {
    return cfg_.mode == TuneMode::adapter ? cfg_.block - cfg_.prompt_len
                                          : cfg_.block;
  }

  // Logits for every position, [M x vocab].
  Tensor forward(Tape& tape, const std::vector<int>& ids) const {
    return matmul_head(tape, hidden(tape, ids));
  }

  // Logits for the last position only, [1 x vocab]; the generation hot path.
  Tensor forward_last(Tape& tape, const std::vector<int>& ids) const {
    Tensor h = hidden(tape, ids);
    return matmul_head(tape, tape.slice_rows(h, h.rows() - 1, 1));
  }

  // Mean masked cross-entropy of next-token prediction over explicit targets.
  Tensor loss(Tape& tape, const std::vector<int>& ids,
              const std::vector<int>& targets,
              const std::vector<unsigned char>& mask) const {
    return tape.cross_entropy(forward(tape, ids), targets, mask);
  }

  // Log p(next token | ids) without recording gradients.
  std::vector<double> next_log_probs(const std::vector<int>& ids) const {
    Tape tape(false);
    Tensor logits = forward_last(tape, ids);
    return log_softmax_row(logits.data(), static_cast<size_t>(cfg_.vocab));
  }

  struct Generation {
    std::vector<int> ids;  // generated tokens, terminator excluded
    bool hit_eos = false;
  };

  // Greedy (top-1) or temperature sampling from the next-token distribution.
  // Stops at eos_id or after max_new tokens.
  Generation generate(std::vector<int> ids, int max_new, double temperature,
                      bool sample, int eos_id, Rng* rng) const {
    if (temperature <= 0.0)
      throw ValueError("generate: temperature must be positive");
    if (sample && rng == nullptr)
      throw ValueError("generate: sampling requires an rng");
    Generation out;
    for (int step = 0; step < max_new; ++step) {
      Tape tape(false);
      Tensor logits = forward_last(tape, ids);
      const size_t v = static_cast<size_t>(cfg_.vocab);
      int next;
      if (sample) {
        std::vector<double> lp = log_softmax_row(logits.data(), v);
        for (double& x : lp) x /= temperature;
        // renormalize and draw
        double mx = lp[0];
        for (double x : lp) mx = std::max(mx, x);
        double z = 0.0;
        for (double x : lp) z += std::exp(x - mx);
        double u = rng->uniform() * z, acc = 0.0;
        next = static_cast<int>(v) - 1;
        for (size_t j = 0; j < v; ++j) {
          acc += std::exp(lp[j] - mx);
          if (u < acc) {
            next = static_cast<int>(j);
            break;
          }
        }
      } else {
        // temperature rescales logits; argmax is invariant to it
        next = 0;
        for (size_t j = 1; j < v; ++j)
          if (logits.data()[j] > logits.data()[static_cast<size_t>(next)])
            next = static_cast<int>(j);
      }
      if (next == eos_id) {
        out.hit_eos = true;
        break;
      }
      ids.push_back(next);
      out.ids.push_back(next);
    }
    return out;
  }

  // Deterministic construction-order parameter listing.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", tok_emb_);
    out.emplace_back("pos_emb", pos_emb_);
    for (size_t l = 0; l < layers_.size(); ++l) {
      const Layer& lp = layers_[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      out.emplace_back(p + "attn_norm.gain", lp.attn_gain);
      out.emplace_back(p + "wq", lp.wq);
      out.emplace_back(p + "wk", lp.wk);
      out.emplace_back(p + "wv", lp.wv);
      out.emplace_back(p + "wo", lp.wo);
      out.emplace_back(p + "mlp_norm.gain", lp.mlp_gain);
      out.emplace_back(p + "w1", lp.w1);
      out.emplace_back(p + "w2", lp.w2);
      if (lp.prompt.valid()) out.emplace_back(p + "prompt", lp.prompt);
      if (lp.gate.valid()) out.emplace_back(p + "gate", lp.gate);
      if (lp.lq_down.valid()) {
        out.emplace_back(p + "lora_q.down", lp.lq_down);
        out.emplace_back(p + "lora_q.up", lp.lq_up);
        out.emplace_back(p + "lora_v.down", lp.lv_down);
        out.emplace_back(p + "lora_v.up", lp.lv_up);
      }
    }
    out.emplace_back("final_norm.gain", final_gain_);
    out.emplace_back("head", head_);
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> trainable_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, t] : named_parameters())
      if (t.requires_grad()) out.emplace_back(name, t);
    return out;
  }

  size_t trainable_count() const {
    size_t n = 0;
    for (auto& [name, t] : trainable_parameters()) n += t.size();
    return n;
  }

  void zero_grad() const {
    for (auto& [name, t] : named_parameters()) {
      Tensor mut = t;
      mut.zero_grad();
    }
  }

  // Fingerprint of the non-trainable parameters; lets tests assert the frozen
  // base never moves.
  std::uint64_t frozen_fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto& [name, t] : named_parameters()) {
      if (t.requires_grad()) continue;
      h = fnv1a64(name, h);
      h = fnv1a64(std::string_view(
                      reinterpret_cast<const char*>(t.data()),
                      t.size() * sizeof(double)),
                  h);
    }
    return h;
  }

 private:
  struct Layer {
    Tensor attn_gain, wq, wk, wv, wo;
    Tensor mlp_gain, w1, w2;
    Tensor prompt, gate;                      // adapter
    Tensor lq_down, lq_up, lv_down, lv_up;    // lora
  };

  static Tensor init_normal(std::vector<size_t> shape, Rng& rng,
                            bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, 0.02);
    return t;
  }

  static Tensor init_ones(std::vector<size_t> shape, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (size_t i = 0; i < t.size(); ++i) t.data()[i] = 1.0;
    return t;
  }

  static std::vector<double> log_softmax_row(const double* row, size_t v) {
    double mx = row[0];
    for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    std::vector<double> out(v);
    for (size_t j = 0; j < v; ++j) out[j] = row[j] - lse;
    return out;
  }

  Tensor matmul_head(Tape& tape, const Tensor& h) const {
    return tape.matmul(tape.rmsnorm(h, final_gain_), head_);
  }

  // q/v projection with optional rank-r delta: x (W + down*up*scale).
  Tensor project(Tape& tape, const Tensor& x, const Tensor& w,
                 const Tensor& down, const Tensor& up) const {
    Tensor base = tape.matmul(x, w);
    if (!down.valid()) return base;
    Tensor delta =
        tape.scale(tape.matmul(tape.matmul(x, down), up), cfg_.lora_scale);
    return tape.add(base, delta);
  }

  Tensor hidden(Tape& tape, const std::vector<int>& ids) const {
    const int m = static_cast<int>(ids.size());
    if (m < 1) throw LengthError("lm: empty input sequence");
    if (m > max_positions())
      throw LengthError(
          "lm: sequence of " + std::to_string(m) + " tokens exceeds " +
          std::to_string(max_positions()) + " positions (block " +
          std::to_string(cfg_.block) +
          (cfg_.mode == TuneMode::adapter
               ? ", prompt_len " + std::to_string(cfg_.prompt_len)
               : std::string()) +
          ")");
    const size_t mm = static_cast<size_t>(m);
    const size_t dh = static_cast<size_t>(cfg_.head_dim());
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // additive causal mask: 0 on and below the diagonal, -1e30 above
    Tensor mask = Tensor::zeros({mm, mm});
    for (size_t i = 0; i < mm; ++i)
      for (size_t j = i + 1; j < mm; ++j) mask.at(i, j) = -1e30;

    Tensor x = tape.add(tape.embedding(tok_emb_, ids),
                        tape.slice_rows(pos_emb_, 0, mm));
    for (int l = 0; l < cfg_.layers; ++l) {
      const Layer& lp = layers_[static_cast<size_t>(l)];
      const bool adapted = lp.prompt.valid();

      Tensor h = tape.rmsnorm(x, lp.attn_gain);
      Tensor q = project(tape, h, lp.wq, lp.lq_down, lp.lq_up);
      Tensor k = tape.matmul(h, lp.wk);
      Tensor v = project(tape, h, lp.wv, lp.lv_down, lp.lv_up);
      Tensor kp, vp;
      if (adapted) {
        kp = tape.matmul(lp.prompt, lp.wk);
        vp = tape.matmul(lp.prompt, lp.wv);
      }

      std::vector<Tensor> ctx;
      ctx.reserve(static_cast<size_t>(cfg_.heads));
      for (int hh = 0; hh < cfg_.heads; ++hh) {
        const size_t off = static_cast<size_t>(hh) * dh;
        Tensor qh = tape.slice_cols(q, off, dh);
        Tensor kh = tape.slice_cols(k, off, dh);
        Tensor vh = tape.slice_cols(v, off, dh);
        Tensor scores = tape.add(
            tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dh), mask);
        Tensor ctx_t = tape.matmul(tape.softmax(scores), vh);
        if (adapted) {
          // Prompt segment: separate softmax over the U prompt keys (every
          // token sees every prompt row), scaled by the zero-init gate.
          Tensor kph = tape.slice_cols(kp, off, dh);
          Tensor vph = tape.slice_cols(vp, off, dh);
          Tensor ps = tape.scale(tape.matmul_nt(qh, kph), inv_sqrt_dh);
          Tensor gated = tape.mul_scalar(tape.softmax(ps), lp.gate);
          ctx_t = tape.add(ctx_t, tape.matmul(gated, vph));
        }
        ctx.push_back(ctx_t);
      }
      x = tape.add(x, tape.matmul(tape.concat_cols(ctx), lp.wo));

      Tensor h2 = tape.rmsnorm(x, lp.mlp_gain);
      x = tape.add(x, tape.matmul(tape.silu(tape.matmul(h2, lp.w1)), lp.w2));
    }
    return x;
  }

  LmConfig cfg_;
  Tensor tok_emb_, pos_emb_, final_gain_, head_;
  std::vector<Layer> layers_;
};

}  // namespace hypofuse
