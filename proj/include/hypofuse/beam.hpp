#pragma once

// Beam search over an abstract next-token scorer. The scorer maps a prefix
// (context + generated tokens so far) to log-probabilities over the whole
// vocabulary, so tests can drive the search with hand-set tables and compare
// against exhaustive enumeration.
//
// Scoring: a hypothesis finishes when it expands with eos. Its raw score is
// the sum of log-probs of every generated token including eos; its length is
// the number of generated tokens including eos; its normalized score is
// raw / length^length_penalty. Returned token ids exclude eos. Results sort
// by normalized score descending, ties broken lexicographically by token ids
// so equal-scored runs are reproducible.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hypofuse/common.hpp"

namespace hypofuse {

struct BeamHypothesis {
  std::vector<int> ids;     // generated tokens, eos excluded
  double score_raw = 0.0;   // sum log p, eos included when finished
  double score_norm = 0.0;  // raw / length^length_penalty
  int length = 0;           // generated tokens, eos included when finished
  bool finished = false;
};

struct BeamConfig {
  int beam = 5;
  int max_len = 16;           // maximum generated tokens, eos step included
  double length_penalty = 1.0;
  int eos_id = 1;

  void validate(int vocab) const {
    if (beam < 1) throw ConfigError("beam: width must be >= 1");
    if (max_len < 1) throw ConfigError("beam: max_len must be >= 1");
    if (eos_id < 0 || eos_id >= vocab)
      throw ConfigError("beam: eos id " + std::to_string(eos_id) +
                        " outside vocabulary of " + std::to_string(vocab));
  }
};

// log p over the vocabulary for the next token after `prefix`.
using StepScorer =
    std::function<std::vector<double>(const std::vector<int>& prefix)>;

namespace detail {

inline double length_normalized(double raw, int length, double penalty) {
  return raw / std::pow(static_cast<double>(length), penalty);
}

inline bool ids_less(const std::vector<int>& a, const std::vector<int>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace detail

// Returns up to `beam` hypotheses. If nothing finished within max_len, the
// single best unfinished hypothesis is returned with finished=false.
inline std::vector<BeamHypothesis> beam_search(const std::vector<int>& context,
                                               const StepScorer& scorer,
                                               const BeamConfig& cfg,
                                               int vocab) {
  cfg.validate(vocab);

  struct Active {
    std::vector<int> ids;
    double raw = 0.0;
  };
  std::vector<Active> actives{Active{}};
  std::vector<BeamHypothesis> finished;

  std::vector<int> prefix;
  for (int step = 0; step < cfg.max_len && !actives.empty(); ++step) {
    std::vector<Active> candidates;
    candidates.reserve(actives.size() * static_cast<size_t>(vocab));
    for (const Active& a : actives) {
      prefix = context;
      prefix.insert(prefix.end(), a.ids.begin(), a.ids.end());
      const std::vector<double> lp = scorer(prefix);
      if (static_cast<int>(lp.size()) != vocab)
        throw DimensionError("beam: scorer returned " +
                             std::to_string(lp.size()) + " log-probs for a " +
                             std::to_string(vocab) + "-token vocabulary");
      for (int tok = 0; tok < vocab; ++tok) {
        const double raw = a.raw + lp[static_cast<size_t>(tok)];
        if (tok == cfg.eos_id) {
          // a zero-probability terminator is not a finish
          if (!std::isfinite(raw)) continue;
          BeamHypothesis h;
          h.ids = a.ids;
          h.score_raw = raw;
          h.length = static_cast<int>(a.ids.size()) + 1;
          h.score_norm =
              detail::length_normalized(raw, h.length, cfg.length_penalty);
          h.finished = true;
          finished.push_back(std::move(h));
        } else {
          Active next;
          next.ids = a.ids;
          next.ids.push_back(tok);
          next.raw = raw;
          candidates.push_back(std::move(next));
        }
      }
    }
    // keep the `beam` best partials by cumulative log-prob
    std::sort(candidates.begin(), candidates.end(),
              [](const Active& a, const Active& b) {
                if (a.raw != b.raw) return a.raw > b.raw;
                return detail::ids_less(a.ids, b.ids);
              });
    if (static_cast<int>(candidates.size()) > cfg.beam)
      candidates.resize(static_cast<size_t>(cfg.beam));
    actives = std::move(candidates);
  }

  if (finished.empty()) {
    // Nothing terminated: surface the best partial, flagged unfinished.
    BeamHypothesis h;
    if (!actives.empty()) {
      const Active& a = actives.front();  // actives kept sorted best-first
      h.ids = a.ids;
      h.score_raw = a.raw;
      h.length = static_cast<int>(a.ids.size());
      h.score_norm = detail::length_normalized(
          a.raw, std::max(h.length, 1), cfg.length_penalty);
    }
    h.finished = false;
    return {h};
  }

  std::sort(finished.begin(), finished.end(),
            [](const BeamHypothesis& a, const BeamHypothesis& b) {
              if (a.score_norm != b.score_norm) return a.score_norm > b.score_norm;
              return detail::ids_less(a.ids, b.ids);
            });
  if (static_cast<int>(finished.size()) > cfg.beam)
    finished.resize(static_cast<size_t>(cfg.beam));
  return finished;
}

// Exhaustive reference: enumerates every finished sequence of at most
// cfg.max_len generated tokens (eos included) and ranks them identically.
// Only usable for tiny vocabularies; tests compare beam_search against it.
inline std::vector<BeamHypothesis> brute_force_search(
    const std::vector<int>& context, const StepScorer& scorer,
    const BeamConfig& cfg, int vocab) {
  cfg.validate(vocab);
  std::vector<BeamHypothesis> all;
  std::vector<int> ids;
  std::function<void(double)> walk = [&](double raw) {
    std::vector<int> prefix = context;
    prefix.insert(prefix.end(), ids.begin(), ids.end());
    const std::vector<double> lp = scorer(prefix);
    const double eos_raw = raw + lp[static_cast<size_t>(cfg.eos_id)];
    if (std::isfinite(eos_raw)) {  // same rule as the beam: -inf cannot finish
      BeamHypothesis h;
      h.ids = ids;
      h.score_raw = eos_raw;
      h.length = static_cast<int>(ids.size()) + 1;
      h.score_norm =
          detail::length_normalized(h.score_raw, h.length, cfg.length_penalty);
      h.finished = true;
      all.push_back(std::move(h));
    }
    if (static_cast<int>(ids.size()) + 1 >= cfg.max_len) return;
    for (int tok = 0; tok < vocab; ++tok) {
      if (tok == cfg.eos_id) continue;
      ids.push_back(tok);
      walk(raw + lp[static_cast<size_t>(tok)]);
      ids.pop_back();
    }
  };
  walk(0.0);
  std::sort(all.begin(), all.end(),
            [](const BeamHypothesis& a, const BeamHypothesis& b) {
              if (a.score_norm != b.score_norm) return a.score_norm > b.score_norm;
              return detail::ids_less(a.ids, b.ids);
            });
  if (static_cast<int>(all.size()) > cfg.beam)
    all.resize(static_cast<size_t>(cfg.beam));
  return all;
}

}  // namespace hypofuse
