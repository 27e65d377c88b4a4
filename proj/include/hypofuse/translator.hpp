#pragma once

// Toy foundation translator: a decoder-only LM conditioned on the source as
// a prefix, [bos] source [sep] target [eos], with the loss masked to the
// target and eos. Beam decoding over its next-token distribution produces
// the N-best hypothesis lists the fusion model consumes.

#include <string>
#include <vector>

#include "hypofuse/beam.hpp"
#include "hypofuse/lm.hpp"
#include "hypofuse/tokenizer.hpp"

namespace hypofuse {

struct EncodedExample {
  std::vector<int> ids;              // input positions
  std::vector<int> targets;          // next-token targets
  std::vector<unsigned char> mask;   // loss positions
};

// [bos] src [sep] tgt [eos] shifted into (ids, targets); the mask covers the
// target tokens plus eos, never the prefix.
inline EncodedExample encode_translation_pair(const Tokenizer& tok,
                                              const std::string& source,
                                              const std::string& target) {
  std::vector<int> seq;
  seq.push_back(Tokenizer::kBos);
  for (int id : tok.encode(source)) seq.push_back(id);
  seq.push_back(Tokenizer::kSep);
  const size_t prefix_len = seq.size();
  for (int id : tok.encode(target)) seq.push_back(id);
  seq.push_back(Tokenizer::kEos);

  EncodedExample ex;
  ex.ids.assign(seq.begin(), seq.end() - 1);
  ex.targets.assign(seq.begin() + 1, seq.end());
  ex.mask.assign(ex.targets.size(), 0);
  for (size_t t = prefix_len - 1; t < ex.targets.size(); ++t) ex.mask[t] = 1;
  return ex;
}

inline std::vector<int> translation_prefix(const Tokenizer& tok,
                                           const std::string& source) {
  std::vector<int> seq;
  seq.push_back(Tokenizer::kBos);
  for (int id : tok.encode(source)) seq.push_back(id);
  seq.push_back(Tokenizer::kSep);
  return seq;
}

// Adapts a model to the beam searcher's scorer interface.
inline StepScorer model_scorer(const Lm& model) {
  return [&model](const std::vector<int>& prefix) {
    return model.next_log_probs(prefix);
  };
}

struct DecodedHypothesis {
  std::string text;
  double log_prob;   // normalized beam score
  bool finished;
};

// N-best decode of one source sentence. max_len = source tokens + max_extra,
// enough for the length-preserving task plus slack for model insertions.
inline std::vector<DecodedHypothesis> decode_nbest(const Lm& model,
                                                   const Tokenizer& tok,
                                                   const std::string& source,
                                                   int beam, int max_extra,
                                                   double length_penalty) {
  const std::vector<int> ctx = translation_prefix(tok, source);
  BeamConfig bc;
  bc.beam = beam;
  bc.max_len = static_cast<int>(tok.encode(source).size()) + max_extra;
  bc.length_penalty = length_penalty;
  bc.eos_id = Tokenizer::kEos;
  std::vector<BeamHypothesis> hyps =
      beam_search(ctx, model_scorer(model), bc, model.config().vocab);
  std::vector<DecodedHypothesis> out;
  out.reserve(hyps.size());
  for (const BeamHypothesis& h : hyps)
    out.push_back({tok.decode(h.ids), h.score_norm, h.finished});
  return out;
}

}  // namespace hypofuse
