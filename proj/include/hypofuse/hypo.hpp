#pragma once

// Hypotheses-to-translation records and their prompt rendering.
//
// A record pairs an ordered N-best list with its reference. Rendering turns
// it into one training example:
//
//   <instruction>\n
//   1. <hyp 1>\n
//   ...
//   n. <hyp n>\n
//   <response marker><reference><eos>
//
// No bos token. The loss mask covers exactly the reference tokens plus eos;
// the instruction, numbered list, and marker are conditioning only.

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypofuse/common.hpp"
#include "hypofuse/io.hpp"
#include "hypofuse/rng.hpp"
#include "hypofuse/tokenizer.hpp"
#include "hypofuse/translator.hpp"

namespace hypofuse {

inline constexpr const char* kDefaultInstruction =
    "Integrate the following N translation candidates into one best "
    "translation:";
inline constexpr const char* kDefaultResponseMarker = "Translation: ";

struct HypoRecord {
  std::string id;
  std::string lang_pair;
  std::vector<std::string> hypotheses;  // order preserved from the N-best list
  std::string reference;
};

// Raw decode output: one source with its scored N-best list.
struct NBestEntry {
  std::string id;
  std::string source;
  std::string reference;
  std::vector<DecodedHypothesis> hypotheses;
};

namespace detail {

// Hypothesis text is injected into a newline-delimited list; any embedded
// newline would corrupt the format, so it is flattened to a space.
inline std::string sanitize_hypothesis(const std::string& text) {
  std::string out = text;
  for (char& c : out)
    if (c == '\n') c = ' ';
  return out;
}

}  // namespace detail

inline std::string render_fusion_prompt(const HypoRecord& rec, int n_use,
                                        const std::string& instruction,
                                        const std::string& response_marker) {
  if (n_use < 1) throw ConfigError("render: n_use must be >= 1");
  if (static_cast<size_t>(n_use) > rec.hypotheses.size())
    throw DataError("render: record '" + rec.id + "' has " +
                    std::to_string(rec.hypotheses.size()) +
                    " hypotheses, n_use " + std::to_string(n_use) +
                    " requested");
  std::string text = instruction;
  text.push_back('\n');
  for (int i = 0; i < n_use; ++i) {
    text += std::to_string(i + 1);
    text += ". ";
    text += detail::sanitize_hypothesis(rec.hypotheses[static_cast<size_t>(i)]);
    text.push_back('\n');
  }
  text += response_marker;
  return text;
}

// Full training example. Throws LengthError when the rendered sequence does
// not fit the model's token budget; callers count and skip such records.
inline EncodedExample render_fusion_example(const Tokenizer& tok,
                                            const HypoRecord& rec, int n_use,
                                            const std::string& instruction,
                                            const std::string& response_marker,
                                            int max_tokens) {
  const std::string prompt =
      render_fusion_prompt(rec, n_use, instruction, response_marker);
  std::vector<int> seq = tok.encode(prompt);
  const size_t prompt_len = seq.size();
  for (int id : tok.encode(rec.reference)) seq.push_back(id);
  seq.push_back(Tokenizer::kEos);
  // the model consumes seq[0..len-2] as inputs
  if (static_cast<int>(seq.size()) - 1 > max_tokens)
    throw LengthError("render: record '" + rec.id + "' renders to " +
                      std::to_string(seq.size() - 1) +
                      " input tokens, budget is " + std::to_string(max_tokens));
  EncodedExample ex;
  ex.ids.assign(seq.begin(), seq.end() - 1);
  ex.targets.assign(seq.begin() + 1, seq.end());
  ex.mask.assign(ex.targets.size(), 0);
  for (size_t t = prompt_len - 1; t < ex.targets.size(); ++t) ex.mask[t] = 1;
  return ex;
}

// --- deterministic splitting ---

struct SplitRatios {
  double train = 0.8, dev = 0.1, test = 0.1;
  void validate() const {
    if (train <= 0.0 || dev <= 0.0 || test <= 0.0 ||
        std::abs(train + dev + test - 1.0) > 1e-9)
      throw ConfigError("split ratios must be positive and sum to 1");
  }
};

struct Splits {
  std::vector<HypoRecord> train, dev, test;
};

inline Splits split_records(std::vector<HypoRecord> records,
                            const SplitRatios& ratios, Rng& rng) {
  ratios.validate();
  rng.shuffle(records);
  const size_t n = records.size();
  const size_t n_train = static_cast<size_t>(
      std::floor(static_cast<double>(n) * ratios.train));
  const size_t n_dev =
      static_cast<size_t>(std::floor(static_cast<double>(n) * ratios.dev));
  if (n_train == 0 || n_dev == 0 || n_train + n_dev >= n)
    throw DataError("split: " + std::to_string(n) +
                    " records leave an empty split");
  Splits s;
  s.train.assign(records.begin(), records.begin() + static_cast<long>(n_train));
  s.dev.assign(records.begin() + static_cast<long>(n_train),
               records.begin() + static_cast<long>(n_train + n_dev));
  s.test.assign(records.begin() + static_cast<long>(n_train + n_dev),
                records.end());
  return s;
}

// --- wire formats ---

inline nlohmann::json nbest_to_json(const NBestEntry& e) {
  nlohmann::json hyps = nlohmann::json::array();
  for (const DecodedHypothesis& h : e.hypotheses)
    hyps.push_back({{"text", h.text}, {"log_prob", h.log_prob}});
  return nlohmann::json{{"id", e.id},
                        {"source", e.source},
                        {"reference", e.reference},
                        {"hypotheses", std::move(hyps)}};
}

inline NBestEntry nbest_from_json(const nlohmann::json& j) {
  require_exact_keys(j, {"id", "source", "reference", "hypotheses"}, "nbest");
  NBestEntry e;
  e.id = j.at("id").get<std::string>();
  e.source = j.at("source").get<std::string>();
  e.reference = j.at("reference").get<std::string>();
  for (const nlohmann::json& h : j.at("hypotheses")) {
    require_exact_keys(h, {"text", "log_prob"}, "nbest hypothesis");
    e.hypotheses.push_back(
        {h.at("text").get<std::string>(), h.at("log_prob").get<double>(), true});
  }
  return e;
}

inline nlohmann::json record_to_json(const HypoRecord& r) {
  return nlohmann::json{{"id", r.id},
                        {"lang_pair", r.lang_pair},
                        {"hypotheses", r.hypotheses},
                        {"reference", r.reference}};
}

inline HypoRecord record_from_json(const nlohmann::json& j) {
  require_exact_keys(j, {"id", "lang_pair", "hypotheses", "reference"}, "record");
  HypoRecord r;
  r.id = j.at("id").get<std::string>();
  r.lang_pair = j.at("lang_pair").get<std::string>();
  r.hypotheses = j.at("hypotheses").get<std::vector<std::string>>();
  r.reference = j.at("reference").get<std::string>();
  if (r.hypotheses.empty())
    throw DataError("record '" + r.id + "': empty hypothesis list");
  return r;
}

template <typename T, typename ToJson>
void write_jsonl(const std::string& path, const std::vector<T>& items,
                 ToJson to_json) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const T& item : items) out << to_json(item).dump() << '\n';
}

template <typename T, typename FromJson>
std::vector<T> read_jsonl(const std::string& path, FromJson from_json) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::vector<T> items;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": malformed JSON: " + e.what());
    }
    items.push_back(from_json(j));
  }
  return items;
}

inline std::vector<HypoRecord> read_records(const std::string& path) {
  std::vector<HypoRecord> recs =
      read_jsonl<HypoRecord>(path, record_from_json);
  std::map<std::string, int> seen;
  for (const HypoRecord& r : recs)
    if (++seen[r.id] > 1)
      throw DataError(path + ": duplicate record id '" + r.id + "'");
  return recs;
}

inline void write_records(const std::string& path,
                          const std::vector<HypoRecord>& recs) {
  write_jsonl(path, recs, record_to_json);
}

}  // namespace hypofuse
