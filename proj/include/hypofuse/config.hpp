#pragma once

// Run configuration. One JSON document drives every pipeline stage; unknown
// keys are rejected so typos cannot silently fall back to defaults. The
// FNV-1a hash of the canonical serialization is stamped into every artifact
// and manifest for traceability.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypofuse/common.hpp"
#include "hypofuse/hypo.hpp"
#include "hypofuse/io.hpp"
#include "hypofuse/lm.hpp"
#include "hypofuse/task.hpp"
#include "hypofuse/trainer.hpp"

namespace hypofuse {

struct ModelSection {
  int layers = 4;
  int dim = 64;
  int heads = 4;
  int block = 256;
  int prompt_len = 10;
  int tunable_layers = -1;  // -1: all but the first layer
  int lora_rank = 4;

  LmConfig lm_config(int vocab, TuneMode mode) const {
    LmConfig c;
    c.layers = layers;
    c.dim = dim;
    c.heads = heads;
    c.block = block;
    c.vocab = vocab;
    c.prompt_len = prompt_len;
    c.tunable_layers = tunable_layers;
    c.lora_rank = lora_rank;
    c.mode = mode;
    return c;
  }
};

struct TranslatorSection {
  int layers = 2;
  int dim = 48;
  int heads = 4;
  int block = 96;
  int epochs = 6;
  int batch = 16;
  int accum = 1;
  double lr_start = 3e-3;
  double lr_end = 3e-4;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
};

struct DecodeSection {
  int beam = 5;
  int max_extra = 2;  // decode budget beyond the source length
  double length_penalty = 1.0;
};

struct DataSection {
  double split_train = 0.8;
  double split_dev = 0.1;
  double split_test = 0.1;
  int pretrain_records = 2000;
  int pretrain_variants = 5;
};

struct PretrainSection {
  int epochs = 2;
  int batch = 8;
  int accum = 1;
  double lr_start = 3e-3;
  double lr_end = 1e-4;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  bool dev_select = false;
};

struct TrainSection {
  std::string mode = "adapter";  // adapter | lora | frozen
  int epochs = 2;
  int batch = 4;
  int accum = 8;
  double lr_start = 1e-2;
  double lr_end = 1e-5;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int n_use = 5;
  std::vector<int> n_sweep = {1, 3, 5};
  std::string instruction = kDefaultInstruction;
  std::string response_marker = kDefaultResponseMarker;
  bool dev_select = true;
};

struct EvalSection {
  double temperature = 0.2;
  std::string sampling = "top1";  // top1 | sample
  int max_new_tokens = 64;
  std::string split = "test";
};

struct RunConfig {
  std::uint64_t seed = 1234;
  TaskConfig task;
  ModelSection model;
  TranslatorSection translator;
  DecodeSection decode;
  DataSection data;
  PretrainSection pretrain;
  TrainSection train;
  EvalSection eval;

  void validate() const {
    task.validate();
    if (decode.beam < 1) throw ConfigError("decode: beam must be >= 1");
    if (decode.max_extra < 1)
      throw ConfigError("decode: max_extra must be >= 1");
    if (data.pretrain_records < 0 || data.pretrain_variants < 1)
      throw ConfigError("data: pretrain sizes invalid");
    if (train.mode != "adapter" && train.mode != "lora" &&
        train.mode != "frozen")
      throw ConfigError("train: mode must be adapter, lora, or frozen");
    if (train.n_use < 1)
      throw ConfigError("train: n_use must be >= 1");
    if (train.n_use > decode.beam)
      throw ConfigError("train: n_use " + std::to_string(train.n_use) +
                        " exceeds decode beam " + std::to_string(decode.beam));
    for (int nv : train.n_sweep)
      if (nv < 1 || nv > decode.beam)
        throw ConfigError("train: n_sweep entry " + std::to_string(nv) +
                          " outside [1, beam]");
    if (eval.sampling != "top1" && eval.sampling != "sample")
      throw ConfigError("eval: sampling must be top1 or sample");
    if (eval.temperature <= 0.0)
      throw ConfigError("eval: temperature must be positive");
    if (eval.max_new_tokens < 1)
      throw ConfigError("eval: max_new_tokens must be >= 1");
    if (eval.split != "train" && eval.split != "dev" && eval.split != "test")
      throw ConfigError("eval: split must be train, dev, or test");
    SplitRatios{data.split_train, data.split_dev, data.split_test}.validate();
  }
};

// --- serialization ---

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return nlohmann::json{
      {"seed", c.seed},
      {"task",
       {{"name", c.task.name},
        {"lexicon_size", c.task.lexicon_size},
        {"word_len_min", c.task.word_len_min},
        {"word_len_max", c.task.word_len_max},
        {"sent_len_min", c.task.sent_len_min},
        {"sent_len_max", c.task.sent_len_max},
        {"corpus_size", c.task.corpus_size},
        {"translator_train_size", c.task.translator_train_size},
        {"noise", c.task.noise}}},
      {"model",
       {{"layers", c.model.layers},
        {"dim", c.model.dim},
        {"heads", c.model.heads},
        {"block", c.model.block},
        {"prompt_len", c.model.prompt_len},
        {"tunable_layers", c.model.tunable_layers},
        {"lora_rank", c.model.lora_rank}}},
      {"translator",
       {{"layers", c.translator.layers},
        {"dim", c.translator.dim},
        {"heads", c.translator.heads},
        {"block", c.translator.block},
        {"epochs", c.translator.epochs},
        {"batch", c.translator.batch},
        {"accum", c.translator.accum},
        {"lr_start", c.translator.lr_start},
        {"lr_end", c.translator.lr_end},
        {"weight_decay", c.translator.weight_decay},
        {"grad_clip", c.translator.grad_clip}}},
      {"decode",
       {{"beam", c.decode.beam},
        {"max_extra", c.decode.max_extra},
        {"length_penalty", c.decode.length_penalty}}},
      {"data",
       {{"split_train", c.data.split_train},
        {"split_dev", c.data.split_dev},
        {"split_test", c.data.split_test},
        {"pretrain_records", c.data.pretrain_records},
        {"pretrain_variants", c.data.pretrain_variants}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"batch", c.pretrain.batch},
        {"accum", c.pretrain.accum},
        {"lr_start", c.pretrain.lr_start},
        {"lr_end", c.pretrain.lr_end},
        {"weight_decay", c.pretrain.weight_decay},
        {"grad_clip", c.pretrain.grad_clip},
        {"dev_select", c.pretrain.dev_select}}},
      {"train",
       {{"mode", c.train.mode},
        {"epochs", c.train.epochs},
        {"batch", c.train.batch},
        {"accum", c.train.accum},
        {"lr_start", c.train.lr_start},
        {"lr_end", c.train.lr_end},
        {"weight_decay", c.train.weight_decay},
        {"grad_clip", c.train.grad_clip},
        {"n_use", c.train.n_use},
        {"n_sweep", c.train.n_sweep},
        {"instruction", c.train.instruction},
        {"response_marker", c.train.response_marker},
        {"dev_select", c.train.dev_select}}},
      {"eval",
       {{"temperature", c.eval.temperature},
        {"sampling", c.eval.sampling},
        {"max_new_tokens", c.eval.max_new_tokens},
        {"split", c.eval.split}}}};
}

namespace detail {

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  reject_unknown_keys(j,
                      {"seed", "task", "model", "translator", "decode", "data",
                       "pretrain", "train", "eval"},
                      "config");
  detail::get_if(j, "seed", c.seed);
  if (j.contains("task")) {
    const auto& s = j.at("task");
    reject_unknown_keys(s,
                        {"name", "lexicon_size", "word_len_min", "word_len_max",
                         "sent_len_min", "sent_len_max", "corpus_size",
                         "translator_train_size", "noise"},
                        "config.task");
    detail::get_if(s, "name", c.task.name);
    detail::get_if(s, "lexicon_size", c.task.lexicon_size);
    detail::get_if(s, "word_len_min", c.task.word_len_min);
    detail::get_if(s, "word_len_max", c.task.word_len_max);
    detail::get_if(s, "sent_len_min", c.task.sent_len_min);
    detail::get_if(s, "sent_len_max", c.task.sent_len_max);
    detail::get_if(s, "corpus_size", c.task.corpus_size);
    detail::get_if(s, "translator_train_size", c.task.translator_train_size);
    detail::get_if(s, "noise", c.task.noise);
  }
  if (j.contains("model")) {
    const auto& s = j.at("model");
    reject_unknown_keys(s,
                        {"layers", "dim", "heads", "block", "prompt_len",
                         "tunable_layers", "lora_rank"},
                        "config.model");
    detail::get_if(s, "layers", c.model.layers);
    detail::get_if(s, "dim", c.model.dim);
    detail::get_if(s, "heads", c.model.heads);
    detail::get_if(s, "block", c.model.block);
    detail::get_if(s, "prompt_len", c.model.prompt_len);
    detail::get_if(s, "tunable_layers", c.model.tunable_layers);
    detail::get_if(s, "lora_rank", c.model.lora_rank);
  }
  if (j.contains("translator")) {
    const auto& s = j.at("translator");
    reject_unknown_keys(s,
                        {"layers", "dim", "heads", "block", "epochs", "batch",
                         "accum", "lr_start", "lr_end", "weight_decay",
                         "grad_clip"},
                        "config.translator");
    detail::get_if(s, "layers", c.translator.layers);
    detail::get_if(s, "dim", c.translator.dim);
    detail::get_if(s, "heads", c.translator.heads);
    detail::get_if(s, "block", c.translator.block);
    detail::get_if(s, "epochs", c.translator.epochs);
    detail::get_if(s, "batch", c.translator.batch);
    detail::get_if(s, "accum", c.translator.accum);
    detail::get_if(s, "lr_start", c.translator.lr_start);
    detail::get_if(s, "lr_end", c.translator.lr_end);
    detail::get_if(s, "weight_decay", c.translator.weight_decay);
    detail::get_if(s, "grad_clip", c.translator.grad_clip);
  }
  if (j.contains("decode")) {
    const auto& s = j.at("decode");
    reject_unknown_keys(s, {"beam", "max_extra", "length_penalty"},
                        "config.decode");
    detail::get_if(s, "beam", c.decode.beam);
    detail::get_if(s, "max_extra", c.decode.max_extra);
    detail::get_if(s, "length_penalty", c.decode.length_penalty);
  }
  if (j.contains("data")) {
    const auto& s = j.at("data");
    reject_unknown_keys(s,
                        {"split_train", "split_dev", "split_test",
                         "pretrain_records", "pretrain_variants"},
                        "config.data");
    detail::get_if(s, "split_train", c.data.split_train);
    detail::get_if(s, "split_dev", c.data.split_dev);
    detail::get_if(s, "split_test", c.data.split_test);
    detail::get_if(s, "pretrain_records", c.data.pretrain_records);
    detail::get_if(s, "pretrain_variants", c.data.pretrain_variants);
  }
  if (j.contains("pretrain")) {
    const auto& s = j.at("pretrain");
    reject_unknown_keys(s,
                        {"epochs", "batch", "accum", "lr_start", "lr_end",
                         "weight_decay", "grad_clip", "dev_select"},
                        "config.pretrain");
    detail::get_if(s, "epochs", c.pretrain.epochs);
    detail::get_if(s, "batch", c.pretrain.batch);
    detail::get_if(s, "accum", c.pretrain.accum);
    detail::get_if(s, "lr_start", c.pretrain.lr_start);
    detail::get_if(s, "lr_end", c.pretrain.lr_end);
    detail::get_if(s, "weight_decay", c.pretrain.weight_decay);
    detail::get_if(s, "grad_clip", c.pretrain.grad_clip);
    detail::get_if(s, "dev_select", c.pretrain.dev_select);
  }
  if (j.contains("train")) {
    const auto& s = j.at("train");
    reject_unknown_keys(s,
                        {"mode", "epochs", "batch", "accum", "lr_start",
                         "lr_end", "weight_decay", "grad_clip", "n_use",
                         "n_sweep", "instruction", "response_marker",
                         "dev_select"},
                        "config.train");
    detail::get_if(s, "mode", c.train.mode);
    detail::get_if(s, "epochs", c.train.epochs);
    detail::get_if(s, "batch", c.train.batch);
    detail::get_if(s, "accum", c.train.accum);
    detail::get_if(s, "lr_start", c.train.lr_start);
    detail::get_if(s, "lr_end", c.train.lr_end);
    detail::get_if(s, "weight_decay", c.train.weight_decay);
    detail::get_if(s, "grad_clip", c.train.grad_clip);
    detail::get_if(s, "n_use", c.train.n_use);
    detail::get_if(s, "n_sweep", c.train.n_sweep);
    detail::get_if(s, "instruction", c.train.instruction);
    detail::get_if(s, "response_marker", c.train.response_marker);
    detail::get_if(s, "dev_select", c.train.dev_select);
  }
  if (j.contains("eval")) {
    const auto& s = j.at("eval");
    reject_unknown_keys(
        s, {"temperature", "sampling", "max_new_tokens", "split"},
        "config.eval");
    detail::get_if(s, "temperature", c.eval.temperature);
    detail::get_if(s, "sampling", c.eval.sampling);
    detail::get_if(s, "max_new_tokens", c.eval.max_new_tokens);
    detail::get_if(s, "split", c.eval.split);
  }
  c.validate();
  return c;
}

// Hash of the canonical full serialization (defaults included), so the same
// effective configuration always hashes the same regardless of how sparsely
// the input file spelled it.
inline std::uint64_t config_hash(const RunConfig& c) {
  return fnv1a64(run_config_to_json(c).dump());
}

// "--section.key=value" overrides applied to the JSON document before
// parsing. Values are interpreted by the existing field's type.
inline void apply_override(nlohmann::json& doc, const std::string& path,
                           const std::string& value) {
  const size_t dot = path.find('.');
  nlohmann::json* slot = nullptr;
  nlohmann::json defaults = run_config_to_json(RunConfig{});
  const nlohmann::json* def_slot = nullptr;
  if (dot == std::string::npos) {
    if (!defaults.contains(path))
      throw ConfigError("override: unknown key '" + path + "'");
    slot = &doc[path];
    def_slot = &defaults.at(path);
  } else {
    const std::string section = path.substr(0, dot);
    const std::string key = path.substr(dot + 1);
    if (!defaults.contains(section) || !defaults.at(section).contains(key))
      throw ConfigError("override: unknown key '" + path + "'");
    slot = &doc[section][key];
    def_slot = &defaults.at(section).at(key);
  }
  try {
    if (def_slot->is_string()) {
      *slot = value;
    } else if (def_slot->is_boolean()) {
      if (value == "true" || value == "1")
        *slot = true;
      else if (value == "false" || value == "0")
        *slot = false;
      else
        throw ConfigError("override: '" + value + "' is not a boolean");
    } else if (def_slot->is_number_float()) {
      *slot = std::stod(value);
    } else if (def_slot->is_number_unsigned()) {
      *slot = static_cast<std::uint64_t>(std::stoull(value));
    } else if (def_slot->is_number_integer()) {
      *slot = static_cast<std::int64_t>(std::stoll(value));
    } else if (def_slot->is_array()) {
      // comma-separated integers, e.g. --train.n_sweep=1,3,5
      std::vector<int> items;
      std::string cur;
      for (char ch : value + ",") {
        if (ch == ',') {
          if (!cur.empty()) items.push_back(std::stoi(cur));
          cur.clear();
        } else {
          cur.push_back(ch);
        }
      }
      *slot = items;
    } else {
      throw ConfigError("override: key '" + path + "' is not overridable");
    }
  } catch (const std::invalid_argument&) {
    throw ConfigError("override: cannot parse '" + value + "' for key '" +
                      path + "'");
  } catch (const std::out_of_range&) {
    throw ConfigError("override: value '" + value + "' out of range for '" +
                      path + "'");
  }
}

inline RunConfig load_run_config(
    const std::string& config_path,
    const std::vector<std::pair<std::string, std::string>>& overrides) {
  nlohmann::json doc = nlohmann::json::object();
  if (!config_path.empty()) doc = load_json(config_path);
  for (const auto& [key, value] : overrides) apply_override(doc, key, value);
  return run_config_from_json(doc);
}

}  // namespace hypofuse
