#pragma once

// Checkpoint container: a JSON document holding the model config plus every
// named tensor. nlohmann::json keeps keys sorted and prints doubles with
// shortest round-trip formatting, so saves are byte-stable and loads are
// bit-exact.

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypofuse/common.hpp"
#include "hypofuse/lm.hpp"

namespace hypofuse {

inline constexpr const char* kCheckpointFormat = "hypofuse-checkpoint-v1";

inline nlohmann::json lm_config_to_json(const LmConfig& c) {
  return nlohmann::json{
      {"layers", c.layers},       {"dim", c.dim},
      {"heads", c.heads},         {"block", c.block},
      {"vocab", c.vocab},         {"prompt_len", c.prompt_len},
      {"tunable_layers", c.tunable_layers},
      {"lora_rank", c.lora_rank}, {"lora_scale", c.lora_scale},
      {"mode", to_string(c.mode)}};
}

inline LmConfig lm_config_from_json(const nlohmann::json& j) {
  LmConfig c;
  c.layers = j.at("layers").get<int>();
  c.dim = j.at("dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.block = j.at("block").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.prompt_len = j.at("prompt_len").get<int>();
  c.tunable_layers = j.at("tunable_layers").get<int>();
  c.lora_rank = j.at("lora_rank").get<int>();
  c.lora_scale = j.at("lora_scale").get<double>();
  c.mode = tune_mode_from(j.at("mode").get<std::string>());
  return c;
}

inline nlohmann::json checkpoint_to_json(const Lm& model) {
  nlohmann::json tensors = nlohmann::json::object();
  for (auto& [name, t] : model.named_parameters()) {
    tensors[name] = {{"shape", t.shape()}, {"data", t.value()}};
  }
  return nlohmann::json{{"format", kCheckpointFormat},
                        {"config", lm_config_to_json(model.config())},
                        {"tensors", std::move(tensors)}};
}

inline void save_checkpoint(const std::string& path, const Lm& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  out << checkpoint_to_json(model).dump() << '\n';
}

// Builds a model with config `cfg` and fills it from the checkpoint document.
// Tensors named in the document must exist in the model with matching shapes.
// Model tensors absent from the document must be trainable (fresh adapter or
// lora state initialized from `rng`); a missing frozen tensor is an error.
inline Lm checkpoint_from_json(const nlohmann::json& j, LmConfig cfg,
                               Rng& rng) {
  if (!j.contains("format") || j.at("format").get<std::string>() != kCheckpointFormat)
    throw DataError("checkpoint: unrecognized container format");
  const nlohmann::json& stored_cfg = j.at("config");
  LmConfig saved = lm_config_from_json(stored_cfg);
  // Core geometry must agree; mode and adapter geometry may differ when a
  // frozen base is being dressed with fresh tunable state.
  if (saved.layers != cfg.layers || saved.dim != cfg.dim ||
      saved.heads != cfg.heads || saved.block != cfg.block ||
      saved.vocab != cfg.vocab)
    throw DataError(
        "checkpoint: stored geometry (layers " + std::to_string(saved.layers) +
        ", dim " + std::to_string(saved.dim) + ", heads " +
        std::to_string(saved.heads) + ", block " + std::to_string(saved.block) +
        ", vocab " + std::to_string(saved.vocab) +
        ") does not match requested config");
  Lm model(cfg, rng);
  const nlohmann::json& tensors = j.at("tensors");
  auto params = model.named_parameters();
  for (auto& [name, t] : params) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      if (!t.requires_grad())
        throw DataError("checkpoint: missing tensor '" + name + "'");
      continue;  // fresh tunable state keeps its initialization
    }
    const auto shape = it->at("shape").get<std::vector<size_t>>();
    if (shape != t.shape())
      throw DataError("checkpoint: tensor '" + name + "' has shape " +
                      detail::shape_str(shape) + ", model expects " +
                      detail::shape_str(t.shape()));
    auto data = it->at("data").get<std::vector<double>>();
    Tensor mut = t;
    mut.value() = std::move(data);
  }
  // Reject truly unknown names so silent typos cannot pass.
  for (auto it = tensors.begin(); it != tensors.end(); ++it) {
    bool known = false;
    for (auto& [name, t] : params)
      if (name == it.key()) {
        known = true;
        break;
      }
    if (!known)
      throw DataError("checkpoint: unexpected tensor '" + it.key() + "'");
  }
  return model;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

inline Lm load_checkpoint(const std::string& path, LmConfig cfg, Rng& rng) {
  return checkpoint_from_json(read_json_file(path), cfg, rng);
}

// Restore with the configuration stored in the checkpoint itself.
inline Lm load_checkpoint(const std::string& path, Rng& rng) {
  nlohmann::json j = read_json_file(path);
  if (!j.contains("config")) throw DataError("checkpoint: missing config");
  return checkpoint_from_json(j, lm_config_from_json(j.at("config")), rng);
}

}  // namespace hypofuse
