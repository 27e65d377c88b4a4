#pragma once

// Filesystem and JSON plumbing shared by the pipeline stages. All artifact
// paths are workdir-relative; nothing here writes timestamps, so outputs are
// byte-stable across reruns.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypofuse/common.hpp"

namespace hypofuse {

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::string out((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

inline nlohmann::json load_json(const std::string& path) {
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

inline void save_json(const std::string& path, const nlohmann::json& j,
                      int indent = 2) {
  write_text_file(path, j.dump(indent) + "\n");
}

inline bool file_exists(const std::string& path) {
  return std::filesystem::exists(path);
}

// Strict object schema: every listed key present, nothing else allowed.
inline void require_exact_keys(const nlohmann::json& j,
                               const std::vector<std::string>& keys,
                               const std::string& what) {
  for (const std::string& k : keys)
    if (!j.contains(k)) throw DataError(what + ": missing key '" + k + "'");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const std::string& k : keys)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) throw DataError(what + ": unknown key '" + it.key() + "'");
  }
}

// Lenient variant for configs: listed keys are optional, unknown keys reject.
inline void reject_unknown_keys(const nlohmann::json& j,
                                const std::vector<std::string>& keys,
                                const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const std::string& k : keys)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError(what + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace hypofuse
