#pragma once

// Character-level tokenizer shared by the translator and the fusion model.
// Ids 0..3 are the specials {bos, eos, pad, sep}; characters follow in
// codepoint order, so the mapping is a pure function of the charset.

#include <algorithm>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "hypofuse/common.hpp"

namespace hypofuse {

class Tokenizer {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPad = 2;
  static constexpr int kSep = 3;
  static constexpr int kNumSpecials = 4;

  Tokenizer() = default;

  explicit Tokenizer(const std::string& charset) {
    std::set<char> uniq(charset.begin(), charset.end());
    chars_.assign(uniq.begin(), uniq.end());
    char_to_id_.assign(256, -1);
    for (size_t i = 0; i < chars_.size(); ++i)
      char_to_id_[static_cast<unsigned char>(chars_[i])] =
          static_cast<int>(i) + kNumSpecials;
  }

  int vocab_size() const {
    return static_cast<int>(chars_.size()) + kNumSpecials;
  }

  // The sorted character inventory; the tokenizer's entire identity.
  std::string charset() const { return std::string(chars_.begin(), chars_.end()); }

  int id_of(char c) const {
    const int id = char_to_id_[static_cast<unsigned char>(c)];
    if (id < 0)
      throw DataError(std::string("tokenizer: character '") + printable(c) +
                      "' not in vocabulary");
    return id;
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(id_of(c));
    return ids;
  }

  // Specials are dropped; every other id maps back to its character.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || id >= vocab_size())
        throw DataError("tokenizer: id " + std::to_string(id) +
                        " outside vocabulary of " +
                        std::to_string(vocab_size()));
      if (id >= kNumSpecials)
        out.push_back(chars_[static_cast<size_t>(id - kNumSpecials)]);
    }
    return out;
  }

 private:
  static std::string printable(char c) {
    if (c == '\n') return "\\n";
    if (c == '\t') return "\\t";
    if (c >= 0x20 && c < 0x7f) return std::string(1, c);
    char buf[8];
    std::snprintf(buf, sizeof buf, "\\x%02x", static_cast<unsigned char>(c));
    return buf;
  }

  std::vector<char> chars_;
  std::vector<int> char_to_id_;
};

}  // namespace hypofuse
