#pragma once

// Synthetic translation task. Source sentences are short sequences of lexicon
// words over 'a'..'m'; the reference translation applies a seeded bijective
// character cipher into 'n'..'z' and swaps each adjacent word pair. The two
// alphabets are disjoint, so source text can never leak into target metrics.
//
// The reference function is total, deterministic, and injective: the cipher
// is a bijection per character and the word swap is an involution.

#include <array>
#include <cstdio>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypofuse/common.hpp"
#include "hypofuse/rng.hpp"

namespace hypofuse {

inline constexpr int kSourceAlphabet = 13;  // 'a'..'m'
inline constexpr char kSourceFirst = 'a';
inline constexpr char kTargetFirst = 'n';

struct TaskConfig {
  std::string name = "toy-cipher";
  int lexicon_size = 48;
  int word_len_min = 3;
  int word_len_max = 4;
  int sent_len_min = 3;
  int sent_len_max = 4;
  int corpus_size = 1000;            // sentences decoded into N-best lists
  int translator_train_size = 900;   // separate pairs that train the translator
  double noise = 0.1;                // per-letter corruption rate

  void validate() const {
    if (lexicon_size < 2) throw ConfigError("task: lexicon_size must be >= 2");
    if (word_len_min < 1 || word_len_max < word_len_min)
      throw ConfigError("task: word length bounds invalid");
    if (sent_len_min < 1 || sent_len_max < sent_len_min)
      throw ConfigError("task: sentence length bounds invalid");
    if (corpus_size < 1) throw ConfigError("task: corpus_size must be >= 1");
    if (translator_train_size < 1)
      throw ConfigError("task: translator_train_size must be >= 1");
    if (noise < 0.0 || noise >= 1.0)
      throw ConfigError("task: noise must be in [0, 1)");
  }
};

struct SentencePair {
  std::string id;
  std::string source;
  std::string reference;
};

class Task {
 public:
  // Realizes the lexicon and cipher from the task's own random stream.
  static Task make(TaskConfig cfg, Rng& rng) {
    cfg.validate();
    Task t;
    t.cfg_ = cfg;
    // seeded permutation 'a'+i -> 'n'+perm[i]
    std::vector<int> perm(kSourceAlphabet);
    for (int i = 0; i < kSourceAlphabet; ++i) perm[static_cast<size_t>(i)] = i;
    rng.shuffle(perm);
    for (int i = 0; i < kSourceAlphabet; ++i)
      t.cipher_[static_cast<size_t>(i)] =
          static_cast<char>(kTargetFirst + perm[static_cast<size_t>(i)]);
    // distinct lexicon words
    std::set<std::string> seen;
    while (static_cast<int>(t.lexicon_.size()) < cfg.lexicon_size) {
      const int len = static_cast<int>(
          rng.range(cfg.word_len_min, cfg.word_len_max));
      std::string w;
      for (int i = 0; i < len; ++i)
        w.push_back(static_cast<char>(kSourceFirst + rng.below(kSourceAlphabet)));
      if (seen.insert(w).second) t.lexicon_.push_back(w);
    }
    return t;
  }

  const TaskConfig& config() const { return cfg_; }
  const std::vector<std::string>& lexicon() const { return lexicon_; }
  std::string cipher_string() const {
    return std::string(cipher_.begin(), cipher_.end());
  }

  static std::string source_charset() {
    std::string s(" ");
    for (int i = 0; i < kSourceAlphabet; ++i)
      s.push_back(static_cast<char>(kSourceFirst + i));
    return s;
  }
  static std::string target_charset() {
    std::string s(" ");
    for (int i = 0; i < kSourceAlphabet; ++i)
      s.push_back(static_cast<char>(kTargetFirst + i));
    return s;
  }

  std::string sample_sentence(Rng& rng) const {
    const int n = static_cast<int>(rng.range(cfg_.sent_len_min, cfg_.sent_len_max));
    std::string out;
    for (int i = 0; i < n; ++i) {
      if (i) out.push_back(' ');
      out += lexicon_[rng.below(lexicon_.size())];
    }
    return out;
  }

  // Cipher every letter, then swap adjacent word pairs (odd tail stays put).
  std::string reference(const std::string& source) const {
    std::vector<std::string> words = split_words(source);
    for (std::string& w : words)
      for (char& c : w) {
        if (c < kSourceFirst || c >= kSourceFirst + kSourceAlphabet)
          throw DataError(std::string("task: source character '") + c +
                          "' outside alphabet 'a'..'m'");
        c = cipher_[static_cast<size_t>(c - kSourceFirst)];
      }
    for (size_t i = 0; i + 1 < words.size(); i += 2) std::swap(words[i], words[i + 1]);
    return join_words(words);
  }

  // Per-letter substitution noise over the target alphabet; spaces survive,
  // so corruption never changes word structure.
  static std::string corrupt(const std::string& text, double noise, Rng& rng) {
    std::string out = text;
    for (char& c : out) {
      if (c == ' ') continue;
      if (rng.uniform() < noise) {
        char repl;
        do {
          repl = static_cast<char>(kTargetFirst + rng.below(kSourceAlphabet));
        } while (repl == c);
        c = repl;
      }
    }
    return out;
  }

  std::vector<SentencePair> sample_pairs(int count, const char* id_prefix,
                                         Rng& rng) const {
    std::vector<SentencePair> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
      SentencePair p;
      char buf[16];
      std::snprintf(buf, sizeof buf, "%s%06d", id_prefix, i);
      p.id = buf;
      p.source = sample_sentence(rng);
      p.reference = reference(p.source);
      out.push_back(std::move(p));
    }
    return out;
  }

  std::string lang_pair() const { return "toy-src->toy-tgt"; }

  std::string cipher() const { return cipher_string(); }

  nlohmann::json to_json() const {
    return nlohmann::json{{"name", cfg_.name},
                          {"lexicon_size", cfg_.lexicon_size},
                          {"word_len_min", cfg_.word_len_min},
                          {"word_len_max", cfg_.word_len_max},
                          {"sent_len_min", cfg_.sent_len_min},
                          {"sent_len_max", cfg_.sent_len_max},
                          {"corpus_size", cfg_.corpus_size},
                          {"translator_train_size", cfg_.translator_train_size},
                          {"noise", cfg_.noise},
                          {"lexicon", lexicon_},
                          {"cipher", cipher_string()}};
  }

  static Task from_json(const nlohmann::json& j) {
    Task t;
    t.cfg_.name = j.at("name").get<std::string>();
    t.cfg_.lexicon_size = j.at("lexicon_size").get<int>();
    t.cfg_.word_len_min = j.at("word_len_min").get<int>();
    t.cfg_.word_len_max = j.at("word_len_max").get<int>();
    t.cfg_.sent_len_min = j.at("sent_len_min").get<int>();
    t.cfg_.sent_len_max = j.at("sent_len_max").get<int>();
    t.cfg_.corpus_size = j.at("corpus_size").get<int>();
    t.cfg_.translator_train_size = j.at("translator_train_size").get<int>();
    t.cfg_.noise = j.at("noise").get<double>();
    t.lexicon_ = j.at("lexicon").get<std::vector<std::string>>();
    const std::string cipher = j.at("cipher").get<std::string>();
    if (cipher.size() != kSourceAlphabet)
      throw DataError("task: cipher must map exactly 13 characters");
    std::array<bool, kSourceAlphabet> hit{};
    for (char c : cipher) {
      if (c < kTargetFirst || c >= kTargetFirst + kSourceAlphabet ||
          hit[static_cast<size_t>(c - kTargetFirst)])
        throw DataError("task: cipher must be a permutation of 'n'..'z'");
      hit[static_cast<size_t>(c - kTargetFirst)] = true;
    }
    for (int i = 0; i < kSourceAlphabet; ++i)
      t.cipher_[static_cast<size_t>(i)] = cipher[static_cast<size_t>(i)];
    return t;
  }

  static std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
  }

  static std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
      if (i) out.push_back(' ');
      out += words[i];
    }
    return out;
  }

 private:
  TaskConfig cfg_;
  std::vector<std::string> lexicon_;
  std::array<char, kSourceAlphabet> cipher_{};
};

}  // namespace hypofuse
