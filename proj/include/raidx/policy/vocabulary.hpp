#pragma once

#include <cctype>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace raidx {

class VocabularyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Output token inventory of the policy. The last entry is always end-of-sequence.
class Vocabulary {
 public:
  static constexpr std::string_view kEos = "<eos>";

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.empty() || tokens_.back() != kEos)
      throw VocabularyError("vocabulary must end with <eos>");
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second)
        throw VocabularyError("duplicate token " + tokens_[i]);
  }

  /// `<think>` `</think>` `<answer>` `</answer>` REAL FAKE, ten reasoning words, `<eos>`.
  static Vocabulary standard() {
    return Vocabulary({"<think>", "</think>", "<answer>", "</answer>", "REAL", "FAKE", "edges",
                       "lighting", "shadows", "texture", "noise", "blur", "smooth",
                       "consistent", "artifacts", "natural", std::string(kEos)});
  }

  /// Anonymous tokens t0..t{n-2} plus <eos>; used for small gradient probes.
  static Vocabulary synthetic(std::size_t n) {
    if (n < 2) throw VocabularyError("synthetic vocabulary needs at least 2 tokens");
    std::vector<std::string> t;
    for (std::size_t i = 0; i + 1 < n; ++i) t.push_back("t" + std::to_string(i));
    t.emplace_back(kEos);
    return Vocabulary(std::move(t));
  }

  std::size_t size() const { return tokens_.size(); }
  int eos() const { return static_cast<int>(tokens_.size() - 1); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<int> id(std::string_view tok) const {
    auto it = ids_.find(std::string(tok));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  int require(std::string_view tok) const {
    auto i = id(tok);
    if (!i) throw VocabularyError("unknown token " + std::string(tok));
    return *i;
  }
  bool has(std::string_view tok) const { return ids_.count(std::string(tok)) != 0; }

  static bool is_tag(std::string_view tok) { return !tok.empty() && tok.front() == '<'; }

  /// Text form of a token sequence up to (not including) <eos>. Adjacent
  /// non-tag tokens are separated by one space.
  std::string render(const std::vector<int>& seq) const {
    std::string out;
    bool prev_word = false;
    for (int t : seq) {
      if (t == eos()) break;
      const std::string& s = token(t);
      const bool word = !is_tag(s);
      if (word && prev_word) out += ' ';
      out += s;
      prev_word = word;
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

/// Word-level tokenizer for the prompt side (instruction + reference sentence).
/// Integers up to kMaxNumber are their own tokens; everything unknown maps to <unk>.
class PromptTokenizer {
 public:
  static constexpr int kMaxNumber = 64;

  PromptTokenizer() {
    for (const char* w :
         {"<unk>", "is", "this", "image", "REAL", "or", "FAKE", "inspect", "the", "edges",
          "lighting", "and", "texture", "then", "answer", "reference", "information", "among",
          "retrieved", "images", "are", "most", "similar", "to", "current", "labeled", "as",
          "think", "step", "by", "about", "first"})
      add(w);
    for (int n = 0; n <= kMaxNumber; ++n) add(std::to_string(n));
  }

  std::size_t size() const { return words_.size(); }
  int unknown() const { return 0; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  /// Id of integer token n, or nullopt if n is out of range.
  std::optional<int> number_id(int n) const {
    if (n < 0 || n > kMaxNumber) return std::nullopt;
    return ids_.at(std::to_string(n));
  }
  std::optional<int> number_value(int id) const {
    const std::string& w = word(id);
    if (w.empty() || !std::isdigit(static_cast<unsigned char>(w.front()))) return std::nullopt;
    return std::stoi(w);
  }

  /// Splits on whitespace and strips punctuation. "REAL"/"FAKE" keep their case;
  /// other words are lower-cased.
  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    std::string cur;
    auto flush = [&] {
      if (cur.empty()) return;
      std::string key = cur;
      if (key != "REAL" && key != "FAKE")
        for (char& c : key) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      auto it = ids_.find(key);
      out.push_back(it == ids_.end() ? unknown() : it->second);
      cur.clear();
    };
    for (char c : text) {
      if (std::isalnum(static_cast<unsigned char>(c)) || c == '<' || c == '>')
        cur += c;
      else
        flush();
    }
    flush();
    return out;
  }

 private:
  void add(const std::string& w) {
    ids_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

}  // namespace raidx
