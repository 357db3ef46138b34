#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace hsd {

using TokenId = std::int32_t;
using Sentence = std::vector<std::string>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kNumSpecial = 4;

inline const std::string kPadToken = "<pad>";
inline const std::string kBosToken = "<s>";
inline const std::string kEosToken = "</s>";
inline const std::string kUnkToken = "<unk>";

/// Whitespace tokenization.
inline Sentence tokenize(std::string_view line) {
  Sentence out;
  std::istringstream in{std::string(line)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

inline std::string join(const Sentence& words, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += sep;
    out += words[i];
  }
  return out;
}

/// Closed vocabulary. Ids 0..3 are the reserved special tokens; the rest are
/// sorted by descending frequency, ties broken lexicographically.
class Vocab {
 public:
  Vocab() : words_{kPadToken, kBosToken, kEosToken, kUnkToken} { reindex(); }

  explicit Vocab(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.size() < static_cast<std::size_t>(kNumSpecial) || words_[kPad] != kPadToken ||
        words_[kBos] != kBosToken || words_[kEos] != kEosToken || words_[kUnk] != kUnkToken)
      throw std::invalid_argument("Vocab: reserved tokens missing or misplaced");
    reindex();
    if (index_.size() != words_.size()) throw std::invalid_argument("Vocab: duplicate entries");
  }

  static Vocab build(const std::vector<Sentence>& sentences) {
    if (sentences.empty()) throw std::invalid_argument("build_vocab: empty corpus");
    std::map<std::string, std::size_t> freq;
    for (const auto& s : sentences)
      for (const auto& w : s)
        if (w != kPadToken && w != kBosToken && w != kEosToken && w != kUnkToken) ++freq[w];
    std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> words{kPadToken, kBosToken, kEosToken, kUnkToken};
    for (auto& [w, _] : items) words.push_back(w);
    return Vocab(std::move(words));
  }

  [[nodiscard]] std::size_t size() const noexcept { return words_.size(); }
  [[nodiscard]] const std::vector<std::string>& words() const noexcept { return words_; }

  [[nodiscard]] TokenId id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }
  [[nodiscard]] bool contains(const std::string& w) const { return index_.count(w) != 0; }
  [[nodiscard]] const std::string& word(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw std::out_of_range("Vocab: id out of range");
    return words_[static_cast<std::size_t>(id)];
  }

  [[nodiscard]] std::vector<TokenId> encode(const Sentence& s) const {
    std::vector<TokenId> out;
    out.reserve(s.size());
    for (const auto& w : s) out.push_back(id(w));
    return out;
  }

  /// Stops at the first end-of-sentence token.
  [[nodiscard]] Sentence decode(const std::vector<TokenId>& ids) const {
    Sentence out;
    for (TokenId t : ids) {
      if (t == kEos) break;
      out.push_back(word(t));
    }
    return out;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.words_ == b.words_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<TokenId>(i));
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace hsd
