#pragma once

#include "hsd/artifact.hpp"
#include "hsd/rng.hpp"
#include "hsd/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace hsd {

/// Parameters of a synthetic translation task. Source words are "s<i>";
/// unambiguous words translate to "t<i>", ambiguous ones to one of
/// "t<i>a", "t<i>b", ... (`synonyms` choices). With `reorder`, some sources
/// carry a marker splitting them into two blocks, and a target may present
/// the translated blocks in either order.
struct ToyTaskSpec {
  int vocab_size = 60;
  int synonyms = 1;
  double ambiguous_fraction = 0.0;
  bool reorder = false;
  double reorder_prob = 0.3;
  int min_len = 3;
  int max_len = 8;
  int train_size = 2000;
  int dev_size = 200;
  int test_size = 200;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size < 1) throw std::invalid_argument("ToyTaskSpec: vocab_size must be >= 1");
    if (synonyms < 1 || synonyms > 26) throw std::invalid_argument("ToyTaskSpec: synonyms must be in [1, 26]");
    if (!(ambiguous_fraction >= 0 && ambiguous_fraction <= 1))
      throw std::invalid_argument("ToyTaskSpec: ambiguous_fraction must be in [0, 1]");
    if (!(reorder_prob >= 0 && reorder_prob <= 1))
      throw std::invalid_argument("ToyTaskSpec: reorder_prob must be in [0, 1]");
    if (min_len < 1 || max_len < min_len) throw std::invalid_argument("ToyTaskSpec: bad length range");
    if (train_size < 1 || dev_size < 0 || test_size < 0)
      throw std::invalid_argument("ToyTaskSpec: corpus sizes must be non-negative (train >= 1)");
  }

  friend bool operator==(const ToyTaskSpec&, const ToyTaskSpec&) = default;
};

inline const std::string kMarker = "|";

/// Serializes as "key = value" lines.
inline std::string to_text(const ToyTaskSpec& s) {
  std::ostringstream os;
  os << "vocab_size = " << s.vocab_size << "\n"
     << "synonyms = " << s.synonyms << "\n"
     << "ambiguous_fraction = " << s.ambiguous_fraction << "\n"
     << "reorder = " << (s.reorder ? "true" : "false") << "\n"
     << "reorder_prob = " << s.reorder_prob << "\n"
     << "min_len = " << s.min_len << "\n"
     << "max_len = " << s.max_len << "\n"
     << "train_size = " << s.train_size << "\n"
     << "dev_size = " << s.dev_size << "\n"
     << "test_size = " << s.test_size << "\n"
     << "seed = " << s.seed << "\n";
  return os.str();
}

/// Parses "key = value" lines; '#' starts a comment. Unknown keys are errors.
inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("line " + std::to_string(lineno) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline ToyTaskSpec toy_spec_from_text(const std::string& text) {
  ToyTaskSpec s;
  for (const auto& [k, v] : parse_key_values(text)) {
    try {
      if (k == "vocab_size") s.vocab_size = std::stoi(v);
      else if (k == "synonyms") s.synonyms = std::stoi(v);
      else if (k == "ambiguous_fraction") s.ambiguous_fraction = std::stod(v);
      else if (k == "reorder") s.reorder = (v == "true" || v == "1");
      else if (k == "reorder_prob") s.reorder_prob = std::stod(v);
      else if (k == "min_len") s.min_len = std::stoi(v);
      else if (k == "max_len") s.max_len = std::stoi(v);
      else if (k == "train_size") s.train_size = std::stoi(v);
      else if (k == "dev_size") s.dev_size = std::stoi(v);
      else if (k == "test_size") s.test_size = std::stoi(v);
      else if (k == "seed") s.seed = std::stoull(v);
      else throw std::invalid_argument("unknown key '" + k + "'");
    } catch (const std::logic_error& e) {
      throw std::invalid_argument("task spec: " + k + ": " + e.what());
    }
  }
  s.validate();
  return s;
}

enum class Split { train, dev, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

struct SentencePair {
  Sentence src;
  Sentence tgt;
  Split split = Split::train;
  std::string origin = "orig";
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;

  [[nodiscard]] std::vector<SentencePair> split(Split s) const {
    std::vector<SentencePair> out;
    for (const auto& p : pairs)
      if (p.split == s) out.push_back(p);
    return out;
  }
};

/// Lexicon of a toy task: translations[i] lists the synonyms of source word i.
class ToyTask {
 public:
  explicit ToyTask(ToyTaskSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const int n = spec_.vocab_size;
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    auto rng = RngStream::derive(spec_.seed, {0x1e41c0});
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)], order[rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
    const int n_amb = spec_.synonyms > 1 ? static_cast<int>(std::lround(spec_.ambiguous_fraction * n)) : 0;
    std::vector<bool> ambiguous(static_cast<std::size_t>(n), false);
    for (int i = 0; i < n_amb; ++i) ambiguous[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
    for (int i = 0; i < n; ++i) {
      const std::string src = "s" + std::to_string(i);
      std::vector<std::string> tr;
      if (ambiguous[static_cast<std::size_t>(i)]) {
        for (int k = 0; k < spec_.synonyms; ++k) tr.push_back("t" + std::to_string(i) + static_cast<char>('a' + k));
      } else {
        tr.push_back("t" + std::to_string(i));
      }
      index_.emplace(src, translations_.size());
      source_words_.push_back(src);
      translations_.push_back(std::move(tr));
    }
  }

  [[nodiscard]] const ToyTaskSpec& spec() const noexcept { return spec_; }
  [[nodiscard]] const std::vector<std::string>& source_words() const noexcept { return source_words_; }

  /// Synonym list of a source word (the marker maps to itself).
  [[nodiscard]] const std::vector<std::string>& translations(const std::string& src_word) const {
    static const std::vector<std::string> marker{kMarker};
    if (src_word == kMarker) return marker;
    auto it = index_.find(src_word);
    if (it == index_.end()) throw std::invalid_argument("word not in task vocabulary: " + src_word);
    return translations_[it->second];
  }

  [[nodiscard]] bool is_ambiguous(const std::string& src_word) const { return translations(src_word).size() > 1; }

 private:
  ToyTaskSpec spec_;
  std::vector<std::string> source_words_;
  std::vector<std::vector<std::string>> translations_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

struct Blocks {
  Sentence first, second;
  bool has_marker = false;
};

inline Blocks split_blocks(const Sentence& s) {
  Blocks b;
  const auto it = std::find(s.begin(), s.end(), kMarker);
  if (it == s.end()) {
    b.first = s;
    return b;
  }
  if (std::find(std::next(it), s.end(), kMarker) != s.end())
    throw std::invalid_argument("sentence has more than one block marker");
  b.has_marker = true;
  b.first.assign(s.begin(), it);
  b.second.assign(std::next(it), s.end());
  return b;
}

}  // namespace detail

/// Generates unique sources and one uniformly chosen valid translation for
/// each. The first train_size pairs are train, then dev, then test.
inline ParallelCorpus gen_corpus(const ToyTask& task) {
  const auto& spec = task.spec();
  const std::size_t total = static_cast<std::size_t>(spec.train_size + spec.dev_size + spec.test_size);
  auto rng = RngStream::derive(spec.seed, {0xc0c0});
  std::unordered_set<std::string> seen;
  ParallelCorpus corpus;
  const std::size_t max_attempts = 200 * total + 1000;
  std::size_t attempts = 0;
  const auto& words = task.source_words();
  while (corpus.pairs.size() < total) {
    if (++attempts > max_attempts)
      throw std::invalid_argument("gen_corpus: task admits too few distinct source sentences");
    const int len = spec.min_len + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1)));
    Sentence src;
    for (int i = 0; i < len; ++i) src.push_back(words[rng.uniform_int(words.size())]);
    int cut = -1;
    if (spec.reorder && len >= 2 && rng.uniform() < spec.reorder_prob) {
      cut = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(len - 1)));
      src.insert(src.begin() + cut, kMarker);
    }
    if (!seen.insert(join(src)).second) continue;
    auto translate_block = [&](auto b, auto e) {
      Sentence out;
      for (auto it = b; it != e; ++it) {
        const auto& tr = task.translations(*it);
        out.push_back(tr[tr.size() == 1 ? 0 : rng.uniform_int(tr.size())]);
      }
      return out;
    };
    Sentence tgt;
    if (cut < 0) {
      tgt = translate_block(src.begin(), src.end());
    } else {
      Sentence a = translate_block(src.begin(), src.begin() + cut);
      Sentence b = translate_block(src.begin() + cut + 1, src.end());
      if (rng.uniform() < 0.5) std::swap(a, b);
      tgt = a;
      tgt.push_back(kMarker);
      tgt.insert(tgt.end(), b.begin(), b.end());
    }
    SentencePair p{std::move(src), std::move(tgt), Split::train, "orig"};
    const auto k = corpus.pairs.size();
    p.split = k < static_cast<std::size_t>(spec.train_size)                   ? Split::train
              : k < static_cast<std::size_t>(spec.train_size + spec.dev_size) ? Split::dev
                                                                              : Split::test;
    corpus.pairs.push_back(std::move(p));
  }
  return corpus;
}

struct ValidTranslations {
  std::size_t count = 0;
  std::optional<std::set<std::string>> sentences;  // empty when count exceeds the cap
};

/// Exact set of valid targets of `source`, or only their count when it exceeds `cap`.
inline ValidTranslations valid_translations(const Sentence& source, const ToyTask& task, std::size_t cap = 10000) {
  const auto blocks = detail::split_blocks(source);
  auto block_product = [&](const Sentence& b) {
    std::size_t n = 1;
    for (const auto& w : b) n *= task.translations(w).size();
    return n;
  };
  auto enumerate_block = [&](const Sentence& b) {
    std::vector<Sentence> out{{}};
    for (const auto& w : b) {
      std::vector<Sentence> next;
      for (const auto& prefix : out)
        for (const auto& t : task.translations(w)) {
          auto s = prefix;
          s.push_back(t);
          next.push_back(std::move(s));
        }
      out = std::move(next);
    }
    return out;
  };
  ValidTranslations v;
  const std::size_t pa = block_product(blocks.first);
  const std::size_t pb = blocks.has_marker ? block_product(blocks.second) : 1;
  const std::size_t upper = pa * pb * (blocks.has_marker ? 2 : 1);
  if (upper > cap) {
    v.count = upper;  // orderings can coincide only when both blocks share all words
    return v;
  }
  std::set<std::string> set;
  if (!blocks.has_marker) {
    for (const auto& s : enumerate_block(blocks.first)) set.insert(join(s));
  } else {
    const auto ea = enumerate_block(blocks.first);
    const auto eb = enumerate_block(blocks.second);
    for (const auto& a : ea)
      for (const auto& b : eb) {
        set.insert(join(a) + " " + kMarker + (b.empty() ? "" : " " + join(b)));
        set.insert(join(b) + (b.empty() ? "" : " ") + kMarker + " " + join(a));
      }
  }
  v.count = set.size();
  v.sentences = std::move(set);
  return v;
}

/// Membership test that needs no enumeration.
inline bool is_valid_translation(const Sentence& source, const Sentence& target, const ToyTask& task) {
  const auto sb = detail::split_blocks(source);
  detail::Blocks tb;
  try {
    tb = detail::split_blocks(target);
  } catch (const std::invalid_argument&) {
    return false;
  }
  if (sb.has_marker != tb.has_marker) return false;
  auto block_ok = [&](const Sentence& s, const Sentence& t) {
    if (s.size() != t.size()) return false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& tr = task.translations(s[i]);
      if (std::find(tr.begin(), tr.end(), t[i]) == tr.end()) return false;
    }
    return true;
  };
  if (!sb.has_marker) return block_ok(sb.first, tb.first);
  return (block_ok(sb.first, tb.first) && block_ok(sb.second, tb.second)) ||
         (block_ok(sb.second, tb.first) && block_ok(sb.first, tb.second));
}

/// Reads "source<TAB>target[<TAB>origin]" lines. Artifact header lines are
/// skipped, as are pairs with a side longer than `max_words`.
inline std::vector<SentencePair> read_corpus(const std::string& path, std::size_t max_words = 100) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read corpus: " + path);
  std::vector<SentencePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || is_artifact_header(line)) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected source<TAB>target");
    SentencePair p;
    p.src = tokenize(line.substr(0, tab));
    const auto tab2 = line.find('\t', tab + 1);
    p.tgt = tokenize(line.substr(tab + 1, tab2 == std::string::npos ? std::string::npos : tab2 - tab - 1));
    if (tab2 != std::string::npos) p.origin = line.substr(tab2 + 1);
    if (p.src.empty() || p.tgt.empty())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty sentence");
    if (p.src.size() > max_words || p.tgt.size() > max_words) continue;
    out.push_back(std::move(p));
  }
  return out;
}

inline std::string format_corpus(const std::vector<SentencePair>& pairs, bool with_origin) {
  std::string out;
  for (const auto& p : pairs) {
    out += join(p.src);
    out += '\t';
    out += join(p.tgt);
    if (with_origin) {
      out += '\t';
      out += p.origin;
    }
    out += '\n';
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << text;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace hsd
