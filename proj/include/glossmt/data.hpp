#pragma once

// Parallel text/GLOSS corpora, vocabularies and token-budget batching.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "glossmt/batch.hpp"
#include "glossmt/error.hpp"
#include "glossmt/kv.hpp"

namespace glossmt {

using Sentence = std::vector<std::string>;

inline Sentence tokenize(std::string_view line) {
  Sentence out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string detokenize(const Sentence& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

enum class Side { kSource, kTarget };

class Vocabulary {
 public:
  static constexpr std::array<std::string_view, kNumReserved> kReserved = {"<pad>", "<s>", "</s>", "<unk>"};

  Vocabulary() {
    for (auto r : kReserved) push(std::string(r));
  }

  // Reserved entries first, then `corpus_tokens` in the given order.
  static Vocabulary from_tokens(const std::vector<std::string>& corpus_tokens) {
    Vocabulary v;
    for (const auto& t : corpus_tokens) {
      if (v.index_.count(t)) throw DataError("vocabulary: duplicate token '" + t + "'");
      v.push(t);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  std::int32_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenIds encode(const Sentence& sentence) const {
    TokenIds ids;
    ids.reserve(sentence.size());
    for (const auto& t : sentence) ids.push_back(id(t));
    return ids;
  }

  // Stops at EOS; PAD and BOS are dropped.
  Sentence decode(const TokenIds& ids) const {
    Sentence out;
    for (std::int32_t i : ids) {
      if (i == kEosId) break;
      if (i == kPadId || i == kBosId) continue;
      out.push_back(token(i));
    }
    return out;
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("vocab");
    for (const auto& t : tokens_) h = fnv1a(t + "\n", h);
    return h;
  }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << serialize();
  }

  static Vocabulary parse(std::istream& in, std::string_view origin) {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.emplace_back(trim(line));
    if (lines.size() < kNumReserved) throw DataError(std::string(origin) + ": truncated vocabulary");
    for (std::size_t i = 0; i < kNumReserved; ++i) {
      if (lines[i] != kReserved[i]) {
        throw DataError(std::string(origin) + ": line " + std::to_string(i + 1) + " must be '" +
                        std::string(kReserved[i]) + "'");
      }
    }
    return from_tokens(std::vector<std::string>(lines.begin() + kNumReserved, lines.end()));
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    return parse(in, path.string());
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void push(std::string t) {
    index_.emplace(t, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct ParallelCorpus {
  std::string split;
  std::vector<Sentence> source;
  std::vector<Sentence> target;

  std::size_t size() const { return source.size(); }
  const std::vector<Sentence>& side(Side s) const { return s == Side::kSource ? source : target; }
};

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(std::move(line));
  return lines;
}

}  // namespace detail

// Line i of each file becomes pair i; tokens are whitespace separated.
inline ParallelCorpus load_corpus(const std::filesystem::path& source_path,
                                  const std::filesystem::path& target_path, std::string split) {
  const auto src = detail::read_lines(source_path);
  const auto tgt = detail::read_lines(target_path);
  if (src.size() != tgt.size()) {
    throw AlignmentError("corpus '" + split + "': " + source_path.string() + " has " +
                         std::to_string(src.size()) + " lines but " + target_path.string() + " has " +
                         std::to_string(tgt.size()));
  }
  ParallelCorpus corpus;
  corpus.split = std::move(split);
  corpus.source.reserve(src.size());
  corpus.target.reserve(tgt.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    Sentence s = tokenize(src[i]);
    Sentence t = tokenize(tgt[i]);
    if (s.empty()) throw DataError(source_path.string() + ":" + std::to_string(i + 1) + ": empty sentence");
    if (t.empty()) throw DataError(target_path.string() + ":" + std::to_string(i + 1) + ": empty sentence");
    corpus.source.push_back(std::move(s));
    corpus.target.push_back(std::move(t));
  }
  return corpus;
}

// Tokens with frequency >= min_freq, by descending frequency then
// lexicographically, after the reserved entries.
inline Vocabulary build_vocab(const ParallelCorpus& corpus, Side side, std::size_t min_freq = 1) {
  if (corpus.size() == 0) throw ContractError("build_vocab: empty corpus");
  if (min_freq < 1) throw ConfigError("build_vocab: min_freq must be >= 1");
  std::map<std::string, std::size_t> freq;
  for (const auto& sentence : corpus.side(side)) {
    for (const auto& t : sentence) ++freq[t];
  }
  std::vector<std::pair<std::string, std::size_t>> entries;
  for (auto& [token, count] : freq) {
    if (count < min_freq) continue;
    if (std::find(Vocabulary::kReserved.begin(), Vocabulary::kReserved.end(), token) !=
        Vocabulary::kReserved.end()) {
      continue;
    }
    entries.emplace_back(token, count);
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  tokens.reserve(entries.size());
  for (auto& e : entries) tokens.push_back(std::move(e.first));
  return Vocabulary::from_tokens(tokens);
}

// Groups length-sorted sentences so that every batch satisfies
// rows * (longest target + 1) <= token_budget. Batch order is shuffled when
// `rng` is given.
inline std::vector<SequenceBatch> make_batches(const ParallelCorpus& corpus, const Vocabulary& src_vocab,
                                               const Vocabulary& tgt_vocab, std::size_t token_budget,
                                               std::mt19937_64* rng) {
  std::vector<TokenIds> src(corpus.size()), tgt(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    src[i] = src_vocab.encode(corpus.source[i]);
    tgt[i] = tgt_vocab.encode(corpus.target[i]);
    if (tgt[i].size() + 1 > token_budget) {
      throw DataError("make_batches: sentence " + std::to_string(i + 1) + " of split '" + corpus.split +
                      "' (" + std::to_string(tgt[i].size()) + " target tokens: \"" +
                      detokenize(corpus.target[i]).substr(0, 60) + "\") exceeds token budget " +
                      std::to_string(token_budget));
    }
  }
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (tgt[a].size() != tgt[b].size()) return tgt[a].size() < tgt[b].size();
    if (src[a].size() != src[b].size()) return src[a].size() < src[b].size();
    return a < b;
  });

  std::vector<SequenceBatch> batches;
  std::vector<std::size_t> group;
  std::size_t group_width = 0;
  auto flush = [&]() {
    if (group.empty()) return;
    std::vector<TokenIds> s, t;
    for (std::size_t i : group) {
      s.push_back(src[i]);
      t.push_back(tgt[i]);
    }
    SequenceBatch b = SequenceBatch::build(s, t);
    b.indices = group;
    batches.push_back(std::move(b));
    group.clear();
    group_width = 0;
  };
  for (std::size_t i : order) {
    const std::size_t width = std::max(group_width, tgt[i].size() + 1);
    if ((group.size() + 1) * width > token_budget) flush();
    group.push_back(i);
    group_width = std::max(group_width, tgt[i].size() + 1);
  }
  flush();
  if (rng) std::shuffle(batches.begin(), batches.end(), *rng);
  return batches;
}

// Six corpus files, one source/target pair per split.
struct Manifest {
  std::map<std::string, std::filesystem::path> files;

  static constexpr std::array<std::string_view, 3> kSplits = {"train", "dev", "test"};

  static Manifest load(const std::filesystem::path& path) {
    const KeyValues kv = KeyValues::load(path);
    Manifest m;
    const auto base = path.parent_path();
    for (auto split : kSplits) {
      for (std::string_view side : {".src", ".tgt"}) {
        const std::string key = std::string(split) + std::string(side);
        if (!kv.has(key)) throw DataError(path.string() + ": missing key '" + key + "'");
        std::filesystem::path p = kv.get(key);
        m.files[key] = p.is_absolute() ? p : base / p;
      }
    }
    return m;
  }

  ParallelCorpus corpus(std::string_view split) const {
    return load_corpus(files.at(std::string(split) + ".src"), files.at(std::string(split) + ".tgt"),
                       std::string(split));
  }
};

// Sentence, word and distinct-token counts per split and side, laid out as
// GLOSS (target) train/dev/test followed by TEXT (source) train/dev/test.
struct CorpusStatistics {
  std::array<std::size_t, 6> sentences{};
  std::array<std::size_t, 6> words{};
  std::array<std::size_t, 6> vocabulary{};

  static std::size_t column(std::size_t split, Side side) { return (side == Side::kTarget ? 0 : 3) + split; }

  void add(std::size_t split, const ParallelCorpus& corpus) {
    for (Side side : {Side::kTarget, Side::kSource}) {
      const std::size_t c = column(split, side);
      std::unordered_map<std::string, int> distinct;
      sentences[c] = corpus.size();
      words[c] = 0;
      for (const auto& s : corpus.side(side)) {
        words[c] += s.size();
        for (const auto& t : s) distinct[t] = 1;
      }
      vocabulary[c] = distinct.size();
    }
  }

  std::string table() const {
    std::ostringstream os;
    os << "# columns: GLOSS.train GLOSS.dev GLOSS.test TEXT.train TEXT.dev TEXT.test\n";
    auto row = [&](const char* name, const std::array<std::size_t, 6>& v) {
      os << name;
      for (auto x : v) os << ' ' << x;
      os << '\n';
    };
    row("sentences", sentences);
    row("words", words);
    row("vocabulary", vocabulary);
    return os.str();
  }

  // Reference PHOENIX14T corpus counts.
  static CorpusStatistics phoenix14t() {
    CorpusStatistics s;
    s.sentences = {7096, 519, 642, 7096, 519, 642};
    s.words = {67781, 3745, 4257, 99081, 6820, 7816};
    s.vocabulary = {1066, 393, 411, 2887, 951, 1001};
    return s;
  }

  // One line per differing cell; empty when everything matches.
  std::vector<std::string> compare(const CorpusStatistics& expected) const {
    static constexpr std::array<const char*, 6> kColumns = {"GLOSS.train", "GLOSS.dev", "GLOSS.test",
                                                            "TEXT.train",  "TEXT.dev",  "TEXT.test"};
    std::vector<std::string> diffs;
    auto check = [&](const char* name, const std::array<std::size_t, 6>& got,
                     const std::array<std::size_t, 6>& want) {
      for (std::size_t i = 0; i < 6; ++i) {
        if (got[i] != want[i]) {
          diffs.push_back(std::string(name) + " " + kColumns[i] + ": observed " + std::to_string(got[i]) +
                          ", expected " + std::to_string(want[i]));
        }
      }
    };
    check("sentences", sentences, expected.sentences);
    check("words", words, expected.words);
    check("vocabulary", vocabulary, expected.vocabulary);
    return diffs;
  }
};

}  // namespace glossmt
