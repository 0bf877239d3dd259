#pragma once

// Raw comment text -> cleaned text -> WordPiece tokens -> fixed-length id
// sequences framed as [CLS] ... [SEP] [PAD]...

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "detail/unicode.hpp"

namespace revq {

inline constexpr std::size_t kDefaultMaxLen = 100;
inline constexpr std::string_view kContinuationPrefix = "##";

struct SpecialTokens {
  std::string pad = "[PAD]";
  std::string unk = "[UNK]";
  std::string cls = "[CLS]";
  std::string sep = "[SEP]";
};

class Vocabulary {
 public:
  using Id = std::int32_t;

  Vocabulary() = default;

  /// Ids are positions in `tokens`. The four special tokens must be present.
  explicit Vocabulary(std::vector<std::string> tokens, SpecialTokens specials = {})
      : tokens_(std::move(tokens)), specials_(std::move(specials)) {
    ids_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) {
        throw DataError("vocabulary line " + std::to_string(i + 1) + " is empty");
      }
      if (!ids_.emplace(tokens_[i], static_cast<Id>(i)).second) {
        throw DataError("vocabulary token '" + tokens_[i] + "' appears twice");
      }
    }
    pad_ = require(specials_.pad);
    unk_ = require(specials_.unk);
    cls_ = require(specials_.cls);
    sep_ = require(specials_.sep);
  }

  /// One token per line; id = zero-based line number.
  static Vocabulary load(const std::filesystem::path& path, SpecialTokens specials = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open vocabulary file " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    // A trailing empty line is the file's final newline, not a token.
    while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
    return Vocabulary(std::move(tokens), std::move(specials));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary file " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::optional<Id> find(std::string_view token) const {
    const auto it = ids_.find(std::string(token));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(std::string_view token) const { return find(token).has_value(); }
  Id id_or_unk(std::string_view token) const { return find(token).value_or(unk_); }
  const std::string& token(Id id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  std::span<const std::string> tokens() const { return tokens_; }

  Id pad_id() const { return pad_; }
  Id unk_id() const { return unk_; }
  Id cls_id() const { return cls_; }
  Id sep_id() const { return sep_; }
  const SpecialTokens& specials() const { return specials_; }

 private:
  Id require(const std::string& token) const {
    const auto it = ids_.find(token);
    if (it == ids_.end()) throw DataError("vocabulary lacks special token " + token);
    return it->second;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, Id> ids_;
  SpecialTokens specials_;
  Id pad_ = 0, unk_ = 0, cls_ = 0, sep_ = 0;
};

/// Pluggable word-level spelling correction. Implementations must be
/// deterministic.
class SpellCorrector {
 public:
  virtual ~SpellCorrector() = default;
  virtual std::string correct(std::string_view word) const = 0;
};

class IdentityCorrector final : public SpellCorrector {
 public:
  std::string correct(std::string_view word) const override { return std::string(word); }
};

/// Replaces an unknown lowercase ASCII word by the highest-priority dictionary
/// word at edit distance 1 (delete, transpose, replace, insert). Priority is
/// the dictionary order. Leading/trailing punctuation is kept aside and
/// reattached; anything else non-alphabetic is left alone.
class DictionaryCorrector final : public SpellCorrector {
 public:
  explicit DictionaryCorrector(std::span<const std::string> words) {
    for (std::size_t i = 0; i < words.size(); ++i) rank_.emplace(words[i], i);
  }

  static DictionaryCorrector load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dictionary " + path.string());
    std::vector<std::string> words;
    std::string w;
    while (in >> w) words.push_back(w);
    return DictionaryCorrector(words);
  }

  std::string correct(std::string_view word) const override {
    std::size_t begin = 0;
    std::size_t end = word.size();
    while (begin < end && is_ascii_punct(word[begin])) ++begin;
    while (end > begin && is_ascii_punct(word[end - 1])) --end;
    const std::string_view core = word.substr(begin, end - begin);
    if (core.empty() || !std::all_of(core.begin(), core.end(), is_ascii_lower)) {
      return std::string(word);
    }
    if (rank_.count(std::string(core))) return std::string(word);

    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::string best;
    auto consider = [&](const std::string& candidate) {
      const auto it = rank_.find(candidate);
      if (it != rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = candidate;
      }
    };
    const std::string base(core);
    for (std::size_t i = 0; i < base.size(); ++i) {
      consider(base.substr(0, i) + base.substr(i + 1));
      if (i + 1 < base.size()) {
        std::string t = base;
        std::swap(t[i], t[i + 1]);
        consider(t);
      }
      for (char c = 'a'; c <= 'z'; ++c) {
        if (c == base[i]) continue;
        std::string r = base;
        r[i] = c;
        consider(r);
      }
    }
    for (std::size_t i = 0; i <= base.size(); ++i) {
      for (char c = 'a'; c <= 'z'; ++c) consider(base.substr(0, i) + c + base.substr(i));
    }
    if (best.empty()) return std::string(word);
    return std::string(word.substr(0, begin)) + best + std::string(word.substr(end));
  }

 private:
  static bool is_ascii_lower(char c) { return c >= 'a' && c <= 'z'; }
  static bool is_ascii_punct(char c) {
    const auto u = static_cast<unsigned char>(c);
    return u < 0x80 && detail::is_punctuation(u);
  }

  std::unordered_map<std::string, std::size_t> rank_;
};

/// Removes every maximal non-whitespace run beginning with http://, https://
/// or www. (case-insensitive). A prefix counts when it starts the text or
/// follows a non-alphanumeric character, so "(https://x" is caught but "awww."
/// is not.
inline std::string strip_urls(std::string_view raw) {
  static constexpr std::string_view kPrefixes[] = {"http://", "https://", "www."};
  auto is_alnum = [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
  };
  auto starts_url = [&](std::size_t pos) {
    if (pos > 0 && is_alnum(raw[pos - 1])) return false;
    for (auto p : kPrefixes) {
      if (raw.size() - pos < p.size()) continue;
      bool match = true;
      for (std::size_t k = 0; k < p.size() && match; ++k) {
        const char c = raw[pos + k];
        match = (c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c) == p[k];
      }
      if (match) return true;
    }
    return false;
  };
  auto is_ws = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
  };
  std::string out;
  out.reserve(raw.size());
  std::size_t i = 0;
  while (i < raw.size()) {
    if (starts_url(i)) {
      while (i < raw.size() && !is_ws(raw[i])) ++i;
      out.push_back(' ');
      continue;
    }
    out.push_back(raw[i++]);
  }
  return out;
}

/// URL removal, lowercasing, per-word spell correction, whitespace collapsing.
inline std::string clean_text(std::string_view raw, const SpellCorrector& corrector) {
  const std::string lowered = detail::to_lower(strip_urls(raw));
  std::string out;
  for (const auto& word : detail::split_whitespace(lowered)) {
    const std::string fixed = corrector.correct(word);
    for (const auto& piece : detail::split_whitespace(fixed)) {
      if (!out.empty()) out.push_back(' ');
      out += piece;
    }
  }
  if (out.empty()) throw UnusableTextError("comment is empty after cleaning");
  return out;
}

inline std::string clean_text(std::string_view raw) { return clean_text(raw, IdentityCorrector{}); }

/// Splits a whitespace word into runs of non-punctuation and single
/// punctuation characters, the units WordPiece is applied to.
inline std::vector<std::u32string> split_word_units(std::string_view word) {
  std::vector<std::u32string> units;
  std::u32string current;
  for (char32_t c : detail::decode_utf8(word)) {
    if (detail::is_punctuation(c)) {
      if (!current.empty()) units.push_back(std::move(current));
      current.clear();
      units.push_back(std::u32string(1, c));
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) units.push_back(std::move(current));
  return units;
}

inline constexpr std::size_t kMaxCharsPerWord = 100;

/// Greedy longest-match-first decomposition of one unit. Returns nullopt when
/// no complete decomposition exists.
inline std::optional<std::vector<std::string>> wordpiece_unit(std::u32string_view unit,
                                                              const Vocabulary& vocab) {
  std::vector<std::string> pieces;
  std::size_t start = 0;
  while (start < unit.size()) {
    std::size_t end = unit.size();
    std::optional<std::string> match;
    while (start < end) {
      std::string candidate = detail::encode_utf8(unit.substr(start, end - start));
      if (start > 0) candidate.insert(0, kContinuationPrefix);
      if (vocab.contains(candidate)) {
        match = std::move(candidate);
        break;
      }
      --end;
    }
    if (!match) return std::nullopt;
    pieces.push_back(std::move(*match));
    start = end;
  }
  return pieces;
}

/// WordPiece over whitespace words (punctuation isolated first). A unit with
/// no valid decomposition, or longer than kMaxCharsPerWord, becomes UNK.
inline std::vector<std::string> wordpiece_tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<std::string> tokens;
  for (const auto& word : detail::split_whitespace(text)) {
    for (const auto& unit : split_word_units(word)) {
      if (unit.size() > kMaxCharsPerWord) {
        tokens.push_back(vocab.specials().unk);
        continue;
      }
      if (auto pieces = wordpiece_unit(unit, vocab)) {
        tokens.insert(tokens.end(), std::make_move_iterator(pieces->begin()),
                      std::make_move_iterator(pieces->end()));
      } else {
        tokens.push_back(vocab.specials().unk);
      }
    }
  }
  return tokens;
}

/// Whole-word vocabulary from cleaned texts: special tokens, then every word
/// unit seen at least min_count times, most frequent first, ties in byte order.
inline Vocabulary build_word_vocabulary(std::span<const std::string> cleaned_texts,
                                        std::size_t min_count = 1) {
  std::map<std::string, std::size_t> counts;
  for (const auto& text : cleaned_texts) {
    for (const auto& word : detail::split_whitespace(text)) {
      for (const auto& unit : split_word_units(word)) ++counts[detail::encode_utf8(unit)];
    }
  }
  const SpecialTokens specials;
  std::vector<std::string> tokens{specials.pad, specials.unk, specials.cls, specials.sep};
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [word, n] : counts) {
    if (n >= min_count && word != specials.pad && word != specials.unk && word != specials.cls &&
        word != specials.sep) {
      ranked.emplace_back(word, n);
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (auto& [word, n] : ranked) tokens.push_back(std::move(word));
  return Vocabulary(std::move(tokens), specials);
}

struct EncodedExample {
  std::vector<Vocabulary::Id> token_ids;
  std::vector<std::uint8_t> attention_mask;
  std::optional<FeatureLabels> labels;

  std::size_t max_len() const { return token_ids.size(); }
  /// Number of leading unmasked positions.
  std::size_t active_length() const {
    return static_cast<std::size_t>(
        std::find(attention_mask.begin(), attention_mask.end(), std::uint8_t{0}) -
        attention_mask.begin());
  }

  friend bool operator==(const EncodedExample&, const EncodedExample&) = default;
};

/// Frames already-tokenized text: [CLS] head-of-tokens [SEP] then PAD to max_len.
inline EncodedExample encode_tokens(std::span<const std::string> tokens, const Vocabulary& vocab,
                                    std::size_t max_len = kDefaultMaxLen) {
  if (max_len < 3) throw std::invalid_argument("max_len must be at least 3");
  const std::size_t kept = std::min(tokens.size(), max_len - 2);
  EncodedExample ex;
  ex.token_ids.assign(max_len, vocab.pad_id());
  ex.attention_mask.assign(max_len, 0);
  ex.token_ids[0] = vocab.cls_id();
  for (std::size_t i = 0; i < kept; ++i) ex.token_ids[i + 1] = vocab.id_or_unk(tokens[i]);
  ex.token_ids[kept + 1] = vocab.sep_id();
  std::fill_n(ex.attention_mask.begin(), kept + 2, std::uint8_t{1});
  return ex;
}

/// Encodes cleaned text.
inline EncodedExample encode(std::string_view cleaned_text, const Vocabulary& vocab,
                             std::size_t max_len = kDefaultMaxLen) {
  const auto tokens = wordpiece_tokenize(cleaned_text, vocab);
  return encode_tokens(tokens, vocab, max_len);
}

/// Text preparation bundle: cleaning options plus vocabulary and length.
struct TextPipeline {
  std::shared_ptr<const Vocabulary> vocab;
  std::shared_ptr<const SpellCorrector> corrector = std::make_shared<IdentityCorrector>();
  std::size_t max_len = kDefaultMaxLen;

  std::string clean(std::string_view raw) const { return clean_text(raw, *corrector); }
  EncodedExample prepare(std::string_view raw) const {
    return encode(clean(raw), *vocab, max_len);
  }
};

struct CleanedComment {
  std::string id;
  std::string cleaned_text;
};

/// Cleaned-corpus cache: JSON-lines of {id, cleaned_text}.
inline void write_clean_cache(const std::filesystem::path& path,
                              std::span<const CleanedComment> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["cleaned_text"] = r.cleaned_text;
    out << j.dump() << '\n';
  }
}

inline std::vector<CleanedComment> read_clean_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<CleanedComment> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      rows.push_back({j.at("id").get<std::string>(), j.at("cleaned_text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError(std::string("bad cache record: ") + e.what(), n);
    }
  }
  return rows;
}

}  // namespace revq
