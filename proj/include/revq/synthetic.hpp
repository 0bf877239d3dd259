#pragma once

// Seeded template corpus of review comments. Each label is drawn
// independently; its cue phrases are injected into the text, so a model that
// reads the right words can recover all three labels exactly.

#include <algorithm>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"
#include "detail/random.hpp"
#include "textprep.hpp"

namespace revq::synthetic {

namespace lexicon {

inline constexpr std::string_view kTopics[] = {
    "design",        "code",          "documentation", "test plan",   "readme",
    "implementation", "diagram",      "login page",    "database schema", "use cases",
    "controller",    "model classes", "user interface", "write up",   "refactoring",
    "api",           "deployment",    "requirements",  "class diagram", "migration"};

inline constexpr std::string_view kSuggestions[] = {
    "please add more detail to the {}",   "you should consider splitting the {}",
    "i suggest that you rename the {}",   "it would be better to document the {}",
    "consider adding examples to the {}", "maybe include a short overview of the {}",
    "you could also include screenshots of the {}", "i recommend moving the {} into its own section"};

inline constexpr std::string_view kProblems[] = {
    "the {} is missing",           "there is a bug in the {}",
    "the {} is incorrect",         "the {} fails on empty input",
    "the {} is broken",            "several cases in the {} are not handled",
    "the {} crashes when saving", "the {} contradicts the requirements"};

inline constexpr std::string_view kNeutral[] = {
    "the team implemented the {}",   "the report describes the {}",
    "the project covers the {}",     "the {} was updated this round",
    "the {} follows the template",   "the {} is in the second part",
    "the authors wrote about the {}", "the {} uses the same format"};

inline constexpr std::string_view kPositive[] = {
    "great job overall",          "nice work on this",
    "the {} is very clear",       "i really like the {}",
    "excellent and helpful {}",   "well done team",
    "the {} looks good",          "this is a thorough and impressive {}"};

inline constexpr std::string_view kNegative[] = {
    "this is poor work",            "the {} feels sloppy",
    "very disappointing {}",        "the {} is messy and hard to read",
    "honestly the effort seems lazy", "the {} is weak"};

inline constexpr std::string_view kFiller[] = {
    "overall", "also", "in general", "for this round", "as for the rest", "at this point"};

inline constexpr std::string_view kImbalanceCue = "hmm";

inline constexpr std::string_view kPieces[] = {"##s", "##ed", "##ing", "##ly"};
inline constexpr std::string_view kPunctuation[] = {".", ",", "!", "?", ":", "/", "-"};

}  // namespace lexicon

namespace detail {

using revq::detail::Rng;

template <std::size_t N>
std::string_view pick(const std::string_view (&options)[N], Rng& rng) {
  return options[revq::detail::uniform_index(rng, N)];
}

inline std::string fill(std::string_view pattern, std::string_view topic) {
  std::string out(pattern);
  const auto pos = out.find("{}");
  if (pos != std::string::npos) out.replace(pos, 2, topic);
  return out;
}

inline std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

inline std::string join_clauses(std::vector<std::string> clauses, Rng& rng) {
  revq::detail::shuffle(std::span(clauses), rng);
  std::string text;
  for (std::size_t i = 0; i < clauses.size(); ++i) {
    if (i == 0) {
      text = capitalize(clauses[i]);
    } else if (revq::detail::bernoulli(rng, 0.5)) {
      text += ". " + capitalize(clauses[i]);
    } else {
      text += ", and " + clauses[i];
    }
  }
  return text + (revq::detail::bernoulli(rng, 0.15) ? "!" : ".");
}

}  // namespace detail

struct Options {
  std::size_t count = 7000;
  std::uint64_t seed = 0;
  double p_suggestion = 0.21;
  double p_problem = 0.43;
  double p_positive_tone = 0.78;
  double p_url = 0.05;
};

/// One comment whose labels are fully determined by the injected cue phrases.
inline std::string compose(const FeatureLabels& labels, revq::detail::Rng& rng, double p_url) {
  using namespace lexicon;
  std::vector<std::string> clauses;
  auto topic = [&] { return detail::pick(kTopics, rng); };
  if (labels.positive_tone) {
    clauses.push_back(detail::fill(detail::pick(kPositive, rng), topic()));
  } else if (revq::detail::bernoulli(rng, 0.7)) {
    clauses.push_back(detail::fill(detail::pick(kNegative, rng), topic()));
  }
  if (labels.problem) clauses.push_back(detail::fill(detail::pick(kProblems, rng), topic()));
  if (labels.suggestion) clauses.push_back(detail::fill(detail::pick(kSuggestions, rng), topic()));
  const auto neutral = 1 + revq::detail::uniform_index(rng, 2);
  for (std::uint64_t i = 0; i < neutral; ++i) {
    clauses.push_back(detail::fill(detail::pick(kNeutral, rng), topic()));
  }
  if (revq::detail::bernoulli(rng, 0.3)) {
    clauses.back() = std::string(detail::pick(kFiller, rng)) + " " + clauses.back();
  }
  std::string text = detail::join_clauses(std::move(clauses), rng);
  if (revq::detail::bernoulli(rng, p_url)) {
    text += " See https://example.org/review/" + std::to_string(revq::detail::uniform_index(rng, 1000));
  }
  return text;
}

/// Labeled template corpus; ids are "syn-<index>".
inline std::vector<ReviewComment> generate_corpus(const Options& opt = {}) {
  revq::detail::Rng rng(opt.seed);
  std::vector<ReviewComment> out;
  out.reserve(opt.count);
  for (std::size_t i = 0; i < opt.count; ++i) {
    FeatureLabels labels;
    labels.suggestion = revq::detail::bernoulli(rng, opt.p_suggestion);
    labels.problem = revq::detail::bernoulli(rng, opt.p_problem);
    labels.positive_tone = revq::detail::bernoulli(rng, opt.p_positive_tone);
    out.push_back({"syn-" + std::to_string(i), compose(labels, rng, opt.p_url), labels});
  }
  return out;
}

/// A corpus where the suggestion label is rare and only weakly signalled: the
/// cue word appears in 60% of minority comments and 10% of majority ones.
/// With unit weights the cue alone does not justify predicting the minority
/// class; with balanced weights it does. The other two labels are drawn as in
/// generate_corpus.
inline std::vector<ReviewComment> generate_imbalanced_corpus(std::size_t count, std::uint64_t seed,
                                                             double minority_fraction = 0.1) {
  revq::detail::Rng rng(seed);
  std::vector<ReviewComment> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    FeatureLabels labels;
    labels.suggestion = revq::detail::bernoulli(rng, minority_fraction);
    labels.problem = revq::detail::bernoulli(rng, 0.43);
    labels.positive_tone = revq::detail::bernoulli(rng, 0.78);
    FeatureLabels visible = labels;
    visible.suggestion = 0;  // no suggestion phrase: the cue word is the only signal
    std::string text = compose(visible, rng, 0.0);
    const bool cue = revq::detail::bernoulli(rng, labels.suggestion ? 0.6 : 0.1);
    if (cue) text = std::string(lexicon::kImbalanceCue) + ", " + text;
    out.push_back({"imb-" + std::to_string(i), std::move(text), labels});
  }
  return out;
}

/// Vocabulary covering the lexicon: special tokens, punctuation, every
/// lexicon word, digits, and a few continuation pieces.
inline Vocabulary vocabulary() {
  using namespace lexicon;
  std::set<std::string> words;
  auto add_all = [&](std::span<const std::string_view> patterns) {
    for (auto p : patterns) {
      for (const auto& w : revq::detail::split_whitespace(detail::fill(p, ""))) {
        for (const auto& unit : split_word_units(w)) words.insert(revq::detail::encode_utf8(unit));
      }
    }
  };
  add_all(kTopics);
  add_all(kSuggestions);
  add_all(kProblems);
  add_all(kNeutral);
  add_all(kPositive);
  add_all(kNegative);
  add_all(kFiller);
  words.insert(std::string(kImbalanceCue));
  words.insert({"see", "and"});
  std::vector<std::string> tokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  for (auto p : kPunctuation) tokens.emplace_back(p);
  for (char d = '0'; d <= '9'; ++d) {
    tokens.emplace_back(1, d);
    tokens.push_back("##" + std::string(1, d));
  }
  for (auto p : kPieces) tokens.emplace_back(p);
  for (const auto& w : words) {
    if (std::find(tokens.begin(), tokens.end(), w) == tokens.end()) tokens.push_back(w);
  }
  return Vocabulary(std::move(tokens));
}

}  // namespace revq::synthetic
