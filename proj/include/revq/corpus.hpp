#pragma once

// Labeled review-comment datasets: ingestion, splitting, descriptive
// statistics, annotator agreement and class weights.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "detail/random.hpp"
#include "detail/unicode.hpp"

namespace revq {

struct ReviewComment {
  std::string id;
  std::string text;
  std::optional<FeatureLabels> labels;
};

enum class DatasetFormat { jsonl, csv };

inline std::optional<DatasetFormat> parse_dataset_format(std::string_view s) {
  if (s == "jsonl" || s == "json") return DatasetFormat::jsonl;
  if (s == "csv") return DatasetFormat::csv;
  return std::nullopt;
}

/// Picks the format from the file extension; defaults to JSON-lines.
inline DatasetFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? DatasetFormat::csv : DatasetFormat::jsonl;
}

struct LoadReport {
  std::size_t accepted = 0;
  std::size_t dropped_symbol_only = 0;
  std::size_t rejected = 0;
  std::vector<std::string> rejections;  // one diagnostic per rejected record
};

struct LoadedDataset {
  std::vector<ReviewComment> comments;
  LoadReport report;
};

struct LoadOptions {
  /// Strict loading throws on the first bad record; lenient loading counts it
  /// as rejected and moves on.
  bool strict = true;
};

/// A comment is usable iff it has at least one Unicode letter or digit.
inline bool is_symbol_only(std::string_view text) { return !detail::has_letter_or_digit(text); }

namespace detail {

struct RawRecord {
  std::size_t line = 0;
  std::unordered_map<std::string, std::string> text_fields;
  std::unordered_map<std::string, long long> label_fields;
  std::vector<std::string> present;  // every key seen, in order
};

inline constexpr std::array<std::string_view, 3> kLabelKeys{"suggestion", "problem",
                                                            "positive_tone"};

inline std::uint8_t parse_label_value(const std::string& key, long long v, std::size_t line) {
  if (v != 0 && v != 1) {
    throw IngestionError("label '" + key + "' must be 0 or 1, got " + std::to_string(v), line);
  }
  return static_cast<std::uint8_t>(v);
}

// Minimal RFC 4180 reader: quoted fields may contain commas, doubled quotes
// and newlines. Returns (starting line, fields) per record.
inline std::vector<std::pair<std::size_t, std::vector<std::string>>> read_csv(std::istream& in) {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::vector<std::string> fields;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  std::size_t record_line = 1;
  char c = 0;
  auto end_record = [&] {
    if (field_started || !fields.empty()) {
      fields.push_back(std::move(field));
      rows.emplace_back(record_line, std::move(fields));
    }
    fields.clear();
    field.clear();
    field_started = false;
  };
  while (in.get(c)) {
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        fields.push_back(std::move(field));
        field.clear();
        field_started = true;
        break;
      case '\r':
        break;
      case '\n':
        end_record();
        ++line;
        record_line = line;
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) throw IngestionError("unterminated quoted field", record_line);
  end_record();
  return rows;
}

inline std::vector<RawRecord> read_jsonl_records(std::istream& in) {
  std::vector<RawRecord> records;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    RawRecord rec;
    rec.line = line;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw IngestionError(std::string("malformed JSON: ") + e.what(), line);
    }
    if (!obj.is_object()) throw IngestionError("record is not a JSON object", line);
    for (const auto& [key, value] : obj.items()) {
      rec.present.push_back(key);
      if (key == "id" || key == "text") {
        if (!value.is_string()) throw IngestionError("field '" + key + "' must be a string", line);
        rec.text_fields[key] = value.get<std::string>();
      } else if (std::find(kLabelKeys.begin(), kLabelKeys.end(), key) != kLabelKeys.end()) {
        if (!value.is_number_integer()) {
          throw IngestionError("label '" + key + "' must be 0 or 1", line);
        }
        rec.label_fields[key] = value.get<long long>();
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::vector<RawRecord> read_csv_records(std::istream& in) {
  auto rows = read_csv(in);
  std::vector<RawRecord> records;
  if (rows.empty()) return records;
  const auto header = rows.front().second;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& [line, fields] = rows[r];
    if (fields.size() != header.size()) {
      throw IngestionError("expected " + std::to_string(header.size()) + " fields, got " +
                               std::to_string(fields.size()),
                           line);
    }
    RawRecord rec;
    rec.line = line;
    for (std::size_t i = 0; i < header.size(); ++i) {
      const auto& key = header[i];
      rec.present.push_back(key);
      if (key == "id" || key == "text") {
        rec.text_fields[key] = fields[i];
      } else if (std::find(kLabelKeys.begin(), kLabelKeys.end(), key) != kLabelKeys.end()) {
        if (fields[i].empty()) {
          rec.present.pop_back();
          continue;
        }
        try {
          std::size_t used = 0;
          const long long v = std::stoll(fields[i], &used);
          if (used != fields[i].size()) throw std::invalid_argument(fields[i]);
          rec.label_fields[key] = v;
        } catch (const std::logic_error&) {
          throw IngestionError("label '" + key + "' must be 0 or 1, got '" + fields[i] + "'", line);
        }
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace detail

/// Reads a dataset file. Records come back in file order; symbol-only comments
/// are dropped and counted. A file is either fully labeled or fully unlabeled.
inline LoadedDataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                                  LoadOptions options = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset file " + path.string());

  LoadedDataset out;
  auto reject = [&](const IngestionError& e) {
    if (options.strict) throw e;
    ++out.report.rejected;
    out.report.rejections.emplace_back(e.what());
  };

  // Syntax errors abort even in lenient mode: there is no record boundary to resume from.
  const auto records = format == DatasetFormat::jsonl ? detail::read_jsonl_records(in)
                                                      : detail::read_csv_records(in);

  std::unordered_set<std::string> seen_ids;
  std::optional<bool> file_is_labeled;
  for (const auto& rec : records) {
    try {
      const auto id_it = rec.text_fields.find("id");
      const auto text_it = rec.text_fields.find("text");
      if (id_it == rec.text_fields.end()) throw IngestionError("missing field 'id'", rec.line);
      if (text_it == rec.text_fields.end()) throw IngestionError("missing field 'text'", rec.line);

      const std::size_t label_count = rec.label_fields.size();
      if (label_count != 0 && label_count != 3) {
        throw IngestionError("record has " + std::to_string(label_count) +
                                 " of 3 labels; give all three or none",
                             rec.line);
      }
      const bool labeled = label_count == 3;
      if (file_is_labeled && *file_is_labeled != labeled) {
        throw IngestionError("labeled and unlabeled records are mixed in one file", rec.line);
      }

      ReviewComment comment{id_it->second, text_it->second, std::nullopt};
      if (labeled) {
        FeatureLabels labels;
        for (Task t : kAllTasks) {
          const std::string key(task_name(t));
          labels.at(t) = detail::parse_label_value(key, rec.label_fields.at(key), rec.line);
        }
        comment.labels = labels;
      }
      if (!seen_ids.insert(comment.id).second) {
        throw IngestionError("duplicate id '" + comment.id + "'", rec.line);
      }
      file_is_labeled = labeled;
      if (is_symbol_only(comment.text)) {
        ++out.report.dropped_symbol_only;
        continue;
      }
      out.comments.push_back(std::move(comment));
      ++out.report.accepted;
    } catch (const IngestionError& e) {
      reject(e);
    }
  }
  return out;
}

inline LoadedDataset load_dataset(const std::filesystem::path& path) {
  return load_dataset(path, format_from_path(path));
}

/// Writes the canonical JSON-lines form (labels omitted for unlabeled comments).
inline void save_dataset_jsonl(const std::filesystem::path& path,
                               std::span<const ReviewComment> comments) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& c : comments) {
    nlohmann::ordered_json obj;
    obj["id"] = c.id;
    obj["text"] = c.text;
    if (c.labels) {
      for (Task t : kAllTasks) obj[std::string(task_name(t))] = (*c.labels)[t];
    }
    out << obj.dump() << '\n';
  }
}

struct SplitSizes {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
  std::size_t total() const { return train + validation + test; }
};

struct DatasetSplit {
  std::vector<ReviewComment> train;
  std::vector<ReviewComment> validation;
  std::vector<ReviewComment> test;
  std::uint64_t seed = 0;
};

/// Seeded uniform shuffle, then contiguous slices train | validation | test.
/// Not stratified.
inline DatasetSplit split_dataset(std::span<const ReviewComment> data, SplitSizes sizes,
                                  std::uint64_t seed) {
  if (sizes.total() > data.size()) {
    throw SizingError("split needs " + std::to_string(sizes.total()) + " comments but only " +
                          std::to_string(data.size()) + " are available",
                      data.size());
  }
  for (const auto& c : data) {
    if (!c.labels) throw DataError("cannot split: comment '" + c.id + "' is unlabeled");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  detail::Rng rng(seed);
  detail::shuffle(std::span(order), rng);

  DatasetSplit split;
  split.seed = seed;
  auto take = [&](std::size_t from, std::size_t n, std::vector<ReviewComment>& dst) {
    dst.reserve(n);
    for (std::size_t i = from; i < from + n; ++i) dst.push_back(data[order[i]]);
  };
  take(0, sizes.train, split.train);
  take(sizes.train, sizes.validation, split.validation);
  take(sizes.train + sizes.validation, sizes.test, split.test);
  return split;
}

/// Seeded uniform sample of n comments (order follows the sample draw).
inline std::vector<ReviewComment> subsample(std::span<const ReviewComment> data, std::size_t n,
                                            std::uint64_t seed) {
  if (n > data.size()) {
    throw SizingError("cannot sample " + std::to_string(n) + " of " +
                          std::to_string(data.size()) + " comments",
                      data.size());
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  detail::Rng rng(seed);
  detail::shuffle(std::span(order), rng);
  std::vector<ReviewComment> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(data[order[i]]);
  return out;
}

/// Whitespace-delimited token count of the raw text.
inline std::size_t word_count(std::string_view text) {
  return detail::split_whitespace(text).size();
}

struct ClassStats {
  double sample_fraction = 0.0;
  double avg_words = 0.0;
  std::size_t max_words = 0;
  std::size_t count = 0;
};

struct DatasetStats {
  std::array<std::array<ClassStats, 2>, kTaskCount> per_task{};
  std::size_t total_comments = 0;
  double overall_avg_words = 0.0;

  const ClassStats& at(Task t, int cls) const { return per_task[task_index(t)][cls]; }
};

inline DatasetStats class_statistics(std::span<const ReviewComment> data) {
  if (data.empty()) throw DegenerateInputError("no statistics on an empty dataset");
  DatasetStats stats;
  stats.total_comments = data.size();
  std::array<std::array<std::size_t, 2>, kTaskCount> word_sums{};
  std::size_t all_words = 0;
  for (const auto& c : data) {
    if (!c.labels) throw DataError("comment '" + c.id + "' is unlabeled");
    const std::size_t words = word_count(c.text);
    all_words += words;
    for (Task t : kAllTasks) {
      auto& cls = stats.per_task[task_index(t)][(*c.labels)[t]];
      ++cls.count;
      cls.max_words = std::max(cls.max_words, words);
      word_sums[task_index(t)][(*c.labels)[t]] += words;
    }
  }
  const auto n = static_cast<double>(data.size());
  for (std::size_t ti = 0; ti < kTaskCount; ++ti) {
    for (int k = 0; k < 2; ++k) {
      auto& cls = stats.per_task[ti][k];
      cls.sample_fraction = static_cast<double>(cls.count) / n;
      cls.avg_words =
          cls.count ? static_cast<double>(word_sums[ti][k]) / static_cast<double>(cls.count) : 0.0;
    }
  }
  stats.overall_avg_words = static_cast<double>(all_words) / n;
  return stats;
}

/// Renders the per-label/per-class statistics table.
inline std::string render_stats_table(const DatasetStats& stats) {
  std::ostringstream os;
  os << std::left << std::setw(15) << "Label" << std::setw(7) << "Class" << std::setw(11)
     << "%samples" << std::setw(13) << "avg.#words" << "max#words\n";
  for (Task t : kAllTasks) {
    for (int k = 0; k < 2; ++k) {
      const auto& cls = stats.at(t, k);
      std::ostringstream pct;
      pct << std::fixed << std::setprecision(1) << cls.sample_fraction * 100.0 << '%';
      std::ostringstream avg;
      avg << std::fixed << std::setprecision(1) << cls.avg_words;
      os << std::left << std::setw(15) << (k == 0 ? std::string(task_name(t)) : "")
         << std::setw(7) << k << std::setw(11) << pct.str() << std::setw(13) << avg.str()
         << cls.max_words << '\n';
    }
  }
  os << "comments: " << stats.total_comments << ", avg words per comment: " << std::fixed
     << std::setprecision(1) << stats.overall_avg_words << '\n';
  return os.str();
}

/// Cohen's kappa for two binary annotation sequences.
/// When both annotators are constant and identical the chance agreement is 1;
/// that case is defined as 1.0, and any other p_e == 1 case is rejected.
template <typename A, typename B>
double cohen_kappa(const A& a, const B& b) {
  const auto n = std::size(a);
  if (n != std::size(b)) throw std::invalid_argument("cohen_kappa: annotation lengths differ");
  if (n == 0) throw std::invalid_argument("cohen_kappa: empty annotations");
  std::size_t agree = 0;
  std::size_t ones_a = 0;
  std::size_t ones_b = 0;
  auto ib = std::begin(b);
  for (auto ia = std::begin(a); ia != std::end(a); ++ia, ++ib) {
    const bool x = static_cast<int>(*ia) != 0;
    const bool y = static_cast<int>(*ib) != 0;
    agree += x == y;
    ones_a += x;
    ones_b += y;
  }
  const double nd = static_cast<double>(n);
  const double p_o = static_cast<double>(agree) / nd;
  const double pa1 = static_cast<double>(ones_a) / nd;
  const double pb1 = static_cast<double>(ones_b) / nd;
  const double p_e = pa1 * pb1 + (1.0 - pa1) * (1.0 - pb1);
  if (p_e >= 1.0) {
    if (p_o == 1.0) return 1.0;
    throw DegenerateInputError("cohen_kappa: chance agreement is 1 but observed agreement is not");
  }
  return (p_o - p_e) / (1.0 - p_e);
}

struct AgreementReport {
  std::array<double, kTaskCount> kappa{};
  double average_kappa = 0.0;
  std::size_t paired_comments = 0;
};

/// Pairs two annotations of the same comments by id and computes per-task kappa.
inline AgreementReport agreement(std::span<const ReviewComment> first,
                                 std::span<const ReviewComment> second) {
  std::unordered_map<std::string, const ReviewComment*> by_id;
  for (const auto& c : second) by_id.emplace(c.id, &c);
  std::array<std::vector<int>, kTaskCount> a;
  std::array<std::vector<int>, kTaskCount> b;
  for (const auto& c : first) {
    const auto it = by_id.find(c.id);
    if (it == by_id.end()) continue;
    if (!c.labels || !it->second->labels) {
      throw DataError("comment '" + c.id + "' is unlabeled in one of the annotation files");
    }
    for (Task t : kAllTasks) {
      a[task_index(t)].push_back((*c.labels)[t]);
      b[task_index(t)].push_back((*it->second->labels)[t]);
    }
  }
  if (a[0].empty()) throw DataError("annotation files share no comment ids");
  AgreementReport report;
  report.paired_comments = a[0].size();
  for (std::size_t i = 0; i < kTaskCount; ++i) report.kappa[i] = cohen_kappa(a[i], b[i]);
  report.average_kappa =
      std::accumulate(report.kappa.begin(), report.kappa.end(), 0.0) / kTaskCount;
  return report;
}

/// Per task, (w0, w1).
struct ClassWeights {
  std::array<std::array<double, 2>, kTaskCount> weights{{{1.0, 1.0}, {1.0, 1.0}, {1.0, 1.0}}};

  const std::array<double, 2>& operator[](Task t) const { return weights[task_index(t)]; }
  std::array<double, 2>& operator[](Task t) { return weights[task_index(t)]; }

  static ClassWeights uniform() { return {}; }
};

/// Balanced inverse frequency, w_c = 1 / (2 f_c), from class fractions.
inline std::array<double, 2> balanced_weights(double fraction_class1) {
  const double f1 = fraction_class1;
  const double f0 = 1.0 - fraction_class1;
  if (f0 <= 0.0 || f1 <= 0.0) {
    throw DegenerateInputError("class weight undefined: only one class present");
  }
  return {1.0 / (2.0 * f0), 1.0 / (2.0 * f1)};
}

/// Class weights from the label triples of a training split.
inline ClassWeights class_weights_from_labels(std::span<const FeatureLabels> labels) {
  if (labels.empty()) throw DegenerateInputError("class weights need a non-empty training split");
  std::array<std::size_t, kTaskCount> ones{};
  for (const auto& l : labels) {
    for (Task t : kAllTasks) ones[task_index(t)] += l[t];
  }
  ClassWeights w;
  const auto n = static_cast<double>(labels.size());
  for (Task t : kAllTasks) {
    try {
      w[t] = balanced_weights(static_cast<double>(ones[task_index(t)]) / n);
    } catch (const DegenerateInputError&) {
      throw DegenerateInputError("class weight undefined for task '" + std::string(task_name(t)) +
                                 "': only one class present in the training split");
    }
  }
  return w;
}

inline ClassWeights compute_class_weights(std::span<const ReviewComment> train) {
  std::vector<FeatureLabels> labels;
  labels.reserve(train.size());
  for (const auto& c : train) {
    if (!c.labels) throw DataError("comment '" + c.id + "' is unlabeled");
    labels.push_back(*c.labels);
  }
  return class_weights_from_labels(labels);
}

}  // namespace revq
