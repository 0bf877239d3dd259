#pragma once

// Accuracy, macro-F1 and ROC AUC for binary tasks, model evaluation, and the
// seed-averaged results table.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "model.hpp"

namespace revq {

namespace detail {
template <typename A, typename B>
void require_same_nonzero_length(const A& a, const B& b, const char* what) {
  if (std::size(a) != std::size(b)) {
    throw std::invalid_argument(std::string(what) + ": length mismatch (" +
                                std::to_string(std::size(a)) + " vs " +
                                std::to_string(std::size(b)) + ")");
  }
  if (std::size(a) == 0) throw std::invalid_argument(std::string(what) + ": empty input");
}
}  // namespace detail

template <typename Preds, typename Labels>
double accuracy(const Preds& preds, const Labels& labels) {
  detail::require_same_nonzero_length(preds, labels, "accuracy");
  std::size_t hits = 0;
  auto il = std::begin(labels);
  for (auto ip = std::begin(preds); ip != std::end(preds); ++ip, ++il) {
    hits += (static_cast<int>(*ip) != 0) == (static_cast<int>(*il) != 0);
  }
  return static_cast<double>(hits) / static_cast<double>(std::size(preds));
}

/// Counts for a binary confusion matrix, class 1 as "positive".
struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

template <typename Preds, typename Labels>
Confusion confusion(const Preds& preds, const Labels& labels) {
  Confusion c;
  auto il = std::begin(labels);
  for (auto ip = std::begin(preds); ip != std::end(preds); ++ip, ++il) {
    const bool p = static_cast<int>(*ip) != 0;
    const bool y = static_cast<int>(*il) != 0;
    if (p && y) ++c.tp;
    else if (p) ++c.fp;
    else if (y) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// F1 of one class. No predicted and no actual members: 1.0. Exactly one of
/// the two empty: 0.0.
inline double class_f1(std::size_t true_pos, std::size_t false_pos, std::size_t false_neg) {
  const std::size_t predicted = true_pos + false_pos;
  const std::size_t actual = true_pos + false_neg;
  if (predicted == 0 && actual == 0) return 1.0;
  if (predicted == 0 || actual == 0) return 0.0;
  return 2.0 * static_cast<double>(true_pos) / static_cast<double>(predicted + actual);
}

/// Mean of the class-1 and class-0 F1 scores.
template <typename Preds, typename Labels>
double macro_f1(const Preds& preds, const Labels& labels) {
  detail::require_same_nonzero_length(preds, labels, "macro_f1");
  const Confusion c = confusion(preds, labels);
  return 0.5 * (class_f1(c.tp, c.fp, c.fn) + class_f1(c.tn, c.fn, c.fp));
}

/// Recall of class 1.
template <typename Preds, typename Labels>
double positive_recall(const Preds& preds, const Labels& labels) {
  detail::require_same_nonzero_length(preds, labels, "positive_recall");
  const Confusion c = confusion(preds, labels);
  if (c.tp + c.fn == 0) throw DegenerateInputError("positive_recall: no positive labels");
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ordered correctly, ties counting one half.
/// Computed from mid-ranks in O(n log n).
template <typename Scores, typename Labels>
double auc(const Scores& scores, const Labels& labels) {
  detail::require_same_nonzero_length(scores, labels, "auc");
  const std::size_t n = std::size(scores);
  std::vector<std::pair<double, bool>> items;
  items.reserve(n);
  auto il = std::begin(labels);
  for (auto is = std::begin(scores); is != std::end(scores); ++is, ++il) {
    items.emplace_back(static_cast<double>(*is), static_cast<int>(*il) != 0);
  }
  const auto positives = static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [](const auto& x) { return x.second; }));
  const std::size_t negatives = n - positives;
  if (positives == 0) throw DegenerateInputError("auc: no positive (class 1) labels");
  if (negatives == 0) throw DegenerateInputError("auc: no negative (class 0) labels");

  std::sort(items.begin(), items.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  // Sum over positives of (#negatives strictly below + half #negatives tied).
  double wins = 0.0;
  std::size_t negatives_below = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < n && items[j].first == items[i].first) {
      pos_in_group += items[j].second;
      ++j;
    }
    const std::size_t neg_in_group = (j - i) - pos_in_group;
    wins += static_cast<double>(pos_in_group) *
            (static_cast<double>(negatives_below) + 0.5 * static_cast<double>(neg_in_group));
    negatives_below += neg_in_group;
    i = j;
  }
  return wins / (static_cast<double>(positives) * static_cast<double>(negatives));
}

struct TaskMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  /// Undefined (nullopt) when the evaluated labels hold a single class.
  std::optional<double> auc;
};

struct MetricsReport {
  std::array<std::optional<TaskMetrics>, kTaskCount> tasks{};
  std::size_t sample_count = 0;

  const std::optional<TaskMetrics>& operator[](Task t) const { return tasks[task_index(t)]; }
  std::optional<TaskMetrics>& operator[](Task t) { return tasks[task_index(t)]; }
  std::size_t task_count() const {
    return static_cast<std::size_t>(std::count_if(tasks.begin(), tasks.end(),
                                                  [](const auto& m) { return m.has_value(); }));
  }
  /// Mean macro-F1 over the tasks present.
  double mean_macro_f1() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& m : tasks) {
      if (m) {
        sum += m->macro_f1;
        ++n;
      }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
  }
};

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["sample_count"] = r.sample_count;
  nlohmann::ordered_json tasks = nlohmann::ordered_json::object();
  for (Task t : kAllTasks) {
    const auto& m = r[t];
    if (!m) continue;
    nlohmann::ordered_json e;
    e["accuracy"] = m->accuracy;
    e["macro_f1"] = m->macro_f1;
    e["auc"] = m->auc ? nlohmann::ordered_json(*m->auc) : nlohmann::ordered_json(nullptr);
    tasks[std::string(task_name(t))] = e;
  }
  j["tasks"] = tasks;
  return j;
}

/// Per-task decisions (argmax, ties to class 1) and class-1 probabilities.
struct Predictions {
  std::vector<Task> tasks;
  std::vector<std::vector<std::uint8_t>> decisions;  // parallel to tasks
  std::vector<std::vector<double>> scores;
};

inline Predictions predict(const ModelHandle& model, std::span<const EncodedExample> data,
                           std::size_t batch_size = 64) {
  Predictions out;
  out.tasks = model.tasks();
  out.decisions.resize(out.tasks.size());
  out.scores.resize(out.tasks.size());
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto batch = data.subspan(start, std::min(batch_size, data.size() - start));
    const TaskLogits logits = model.forward(batch);
    for (std::size_t ti = 0; ti < out.tasks.size(); ++ti) {
      const auto& l = logits.logits[ti];
      for (Eigen::Index i = 0; i < l.rows(); ++i) {
        const double p = positive_probability(l(i, 0), l(i, 1));
        out.scores[ti].push_back(p);
        out.decisions[ti].push_back(l(i, 1) >= l(i, 0) ? 1 : 0);
      }
    }
  }
  return out;
}

inline TaskMetrics task_metrics(std::span<const std::uint8_t> decisions,
                                std::span<const double> scores,
                                std::span<const std::uint8_t> labels) {
  TaskMetrics m;
  m.accuracy = accuracy(decisions, labels);
  m.macro_f1 = macro_f1(decisions, labels);
  const bool both = std::find(labels.begin(), labels.end(), 1) != labels.end() &&
                    std::find(labels.begin(), labels.end(), 0) != labels.end();
  if (both) m.auc = auc(scores, labels);
  return m;
}

inline std::vector<std::uint8_t> labels_of(std::span<const EncodedExample> data, Task t) {
  std::vector<std::uint8_t> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    if (!ex.labels) throw DataError("evaluation data must be labeled");
    out.push_back((*ex.labels)[t]);
  }
  return out;
}

/// Inference-mode metrics for every head of the model.
inline MetricsReport evaluate(const ModelHandle& model, std::span<const EncodedExample> data) {
  if (data.empty()) throw DegenerateInputError("evaluate: empty data");
  const Predictions preds = predict(model, data);
  MetricsReport report;
  report.sample_count = data.size();
  for (std::size_t ti = 0; ti < preds.tasks.size(); ++ti) {
    const auto labels = labels_of(data, preds.tasks[ti]);
    report[preds.tasks[ti]] = task_metrics(preds.decisions[ti], preds.scores[ti], labels);
  }
  return report;
}

// Results table -------------------------------------------------------------------

/// One (setting, training size) row: per-task metrics averaged over runs.
struct ResultCell {
  std::string setting;
  std::size_t training_size = 0;
  MetricsReport mean;
  std::size_t runs = 0;
};

struct ResultsTable {
  std::vector<ResultCell> cells;
};

/// Arithmetic mean of reports sharing the same task set. AUC is averaged
/// over the runs where it is defined.
inline MetricsReport average_reports(std::span<const MetricsReport> runs) {
  if (runs.empty()) throw std::invalid_argument("average_reports: no runs");
  MetricsReport out;
  out.sample_count = runs.front().sample_count;
  for (Task t : kAllTasks) {
    const bool present = runs.front()[t].has_value();
    for (const auto& r : runs) {
      if (r[t].has_value() != present) throw std::invalid_argument("runs disagree on tasks");
    }
    if (!present) continue;
    TaskMetrics m;
    double auc_sum = 0.0;
    std::size_t auc_n = 0;
    for (const auto& r : runs) {
      m.accuracy += r[t]->accuracy;
      m.macro_f1 += r[t]->macro_f1;
      if (r[t]->auc) {
        auc_sum += *r[t]->auc;
        ++auc_n;
      }
    }
    m.accuracy /= static_cast<double>(runs.size());
    m.macro_f1 /= static_cast<double>(runs.size());
    if (auc_n) m.auc = auc_sum / static_cast<double>(auc_n);
    out[t] = m;
  }
  return out;
}

/// Rounds half away from zero at `decimals` places. The tiny relative nudge
/// makes decimal ties such as 0.9045 (stored as 0.90449999...) round up.
inline double round_half_away(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  const double scaled = value * scale;
  const double nudged = scaled + std::copysign(std::abs(scaled) * 1e-12 + 1e-12, scaled);
  return std::round(nudged) / scale;
}

/// "94.0%"
inline std::string format_percent(double fraction) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << round_half_away(fraction * 100.0, 1) << '%';
  return os.str();
}

/// ".904"; values of 1 and above keep their integer part ("1.000").
inline std::string format_score(double value) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << round_half_away(value, 3);
  std::string s = os.str();
  if (s.rfind("0.", 0) == 0) s.erase(0, 1);
  return s;
}

inline std::string setting_display_name(std::string_view setting) {
  static const std::map<std::string, std::string, std::less<>> kNames{
      {"stl_glove", "STL-GloVe (Baseline)"}, {"stl_base", "STL-base"},
      {"mtl_base", "MTL-base"},              {"stl_distilled", "STL-distilled"},
      {"mtl_distilled", "MTL-distilled"},    {"stl_toy", "STL-toy"},
      {"mtl_toy", "MTL-toy"}};
  const auto it = kNames.find(setting);
  return it == kNames.end() ? std::string(setting) : it->second;
}

namespace detail {
inline int setting_rank(std::string_view s) {
  static constexpr std::array<std::string_view, 7> kOrder{
      "stl_glove", "stl_base", "mtl_base", "stl_distilled", "mtl_distilled", "stl_toy", "mtl_toy"};
  const auto it = std::find(kOrder.begin(), kOrder.end(), s);
  return static_cast<int>(it - kOrder.begin());
}

inline std::vector<const ResultCell*> ordered_cells(const ResultsTable& table) {
  if (table.cells.empty()) throw std::invalid_argument("results table has no cells");
  const auto& first = table.cells.front().mean;
  for (const auto& c : table.cells) {
    for (Task t : kAllTasks) {
      if (c.mean[t].has_value() != first[t].has_value()) {
        throw std::invalid_argument("ragged results: cell " + c.setting + "/" +
                                    std::to_string(c.training_size) +
                                    " has a different task set");
      }
    }
  }
  std::vector<const ResultCell*> cells;
  for (const auto& c : table.cells) cells.push_back(&c);
  std::stable_sort(cells.begin(), cells.end(), [](const ResultCell* a, const ResultCell* b) {
    if (a->training_size != b->training_size) return a->training_size < b->training_size;
    return setting_rank(a->setting) < setting_rank(b->setting);
  });
  return cells;
}
}  // namespace detail

/// Aligned plain-text table: rows grouped by training size then setting,
/// Acc./Macro-F1/AUC column triples per task.
inline std::string render_results_table(const ResultsTable& table) {
  const auto cells = detail::ordered_cells(table);
  std::vector<Task> tasks;
  for (Task t : kAllTasks) {
    if (cells.front()->mean[t]) tasks.push_back(t);
  }
  constexpr int kNameWidth = 22;
  constexpr int kCol = 9;
  std::ostringstream os;
  os << std::left << std::setw(kNameWidth) << "";
  for (Task t : tasks) os << "| " << std::setw(3 * kCol) << task_name(t);
  os << '\n' << std::setw(kNameWidth) << "Setting";
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    os << "| " << std::setw(kCol) << "Acc." << std::setw(kCol) << "Macro-F1" << std::setw(kCol)
       << "AUC";
  }
  os << '\n';
  std::optional<std::size_t> current_size;
  for (const ResultCell* c : cells) {
    if (current_size != c->training_size) {
      current_size = c->training_size;
      os << "Training with " << c->training_size << " labeled data samples\n";
    }
    os << std::setw(kNameWidth) << setting_display_name(c->setting);
    for (Task t : tasks) {
      const auto& m = *c->mean[t];
      os << "| " << std::setw(kCol) << format_percent(m.accuracy) << std::setw(kCol)
         << format_score(m.macro_f1) << std::setw(kCol)
         << (m.auc ? format_score(*m.auc) : std::string("n/a"));
    }
    os << '\n';
  }
  return os.str();
}

/// CSV with full-precision values, one row per cell.
inline std::string render_results_csv(const ResultsTable& table) {
  const auto cells = detail::ordered_cells(table);
  std::ostringstream os;
  os << "setting,training_size,runs";
  for (Task t : kAllTasks) {
    if (!cells.front()->mean[t]) continue;
    for (const char* m : {"accuracy", "macro_f1", "auc"}) os << ',' << task_name(t) << '_' << m;
  }
  os << '\n' << std::setprecision(17);
  for (const ResultCell* c : cells) {
    os << c->setting << ',' << c->training_size << ',' << c->runs;
    for (Task t : kAllTasks) {
      const auto& m = c->mean[t];
      if (!m) continue;
      os << ',' << m->accuracy << ',' << m->macro_f1 << ',';
      if (m->auc) os << *m->auc;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace revq
