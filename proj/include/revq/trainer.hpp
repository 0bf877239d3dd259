#pragma once

// Fine-tuning: cost-sensitive cross-entropy summed over task heads, Adam,
// grid selection on validation macro-F1, and seed-averaged experiments.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "corpus.hpp"
#include "metrics.hpp"
#include "model.hpp"

namespace revq {

struct Hyperparams {
  std::size_t batch_size = 32;
  std::size_t max_len = kDefaultMaxLen;
  double learning_rate = 2e-5;
  std::size_t epochs = 2;
  double dropout = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  /// Stop after this many optimizer steps (0 = no cap).
  std::size_t max_steps = 0;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be positive");
    if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
    if (dropout < 0 || dropout >= 1) throw std::invalid_argument("dropout must be in [0, 1)");
    if (max_len < 3) throw std::invalid_argument("max_len must be at least 3");
  }
};

// Losses ------------------------------------------------------------------------

/// log(exp(a) + exp(b)) without overflow.
inline double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

/// -w_label * log softmax(logits)[label].
inline double weighted_cross_entropy(double logit0, double logit1, int label,
                                     const std::array<double, 2>& weights) {
  const double chosen = label ? logit1 : logit0;
  return -weights[label ? 1 : 0] * (chosen - log_sum_exp(logit0, logit1));
}

/// Unweighted cross-entropy.
inline double cross_entropy(double logit0, double logit1, int label) {
  return weighted_cross_entropy(logit0, logit1, label, {1.0, 1.0});
}

/// Sum of the per-task losses, one per attached task, no task coefficients.
inline double mtl_total_loss(const std::map<Task, double>& per_task_losses,
                             std::span<const Task> attached) {
  double total = 0.0;
  for (Task t : attached) {
    const auto it = per_task_losses.find(t);
    if (it == per_task_losses.end()) {
      throw std::invalid_argument("missing loss for task " + std::string(task_name(t)));
    }
    total += it->second;
  }
  return total;
}

inline double mtl_total_loss(const std::map<Task, double>& per_task_losses) {
  double total = 0.0;
  for (const auto& [task, loss] : per_task_losses) total += loss;
  return total;
}

/// Mean weighted cross-entropy over a batch and its gradient w.r.t. the logits.
inline double batch_loss(const nn::Matrix& logits, std::span<const std::uint8_t> labels,
                         const std::array<double, 2>& weights, nn::Matrix* d_logits) {
  const auto n = static_cast<double>(logits.rows());
  double loss = 0.0;
  if (d_logits) d_logits->resize(logits.rows(), 2);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    loss += weighted_cross_entropy(logits(i, 0), logits(i, 1), y, weights);
    if (d_logits) {
      const double p1 = positive_probability(logits(i, 0), logits(i, 1));
      const double w = weights[y];
      (*d_logits)(i, 0) = w * ((1.0 - p1) - (y == 0 ? 1.0 : 0.0)) / n;
      (*d_logits)(i, 1) = w * (p1 - (y == 1 ? 1.0 : 0.0)) / n;
    }
  }
  return loss / n;
}

/// One forward/backward pass. Gradients accumulate into the model's params
/// (callers zero them). Only tasks in `active` contribute to the loss.
/// Returns the per-task batch losses.
inline std::map<Task, double> accumulate_gradients(ModelHandle& model,
                                                   std::span<const EncodedExample> batch,
                                                   const ClassWeights& weights,
                                                   std::span<const Task> active,
                                                   detail::Rng& rng) {
  ModelTape tape;
  const TaskLogits logits = model.forward_train(batch, rng, tape);
  std::vector<nn::Matrix> d_logits(logits.tasks.size());
  std::map<Task, double> losses;
  for (std::size_t i = 0; i < logits.tasks.size(); ++i) {
    const Task t = logits.tasks[i];
    if (std::find(active.begin(), active.end(), t) == active.end()) continue;
    std::vector<std::uint8_t> labels;
    labels.reserve(batch.size());
    for (const auto& ex : batch) {
      if (!ex.labels) throw DataError("training examples must be labeled");
      labels.push_back((*ex.labels)[t]);
    }
    losses[t] = batch_loss(logits.logits[i], labels, weights[t], &d_logits[i]);
  }
  model.backward(tape, d_logits);
  return losses;
}

// Optimizer ---------------------------------------------------------------------

/// Adam with bias correction and a constant learning rate.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ModelHandle& model) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t slot = 0;
    model.visit([&](nn::Param& p) {
      if (!p.trainable) return;
      if (slot == m_.size()) {
        m_.push_back(nn::Matrix::Zero(p.rows, p.cols));
        v_.push_back(nn::Matrix::Zero(p.rows, p.cols));
      }
      auto& m = m_[slot];
      auto& v = v_[slot];
      m = beta1_ * m + (1.0 - beta1_) * p.grad;
      v = beta2_ * v + (1.0 - beta2_) * p.grad.cwiseAbs2();
      p.value.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
      ++slot;
    });
  }

  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<nn::Matrix> m_, v_;
};

// Training ----------------------------------------------------------------------

struct EncodedSplit {
  std::vector<EncodedExample> train;
  std::vector<EncodedExample> validation;
  std::vector<EncodedExample> test;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;  // cumulative optimizer steps at epoch end
  std::map<Task, double> mean_loss;
  std::optional<MetricsReport> validation;  // absent when the validation split is empty
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double learning_rate = 0.0;
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  double wall_clock_seconds = 0.0;
  std::optional<MetricsReport> final_train;  // inference-mode metrics on the training split

  double final_validation_score() const {
    if (epochs.empty() || !epochs.back().validation) return 0.0;
    return epochs.back().validation->mean_macro_f1();
  }
};

/// JSON-lines: one {"type":"epoch"} line per epoch then one summary line.
inline std::string to_jsonl(const TrainReport& r, bool include_timing = true) {
  std::string out;
  for (const auto& e : r.epochs) {
    nlohmann::ordered_json j;
    j["type"] = "epoch";
    j["epoch"] = e.epoch;
    j["steps"] = e.steps;
    nlohmann::ordered_json loss = nlohmann::ordered_json::object();
    for (const auto& [t, l] : e.mean_loss) loss[std::string(task_name(t))] = l;
    j["mean_loss"] = loss;
    j["validation"] = e.validation ? to_json(*e.validation) : nlohmann::ordered_json(nullptr);
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json s;
  s["type"] = "summary";
  s["learning_rate"] = r.learning_rate;
  s["epochs"] = r.epochs_run;
  s["steps"] = r.steps;
  s["seed"] = r.seed;
  s["final_train"] = r.final_train ? to_json(*r.final_train) : nlohmann::ordered_json(nullptr);
  if (include_timing) s["wall_clock_seconds"] = r.wall_clock_seconds;
  out += s.dump() + "\n";
  return out;
}

using ProgressFn = std::function<void(const std::string&)>;

/// Trains in place: hp.epochs passes over seeded-shuffled mini-batches, each
/// step minimizing the summed per-task weighted cross-entropy.
/// Throws DivergenceError on a non-finite loss.
inline TrainReport train(ModelHandle& model, const EncodedSplit& split, const Hyperparams& hp,
                         const ClassWeights& weights, const ProgressFn& progress = {}) {
  hp.validate();
  if (split.train.empty()) throw DegenerateInputError("training split is empty");
  if (model.max_len() != hp.max_len) {
    throw ShapeError("model max_len " + std::to_string(model.max_len()) +
                     " differs from hyperparameter max_len " + std::to_string(hp.max_len));
  }
  for (Task t : kAllTasks) {
    if (!(weights[t][0] > 0 && weights[t][1] > 0)) {
      throw std::invalid_argument("class weights must be positive");
    }
  }
  const auto started = std::chrono::steady_clock::now();
  model.set_head_dropout(hp.dropout);

  detail::Rng order_rng(detail::mix_seed(hp.seed, 11));
  detail::Rng dropout_rng(detail::mix_seed(hp.seed, 12));
  Adam adam(hp.learning_rate, hp.adam_beta1, hp.adam_beta2, hp.adam_epsilon);
  const std::vector<Task> tasks = model.tasks();

  TrainReport report;
  report.learning_rate = hp.learning_rate;
  report.seed = hp.seed;
  std::vector<std::size_t> order(split.train.size());
  std::vector<EncodedExample> batch;
  bool capped = false;
  for (std::size_t epoch = 0; epoch < hp.epochs && !capped; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    detail::shuffle(std::span(order), order_rng);
    EpochRecord record;
    record.epoch = epoch;
    std::map<Task, double> loss_sum;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      if (hp.max_steps && adam.steps() >= hp.max_steps) {
        capped = true;
        break;
      }
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(split.train[order[i]]);

      model.zero_grad();
      const auto losses = accumulate_gradients(model, batch, weights, tasks, dropout_rng);
      const double total = mtl_total_loss(losses, tasks);
      if (!std::isfinite(total)) {
        throw DivergenceError("non-finite loss at step " + std::to_string(adam.steps()),
                              adam.steps());
      }
      adam.step(model);
      for (const auto& [t, l] : losses) loss_sum[t] += l * static_cast<double>(batch.size());
      seen += batch.size();
    }
    if (seen == 0) break;
    for (const auto& [t, s] : loss_sum) record.mean_loss[t] = s / static_cast<double>(seen);
    record.steps = adam.steps();
    if (!split.validation.empty()) record.validation = evaluate(model, split.validation);
    if (progress) {
      std::string msg = "epoch " + std::to_string(epoch) + " steps " + std::to_string(record.steps);
      for (const auto& [t, l] : record.mean_loss) {
        msg += " " + std::string(task_name(t)) + "=" + std::to_string(l);
      }
      if (record.validation) msg += " val_macro_f1=" + std::to_string(record.validation->mean_macro_f1());
      progress(msg);
    }
    report.epochs.push_back(std::move(record));
  }
  report.epochs_run = report.epochs.size();
  report.steps = adam.steps();
  report.final_train = evaluate(model, split.train);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

// Grid selection ----------------------------------------------------------------

struct HyperGrid {
  std::vector<double> learning_rates{2e-5, 3e-5, 5e-5};
  std::vector<std::size_t> epochs{2, 3};

  std::size_t size() const { return learning_rates.size() * epochs.size(); }
};

struct GridOutcome {
  double learning_rate = 0.0;
  std::size_t epochs = 0;
  double score = 0.0;  // mean validation macro-F1 over attached tasks
  bool diverged = false;
};

/// Highest score wins; ties go to the lower learning rate, then fewer epochs.
/// Returns the index of the winner. Throws when every point diverged.
inline std::size_t select_best(std::span<const GridOutcome> outcomes) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    if (o.diverged) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = outcomes[*best];
    if (o.score > b.score ||
        (o.score == b.score &&
         (o.learning_rate < b.learning_rate ||
          (o.learning_rate == b.learning_rate && o.epochs < b.epochs)))) {
      best = i;
    }
  }
  if (!best) throw DivergenceError("every grid point diverged", 0);
  return *best;
}

using ModelBuilder = std::function<ModelHandle(const Hyperparams&)>;

struct GridResult {
  Hyperparams best;
  TrainReport report;
  std::optional<ModelHandle> model;
  std::vector<GridOutcome> outcomes;
};

/// Trains one fresh model per grid point and keeps the selected one.
inline GridResult grid_select(const ModelBuilder& builder, const EncodedSplit& split,
                              const Hyperparams& base, const HyperGrid& grid,
                              const ClassWeights& weights, const ProgressFn& progress = {}) {
  if (grid.size() == 0) throw std::invalid_argument("grid is empty");
  if (grid.size() > 1 && split.validation.empty()) {
    throw std::invalid_argument("grid selection over several points needs a validation split");
  }
  GridResult result;
  std::optional<std::size_t> kept;
  for (double lr : grid.learning_rates) {
    for (std::size_t ep : grid.epochs) {
      Hyperparams hp = base;
      hp.learning_rate = lr;
      hp.epochs = ep;
      GridOutcome outcome{lr, ep, 0.0, false};
      try {
        ModelHandle model = builder(hp);
        TrainReport report = train(model, split, hp, weights, progress);
        outcome.score = report.final_validation_score();
        result.outcomes.push_back(outcome);
        const std::size_t idx = result.outcomes.size() - 1;
        if (!kept || select_best(result.outcomes) == idx) {
          kept = idx;
          result.best = hp;
          result.report = std::move(report);
          result.model = std::move(model);
        }
      } catch (const DivergenceError&) {
        outcome.diverged = true;
        result.outcomes.push_back(outcome);
      }
    }
  }
  if (!kept) throw DivergenceError("every grid point diverged", 0);
  return result;
}

// Experiments -------------------------------------------------------------------

struct ExperimentSetting {
  ModelMode mode = ModelMode::mtl;
  EncoderFamily family = EncoderFamily::toy_transformer;

  std::string name() const {
    std::string s = mode == ModelMode::stl ? "stl_" : "mtl_";
    switch (family) {
      case EncoderFamily::transformer_base:
        return s + "base";
      case EncoderFamily::transformer_distilled:
        return s + "distilled";
      case EncoderFamily::glove_baseline:
        return s + "glove";
      case EncoderFamily::toy_transformer:
        return s + "toy";
    }
    return s;
  }

  static std::optional<ExperimentSetting> parse(std::string_view s) {
    if (s.size() < 5 || s[3] != '_') return std::nullopt;
    ExperimentSetting out;
    const auto mode = s.substr(0, 3);
    if (mode == "stl") out.mode = ModelMode::stl;
    else if (mode == "mtl") out.mode = ModelMode::mtl;
    else return std::nullopt;
    const auto family = parse_family(s.substr(4));
    if (!family) return std::nullopt;
    out.family = *family;
    // The word-vector baseline is single-task only.
    if (out.family == EncoderFamily::glove_baseline && out.mode == ModelMode::mtl) {
      return std::nullopt;
    }
    return out;
  }
};

struct ExperimentConfig {
  ExperimentSetting setting;
  std::vector<std::size_t> training_sizes{1000, 3000, 5000};
  std::vector<std::uint64_t> run_seeds{0, 1, 2, 3, 4};
  HyperGrid grid;
  Hyperparams base;
  bool cost_sensitive = true;

  void validate(std::size_t train_split_size) const {
    std::vector<std::uint64_t> seeds = run_seeds;
    std::sort(seeds.begin(), seeds.end());
    if (seeds.empty()) throw std::invalid_argument("experiment needs at least one run seed");
    if (std::adjacent_find(seeds.begin(), seeds.end()) != seeds.end()) {
      throw std::invalid_argument("run seeds must be distinct");
    }
    if (training_sizes.empty()) throw std::invalid_argument("experiment needs a training size");
    for (auto n : training_sizes) {
      if (n == 0 || n > train_split_size) {
        throw SizingError("training size " + std::to_string(n) + " exceeds the " +
                              std::to_string(train_split_size) + "-example training split",
                          train_split_size);
      }
    }
  }
};

/// Builds a fresh model for the given tasks and initialization seed.
using TaskModelFactory = std::function<ModelHandle(const std::vector<Task>&, std::uint64_t)>;

struct RunRecord {
  std::size_t training_size = 0;
  std::uint64_t seed = 0;
  MetricsReport test;
  std::vector<Hyperparams> selected;  // one per trained model
};

struct ExperimentResult {
  ResultsTable table;
  std::vector<RunRecord> runs;
};

inline std::vector<FeatureLabels> labels_of(std::span<const EncodedExample> data) {
  std::vector<FeatureLabels> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    if (!ex.labels) throw DataError("training examples must be labeled");
    out.push_back(*ex.labels);
  }
  return out;
}

/// Seeded uniform sample of n encoded examples.
inline std::vector<EncodedExample> subsample(std::span<const EncodedExample> data, std::size_t n,
                                             std::uint64_t seed) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  detail::Rng rng(seed);
  detail::shuffle(std::span(order), rng);
  std::vector<EncodedExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(data[order[i]]);
  return out;
}

/// For each training size and seed: subsample the training split, train with
/// grid selection (one model per task for STL settings), evaluate on the
/// fixed test split. Cells report the mean over seeds.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const EncodedSplit& data,
                                       const TaskModelFactory& factory,
                                       const ProgressFn& progress = {}) {
  cfg.validate(data.train.size());
  if (data.test.empty()) throw DegenerateInputError("experiment needs a test split");
  ExperimentResult result;
  for (std::size_t size : cfg.training_sizes) {
    std::vector<MetricsReport> per_seed;
    for (std::uint64_t seed : cfg.run_seeds) {
      EncodedSplit cell{subsample(data.train, size, detail::mix_seed(seed, 21)), data.validation,
                        {}};
      const ClassWeights weights = cfg.cost_sensitive
                                       ? class_weights_from_labels(labels_of(cell.train))
                                       : ClassWeights::uniform();
      Hyperparams base = cfg.base;
      base.seed = seed;
      std::vector<std::vector<Task>> groups;
      if (cfg.setting.mode == ModelMode::mtl) {
        groups.emplace_back(kAllTasks.begin(), kAllTasks.end());
      } else {
        for (Task t : kAllTasks) groups.push_back({t});
      }
      RunRecord run{size, seed, {}, {}};
      run.test.sample_count = data.test.size();
      for (const auto& tasks : groups) {
        if (progress) {
          progress(cfg.setting.name() + " size=" + std::to_string(size) +
                   " seed=" + std::to_string(seed) + " tasks=" +
                   (tasks.size() == 1 ? std::string(task_name(tasks[0])) : "all"));
        }
        const ModelBuilder builder = [&](const Hyperparams&) { return factory(tasks, seed); };
        GridResult grid = grid_select(builder, cell, base, cfg.grid, weights, progress);
        const MetricsReport test = evaluate(*grid.model, data.test);
        for (Task t : tasks) run.test[t] = test[t];
        run.selected.push_back(grid.best);
      }
      per_seed.push_back(run.test);
      result.runs.push_back(std::move(run));
    }
    result.table.cells.push_back(
        {cfg.setting.name(), size, average_reports(per_seed), per_seed.size()});
  }
  return result;
}

}  // namespace revq
