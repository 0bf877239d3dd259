#pragma once

// Single-task and multi-task classifiers: one shared encoder, one affine
// head (hidden -> 2 logits) per attached task.

#include <algorithm>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <unordered_map>
#include <utility>
#include <vector>

#include "common.hpp"
#include "encoder.hpp"
#include "nn.hpp"
#include "tensor_io.hpp"
#include "textprep.hpp"

namespace revq {

enum class ModelMode { stl, mtl };

struct TaskHead {
  Task task = Task::suggestion;
  nn::Linear affine;

  TaskHead(Task t, Eigen::Index hidden)
      : task(t), affine("head." + std::string(task_name(t)), hidden, 2) {}

  std::size_t parameter_count() const { return affine.weight.size() + affine.bias.size(); }
};

/// Raw logit pairs per attached task; row i is example i.
struct TaskLogits {
  std::vector<Task> tasks;
  std::vector<nn::Matrix> logits;  // parallel to tasks, each n x 2

  std::size_t batch_size() const { return logits.empty() ? 0 : static_cast<std::size_t>(logits[0].rows()); }
  std::size_t pair_count() const { return batch_size() * tasks.size(); }
  bool has(Task t) const { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); }
  const nn::Matrix& operator[](Task t) const {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (tasks[i] == t) return logits[i];
    }
    throw std::out_of_range("no head for task " + std::string(task_name(t)));
  }
};

/// Softmax probability of class 1 from a logit pair.
inline double positive_probability(double logit0, double logit1) {
  return 1.0 / (1.0 + std::exp(logit0 - logit1));
}

/// Tape of one training-mode forward pass through a whole model.
struct ModelTape {
  std::unique_ptr<EncoderTape> encoder;
  nn::Matrix aggregate;
  std::vector<nn::Matrix> head_inputs;  // per head, after dropout
  std::vector<nn::Matrix> head_masks;
};

class ModelHandle {
 public:
  ModelHandle(std::unique_ptr<Encoder> encoder, std::vector<Task> tasks, std::size_t max_len,
              double head_dropout)
      : encoder_(std::move(encoder)), max_len_(max_len), head_dropout_(head_dropout) {
    std::sort(tasks.begin(), tasks.end());
    tasks.erase(std::unique(tasks.begin(), tasks.end()), tasks.end());
    if (tasks.empty()) throw ModelConstructionError("a model needs at least one task");
    if (tasks.size() != 1 && tasks.size() != kTaskCount) {
      throw ModelConstructionError("a model has either 1 task (STL) or all 3 (MTL), got " +
                                   std::to_string(tasks.size()));
    }
    for (Task t : tasks) heads_.emplace_back(t, encoder_->output_size());
  }

  ModelMode mode() const { return heads_.size() == 1 ? ModelMode::stl : ModelMode::mtl; }
  const Encoder& encoder() const { return *encoder_; }
  Encoder& encoder() { return *encoder_; }
  std::vector<TaskHead>& heads() { return heads_; }
  const std::vector<TaskHead>& heads() const { return heads_; }
  std::vector<Task> tasks() const {
    std::vector<Task> out;
    for (const auto& h : heads_) out.push_back(h.task);
    return out;
  }
  TaskHead& head(Task t) {
    for (auto& h : heads_) {
      if (h.task == t) return h;
    }
    throw std::out_of_range("no head for task " + std::string(task_name(t)));
  }
  std::size_t max_len() const { return max_len_; }
  double head_dropout() const { return head_dropout_; }
  void set_head_dropout(double rate) { head_dropout_ = rate; }

  /// Inference mode; deterministic and safe to call concurrently.
  TaskLogits forward(std::span<const EncodedExample> batch) const {
    check_lengths(batch);
    const nn::Matrix agg = encoder_->encode_batch(batch);
    TaskLogits out;
    for (const auto& h : heads_) {
      out.tasks.push_back(h.task);
      out.logits.push_back(h.affine.forward(agg));
    }
    return out;
  }

  /// Training mode: encoder dropout/batch statistics plus an independent
  /// dropout mask on the aggregate representation in front of every head.
  TaskLogits forward_train(std::span<const EncodedExample> batch, detail::Rng& rng,
                           ModelTape& tape) {
    check_lengths(batch);
    tape.aggregate = encoder_->encode_batch_train(batch, rng, tape.encoder);
    tape.head_inputs.clear();
    tape.head_masks.clear();
    TaskLogits out;
    for (const auto& h : heads_) {
      nn::Matrix mask = nn::dropout_mask(tape.aggregate.rows(), tape.aggregate.cols(),
                                         head_dropout_, rng);
      nn::Matrix input = nn::apply_mask(tape.aggregate, mask);
      out.tasks.push_back(h.task);
      out.logits.push_back(h.affine.forward(input));
      tape.head_inputs.push_back(std::move(input));
      tape.head_masks.push_back(std::move(mask));
    }
    return out;
  }

  /// d_logits parallel to heads(); tasks with an empty matrix contribute nothing.
  void backward(const ModelTape& tape, const std::vector<nn::Matrix>& d_logits) {
    nn::Matrix d_agg = nn::Matrix::Zero(tape.aggregate.rows(), tape.aggregate.cols());
    for (std::size_t i = 0; i < heads_.size(); ++i) {
      if (d_logits[i].size() == 0) continue;
      const nn::Matrix d_in = heads_[i].affine.backward(tape.head_inputs[i], d_logits[i]);
      d_agg += nn::apply_mask(d_in, tape.head_masks[i]);
    }
    encoder_->backward(*tape.encoder, d_agg);
  }

  void visit(const std::function<void(nn::Param&)>& f) {
    encoder_->visit(f);
    for (auto& h : heads_) {
      f(h.affine.weight);
      f(h.affine.bias);
    }
  }
  void visit(const std::function<void(const nn::Param&)>& f) const {
    std::as_const(*encoder_).visit(f);
    for (const auto& h : heads_) {
      f(h.affine.weight);
      f(h.affine.bias);
    }
  }

  void zero_grad() {
    visit([](nn::Param& p) {
      if (p.trainable) p.zero_grad();
    });
  }

 private:
  void check_lengths(std::span<const EncodedExample> batch) const {
    for (const auto& ex : batch) {
      if (ex.max_len() != max_len_ || ex.attention_mask.size() != max_len_) {
        throw ShapeError("example length " + std::to_string(ex.max_len()) +
                         " does not match the model's max_len " + std::to_string(max_len_));
      }
    }
  }

  std::unique_ptr<Encoder> encoder_;
  std::vector<TaskHead> heads_;
  std::size_t max_len_;
  double head_dropout_;
};

enum class Allocation {
  eager,      // weights materialized and initialized
  shape_only  // shapes declared only; enough for parameter accounting
};

struct BuildOptions {
  std::size_t max_len = kDefaultMaxLen;
  double head_dropout = 0.1;
  Allocation allocation = Allocation::eager;
};

namespace detail {
inline std::uint64_t head_seed(std::uint64_t seed, Task t) {
  return mix_seed(seed, 1000 + task_index(t));
}
inline void init_heads(ModelHandle& model, std::uint64_t seed) {
  for (auto& h : model.heads()) {
    Rng rng(head_seed(seed, h.task));
    h.affine.init(rng, 0.02);
  }
}
}  // namespace detail

/// Encoder from the checkpoint when the spec names one, otherwise seeded
/// random; heads are always seeded random.
inline ModelHandle build_model(const EncoderSpec& spec, std::vector<Task> tasks,
                               std::uint64_t init_seed, BuildOptions options = {}) {
  spec.validate();
  if (spec.is_transformer() && options.max_len > spec.max_positions) {
    throw ModelConstructionError("max_len " + std::to_string(options.max_len) +
                                 " exceeds the encoder's " + std::to_string(spec.max_positions) +
                                 " positions");
  }
  ModelHandle model(make_encoder(spec), std::move(tasks), options.max_len, options.head_dropout);
  if (options.allocation == Allocation::shape_only) return model;
  if (spec.checkpoint) {
    load_encoder_weights(model.encoder(), *spec.checkpoint);
  } else {
    model.encoder().initialize(detail::mix_seed(init_seed, 1));
  }
  detail::init_heads(model, init_seed);
  return model;
}

/// Exact number of trainable scalars, embeddings and heads included.
inline std::size_t count_parameters(const ModelHandle& model) {
  std::size_t n = model.encoder().trainable_parameter_count();
  for (const auto& h : model.heads()) n += h.parameter_count();
  return n;
}

// Word-vector baseline --------------------------------------------------------

struct WordVectors {
  std::size_t dim = 0;
  std::unordered_map<std::string, std::vector<double>> vectors;

  /// Text format: "word v1 ... vd" per line.
  static WordVectors load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open word vectors " + path.string());
    WordVectors wv;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      std::istringstream ls(line);
      std::string word;
      if (!(ls >> word)) continue;
      std::vector<double> v;
      double x = 0;
      while (ls >> x) v.push_back(x);
      if (wv.dim == 0) wv.dim = v.size();
      if (v.size() != wv.dim || v.empty()) {
        throw IngestionError("word vector of dimension " + std::to_string(v.size()) +
                                 ", expected " + std::to_string(wv.dim),
                             n);
      }
      wv.vectors.emplace(std::move(word), std::move(v));
    }
    return wv;
  }
};

struct CoverageReport {
  std::size_t found = 0;
  std::vector<std::string> missing;  // vocabulary entries seeded randomly
};

struct GloveBaseline {
  ModelHandle model;
  CoverageReport coverage;
};

/// Embedding rows start from the table where the vocabulary entry is present
/// and from a seeded normal draw otherwise.
inline GloveBaseline build_glove_baseline(const WordVectors& table, Task task,
                                          const Vocabulary& vocab, std::uint64_t init_seed,
                                          std::size_t expected_dim = 300,
                                          BuildOptions options = {}) {
  if (table.vectors.empty()) throw ModelConstructionError("word-vector table is empty");
  if (table.dim != expected_dim) {
    throw ModelConstructionError("word-vector dimension " + std::to_string(table.dim) +
                                 " does not match configured dimension " +
                                 std::to_string(expected_dim));
  }
  const auto spec = EncoderSpec::glove(vocab.size(), table.dim);
  ModelHandle model = build_model(spec, {task}, init_seed, options);
  auto& enc = dynamic_cast<GloveEncoder&>(model.encoder());
  CoverageReport coverage;
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    const auto& tok = vocab.token(static_cast<Vocabulary::Id>(id));
    const auto it = table.vectors.find(tok);
    if (it == table.vectors.end()) {
      coverage.missing.push_back(tok);
      continue;
    }
    enc.set_embedding_row(static_cast<Vocabulary::Id>(id), it->second);
    ++coverage.found;
  }
  return {std::move(model), std::move(coverage)};
}

}  // namespace revq
