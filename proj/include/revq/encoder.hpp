#pragma once

// Sequence encoders that turn an EncodedExample batch into one aggregate row
// per example: a BERT-style transformer (aggregate = [CLS] position of the
// final layer, optionally through the tanh pooler) and the word-vector
// baseline (embedding -> batch norm -> masked mean pooling).

#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "nn.hpp"
#include "textprep.hpp"

namespace revq {

enum class EncoderFamily { transformer_base, transformer_distilled, glove_baseline, toy_transformer };

constexpr std::string_view family_name(EncoderFamily f) {
  switch (f) {
    case EncoderFamily::transformer_base:
      return "transformer_base";
    case EncoderFamily::transformer_distilled:
      return "transformer_distilled";
    case EncoderFamily::glove_baseline:
      return "glove_baseline";
    case EncoderFamily::toy_transformer:
      return "toy_transformer";
  }
  return "?";
}

inline std::optional<EncoderFamily> parse_family(std::string_view s) {
  for (auto f : {EncoderFamily::transformer_base, EncoderFamily::transformer_distilled,
                 EncoderFamily::glove_baseline, EncoderFamily::toy_transformer}) {
    if (family_name(f) == s) return f;
  }
  if (s == "base" || s == "bert") return EncoderFamily::transformer_base;
  if (s == "distilled" || s == "distilbert") return EncoderFamily::transformer_distilled;
  if (s == "glove") return EncoderFamily::glove_baseline;
  if (s == "toy") return EncoderFamily::toy_transformer;
  return std::nullopt;
}

inline constexpr std::size_t kPretrainedHidden = 768;
inline constexpr std::size_t kPretrainedVocab = 30522;

struct EncoderSpec {
  EncoderFamily family = EncoderFamily::toy_transformer;
  std::size_t hidden_size = 32;
  std::size_t vocab_size = 0;
  std::size_t layer_count = 2;
  std::size_t head_count = 4;
  std::size_t ffn_size = 128;
  std::size_t max_positions = 128;
  bool token_type_embeddings = false;
  bool pooler = false;
  double dropout = 0.1;
  std::optional<std::filesystem::path> checkpoint;

  /// 12 blocks, learned positions and segment embeddings, tanh pooler.
  static EncoderSpec transformer_base(std::size_t vocab = kPretrainedVocab) {
    return {EncoderFamily::transformer_base, kPretrainedHidden, vocab, 12, 12, 3072, 512, true,
            true, 0.1, std::nullopt};
  }
  /// 6 blocks, no segment embeddings, no pooler.
  static EncoderSpec transformer_distilled(std::size_t vocab = kPretrainedVocab) {
    return {EncoderFamily::transformer_distilled, kPretrainedHidden, vocab, 6, 12, 3072, 512,
            false, false, 0.1, std::nullopt};
  }
  static EncoderSpec toy(std::size_t vocab, std::size_t layers = 2, std::size_t hidden = 32,
                         std::size_t heads = 4) {
    return {EncoderFamily::toy_transformer, hidden, vocab, layers, heads, 4 * hidden, 128,
            false, false, 0.1, std::nullopt};
  }
  static EncoderSpec glove(std::size_t vocab, std::size_t dim = 300) {
    return {EncoderFamily::glove_baseline, dim, vocab, 1, 1, 0, 0, false, false, 0.0, std::nullopt};
  }

  bool is_transformer() const { return family != EncoderFamily::glove_baseline; }

  void validate() const {
    if (hidden_size == 0) throw ModelConstructionError("hidden_size must be positive");
    if (layer_count == 0) throw ModelConstructionError("layer_count must be at least 1");
    if (vocab_size == 0) throw ModelConstructionError("vocab_size must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ModelConstructionError("dropout must be in [0, 1)");
    if ((family == EncoderFamily::transformer_base ||
         family == EncoderFamily::transformer_distilled) &&
        hidden_size != kPretrainedHidden) {
      throw ModelConstructionError("pretrained families have hidden_size 768, got " +
                                   std::to_string(hidden_size));
    }
    if (is_transformer()) {
      if (head_count == 0 || hidden_size % head_count != 0) {
        throw ModelConstructionError("hidden_size " + std::to_string(hidden_size) +
                                     " is not divisible by head_count " +
                                     std::to_string(head_count));
      }
      if (ffn_size == 0 || max_positions < 3) {
        throw ModelConstructionError("ffn_size and max_positions must be positive");
      }
    }
  }

  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

/// Saved activations of one training-mode forward pass.
class EncoderTape {
 public:
  virtual ~EncoderTape() = default;
};

class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual const EncoderSpec& spec() const = 0;
  Eigen::Index output_size() const { return static_cast<Eigen::Index>(spec().hidden_size); }

  /// Inference mode. One aggregate row per example.
  virtual nn::Matrix encode_batch(std::span<const EncodedExample> batch) const = 0;

  /// Training mode: dropout active, batch statistics used and tracked.
  virtual nn::Matrix encode_batch_train(std::span<const EncodedExample> batch, detail::Rng& rng,
                                        std::unique_ptr<EncoderTape>& tape) = 0;

  /// Accumulates parameter gradients given d(loss)/d(aggregate rows).
  virtual void backward(const EncoderTape& tape, const nn::Matrix& d_aggregate) = 0;

  /// Visits every tensor (trainable parameters and non-trainable buffers).
  virtual void visit(const std::function<void(nn::Param&)>& f) = 0;
  virtual void visit(const std::function<void(const nn::Param&)>& f) const = 0;

  virtual void initialize(std::uint64_t seed) = 0;

  std::size_t trainable_parameter_count() const {
    std::size_t n = 0;
    visit([&](const nn::Param& p) { n += p.trainable ? p.size() : 0; });
    return n;
  }
  bool materialized() const {
    bool all = true;
    visit([&](const nn::Param& p) { all = all && p.allocated(); });
    return all;
  }

 protected:
  void check_batch(std::span<const EncodedExample> batch, std::size_t max_positions) const {
    if (!materialized()) {
      throw ShapeError("encoder weights are not materialized (shape-only model)");
    }
    for (const auto& ex : batch) {
      const std::size_t n = ex.active_length();
      if (n == 0) throw ShapeError("example has no unmasked tokens");
      if (max_positions && n > max_positions) {
        throw ShapeError("sequence of " + std::to_string(n) + " tokens exceeds " +
                         std::to_string(max_positions) + " positions");
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (ex.token_ids[i] < 0 || static_cast<std::size_t>(ex.token_ids[i]) >= spec().vocab_size) {
          throw ShapeError("token id " + std::to_string(ex.token_ids[i]) +
                           " outside vocabulary of " + std::to_string(spec().vocab_size));
        }
      }
    }
  }
};

/// BERT-style post-LN transformer encoder. Only the unmasked prefix of each
/// example is processed; padded positions never enter attention as keys.
class TransformerEncoder final : public Encoder {
 public:
  explicit TransformerEncoder(EncoderSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const auto h = static_cast<Eigen::Index>(spec_.hidden_size);
    const auto f = static_cast<Eigen::Index>(spec_.ffn_size);
    token_embedding_ = nn::Param("embeddings.word", static_cast<Eigen::Index>(spec_.vocab_size), h);
    position_embedding_ =
        nn::Param("embeddings.position", static_cast<Eigen::Index>(spec_.max_positions), h);
    if (spec_.token_type_embeddings) type_embedding_ = nn::Param("embeddings.token_type", 2, h);
    embedding_norm_ = nn::LayerNorm("embeddings.norm", h);
    layers_.reserve(spec_.layer_count);
    for (std::size_t i = 0; i < spec_.layer_count; ++i) {
      const std::string p = "layer." + std::to_string(i);
      layers_.push_back(Block{nn::Linear(p + ".attention.query", h, h),
                              nn::Linear(p + ".attention.key", h, h),
                              nn::Linear(p + ".attention.value", h, h),
                              nn::Linear(p + ".attention.output", h, h),
                              nn::LayerNorm(p + ".attention.norm", h),
                              nn::Linear(p + ".ffn.intermediate", h, f),
                              nn::Linear(p + ".ffn.output", f, h), nn::LayerNorm(p + ".ffn.norm", h)});
    }
    if (spec_.pooler) pooler_ = nn::Linear("pooler", h, h);
  }

  const EncoderSpec& spec() const override { return spec_; }

  void initialize(std::uint64_t seed) override {
    detail::Rng rng(seed);
    constexpr double kStd = 0.02;
    token_embedding_.fill_normal(rng, kStd);
    position_embedding_.fill_normal(rng, kStd);
    if (type_embedding_) type_embedding_->fill_normal(rng, kStd);
    embedding_norm_.init();
    for (auto& b : layers_) {
      b.query.init(rng, kStd);
      b.key.init(rng, kStd);
      b.value.init(rng, kStd);
      b.attn_out.init(rng, kStd);
      b.attn_norm.init();
      b.ffn_in.init(rng, kStd);
      b.ffn_out.init(rng, kStd);
      b.ffn_norm.init();
    }
    if (pooler_) pooler_->init(rng, kStd);
  }

  nn::Matrix encode_batch(std::span<const EncodedExample> batch) const override {
    check_batch(batch, spec_.max_positions);
    nn::Matrix out(static_cast<Eigen::Index>(batch.size()), output_size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out.row(static_cast<Eigen::Index>(i)) = run(batch[i], nullptr, nullptr);
    }
    return out;
  }

  nn::Matrix encode_batch_train(std::span<const EncodedExample> batch, detail::Rng& rng,
                                std::unique_ptr<EncoderTape>& tape) override {
    check_batch(batch, spec_.max_positions);
    auto t = std::make_unique<Tape>();
    t->examples.resize(batch.size());
    nn::Matrix out(static_cast<Eigen::Index>(batch.size()), output_size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out.row(static_cast<Eigen::Index>(i)) = run(batch[i], &t->examples[i], &rng);
    }
    tape = std::move(t);
    return out;
  }

  void backward(const EncoderTape& tape, const nn::Matrix& d_aggregate) override {
    const auto& t = dynamic_cast<const Tape&>(tape);
    for (std::size_t i = 0; i < t.examples.size(); ++i) {
      backprop(t.examples[i], d_aggregate.row(static_cast<Eigen::Index>(i)));
    }
  }

  void visit(const std::function<void(nn::Param&)>& f) override { visit_impl(*this, f); }
  void visit(const std::function<void(const nn::Param&)>& f) const override {
    visit_impl(*this, f);
  }

 private:
  struct Block {
    nn::Linear query, key, value, attn_out;
    nn::LayerNorm attn_norm;
    nn::Linear ffn_in, ffn_out;
    nn::LayerNorm ffn_norm;
  };

  struct BlockTape {
    nn::Matrix input;
    nn::Matrix q, k, v;
    std::vector<nn::Matrix> probs;  // per head, L x L
    nn::Matrix context;
    nn::Matrix attn_mask;
    nn::LayerNorm::Cache attn_norm;
    nn::Matrix mid;  // output of the attention sub-layer
    nn::Matrix ffn_pre;
    nn::Matrix ffn_act;
    nn::Matrix ffn_mask;
    nn::LayerNorm::Cache ffn_norm;
  };

  struct ExampleTape {
    std::vector<Vocabulary::Id> ids;
    nn::LayerNorm::Cache embedding_norm;
    nn::Matrix embedding_mask;
    std::vector<BlockTape> blocks;
    nn::Matrix cls;     // 1 x H, final-layer [CLS] row
    nn::Matrix pooled;  // 1 x H, tanh output
  };

  struct Tape final : EncoderTape {
    std::vector<ExampleTape> examples;
  };

  template <typename Self, typename F>
  static void visit_impl(Self& self, F&& f) {
    f(self.token_embedding_);
    f(self.position_embedding_);
    if (self.type_embedding_) f(*self.type_embedding_);
    f(self.embedding_norm_.gamma);
    f(self.embedding_norm_.beta);
    for (auto& b : self.layers_) {
      for (auto* lin : {&b.query, &b.key, &b.value, &b.attn_out}) {
        f(lin->weight);
        f(lin->bias);
      }
      f(b.attn_norm.gamma);
      f(b.attn_norm.beta);
      f(b.ffn_in.weight);
      f(b.ffn_in.bias);
      f(b.ffn_out.weight);
      f(b.ffn_out.bias);
      f(b.ffn_norm.gamma);
      f(b.ffn_norm.beta);
    }
    if (self.pooler_) {
      f(self.pooler_->weight);
      f(self.pooler_->bias);
    }
  }

  nn::RowVector run(const EncodedExample& ex, ExampleTape* tape, detail::Rng* rng) const {
    const auto len = static_cast<Eigen::Index>(ex.active_length());
    const auto h = output_size();
    const double rate = rng ? spec_.dropout : 0.0;

    nn::Matrix x(len, h);
    for (Eigen::Index i = 0; i < len; ++i) {
      x.row(i) = token_embedding_.value.row(ex.token_ids[static_cast<std::size_t>(i)]) +
                 position_embedding_.value.row(i);
      if (type_embedding_) x.row(i) += type_embedding_->value.row(0);
    }
    x = embedding_norm_.forward(x, tape ? &tape->embedding_norm : nullptr);
    if (tape) {
      tape->ids.assign(ex.token_ids.begin(), ex.token_ids.begin() + len);
      tape->embedding_mask = nn::dropout_mask(len, h, rate, *rng);
      x = nn::apply_mask(x, tape->embedding_mask);
      tape->blocks.resize(layers_.size());
    }

    const auto heads = static_cast<Eigen::Index>(spec_.head_count);
    const Eigen::Index dh = h / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Block& b = layers_[l];
      BlockTape* bt = tape ? &tape->blocks[l] : nullptr;
      nn::Matrix q = b.query.forward(x);
      nn::Matrix k = b.key.forward(x);
      nn::Matrix v = b.value.forward(x);
      nn::Matrix context(len, h);
      if (bt) bt->probs.resize(static_cast<std::size_t>(heads));
      for (Eigen::Index hd = 0; hd < heads; ++hd) {
        const auto qh = q.middleCols(hd * dh, dh);
        const auto kh = k.middleCols(hd * dh, dh);
        const auto vh = v.middleCols(hd * dh, dh);
        nn::Matrix p = nn::softmax_rows((qh * kh.transpose()) * scale);
        context.middleCols(hd * dh, dh).noalias() = p * vh;
        if (bt) bt->probs[static_cast<std::size_t>(hd)] = std::move(p);
      }
      nn::Matrix attn = b.attn_out.forward(context);
      if (bt) {
        bt->attn_mask = nn::dropout_mask(len, h, rate, *rng);
        attn = nn::apply_mask(attn, bt->attn_mask);
      }
      nn::Matrix mid = b.attn_norm.forward(x + attn, bt ? &bt->attn_norm : nullptr);
      nn::Matrix pre = b.ffn_in.forward(mid);
      nn::Matrix act = pre.unaryExpr([](double z) { return nn::gelu(z); });
      nn::Matrix ffn = b.ffn_out.forward(act);
      if (bt) {
        bt->ffn_mask = nn::dropout_mask(len, h, rate, *rng);
        ffn = nn::apply_mask(ffn, bt->ffn_mask);
      }
      nn::Matrix out = b.ffn_norm.forward(mid + ffn, bt ? &bt->ffn_norm : nullptr);
      if (bt) {
        bt->input = std::move(x);
        bt->q = std::move(q);
        bt->k = std::move(k);
        bt->v = std::move(v);
        bt->context = std::move(context);
        bt->mid = std::move(mid);
        bt->ffn_pre = std::move(pre);
        bt->ffn_act = std::move(act);
      }
      x = std::move(out);
    }

    nn::Matrix cls = x.topRows(1);
    if (!pooler_) {
      if (tape) tape->cls = cls;
      return cls.row(0);
    }
    nn::Matrix pooled = pooler_->forward(cls).array().tanh();
    if (tape) {
      tape->cls = std::move(cls);
      tape->pooled = pooled;
    }
    return pooled.row(0);
  }

  void backprop(const ExampleTape& t, const nn::RowVector& d_agg) {
    const auto len = static_cast<Eigen::Index>(t.ids.size());
    const auto h = output_size();
    nn::Matrix d_cls = d_agg;
    if (pooler_) {
      const nn::Matrix dz = d_cls.array() * (1.0 - t.pooled.array().square());
      d_cls = pooler_->backward(t.cls, dz);
    }
    nn::Matrix dx = nn::Matrix::Zero(len, h);
    dx.row(0) = d_cls.row(0);

    const auto heads = static_cast<Eigen::Index>(spec_.head_count);
    const Eigen::Index dh = h / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = layers_.size(); l-- > 0;) {
      Block& b = layers_[l];
      const BlockTape& bt = t.blocks[l];

      const nn::Matrix d_sum2 = b.ffn_norm.backward(bt.ffn_norm, dx);
      const nn::Matrix d_ffn = nn::apply_mask(d_sum2, bt.ffn_mask);
      nn::Matrix d_act = b.ffn_out.backward(bt.ffn_act, d_ffn);
      d_act.array() *= bt.ffn_pre.unaryExpr([](double z) { return nn::gelu_grad(z); }).array();
      const nn::Matrix d_mid = d_sum2 + b.ffn_in.backward(bt.mid, d_act);

      const nn::Matrix d_sum1 = b.attn_norm.backward(bt.attn_norm, d_mid);
      const nn::Matrix d_attn = nn::apply_mask(d_sum1, bt.attn_mask);
      const nn::Matrix d_context = b.attn_out.backward(bt.context, d_attn);

      nn::Matrix dq(len, h), dk(len, h), dv(len, h);
      for (Eigen::Index hd = 0; hd < heads; ++hd) {
        const nn::Matrix& p = bt.probs[static_cast<std::size_t>(hd)];
        const auto dc = d_context.middleCols(hd * dh, dh);
        const nn::Matrix dp = dc * bt.v.middleCols(hd * dh, dh).transpose();
        dv.middleCols(hd * dh, dh).noalias() = p.transpose() * dc;
        const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
        const nn::Matrix ds = p.array() * (dp.colwise() - row_dot).array();
        dq.middleCols(hd * dh, dh).noalias() = (ds * bt.k.middleCols(hd * dh, dh)) * scale;
        dk.middleCols(hd * dh, dh).noalias() = (ds.transpose() * bt.q.middleCols(hd * dh, dh)) * scale;
      }
      nn::Matrix d_in = d_sum1;
      d_in += b.query.backward(bt.input, dq);
      d_in += b.key.backward(bt.input, dk);
      d_in += b.value.backward(bt.input, dv);
      dx = std::move(d_in);
    }

    const nn::Matrix d_norm_out = nn::apply_mask(dx, t.embedding_mask);
    const nn::Matrix d_emb = embedding_norm_.backward(t.embedding_norm, d_norm_out);
    for (Eigen::Index i = 0; i < len; ++i) {
      token_embedding_.grad.row(t.ids[static_cast<std::size_t>(i)]) += d_emb.row(i);
      position_embedding_.grad.row(i) += d_emb.row(i);
    }
    if (type_embedding_) type_embedding_->grad.row(0) += d_emb.colwise().sum();
  }

  EncoderSpec spec_;
  nn::Param token_embedding_;
  nn::Param position_embedding_;
  std::optional<nn::Param> type_embedding_;
  nn::LayerNorm embedding_norm_;
  std::vector<Block> layers_;
  std::optional<nn::Linear> pooler_;
};

/// Word-vector baseline: trainable embedding lookup, batch normalization over
/// features (statistics over every unmasked token in the batch), then mean
/// pooling over the unmasked positions of each example.
class GloveEncoder final : public Encoder {
 public:
  static constexpr double kNormEps = 1e-3;
  static constexpr double kMomentum = 0.1;

  explicit GloveEncoder(EncoderSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const auto d = static_cast<Eigen::Index>(spec_.hidden_size);
    embedding_ = nn::Param("embeddings.word", static_cast<Eigen::Index>(spec_.vocab_size), d);
    gamma_ = nn::Param("norm.gamma", 1, d);
    beta_ = nn::Param("norm.beta", 1, d);
    running_mean_ = nn::Param("norm.running_mean", 1, d, false);
    running_var_ = nn::Param("norm.running_var", 1, d, false);
  }

  const EncoderSpec& spec() const override { return spec_; }

  void initialize(std::uint64_t seed) override {
    detail::Rng rng(seed);
    embedding_.fill_normal(rng, 0.1);
    gamma_.fill(1.0);
    beta_.fill(0.0);
    running_mean_.fill(0.0);
    running_var_.fill(1.0);
  }

  /// Overwrites one embedding row (used when seeding from a word-vector table).
  void set_embedding_row(Vocabulary::Id id, std::span<const double> vec) {
    for (std::size_t j = 0; j < vec.size(); ++j) {
      embedding_.value(id, static_cast<Eigen::Index>(j)) = vec[j];
    }
  }

  nn::Param& gamma() { return gamma_; }
  nn::Param& beta() { return beta_; }
  nn::Param& running_mean() { return running_mean_; }
  nn::Param& running_var() { return running_var_; }
  nn::Param& embedding() { return embedding_; }

  nn::Matrix encode_batch(std::span<const EncodedExample> batch) const override {
    check_batch(batch, 0);
    const nn::RowVector inv_std = (running_var_.value.row(0).array() + kNormEps).rsqrt();
    nn::Matrix out(static_cast<Eigen::Index>(batch.size()), output_size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& ex = batch[i];
      const std::size_t n = ex.active_length();
      nn::RowVector sum = nn::RowVector::Zero(output_size());
      for (std::size_t p = 0; p < n; ++p) sum += embedding_.value.row(ex.token_ids[p]);
      const nn::RowVector mean_emb = sum / static_cast<double>(n);
      // Normalization is affine at inference, so it commutes with pooling.
      out.row(static_cast<Eigen::Index>(i)) =
          ((mean_emb - running_mean_.value.row(0)).array() * inv_std.array() *
           gamma_.value.row(0).array())
              .matrix() +
          beta_.value.row(0);
    }
    return out;
  }

  nn::Matrix encode_batch_train(std::span<const EncodedExample> batch, detail::Rng&,
                                std::unique_ptr<EncoderTape>& tape) override {
    check_batch(batch, 0);
    auto t = std::make_unique<Tape>();
    for (const auto& ex : batch) {
      t->lengths.push_back(ex.active_length());
      t->ids.insert(t->ids.end(), ex.token_ids.begin(),
                    ex.token_ids.begin() + static_cast<std::ptrdiff_t>(ex.active_length()));
    }
    const auto tokens = static_cast<Eigen::Index>(t->ids.size());
    nn::Matrix e(tokens, output_size());
    for (Eigen::Index r = 0; r < tokens; ++r) e.row(r) = embedding_.value.row(t->ids[r]);
    const nn::RowVector mean = e.colwise().mean();
    const nn::Matrix centered = e.rowwise() - mean;
    const nn::RowVector var = centered.array().square().colwise().mean();
    t->inv_std = (var.array() + kNormEps).rsqrt();
    t->xhat = centered.array().rowwise() * t->inv_std.array();
    const nn::Matrix z =
        (t->xhat.array().rowwise() * gamma_.value.row(0).array()).rowwise() +
        beta_.value.row(0).array();

    nn::Matrix out(static_cast<Eigen::Index>(batch.size()), output_size());
    Eigen::Index offset = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto n = static_cast<Eigen::Index>(t->lengths[i]);
      out.row(static_cast<Eigen::Index>(i)) = z.middleRows(offset, n).colwise().mean();
      offset += n;
    }

    const double unbiased = tokens > 1 ? static_cast<double>(tokens) / (tokens - 1) : 1.0;
    running_mean_.value.row(0) = (1 - kMomentum) * running_mean_.value.row(0) + kMomentum * mean;
    running_var_.value.row(0) =
        (1 - kMomentum) * running_var_.value.row(0) + kMomentum * unbiased * var;
    tape = std::move(t);
    return out;
  }

  void backward(const EncoderTape& tape, const nn::Matrix& d_aggregate) override {
    const auto& t = dynamic_cast<const Tape&>(tape);
    const auto tokens = static_cast<Eigen::Index>(t.ids.size());
    nn::Matrix dz(tokens, output_size());
    Eigen::Index offset = 0;
    for (std::size_t i = 0; i < t.lengths.size(); ++i) {
      const auto n = static_cast<Eigen::Index>(t.lengths[i]);
      const nn::RowVector share = d_aggregate.row(static_cast<Eigen::Index>(i)) / static_cast<double>(n);
      for (Eigen::Index r = 0; r < n; ++r) dz.row(offset + r) = share;
      offset += n;
    }
    gamma_.grad.row(0) += (dz.array() * t.xhat.array()).colwise().sum().matrix();
    beta_.grad.row(0) += dz.colwise().sum();
    const nn::Matrix dxhat = dz.array().rowwise() * gamma_.value.row(0).array();
    const nn::RowVector mean_dxhat = dxhat.colwise().mean();
    const nn::RowVector mean_dxhat_xhat = (dxhat.array() * t.xhat.array()).colwise().mean();
    nn::Matrix de = dxhat.rowwise() - mean_dxhat;
    de -= (t.xhat.array().rowwise() * mean_dxhat_xhat.array()).matrix();
    de = de.array().rowwise() * t.inv_std.array();
    for (Eigen::Index r = 0; r < tokens; ++r) embedding_.grad.row(t.ids[r]) += de.row(r);
  }

  void visit(const std::function<void(nn::Param&)>& f) override { visit_impl(*this, f); }
  void visit(const std::function<void(const nn::Param&)>& f) const override {
    visit_impl(*this, f);
  }

 private:
  struct Tape final : EncoderTape {
    std::vector<std::size_t> lengths;
    std::vector<Vocabulary::Id> ids;
    nn::Matrix xhat;
    nn::RowVector inv_std;
  };

  template <typename Self, typename F>
  static void visit_impl(Self& self, F&& f) {
    f(self.embedding_);
    f(self.gamma_);
    f(self.beta_);
    f(self.running_mean_);
    f(self.running_var_);
  }

  EncoderSpec spec_;
  nn::Param embedding_;
  nn::Param gamma_;
  nn::Param beta_;
  nn::Param running_mean_;
  nn::Param running_var_;
};

inline std::unique_ptr<Encoder> make_encoder(const EncoderSpec& spec) {
  if (spec.family == EncoderFamily::glove_baseline) return std::make_unique<GloveEncoder>(spec);
  return std::make_unique<TransformerEncoder>(spec);
}

}  // namespace revq
