#include <catch_amalgamated.hpp>

#include <cmath>

#include "revq/synthetic.hpp"
#include "revq/trainer.hpp"
#include "support.hpp"

using namespace revq;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

const std::vector<Task> kMtl(kAllTasks.begin(), kAllTasks.end());

double uniform(detail::Rng& rng, double lo, double hi) { return lo + (hi - lo) * detail::uniform01(rng); }

struct ToyData {
  Vocabulary vocab = synthetic::vocabulary();
  std::vector<EncodedExample> examples;
};

ToyData toy_data(std::size_t count, std::uint64_t seed, std::size_t max_len = 32) {
  ToyData d;
  const auto corpus = synthetic::generate_corpus({.count = count, .seed = seed});
  d.examples = support::encode_corpus(corpus, d.vocab, max_len);
  return d;
}

}  // namespace

TEST_CASE("cross-entropy examples") {
  CHECK_THAT(cross_entropy(0.0, 0.0, 1), WithinAbs(std::log(2.0), 1e-12));
  CHECK_THAT(weighted_cross_entropy(0.0, 0.0, 1, {0.6313, 2.4038}),
             WithinAbs(2.4038 * std::log(2.0), 1e-12));
  CHECK_THAT(weighted_cross_entropy(0.0, 0.0, 0, {0.6313, 2.4038}),
             WithinAbs(0.6313 * std::log(2.0), 1e-12));
  CHECK_THAT(cross_entropy(1000.0, -1000.0, 0), WithinAbs(0.0, 1e-12));
  CHECK(std::isfinite(cross_entropy(1000.0, -1000.0, 1)));

  const std::map<Task, double> losses{{Task::suggestion, 0.3}, {Task::problem, 0.5}, {Task::positive_tone, 0.2}};
  CHECK_THAT(mtl_total_loss(losses, kMtl), WithinAbs(1.0, 1e-15));
  const std::array<Task, 1> one{Task::problem};
  CHECK(mtl_total_loss(losses, one) == 0.5);
  CHECK_THROWS_AS(mtl_total_loss({{Task::suggestion, 0.1}}, kMtl), std::invalid_argument);
}

TEST_CASE("cross-entropy properties") {
  detail::Rng rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const double a = uniform(rng, -20.0, 20.0);
    const double b = uniform(rng, -20.0, 20.0);
    const double shift = uniform(rng, -50.0, 50.0);
    const int y = detail::bernoulli(rng, 0.5) ? 1 : 0;
    const std::array<double, 2> w{uniform(rng, 0.1, 5.0), uniform(rng, 0.1, 5.0)};
    REQUIRE(weighted_cross_entropy(a, b, y, {1.0, 1.0}) == cross_entropy(a, b, y));
    REQUIRE_THAT(weighted_cross_entropy(a + shift, b + shift, y, w),
                 WithinAbs(weighted_cross_entropy(a, b, y, w), 1e-9));
    // Oracle: direct softmax in long double.
    const long double e0 = std::exp(static_cast<long double>(a));
    const long double e1 = std::exp(static_cast<long double>(b));
    const long double p = (y ? e1 : e0) / (e0 + e1);
    REQUIRE_THAT(weighted_cross_entropy(a, b, y, w),
                 WithinAbs(static_cast<double>(-w[y] * std::log(p)), 1e-9));
  }
}

TEST_CASE("batch loss gradient matches finite differences") {
  detail::Rng rng(3);
  nn::Matrix logits(6, 2);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = uniform(rng, -3.0, 3.0);
  const std::vector<std::uint8_t> labels{0, 1, 1, 0, 1, 0};
  const std::array<double, 2> w{0.6313, 2.4038};
  nn::Matrix grad;
  batch_loss(logits, labels, w, &grad);
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    nn::Matrix up = logits, down = logits;
    up.data()[i] += 1e-6;
    down.data()[i] -= 1e-6;
    const double numeric = (batch_loss(up, labels, w, nullptr) - batch_loss(down, labels, w, nullptr)) / 2e-6;
    CHECK_THAT(grad.data()[i], WithinAbs(numeric, 1e-7));
  }
}

TEST_CASE("shared-encoder gradient is the sum of per-task gradients") {
  auto model = build_model(EncoderSpec::toy(40), kMtl, 17, {.max_len = 12});
  const auto batch = support::random_examples(8, 40, 12, 9);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    CHECK(support::gradient_sum_error(model, batch, support::skewed_weights(), seed) <= 1e-5);
  }
}

TEST_CASE("loss uses the configured class weights") {
  auto spec = EncoderSpec::toy(40);
  spec.dropout = 0.0;
  auto model = build_model(spec, kMtl, 4, {.max_len = 12, .head_dropout = 0.0});
  const auto batch = support::random_examples(10, 40, 12, 2);
  const auto logits = model.forward(batch);
  const auto w = support::skewed_weights();
  double expected = 0.0;
  for (Task t : kAllTasks) {
    const auto& l = logits[t];
    double sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      sum += weighted_cross_entropy(l(r, 0), l(r, 1), (*batch[i].labels)[t], w[t]);
    }
    expected += sum / static_cast<double>(batch.size());
  }
  CHECK_THAT(support::training_loss(model, batch, w, kAllTasks, 0), WithinRel(expected, 1e-12));
}

TEST_CASE("small training set is memorized") {
  const auto data = toy_data(32, 5);
  auto model = build_model(EncoderSpec::toy(data.vocab.size()), kMtl, 1, {.max_len = 32});
  Hyperparams hp;
  hp.max_len = 32;
  hp.learning_rate = 1e-3;
  hp.epochs = 200;
  hp.max_steps = 200;
  const EncodedSplit split{data.examples, {}, {}};
  const auto report = train(model, split, hp, ClassWeights::uniform());
  CHECK(report.steps <= 200);
  REQUIRE(report.final_train);
  for (Task t : kAllTasks) CHECK((*report.final_train)[t]->accuracy == 1.0);
}

TEST_CASE("training is reproducible and seed-sensitive") {
  const auto data = toy_data(64, 6, 24);
  const EncodedSplit split{data.examples, {}, {}};
  Hyperparams hp;
  hp.max_len = 24;
  hp.learning_rate = 1e-3;
  hp.epochs = 2;
  hp.batch_size = 16;
  auto run = [&](std::uint64_t seed) {
    hp.seed = seed;
    auto model = build_model(EncoderSpec::toy(data.vocab.size()), kMtl, seed, {.max_len = 24});
    const auto report = train(model, split, hp, ClassWeights::uniform());
    return std::make_pair(to_jsonl(report, false), model.forward(std::span(data.examples).first(4)));
  };
  const auto a = run(3);
  const auto b = run(3);
  const auto c = run(4);
  CHECK(a.first == b.first);
  for (Task t : kAllTasks) CHECK(a.second[t] == b.second[t]);
  CHECK(a.first != c.first);
}

TEST_CASE("training loss falls over epochs") {
  const auto data = toy_data(200, 7, 32);
  const EncodedSplit split{data.examples, {}, {}};
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    Hyperparams hp;
    hp.max_len = 32;
    hp.learning_rate = 1e-3;
    hp.epochs = 4;
    hp.seed = seed;
    auto model = build_model(EncoderSpec::toy(data.vocab.size()), kMtl, seed, {.max_len = 32});
    const auto report = train(model, split, hp, compute_class_weights(synthetic::generate_corpus({.count = 200, .seed = 7})));
    REQUIRE(report.epochs.size() == 4);
    const auto total = [](const EpochRecord& e) {
      double s = 0.0;
      for (const auto& [t, l] : e.mean_loss) s += l;
      return s;
    };
    CHECK(total(report.epochs.back()) < total(report.epochs.front()));
  }
}

TEST_CASE("trainer input validation") {
  const auto data = toy_data(8, 1, 16);
  auto model = build_model(EncoderSpec::toy(data.vocab.size()), kMtl, 0, {.max_len = 16});
  Hyperparams hp;
  hp.max_len = 16;
  CHECK_THROWS_AS(train(model, EncodedSplit{}, hp, ClassWeights::uniform()), DegenerateInputError);
  hp.max_len = 20;
  CHECK_THROWS_AS(train(model, EncodedSplit{data.examples, {}, {}}, hp, ClassWeights::uniform()), ShapeError);
  hp.max_len = 16;
  hp.learning_rate = 0.0;
  CHECK_THROWS_AS(train(model, EncodedSplit{data.examples, {}, {}}, hp, ClassWeights::uniform()), std::invalid_argument);
  hp.learning_rate = 1e-3;
  auto unlabeled = data.examples;
  unlabeled[0].labels.reset();
  CHECK_THROWS_AS(train(model, EncodedSplit{unlabeled, {}, {}}, hp, ClassWeights::uniform()), DataError);
}

TEST_CASE("divergence is reported") {
  const auto data = toy_data(16, 2, 16);
  auto model = build_model(EncoderSpec::toy(data.vocab.size()), kMtl, 0, {.max_len = 16});
  model.head(Task::problem).affine.weight.value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  Hyperparams hp;
  hp.max_len = 16;
  try {
    train(model, EncodedSplit{data.examples, {}, {}}, hp, ClassWeights::uniform());
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == 0);
  }
}

TEST_CASE("grid selection tie rules") {
  const std::vector<GridOutcome> a{{3e-5, 2, 0.8, false}, {2e-5, 3, 0.8, false}, {5e-5, 2, 0.7, false}};
  CHECK(select_best(a) == 1);
  const std::vector<GridOutcome> b{{2e-5, 3, 0.8, false}, {2e-5, 2, 0.8, false}};
  CHECK(select_best(b) == 1);
  const std::vector<GridOutcome> c{{2e-5, 2, 0.9, true}, {5e-5, 3, 0.1, false}};
  CHECK(select_best(c) == 1);
  const std::vector<GridOutcome> d{{2e-5, 2, 0.9, true}};
  CHECK_THROWS_AS(select_best(d), DivergenceError);

  // Any permutation of the outcomes picks the same point.
  std::vector<GridOutcome> grid;
  for (double lr : {2e-5, 3e-5, 5e-5}) {
    for (std::size_t ep : {2u, 3u}) grid.push_back({lr, ep, ep == 3 ? 0.75 : 0.5, false});
  }
  std::sort(grid.begin(), grid.end(), [](auto& x, auto& y) { return x.learning_rate < y.learning_rate; });
  do {
    const auto& w = grid[select_best(grid)];
    REQUIRE(w.learning_rate == 2e-5);
    REQUIRE(w.epochs == 3);
  } while (std::next_permutation(grid.begin(), grid.end(), [](auto& x, auto& y) {
    return std::tie(x.learning_rate, x.epochs) < std::tie(y.learning_rate, y.epochs);
  }));
}

TEST_CASE("grid over several points needs validation data") {
  const auto data = toy_data(8, 1, 16);
  const ModelBuilder builder = [&](const Hyperparams&) {
    return build_model(EncoderSpec::toy(data.vocab.size()), kMtl, 0, {.max_len = 16});
  };
  Hyperparams base;
  base.max_len = 16;
  CHECK_THROWS_AS(grid_select(builder, EncodedSplit{data.examples, {}, {}}, base, HyperGrid{},
                              ClassWeights::uniform()),
                  std::invalid_argument);
  const auto single = grid_select(builder, EncodedSplit{data.examples, {}, {}}, base,
                                  HyperGrid{{1e-3}, {1}}, ClassWeights::uniform());
  CHECK(single.outcomes.size() == 1);
  CHECK(single.model.has_value());
}

TEST_CASE("experiment cells average the seeds") {
  const auto data = toy_data(120, 4, 16);
  const EncodedSplit split{std::vector(data.examples.begin(), data.examples.begin() + 80),
                           std::vector(data.examples.begin() + 80, data.examples.begin() + 90),
                           std::vector(data.examples.begin() + 90, data.examples.end())};
  ExperimentConfig cfg;
  cfg.setting = *ExperimentSetting::parse("stl_toy");
  cfg.training_sizes = {40};
  cfg.run_seeds = {0, 1};
  cfg.grid = {{1e-3}, {1}};
  cfg.base.max_len = 16;
  const TaskModelFactory factory = [&](const std::vector<Task>& tasks, std::uint64_t seed) {
    return build_model(EncoderSpec::toy(data.vocab.size()), tasks, seed, {.max_len = 16});
  };
  const auto result = run_experiment(cfg, split, factory);
  REQUIRE(result.runs.size() == 2);
  REQUIRE(result.table.cells.size() == 1);
  CHECK(result.runs[0].selected.size() == 3);
  for (Task t : kAllTasks) {
    const double mean = (result.runs[0].test[t]->macro_f1 + result.runs[1].test[t]->macro_f1) / 2;
    CHECK_THAT(result.table.cells[0].mean[t]->macro_f1, WithinAbs(mean, 1e-12));
  }

  cfg.training_sizes = {81};
  CHECK_THROWS_AS(run_experiment(cfg, split, factory), SizingError);
  cfg.training_sizes = {40};
  cfg.run_seeds = {1, 1};
  CHECK_THROWS_AS(run_experiment(cfg, split, factory), std::invalid_argument);
  CHECK_FALSE(ExperimentSetting::parse("mtl_glove"));
  CHECK(ExperimentSetting::parse("stl_glove")->name() == "stl_glove");
}
