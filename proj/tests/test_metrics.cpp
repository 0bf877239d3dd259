#include <catch_amalgamated.hpp>

#include "revq/metrics.hpp"
#include "support.hpp"

using namespace revq;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

struct Sample {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Scores drawn from a small grid so that ties are common.
Sample random_sample(detail::Rng& rng, std::size_t n) {
  Sample s;
  for (std::size_t i = 0; i < n; ++i) {
    s.scores.push_back(static_cast<double>(detail::uniform_index(rng, 12)) / 11.0);
    s.labels.push_back(detail::bernoulli(rng, 0.4) ? 1 : 0);
  }
  s.labels[0] = 1;
  s.labels[1] = 0;
  return s;
}

std::vector<int> threshold(const std::vector<double>& scores) {
  std::vector<int> out;
  for (double s : scores) out.push_back(s >= 0.5 ? 1 : 0);
  return out;
}

ResultCell cell(std::string setting, std::size_t size, double acc, double f1, std::optional<double> auc) {
  ResultCell c{std::move(setting), size, {}, 5};
  for (Task t : kAllTasks) c.mean[t] = TaskMetrics{acc, f1, auc};
  return c;
}

}  // namespace

TEST_CASE("metric examples") {
  const std::vector<int> y{1, 0, 1, 1, 0, 0};
  const std::vector<int> p{1, 0, 0, 1, 1, 0};
  CHECK_THAT(accuracy(p, y), WithinAbs(4.0 / 6.0, 1e-15));
  CHECK_THAT(macro_f1(p, y), WithinAbs(2.0 / 3.0, 1e-15));
  CHECK_THAT(positive_recall(p, y), WithinAbs(2.0 / 3.0, 1e-15));

  const std::vector<double> perfect{0.9, 0.1, 0.8, 0.7, 0.2, 0.3};
  CHECK(auc(perfect, y) == 1.0);
  const std::vector<double> flat(6, 0.5);
  CHECK(auc(flat, y) == 0.5);
  const std::vector<double> reversed{0.1, 0.9, 0.2, 0.3, 0.8, 0.7};
  CHECK(auc(reversed, y) == 0.0);

  // Degenerate class handling in macro-F1.
  const std::vector<int> zeros(4, 0);
  CHECK(macro_f1(zeros, zeros) == 1.0);
  const std::vector<int> ones(4, 1);
  CHECK(macro_f1(ones, zeros) == 0.0);

  CHECK_THROWS_AS(auc(flat, std::vector<int>(6, 1)), DegenerateInputError);
  CHECK_THROWS_AS(auc(flat, std::vector<int>(6, 0)), DegenerateInputError);
  CHECK_THROWS_AS(accuracy(p, std::vector<int>{1}), std::invalid_argument);
  CHECK_THROWS_AS(macro_f1(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("AUC agrees with the pairwise count") {
  detail::Rng rng(101);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto s = random_sample(rng, 2 + detail::uniform_index(rng, 60));
    REQUIRE_THAT(auc(s.scores, s.labels), WithinAbs(support::pairwise_auc(s.scores, s.labels), 1e-9));
  }
}

TEST_CASE("macro-F1 agrees with the contingency table") {
  detail::Rng rng(102);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto s = random_sample(rng, 1 + detail::uniform_index(rng, 60));
    const auto p = threshold(s.scores);
    REQUIRE_THAT(macro_f1(p, s.labels),
                 WithinAbs(support::table_macro_f1(support::contingency(p, s.labels)), 1e-12));
  }
}

TEST_CASE("AUC is invariant under increasing score maps") {
  detail::Rng rng(103);
  for (int trial = 0; trial < 300; ++trial) {
    const auto s = random_sample(rng, 2 + detail::uniform_index(rng, 40));
    std::vector<double> mapped;
    for (double x : s.scores) mapped.push_back(std::exp(3.0 * x) - 7.0);
    REQUIRE(auc(mapped, s.labels) == auc(s.scores, s.labels));
  }
}

TEST_CASE("swapping class names") {
  detail::Rng rng(104);
  for (int trial = 0; trial < 300; ++trial) {
    const auto s = random_sample(rng, 2 + detail::uniform_index(rng, 40));
    const auto p = threshold(s.scores);
    std::vector<int> flipped_p, flipped_y;
    std::vector<double> negated;
    for (std::size_t i = 0; i < p.size(); ++i) {
      flipped_p.push_back(1 - p[i]);
      flipped_y.push_back(1 - s.labels[i]);
      negated.push_back(-s.scores[i]);
    }
    REQUIRE(macro_f1(flipped_p, flipped_y) == macro_f1(p, s.labels));
    REQUIRE(accuracy(flipped_p, flipped_y) == accuracy(p, s.labels));
    REQUIRE_THAT(auc(negated, flipped_y), WithinAbs(auc(s.scores, s.labels), 1e-12));
  }
}

TEST_CASE("shuffled labels give chance accuracy") {
  detail::Rng rng(105);
  std::vector<int> p, y;
  for (int i = 0; i < 20000; ++i) {
    p.push_back(detail::bernoulli(rng, 0.5));
    y.push_back(detail::bernoulli(rng, 0.5));
  }
  CHECK_THAT(accuracy(p, y), WithinAbs(0.5, 0.02));
}

TEST_CASE("task metrics leave AUC undefined for one class") {
  const std::vector<std::uint8_t> d{1, 1, 0};
  const std::vector<double> s{0.9, 0.8, 0.1};
  const std::vector<std::uint8_t> one_class{1, 1, 1};
  const auto m = task_metrics(d, s, one_class);
  CHECK_THAT(m.accuracy, WithinAbs(2.0 / 3.0, 1e-15));
  CHECK_FALSE(m.auc);
  const std::vector<std::uint8_t> mixed{1, 1, 0};
  CHECK(task_metrics(d, s, mixed).auc == 1.0);
}

TEST_CASE("number formatting") {
  CHECK(format_percent(0.94) == "94.0%");
  CHECK(format_percent(0.9995) == "100.0%");
  CHECK(format_percent(0.12345) == "12.3%");
  CHECK(format_score(0.905) == ".905");
  CHECK(format_score(0.9045) == ".905");
  CHECK(format_score(0.9044) == ".904");
  CHECK(format_score(1.0) == "1.000");
  CHECK(format_score(0.0) == ".000");
}

TEST_CASE("results table rendering") {
  ResultsTable table;
  table.cells.push_back(cell("mtl_base", 1000, 0.94, 0.905, 0.97));
  table.cells.push_back(cell("stl_glove", 1000, 0.80, 0.7, std::nullopt));
  table.cells.push_back(cell("stl_base", 500, 0.9, 0.8, 0.9));
  const auto text = render_results_table(table);
  CHECK_THAT(text, ContainsSubstring("94.0%"));
  CHECK_THAT(text, ContainsSubstring(".905"));
  CHECK_THAT(text, ContainsSubstring("n/a"));
  CHECK_THAT(text, ContainsSubstring("Training with 500 labeled data samples"));
  // Smaller training sizes first, baseline before transformer settings.
  CHECK(text.find("500 labeled") < text.find("1000 labeled"));
  CHECK(text.find("STL-GloVe (Baseline)") < text.find("MTL-base"));

  const auto csv = render_results_csv(table);
  CHECK_THAT(csv, ContainsSubstring("setting,training_size,runs,suggestion_accuracy"));
  CHECK_THAT(csv, ContainsSubstring("mtl_base,1000,5,0.93999999999999995"));

  CHECK_THROWS_AS(render_results_table(ResultsTable{}), std::invalid_argument);
  auto ragged = table;
  ragged.cells[1].mean[Task::problem].reset();
  CHECK_THROWS_WITH(render_results_table(ragged), ContainsSubstring("ragged"));
}

TEST_CASE("averaging reports") {
  MetricsReport a, b;
  a[Task::problem] = TaskMetrics{0.8, 0.6, 0.9};
  b[Task::problem] = TaskMetrics{0.6, 0.4, std::nullopt};
  const std::vector<MetricsReport> runs{a, b};
  const auto mean = average_reports(runs);
  CHECK_THAT(mean[Task::problem]->accuracy, WithinAbs(0.7, 1e-15));
  CHECK_THAT(mean[Task::problem]->macro_f1, WithinAbs(0.5, 1e-15));
  CHECK(mean[Task::problem]->auc == 0.9);
  CHECK_FALSE(mean[Task::suggestion]);
  CHECK_THROWS_AS(average_reports(std::span<const MetricsReport>{}), std::invalid_argument);
}
