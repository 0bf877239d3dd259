#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "revq/checkpoint.hpp"
#include "revq/model.hpp"
#include "support.hpp"

using namespace revq;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

const std::vector<Task> kMtl(kAllTasks.begin(), kAllTasks.end());
constexpr BuildOptions kShape{.allocation = Allocation::shape_only};

EncodedExample fixed_example() {
  EncodedExample ex;
  ex.token_ids = {2, 10, 11, 12, 13, 14, 3, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  ex.attention_mask = {1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  return ex;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "revq_modelkit_tests" / name;
  std::filesystem::remove_all(dir);
  return dir;
}

Vocabulary numbered_vocab(std::size_t n) {
  std::vector<std::string> tokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  for (std::size_t i = tokens.size(); i < n; ++i) tokens.push_back("w" + std::to_string(i));
  return Vocabulary(tokens);
}

}  // namespace

TEST_CASE("head parameter counts") {
  const auto stl = build_model(EncoderSpec::transformer_base(), {Task::suggestion}, 0, kShape);
  REQUIRE(stl.heads().size() == 1);
  CHECK(stl.mode() == ModelMode::stl);
  CHECK(stl.heads()[0].parameter_count() == 1538);

  const auto mtl = build_model(EncoderSpec::transformer_base(), kMtl, 0, kShape);
  CHECK(mtl.mode() == ModelMode::mtl);
  std::size_t heads = 0;
  for (const auto& h : mtl.heads()) heads += h.parameter_count();
  CHECK(heads == 4614);
}

TEST_CASE("full-size parameter accounting") {
  const auto base = build_model(EncoderSpec::transformer_base(), kMtl, 0, kShape);
  const auto distilled = build_model(EncoderSpec::transformer_distilled(), kMtl, 0, kShape);
  CHECK_FALSE(base.encoder().materialized());

  const double mtl_base = static_cast<double>(count_parameters(base));
  const double mtl_distilled = static_cast<double>(count_parameters(distilled));
  CHECK(std::abs(mtl_base - 109e6) / 109e6 < 0.01);
  CHECK(std::abs(mtl_distilled - 66e6) / 66e6 < 0.02);

  std::size_t stl_base = 0;
  std::size_t stl_distilled = 0;
  for (Task t : kAllTasks) {
    stl_base += count_parameters(build_model(EncoderSpec::transformer_base(), {t}, 0, kShape));
    stl_distilled += count_parameters(build_model(EncoderSpec::transformer_distilled(), {t}, 0, kShape));
  }
  CHECK(std::abs(static_cast<double>(stl_base) - 328e6) / 328e6 < 0.01);
  CHECK(std::abs(static_cast<double>(stl_distilled) - 199e6) / 199e6 < 0.02);

  const double ratio = static_cast<double>(distilled.encoder().trainable_parameter_count()) /
                       static_cast<double>(base.encoder().trainable_parameter_count());
  CHECK(std::abs(ratio - 0.60) <= 0.05);

  // Hand count of the base encoder.
  const std::size_t h = 768, v = 30522, f = 3072;
  const std::size_t embeddings = v * h + 512 * h + 2 * h + 2 * h;
  const std::size_t block = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
  const std::size_t pooler = h * h + h;
  CHECK(base.encoder().trainable_parameter_count() == embeddings + 12 * block + pooler);
  CHECK(distilled.encoder().trainable_parameter_count() ==
        v * h + 512 * h + 2 * h + 6 * block);
}

TEST_CASE("MTL count equals STL count plus two heads") {
  for (const auto& spec : {EncoderSpec::transformer_base(), EncoderSpec::transformer_distilled(),
                           EncoderSpec::toy(100), EncoderSpec::toy(37, 3, 16, 2),
                           EncoderSpec::glove(500, 50)}) {
    const auto mtl = build_model(spec, kMtl, 0, kShape);
    const auto stl = build_model(spec, {Task::problem}, 0, kShape);
    CHECK(count_parameters(mtl) == count_parameters(stl) + 2 * (spec.hidden_size * 2 + 2));
  }
}

TEST_CASE("construction errors") {
  CHECK_THROWS_AS(build_model(EncoderSpec::toy(20), {}, 0), ModelConstructionError);
  CHECK_THROWS_AS(build_model(EncoderSpec::toy(20), {Task::suggestion, Task::problem}, 0),
                  ModelConstructionError);
  auto bad = EncoderSpec::transformer_base();
  bad.hidden_size = 512;
  CHECK_THROWS_AS(build_model(bad, kMtl, 0, kShape), ModelConstructionError);
  auto heads = EncoderSpec::toy(20);
  heads.head_count = 5;
  CHECK_THROWS_AS(build_model(heads, kMtl, 0), ModelConstructionError);
  CHECK_THROWS_AS(build_model(EncoderSpec::toy(20), kMtl, 0, {.max_len = 500}), ModelConstructionError);
}

TEST_CASE("forward shapes, determinism and length checks") {
  auto model = build_model(EncoderSpec::toy(50), kMtl, 7, {.max_len = 16});
  const auto batch = support::random_examples(5, 50, 16, 1);
  const auto logits = model.forward(batch);
  CHECK(logits.tasks.size() == 3);
  CHECK(logits.batch_size() == 5);
  CHECK(logits.pair_count() == 15);
  for (const auto& m : logits.logits) CHECK(m.allFinite());

  std::vector<EncodedExample> twice{batch[2], batch[2]};
  const auto dup = model.forward(twice);
  for (Task t : kAllTasks) CHECK(dup[t].row(0) == dup[t].row(1));

  const auto again = model.forward(batch);
  for (Task t : kAllTasks) CHECK(again[t] == logits[t]);

  const auto wrong = support::random_examples(1, 50, 12, 1);
  CHECK_THROWS_AS(model.forward(wrong), ShapeError);

  auto out_of_vocab = batch[0];
  out_of_vocab.token_ids[1] = 50;
  CHECK_THROWS_AS(model.forward(std::span(&out_of_vocab, 1)), ShapeError);

  const auto shape_only = build_model(EncoderSpec::toy(50), kMtl, 7, {.max_len = 16, .allocation = Allocation::shape_only});
  CHECK_THROWS_AS(shape_only.forward(batch), ShapeError);
}

TEST_CASE("golden logits of a seeded toy encoder") {
  const auto model = build_model(EncoderSpec::toy(50), kMtl, 42, {.max_len = 16});
  const auto ex = fixed_example();
  const auto l = model.forward(std::span(&ex, 1));
  const double golden[3][2] = {{0.1773605506, -0.0070925677},
                               {-0.1028582510, -0.1595074022},
                               {-0.0427821372, 0.0090512030}};
  for (Task t : kAllTasks) {
    CHECK_THAT(l[t](0, 0), WithinAbs(golden[task_index(t)][0], 1e-5));
    CHECK_THAT(l[t](0, 1), WithinAbs(golden[task_index(t)][1], 1e-5));
  }
}

TEST_CASE("padding does not leak into the representation") {
  const auto model = build_model(EncoderSpec::toy(50), kMtl, 3, {.max_len = 16});
  auto a = fixed_example();
  auto b = a;
  for (std::size_t i = 7; i < 16; ++i) b.token_ids[i] = static_cast<Vocabulary::Id>(20 + i);
  const auto la = model.forward(std::span(&a, 1));
  const auto lb = model.forward(std::span(&b, 1));
  for (Task t : kAllTasks) CHECK(la[t] == lb[t]);
}

TEST_CASE("each head only moves its own logits") {
  auto model = build_model(EncoderSpec::toy(50), kMtl, 9, {.max_len = 16});
  const auto batch = support::random_examples(4, 50, 16, 2);
  const auto before = model.forward(batch);
  for (Task changed : kAllTasks) {
    auto& head = model.head(changed);
    const TaskHead saved = head;
    head.affine.weight.value.array() += 0.5;
    head.affine.bias.value.array() -= 0.25;
    const auto after = model.forward(batch);
    for (Task t : kAllTasks) {
      if (t == changed) {
        CHECK(after[t] != before[t]);
      } else {
        CHECK(after[t] == before[t]);
      }
    }
    head = saved;
  }
}

TEST_CASE("forward is permutation-equivariant over the batch") {
  const auto model = build_model(EncoderSpec::toy(60), kMtl, 11, {.max_len = 20});
  const auto batch = support::random_examples(9, 60, 20, 3);
  std::vector<std::size_t> order{4, 0, 8, 2, 6, 1, 7, 3, 5};
  std::vector<EncodedExample> permuted;
  for (auto i : order) permuted.push_back(batch[i]);
  const auto a = model.forward(batch);
  const auto b = model.forward(permuted);
  for (Task t : kAllTasks) {
    for (std::size_t k = 0; k < order.size(); ++k) {
      CHECK((a[t].row(static_cast<Eigen::Index>(order[k])) - b[t].row(static_cast<Eigen::Index>(k)))
                .cwiseAbs()
                .maxCoeff() <= 1e-6);
    }
  }
}

TEST_CASE("seeded construction is reproducible") {
  const auto a = build_model(EncoderSpec::toy(30), kMtl, 5, {.max_len = 10});
  const auto b = build_model(EncoderSpec::toy(30), kMtl, 5, {.max_len = 10});
  const auto c = build_model(EncoderSpec::toy(30), kMtl, 6, {.max_len = 10});
  std::vector<nn::Matrix> va, vb, vc;
  a.visit([&](const nn::Param& p) { va.push_back(p.value); });
  b.visit([&](const nn::Param& p) { vb.push_back(p.value); });
  c.visit([&](const nn::Param& p) { vc.push_back(p.value); });
  CHECK(va == vb);
  CHECK(va != vc);
}

TEST_CASE("transformer gradients match finite differences") {
  auto model = build_model(EncoderSpec::toy(20, 2, 8, 2), kMtl, 13, {.max_len = 8, .head_dropout = 0.0});
  auto spec = model.encoder().spec();
  REQUIRE(spec.dropout == 0.1);
  const auto batch = support::random_examples(3, 20, 8, 4);
  const auto weights = support::skewed_weights();
  // Dropout masks are drawn from the same seed in every pass, so the
  // training-mode loss is a smooth function of the parameters.
  const double err = support::finite_difference_error(model, batch, weights, kAllTasks, 77, 1e-5,
                                                      [](const std::string&) { return true; });
  CHECK(err < 1e-4);
}

TEST_CASE("word-vector baseline") {
  const auto vocab = numbered_vocab(12);
  WordVectors table;
  table.dim = 300;
  for (std::size_t i = 4; i < 10; ++i) {
    table.vectors["w" + std::to_string(i)] = std::vector<double>(300, 0.01 * static_cast<double>(i));
  }
  auto baseline = build_glove_baseline(table, Task::suggestion, vocab, 1, 300, {.max_len = 8});
  CHECK(baseline.model.heads().size() == 1);
  CHECK(baseline.model.heads()[0].parameter_count() == 602);
  CHECK(baseline.coverage.found == 6);
  CHECK(baseline.coverage.missing.size() == 6);
  CHECK(std::find(baseline.coverage.missing.begin(), baseline.coverage.missing.end(), "w11") !=
        baseline.coverage.missing.end());

  auto& enc = dynamic_cast<GloveEncoder&>(baseline.model.encoder());
  CHECK(enc.embedding().value(5, 0) == 0.05);

  SECTION("zero input yields the head bias") {
    const std::vector<double> zero(300, 0.0);
    for (Vocabulary::Id id : {2, 3, 4}) enc.set_embedding_row(id, zero);
    EncodedExample ex;
    ex.token_ids = {2, 4, 3, 0, 0, 0, 0, 0};
    ex.attention_mask = {1, 1, 1, 0, 0, 0, 0, 0};
    const auto l = baseline.model.forward(std::span(&ex, 1));
    const auto& bias = baseline.model.head(Task::suggestion).affine.bias.value;
    CHECK_THAT(l[Task::suggestion](0, 0), WithinAbs(bias(0, 0), 1e-12));
    CHECK_THAT(l[Task::suggestion](0, 1), WithinAbs(bias(0, 1), 1e-12));
  }

  SECTION("dimension mismatch") {
    CHECK_THROWS_AS(build_glove_baseline(table, Task::suggestion, vocab, 1, 200), ModelConstructionError);
    CHECK_THROWS_AS(build_glove_baseline(WordVectors{}, Task::suggestion, vocab, 1), ModelConstructionError);
  }

  SECTION("head gradients match finite differences") {
    auto small = build_glove_baseline(table, Task::problem, vocab, 2, 300, {.max_len = 8, .head_dropout = 0.0});
    const auto batch = support::random_examples(6, 12, 8, 5);
    const std::array<Task, 1> active{Task::problem};
    const double err = support::finite_difference_error(
        small.model, batch, support::skewed_weights(), active, 3, 1e-3,
        [](const std::string& name) { return name.rfind("head.", 0) == 0 || name.rfind("norm.", 0) == 0; });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("word vectors text format") {
  const auto path = std::filesystem::temp_directory_path() / "revq_vectors.txt";
  std::ofstream(path) << "good 0.1 0.2 0.3\nwork -1 0 1\n";
  const auto wv = WordVectors::load(path);
  CHECK(wv.dim == 3);
  CHECK(wv.vectors.at("work")[0] == -1.0);
  std::ofstream(path) << "good 0.1 0.2 0.3\nwork -1 0\n";
  CHECK_THROWS_WITH(WordVectors::load(path), ContainsSubstring("line 2"));
}

TEST_CASE("checkpoint round trip") {
  const auto vocab = numbered_vocab(50);
  auto model = build_model(EncoderSpec::toy(50), kMtl, 21, {.max_len = 16});
  const auto dir = temp_dir("round_trip");
  save_checkpoint(dir, model, vocab);

  const auto loaded = load_checkpoint(dir);
  CHECK(loaded.vocab.size() == 50);
  CHECK(loaded.model.encoder().spec() == model.encoder().spec());
  CHECK(loaded.model.max_len() == 16);
  const auto batch = support::random_examples(4, 50, 16, 6);
  const auto a = model.forward(batch);
  const auto b = loaded.model.forward(batch);
  for (Task t : kAllTasks) CHECK(a[t] == b[t]);
  CHECK(loaded.version.size() == 16);
  CHECK(load_checkpoint(dir).version == loaded.version);

  SECTION("encoder reused through the spec") {
    auto spec = EncoderSpec::toy(50);
    spec.checkpoint = dir;
    const auto fresh = build_model(spec, {Task::problem}, 99, {.max_len = 16});
    const auto ea = model.encoder().encode_batch(batch);
    const auto eb = fresh.encoder().encode_batch(batch);
    CHECK(ea == eb);

    auto wrong = EncoderSpec::toy(50, 2, 16, 4);
    wrong.checkpoint = dir;
    CHECK_THROWS_WITH(build_model(wrong, kMtl, 0, {.max_len = 16}), ContainsSubstring("hidden_size"));
    auto other = EncoderSpec::toy(51);
    other.checkpoint = dir;
    CHECK_THROWS_WITH(build_model(other, kMtl, 0, {.max_len = 16}), ContainsSubstring("vocab_size"));
  }

  SECTION("corrupt payload") {
    const auto bad = temp_dir("corrupt");
    std::filesystem::copy(dir, bad);
    {
      std::fstream f(bad / "tensors.bin", std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(100);
      f.put('\x7f');
    }
    CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
  }

  SECTION("missing manifest") {
    CHECK_THROWS_AS(load_checkpoint(temp_dir("nothing")), CheckpointError);
  }

  SECTION("different weights give a different version") {
    model.head(Task::suggestion).affine.bias.value(0, 0) += 1.0;
    const auto other = temp_dir("other");
    save_checkpoint(other, model, vocab);
    CHECK(load_checkpoint(other).version != loaded.version);
  }
}
