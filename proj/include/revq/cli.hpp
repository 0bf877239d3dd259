#pragma once

// Command-line front end: one binary, one subcommand per pipeline stage.
// Every flag can also come from a REVQ_<FLAG> environment variable or from a
// --config file (TOML/INI, same keys as the flags); the command line wins.

#include <csignal>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <pthread.h>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "service.hpp"
#include "synthetic.hpp"
#include "textprep.hpp"
#include "trainer.hpp"

namespace revq::cli {

enum ExitCode : int { kSuccess = 0, kUsage = 1, kData = 2, kRuntime = 3 };

struct CommandOutcome {
  int exit_code = kSuccess;
  std::vector<std::filesystem::path> artifacts;
};

/// Bad flag values detected after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

namespace fs = std::filesystem;

inline std::string env_name(std::string_view flag) {
  std::string out = "REVQ_";
  for (char c : flag) out += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

template <typename T>
CLI::Option* flag(CLI::App* app, std::string_view name, T& target, std::string help) {
  return app->add_option("--" + std::string(name), target, std::move(help))
      ->envname(env_name(name));
}

inline CLI::Option* toggle(CLI::App* app, std::string_view name, bool& target, std::string help) {
  return app->add_flag("--" + std::string(name), target, std::move(help))->envname(env_name(name));
}

inline void write_text(const fs::path& path, const std::string& text, CommandOutcome& outcome) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("short write to " + path.string());
  outcome.artifacts.push_back(path);
}

inline std::vector<std::size_t> parse_sizes(const std::string& list, std::string_view what) {
  std::vector<std::size_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("invalid " + std::string(what) + " '" + list + "'");
    }
  }
  if (out.empty()) throw UsageError("empty " + std::string(what));
  return out;
}

inline std::vector<std::string> split_list(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::shared_ptr<const SpellCorrector> corrector_from(const std::string& dict_path) {
  if (dict_path.empty()) return std::make_shared<IdentityCorrector>();
  return std::make_shared<DictionaryCorrector>(DictionaryCorrector::load(dict_path));
}

inline LoadedDataset load_labeled(const std::string& path, bool lenient, std::ostream& err) {
  LoadedDataset ds = load_dataset(path, format_from_path(path), LoadOptions{.strict = !lenient});
  err << path << ": " << ds.report.accepted << " accepted, " << ds.report.dropped_symbol_only
      << " dropped as symbol-only, " << ds.report.rejected << " rejected\n";
  return ds;
}

/// Cleans and encodes; comments whose cleaned text is empty are skipped.
inline std::vector<EncodedExample> encode_all(std::span<const ReviewComment> comments,
                                              const TextPipeline& pipeline, std::ostream& err) {
  std::vector<EncodedExample> out;
  out.reserve(comments.size());
  std::size_t skipped = 0;
  for (const auto& c : comments) {
    try {
      EncodedExample ex = pipeline.prepare(c.text);
      ex.labels = c.labels;
      out.push_back(std::move(ex));
    } catch (const UnusableTextError&) {
      ++skipped;
    }
  }
  if (skipped) err << skipped << " comments had no text left after cleaning and were skipped\n";
  return out;
}

inline std::vector<std::string> cleaned_texts(std::span<const ReviewComment> comments,
                                              const SpellCorrector& corrector) {
  std::vector<std::string> out;
  for (const auto& c : comments) {
    try {
      out.push_back(clean_text(c.text, corrector));
    } catch (const UnusableTextError&) {
    }
  }
  return out;
}

inline std::string millions(std::size_t n) {
  return "≈" + std::to_string(static_cast<long long>(std::llround(static_cast<double>(n) / 1e6))) + "M";
}

inline std::string with_commas(std::size_t n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

inline EncoderSpec spec_for(EncoderFamily family, std::size_t vocab_size) {
  switch (family) {
    case EncoderFamily::transformer_base:
      return EncoderSpec::transformer_base(vocab_size);
    case EncoderFamily::transformer_distilled:
      return EncoderSpec::transformer_distilled(vocab_size);
    case EncoderFamily::glove_baseline:
      return EncoderSpec::glove(vocab_size);
    case EncoderFamily::toy_transformer:
      return EncoderSpec::toy(vocab_size);
  }
  throw std::logic_error("unknown encoder family");
}

/// Trainable parameters of a setting; STL settings count one model per task.
inline std::size_t setting_parameter_count(const ExperimentSetting& s, std::size_t vocab_size) {
  const EncoderSpec spec = spec_for(s.family, vocab_size);
  const BuildOptions shape{.allocation = Allocation::shape_only};
  if (s.mode == ModelMode::mtl) {
    return count_parameters(build_model(spec, {kAllTasks.begin(), kAllTasks.end()}, 0, shape));
  }
  std::size_t total = 0;
  for (Task t : kAllTasks) total += count_parameters(build_model(spec, {t}, 0, shape));
  return total;
}

inline std::string setting_row_label(const ExperimentSetting& s) {
  std::string name = setting_display_name(s.name());
  return s.mode == ModelMode::stl ? name + " * 3" : name;
}

inline double default_learning_rate(EncoderFamily f) {
  return f == EncoderFamily::toy_transformer || f == EncoderFamily::glove_baseline ? 1e-3 : 2e-5;
}

// Interruptible blocking serve: SIGINT/SIGTERM stop the server.
inline void serve_until_interrupted(service::HttpServer& server) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  sigset_t previous;
  pthread_sigmask(SIG_BLOCK, &set, &previous);
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  server.serve();
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  pthread_sigmask(SIG_SETMASK, &previous, nullptr);
}

}  // namespace detail

struct PrepareArgs {
  std::string data, vocab, spell_dict, out = "prepared";
  std::size_t max_len = kDefaultMaxLen;
  bool lenient = false;
};

struct StatsArgs {
  std::string data, out;
  bool lenient = false;
};

struct KappaArgs {
  std::string first, second, out;
};

struct TrainArgs {
  std::string data, validation, vocab, spell_dict, out = "revq-train", checkpoint;
  std::string encoder = "toy", mode = "mtl", task = "suggestion", grid = "single";
  std::string pretrained, word_vectors;
  std::size_t size = 0, steps = 0, epochs = 0, batch_size = 32, max_len = kDefaultMaxLen;
  std::size_t synthetic_count = 7000;
  double lr = 0.0, dropout = 0.1;
  std::uint64_t seed = 0;
  bool unweighted = false, lenient = false;
};

struct EvaluateArgs {
  std::string checkpoint, data, spell_dict, out;
  bool lenient = false;
};

struct ExperimentArgs {
  std::string data, vocab, spell_dict, out = "revq-experiment", word_vectors;
  std::string settings = "mtl_toy,stl_toy", sizes = "1000", split, grid = "single";
  std::size_t runs = 5, epochs = 0, batch_size = 32, max_len = kDefaultMaxLen;
  std::size_t synthetic_count = 7000;
  double lr = 0.0, dropout = 0.1;
  std::uint64_t seed = 0;
  bool unweighted = false, lenient = false;
};

struct ParamsArgs {
  std::string settings = "stl_base,stl_distilled,mtl_base,mtl_distilled";
  std::size_t vocab_size = kPretrainedVocab;
};

struct ServeArgs {
  std::string checkpoint, listen = "127.0.0.1:8080", spell_dict;
  std::size_t max_request_bytes = service::kDefaultMaxRequestBytes;
};

// Subcommands -------------------------------------------------------------------

inline CommandOutcome cmd_prepare(const PrepareArgs& a, std::ostream& out, std::ostream& err) {
  CommandOutcome outcome;
  const auto ds = detail::load_labeled(a.data, a.lenient, err);
  const auto corrector = detail::corrector_from(a.spell_dict);
  const detail::fs::path dir(a.out);

  std::vector<CleanedComment> cleaned;
  std::vector<std::pair<const ReviewComment*, std::string>> kept;
  for (const auto& c : ds.comments) {
    try {
      std::string text = clean_text(c.text, *corrector);
      cleaned.push_back({c.id, text});
      kept.emplace_back(&c, std::move(text));
    } catch (const UnusableTextError&) {
      err << c.id << ": no text left after cleaning, skipped\n";
    }
  }
  detail::fs::create_directories(dir);
  write_clean_cache(dir / "clean.jsonl", cleaned);
  outcome.artifacts.push_back(dir / "clean.jsonl");

  if (!a.vocab.empty()) {
    const Vocabulary vocab = Vocabulary::load(a.vocab);
    std::string lines;
    for (const auto& [comment, text] : kept) {
      const EncodedExample ex = encode(text, vocab, a.max_len);
      nlohmann::ordered_json j;
      j["id"] = comment->id;
      j["token_ids"] = ex.token_ids;
      j["attention_mask"] = ex.attention_mask;
      if (comment->labels) {
        for (Task t : kAllTasks) j[std::string(task_name(t))] = (*comment->labels)[t];
      }
      lines += j.dump() + "\n";
    }
    detail::write_text(dir / "encoded.jsonl", lines, outcome);
  }

  nlohmann::ordered_json report;
  report["accepted"] = ds.report.accepted;
  report["dropped_symbol_only"] = ds.report.dropped_symbol_only;
  report["rejected"] = ds.report.rejected;
  report["rejections"] = ds.report.rejections;
  report["cleaned"] = cleaned.size();
  detail::write_text(dir / "load_report.json", report.dump(2) + "\n", outcome);
  out << "prepared " << cleaned.size() << " comments into " << dir.string() << "\n";
  return outcome;
}

inline CommandOutcome cmd_stats(const StatsArgs& a, std::ostream& out, std::ostream& err) {
  CommandOutcome outcome;
  const auto ds = detail::load_labeled(a.data, a.lenient, err);
  const std::string table = render_stats_table(class_statistics(ds.comments));
  out << table;
  if (!a.out.empty()) detail::write_text(a.out, table, outcome);
  return outcome;
}

inline CommandOutcome cmd_kappa(const KappaArgs& a, std::ostream& out, std::ostream& err) {
  CommandOutcome outcome;
  const auto first = detail::load_labeled(a.first, false, err);
  const auto second = detail::load_labeled(a.second, false, err);
  const AgreementReport r = agreement(first.comments, second.comments);
  nlohmann::ordered_json j;
  for (Task t : kAllTasks) {
    j[std::string(task_name(t))] = r.kappa[task_index(t)];
    out << std::left << std::setw(14) << task_name(t) << " kappa = " << std::fixed
        << std::setprecision(4) << r.kappa[task_index(t)] << "\n";
  }
  j["average"] = r.average_kappa;
  j["paired_comments"] = r.paired_comments;
  out << std::left << std::setw(14) << "average" << " kappa = " << std::fixed << std::setprecision(4)
      << r.average_kappa << "\n";
  if (!a.out.empty()) detail::write_text(a.out, j.dump(2) + "\n", outcome);
  return outcome;
}

inline CommandOutcome cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  CommandOutcome outcome;
  const auto family = parse_family(a.encoder);
  if (!family) throw UsageError("unknown encoder '" + a.encoder + "'");
  if (a.mode != "mtl" && a.mode != "stl") throw UsageError("--mode must be mtl or stl");
  const auto task = parse_task(a.task);
  if (!task) throw UsageError("unknown task '" + a.task + "'");
  const bool mtl = a.mode == "mtl";
  if (*family == EncoderFamily::glove_baseline && mtl) {
    throw UsageError("the word-vector baseline is single-task; use --mode stl");
  }
  const auto corrector = detail::corrector_from(a.spell_dict);

  std::vector<ReviewComment> pool;
  std::vector<ReviewComment> validation;
  std::optional<Vocabulary> vocab;
  if (a.data.empty()) {
    pool = synthetic::generate_corpus({.count = a.synthetic_count, .seed = 0});
    vocab = synthetic::vocabulary();
  } else {
    pool = detail::load_labeled(a.data, a.lenient, err).comments;
  }
  if (!a.validation.empty()) validation = detail::load_labeled(a.validation, a.lenient, err).comments;
  if (a.size > 0) {
    if (a.size > pool.size()) {
      throw SizingError("--size " + std::to_string(a.size) + " exceeds the " +
                            std::to_string(pool.size()) + " available comments",
                        pool.size());
    }
    pool = subsample(pool, a.size, revq::detail::mix_seed(a.seed, 21));
  }
  if (!a.vocab.empty()) {
    vocab = Vocabulary::load(a.vocab);
  } else if (!vocab) {
    vocab = build_word_vocabulary(detail::cleaned_texts(pool, *corrector));
  }

  const TextPipeline pipeline{std::make_shared<const Vocabulary>(*vocab), corrector, a.max_len};
  EncodedSplit split;
  split.train = detail::encode_all(pool, pipeline, err);
  split.validation = detail::encode_all(validation, pipeline, err);

  Hyperparams hp;
  hp.batch_size = a.batch_size;
  hp.max_len = a.max_len;
  hp.learning_rate = a.lr > 0 ? a.lr : detail::default_learning_rate(*family);
  hp.dropout = a.dropout;
  hp.seed = a.seed;
  hp.max_steps = a.steps;
  if (a.epochs > 0) {
    hp.epochs = a.epochs;
  } else if (a.steps > 0) {
    const std::size_t per_epoch = (split.train.size() + hp.batch_size - 1) / hp.batch_size;
    hp.epochs = (a.steps + per_epoch - 1) / std::max<std::size_t>(per_epoch, 1);
  }

  HyperGrid grid;
  if (a.grid == "single") {
    grid = {{hp.learning_rate}, {hp.epochs}};
  } else if (a.grid != "full") {
    throw UsageError("--grid must be single or full");
  }

  const std::vector<Task> tasks = mtl ? std::vector<Task>(kAllTasks.begin(), kAllTasks.end())
                                      : std::vector<Task>{*task};
  std::optional<WordVectors> table;
  if (*family == EncoderFamily::glove_baseline) {
    if (a.word_vectors.empty()) throw UsageError("--encoder glove needs --word-vectors");
    table = WordVectors::load(a.word_vectors);
  }
  const ModelBuilder builder = [&](const Hyperparams& h) {
    const BuildOptions opts{.max_len = h.max_len, .head_dropout = h.dropout};
    if (table) {
      auto baseline = build_glove_baseline(*table, *task, *vocab, h.seed, table->dim, opts);
      err << "word vectors cover " << baseline.coverage.found << " of " << vocab->size()
          << " vocabulary entries\n";
      return std::move(baseline.model);
    }
    EncoderSpec spec = detail::spec_for(*family, vocab->size());
    spec.dropout = h.dropout;
    if (!a.pretrained.empty()) spec.checkpoint = a.pretrained;
    return build_model(spec, tasks, h.seed, opts);
  };
  const ClassWeights weights = a.unweighted ? ClassWeights::uniform()
                                            : class_weights_from_labels(labels_of(split.train));
  GridResult result = grid_select(builder, split, hp, grid, weights,
                                  [&](const std::string& line) { err << line << "\n"; });

  const detail::fs::path dir(a.out);
  const detail::fs::path ckpt = a.checkpoint.empty() ? dir / "checkpoint" : detail::fs::path(a.checkpoint);
  save_checkpoint(ckpt, *result.model, *vocab);
  outcome.artifacts.push_back(ckpt);
  detail::write_text(dir / "train_report.jsonl", to_jsonl(result.report, false), outcome);
  err << "training took " << std::fixed << std::setprecision(1)
      << result.report.wall_clock_seconds << " s\n";

  out << "trained " << (mtl ? "MTL" : "STL") << " " << family_name(*family) << " on "
      << split.train.size() << " comments, lr " << result.best.learning_rate << ", "
      << result.report.steps << " steps\n";
  if (result.report.final_train) {
    for (Task t : result.model->tasks()) {
      out << "  train accuracy " << task_name(t) << ": "
          << format_score((*result.report.final_train)[t]->accuracy) << "\n";
    }
  }
  out << "checkpoint: " << ckpt.string() << "\n";
  return outcome;
}

inline CommandOutcome cmd_evaluate(const EvaluateArgs& a, std::ostream& out, std::ostream& err) {
  CommandOutcome outcome;
  const LoadedModel loaded = load_checkpoint(a.checkpoint);
  const auto ds = detail::load_labeled(a.data, a.lenient, err);
  const TextPipeline pipeline{std::make_shared<const Vocabulary>(loaded.vocab),
                              detail::corrector_from(a.spell_dict), loaded.model.max_len()};
  const auto data = detail::encode_all(ds.comments, pipeline, err);
  nlohmann::ordered_json j = to_json(evaluate(loaded.model, data));
  j["model_version"] = loaded.version;
  out << j.dump(2) << "\n";
  if (!a.out.empty()) detail::write_text(a.out, j.dump(2) + "\n", outcome);
  return outcome;
}

inline CommandOutcome cmd_experiment(const ExperimentArgs& a, std::ostream& out, std::ostream& err) {
  CommandOutcome outcome;
  std::vector<ExperimentSetting> settings;
  for (const auto& s : detail::split_list(a.settings)) {
    const auto parsed = ExperimentSetting::parse(s);
    if (!parsed) throw UsageError("unknown setting '" + s + "'");
    settings.push_back(*parsed);
  }
  if (settings.empty()) throw UsageError("--setting names no settings");
  const auto corrector = detail::corrector_from(a.spell_dict);

  std::vector<ReviewComment> corpus;
  std::optional<Vocabulary> vocab;
  if (a.data.empty()) {
    corpus = synthetic::generate_corpus({.count = a.synthetic_count, .seed = 0});
    vocab = synthetic::vocabulary();
  } else {
    corpus = detail::load_labeled(a.data, a.lenient, err).comments;
  }
  SplitSizes sizes;
  if (a.split.empty()) {
    sizes.train = corpus.size() * 6 / 10;
    sizes.validation = corpus.size() / 10;
    sizes.test = corpus.size() - sizes.train - sizes.validation;
  } else {
    const auto parts = detail::parse_sizes(a.split, "--split");
    if (parts.size() != 3) throw UsageError("--split needs train,validation,test sizes");
    sizes = {parts[0], parts[1], parts[2]};
  }
  const DatasetSplit split = split_dataset(corpus, sizes, a.seed);
  if (!a.vocab.empty()) {
    vocab = Vocabulary::load(a.vocab);
  } else if (!vocab) {
    vocab = build_word_vocabulary(detail::cleaned_texts(split.train, *corrector));
  }
  const TextPipeline pipeline{std::make_shared<const Vocabulary>(*vocab), corrector, a.max_len};
  EncodedSplit encoded{detail::encode_all(split.train, pipeline, err),
                       detail::encode_all(split.validation, pipeline, err),
                       detail::encode_all(split.test, pipeline, err)};

  std::optional<WordVectors> table;
  ExperimentResult all;
  const auto progress = [&](const std::string& line) { err << line << "\n"; };
  for (const auto& setting : settings) {
    ExperimentConfig cfg;
    cfg.setting = setting;
    cfg.training_sizes = detail::parse_sizes(a.sizes, "--size");
    cfg.run_seeds.clear();
    for (std::size_t i = 0; i < a.runs; ++i) cfg.run_seeds.push_back(a.seed + i);
    cfg.base.batch_size = a.batch_size;
    cfg.base.max_len = a.max_len;
    cfg.base.dropout = a.dropout;
    cfg.base.learning_rate = a.lr > 0 ? a.lr : detail::default_learning_rate(setting.family);
    if (a.epochs > 0) cfg.base.epochs = a.epochs;
    if (a.grid == "single") {
      cfg.grid = {{cfg.base.learning_rate}, {cfg.base.epochs}};
    } else if (a.grid != "full") {
      throw UsageError("--grid must be single or full");
    }
    cfg.cost_sensitive = !a.unweighted;
    if (setting.family == EncoderFamily::glove_baseline && !table) {
      if (a.word_vectors.empty()) throw UsageError("stl_glove needs --word-vectors");
      table = WordVectors::load(a.word_vectors);
    }
    const TaskModelFactory factory = [&](const std::vector<Task>& tasks, std::uint64_t seed) {
      const BuildOptions opts{.max_len = cfg.base.max_len, .head_dropout = cfg.base.dropout};
      if (setting.family == EncoderFamily::glove_baseline) {
        return std::move(build_glove_baseline(*table, tasks.front(), *vocab, seed, table->dim, opts).model);
      }
      EncoderSpec spec = detail::spec_for(setting.family, vocab->size());
      spec.dropout = cfg.base.dropout;
      return build_model(spec, tasks, seed, opts);
    };
    ExperimentResult r = run_experiment(cfg, encoded, factory, progress);
    for (auto& c : r.table.cells) all.table.cells.push_back(std::move(c));
    for (auto& run : r.runs) all.runs.push_back(std::move(run));
  }

  const std::string table_text = render_results_table(all.table);
  out << table_text;
  const detail::fs::path dir(a.out);
  detail::write_text(dir / "results.txt", table_text, outcome);
  detail::write_text(dir / "results.csv", render_results_csv(all.table), outcome);
  std::string runs;
  for (const auto& run : all.runs) {
    nlohmann::ordered_json j;
    j["training_size"] = run.training_size;
    j["seed"] = run.seed;
    j["test"] = to_json(run.test);
    nlohmann::ordered_json selected = nlohmann::ordered_json::array();
    for (const auto& hp : run.selected) {
      selected.push_back({{"learning_rate", hp.learning_rate}, {"epochs", hp.epochs}});
    }
    j["selected"] = selected;
    runs += j.dump() + "\n";
  }
  detail::write_text(dir / "runs.jsonl", runs, outcome);
  return outcome;
}

inline CommandOutcome cmd_params(const ParamsArgs& a, std::ostream& out, std::ostream&) {
  std::vector<ExperimentSetting> settings;
  for (const auto& s : detail::split_list(a.settings)) {
    const auto parsed = ExperimentSetting::parse(s);
    if (!parsed) throw UsageError("unknown setting '" + s + "'");
    settings.push_back(*parsed);
  }
  if (settings.empty()) throw UsageError("--setting names no settings");
  out << std::left << std::setw(26) << "Setting" << std::setw(18) << "# of parameters"
      << "exact\n";
  for (const auto& s : settings) {
    const std::size_t n = detail::setting_parameter_count(s, a.vocab_size);
    out << std::left << std::setw(26) << detail::setting_row_label(s) << std::setw(18)
        << detail::millions(n) << detail::with_commas(n) << "\n";
  }
  return {};
}

inline CommandOutcome cmd_serve(const ServeArgs& a, std::ostream& out, std::ostream& err) {
  service::ScoringService svc(detail::corrector_from(a.spell_dict));
  if (!a.checkpoint.empty()) {
    out << "loaded model " << svc.load_model(a.checkpoint) << "\n";
  } else {
    err << "no --checkpoint given; /assess answers 503 until a model is loaded\n";
  }
  auto options = service::parse_listen(a.listen);
  options.max_request_bytes = a.max_request_bytes;
  service::HttpServer server(svc, options);
  const int port = server.bind();
  out << "listening on " << options.host << ":" << port << std::endl;
  detail::serve_until_interrupted(server);
  return {};
}

// Entry point -------------------------------------------------------------------

inline CommandOutcome run(int argc, const char* const* argv, std::ostream& out = std::cout,
                          std::ostream& err = std::cerr) {
  CLI::App app{"Review-comment quality features: data preparation, training, evaluation and serving",
               "revq"};
  app.set_config("--config", "", "TOML/INI file with the same keys as the flags (flags win)");
  app.require_subcommand(1);
  using detail::flag;
  using detail::toggle;

  PrepareArgs prep;
  auto* sp = app.add_subcommand("prepare", "Clean (and optionally encode) a raw dataset into a cache");
  flag(sp, "data", prep.data, "Raw dataset (.jsonl or .csv)")->required();
  flag(sp, "vocab", prep.vocab, "WordPiece vocabulary; when given, encoded.jsonl is written too");
  flag(sp, "spell-dict", prep.spell_dict, "Word list for spelling correction (one word per line)");
  flag(sp, "max-len", prep.max_len, "Encoded sequence length")->capture_default_str();
  flag(sp, "out", prep.out, "Output directory")->capture_default_str();
  toggle(sp, "lenient", prep.lenient, "Skip invalid records instead of failing");

  StatsArgs stats;
  auto* ss = app.add_subcommand("stats", "Per-task class statistics table");
  flag(ss, "data", stats.data, "Labeled dataset (.jsonl or .csv)")->required();
  flag(ss, "out", stats.out, "Also write the table to this file");
  toggle(ss, "lenient", stats.lenient, "Skip invalid records instead of failing");

  KappaArgs kappa;
  auto* sk = app.add_subcommand("kappa", "Cohen's kappa between two annotation files, per task");
  sk->add_option("first", kappa.first, "First annotator's labeled file")->required();
  sk->add_option("second", kappa.second, "Second annotator's labeled file")->required();
  flag(sk, "out", kappa.out, "Also write the report as JSON to this file");

  TrainArgs tr;
  auto* st = app.add_subcommand("train", "Train one model and write a checkpoint and a report");
  flag(st, "data", tr.data, "Labeled training data; the bundled synthetic corpus when omitted");
  flag(st, "validation", tr.validation, "Labeled validation data (needed for --grid full)");
  flag(st, "vocab", tr.vocab, "Vocabulary file; built from the training text when omitted");
  flag(st, "spell-dict", tr.spell_dict, "Word list for spelling correction");
  flag(st, "encoder", tr.encoder, "toy, base, distilled or glove")->capture_default_str();
  flag(st, "pretrained", tr.pretrained, "Encoder checkpoint directory to start from");
  flag(st, "word-vectors", tr.word_vectors, "Word-vector text file (glove encoder)");
  flag(st, "mode", tr.mode, "mtl (all three tasks) or stl (one task)")->capture_default_str();
  flag(st, "task", tr.task, "Task for --mode stl")->capture_default_str();
  flag(st, "size", tr.size, "Train on a seeded sample of this many comments (0 = all)");
  flag(st, "steps", tr.steps, "Stop after this many optimizer steps (0 = no cap)");
  flag(st, "epochs", tr.epochs, "Epochs (default 2, or enough to reach --steps)");
  flag(st, "lr", tr.lr, "Learning rate (default 1e-3 for toy/glove, 2e-5 otherwise)");
  flag(st, "batch-size", tr.batch_size, "Mini-batch size")->capture_default_str();
  flag(st, "max-len", tr.max_len, "Encoded sequence length")->capture_default_str();
  flag(st, "dropout", tr.dropout, "Dropout rate")->capture_default_str();
  flag(st, "grid", tr.grid, "single (use --lr/--epochs) or full (lr 2e-5/3e-5/5e-5 x epochs 2/3)")
      ->capture_default_str();
  flag(st, "synthetic-count", tr.synthetic_count, "Size of the synthetic corpus")->capture_default_str();
  flag(st, "seed", tr.seed, "Seed for sampling, initialization, shuffling and dropout")
      ->capture_default_str();
  flag(st, "out", tr.out, "Output directory for the report (and checkpoint)")->capture_default_str();
  flag(st, "checkpoint", tr.checkpoint, "Checkpoint directory (default <out>/checkpoint)");
  toggle(st, "unweighted", tr.unweighted, "Use unit class weights");
  toggle(st, "lenient", tr.lenient, "Skip invalid records instead of failing");

  EvaluateArgs ev;
  auto* se = app.add_subcommand("evaluate", "Evaluate a checkpoint on labeled data");
  flag(se, "checkpoint", ev.checkpoint, "Checkpoint directory")->required();
  flag(se, "data", ev.data, "Labeled evaluation data")->required();
  flag(se, "spell-dict", ev.spell_dict, "Word list for spelling correction");
  flag(se, "out", ev.out, "Also write the metrics JSON to this file");
  toggle(se, "lenient", ev.lenient, "Skip invalid records instead of failing");

  ExperimentArgs ex;
  auto* sx = app.add_subcommand("experiment", "Run settings x training sizes x seeds and tabulate");
  flag(sx, "data", ex.data, "Labeled corpus; the bundled synthetic corpus when omitted");
  flag(sx, "vocab", ex.vocab, "Vocabulary file; built from the training split when omitted");
  flag(sx, "spell-dict", ex.spell_dict, "Word list for spelling correction");
  flag(sx, "word-vectors", ex.word_vectors, "Word-vector text file (stl_glove)");
  flag(sx, "setting", ex.settings, "Comma list of stl_glove, stl_base, mtl_base, stl_distilled, "
                                   "mtl_distilled, stl_toy, mtl_toy")
      ->capture_default_str();
  flag(sx, "size", ex.sizes, "Comma list of training sizes")->capture_default_str();
  flag(sx, "split", ex.split, "train,validation,test sizes (default 60/10/30 percent)");
  flag(sx, "runs", ex.runs, "Runs per cell; seeds are --seed, --seed+1, ...")->capture_default_str();
  flag(sx, "epochs", ex.epochs, "Epochs for --grid single (default 2)");
  flag(sx, "lr", ex.lr, "Learning rate for --grid single (default 1e-3 for toy/glove, 2e-5 otherwise)");
  flag(sx, "batch-size", ex.batch_size, "Mini-batch size")->capture_default_str();
  flag(sx, "max-len", ex.max_len, "Encoded sequence length")->capture_default_str();
  flag(sx, "dropout", ex.dropout, "Dropout rate")->capture_default_str();
  flag(sx, "grid", ex.grid, "single or full")->capture_default_str();
  flag(sx, "synthetic-count", ex.synthetic_count, "Size of the synthetic corpus")->capture_default_str();
  flag(sx, "seed", ex.seed, "Seed of the split and of the first run")->capture_default_str();
  flag(sx, "out", ex.out, "Output directory")->capture_default_str();
  toggle(sx, "unweighted", ex.unweighted, "Use unit class weights");
  toggle(sx, "lenient", ex.lenient, "Skip invalid records instead of failing");

  ParamsArgs pa;
  auto* spa = app.add_subcommand("params", "Trainable parameter count per setting");
  flag(spa, "setting", pa.settings, "Comma list of settings (STL settings count three models)")
      ->capture_default_str();
  flag(spa, "vocab-size", pa.vocab_size, "Vocabulary size")->capture_default_str();

  ServeArgs sv;
  auto* ssv = app.add_subcommand("serve", "Serve a checkpoint over HTTP until interrupted");
  flag(ssv, "checkpoint", sv.checkpoint, "Checkpoint directory to serve");
  flag(ssv, "listen", sv.listen, "host:port to listen on")->capture_default_str();
  flag(ssv, "max-request-bytes", sv.max_request_bytes, "Largest accepted request body")
      ->capture_default_str();
  flag(ssv, "spell-dict", sv.spell_dict, "Word list for spelling correction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return {code == 0 ? kSuccess : kUsage, {}};
  }

  try {
    if (sp->parsed()) return cmd_prepare(prep, out, err);
    if (ss->parsed()) return cmd_stats(stats, out, err);
    if (sk->parsed()) return cmd_kappa(kappa, out, err);
    if (st->parsed()) return cmd_train(tr, out, err);
    if (se->parsed()) return cmd_evaluate(ev, out, err);
    if (sx->parsed()) return cmd_experiment(ex, out, err);
    if (spa->parsed()) return cmd_params(pa, out, err);
    if (ssv->parsed()) return cmd_serve(sv, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return {kUsage, {}};
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return {kUsage, {}};
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return {kData, {}};
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return {kRuntime, {}};
  }
  err << "error: no subcommand\n";
  return {kUsage, {}};
}

inline CommandOutcome run(const std::vector<std::string>& args, std::ostream& out = std::cout,
                          std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"revq"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace revq::cli
