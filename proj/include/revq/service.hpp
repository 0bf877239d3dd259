#pragma once

// Scoring service: cleans and encodes a comment, runs the served model in
// inference mode, reports per-feature probabilities and revision advice.
// The served model is an immutable snapshot swapped under a short lock;
// scoring itself runs without locks on whichever snapshot it grabbed.

#include <array>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "common.hpp"
#include "corpus.hpp"
#include "model.hpp"
#include "textprep.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a _res macro.
#ifndef CPPHTTPLIB_LISTEN_BACKLOG
#define CPPHTTPLIB_LISTEN_BACKLOG 128
#endif
#include <httplib.h>

namespace revq::service {

inline constexpr std::array<std::string_view, kTaskCount> kAdvice{
    "add a concrete suggestion", "point out a specific problem", "consider a more positive tone"};

inline constexpr std::size_t kDefaultMaxRequestBytes = 10 * 1024;

/// Text that cannot be scored (empty or without any letter or digit).
class InputError : public DataError {
 public:
  using DataError::DataError;
};

/// No model is loaded.
class UnavailableError : public std::runtime_error {
 public:
  UnavailableError() : std::runtime_error("no model loaded") {}
};

struct TaskScore {
  double probability = 0.0;  // class 1
  int decision = 0;

  friend bool operator==(const TaskScore&, const TaskScore&) = default;
};

inline int decide(double probability) { return probability >= 0.5 ? 1 : 0; }

/// One advice string per feature whose decision is 0, in task order.
inline std::vector<std::string> advise(const std::array<int, kTaskCount>& decisions) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < kTaskCount; ++i) {
    if (decisions[i] == 0) out.emplace_back(kAdvice[i]);
  }
  return out;
}

struct Assessment {
  std::array<TaskScore, kTaskCount> scores{};
  std::vector<std::string> advice;
  std::string model_version;
  std::string cleaned_text;

  const TaskScore& operator[](Task t) const { return scores[task_index(t)]; }
  std::array<int, kTaskCount> decisions() const {
    return {scores[0].decision, scores[1].decision, scores[2].decision};
  }

  friend bool operator==(const Assessment&, const Assessment&) = default;
};

inline nlohmann::ordered_json to_json(const Assessment& a) {
  nlohmann::ordered_json j;
  for (Task t : kAllTasks) {
    j[std::string(task_name(t))] = {{"probability", a[t].probability}, {"decision", a[t].decision}};
  }
  j["advice"] = a.advice;
  j["model_version"] = a.model_version;
  j["cleaned_text"] = a.cleaned_text;
  return j;
}

class ScoringService {
 public:
  explicit ScoringService(std::shared_ptr<const SpellCorrector> corrector =
                              std::make_shared<IdentityCorrector>())
      : corrector_(std::move(corrector)) {}

  /// Loads a checkpoint and swaps it in. On any error the current model
  /// stays live and the error propagates.
  std::string load_model(const std::filesystem::path& dir) {
    auto loaded = std::make_shared<const LoadedModel>(load_checkpoint(dir));
    return install(std::move(loaded));
  }

  std::string install(std::shared_ptr<const LoadedModel> model) {
    if (model->model.tasks().size() != kTaskCount) {
      throw CheckpointError("the service needs a model with all three task heads");
    }
    std::string version = model->version;
    std::lock_guard lock(mutex_);
    model_ = std::move(model);
    return version;
  }

  void unload() {
    std::lock_guard lock(mutex_);
    model_.reset();
  }

  std::shared_ptr<const LoadedModel> snapshot() const {
    std::lock_guard lock(mutex_);
    return model_;
  }

  Assessment score_comment(std::string_view text) const {
    if (text.empty() || is_symbol_only(text)) {
      throw InputError("comment needs readable text");
    }
    const auto model = snapshot();
    if (!model) throw UnavailableError();
    std::string cleaned;
    try {
      cleaned = clean_text(text, *corrector_);
    } catch (const UnusableTextError&) {
      throw InputError("comment needs readable text");
    }
    const EncodedExample ex = encode(cleaned, model->vocab, model->model.max_len());
    const TaskLogits logits = model->model.forward(std::span(&ex, 1));

    Assessment a;
    for (Task t : kAllTasks) {
      const auto& l = logits[t];
      const double p = positive_probability(l(0, 0), l(0, 1));
      a.scores[task_index(t)] = {p, decide(p)};
    }
    a.advice = advise(a.decisions());
    a.model_version = model->version;
    a.cleaned_text = std::move(cleaned);
    return a;
  }

 private:
  std::shared_ptr<const SpellCorrector> corrector_;
  mutable std::mutex mutex_;
  std::shared_ptr<const LoadedModel> model_;
};

// HTTP front end ----------------------------------------------------------------

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::size_t max_request_bytes = kDefaultMaxRequestBytes;
};

/// host:port, ":port" or a bare port.
inline ServerOptions parse_listen(std::string_view listen, ServerOptions base = {}) {
  const auto colon = listen.rfind(':');
  std::string_view host = colon == std::string_view::npos ? std::string_view{} : listen.substr(0, colon);
  std::string_view port = colon == std::string_view::npos ? listen : listen.substr(colon + 1);
  if (!host.empty()) base.host = std::string(host);
  try {
    std::size_t used = 0;
    const int p = std::stoi(std::string(port), &used);
    if (used != port.size() || p < 0 || p > 65535) throw std::invalid_argument("port");
    base.port = p;
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid listen address '" + std::string(listen) + "'");
  }
  return base;
}

class HttpServer {
 public:
  HttpServer(ScoringService& service, ServerOptions options)
      : service_(service), options_(std::move(options)) {
    server_.Post("/assess", [this](const httplib::Request& req, httplib::Response& res) {
      assess(req, res);
    });
    server_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      const auto model = service_.snapshot();
      nlohmann::ordered_json j;
      j["status"] = "ok";
      j["model_version"] = model ? nlohmann::ordered_json(model->version) : nullptr;
      reply(res, 200, j);
    });
    server_.Get("/model-info", [this](const httplib::Request&, httplib::Response& res) {
      const auto model = service_.snapshot();
      if (!model) return reply(res, 503, {{"error", "no model loaded"}});
      nlohmann::ordered_json j;
      j["encoder_family"] = family_name(model->model.encoder().spec().family);
      j["parameter_count"] = count_parameters(model->model);
      j["max_len"] = model->model.max_len();
      j["model_version"] = model->version;
      reply(res, 200, j);
    });
  }

  /// Binds the socket; returns the bound port.
  int bind() {
    if (options_.port == 0) {
      port_ = server_.bind_to_any_port(options_.host);
    } else if (server_.bind_to_port(options_.host, options_.port)) {
      port_ = options_.port;
    } else {
      port_ = -1;
    }
    if (port_ < 0) {
      throw std::runtime_error("cannot listen on " + options_.host + ":" +
                               std::to_string(options_.port));
    }
    return port_;
  }

  /// Blocks until stop().
  void serve() { server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }
  int port() const { return port_; }

 private:
  static void reply(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json; charset=utf-8");
  }

  void assess(const httplib::Request& req, httplib::Response& res) {
    if (req.body.size() > options_.max_request_bytes) {
      return reply(res, 413, {{"error", "request exceeds " +
                                            std::to_string(options_.max_request_bytes) + " bytes"}});
    }
    std::string text;
    try {
      const auto body = nlohmann::json::parse(req.body);
      if (!body.is_object() || !body.contains("text") || !body["text"].is_string()) {
        return reply(res, 400, {{"error", "body must be a JSON object with a string 'text'"}});
      }
      text = body["text"].get<std::string>();
    } catch (const nlohmann::json::exception&) {
      return reply(res, 400, {{"error", "body is not valid JSON"}});
    }
    try {
      reply(res, 200, to_json(service_.score_comment(text)));
    } catch (const InputError& e) {
      reply(res, 400, {{"error", e.what()}});
    } catch (const UnavailableError& e) {
      reply(res, 503, {{"error", e.what()}});
    }
  }

  ScoringService& service_;
  ServerOptions options_;
  httplib::Server server_;
  int port_ = -1;
};

}  // namespace revq::service
