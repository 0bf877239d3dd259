#pragma once

// Whole-model checkpoints: encoder + heads + vocabulary.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "model.hpp"
#include "tensor_io.hpp"
#include "textprep.hpp"

namespace revq {

struct LoadedModel {
  ModelHandle model;
  Vocabulary vocab;
  std::string version;
};

/// Writes manifest.json, tensors.bin and vocab.txt into `dir` (created if needed).
inline std::filesystem::path save_checkpoint(const std::filesystem::path& dir,
                                             const ModelHandle& model, const Vocabulary& vocab) {
  std::filesystem::create_directories(dir);
  PayloadWriter payload;
  model.visit([&](const nn::Param& p) { payload.add(p); });

  std::string vocab_bytes;
  for (const auto& t : vocab.tokens()) vocab_bytes += t + '\n';

  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  for (Task t : model.tasks()) tasks.push_back(task_name(t));

  nlohmann::ordered_json manifest;
  manifest["format"] = "revq-checkpoint";
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["encoder"] = spec_to_json(model.encoder().spec());
  manifest["tasks"] = tasks;
  manifest["max_len"] = model.max_len();
  manifest["head_dropout"] = model.head_dropout();
  manifest["dtype"] = "float64";
  manifest["payload"] = kPayloadFile;
  manifest["payload_sha256"] = sha256_hex(payload.bytes());
  manifest["vocab"] = kVocabFile;
  manifest["vocab_sha256"] = sha256_hex(vocab_bytes);
  manifest["tensors"] = payload.table();

  auto write = [&](std::string_view name, const std::string& bytes) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + (dir / name).string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + (dir / name).string());
  };
  write(kPayloadFile, payload.bytes());
  write(kVocabFile, vocab_bytes);
  write(kManifestFile, manifest.dump(2) + "\n");
  return dir;
}

/// Loads and validates a full checkpoint. Any inconsistency (digest, shape,
/// missing tensor, vocabulary size) is a CheckpointError.
inline LoadedModel load_checkpoint(const std::filesystem::path& dir) {
  const Manifest m = Manifest::read(dir);
  EncoderSpec spec;
  std::vector<Task> tasks;
  std::size_t max_len = 0;
  double head_dropout = 0.1;
  try {
    spec = spec_from_json(m.json.at("encoder"));
    for (const auto& t : m.json.at("tasks")) {
      const auto task = parse_task(t.get<std::string>());
      if (!task) throw CheckpointError("unknown task " + t.dump());
      tasks.push_back(*task);
    }
    max_len = m.json.at("max_len").get<std::size_t>();
    head_dropout = m.json.value("head_dropout", 0.1);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("invalid manifest: ") + e.what());
  }

  const std::string vocab_name = m.json.value("vocab", std::string(kVocabFile));
  const std::string vocab_bytes = read_file(dir / vocab_name);
  if (m.json.contains("vocab_sha256") &&
      sha256_hex(vocab_bytes) != m.json.at("vocab_sha256").get<std::string>()) {
    throw CheckpointError("vocabulary digest mismatch: " + (dir / vocab_name).string());
  }
  Vocabulary vocab;
  try {
    vocab = Vocabulary::load(dir / vocab_name);
  } catch (const DataError& e) {
    throw CheckpointError(std::string("invalid checkpoint vocabulary: ") + e.what());
  }
  if (vocab.size() != spec.vocab_size) {
    throw CheckpointError("vocabulary has " + std::to_string(vocab.size()) +
                          " tokens but the encoder expects " + std::to_string(spec.vocab_size));
  }

  ModelHandle model = [&] {
    try {
      return build_model(spec, tasks, 0,
                         {.max_len = max_len,
                          .head_dropout = head_dropout,
                          .allocation = Allocation::shape_only});
    } catch (const ModelConstructionError& e) {
      throw CheckpointError(std::string("manifest describes an invalid model: ") + e.what());
    }
  }();

  auto tensors = read_payload(dir, m);
  model.visit([&](nn::Param& p) {
    const auto it = tensors.find(p.name);
    if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor " + p.name);
    if (it->second.rows() != p.rows || it->second.cols() != p.cols) {
      throw CheckpointError("tensor " + p.name + " has the wrong shape");
    }
    p.value = std::move(it->second);
    p.grad = nn::Matrix::Zero(p.rows, p.cols);
  });
  return {std::move(model), std::move(vocab), m.version()};
}

}  // namespace revq
