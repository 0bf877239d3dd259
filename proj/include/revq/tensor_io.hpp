#pragma once

// Named-tensor payloads and their JSON manifests.
//
// A checkpoint directory holds:
//   manifest.json  architecture, dimensions, tensor table, payload digests
//   tensors.bin    little-endian tensors back to back (dtype from manifest)
//   vocab.txt      optional; the vocabulary the model was trained with

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "encoder.hpp"

namespace revq {

static_assert(std::endian::native == std::endian::little, "payload I/O assumes little-endian");

inline constexpr std::string_view kManifestFile = "manifest.json";
inline constexpr std::string_view kPayloadFile = "tensors.bin";
inline constexpr std::string_view kVocabFile = "vocab.txt";
inline constexpr int kCheckpointFormatVersion = 1;

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw CheckpointError("SHA-256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return os.str();
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline nlohmann::json spec_to_json(const EncoderSpec& s) {
  return {{"family", family_name(s.family)},
          {"hidden_size", s.hidden_size},
          {"vocab_size", s.vocab_size},
          {"layer_count", s.layer_count},
          {"head_count", s.head_count},
          {"ffn_size", s.ffn_size},
          {"max_positions", s.max_positions},
          {"token_type_embeddings", s.token_type_embeddings},
          {"pooler", s.pooler},
          {"dropout", s.dropout}};
}

inline EncoderSpec spec_from_json(const nlohmann::json& j) {
  EncoderSpec s;
  const auto family = parse_family(j.at("family").get<std::string>());
  if (!family) throw CheckpointError("unknown encoder family " + j.at("family").dump());
  s.family = *family;
  s.hidden_size = j.at("hidden_size").get<std::size_t>();
  s.vocab_size = j.at("vocab_size").get<std::size_t>();
  s.layer_count = j.at("layer_count").get<std::size_t>();
  s.head_count = j.at("head_count").get<std::size_t>();
  s.ffn_size = j.at("ffn_size").get<std::size_t>();
  s.max_positions = j.at("max_positions").get<std::size_t>();
  s.token_type_embeddings = j.at("token_type_embeddings").get<bool>();
  s.pooler = j.at("pooler").get<bool>();
  s.dropout = j.value("dropout", 0.1);
  return s;
}

struct TensorEntry {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::size_t offset = 0;  // bytes into the payload
};

/// Parsed manifest plus its exact bytes (the model version hashes those).
struct Manifest {
  nlohmann::json json;
  std::string bytes;
  std::vector<TensorEntry> tensors;
  std::size_t element_size = 8;

  static Manifest read(const std::filesystem::path& dir) {
    Manifest m;
    m.bytes = read_file(dir / kManifestFile);
    try {
      m.json = nlohmann::json::parse(m.bytes);
      if (m.json.at("format_version").get<int>() != kCheckpointFormatVersion) {
        throw CheckpointError("unsupported checkpoint format_version " +
                              m.json.at("format_version").dump());
      }
      const auto dtype = m.json.at("dtype").get<std::string>();
      if (dtype == "float64") {
        m.element_size = 8;
      } else if (dtype == "float32") {
        m.element_size = 4;
      } else {
        throw CheckpointError("unsupported dtype " + dtype);
      }
      for (const auto& t : m.json.at("tensors")) {
        const auto& shape = t.at("shape");
        if (shape.size() != 2) throw CheckpointError("tensor shapes must be 2-D");
        m.tensors.push_back({t.at("name").get<std::string>(), shape[0].get<Eigen::Index>(),
                             shape[1].get<Eigen::Index>(), t.at("offset").get<std::size_t>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("invalid manifest: ") + e.what());
    }
    return m;
  }

  std::string version() const { return sha256_hex(bytes).substr(0, 16); }
};

/// Reads and integrity-checks the payload, returning tensors by name.
inline std::unordered_map<std::string, nn::Matrix> read_payload(const std::filesystem::path& dir,
                                                                 const Manifest& m) {
  const std::string payload_name = m.json.value("payload", std::string(kPayloadFile));
  const std::string payload = read_file(dir / payload_name);
  if (m.json.contains("payload_sha256") &&
      sha256_hex(payload) != m.json.at("payload_sha256").get<std::string>()) {
    throw CheckpointError("payload digest mismatch: " + (dir / payload_name).string() +
                          " is corrupt");
  }
  std::unordered_map<std::string, nn::Matrix> out;
  for (const auto& t : m.tensors) {
    const std::size_t count = static_cast<std::size_t>(t.rows * t.cols);
    if (t.offset + count * m.element_size > payload.size()) {
      throw CheckpointError("tensor " + t.name + " extends past the end of the payload");
    }
    nn::Matrix mat(t.rows, t.cols);
    const char* src = payload.data() + t.offset;
    if (m.element_size == 8) {
      std::memcpy(mat.data(), src, count * 8);
    } else {
      for (std::size_t i = 0; i < count; ++i) {
        float f = 0;
        std::memcpy(&f, src + i * 4, 4);
        mat.data()[i] = f;
      }
    }
    out.emplace(t.name, std::move(mat));
  }
  return out;
}

/// Appends tensors to a payload and records their table entries.
class PayloadWriter {
 public:
  void add(const nn::Param& p) {
    if (!p.allocated()) throw CheckpointError("tensor " + p.name + " is not materialized");
    entries_.push_back({{"name", p.name}, {"shape", {p.rows, p.cols}}, {"offset", bytes_.size()}});
    bytes_.append(reinterpret_cast<const char*>(p.value.data()), p.size() * sizeof(double));
  }
  const std::string& bytes() const { return bytes_; }
  nlohmann::json table() const { return entries_; }

 private:
  std::string bytes_;
  nlohmann::json entries_ = nlohmann::json::array();
};

/// Initializes an encoder from a checkpoint directory. Every architecture
/// dimension must agree with the encoder's spec.
inline void load_encoder_weights(Encoder& encoder, const std::filesystem::path& dir) {
  const Manifest m = Manifest::read(dir);
  EncoderSpec stored;
  try {
    stored = spec_from_json(m.json.at("encoder"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("manifest lacks encoder description: ") + e.what());
  }
  const EncoderSpec& want = encoder.spec();
  auto check = [](const char* what, std::size_t have, std::size_t need) {
    if (have != need) {
      throw ModelConstructionError(std::string("checkpoint ") + what + " is " +
                                   std::to_string(have) + ", architecture expects " +
                                   std::to_string(need));
    }
  };
  if (stored.family != want.family) {
    throw ModelConstructionError("checkpoint family is " + std::string(family_name(stored.family)) +
                                 ", architecture expects " + std::string(family_name(want.family)));
  }
  check("hidden_size", stored.hidden_size, want.hidden_size);
  check("vocab_size", stored.vocab_size, want.vocab_size);
  check("layer_count", stored.layer_count, want.layer_count);
  check("head_count", stored.head_count, want.head_count);
  check("ffn_size", stored.ffn_size, want.ffn_size);
  check("max_positions", stored.max_positions, want.max_positions);
  check("token_type_embeddings", stored.token_type_embeddings, want.token_type_embeddings);
  check("pooler", stored.pooler, want.pooler);

  auto tensors = read_payload(dir, m);
  encoder.visit([&](nn::Param& p) {
    const auto it = tensors.find(p.name);
    if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor " + p.name);
    if (it->second.rows() != p.rows || it->second.cols() != p.cols) {
      throw ModelConstructionError("tensor " + p.name + " has shape " +
                                   std::to_string(it->second.rows()) + "x" +
                                   std::to_string(it->second.cols()) + ", expected " +
                                   std::to_string(p.rows) + "x" + std::to_string(p.cols));
    }
    p.value = std::move(it->second);
    p.grad = nn::Matrix::Zero(p.rows, p.cols);
  });
}

}  // namespace revq
