#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "ctxseg/error.hpp"
#include "ctxseg/training.hpp"

namespace ctxseg {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'G', 'C', 'U', 'N'};

json model_json(const ModelConfig& m) {
  return json{{"classes", m.classes},
              {"patch", m.patch},
              {"token_side", m.token_side},
              {"hidden", m.hidden},
              {"gcn_layers", m.gcn_layers},
              {"aggregation", to_string(m.aggregation)},
              {"fusion", to_string(m.fusion)},
              {"fusion_layers", m.fusion_layers},
              {"heads", m.heads},
              {"feed_forward", m.feed_forward},
              {"stem_kernel", m.stem_kernel}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.classes = j.at("classes").get<std::size_t>();
  m.patch = j.at("patch").get<std::size_t>();
  m.token_side = j.at("token_side").get<std::size_t>();
  m.hidden = j.at("hidden").get<std::size_t>();
  m.gcn_layers = j.at("gcn_layers").get<std::size_t>();
  m.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
  m.fusion = parse_fusion(j.at("fusion").get<std::string>());
  m.fusion_layers = j.at("fusion_layers").get<std::size_t>();
  m.heads = j.at("heads").get<std::size_t>();
  m.feed_forward = j.at("feed_forward").get<bool>();
  m.stem_kernel = j.at("stem_kernel").get<std::size_t>();
  return m;
}

json config_json(const TrainConfig& c) {
  return json{{"model", model_json(c.model)},
              {"seed", c.seed},
              {"batch", c.batch},
              {"slides_per_step", c.slides_per_step},
              {"lr", c.lr},
              {"steps", c.steps},
              {"precision", to_string(c.precision)},
              {"granularity", c.granularity},
              {"freeze_featurizer", c.freeze_featurizer},
              {"node_loss_weight", c.node_loss_weight}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.model = model_from_json(j.at("model"));
  c.seed = j.at("seed").get<std::uint64_t>();
  c.batch = j.at("batch").get<std::size_t>();
  c.slides_per_step = j.at("slides_per_step").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.steps = j.at("steps").get<std::size_t>();
  c.precision = parse_precision(j.at("precision").get<std::string>());
  c.granularity = j.at("granularity").get<std::size_t>();
  c.freeze_featurizer = j.at("freeze_featurizer").get<bool>();
  c.node_loss_weight = j.at("node_loss_weight").get<double>();
  return c;
}

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t offset) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return value;
}

}  // namespace

std::string to_json(const TrainConfig& config, int indent) { return config_json(config).dump(indent); }

TrainConfig train_config_from_json(const std::string& text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed training config: ") + e.what());
  }
}

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : checkpoint.params) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  }
  const json header{{"config", config_json(checkpoint.config)},
                    {"step", checkpoint.step},
                    {"final_loss", checkpoint.final_loss},
                    {"tensors", tensors},
                    {"payload_bytes", offset}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, Checkpoint::kVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : checkpoint.params) {
    for (const float v : t.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  constexpr std::size_t kFixed = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < kFixed) throw FormatError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw FormatError("checkpoint has bad magic bytes");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != Checkpoint::kVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(Checkpoint::kVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kFixed) throw FormatError("checkpoint header truncated");

  Checkpoint c;
  std::uint64_t payload_bytes = 0;
  json tensors;
  try {
    const json header = json::parse(bytes.substr(kFixed, header_len));
    c.config = config_from_json(header.at("config"));
    c.step = header.at("step").get<std::uint64_t>();
    c.final_loss = header.at("final_loss").get<double>();
    payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    tensors = header.at("tensors");
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  }
  const std::size_t base = kFixed + header_len;
  if (bytes.size() - base != payload_bytes) {
    throw FormatError("checkpoint payload has " + std::to_string(bytes.size() - base) + " bytes, header declares " +
                      std::to_string(payload_bytes));
  }
  for (const auto& entry : tensors) {
    const auto name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    Tensor<float> t(shape);
    if (offset + t.size() * sizeof(float) > payload_bytes) {
      throw FormatError("checkpoint tensor '" + name + "' extends past the payload");
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      t.data()[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, base + offset + i * sizeof(float)));
    }
    c.params.emplace(name, std::move(t));
  }
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace ctxseg
