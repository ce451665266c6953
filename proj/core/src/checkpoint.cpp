// SPDX-License-Identifier: Apache-2.0
#include "vtr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace vtr {

namespace {

constexpr char kCkptMagic[8] = {'V', 'T', 'C', 'K', 'P', 'T', '0', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

struct Reader {
  std::ifstream in;
  std::size_t offset = 0;

  explicit Reader(const std::filesystem::path& path)
      : in(path, std::ios::binary) {
    if (!in) throw IoError(str("checkpoint: cannot open ", path.string()));
  }
  void bytes(void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
      throw IoError(str("checkpoint: truncated at offset ", offset));
    }
    offset += n;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
};

nlohmann::json config_record(const ModelConfig& c, const AblationFlags& f) {
  return nlohmann::json{
      {"frame_h", c.frame_h},
      {"frame_w", c.frame_w},
      {"patch", c.patch},
      {"n_frames", c.n_frames},
      {"n_tokens", c.n_tokens},
      {"vocab", c.vocab},
      {"d_video", c.d_video},
      {"d_text", c.d_text},
      {"d_shared", c.d_shared},
      {"heads", c.heads},
      {"mlp_ratio", c.mlp_ratio},
      {"video_layers", c.video_layers},
      {"text_layers", c.text_layers},
      {"temporal_layers", c.temporal_layers},
      {"fusion_layers", c.fusion_layers},
      {"flags",
       {{"temporal", f.temporal},
        {"distill", f.distill},
        {"fusion", f.fusion},
        {"dual_softmax", f.dual_softmax}}}};
}

void parse_config_record(const nlohmann::json& j, ModelConfig& c,
                         AblationFlags& f) {
  try {
    c.frame_h = j.at("frame_h").get<std::size_t>();
    c.frame_w = j.at("frame_w").get<std::size_t>();
    c.patch = j.at("patch").get<std::size_t>();
    c.n_frames = j.at("n_frames").get<std::size_t>();
    c.n_tokens = j.at("n_tokens").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.d_video = j.at("d_video").get<std::size_t>();
    c.d_text = j.at("d_text").get<std::size_t>();
    c.d_shared = j.at("d_shared").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.video_layers = j.at("video_layers").get<std::size_t>();
    c.text_layers = j.at("text_layers").get<std::size_t>();
    c.temporal_layers = j.at("temporal_layers").get<std::size_t>();
    c.fusion_layers = j.at("fusion_layers").get<std::size_t>();
    const auto& flags = j.at("flags");
    f.temporal = flags.at("temporal").get<bool>();
    f.distill = flags.at("distill").get<bool>();
    f.fusion = flags.at("fusion").get<bool>();
    f.dual_softmax = flags.at("dual_softmax").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(str("checkpoint: bad config record: ", e.what()));
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const ModelState& state, const AblationFlags& flags) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(str("checkpoint: cannot write ", path.string()));
  out.write(kCkptMagic, sizeof(kCkptMagic));
  write_u32(out, 1);  // format version
  const std::string config = config_record(state.config, flags).dump();
  write_u64(out, config.size());
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  const auto params = state.named_parameters();
  write_u64(out, params.size());
  for (const auto& [name, tensor] : params) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) write_u64(out, d);
    for (double v : tensor.values()) {
      write_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  if (!out) throw IoError(str("checkpoint: write failed for ", path.string()));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 bool requires_grad) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCkptMagic, 8) != 0) {
    throw IoError("checkpoint: bad magic at offset 0");
  }
  const std::uint32_t version = r.u32();
  if (version != 1) {
    throw IoError(str("checkpoint: unsupported format version ", version));
  }
  const std::uint64_t config_len = r.u64();
  std::string config(config_len, '\0');
  r.bytes(config.data(), config_len);
  ModelConfig model_config;
  AblationFlags flags;
  nlohmann::json j = nlohmann::json::parse(config, nullptr, false);
  if (j.is_discarded()) throw IoError("checkpoint: config record is not JSON");
  parse_config_record(j, model_config, flags);

  LoadedCheckpoint loaded{ModelState::init(model_config, 0, requires_grad),
                          flags};
  auto params = loaded.state.named_parameters();
  const std::uint64_t count = r.u64();
  if (count != params.size()) {
    throw IoError(str("checkpoint: ", count, " parameter entries, expected ",
                      params.size()));
  }
  for (auto& [name, tensor] : params) {
    const std::uint32_t name_len = r.u32();
    std::string entry(name_len, '\0');
    r.bytes(entry.data(), name_len);
    if (entry != name) {
      throw IoError(str("checkpoint: parameter '", entry, "', expected '",
                        name, "'"));
    }
    const std::uint32_t rank = r.u32();
    Shape dims(rank);
    for (auto& d : dims) d = r.u64();
    if (dims != tensor.shape()) {
      throw IoError(str("checkpoint: parameter '", name, "' has shape ",
                        shape_str(dims), ", expected ",
                        shape_str(tensor.shape())));
    }
    auto& values = tensor.mutable_values();
    for (double& v : values) v = std::bit_cast<double>(r.u64());
  }
  return loaded;
}

}  // namespace vtr
