// SPDX-License-Identifier: Apache-2.0
#include "vtr/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace vtr::data {

namespace {

constexpr char kDataMagic[8] = {'V', 'T', 'D', 'A', 'T', 'A', '0', '1'};
constexpr double kPi = 3.14159265358979323846;
constexpr double kMinConceptDistance = 1.0;
constexpr double kMinClassificationAccuracy = 0.99;

// two interchangeable surface forms per attribute value
const char* const kAngleWords[kAngleValues][2] = {
    {"flat", "level"},     {"tilted", "slanted"}, {"diagonal", "oblique"},
    {"steep", "sharp"},    {"vertical", "upright"}, {"rising", "climbing"},
    {"falling", "dropping"}, {"leaning", "sloped"}};
const char* const kBlobWords[kBlobValues][2] = {
    {"one", "single"}, {"two", "twin"}, {"three", "triple"}, {"four", "quad"}};
const char* const kGradientWords[kGradientValues][2] = {
    {"dim", "dark"}, {"bright", "light"}, {"fading", "waning"},
    {"glowing", "radiant"}};

constexpr int kAngleBase = 3;
constexpr int kBlobBase = kAngleBase + 2 * static_cast<int>(kAngleValues);
constexpr int kGradientBase = kBlobBase + 2 * static_cast<int>(kBlobValues);
constexpr int kVocabSize = kGradientBase + 2 * static_cast<int>(kGradientValues);

struct Jitter {
  double phase = 0.0;
  double amp = 1.0;
  double dx = 0.0;
  double dy = 0.0;
};

// One pixel of the procedural pattern; frames drift smoothly in t. The
// components are low-frequency on purpose: they must stay visible after
// patch-level pooling, or the retrieval task is not learnable at the
// desk scale the overfit experiments run at.
double render_pixel(const ConceptSpec& c, const Jitter& j, std::size_t frame,
                    double x, double y, std::size_t h, std::size_t w) {
  const double t = static_cast<double>(frame);
  const double theta = kPi * static_cast<double>(c.angle) /
                       static_cast<double>(kAngleValues);
  const double u = x * std::cos(theta) + y * std::sin(theta);
  const double phase0 = 2.0 * kPi * 0.618 * static_cast<double>(c.concept_id);
  double v = 0.9 * std::sin(2.0 * kPi * u / 10.0 + phase0 + 0.6 * t + j.phase);

  const std::size_t blobs = c.blobs + 1;
  for (std::size_t bi = 0; bi < blobs; ++bi) {
    const double seed = 2.399 * static_cast<double>(bi) +
                        0.71 * static_cast<double>(c.concept_id);
    const double cx = (0.5 + 0.34 * std::sin(seed)) * static_cast<double>(w) +
                      j.dx + 0.5 * t * std::cos(seed);
    const double cy =
        (0.5 + 0.34 * std::cos(1.3 * seed)) * static_cast<double>(h) + j.dy +
        0.5 * t * std::sin(1.1 * seed);
    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
    v += 1.5 * std::exp(-d2 / (2.0 * 2.6 * 2.6));
  }

  // intensity family: dim/bright shift the base level, fading/glowing
  // ramp along the diagonal with opposite signs
  const double span = static_cast<double>(w + h) * 0.5;
  const double diag = (x + y) / span - 1.0;  // roughly [-1, 1]
  switch (c.gradient) {
    case 0: v -= 1.0; break;
    case 1: v += 1.0; break;
    case 2: v -= 2.2 * diag; break;
    default: v += 2.2 * diag; break;
  }

  return 0.5 + 0.5 * std::tanh(0.8 * j.amp * v);
}

std::vector<double> render_video(const ConceptSpec& c, const Jitter& j,
                                 const GenerateSpec& spec) {
  std::vector<double> out;
  out.reserve(spec.n_frames * spec.height * spec.width);
  for (std::size_t f = 0; f < spec.n_frames; ++f) {
    for (std::size_t y = 0; y < spec.height; ++y) {
      for (std::size_t x = 0; x < spec.width; ++x) {
        out.push_back(render_pixel(c, j, f, static_cast<double>(x),
                                   static_cast<double>(y), spec.height,
                                   spec.width));
      }
    }
  }
  return out;
}

std::vector<int> make_caption(const ConceptSpec& c, std::size_t n_tokens,
                              Rng& rng) {
  std::vector<int> caption;
  caption.reserve(n_tokens);
  caption.push_back(kBosToken);
  caption.push_back(kBlobBase + 2 * static_cast<int>(c.blobs) +
                    static_cast<int>(rng.index(2)));
  caption.push_back(kAngleBase + 2 * static_cast<int>(c.angle) +
                    static_cast<int>(rng.index(2)));
  caption.push_back(kGradientBase + 2 * static_cast<int>(c.gradient) +
                    static_cast<int>(rng.index(2)));
  caption.push_back(kEosToken);
  while (caption.size() < n_tokens) caption.push_back(kPadToken);
  return caption;
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

const std::vector<std::string>& builtin_vocab() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v{"<pad>", "<bos>", "<eos>"};
    for (std::size_t a = 0; a < kAngleValues; ++a) {
      v.emplace_back(kAngleWords[a][0]);
      v.emplace_back(kAngleWords[a][1]);
    }
    for (std::size_t b = 0; b < kBlobValues; ++b) {
      v.emplace_back(kBlobWords[b][0]);
      v.emplace_back(kBlobWords[b][1]);
    }
    for (std::size_t g = 0; g < kGradientValues; ++g) {
      v.emplace_back(kGradientWords[g][0]);
      v.emplace_back(kGradientWords[g][1]);
    }
    return v;
  }();
  return vocab;
}

std::size_t builtin_vocab_size() { return builtin_vocab().size(); }

// Concept ids walk the attribute grid with a stride coprime to its size,
// so any prefix of ids already spans all angle, count and intensity
// families instead of exhausting one axis first.
namespace {
constexpr std::size_t kAttributeStride = 37;   // odd, coprime to 128
constexpr std::size_t kAttributeStrideInv = 45;  // 37 * 45 = 1 (mod 128)
}  // namespace

ConceptSpec ConceptSpec::from_id(int concept_id) {
  if (concept_id < 0 || static_cast<std::size_t>(concept_id) >= kMaxConcepts) {
    throw DomainError(str("concept id ", concept_id, " outside [0, ",
                          kMaxConcepts, ")"));
  }
  ConceptSpec c;
  c.concept_id = concept_id;
  const std::size_t cell =
      (static_cast<std::size_t>(concept_id) * kAttributeStride) % kMaxConcepts;
  c.angle = cell % kAngleValues;
  c.blobs = (cell / kAngleValues) % kBlobValues;
  c.gradient = (cell / (kAngleValues * kBlobValues)) % kGradientValues;
  return c;
}

void GenerateSpec::validate() const {
  if (concepts < 2) throw ConfigError("data: need at least 2 concepts");
  if (concepts > kMaxConcepts) {
    throw ConfigError(str("data: at most ", kMaxConcepts,
                          " distinct concepts, asked for ", concepts));
  }
  if (per_concept < 1) throw ConfigError("data: per_concept must be >= 1");
  if (n_frames < 1) throw ConfigError("data: n_frames must be >= 1");
  if (n_tokens < 6) {
    throw ConfigError("data: n_tokens must be >= 6 to fit the caption "
                      "template");
  }
  if (height < 4 || width < 4) throw ConfigError("data: frames too small");
  if (jitter < 0.0 || jitter > 0.5) {
    throw ConfigError(str("data: jitter ", jitter, " outside [0, 0.5]"));
  }
}

Dataset generate(const GenerateSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset ds;
  ds.n_frames = spec.n_frames;
  ds.n_tokens = spec.n_tokens;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.vocab = builtin_vocab_size();
  ds.concepts = spec.concepts;
  ds.vocab_words = builtin_vocab();
  ds.samples.reserve(spec.concepts * spec.per_concept);
  std::size_t index = 0;
  for (std::size_t c = 0; c < spec.concepts; ++c) {
    const ConceptSpec cs = ConceptSpec::from_id(static_cast<int>(c));
    for (std::size_t s = 0; s < spec.per_concept; ++s, ++index) {
      Rng rng(mix_seed(seed, index));
      Jitter j;
      j.phase = rng.uniform(-1.0, 1.0) * spec.jitter * 2.0 * kPi;
      j.amp = 1.0 + rng.uniform(-1.0, 1.0) * spec.jitter;
      j.dx = rng.uniform(-1.0, 1.0) * spec.jitter * 4.0;
      j.dy = rng.uniform(-1.0, 1.0) * spec.jitter * 4.0;
      Sample sample;
      sample.video = render_video(cs, j, spec);
      sample.caption = make_caption(cs, spec.n_tokens, rng);
      sample.concept_id = cs.concept_id;
      ds.samples.push_back(std::move(sample));
    }
  }
  const DatasetValidation v = validate_dataset(ds);
  if (v.min_concept_distance < kMinConceptDistance) {
    throw DomainError(str("data: concept separation ", v.min_concept_distance,
                          " below floor ", kMinConceptDistance));
  }
  if (v.classification_accuracy < kMinClassificationAccuracy) {
    throw DomainError(str("data: template classification accuracy ",
                          v.classification_accuracy, " below ",
                          kMinClassificationAccuracy));
  }
  if (!v.captions_unambiguous) {
    throw DomainError("data: ambiguous caption detected");
  }
  return ds;
}

DatasetValidation validate_dataset(const Dataset& ds) {
  DatasetValidation out;
  GenerateSpec spec;
  spec.concepts = ds.concepts;
  spec.per_concept = 1;
  spec.n_frames = ds.n_frames;
  spec.n_tokens = ds.n_tokens;
  spec.height = ds.height;
  spec.width = ds.width;

  // jitter-free canonical render per concept
  std::vector<std::vector<double>> canonical(ds.concepts);
  for (std::size_t c = 0; c < ds.concepts; ++c) {
    canonical[c] = render_video(ConceptSpec::from_id(static_cast<int>(c)),
                                Jitter{}, spec);
  }
  out.min_concept_distance = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < ds.concepts; ++a) {
    for (std::size_t b = a + 1; b < ds.concepts; ++b) {
      out.min_concept_distance = std::min(
          out.min_concept_distance, l2_distance(canonical[a], canonical[b]));
    }
  }

  std::size_t correct = 0;
  out.captions_unambiguous = true;
  for (const Sample& s : ds.samples) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < ds.concepts; ++c) {
      const double d = l2_distance(s.video, canonical[c]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (static_cast<int>(best) == s.concept_id) ++correct;
    if (decode_caption(s.caption) != s.concept_id) {
      out.captions_unambiguous = false;
    }
  }
  out.classification_accuracy =
      ds.samples.empty()
          ? 1.0
          : static_cast<double>(correct) / static_cast<double>(ds.size());
  return out;
}

int decode_caption(std::span<const int> caption) {
  int angle = -1, blobs = -1, gradient = -1;
  bool seen_eos = false;
  for (int tok : caption) {
    if (seen_eos) {
      if (tok != kPadToken) {
        throw DomainError("caption: token after EOS");
      }
      continue;
    }
    if (tok == kBosToken) continue;
    if (tok == kEosToken) {
      seen_eos = true;
      continue;
    }
    if (tok >= kAngleBase && tok < kBlobBase) {
      if (angle >= 0) throw DomainError("caption: duplicate angle word");
      angle = (tok - kAngleBase) / 2;
    } else if (tok >= kBlobBase && tok < kGradientBase) {
      if (blobs >= 0) throw DomainError("caption: duplicate count word");
      blobs = (tok - kBlobBase) / 2;
    } else if (tok >= kGradientBase && tok < kVocabSize) {
      if (gradient >= 0) throw DomainError("caption: duplicate gradient word");
      gradient = (tok - kGradientBase) / 2;
    } else {
      throw DomainError(str("caption: unknown token ", tok));
    }
  }
  if (!seen_eos || angle < 0 || blobs < 0 || gradient < 0) {
    throw DomainError("caption: incomplete template");
  }
  const std::size_t cell =
      static_cast<std::size_t>(angle) +
      kAngleValues * (static_cast<std::size_t>(blobs) +
                      kBlobValues * static_cast<std::size_t>(gradient));
  return static_cast<int>((cell * kAttributeStrideInv) % kMaxConcepts);
}

std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size,
                           std::uint64_t epoch_seed, bool shuffle) {
  if (batch_size == 0 || batch_size > ds.size()) {
    throw ConfigError(str("batches: batch size ", batch_size,
                          " vs dataset size ", ds.size()));
  }
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) {
    Rng rng(epoch_seed);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.index(i)]);
    }
  }
  const std::size_t count = ds.size() / batch_size;  // partial tail dropped
  std::vector<Batch> out;
  out.reserve(count);
  for (std::size_t b = 0; b < count; ++b) {
    Batch batch;
    batch.indices.assign(order.begin() + b * batch_size,
                         order.begin() + (b + 1) * batch_size);
    batch.masks.reserve(batch_size);
    for (std::size_t idx : batch.indices) {
      const auto& caption = ds.samples[idx].caption;
      std::vector<std::uint8_t> mask(caption.size());
      for (std::size_t t = 0; t < caption.size(); ++t) {
        mask[t] = caption[t] != kPadToken;
      }
      batch.masks.push_back(std::move(mask));
    }
    out.push_back(std::move(batch));
  }
  return out;
}

namespace {

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
    if (!in) throw IoError(str("dataset: cannot open ", path.string()));
  }
  void bytes(void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
      throw IoError(str("dataset: truncated at offset ", offset));
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
  double f64() { return std::bit_cast<double>(u64()); }
};

}  // namespace

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(str("dataset: cannot write ", path.string()));
  out.write(kDataMagic, sizeof(kDataMagic));
  write_u32(out, 1);  // format version
  write_u32(out, static_cast<std::uint32_t>(ds.n_frames));
  write_u32(out, static_cast<std::uint32_t>(ds.n_tokens));
  write_u32(out, static_cast<std::uint32_t>(ds.height));
  write_u32(out, static_cast<std::uint32_t>(ds.width));
  write_u32(out, static_cast<std::uint32_t>(ds.vocab));
  write_u32(out, static_cast<std::uint32_t>(ds.concepts));
  write_u64(out, ds.samples.size());
  write_u32(out, static_cast<std::uint32_t>(ds.vocab_words.size()));
  for (const std::string& w : ds.vocab_words) {
    write_u32(out, static_cast<std::uint32_t>(w.size()));
    out.write(w.data(), static_cast<std::streamsize>(w.size()));
  }
  for (const Sample& s : ds.samples) {
    write_u32(out, static_cast<std::uint32_t>(s.concept_id));
    for (int tok : s.caption) write_u32(out, static_cast<std::uint32_t>(tok));
    for (double v : s.video) write_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw IoError(str("dataset: write failed for ", path.string()));
}

Dataset load_dataset(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kDataMagic, 8) != 0) {
    throw IoError("dataset: bad magic at offset 0");
  }
  const std::uint32_t version = r.u32();
  if (version != 1) {
    throw IoError(str("dataset: unsupported format version ", version));
  }
  Dataset ds;
  ds.n_frames = r.u32();
  ds.n_tokens = r.u32();
  ds.height = r.u32();
  ds.width = r.u32();
  ds.vocab = r.u32();
  ds.concepts = r.u32();
  const std::uint64_t count = r.u64();
  const std::uint32_t words = r.u32();
  ds.vocab_words.reserve(words);
  for (std::uint32_t i = 0; i < words; ++i) {
    const std::uint32_t len = r.u32();
    std::string w(len, '\0');
    r.bytes(w.data(), len);
    ds.vocab_words.push_back(std::move(w));
  }
  const std::size_t pixels = ds.n_frames * ds.height * ds.width;
  ds.samples.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Sample s;
    s.concept_id = static_cast<int>(r.u32());
    s.caption.resize(ds.n_tokens);
    for (auto& tok : s.caption) tok = static_cast<int>(r.u32());
    s.video.resize(pixels);
    for (auto& v : s.video) v = r.f64();
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace vtr::data
