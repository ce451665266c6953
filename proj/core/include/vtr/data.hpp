// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vtr/common.hpp"

namespace vtr::data {

// Concepts combine a stripe angle, a blob count and an intensity
// gradient; each attribute also carries the word ids that describe it.
inline constexpr std::size_t kAngleValues = 8;
inline constexpr std::size_t kBlobValues = 4;
inline constexpr std::size_t kGradientValues = 4;
inline constexpr std::size_t kMaxConcepts =
    kAngleValues * kBlobValues * kGradientValues;

const std::vector<std::string>& builtin_vocab();
std::size_t builtin_vocab_size();

struct ConceptSpec {
  int concept_id = 0;
  std::size_t angle = 0;     // [0, kAngleValues)
  std::size_t blobs = 0;     // [0, kBlobValues), count = blobs + 1
  std::size_t gradient = 0;  // [0, kGradientValues)

  static ConceptSpec from_id(int concept_id);
};

struct Sample {
  std::vector<double> video;  // [N_v * H * W], intensities in [0, 1]
  std::vector<int> caption;   // BOS .. EOS then PAD, length N_w
  int concept_id = 0;
};

struct GenerateSpec {
  std::size_t concepts = 16;
  std::size_t per_concept = 4;
  std::size_t n_frames = 4;
  std::size_t n_tokens = 8;
  std::size_t height = 16;
  std::size_t width = 16;
  double jitter = 0.08;

  void validate() const;
};

struct Dataset {
  std::size_t n_frames = 0;
  std::size_t n_tokens = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t vocab = 0;
  std::size_t concepts = 0;
  std::vector<std::string> vocab_words;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t frame_pixels() const { return height * width; }
};

struct DatasetValidation {
  double min_concept_distance = 0.0;  // pairwise canonical L2 floor
  double classification_accuracy = 0.0;
  bool captions_unambiguous = false;
};

/// Deterministic for a fixed (spec, seed); samples are generated from
/// per-index derived seeds so order never matters.
Dataset generate(const GenerateSpec& spec, std::uint64_t seed);

/// Recomputes the separation metrics the generator enforces.
DatasetValidation validate_dataset(const Dataset& ds);

/// Decodes a caption back to its concept id; throws on malformed or
/// ambiguous captions.
int decode_caption(std::span<const int> caption);

struct Batch {
  std::vector<std::size_t> indices;
  // per sample, per position: 1 = real token, 0 = PAD
  std::vector<std::vector<std::uint8_t>> masks;
};

/// Deterministic shuffle per epoch seed; the final partial batch is
/// dropped so every batch has exactly batch_size pairs.
std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size,
                           std::uint64_t epoch_seed, bool shuffle);

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace vtr::data
