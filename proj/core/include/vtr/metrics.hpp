// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vtr/common.hpp"

namespace vtr {

/// Similarity scores, rows indexed by video and columns by text. For
/// evaluation splits the matrix is square with positives on the diagonal.
struct SimMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major

  static SimMatrix zeros(std::size_t r, std::size_t c) {
    return SimMatrix{r, c, std::vector<double>(r * c, 0.0)};
  }
  double at(std::size_t i, std::size_t j) const {
    return values[i * cols + j];
  }
  double& at(std::size_t i, std::size_t j) { return values[i * cols + j]; }
};

enum class Direction { kTextToVideo, kVideoToText };

std::string direction_name(Direction d);

SimMatrix softmax_rows(const SimMatrix& s);
SimMatrix softmax_cols(const SimMatrix& s);

/// Elementwise product of the row-wise and column-wise softmaxes.
/// An inference-time reviser only; training never sees it.
SimMatrix dual_softmax(const SimMatrix& s);

/// 1-based rank of each query's positive. Ties are pessimistic: equals
/// count as ahead of the positive.
std::vector<int> ranks(const SimMatrix& s, Direction direction);

struct RetrievalReport {
  Direction direction = Direction::kTextToVideo;
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;
  double mdr = 0.0;  // median rank
  double mnr = 0.0;  // mean rank
};

RetrievalReport report(const std::vector<int>& rank_list,
                       Direction direction);

/// Optionally applies dual softmax, then reports both directions.
std::pair<RetrievalReport, RetrievalReport> evaluate(const SimMatrix& s,
                                                     bool apply_dual);

// ---- persistence ----
void save_simmat(const std::filesystem::path& path, const SimMatrix& s);
SimMatrix load_simmat(const std::filesystem::path& path);
void save_simmat_csv(const std::filesystem::path& path, const SimMatrix& s);
SimMatrix load_simmat_csv(const std::filesystem::path& path);

std::string report_json(const RetrievalReport& r);
std::string evaluation_json(const RetrievalReport& t2v,
                            const RetrievalReport& v2t, bool dual_applied);

}  // namespace vtr
