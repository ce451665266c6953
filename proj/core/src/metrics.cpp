// SPDX-License-Identifier: Apache-2.0
#include "vtr/metrics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace vtr {

namespace {

constexpr char kSimMagic[8] = {'V', 'T', 'S', 'I', 'M', '0', '0', '1'};

void check_square(const SimMatrix& s, const char* op) {
  if (s.rows != s.cols || s.rows == 0) {
    throw ShapeError(str(op, ": expected non-empty square matrix, got ",
                         s.rows, "x", s.cols));
  }
}

void check_finite(const SimMatrix& s, const char* op) {
  for (double v : s.values) {
    if (!std::isfinite(v)) {
      throw DomainError(str(op, ": non-finite entry ", v));
    }
  }
}

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

void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}

struct Reader {
  std::ifstream in;
  std::size_t offset = 0;
  std::string what;

  Reader(const std::filesystem::path& path, std::string kind)
      : in(path, std::ios::binary), what(std::move(kind)) {
    if (!in) throw IoError(str(what, ": cannot open ", path.string()));
  }
  void bytes(void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
      throw IoError(str(what, ": truncated at offset ", offset));
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

nlohmann::json report_to_json(const RetrievalReport& r) {
  return nlohmann::json{{"direction", direction_name(r.direction)},
                        {"r1", r.r1},
                        {"r5", r.r5},
                        {"r10", r.r10},
                        {"mdr", r.mdr},
                        {"mnr", r.mnr}};
}

}  // namespace

std::string direction_name(Direction d) {
  return d == Direction::kTextToVideo ? "t2v" : "v2t";
}

SimMatrix softmax_rows(const SimMatrix& s) {
  SimMatrix out = SimMatrix::zeros(s.rows, s.cols);
  for (std::size_t i = 0; i < s.rows; ++i) {
    double m = s.at(i, 0);
    for (std::size_t j = 1; j < s.cols; ++j) m = std::max(m, s.at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < s.cols; ++j) {
      out.at(i, j) = std::exp(s.at(i, j) - m);
      sum += out.at(i, j);
    }
    for (std::size_t j = 0; j < s.cols; ++j) out.at(i, j) /= sum;
  }
  return out;
}

SimMatrix softmax_cols(const SimMatrix& s) {
  SimMatrix out = SimMatrix::zeros(s.rows, s.cols);
  for (std::size_t j = 0; j < s.cols; ++j) {
    double m = s.at(0, j);
    for (std::size_t i = 1; i < s.rows; ++i) m = std::max(m, s.at(i, j));
    double sum = 0.0;
    for (std::size_t i = 0; i < s.rows; ++i) {
      out.at(i, j) = std::exp(s.at(i, j) - m);
      sum += out.at(i, j);
    }
    for (std::size_t i = 0; i < s.rows; ++i) out.at(i, j) /= sum;
  }
  return out;
}

SimMatrix dual_softmax(const SimMatrix& s) {
  if (s.rows == 0 || s.cols == 0) throw ShapeError("dual_softmax: empty");
  check_finite(s, "dual_softmax");
  const SimMatrix by_row = softmax_rows(s);
  const SimMatrix by_col = softmax_cols(s);
  SimMatrix out = SimMatrix::zeros(s.rows, s.cols);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = by_row.values[i] * by_col.values[i];
  }
  return out;
}

std::vector<int> ranks(const SimMatrix& s, Direction direction) {
  if (s.rows != s.cols || s.rows == 0) {
    throw ShapeError(str("ranks: evaluation needs a non-empty square matrix, "
                         "got ", s.rows, "x", s.cols));
  }
  const std::size_t n = s.rows;
  std::vector<int> out(n);
  for (std::size_t q = 0; q < n; ++q) {
    const double positive = s.at(q, q);
    int ahead = 0;
    for (std::size_t o = 0; o < n; ++o) {
      if (o == q) continue;
      const double competitor = direction == Direction::kTextToVideo
                                    ? s.at(o, q)   // column q: videos
                                    : s.at(q, o);  // row q: texts
      if (competitor >= positive) ++ahead;
    }
    out[q] = ahead + 1;
  }
  return out;
}

RetrievalReport report(const std::vector<int>& rank_list,
                       Direction direction) {
  if (rank_list.empty()) throw ShapeError("report: no ranks");
  RetrievalReport r;
  r.direction = direction;
  const double n = static_cast<double>(rank_list.size());
  std::size_t hit1 = 0, hit5 = 0, hit10 = 0;
  double sum = 0.0;
  for (int rank : rank_list) {
    if (rank < 1) throw DomainError(str("report: rank ", rank, " below 1"));
    hit1 += rank <= 1;
    hit5 += rank <= 5;
    hit10 += rank <= 10;
    sum += rank;
  }
  r.r1 = static_cast<double>(hit1) / n;
  r.r5 = static_cast<double>(hit5) / n;
  r.r10 = static_cast<double>(hit10) / n;
  r.mnr = sum / n;
  std::vector<int> sorted = rank_list;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  r.mdr = sorted.size() % 2 == 1
              ? sorted[mid]
              : 0.5 * (sorted[mid - 1] + sorted[mid]);
  return r;
}

std::pair<RetrievalReport, RetrievalReport> evaluate(const SimMatrix& s,
                                                     bool apply_dual) {
  check_square(s, "evaluate");
  const SimMatrix use = apply_dual ? dual_softmax(s) : s;
  return {report(ranks(use, Direction::kTextToVideo),
                 Direction::kTextToVideo),
          report(ranks(use, Direction::kVideoToText),
                 Direction::kVideoToText)};
}

void save_simmat(const std::filesystem::path& path, const SimMatrix& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(str("simmat: cannot write ", path.string()));
  out.write(kSimMagic, sizeof(kSimMagic));
  write_u32(out, 1);
  write_u64(out, s.rows);
  write_u64(out, s.cols);
  for (double v : s.values) write_f64(out, v);
  if (!out) throw IoError(str("simmat: write failed for ", path.string()));
}

SimMatrix load_simmat(const std::filesystem::path& path) {
  Reader r(path, "simmat");
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kSimMagic, 8) != 0) {
    throw IoError("simmat: bad magic at offset 0");
  }
  const std::uint32_t version = r.u32();
  if (version != 1) {
    throw IoError(str("simmat: unsupported format version ", version));
  }
  SimMatrix s;
  s.rows = r.u64();
  s.cols = r.u64();
  s.values.resize(s.rows * s.cols);
  for (double& v : s.values) v = r.f64();
  return s;
}

void save_simmat_csv(const std::filesystem::path& path, const SimMatrix& s) {
  std::ofstream out(path);
  if (!out) throw IoError(str("simmat csv: cannot write ", path.string()));
  out.precision(17);
  for (std::size_t i = 0; i < s.rows; ++i) {
    for (std::size_t j = 0; j < s.cols; ++j) {
      if (j) out << ',';
      out << s.at(i, j);
    }
    out << '\n';
  }
}

SimMatrix load_simmat_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(str("simmat csv: cannot open ", path.string()));
  SimMatrix s;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t cols = 0;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const std::size_t comma = line.find(',', pos);
      const std::string cell =
          line.substr(pos, comma == std::string::npos ? comma : comma - pos);
      try {
        s.values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError(str("simmat csv: bad cell '", cell, "' in row ",
                          s.rows));
      }
      ++cols;
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (s.rows == 0) {
      s.cols = cols;
    } else if (cols != s.cols) {
      throw IoError(str("simmat csv: row ", s.rows, " has ", cols,
                        " cells, expected ", s.cols));
    }
    ++s.rows;
  }
  return s;
}

std::string report_json(const RetrievalReport& r) {
  return report_to_json(r).dump();
}

std::string evaluation_json(const RetrievalReport& t2v,
                            const RetrievalReport& v2t, bool dual_applied) {
  nlohmann::json j{{"dual_softmax", dual_applied},
                   {"t2v", report_to_json(t2v)},
                   {"v2t", report_to_json(v2t)}};
  return j.dump();
}

}  // namespace vtr
