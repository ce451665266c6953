// SPDX-License-Identifier: Apache-2.0
#include "vtr/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace vtr {

namespace {

constexpr double kUnitNormTol = 1e-9;

void check_unit_rows(const Tensor& x, const char* who) {
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  const auto& v = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += v[r * d + j] * v[r * d + j];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
      throw DomainError(str(who, ": row ", r, " has norm ", std::sqrt(s),
                            ", expected unit"));
    }
  }
}

// mean over rows of H(targets_row, softmax(logits_row))
Tensor cross_entropy_rows(const Tensor& logits,
                          std::vector<double> targets) {
  const std::size_t rows = logits.shape()[0];
  if (targets.size() != logits.size()) {
    throw ShapeError("cross_entropy_rows: target size mismatch");
  }
  Tensor t = Tensor::leaf(logits.shape(), std::move(targets), false);
  Tensor weighted = mul(log_softmax(logits, 1), t);
  return scale(sum_all(weighted), -1.0 / static_cast<double>(rows));
}

std::vector<double> identity_targets(std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) t[i * cols + i] = 1.0;
  return t;
}

Tensor contrastive_core(const Tensor& logits) {
  const std::size_t b = logits.shape()[0];
  Tensor l_v2t = cross_entropy_rows(logits, identity_targets(b, b));
  Tensor l_t2v = cross_entropy_rows(transpose(logits), identity_targets(b, b));
  return scale(add(l_v2t, l_t2v), 0.5);
}

void check_square(const Tensor& sim) {
  if (sim.rank() != 2 || sim.shape()[0] != sim.shape()[1]) {
    throw ShapeError(str("contrastive_loss: expected square matrix, got ",
                         shape_str(sim.shape())));
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_teacher_rows(const std::vector<std::vector<double>>& rows,
                        std::size_t b, std::size_t d, const char* who) {
  if (rows.size() != b) {
    throw ShapeError(str(who, ": ", rows.size(), " teacher rows for batch ",
                         b));
  }
  for (const auto& r : rows) {
    if (r.size() != d) {
      throw ShapeError(str(who, ": teacher row width ", r.size(), " vs ", d));
    }
  }
}

// one direction of the distilled loss: anchors against batch ++ queue
Tensor distilled_direction(
    const Tensor& anchors, const Tensor& candidates,
    const RepresentationQueue& queue,
    const std::vector<std::vector<double>>& teacher_anchors,
    const std::vector<std::vector<double>>& teacher_candidates,
    const std::function<Tensor(const Tensor&)>& apply_inv_tau, double tau,
    double alpha) {
  const std::size_t b = anchors.shape()[0];
  const std::size_t q = queue.fill();
  const std::size_t cols = b + q;
  Tensor extended =
      q > 0 ? concat(candidates, queue.as_tensor(), 0) : candidates;
  Tensor logits = apply_inv_tau(cosine_sim_matrix(anchors, extended));

  std::vector<double> targets(b * cols, 0.0);
  std::vector<double> row(cols);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j)
      row[j] = dot(teacher_anchors[i], teacher_candidates[j]);
    std::size_t j = b;
    for (const auto& entry : queue.entries())
      row[j++] = dot(teacher_anchors[i], entry);
    const std::vector<double> y_m = pseudo_targets(row, tau);
    std::vector<double> y(cols, 0.0);
    y[i] = 1.0;
    const std::vector<double> blended = blend_targets(y_m, y, alpha);
    std::copy(blended.begin(), blended.end(), targets.begin() + i * cols);
  }
  return cross_entropy_rows(logits, std::move(targets));
}

Tensor distilled_impl(const Tensor& v, const Tensor& w,
                      const std::vector<std::vector<double>>& teacher_v,
                      const std::vector<std::vector<double>>& teacher_w,
                      RepresentationQueue& queue_v,
                      RepresentationQueue& queue_t,
                      const std::function<Tensor(const Tensor&)>& apply_inv_tau,
                      double tau, double alpha) {
  if (v.rank() != 2 || w.rank() != 2 || v.shape() != w.shape()) {
    throw ShapeError(str("distilled loss: v ", shape_str(v.shape()), " vs w ",
                         shape_str(w.shape())));
  }
  if (alpha < 0.0 || alpha > 1.0) {
    throw DomainError(str("distilled loss: alpha ", alpha, " outside [0, 1]"));
  }
  const std::size_t b = v.shape()[0], d = v.shape()[1];
  check_teacher_rows(teacher_v, b, d, "distilled loss");
  check_teacher_rows(teacher_w, b, d, "distilled loss");

  Tensor l_v2t = distilled_direction(v, w, queue_t, teacher_v, teacher_w,
                                     apply_inv_tau, tau, alpha);
  Tensor l_t2v = distilled_direction(w, v, queue_v, teacher_w, teacher_v,
                                     apply_inv_tau, tau, alpha);
  Tensor loss = scale(add(l_v2t, l_t2v), 0.5);

  // enqueue after the loss so a sample is never its own queue negative
  for (std::size_t i = 0; i < b; ++i) {
    queue_v.enqueue(teacher_v[i]);
    queue_t.enqueue(teacher_w[i]);
  }
  return loss;
}

}  // namespace

RepresentationQueue::RepresentationQueue(std::size_t capacity,
                                         std::size_t dim)
    : capacity_(capacity), dim_(dim) {
  if (capacity == 0) throw ConfigError("queue: capacity must be >= 1");
  if (dim == 0) throw ConfigError("queue: dim must be >= 1");
}

void RepresentationQueue::enqueue(std::span<const double> rep) {
  if (rep.size() != dim_) {
    throw ShapeError(str("queue: entry width ", rep.size(), " vs ", dim_));
  }
  double s = 0.0;
  for (double x : rep) s += x * x;
  if (std::abs(std::sqrt(s) - 1.0) > kUnitNormTol) {
    throw DomainError(str("queue: entry norm ", std::sqrt(s),
                          " is not unit within ", kUnitNormTol));
  }
  entries_.emplace_back(rep.begin(), rep.end());
  while (entries_.size() > capacity_) entries_.pop_front();
}

Tensor RepresentationQueue::as_tensor() const {
  if (entries_.empty()) throw Error("queue: as_tensor on empty queue");
  std::vector<double> flat;
  flat.reserve(entries_.size() * dim_);
  for (const auto& e : entries_) flat.insert(flat.end(), e.begin(), e.end());
  return Tensor::leaf({entries_.size(), dim_}, std::move(flat), false);
}

void DistillConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) {
    throw ConfigError(str("distill.alpha ", alpha, " outside [0, 1]"));
  }
  if (momentum < 0.0 || momentum > 1.0) {
    throw ConfigError(str("distill.momentum ", momentum, " outside [0, 1]"));
  }
  if (queue_capacity < 1) {
    throw ConfigError("distill.queue_capacity must be >= 1");
  }
}

Tensor cosine_sim_matrix(const Tensor& v, const Tensor& w) {
  if (v.rank() != 2 || w.rank() != 2 || v.shape()[1] != w.shape()[1]) {
    throw ShapeError(str("cosine_sim_matrix: ", shape_str(v.shape()), " vs ",
                         shape_str(w.shape())));
  }
  check_unit_rows(v, "cosine_sim_matrix");
  check_unit_rows(w, "cosine_sim_matrix");
  return matmul(v, transpose(w));
}

Tensor contrastive_loss(const Tensor& sim, double tau) {
  check_square(sim);
  if (!(tau > 0.0)) {
    throw DomainError(str("contrastive_loss: tau ", tau, " must be positive"));
  }
  return contrastive_core(scale(sim, 1.0 / tau));
}

Tensor contrastive_loss(const Tensor& sim, const Tensor& inv_tau) {
  check_square(sim);
  if (inv_tau.size() != 1 || !(inv_tau.value() > 0.0)) {
    throw DomainError("contrastive_loss: 1/tau must be a positive scalar");
  }
  return contrastive_core(mul(sim, inv_tau));
}

std::vector<double> pseudo_targets(std::span<const double> teacher_row,
                                   double tau) {
  if (teacher_row.empty()) throw ShapeError("pseudo_targets: empty row");
  if (!(tau > 0.0)) {
    throw DomainError(str("pseudo_targets: tau ", tau, " must be positive"));
  }
  std::vector<double> out(teacher_row.size());
  double m = teacher_row[0] / tau;
  for (std::size_t i = 0; i < teacher_row.size(); ++i) {
    out[i] = teacher_row[i] / tau;
    m = std::max(m, out[i]);
  }
  double s = 0.0;
  for (double& x : out) {
    x = std::exp(x - m);
    s += x;
  }
  for (double& x : out) x /= s;
  return out;
}

std::vector<double> blend_targets(std::span<const double> y_m,
                                  std::span<const double> y, double alpha) {
  if (y_m.size() != y.size()) {
    throw ShapeError(str("blend_targets: lengths ", y_m.size(), " vs ",
                         y.size()));
  }
  if (alpha < 0.0 || alpha > 1.0) {
    throw DomainError(str("blend_targets: alpha ", alpha, " outside [0, 1]"));
  }
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    out[i] = alpha * y_m[i] + (1.0 - alpha) * y[i];
  }
  return out;
}

Tensor distilled_contrastive_loss(
    const Tensor& v, const Tensor& w,
    const std::vector<std::vector<double>>& teacher_v,
    const std::vector<std::vector<double>>& teacher_w,
    RepresentationQueue& queue_v, RepresentationQueue& queue_t,
    const Tensor& inv_tau, double alpha) {
  if (inv_tau.size() != 1 || !(inv_tau.value() > 0.0)) {
    throw DomainError("distilled loss: 1/tau must be a positive scalar");
  }
  const double tau = 1.0 / inv_tau.value();
  return distilled_impl(
      v, w, teacher_v, teacher_w, queue_v, queue_t,
      [&inv_tau](const Tensor& t) { return mul(t, inv_tau); }, tau, alpha);
}

Tensor distilled_contrastive_loss(
    const Tensor& v, const Tensor& w,
    const std::vector<std::vector<double>>& teacher_v,
    const std::vector<std::vector<double>>& teacher_w,
    RepresentationQueue& queue_v, RepresentationQueue& queue_t, double tau,
    double alpha) {
  if (!(tau > 0.0)) {
    throw DomainError(str("distilled loss: tau ", tau, " must be positive"));
  }
  const double inv = 1.0 / tau;
  return distilled_impl(
      v, w, teacher_v, teacher_w, queue_v, queue_t,
      [inv](const Tensor& t) { return scale(t, inv); }, tau, alpha);
}

HardNegatives select_hard_negatives(const Tensor& sim, std::size_t k) {
  check_square(sim);
  const std::size_t b = sim.shape()[0];
  if (k >= b) {
    throw DomainError(str("select_hard_negatives: k ", k,
                          " exceeds capacity ", b - 1, " for batch ", b));
  }
  const auto& v = sim.values();
  HardNegatives out;
  out.texts_per_video.resize(b);
  out.videos_per_text.resize(b);
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(b - 1);
  auto top_k = [&](auto value_at, std::vector<std::size_t>& dst,
                   std::size_t self) {
    cand.clear();
    for (std::size_t j = 0; j < b; ++j) {
      if (j != self) cand.emplace_back(value_at(j), j);
    }
    std::stable_sort(cand.begin(), cand.end(),
                     [](const auto& a, const auto& c) {
                       if (a.first != c.first) return a.first > c.first;
                       return a.second < c.second;
                     });
    dst.reserve(k);
    for (std::size_t i = 0; i < k; ++i) dst.push_back(cand[i].second);
  };
  for (std::size_t i = 0; i < b; ++i) {
    top_k([&](std::size_t j) { return v[i * b + j]; }, out.texts_per_video[i],
          i);
  }
  for (std::size_t j = 0; j < b; ++j) {
    top_k([&](std::size_t i) { return v[i * b + j]; }, out.videos_per_text[j],
          j);
  }
  return out;
}

Tensor vtm_loss(const std::vector<Tensor>& positive_scores,
                const std::vector<std::vector<Tensor>>& negative_scores,
                bool literal_form) {
  if (positive_scores.empty() ||
      positive_scores.size() != negative_scores.size()) {
    throw ShapeError("vtm_loss: positives and negative groups must align");
  }
  const std::size_t b = positive_scores.size();
  std::vector<Tensor> per_pair;
  per_pair.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto& negs = negative_scores[i];
    if (negs.empty()) {
      throw DomainError(str("vtm_loss: empty negative group for positive ",
                            i));
    }
    if (!literal_form) {
      std::vector<Tensor> group;
      group.reserve(negs.size() + 1);
      group.push_back(positive_scores[i]);
      for (const Tensor& n : negs) group.push_back(n);
      Tensor lsm = log_softmax(concat(std::span<const Tensor>(group), 0), 0);
      per_pair.push_back(scale(slice_rows(lsm, 0, 1), -1.0));
    } else {
      // printed form: negatives enter the denominator un-exponentiated
      std::vector<Tensor> raw(negs.begin(), negs.end());
      Tensor neg_sum = sum_all(concat(std::span<const Tensor>(raw), 0));
      Tensor denom = add(exp(positive_scores[i]), neg_sum);
      if (!(denom.value() > 0.0)) {
        throw DomainError(
            str("vtm_loss: literal-form denominator ", denom.value(),
                " is not positive for pair ", i));
      }
      per_pair.push_back(sub(log(denom), positive_scores[i]));
    }
  }
  Tensor stacked = concat(std::span<const Tensor>(per_pair), 0);
  return scale(sum_all(stacked), 1.0 / static_cast<double>(b));
}

LossReport training_loss(const BatchForward& fwd, const LossOptions& options,
                         RepresentationQueue& queue_v,
                         RepresentationQueue& queue_t,
                         const PairScorer& scorer) {
  const std::size_t b = fwd.v.shape()[0];
  LossReport rep;
  rep.tau = 1.0 / fwd.inv_tau.value();

  Tensor sim;
  if (!options.distill || options.fusion) {
    sim = cosine_sim_matrix(fwd.v, fwd.w);
  }
  Tensor l_vta =
      options.distill
          ? distilled_contrastive_loss(fwd.v, fwd.w, fwd.teacher_v,
                                       fwd.teacher_w, queue_v, queue_t,
                                       fwd.inv_tau, options.alpha)
          : contrastive_loss(sim, fwd.inv_tau);
  rep.l_vta = l_vta.value();
  Tensor total = l_vta;

  if (options.fusion) {
    if (!scorer) throw Error("training_loss: fusion needs a pair scorer");
    rep.hard_negatives = select_hard_negatives(sim, options.k);
    std::vector<Tensor> pos;
    std::vector<std::vector<Tensor>> negs;
    pos.reserve(b);
    negs.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
      pos.push_back(scorer(i, i));
      std::vector<Tensor> group;
      group.reserve(2 * options.k);
      for (std::size_t t : rep.hard_negatives.texts_per_video[i]) {
        group.push_back(scorer(i, t));
      }
      for (std::size_t v : rep.hard_negatives.videos_per_text[i]) {
        group.push_back(scorer(v, i));
      }
      negs.push_back(std::move(group));
    }
    Tensor l_vtm = vtm_loss(pos, negs, options.vtm_literal);
    rep.l_vtm = l_vtm.value();
    rep.fusion_pairs = b * (2 * options.k + 1);
    total = add(total, l_vtm);
  }

  rep.total = total.value();
  rep.loss = total;
  return rep;
}

}  // namespace vtr
