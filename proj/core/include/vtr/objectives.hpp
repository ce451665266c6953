// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "vtr/tensor.hpp"

namespace vtr {

/// FIFO of recent unit-norm teacher representations serving as extra
/// contrastive negatives. Oldest entries are evicted first.
class RepresentationQueue {
 public:
  RepresentationQueue(std::size_t capacity, std::size_t dim);

  void enqueue(std::span<const double> rep);  // must be unit norm
  std::size_t fill() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  const std::deque<std::vector<double>>& entries() const { return entries_; }

  // [fill x dim] constant leaf, oldest first; fill() must be > 0
  Tensor as_tensor() const;

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::deque<std::vector<double>> entries_;
};

struct DistillConfig {
  double alpha = 0.4;
  double momentum = 0.995;
  std::size_t queue_capacity = 64;

  void validate() const;
};

Tensor cosine_sim_matrix(const Tensor& v, const Tensor& w);

/// Symmetric InfoNCE over a square in-batch similarity matrix with
/// diagonal positives: mean of the video->text and text->video
/// cross-entropies.
Tensor contrastive_loss(const Tensor& sim, double tau);
Tensor contrastive_loss(const Tensor& sim, const Tensor& inv_tau);

/// Teacher softmax over batch-plus-queue similarities; plain doubles, no
/// gradient flows from here.
std::vector<double> pseudo_targets(std::span<const double> teacher_row,
                                   double tau);

/// alpha * y_m + (1 - alpha) * y
std::vector<double> blend_targets(std::span<const double> y_m,
                                  std::span<const double> y, double alpha);

/// Contrastive loss with queue-extended negatives and teacher-blended
/// soft targets. Consumes the queues for the loss, then enqueues the
/// current teacher rows (a sample never serves as its own negative).
Tensor distilled_contrastive_loss(
    const Tensor& v, const Tensor& w,
    const std::vector<std::vector<double>>& teacher_v,
    const std::vector<std::vector<double>>& teacher_w,
    RepresentationQueue& queue_v, RepresentationQueue& queue_t,
    const Tensor& inv_tau, double alpha);
Tensor distilled_contrastive_loss(
    const Tensor& v, const Tensor& w,
    const std::vector<std::vector<double>>& teacher_v,
    const std::vector<std::vector<double>>& teacher_w,
    RepresentationQueue& queue_v, RepresentationQueue& queue_t, double tau,
    double alpha);

struct HardNegatives {
  std::vector<std::vector<std::size_t>> texts_per_video;  // [B][K]
  std::vector<std::vector<std::size_t>> videos_per_text;  // [B][K]
};

/// Top-K off-diagonal indices per row and per column, descending by
/// similarity; ties broken toward the lower index.
HardNegatives select_hard_negatives(const Tensor& sim, std::size_t k);

/// Per positive: -log(exp(s_p) / (exp(s_p) + sum_n exp(s_n))), averaged
/// over the batch. `literal_form` keeps the negatives un-exponentiated
/// for comparison; it requires exp(s_p) + sum_n s_n > 0.
Tensor vtm_loss(const std::vector<Tensor>& positive_scores,
                const std::vector<std::vector<Tensor>>& negative_scores,
                bool literal_form = false);

struct LossReport {
  double l_vta = 0.0;
  double l_vtm = 0.0;
  double total = 0.0;
  double tau = 0.0;  // effective temperature
  HardNegatives hard_negatives;
  std::size_t fusion_pairs = 0;
  Tensor loss;  // total, on the tape
};

struct BatchForward {
  Tensor v;  // [B x D] unit-norm student video representations
  Tensor w;  // [B x D] unit-norm student caption representations
  Tensor inv_tau;
  std::vector<std::vector<double>> teacher_v;  // empty unless distilling
  std::vector<std::vector<double>> teacher_w;
};

struct LossOptions {
  bool distill = false;
  bool fusion = false;
  std::size_t k = 0;
  double alpha = 0.4;
  bool vtm_literal = false;
};

// runs the fusion encoder and matching head for one (video, text) pair
using PairScorer = std::function<Tensor(std::size_t, std::size_t)>;

LossReport training_loss(const BatchForward& fwd, const LossOptions& options,
                         RepresentationQueue& queue_v,
                         RepresentationQueue& queue_t,
                         const PairScorer& scorer);

}  // namespace vtr
