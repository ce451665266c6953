// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "vtr/objectives.hpp"

using namespace vtr;

namespace {

std::vector<double> random_unit(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : v) {
      x = rng.uniform(-1.0, 1.0);
      norm += x * x;
    }
  } while (norm < 1e-6);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

Tensor unit_rows_tensor(const std::vector<std::vector<double>>& rows,
                        bool requires_grad = true) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::leaf({rows.size(), rows[0].size()}, std::move(flat),
                      requires_grad);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// independent scalar re-evaluation of the queue-extended soft-target loss
double brute_force_distilled(
    const std::vector<std::vector<double>>& v,
    const std::vector<std::vector<double>>& w,
    const std::vector<std::vector<double>>& tv,
    const std::vector<std::vector<double>>& tw,
    const std::vector<std::vector<double>>& qv,
    const std::vector<std::vector<double>>& qt, double tau, double alpha) {
  auto direction = [&](const std::vector<std::vector<double>>& anchors,
                       const std::vector<std::vector<double>>& cands,
                       const std::vector<std::vector<double>>& queue,
                       const std::vector<std::vector<double>>& t_anchors,
                       const std::vector<std::vector<double>>& t_cands) {
    const std::size_t b = anchors.size();
    const std::size_t cols = b + queue.size();
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<double> student(cols), teacher(cols);
      for (std::size_t j = 0; j < b; ++j) {
        student[j] = dot(anchors[i], cands[j]) / tau;
        teacher[j] = dot(t_anchors[i], t_cands[j]) / tau;
      }
      for (std::size_t q = 0; q < queue.size(); ++q) {
        student[b + q] = dot(anchors[i], queue[q]) / tau;
        teacher[b + q] = dot(t_anchors[i], queue[q]) / tau;
      }
      auto softmax = [](std::vector<double> x) {
        double m = x[0];
        for (double xv : x) m = std::max(m, xv);
        double s = 0.0;
        for (double& xv : x) {
          xv = std::exp(xv - m);
          s += xv;
        }
        for (double& xv : x) xv /= s;
        return x;
      };
      const std::vector<double> p_teacher = softmax(teacher);
      std::vector<double> log_p(cols);
      {
        double m = student[0];
        for (double s : student) m = std::max(m, s);
        double lse = 0.0;
        for (double s : student) lse += std::exp(s - m);
        lse = m + std::log(lse);
        for (std::size_t j = 0; j < cols; ++j) log_p[j] = student[j] - lse;
      }
      for (std::size_t j = 0; j < cols; ++j) {
        const double hard = j == i ? 1.0 : 0.0;
        const double target = alpha * p_teacher[j] + (1.0 - alpha) * hard;
        total -= target * log_p[j];
      }
    }
    return total / static_cast<double>(b);
  };
  return 0.5 * (direction(v, w, qt, tv, tw) + direction(w, v, qv, tw, tv));
}

}  // namespace

TEST_CASE("cosine_sim_matrix basics") {
  Tensor basis = Tensor::leaf({2, 2}, {1, 0, 0, 1});
  Tensor eye = cosine_sim_matrix(basis, basis);
  CHECK(eye.values() == std::vector<double>{1, 0, 0, 1});

  Tensor v = Tensor::leaf({1, 2}, {0.6, 0.8});
  Tensor nv = Tensor::leaf({1, 2}, {-0.6, -0.8});
  CHECK(cosine_sim_matrix(v, nv).value() == doctest::Approx(-1.0));

  Rng rng(3);
  std::vector<std::vector<double>> a{random_unit(2, rng), random_unit(2, rng),
                                     random_unit(2, rng)};
  std::vector<std::vector<double>> b{random_unit(2, rng), random_unit(2, rng),
                                     random_unit(2, rng)};
  Tensor sim = cosine_sim_matrix(unit_rows_tensor(a), unit_rows_tensor(b));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(sim.at(i * 3 + j) == doctest::Approx(dot(a[i], b[j])));
      CHECK(sim.at(i * 3 + j) <= 1.0 + 1e-12);
      CHECK(sim.at(i * 3 + j) >= -1.0 - 1e-12);
    }
  }

  Tensor not_unit = Tensor::leaf({1, 2}, {1.0, 1.0});
  CHECK_THROWS_AS(cosine_sim_matrix(not_unit, v), DomainError);
}

TEST_CASE("contrastive loss: single pair, saturation, uniform plateau") {
  Tensor one = Tensor::leaf({1, 1}, {0.42});
  CHECK(contrastive_loss(one, 1.0).value() == doctest::Approx(0.0));

  Tensor spiked = Tensor::leaf({2, 2}, {60.0, 0.0, 0.0, 60.0});
  CHECK(contrastive_loss(spiked, 1.0).value() < 1e-12);

  Tensor flat = Tensor::full({4, 4}, 0.3);
  CHECK(contrastive_loss(flat, 0.7).value() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  CHECK_THROWS_AS(contrastive_loss(flat, 0.0), DomainError);
  CHECK_THROWS_AS(contrastive_loss(flat, -1.0), DomainError);
  Tensor rect = Tensor::full({2, 3}, 0.0);
  CHECK_THROWS_AS(contrastive_loss(rect, 1.0), ShapeError);
}

TEST_CASE("pseudo_targets") {
  const std::vector<double> uniform{0.2, 0.2, 0.2};
  const auto p = pseudo_targets(uniform, 0.5);
  for (double x : p) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-12));

  // queue entries with very negative similarity get no mass
  const std::vector<double> row{0.9, 0.1, -1e5, -1e5};
  const auto q = pseudo_targets(row, 1.0);
  CHECK(q[2] == 0.0);
  CHECK(q[3] == 0.0);
  CHECK(q[0] + q[1] == doctest::Approx(1.0).epsilon(1e-12));

  const std::vector<double> hand{1.0, 0.0, 0.0};
  const auto h = pseudo_targets(hand, 1.0);
  const double z = std::exp(1.0) + 2.0;
  CHECK(h[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK(h[1] == doctest::Approx(1.0 / z).epsilon(1e-12));
}

TEST_CASE("blend_targets endpoints are exact, interior is convex") {
  const std::vector<double> y_m{0.5, 0.5};
  const std::vector<double> y{1.0, 0.0};
  CHECK(blend_targets(y_m, y, 0.0) == y);
  CHECK(blend_targets(y_m, y, 1.0) == y_m);
  const auto mix = blend_targets(y_m, y, 0.4);
  CHECK(mix[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(mix[1] == doctest::Approx(0.2).epsilon(1e-15));

  const std::vector<double> wrong{1.0};
  CHECK_THROWS_AS(blend_targets(y_m, wrong, 0.5), ShapeError);

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(6), b(6, 0.0);
    double s = 0.0;
    for (double& x : a) {
      x = rng.uniform(0.0, 1.0);
      s += x;
    }
    for (double& x : a) x /= s;
    b[rng.index(6)] = 1.0;
    const auto out = blend_targets(a, b, rng.uniform(0.0, 1.0));
    double total = 0.0;
    for (double x : out) total += x;
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("queue is FIFO with exact eviction and unit-norm contract") {
  RepresentationQueue q(4, 2);
  CHECK_THROWS_AS(q.enqueue(std::vector<double>{1.0, 1.0}), DomainError);
  CHECK_THROWS_AS(q.enqueue(std::vector<double>{1.0}), ShapeError);
  for (int i = 0; i < 7; ++i) {
    const double angle = 0.3 * i;
    q.enqueue(std::vector<double>{std::cos(angle), std::sin(angle)});
  }
  CHECK(q.fill() == 4);
  // entries 3..6 survive, oldest first
  for (int i = 0; i < 4; ++i) {
    const double angle = 0.3 * (i + 3);
    CHECK(q.entries()[i][0] == doctest::Approx(std::cos(angle)));
    CHECK(q.entries()[i][1] == doctest::Approx(std::sin(angle)));
  }
  Tensor t = q.as_tensor();
  CHECK(t.shape() == Shape{4, 2});
  CHECK_FALSE(t.requires_grad());
}

TEST_CASE("distilled loss with alpha=0 and empty queues is bitwise plain") {
  Rng rng(7);
  const std::size_t b = 3, d = 4;
  std::vector<std::vector<double>> v_rows, w_rows, tv, tw;
  for (std::size_t i = 0; i < b; ++i) {
    v_rows.push_back(random_unit(d, rng));
    w_rows.push_back(random_unit(d, rng));
    tv.push_back(random_unit(d, rng));
    tw.push_back(random_unit(d, rng));
  }
  Tensor v = unit_rows_tensor(v_rows);
  Tensor w = unit_rows_tensor(w_rows);
  RepresentationQueue qv(8, d), qt(8, d);
  const double tau = 0.37;
  Tensor distilled =
      distilled_contrastive_loss(v, w, tv, tw, qv, qt, tau, 0.0);
  Tensor plain = contrastive_loss(cosine_sim_matrix(v, w), tau);
  CHECK(distilled.value() == plain.value());  // bitwise
  // the loss consumed empty queues, then enqueued the teacher rows
  CHECK(qv.fill() == b);
  CHECK(qt.fill() == b);
}

TEST_CASE("distilled loss with alpha=0 and filled queues matches brute force") {
  Rng rng(11);
  const std::size_t b = 3, d = 4;
  std::vector<std::vector<double>> v_rows, w_rows, tv, tw, qv_init, qt_init;
  for (std::size_t i = 0; i < b; ++i) {
    v_rows.push_back(random_unit(d, rng));
    w_rows.push_back(random_unit(d, rng));
    tv.push_back(random_unit(d, rng));
    tw.push_back(random_unit(d, rng));
  }
  for (int i = 0; i < 2; ++i) {
    qv_init.push_back(random_unit(d, rng));
    qt_init.push_back(random_unit(d, rng));
  }
  RepresentationQueue qv(8, d), qt(8, d);
  for (const auto& e : qv_init) qv.enqueue(e);
  for (const auto& e : qt_init) qt.enqueue(e);
  const double tau = 0.5;
  Tensor loss = distilled_contrastive_loss(unit_rows_tensor(v_rows),
                                           unit_rows_tensor(w_rows), tv, tw,
                                           qv, qt, tau, 0.0);
  const double oracle = brute_force_distilled(v_rows, w_rows, tv, tw, qv_init,
                                              qt_init, tau, 0.0);
  CHECK(loss.value() == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("distilled loss on a hand-built B=2, Q=1 case matches the oracle") {
  Rng rng(13);
  const std::size_t d = 3;
  std::vector<std::vector<double>> v_rows{random_unit(d, rng),
                                          random_unit(d, rng)};
  std::vector<std::vector<double>> w_rows{random_unit(d, rng),
                                          random_unit(d, rng)};
  std::vector<std::vector<double>> tv{random_unit(d, rng),
                                      random_unit(d, rng)};
  std::vector<std::vector<double>> tw{random_unit(d, rng),
                                      random_unit(d, rng)};
  const std::vector<double> queue_entry_v = random_unit(d, rng);
  const std::vector<double> queue_entry_t = random_unit(d, rng);
  RepresentationQueue qv(4, d), qt(4, d);
  qv.enqueue(queue_entry_v);
  qt.enqueue(queue_entry_t);
  const double tau = 0.41, alpha = 0.4;
  Tensor loss = distilled_contrastive_loss(unit_rows_tensor(v_rows),
                                           unit_rows_tensor(w_rows), tv, tw,
                                           qv, qt, tau, alpha);
  const double oracle = brute_force_distilled(
      v_rows, w_rows, tv, tw, {queue_entry_v}, {queue_entry_t}, tau, alpha);
  CHECK(loss.value() == doctest::Approx(oracle).epsilon(1e-12));
  // enqueue happened after the loss: the oracle above still assumed
  // only the seeded entries, and the queues now hold 1 + 2 rows
  CHECK(qv.fill() == 3);
  CHECK(qt.fill() == 3);
  CHECK(qv.entries()[0] == queue_entry_v);
}

TEST_CASE("no gradient reaches teacher rows or queue entries") {
  Rng rng(17);
  const std::size_t b = 2, d = 3;
  std::vector<std::vector<double>> v_rows, w_rows, tv, tw;
  for (std::size_t i = 0; i < b; ++i) {
    v_rows.push_back(random_unit(d, rng));
    w_rows.push_back(random_unit(d, rng));
    tv.push_back(random_unit(d, rng));
    tw.push_back(random_unit(d, rng));
  }
  Tensor v = unit_rows_tensor(v_rows);
  Tensor w = unit_rows_tensor(w_rows);
  RepresentationQueue qv(4, d), qt(4, d);
  qv.enqueue(random_unit(d, rng));
  qt.enqueue(random_unit(d, rng));
  const auto qv_before = qv.entries();
  Tensor loss = distilled_contrastive_loss(v, w, tv, tw, qv, qt, 0.5, 0.4);
  backward(loss);
  CHECK(v.has_grad());
  CHECK(w.has_grad());
  CHECK(qv.entries()[0] == qv_before[0]);  // contents untouched by backward
}

TEST_CASE("select_hard_negatives") {
  SUBCASE("B=3, K=2 returns both off-diagonal indices") {
    Tensor sim = Tensor::leaf({3, 3}, {1, .2, .3, .1, 1, .4, .6, .5, 1});
    const HardNegatives h = select_hard_negatives(sim, 2);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(h.texts_per_video[i].size() == 2);
      for (std::size_t j : h.texts_per_video[i]) CHECK(j != i);
      CHECK(h.videos_per_text[i].size() == 2);
      for (std::size_t j : h.videos_per_text[i]) CHECK(j != i);
    }
    CHECK(h.texts_per_video[0] == std::vector<std::size_t>{2, 1});
  }
  SUBCASE("descending order by similarity") {
    Tensor sim = Tensor::leaf({4, 4}, {0.9, 0.8, 0.1, 0.5,  //
                                       0.0, 0.9, 0.0, 0.0,  //
                                       0.0, 0.0, 0.9, 0.0,  //
                                       0.0, 0.0, 0.0, 0.9});
    const HardNegatives h = select_hard_negatives(sim, 2);
    CHECK(h.texts_per_video[0] == std::vector<std::size_t>{1, 3});
  }
  SUBCASE("ties break toward the lower index") {
    Tensor sim = Tensor::leaf({3, 3}, {1, .5, .5, .5, 1, .5, .5, .5, 1});
    const HardNegatives h = select_hard_negatives(sim, 1);
    CHECK(h.texts_per_video[0] == std::vector<std::size_t>{1});
    CHECK(h.texts_per_video[1] == std::vector<std::size_t>{0});
    CHECK(h.videos_per_text[2] == std::vector<std::size_t>{0});
  }
  SUBCASE("K at or above B is a capacity error") {
    Tensor sim = Tensor::full({3, 3}, 0.1);
    CHECK_THROWS_AS(select_hard_negatives(sim, 3), DomainError);
    CHECK_NOTHROW(select_hard_negatives(sim, 2));
  }
  SUBCASE("the diagonal is never selected, randomized") {
    Rng rng(19);
    for (int trial = 0; trial < 500; ++trial) {
      const std::size_t b = 2 + rng.index(6);
      const std::size_t k = 1 + rng.index(b - 1);
      std::vector<double> vals(b * b);
      for (double& x : vals) x = rng.uniform(-1.0, 1.0);
      const HardNegatives h =
          select_hard_negatives(Tensor::leaf({b, b}, vals), k);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j : h.texts_per_video[i]) CHECK(j != i);
        for (std::size_t j : h.videos_per_text[i]) CHECK(j != i);
      }
    }
  }
}

TEST_CASE("vtm_loss") {
  auto scalar = [](double v) { return Tensor::leaf({1}, {v}); };

  SUBCASE("all-equal scores with two negatives give ln 3") {
    std::vector<Tensor> pos{scalar(0.7), scalar(0.7)};
    std::vector<std::vector<Tensor>> negs{{scalar(0.7), scalar(0.7)},
                                          {scalar(0.7), scalar(0.7)}};
    CHECK(vtm_loss(pos, negs).value() ==
          doctest::Approx(std::log(3.0)).epsilon(1e-12));
  }
  SUBCASE("saturated positive drives the loss to zero") {
    std::vector<Tensor> pos{scalar(60.0)};
    std::vector<std::vector<Tensor>> negs{{scalar(0.0), scalar(1.0)}};
    CHECK(vtm_loss(pos, negs).value() < 1e-12);
  }
  SUBCASE("single positive, pos=1, negs=[0,0]") {
    std::vector<Tensor> pos{scalar(1.0)};
    std::vector<std::vector<Tensor>> negs{{scalar(0.0), scalar(0.0)}};
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
    CHECK(vtm_loss(pos, negs).value() ==
          doctest::Approx(expected).epsilon(1e-12));
    CHECK(vtm_loss(pos, negs).value() == doctest::Approx(0.551).epsilon(1e-3));
  }
  SUBCASE("empty negative group is a contract error") {
    std::vector<Tensor> pos{scalar(1.0)};
    std::vector<std::vector<Tensor>> negs{{}};
    CHECK_THROWS_AS(vtm_loss(pos, negs), DomainError);
  }
  SUBCASE("permutation within a negative group does not change the loss") {
    Rng rng(23);
    std::vector<Tensor> pos{scalar(rng.uniform(-1, 1))};
    std::vector<double> n(5);
    for (double& x : n) x = rng.uniform(-1.0, 1.0);
    std::vector<std::vector<Tensor>> negs{{scalar(n[0]), scalar(n[1]),
                                           scalar(n[2]), scalar(n[3]),
                                           scalar(n[4])}};
    const double base = vtm_loss(pos, negs).value();
    std::vector<std::vector<Tensor>> shuffled{{scalar(n[3]), scalar(n[0]),
                                               scalar(n[4]), scalar(n[2]),
                                               scalar(n[1])}};
    CHECK(vtm_loss(pos, shuffled).value() ==
          doctest::Approx(base).epsilon(1e-12));
  }
  SUBCASE("literal form keeps negatives raw and guards the domain") {
    std::vector<Tensor> pos{scalar(1.0)};
    std::vector<std::vector<Tensor>> negs{{scalar(0.5), scalar(0.25)}};
    const double expected =
        std::log(std::exp(1.0) + 0.75) - 1.0;
    CHECK(vtm_loss(pos, negs, true).value() ==
          doctest::Approx(expected).epsilon(1e-12));
    std::vector<Tensor> neg_pos{scalar(-5.0)};
    std::vector<std::vector<Tensor>> bad{{scalar(-10.0), scalar(0.0)}};
    CHECK_THROWS_AS(vtm_loss(neg_pos, bad, true), DomainError);
  }
  SUBCASE("gradients flow through both positives and negatives") {
    Tensor p = Tensor::leaf({1}, {0.3}, true);
    Tensor n1 = Tensor::leaf({1}, {0.1}, true);
    Tensor n2 = Tensor::leaf({1}, {-0.4}, true);
    auto f = [&] {
      std::vector<Tensor> pos{p};
      std::vector<std::vector<Tensor>> negs{{n1, n2}};
      return vtm_loss(pos, negs);
    };
    CHECK(grad_check(f, p, 1e-5) < 1e-6);
    CHECK(grad_check(f, n1, 1e-5) < 1e-6);
    CHECK(grad_check(f, n2, 1e-5) < 1e-6);
  }
}

TEST_CASE("training_loss composes components per flags") {
  Rng rng(29);
  const std::size_t b = 4, d = 6;
  std::vector<std::vector<double>> v_rows, w_rows;
  for (std::size_t i = 0; i < b; ++i) {
    v_rows.push_back(random_unit(d, rng));
    w_rows.push_back(random_unit(d, rng));
  }
  BatchForward fwd;
  fwd.v = unit_rows_tensor(v_rows);
  fwd.w = unit_rows_tensor(w_rows);
  fwd.inv_tau = Tensor::scalar(2.0);
  RepresentationQueue qv(8, d), qt(8, d);

  // deterministic fake pair scorer: fusion is exercised end to end in
  // the training tests, here we check the accounting
  PairScorer scorer = [](std::size_t vi, std::size_t ti) {
    return Tensor::leaf({1}, {0.37 * static_cast<double>(vi) -
                              0.11 * static_cast<double>(ti)});
  };

  SUBCASE("fusion disabled: total equals l_vta") {
    LossOptions opt;
    LossReport rep = training_loss(fwd, opt, qv, qt, nullptr);
    CHECK(rep.total == rep.l_vta);
    CHECK(rep.l_vtm == 0.0);
    CHECK(rep.fusion_pairs == 0);
    Tensor plain = contrastive_loss(cosine_sim_matrix(fwd.v, fwd.w),
                                    fwd.inv_tau);
    CHECK(rep.l_vta == plain.value());
  }
  SUBCASE("all enabled: total equals the component sum") {
    LossOptions opt;
    opt.distill = true;
    opt.fusion = true;
    opt.k = 2;
    opt.alpha = 0.4;
    BatchForward with_teacher = fwd;
    for (std::size_t i = 0; i < b; ++i) {
      with_teacher.teacher_v.push_back(random_unit(d, rng));
      with_teacher.teacher_w.push_back(random_unit(d, rng));
    }
    LossReport rep = training_loss(with_teacher, opt, qv, qt, scorer);
    CHECK(rep.total == rep.l_vta + rep.l_vtm);
    CHECK(rep.fusion_pairs == b * (2 * opt.k + 1));
    CHECK(rep.fusion_pairs == 20);
    CHECK(rep.hard_negatives.texts_per_video.size() == b);
    CHECK(rep.tau == doctest::Approx(0.5));

    // component oracle: recompute the vtm part with the same scorer
    std::vector<Tensor> pos;
    std::vector<std::vector<Tensor>> negs;
    for (std::size_t i = 0; i < b; ++i) {
      pos.push_back(scorer(i, i));
      std::vector<Tensor> group;
      for (std::size_t t : rep.hard_negatives.texts_per_video[i]) {
        group.push_back(scorer(i, t));
      }
      for (std::size_t v : rep.hard_negatives.videos_per_text[i]) {
        group.push_back(scorer(v, i));
      }
      negs.push_back(group);
    }
    CHECK(rep.l_vtm == doctest::Approx(vtm_loss(pos, negs).value()));
  }
  SUBCASE("distill disabled: l_vta is the plain contrastive loss") {
    LossOptions opt;
    opt.fusion = true;
    opt.k = 1;
    LossReport rep = training_loss(fwd, opt, qv, qt, scorer);
    Tensor plain = contrastive_loss(cosine_sim_matrix(fwd.v, fwd.w),
                                    fwd.inv_tau);
    CHECK(rep.l_vta == plain.value());
    CHECK(rep.fusion_pairs == 12);  // B(2K+1) with B=4, K=1
  }
}
