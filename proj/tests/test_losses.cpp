#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "clface/errors.hpp"
#include "clface/losses.hpp"
#include "clface/rng.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace clface;
using testutil::random_tensor;
using testutil::random_vec;

namespace {

FeatureStack stack_from(std::vector<Tensor3> maps) {
  FeatureStack s;
  s.stage_maps = std::move(maps);
  return s;
}

std::vector<FeatureStack> random_stacks(Rng& rng, int n,
                                        const std::vector<std::array<int, 3>>& shapes) {
  std::vector<FeatureStack> out;
  for (int i = 0; i < n; ++i) {
    std::vector<Tensor3> maps;
    for (const auto& s : shapes) maps.push_back(random_tensor(rng, s[0], s[1], s[2]));
    out.push_back(stack_from(std::move(maps)));
  }
  return out;
}

}  // namespace

TEST_CASE("pool_normalize: identical channels reduce to the normalized plane") {
  Rng rng(7);
  Tensor3 plane = random_tensor(rng, 1, 3, 4);
  Tensor3 map(5, 3, 4);
  for (int c = 0; c < 5; ++c) {
    for (int y = 0; y < 3; ++y) {
      for (int x = 0; x < 4; ++x) map.at(c, y, x) = plane.at(0, y, x);
    }
  }
  const Vec got = pool_normalize(map);
  const Vec want = l2_normalize(plane.data);
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("pool_normalize: two channels over 1x2, hand arithmetic") {
  // channel means: ((1+3)/2, (3+1)/2) = (2, 2); normalized: (1/sqrt2, 1/sqrt2)
  Tensor3 map(2, 1, 2);
  map.at(0, 0, 0) = 1.0;
  map.at(0, 0, 1) = 3.0;
  map.at(1, 0, 0) = 3.0;
  map.at(1, 0, 1) = 1.0;
  const Vec got = pool_normalize(map);
  CHECK(got[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(got[1] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("pool_normalize: all-zero map gives the zero vector, not NaN") {
  Tensor3 map(3, 2, 2);
  const Vec got = pool_normalize(map);
  for (double v : got) {
    CHECK(v == 0.0);
    CHECK(std::isfinite(v));
  }
}

TEST_CASE("pool_normalize: output is unit-norm for nonzero maps") {
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    const Vec u = pool_normalize(random_tensor(rng, 3, 4, 5));
    CHECK(l2_norm(u) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("msfd: student identical to teacher is exactly zero") {
  Rng rng(3);
  auto teacher = random_stacks(rng, 3, {{2, 4, 4}, {3, 2, 2}});
  auto student = teacher;
  CHECK(msfd_loss(student, teacher) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("msfd: orthogonal unit attention maps give 2.0") {
  // Stage-2 maps pool-normalize to (1,0) and (0,1); stage 1 must not matter.
  Tensor3 s1(1, 2, 2), t1(1, 2, 2);
  s1.at(0, 0, 0) = 123.0;  // different stage-1 content on purpose
  Tensor3 s2(1, 1, 2), t2(1, 1, 2);
  s2.at(0, 0, 0) = 1.0;  // pooled -> (1, 0)
  t2.at(0, 0, 1) = 5.0;  // pooled -> (0, 1)
  std::vector<FeatureStack> student{stack_from({s1, s2})};
  std::vector<FeatureStack> teacher{stack_from({t1, t2})};
  CHECK(msfd_loss(student, teacher) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("msfd: matches the scalar summation oracle on random stacks") {
  Rng rng(17);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = rng.uniform_int(1, 4);
    auto student = random_stacks(rng, n, {{2, 4, 4}, {3, 2, 3}, {2, 2, 2}});
    auto teacher = random_stacks(rng, n, {{2, 4, 4}, {3, 2, 3}, {2, 2, 2}});
    const double got = msfd_loss(student, teacher);
    const double want = oracle::msfd_ref(student, teacher);
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("msfd: stage-shape mismatch is rejected") {
  Rng rng(5);
  auto student = random_stacks(rng, 1, {{2, 4, 4}, {3, 2, 2}});
  auto teacher = random_stacks(rng, 1, {{2, 4, 4}, {3, 2, 3}});
  CHECK_THROWS_AS(msfd_loss(student, teacher), ValidationError);
}

TEST_CASE("gpkd: trivial values at cos = 1, 0, -1") {
  Rng rng(23);
  std::vector<Vec> t{random_vec(rng, 6), random_vec(rng, 6)};
  CHECK(gpkd_loss(t, t) == doctest::Approx(0.0).epsilon(1e-12));

  std::vector<Vec> a{{1, 0}, {0, 2}};
  std::vector<Vec> b{{0, 3}, {5, 0}};  // orthogonal rows
  CHECK(gpkd_loss(a, b) == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<Vec> neg = t;
  for (auto& row : neg) {
    for (double& x : row) x = -x;
  }
  CHECK(gpkd_loss(neg, t) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("gpkd: matches the scalar oracle and stays in [0, 2]") {
  Rng rng(29);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = rng.uniform_int(1, 5);
    std::vector<Vec> s, t;
    for (int i = 0; i < n; ++i) {
      s.push_back(random_vec(rng, 8));
      t.push_back(random_vec(rng, 8));
    }
    const double got = gpkd_loss(s, t);
    CHECK(got == doctest::Approx(oracle::gpkd_ref(s, t)).epsilon(1e-9));
    CHECK(got >= 0.0);
    CHECK(got <= 2.0);
  }
}

TEST_CASE("ckd: single-row batch is exactly zero") {
  Rng rng(31);
  std::vector<Vec> s{random_vec(rng, 5)}, t{random_vec(rng, 5)};
  CHECK(ckd_loss(s, t, 2.0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("ckd: B=2 aligned orthogonal rows at tau=2") {
  std::vector<Vec> rows{{1, 0, 0}, {0, 1, 0}};
  const double got = ckd_loss(rows, rows, 2.0);
  const double want = std::log(1.0 + std::exp(-0.5));  // 0.474077...
  CHECK(got == doctest::Approx(want).epsilon(1e-9));
  CHECK(got == doctest::Approx(0.474077).epsilon(1e-5));
}

TEST_CASE("ckd: matches the double-loop oracle on random batches") {
  Rng rng(37);
  for (int trial = 0; trial < 60; ++trial) {
    const int b = rng.uniform_int(1, 6);
    const double tau = rng.uniform(0.5, 4.0);
    std::vector<Vec> s, t;
    for (int i = 0; i < b; ++i) {
      s.push_back(random_vec(rng, 7));
      t.push_back(random_vec(rng, 7));
    }
    const double got = ckd_loss(s, t, tau);
    CHECK(got == doctest::Approx(oracle::ckd_ref(s, t, tau)).epsilon(1e-9));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("ckd: non-positive temperature is a configuration error") {
  std::vector<Vec> rows{{1, 0}, {0, 1}};
  CHECK_THROWS_AS(ckd_loss(rows, rows, 0.0), ConfigError);
  CHECK_THROWS_AS(ckd_loss(rows, rows, -1.0), ConfigError);
}

TEST_CASE("ckd: optimum-configuration loss strictly shrinks as tau -> 0+") {
  // At student == teacher with mutually orthogonal rows the loss is
  // log(1 + (B-1)exp(-1/tau)); assert monotonicity on a tau grid.
  const int B = 4;
  std::vector<Vec> rows(B, Vec(B, 0.0));
  for (int i = 0; i < B; ++i) rows[i][i] = 1.0;
  const std::vector<double> taus{0.1, 0.25, 0.5, 1.0, 2.0, 4.0};
  double prev = -1.0;
  for (double tau : taus) {
    const double loss = ckd_loss(rows, rows, tau);
    const double closed_form = std::log(1.0 + (B - 1) * std::exp(-1.0 / tau));
    CHECK(loss == doctest::Approx(closed_form).epsilon(1e-9));
    CHECK(loss > prev);
    prev = loss;
  }
}

TEST_CASE("id margin loss: saturation, uniform logits, fixed oracle") {
  std::vector<Vec> saturated{{80.0, 0.0, 0.0}, {0.0, 90.0, 0.0}};
  CHECK(id_margin_loss(saturated, {0, 1}) == doctest::Approx(0.0).epsilon(1e-9));

  const int K = 7;
  std::vector<Vec> uniform{Vec(K, 0.42)};
  CHECK(id_margin_loss(uniform, {3}) == doctest::Approx(std::log(K)).epsilon(1e-12));

  std::vector<Vec> fixed{{0.3, -1.2, 0.8}, {2.0, 0.1, -0.4}};
  std::vector<int> labels{2, 0};
  CHECK(id_margin_loss(fixed, labels) ==
        doctest::Approx(oracle::softmax_ce_ref(fixed, labels)).epsilon(1e-12));
}

TEST_CASE("id margin loss: matches the scalar oracle on random logits") {
  Rng rng(41);
  for (int trial = 0; trial < 60; ++trial) {
    const int b = rng.uniform_int(1, 6);
    const int k = rng.uniform_int(2, 9);
    std::vector<Vec> logits;
    std::vector<int> labels;
    for (int i = 0; i < b; ++i) {
      logits.push_back(random_vec(rng, k, 2.0));
      labels.push_back(rng.uniform_int(0, k - 1));
    }
    CHECK(id_margin_loss(logits, labels) ==
          doctest::Approx(oracle::softmax_ce_ref(logits, labels)).epsilon(1e-9));
  }
}

TEST_CASE("id margin loss: out-of-range label throws") {
  std::vector<Vec> logits{{0.0, 1.0}};
  CHECK_THROWS_AS(id_margin_loss(logits, {2}), std::out_of_range);
  CHECK_THROWS_AS(id_margin_loss(logits, {-1}), std::out_of_range);
}

TEST_CASE("total: reference weights give 1.1 on the worked example") {
  LossConfig cfg;  // lambda1=3, lambda2=12, lambda3=1
  const LossBreakdown b = total_loss(0.1, 0.05, 0.2, std::nullopt, cfg);
  CHECK(b.total == doctest::Approx(1.1).epsilon(1e-12));
  CHECK_FALSE(b.id.has_value());
}

TEST_CASE("total: all zero components give zero") {
  LossConfig cfg;
  CHECK(total_loss(0, 0, 0, std::nullopt, cfg).total == 0.0);
}

TEST_CASE("total: lambda2 = 0 makes the total independent of gpkd") {
  LossConfig cfg;
  cfg.lambda2 = 0.0;
  const double a = total_loss(0.1, 0.0, 0.2, std::nullopt, cfg).total;
  const double b = total_loss(0.1, 123.4, 0.2, std::nullopt, cfg).total;
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("total: id component is added when present") {
  LossConfig cfg;
  cfg.include_id_loss = true;
  const LossBreakdown b = total_loss(0.1, 0.05, 0.2, 0.7, cfg);
  CHECK(b.total == doctest::Approx(1.8).epsilon(1e-12));
  CHECK(b.id.has_value());
  // breakdown invariant: total recomputes from the components
  const double recompute =
      cfg.lambda1 * b.msfd + cfg.lambda2 * b.gpkd + cfg.lambda3 * b.ckd + *b.id;
  CHECK(std::fabs(b.total - recompute) <= 1e-9 * std::max(1.0, std::fabs(b.total)));
}

TEST_CASE("invalid LossConfig values are rejected") {
  LossConfig cfg;
  cfg.tau = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = LossConfig{};
  cfg.lambda1 = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = LossConfig{};
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("scale invariance: positive row scaling leaves gpkd and ckd unchanged") {
  Rng rng(43);
  for (int trial = 0; trial < 30; ++trial) {
    const int b = rng.uniform_int(2, 5);
    std::vector<Vec> s, t;
    for (int i = 0; i < b; ++i) {
      s.push_back(random_vec(rng, 6));
      t.push_back(random_vec(rng, 6));
    }
    auto s_scaled = s;
    auto t_scaled = t;
    for (auto& row : s_scaled) {
      const double a = rng.uniform(0.1, 10.0);
      for (double& x : row) x *= a;
    }
    for (auto& row : t_scaled) {
      const double a = rng.uniform(0.1, 10.0);
      for (double& x : row) x *= a;
    }
    CHECK(gpkd_loss(s_scaled, t_scaled) ==
          doctest::Approx(gpkd_loss(s, t)).epsilon(1e-9));
    CHECK(ckd_loss(s_scaled, t_scaled, 2.0) ==
          doctest::Approx(ckd_loss(s, t, 2.0)).epsilon(1e-9));
  }
}

TEST_CASE("permutation equivariance: shared sample permutation changes nothing") {
  Rng rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.uniform_int(2, 5);
    auto student = random_stacks(rng, n, {{2, 2, 2}, {3, 2, 2}});
    auto teacher = random_stacks(rng, n, {{2, 2, 2}, {3, 2, 2}});
    std::vector<Vec> s_emb, t_emb;
    for (int i = 0; i < n; ++i) {
      s_emb.push_back(random_vec(rng, 6));
      t_emb.push_back(random_vec(rng, 6));
    }
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);

    std::vector<FeatureStack> sp, tp;
    std::vector<Vec> sep, tep;
    for (int i : perm) {
      sp.push_back(student[i]);
      tp.push_back(teacher[i]);
      sep.push_back(s_emb[i]);
      tep.push_back(t_emb[i]);
    }
    CHECK(msfd_loss(sp, tp) == doctest::Approx(msfd_loss(student, teacher)).epsilon(1e-9));
    CHECK(gpkd_loss(sep, tep) == doctest::Approx(gpkd_loss(s_emb, t_emb)).epsilon(1e-9));
    CHECK(ckd_loss(sep, tep, 2.0) ==
          doctest::Approx(ckd_loss(s_emb, t_emb, 2.0)).epsilon(1e-9));
  }
}

TEST_CASE("zero-at-identity: identical stacks and embeddings give zero losses") {
  Rng rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    auto stacks = random_stacks(rng, 3, {{2, 2, 2}, {2, 4, 2}});
    CHECK(msfd_loss(stacks, stacks) <= 1e-9);
    std::vector<Vec> embs;
    for (int i = 0; i < 3; ++i) embs.push_back(random_vec(rng, 9));
    CHECK(gpkd_loss(embs, embs) <= 1e-9);
  }
}
