#include <doctest.h>

#include "rlpf/schedule.hpp"

#include <cmath>

using namespace rlpf;

TEST_CASE("schedule endpoints and monotonicity") {
  for (ScheduleKind kind : {ScheduleKind::polynomial, ScheduleKind::cosine}) {
    for (int T : {2, 3, 10, 100, 1000}) {
      const NoiseSchedule s = make_schedule(T, kind);
      REQUIRE(s.alphas().size() == static_cast<std::size_t>(T + 1));
      CHECK(s.alpha(0) >= 1 - 1e-4);
      CHECK(s.alpha(T) <= 0.05);
      for (int t = 1; t <= T; ++t) CHECK(s.alpha(t) / s.alpha(t - 1) >= std::sqrt(1e-3) - 1e-12);
      for (int t = 0; t <= T; ++t) CHECK(std::abs(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t) - 1.0) < 1e-12);
      for (int t = 1; t <= T; ++t) {
        CHECK(s.alpha(t) < s.alpha(t - 1));
        CHECK(s.snr(t) < s.snr(t - 1));
      }
    }
  }
}

TEST_CASE("polynomial alpha_0 matches the offset") {
  // α_0² = (1 − 2s)·1 + s = 1 − s with s = 1e-5
  const NoiseSchedule s = make_schedule(1000);
  CHECK(std::abs(s.alpha(0) - std::sqrt(1 - 1e-5)) < 1e-12);
  CHECK(std::abs(s.alpha(0) - (1 - 1e-5)) < 1e-5);
}

TEST_CASE("schedule errors") {
  CHECK_THROWS_AS(make_schedule(1), InvalidSchedule);
  CHECK_THROWS_AS(make_schedule(0), InvalidSchedule);
  const NoiseSchedule s = make_schedule(10);
  CHECK_THROWS_AS(transition_params(s, 3, 3), InvalidStepPair);
  CHECK_THROWS_AS(transition_params(s, 3, 4), InvalidStepPair);
  CHECK_THROWS_AS(transition_params(s, 11, 2), InvalidStepPair);
  CHECK_THROWS_AS(transition_params(s, 3, -1), InvalidStepPair);
  CHECK(schedule_kind_from_string(to_string(ScheduleKind::cosine)) == ScheduleKind::cosine);
  CHECK_THROWS(schedule_kind_from_string("linear"));
}

TEST_CASE("transition identities") {
  for (int T : {2, 10, 100, 1000}) {
    const NoiseSchedule s = make_schedule(T);
    for (int t = 1; t <= T; ++t) {
      const Transition tr = transition_params(s, t, t - 1);
      CHECK(std::abs(tr.alpha * s.alpha(t - 1) - s.alpha(t)) < 1e-12);
      CHECK(tr.sigma * tr.sigma >= 0);
      CHECK(std::abs(tr.sigma * tr.sigma + tr.alpha * tr.alpha * s.sigma(t - 1) * s.sigma(t - 1) -
                     s.sigma(t) * s.sigma(t)) < 1e-12);
      CHECK(tr.sigma_rev <= s.sigma(t - 1) + 1e-15);
    }
  }
}

TEST_CASE("two-step composition equals the direct transition") {
  // scalar Gaussian oracle: z_m = a1 z_r + s1 e1, z_t = a2 z_m + s2 e2
  // ⟹ mean a2 a1 z_r, variance a2² s1² + s2²
  for (int T : {2, 10, 100, 1000}) {
    const NoiseSchedule s = make_schedule(T);
    const int r = 0, t = T;
    for (int m = r + 1; m < t; m += std::max(1, T / 7)) {
      const Transition rm = transition_params(s, m, r);
      const Transition mt = transition_params(s, t, m);
      const Transition rt = transition_params(s, t, r);
      CHECK(std::abs(mt.alpha * rm.alpha - rt.alpha) < 1e-10);
      CHECK(std::abs(mt.alpha * mt.alpha * rm.sigma * rm.sigma + mt.sigma * mt.sigma - rt.sigma * rt.sigma) < 1e-10);
    }
  }
}
