#pragma once

#include "rlpf/core.hpp"

#include <string>
#include <vector>

namespace rlpf {

RLPF_DEFINE_ERROR(InvalidSchedule)
RLPF_DEFINE_ERROR(InvalidStepPair)

enum class ScheduleKind { polynomial, cosine };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

struct Transition {
  double alpha;      // α_{t|r}
  double sigma;      // σ_{t|r}
  double sigma_rev;  // σ_{t→r}
};

// Variance-preserving schedule over integer steps 0..T.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  int steps() const { return steps_; }
  ScheduleKind kind() const { return kind_; }
  double alpha(int t) const { return alpha_.at(t); }
  double sigma(int t) const { return sigma_.at(t); }
  double snr(int t) const { return alpha_.at(t) * alpha_.at(t) / (sigma_.at(t) * sigma_.at(t)); }
  const std::vector<double>& alphas() const { return alpha_; }
  const std::vector<double>& sigmas() const { return sigma_; }

 private:
  friend NoiseSchedule make_schedule(int, ScheduleKind);
  int steps_ = 0;
  ScheduleKind kind_ = ScheduleKind::polynomial;
  std::vector<double> alpha_;
  std::vector<double> sigma_;
};

// Throws InvalidSchedule for T < 2.
NoiseSchedule make_schedule(int steps, ScheduleKind kind = ScheduleKind::polynomial);

// Coefficients of q(z_t | z_r) and the reverse kernel width; throws InvalidStepPair unless 0 <= r < t <= T.
Transition transition_params(const NoiseSchedule& s, int t, int r);

}  // namespace rlpf
