#include "rlpf/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rlpf {

namespace {

constexpr double kPrecision = 1e-5;      // α_0² = 1 − s, α_T² ≥ s
constexpr double kMinStepRatio = 1e-3;   // floor on α_t² / α_{t-1}²
constexpr double kSigmaFloor = 1e-6;
constexpr double kCosineOffset = 0.008;

std::vector<double> base_alpha2(int steps, ScheduleKind kind) {
  std::vector<double> a2(steps + 1);
  for (int t = 0; t <= steps; ++t) {
    const double u = static_cast<double>(t) / steps;
    if (kind == ScheduleKind::polynomial) {
      a2[t] = (1.0 - u * u) * (1.0 - u * u);
    } else {
      const double f = std::cos((u + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2);
      const double f0 = std::cos(kCosineOffset / (1.0 + kCosineOffset) * std::numbers::pi / 2);
      a2[t] = (f * f) / (f0 * f0);
    }
  }
  // Clip per-step ratios so that no reverse step divides by a vanishing α_{t|t-1}.
  std::vector<double> clipped(steps + 1);
  clipped[0] = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double ratio = a2[t - 1] > 0 ? a2[t] / a2[t - 1] : 0.0;
    clipped[t] = clipped[t - 1] * std::clamp(ratio, kMinStepRatio, 1.0);
  }
  return clipped;
}

}  // namespace

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::polynomial ? "polynomial" : "cosine";
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "polynomial") return ScheduleKind::polynomial;
  if (name == "cosine") return ScheduleKind::cosine;
  throw InvalidSchedule("unknown schedule kind '" + name + "'");
}

NoiseSchedule make_schedule(int steps, ScheduleKind kind) {
  if (steps < 2) throw InvalidSchedule("make_schedule: T must be >= 2, got " + std::to_string(steps));
  NoiseSchedule s;
  s.steps_ = steps;
  s.kind_ = kind;
  const auto a2 = base_alpha2(steps, kind);
  s.alpha_.resize(steps + 1);
  s.sigma_.resize(steps + 1);
  for (int t = 0; t <= steps; ++t) {
    const double alpha2 = (1.0 - 2.0 * kPrecision) * a2[t] + kPrecision;
    s.alpha_[t] = std::sqrt(alpha2);
    s.sigma_[t] = std::max(std::sqrt(1.0 - alpha2), kSigmaFloor);
  }
  return s;
}

Transition transition_params(const NoiseSchedule& s, int t, int r) {
  if (!(0 <= r && r < t && t <= s.steps()))
    throw InvalidStepPair("transition_params: need 0 <= r < t <= T, got t=" + std::to_string(t) +
                          " r=" + std::to_string(r));
  Transition tr{};
  tr.alpha = s.alpha(t) / s.alpha(r);
  const double var = s.sigma(t) * s.sigma(t) - tr.alpha * tr.alpha * s.sigma(r) * s.sigma(r);
  tr.sigma = std::sqrt(std::max(var, 0.0));
  tr.sigma_rev = tr.sigma * s.sigma(r) / s.sigma(t);
  return tr;
}

}  // namespace rlpf
