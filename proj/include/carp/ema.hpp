#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>

#include "carp/model.hpp"
#include "carp/numerics.hpp"

namespace carp {

/// end + (start - end) * (1 + cos(pi * step / total)) / 2
struct CosineSchedule {
  double start = 0.0;
  double end = 0.0;
  std::size_t total_steps = 1;
};

inline double schedule_value(const CosineSchedule& s, std::size_t step) {
  require(s.total_steps >= 1, "schedule_value: total_steps must be >= 1");
  require(step <= s.total_steps, "schedule_value: step " + std::to_string(step) +
                                     " past total " + std::to_string(s.total_steps));
  if (step == 0) return s.start;
  if (step == s.total_steps) return s.end;
  const double phase = std::numbers::pi * static_cast<double>(step) /
                       static_cast<double>(s.total_steps);
  return s.end + 0.5 * (s.start - s.end) * (1.0 + std::cos(phase));
}

/// Teacher momentum, annealed from eta_start up to eta_end.
struct EmaSchedule {
  double eta_start = 0.99;
  double eta_end = 1.0;
  std::size_t total_steps = 1;

  void validate() const {
    require(0.0 <= eta_start && eta_start <= eta_end && eta_end <= 1.0,
            "EmaSchedule: need 0 <= eta_start <= eta_end <= 1");
    require(total_steps >= 1, "EmaSchedule: total_steps must be >= 1");
  }

  double at(std::size_t step) const {
    validate();
    return schedule_value({eta_start, eta_end, total_steps}, step);
  }
};

/// teacher <- eta * teacher + (1 - eta) * student, leaf by leaf.
inline void ema_update(ModelParams& teacher, const ModelParams& student, double eta) {
  require(same_structure(teacher, student), "ema_update: teacher/student shapes differ");
  require(0.0 <= eta && eta <= 1.0, "ema_update: eta outside [0, 1]");
  auto t = leaves(teacher);
  const auto s = leaves(student);
  if (eta == 1.0) return;
  if (eta == 0.0) {
    teacher = student;
    return;
  }
  // Written as a step toward the student so equal leaves stay bit-identical.
  const double mix = 1.0 - eta;
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t e = 0; e < t[i].values.size(); ++e)
      t[i].values[e] += mix * (s[i].values[e] - t[i].values[e]);
}

}  // namespace carp
