#pragma once

#include <cmath>
#include <string>

#include "rkd/common.hpp"

namespace rkd {

// Learning-rate schedules: exponential decay steps once per epoch, one-cycle
// is two linear phases updated every batch, peaking at max_lr halfway.
struct Schedule {
  enum class Kind { Exponential, OneCycle, Constant };
  Kind kind = Kind::Exponential;
  double base_lr = 0.1;
  double decay = 0.9;      // exponential, applied at the end of every epoch
  double max_lr = 0.21;    // one_cycle peak
  long total_steps = 0;    // one_cycle; the training loop fills it when 0
  double warmup_div = 25.0;    // one_cycle start lr = max_lr / warmup_div
  double final_div = 2500.0;   // one_cycle end lr = max_lr / final_div

  void validate() const {
    if (kind == Kind::OneCycle) {
      if (!(max_lr > 0.0)) throw ValueError(format_msg("schedule: max_lr %g <= 0", max_lr));
      if (!(warmup_div > 1.0) || !(final_div > 1.0))
        throw ValueError("schedule: one_cycle divisors must be > 1");
    } else {
      if (!(base_lr > 0.0)) throw ValueError(format_msg("schedule: base_lr %g <= 0", base_lr));
      if (kind == Kind::Exponential && !(decay > 0.0 && decay <= 1.0))
        throw ValueError(format_msg("schedule: decay %g outside (0,1]", decay));
    }
  }
};

inline Schedule::Kind schedule_kind_from_string(const std::string& s) {
  if (s == "exponential") return Schedule::Kind::Exponential;
  if (s == "one_cycle") return Schedule::Kind::OneCycle;
  if (s == "constant") return Schedule::Kind::Constant;
  throw ValueError(format_msg("schedule: unknown kind '%s'", s.c_str()));
}

inline const char* schedule_kind_name(Schedule::Kind k) {
  switch (k) {
    case Schedule::Kind::Exponential: return "exponential";
    case Schedule::Kind::OneCycle: return "one_cycle";
    case Schedule::Kind::Constant: return "constant";
  }
  return "?";
}

inline double lr_at(const Schedule& s, int epoch, int step_in_epoch, int steps_per_epoch) {
  s.validate();
  if (epoch < 0 || step_in_epoch < 0 || steps_per_epoch < 1)
    throw ValueError("lr_at: indices out of range");
  switch (s.kind) {
    case Schedule::Kind::Constant:
      return s.base_lr;
    case Schedule::Kind::Exponential: {
      // Repeated multiplication, so epoch-k values are reproducible exactly.
      double lr = s.base_lr;
      for (int i = 0; i < epoch; ++i) lr *= s.decay;
      return lr;
    }
    case Schedule::Kind::OneCycle: {
      if (s.total_steps < 2) throw ValueError("lr_at: one_cycle needs total_steps >= 2");
      const double T = static_cast<double>(s.total_steps);
      double t = static_cast<double>(epoch) * steps_per_epoch + step_in_epoch;
      t = std::min(std::max(t, 0.0), T);
      const double half = T / 2.0;
      const double start = s.max_lr / s.warmup_div;
      const double end = s.max_lr / s.final_div;
      if (t <= half) {
        const double u = t / half;
        return start * (1.0 - u) + s.max_lr * u;  // hits max_lr exactly at mid-run
      }
      const double u = (t - half) / (T - half);
      return s.max_lr * (1.0 - u) + end * u;
    }
  }
  throw ValueError("lr_at: unknown schedule kind");
}

}  // namespace rkd
