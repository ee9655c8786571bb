#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rkd/common.hpp"
#include "rkd/losses.hpp"
#include "rkd/model.hpp"
#include "rkd/tensor.hpp"

namespace rkd {

enum class AttackMethod { Fgsm, Ffgsm, Pgd };

inline AttackMethod attack_method_from_string(const std::string& s) {
  if (s == "fgsm") return AttackMethod::Fgsm;
  if (s == "ffgsm") return AttackMethod::Ffgsm;
  if (s == "pgd") return AttackMethod::Pgd;
  throw ValueError(format_msg("attack: unknown method '%s'", s.c_str()));
}

inline const char* attack_method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::Fgsm: return "fgsm";
    case AttackMethod::Ffgsm: return "ffgsm";
    case AttackMethod::Pgd: return "pgd";
  }
  return "?";
}

struct AttackConfig {
  AttackMethod method = AttackMethod::Pgd;
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int iterations = 7;
  bool random_start = true;
  int restarts = 1;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (epsilon < 0.0) throw ValueError(format_msg("attack: epsilon %g < 0", epsilon));
    if (!(step_size > 0.0)) throw ValueError(format_msg("attack: step_size %g <= 0", step_size));
    if (iterations < 1) throw ValueError(format_msg("attack: iterations %d < 1", iterations));
    if (restarts < 1) throw ValueError(format_msg("attack: restarts %d < 1", restarts));
    if (!(clamp_lo < clamp_hi))
      throw ValueError(format_msg("attack: clamp range [%g, %g] is empty", clamp_lo, clamp_hi));
  }
};

// What an attack needs from the model: per-sample losses at x and the
// gradient of the batch loss with respect to x.
struct ObjectiveEval {
  std::vector<double> per_sample_loss;
  Tensor grad;
};
using AttackObjective = std::function<ObjectiveEval(const Tensor& x, const std::vector<int>& y)>;

// Cross-entropy against a frozen copy of the model; the canonical attack
// objective. Freezing keeps the caller's parameter gradients untouched.
inline AttackObjective ce_objective(const ModelSpec& spec, const Params& params) {
  Params frozen = params.frozen_clone();
  return [spec, frozen = std::move(frozen)](const Tensor& x,
                                            const std::vector<int>& y) -> ObjectiveEval {
    Tensor xg = x.detach();
    xg.set_requires_grad(true);
    Tensor probs = probs_graph(spec, frozen, xg);
    Tensor loss = cross_entropy_soft(probs, one_hot(y, spec.num_classes));
    backward(loss);
    const std::size_t c = probs.shape().back();
    std::vector<double> per_sample(y.size());
    for (std::size_t i = 0; i < y.size(); ++i)
      per_sample[i] =
          -std::log(probs.values()[i * c + static_cast<std::size_t>(y[i])] + kLogFloor);
    return ObjectiveEval{std::move(per_sample),
                         Tensor::from_values(x.shape(), xg.grad())};
  };
}

inline AttackObjective ce_objective(const Model& m) { return ce_objective(m.spec, m.params); }

// Coordinatewise clip of x_adv into [x - eps, x + eps] intersected with the
// clamp range.
inline Tensor project_linf(const Tensor& x_adv, const Tensor& x_orig, double epsilon,
                           double clamp_lo, double clamp_hi) {
  if (x_adv.shape() != x_orig.shape())
    throw ValueError(format_msg("project_linf: shapes %s and %s disagree",
                                shape_str(x_adv.shape()).c_str(),
                                shape_str(x_orig.shape()).c_str()));
  Tensor out = x_adv.detach();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double o = x_orig.values()[i];
    double v = std::min(std::max(out.values()[i], o - epsilon), o + epsilon);
    out.values()[i] = std::min(std::max(v, clamp_lo), clamp_hi);
  }
  return out;
}

namespace detail {

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline Tensor signed_step(const Tensor& x, const Tensor& grad, double step) {
  Tensor out = x.detach();
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values()[i] += step * sign0(grad.values()[i]);
  return out;
}

inline Tensor random_start_point(const Tensor& x, const AttackConfig& cfg, std::uint64_t seed) {
  Tensor out = x.detach();
  Rng rng(seed);
  for (double& v : out.values()) v += rng.uniform(-cfg.epsilon, cfg.epsilon);
  return project_linf(out, x, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi);
}

}  // namespace detail

// Single signed-gradient step of size epsilon from x.
inline Tensor fgsm(const AttackObjective& objective, const Tensor& x, const std::vector<int>& y,
                   const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.epsilon == 0.0) return project_linf(x, x, 0.0, cfg.clamp_lo, cfg.clamp_hi);
  Tensor stepped = detail::signed_step(x, objective(x, y).grad, cfg.epsilon);
  return project_linf(stepped, x, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi);
}

// Single step of cfg.step_size from a uniform random point in the eps-ball.
inline Tensor ffgsm(const AttackObjective& objective, const Tensor& x, const std::vector<int>& y,
                    const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.epsilon == 0.0) return project_linf(x, x, 0.0, cfg.clamp_lo, cfg.clamp_hi);
  Tensor start = detail::random_start_point(x, cfg, mix_seed(cfg.seed, 0xffu));
  Tensor stepped = detail::signed_step(start, objective(start, y).grad, cfg.step_size);
  return project_linf(stepped, x, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi);
}

// cfg.iterations rounds of signed-gradient ascent with projection after each
// step. With restarts > 1 (evaluation mode) the per-sample result with the
// highest final loss is kept.
inline Tensor pgd(const AttackObjective& objective, const Tensor& x, const std::vector<int>& y,
                  const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.epsilon == 0.0) return project_linf(x, x, 0.0, cfg.clamp_lo, cfg.clamp_hi);

  Tensor best;
  std::vector<double> best_loss;
  for (int r = 0; r < cfg.restarts; ++r) {
    Tensor x_adv = cfg.random_start
                       ? detail::random_start_point(x, cfg, mix_seed(cfg.seed, 0xadu, r))
                       : x.detach();
    for (int it = 0; it < cfg.iterations; ++it) {
      Tensor stepped = detail::signed_step(x_adv, objective(x_adv, y).grad, cfg.step_size);
      x_adv = project_linf(stepped, x, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi);
    }
    if (cfg.restarts == 1) return x_adv;

    std::vector<double> loss = objective(x_adv, y).per_sample_loss;
    if (r == 0) {
      best = std::move(x_adv);
      best_loss = std::move(loss);
    } else {
      const std::size_t d = x.size() / y.size();
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (loss[i] > best_loss[i]) {
          best_loss[i] = loss[i];
          std::copy_n(x_adv.values().begin() + static_cast<long>(i * d), d,
                      best.values().begin() + static_cast<long>(i * d));
        }
      }
    }
  }
  return best;
}

inline Tensor run_attack(const AttackObjective& objective, const Tensor& x,
                         const std::vector<int>& y, const AttackConfig& cfg) {
  switch (cfg.method) {
    case AttackMethod::Fgsm: return fgsm(objective, x, y, cfg);
    case AttackMethod::Ffgsm: return ffgsm(objective, x, y, cfg);
    case AttackMethod::Pgd: return pgd(objective, x, y, cfg);
  }
  throw ValueError("attack: unknown method");
}

}  // namespace rkd
