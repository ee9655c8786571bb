#pragma once

#include <string>
#include <vector>

#include "rkd/common.hpp"
#include "rkd/model.hpp"
#include "rkd/tensor.hpp"

namespace rkd {

// Additive floor inside every log in the losses.
inline constexpr double kLogFloor = 1e-12;

inline void validate_prob_rows(const Tensor& t, const char* what) {
  if (t.shape().empty()) throw ValueError(format_msg("%s: expected probability rows", what));
  const std::size_t c = t.shape().back();
  const std::size_t rows = t.size() / c;
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      const double v = t.values()[r * c + i];
      if (v < 0.0)
        throw ValueError(format_msg("%s: negative probability %g in row %zu", what, v, r));
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ValueError(format_msg("%s: row %zu sums to %.12g, expected 1", what, r, sum));
  }
}

// Rows that are valid distributions; used for one-hot labels and mixed
// distillation targets alike.
struct SoftTarget {
  Tensor probs;

  static SoftTarget from_probs(Tensor probs) {
    validate_prob_rows(probs, "soft_target");
    return SoftTarget{std::move(probs)};
  }
  static SoftTarget from_labels(const std::vector<int>& y, int num_classes) {
    return SoftTarget{one_hot(y, num_classes)};
  }
};

enum class LossTag { CE, CKD, ARD, RSLAD, RSLAD_LM, AKD, ENSEMBLE_AKD };

struct LossVariant {
  LossTag tag = LossTag::CE;
  double lambda = 0.5;  // CE/KL mixing for the CKD/ARD/RSLAD family
  double alpha = 0.5;   // label mixing

  void validate() const {
    if (lambda < 0.0 || lambda > 1.0)
      throw ValueError(format_msg("loss: lambda %g outside [0,1]", lambda));
    if (alpha < 0.0 || alpha > 1.0)
      throw ValueError(format_msg("loss: alpha %g outside [0,1]", alpha));
  }
  bool needs_teacher() const { return tag != LossTag::CE; }
  bool needs_adversarial() const {
    return tag == LossTag::ARD || tag == LossTag::RSLAD || tag == LossTag::RSLAD_LM ||
           tag == LossTag::AKD || tag == LossTag::ENSEMBLE_AKD;
  }
};

inline LossTag loss_tag_from_string(const std::string& s) {
  if (s == "CE") return LossTag::CE;
  if (s == "CKD") return LossTag::CKD;
  if (s == "ARD") return LossTag::ARD;
  if (s == "RSLAD") return LossTag::RSLAD;
  if (s == "RSLAD_LM") return LossTag::RSLAD_LM;
  if (s == "AKD") return LossTag::AKD;
  if (s == "ENSEMBLE_AKD") return LossTag::ENSEMBLE_AKD;
  throw ValueError(format_msg("loss: unknown tag '%s'", s.c_str()));
}

inline const char* loss_tag_name(LossTag t) {
  switch (t) {
    case LossTag::CE: return "CE";
    case LossTag::CKD: return "CKD";
    case LossTag::ARD: return "ARD";
    case LossTag::RSLAD: return "RSLAD";
    case LossTag::RSLAD_LM: return "RSLAD_LM";
    case LossTag::AKD: return "AKD";
    case LossTag::ENSEMBLE_AKD: return "ENSEMBLE_AKD";
  }
  return "?";
}

// ---- primitives -------------------------------------------------------------

// Mean over the batch of -sum_i t_i log(p_i + 1e-12).
inline Tensor cross_entropy_soft(const Tensor& pred_probs, const Tensor& target_probs) {
  if (pred_probs.shape() != target_probs.shape())
    throw ValueError(format_msg("cross_entropy: shapes %s and %s disagree",
                                shape_str(pred_probs.shape()).c_str(),
                                shape_str(target_probs.shape()).c_str()));
  validate_prob_rows(target_probs, "cross_entropy target");
  const std::size_t batch = pred_probs.size() / pred_probs.shape().back();
  Tensor total = sum(mul(target_probs, log(pred_probs, kLogFloor)));
  return scale(total, -1.0 / static_cast<double>(batch));
}

inline Tensor cross_entropy_soft(const Tensor& pred_probs, const SoftTarget& target) {
  return cross_entropy_soft(pred_probs, target.probs);
}

// Mean over the batch of sum_i q_i log((q_i + 1e-12) / (p_i + 1e-12)) with
// q = teacher and p = student: the direction whose gradient pulls the student
// toward the teacher. Callers writing KL(f_S, f_T) pass the student first.
inline Tensor kl_divergence(const Tensor& student_probs, const Tensor& teacher_probs) {
  if (student_probs.shape() != teacher_probs.shape())
    throw ValueError(format_msg("kl_divergence: shapes %s and %s disagree",
                                shape_str(student_probs.shape()).c_str(),
                                shape_str(teacher_probs.shape()).c_str()));
  const std::size_t batch = student_probs.size() / student_probs.shape().back();
  Tensor ratio = sub(log(teacher_probs, kLogFloor), log(student_probs, kLogFloor));
  Tensor total = sum(mul(teacher_probs, ratio));
  return scale(total, 1.0 / static_cast<double>(batch));
}

// alpha * teacher + (1 - alpha) * y.
inline Tensor mix_labels(const Tensor& teacher_probs, const Tensor& y_onehot, double alpha) {
  if (alpha < 0.0 || alpha > 1.0)
    throw ValueError(format_msg("mix_labels: alpha %g outside [0,1]", alpha));
  if (teacher_probs.shape() != y_onehot.shape())
    throw ValueError(format_msg("mix_labels: shapes %s and %s disagree",
                                shape_str(teacher_probs.shape()).c_str(),
                                shape_str(y_onehot.shape()).c_str()));
  return add(scale(teacher_probs, alpha), scale(y_onehot, 1.0 - alpha));
}

// ---- the loss family over probability tensors --------------------------------

// (1 - lambda) CE(p_S, y) + lambda KL(p_S, p_T), both terms at the same input.
inline Tensor ckd_terms(const Tensor& ps, const Tensor& pt, const Tensor& y_onehot,
                        double lambda) {
  return add(scale(cross_entropy_soft(ps, y_onehot), 1.0 - lambda),
             scale(kl_divergence(ps, pt), lambda));
}

// (1 - lambda) CE(p_S(x), y) + lambda KL(p_S(x'), p_T(x)).
inline Tensor ard_terms(const Tensor& ps_clean, const Tensor& ps_adv, const Tensor& pt_clean,
                        const Tensor& y_onehot, double lambda) {
  return add(scale(cross_entropy_soft(ps_clean, y_onehot), 1.0 - lambda),
             scale(kl_divergence(ps_adv, pt_clean), lambda));
}

// (1 - lambda) KL(p_S(x), target) + lambda KL(p_S(x'), target); the plain
// variant targets p_T(x), the label-mixed one targets the mixture.
inline Tensor rslad_terms(const Tensor& ps_clean, const Tensor& ps_adv, const Tensor& target,
                          double lambda) {
  return add(scale(kl_divergence(ps_clean, target), 1.0 - lambda),
             scale(kl_divergence(ps_adv, target), lambda));
}

// ---- model-level losses ------------------------------------------------------

inline Tensor ce_loss(const Model& student, const Tensor& x, const std::vector<int>& y) {
  return cross_entropy_soft(probs_graph(student.spec, student.params, x),
                            one_hot(y, student.spec.num_classes));
}

inline Tensor ckd_loss(const Model& student, const Model& teacher, const Tensor& x,
                       const std::vector<int>& y, double lambda) {
  Tensor ps = probs_graph(student.spec, student.params, x);
  Tensor pt = predict_probs(teacher.spec, teacher.params, x);
  return ckd_terms(ps, pt, one_hot(y, student.spec.num_classes), lambda);
}

inline Tensor ard_loss(const Model& student, const Model& teacher, const Tensor& x,
                       const Tensor& x_adv, const std::vector<int>& y, double lambda) {
  Tensor ps_clean = probs_graph(student.spec, student.params, x);
  Tensor ps_adv = probs_graph(student.spec, student.params, x_adv);
  Tensor pt = predict_probs(teacher.spec, teacher.params, x);
  return ard_terms(ps_clean, ps_adv, pt, one_hot(y, student.spec.num_classes), lambda);
}

inline Tensor rslad_loss(const Model& student, const Model& teacher, const Tensor& x,
                         const Tensor& x_adv, double lambda) {
  Tensor ps_clean = probs_graph(student.spec, student.params, x);
  Tensor ps_adv = probs_graph(student.spec, student.params, x_adv);
  Tensor pt = predict_probs(teacher.spec, teacher.params, x);
  return rslad_terms(ps_clean, ps_adv, pt, lambda);
}

// Label-mixed generalization: both KL terms target alpha f_T(x) + (1-alpha) y.
inline Tensor rslad_lm_loss(const Model& student, const Model& teacher, const Tensor& x,
                            const Tensor& x_adv, const std::vector<int>& y, double lambda,
                            double alpha) {
  if (y.empty()) throw ValueError("rslad_lm: labels required for label mixing");
  Tensor ps_clean = probs_graph(student.spec, student.params, x);
  Tensor ps_adv = probs_graph(student.spec, student.params, x_adv);
  Tensor pt = predict_probs(teacher.spec, teacher.params, x);
  Tensor target = mix_labels(pt, one_hot(y, student.spec.num_classes), alpha);
  return rslad_terms(ps_clean, ps_adv, target, lambda);
}

// CE(f_S(x'), alpha f_T(x') + (1-alpha) y); the teacher is evaluated at the
// adversarial point.
inline Tensor akd_loss(const Model& student, const EnsembleTeacher& teacher, const Tensor& x_adv,
                       const std::vector<int>& y, double alpha) {
  Tensor ps_adv = probs_graph(student.spec, student.params, x_adv);
  Tensor pt_adv = ensemble_probs(teacher, x_adv);
  Tensor target = mix_labels(pt_adv, one_hot(y, student.spec.num_classes), alpha);
  return cross_entropy_soft(ps_adv, target);
}

inline Tensor akd_loss(const Model& student, const Model& teacher, const Tensor& x_adv,
                       const std::vector<int>& y, double alpha) {
  return akd_loss(student, EnsembleTeacher::single(teacher), x_adv, y, alpha);
}

// Dispatch used by the training loop. x_adv must be defined for the
// adversarial variants; CE trains on x_adv when present (adversarial
// training) and on x otherwise. For the KL-family losses an ensemble teacher
// enters through its mixed probabilities.
inline Tensor distill_loss(const LossVariant& variant, const Model& student,
                           const EnsembleTeacher* teacher, const Tensor& x, const Tensor& x_adv,
                           const std::vector<int>& y) {
  variant.validate();
  if (variant.needs_teacher() && (teacher == nullptr || teacher->members.empty()))
    throw ValueError(format_msg("loss %s: teacher required", loss_tag_name(variant.tag)));
  if (variant.needs_adversarial() && !x_adv.defined())
    throw ValueError(
        format_msg("loss %s: adversarial inputs required", loss_tag_name(variant.tag)));
  const int c = student.spec.num_classes;
  switch (variant.tag) {
    case LossTag::CE:
      return ce_loss(student, x_adv.defined() ? x_adv : x, y);
    case LossTag::CKD: {
      Tensor ps = probs_graph(student.spec, student.params, x);
      return ckd_terms(ps, ensemble_probs(*teacher, x), one_hot(y, c), variant.lambda);
    }
    case LossTag::ARD: {
      Tensor ps_clean = probs_graph(student.spec, student.params, x);
      Tensor ps_adv = probs_graph(student.spec, student.params, x_adv);
      return ard_terms(ps_clean, ps_adv, ensemble_probs(*teacher, x), one_hot(y, c),
                       variant.lambda);
    }
    case LossTag::RSLAD: {
      Tensor ps_clean = probs_graph(student.spec, student.params, x);
      Tensor ps_adv = probs_graph(student.spec, student.params, x_adv);
      return rslad_terms(ps_clean, ps_adv, ensemble_probs(*teacher, x), variant.lambda);
    }
    case LossTag::RSLAD_LM: {
      if (y.empty()) throw ValueError("rslad_lm: labels required for label mixing");
      Tensor ps_clean = probs_graph(student.spec, student.params, x);
      Tensor ps_adv = probs_graph(student.spec, student.params, x_adv);
      Tensor target = mix_labels(ensemble_probs(*teacher, x), one_hot(y, c), variant.alpha);
      return rslad_terms(ps_clean, ps_adv, target, variant.lambda);
    }
    case LossTag::AKD:
    case LossTag::ENSEMBLE_AKD:
      return akd_loss(student, *teacher, x_adv, y, variant.alpha);
  }
  throw ValueError("loss: unknown variant");
}

}  // namespace rkd
