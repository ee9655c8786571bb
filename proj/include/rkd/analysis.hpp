#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "rkd/attack.hpp"
#include "rkd/common.hpp"
#include "rkd/data.hpp"
#include "rkd/losses.hpp"
#include "rkd/model.hpp"

namespace rkd {

// Shannon entropy (natural log) of one probability row; 0 log 0 taken as 0.
inline double row_entropy(const double* p, std::size_t c) {
  double h = 0.0;
  for (std::size_t i = 0; i < c; ++i)
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  return h;
}

// Mean prediction entropy over a dataset.
inline double mean_entropy(const ModelSpec& spec, const Params& params, const Dataset& ds) {
  if (ds.n() == 0) throw ValueError("mean_entropy: empty dataset");
  Tensor probs = predict_probs(spec, params, ds.all_inputs());
  const std::size_t c = probs.shape().back();
  double total = 0.0;
  for (std::size_t i = 0; i < ds.n(); ++i)
    total += row_entropy(probs.values().data() + i * c, c);
  return total / static_cast<double>(ds.n());
}

// Mean cross-entropy of one sample across the epoch snapshots: high values
// mark samples the model struggles to learn.
inline double difficulty_score(const ModelSpec& spec, const std::vector<Params>& snapshots,
                               const Tensor& x, int y) {
  if (snapshots.empty()) throw ValueError("difficulty_score: no snapshots");
  double total = 0.0;
  for (const Params& p : snapshots) {
    Tensor probs = predict_probs(spec, p, x);
    const std::size_t c = probs.shape().back();
    if (probs.size() != c) throw ValueError("difficulty_score: expected a single sample");
    total += -std::log(probs.values()[static_cast<std::size_t>(y)] + kLogFloor);
  }
  return total / static_cast<double>(snapshots.size());
}

// Batched scores for a whole dataset (one forward per snapshot).
inline std::vector<double> difficulty_scores(const ModelSpec& spec,
                                             const std::vector<Params>& snapshots,
                                             const Dataset& ds) {
  if (snapshots.empty()) throw ValueError("difficulty_scores: no snapshots");
  std::vector<double> total(ds.n(), 0.0);
  Tensor x = ds.all_inputs();
  for (const Params& p : snapshots) {
    Tensor probs = predict_probs(spec, p, x);
    const std::size_t c = probs.shape().back();
    for (std::size_t i = 0; i < ds.n(); ++i)
      total[i] += -std::log(probs.values()[i * c + static_cast<std::size_t>(ds.labels[i])] +
                            kLogFloor);
  }
  for (double& t : total) t /= static_cast<double>(snapshots.size());
  return total;
}

struct DifficultyRanking {
  // Sorted ascending by score (easiest first); ties broken by sample_id.
  std::vector<std::pair<std::size_t, double>> entries;
};

inline DifficultyRanking build_ranking(const std::vector<double>& scores) {
  DifficultyRanking r;
  r.entries.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) r.entries.emplace_back(i, scores[i]);
  std::sort(r.entries.begin(), r.entries.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second < b.second : a.first < b.first;
  });
  return r;
}

// n lowest-score and n highest-score samples, ties by sample_id ascending.
inline std::pair<std::vector<std::pair<std::size_t, double>>,
                 std::vector<std::pair<std::size_t, double>>>
rank_extremes(const DifficultyRanking& ranking, std::size_t n) {
  if (n > ranking.entries.size())
    throw ValueError(format_msg("rank_extremes: n %zu exceeds %zu samples", n,
                                ranking.entries.size()));
  std::vector<std::pair<std::size_t, double>> easiest(ranking.entries.begin(),
                                                      ranking.entries.begin() + static_cast<long>(n));
  std::vector<std::pair<std::size_t, double>> hardest = ranking.entries;
  std::sort(hardest.begin(), hardest.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  hardest.resize(n);
  return {std::move(easiest), std::move(hardest)};
}

enum class TrajectoryModel { Teacher, Student };
enum class TrajectoryInput { Natural, Adversarial };

// Correct-class probability of one sample at the end of each epoch.
struct Trajectory {
  std::size_t sample_id = 0;
  std::vector<double> probs;
  TrajectoryModel model_tag = TrajectoryModel::Student;
  TrajectoryInput input_kind = TrajectoryInput::Natural;
};

// Adversarial inputs are regenerated against every snapshot: each epoch's
// model defines its own worst case.
inline std::vector<Trajectory> record_trajectories(const ModelSpec& spec,
                                                   const std::vector<Params>& snapshots,
                                                   const Dataset& ds,
                                                   const AttackConfig* attack,
                                                   TrajectoryModel model_tag) {
  if (snapshots.empty()) throw ValueError("record_trajectories: no snapshots");
  std::vector<Trajectory> out(ds.n());
  for (std::size_t i = 0; i < ds.n(); ++i) {
    out[i].sample_id = i;
    out[i].probs.resize(snapshots.size());
    out[i].model_tag = model_tag;
    out[i].input_kind = attack ? TrajectoryInput::Adversarial : TrajectoryInput::Natural;
  }
  Tensor x = ds.all_inputs();
  for (std::size_t k = 0; k < snapshots.size(); ++k) {
    Tensor x_eval = x;
    if (attack) {
      AttackConfig acfg = *attack;
      acfg.seed = mix_seed(attack->seed, 0x72616aULL /* trajectory stream */, k);
      x_eval = run_attack(ce_objective(spec, snapshots[k]), x, ds.labels, acfg);
    }
    Tensor probs = predict_probs(spec, snapshots[k], x_eval);
    const std::size_t c = probs.shape().back();
    for (std::size_t i = 0; i < ds.n(); ++i)
      out[i].probs[k] = probs.values()[i * c + static_cast<std::size_t>(ds.labels[i])];
  }
  return out;
}

inline Trajectory record_trajectory(const ModelSpec& spec, const std::vector<Params>& snapshots,
                                    const Tensor& x, int y, const AttackConfig* attack,
                                    TrajectoryModel model_tag = TrajectoryModel::Student) {
  if (snapshots.empty()) throw ValueError("record_trajectory: no snapshots");
  Trajectory t;
  t.probs.resize(snapshots.size());
  t.model_tag = model_tag;
  t.input_kind = attack ? TrajectoryInput::Adversarial : TrajectoryInput::Natural;
  const std::vector<int> ys{y};
  for (std::size_t k = 0; k < snapshots.size(); ++k) {
    Tensor x_eval = x;
    if (attack) {
      AttackConfig acfg = *attack;
      acfg.seed = mix_seed(attack->seed, 0x72616aULL, k);
      x_eval = run_attack(ce_objective(spec, snapshots[k]), x, ys, acfg);
    }
    Tensor probs = predict_probs(spec, snapshots[k], x_eval);
    t.probs[k] = probs.values()[static_cast<std::size_t>(y)];
  }
  return t;
}

inline double inner_product(const Trajectory& a, const Trajectory& b) {
  if (a.probs.size() != b.probs.size())
    throw ValueError(format_msg("trajectory: lengths %zu and %zu disagree", a.probs.size(),
                                b.probs.size()));
  double dot = 0.0;
  for (std::size_t i = 0; i < a.probs.size(); ++i) dot += a.probs[i] * b.probs[i];
  return dot;
}

// Normalized inner product; in [0,1] for probability trajectories.
inline double cosine_similarity(const Trajectory& a, const Trajectory& b) {
  const double dot = inner_product(a, b);
  double na = 0.0, nb = 0.0;
  for (double v : a.probs) na += v * v;
  for (double v : b.probs) nb += v * v;
  if (na == 0.0 || nb == 0.0) throw ValueError("cosine_similarity: zero trajectory");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 1.0);
}

struct ImprovementPoint {
  std::size_t rank = 0;  // position in the difficulty ranking
  std::size_t sample_id = 0;
  double delta = 0.0;  // p_{S,K} - p_{T,K}
};

// Final-epoch probability gain of the student over the teacher, ordered by
// difficulty rank.
inline std::vector<ImprovementPoint> improvement_curve(const std::vector<Trajectory>& student,
                                                       const std::vector<Trajectory>& teacher,
                                                       const DifficultyRanking& ranking) {
  std::unordered_map<std::size_t, const Trajectory*> by_id_s, by_id_t;
  for (const auto& t : student) by_id_s[t.sample_id] = &t;
  for (const auto& t : teacher) by_id_t[t.sample_id] = &t;
  std::vector<ImprovementPoint> out;
  out.reserve(ranking.entries.size());
  for (std::size_t r = 0; r < ranking.entries.size(); ++r) {
    const std::size_t id = ranking.entries[r].first;
    auto is = by_id_s.find(id);
    auto it = by_id_t.find(id);
    if (is == by_id_s.end() || it == by_id_t.end())
      throw ValueError(format_msg("improvement_curve: sample %zu missing a trajectory", id));
    if (is->second->probs.size() != it->second->probs.size())
      throw ValueError(format_msg("improvement_curve: sample %zu trajectory lengths disagree", id));
    out.push_back({r, id, is->second->probs.back() - it->second->probs.back()});
  }
  return out;
}

// Centered moving average with truncated windows at the edges; output length
// equals input length.
inline std::vector<double> moving_average(const std::vector<double>& series, std::size_t window) {
  if (window < 1 || window % 2 == 0)
    throw ValueError(format_msg("moving_average: window %zu must be odd and >= 1", window));
  if (window > series.size())
    throw ValueError(format_msg("moving_average: window %zu exceeds series length %zu", window,
                                series.size()));
  const std::size_t h = window / 2;
  std::vector<double> out(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) {
    const std::size_t lo = i >= h ? i - h : 0;
    const std::size_t hi = std::min(i + h, series.size() - 1);
    double s = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) s += series[j];
    out[i] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

}  // namespace rkd
