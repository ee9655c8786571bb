#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rkd/analysis.hpp"
#include "rkd/checkpoint.hpp"
#include "rkd/common.hpp"
#include "rkd/config.hpp"
#include "rkd/train.hpp"

namespace rkd {

// Run orchestration behind the CLI subcommands. Every output file carries the
// config hash; everything except the timing sidecars is a pure function of
// the config.

namespace paths {

inline std::string teacher_dir(const std::string& out, int member) {
  return out + "/teacher_" + std::to_string(member);
}
inline std::string teacher_ckpt(const std::string& out, int member, int epoch) {
  return teacher_dir(out, member) + "/teacher_ep" + std::to_string(epoch) + ".ckpt";
}
inline std::string student_dir(const std::string& out) { return out + "/student"; }
inline std::string student_final(const std::string& out) {
  return student_dir(out) + "/student_final.ckpt";
}
inline std::string student_ckpt(const std::string& out, int epoch) {
  return student_dir(out) + "/student_ep" + std::to_string(epoch) + ".ckpt";
}

}  // namespace paths

namespace detail {

inline Dataset shaped_for_model(const Dataset& ds, const ModelConfig& m) {
  if (m.kind == ModelKind::Mlp && ds.sample_shape.size() > 1) return ds.flattened();
  return ds;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out || !out.write(content.data(), static_cast<long>(content.size())))
    throw ArtifactError(format_msg("harness: cannot write %s", path.c_str()));
}

inline nlohmann::json attack_json(const AttackConfig& a) {
  return nlohmann::json{{"method", attack_method_name(a.method)},
                        {"epsilon", a.epsilon},
                        {"step_size", a.step_size},
                        {"iterations", a.iterations},
                        {"random_start", a.random_start},
                        {"restarts", a.restarts},
                        {"clamp_lo", a.clamp_lo},
                        {"clamp_hi", a.clamp_hi},
                        {"seed", a.seed}};
}

}  // namespace detail

// Which teacher snapshot students distill from: an explicit student override,
// else the teacher's early-stop epoch, else the final epoch.
inline int resolved_teacher_epoch(const ExperimentConfig& cfg) {
  if (!cfg.teacher) throw ConfigError("config: 'teacher' block required");
  if (cfg.student && cfg.student->teacher_epoch) return *cfg.student->teacher_epoch;
  if (cfg.teacher->train.early_stop_epoch) return *cfg.teacher->train.early_stop_epoch;
  return cfg.teacher->train.epochs;
}

inline void run_train_teacher(const ExperimentConfig& cfg) {
  if (!cfg.teacher) throw ConfigError("config: 'teacher' block required for train-teacher");
  auto [train_raw, test_raw] = build_datasets(cfg.dataset);
  Dataset train_set = detail::shaped_for_model(train_raw, cfg.model);
  Dataset test_set = detail::shaped_for_model(test_raw, cfg.model);
  const ModelSpec spec = build_model_spec(cfg.model, train_set);

  for (int m = 0; m < cfg.teacher->count; ++m) {
    TrainConfig tc = cfg.teacher->train;
    tc.seed = cfg.teacher->seeds[static_cast<std::size_t>(m)];
    TrainOptions opts;
    opts.checkpoint_dir = paths::teacher_dir(cfg.output_dir, m);
    opts.checkpoint_prefix = "teacher";
    opts.meta = cfg.config_hash;
    TrainResult res = train(spec, train_set, tc, nullptr, &test_set, opts);
    if (!tc.checkpoint_every_epoch) {
      save_checkpoint(spec, res.final_params, paths::teacher_ckpt(cfg.output_dir, m, tc.epochs),
                      static_cast<std::uint32_t>(tc.epochs), cfg.config_hash);
      if (tc.early_stop_epoch)
        save_checkpoint(spec, res.designated_params,
                        paths::teacher_ckpt(cfg.output_dir, m, *tc.early_stop_epoch),
                        static_cast<std::uint32_t>(*tc.early_stop_epoch), cfg.config_hash);
    }
    write_runlog_jsonl(res.log, paths::teacher_dir(cfg.output_dir, m) + "/runlog.jsonl",
                       cfg.config_hash);
  }
}

// Loads the teacher ensemble at the resolved epoch; fails before any training
// starts if a member checkpoint is missing or incompatible.
inline EnsembleTeacher load_teacher_ensemble(const ExperimentConfig& cfg, const ModelSpec& spec) {
  if (!cfg.teacher) throw ConfigError("config: 'teacher' block required");
  const int epoch = resolved_teacher_epoch(cfg);
  EnsembleTeacher ens;
  ens.beta = cfg.teacher->beta;
  for (int m = 0; m < cfg.teacher->count; ++m) {
    const std::string path = paths::teacher_ckpt(cfg.output_dir, m, epoch);
    if (!std::filesystem::exists(path))
      throw ArtifactError(format_msg("harness: teacher checkpoint %s not found; run train-teacher",
                                     path.c_str()));
    Checkpoint ck = load_checkpoint(path);
    if (!(ck.spec == spec))
      throw ArtifactError(format_msg("harness: %s was written for a different model spec",
                                     path.c_str()));
    ens.members.push_back(Model{ck.spec, std::move(ck.params)});
  }
  ens.validate();
  return ens;
}

inline void run_train_student(const ExperimentConfig& cfg) {
  if (!cfg.student) throw ConfigError("config: 'student' block required for train-student");
  auto [train_raw, test_raw] = build_datasets(cfg.dataset);
  Dataset train_set = detail::shaped_for_model(train_raw, cfg.model);
  Dataset test_set = detail::shaped_for_model(test_raw, cfg.model);
  const ModelSpec spec = build_model_spec(cfg.model, train_set);

  EnsembleTeacher ens;
  const bool needs_teacher = cfg.student->train.loss.needs_teacher();
  if (needs_teacher) ens = load_teacher_ensemble(cfg, spec);

  TrainOptions opts;
  opts.checkpoint_dir = paths::student_dir(cfg.output_dir);
  opts.checkpoint_prefix = "student";
  opts.meta = cfg.config_hash;
  TrainResult res =
      train(spec, train_set, cfg.student->train, needs_teacher ? &ens : nullptr, &test_set, opts);

  save_checkpoint(spec, res.final_params, paths::student_final(cfg.output_dir),
                  static_cast<std::uint32_t>(cfg.student->train.epochs), cfg.config_hash);
  write_runlog_jsonl(res.log, paths::student_dir(cfg.output_dir) + "/runlog.jsonl",
                     cfg.config_hash);
}

struct MetricsReport {
  std::string experiment;
  std::string model;
  std::string config_hash;
  double clean_acc = 0.0;
  double mean_entropy = 0.0;
  std::vector<std::pair<AttackConfig, double>> robust;  // one entry per eval attack
  std::uint64_t dataset_seed = 0;
  std::uint64_t model_seed = 0;
  double wall_seconds = 0.0;
};

// One JSON record for the model plus one per attack; the volatile wall time
// goes to a separate sidecar so reruns stay byte-identical.
inline void write_metrics(const MetricsReport& r, const std::string& out_dir) {
  std::ostringstream os;
  nlohmann::json head{{"experiment", r.experiment},
                      {"model", r.model},
                      {"config_hash", r.config_hash},
                      {"clean_acc", r.clean_acc},
                      {"mean_entropy", r.mean_entropy},
                      {"seeds", {{"dataset", r.dataset_seed}, {"model", r.model_seed}}}};
  os << head.dump() << "\n";
  for (const auto& [attack, acc] : r.robust) {
    nlohmann::json line{{"model", r.model},
                        {"config_hash", r.config_hash},
                        {"attack", detail::attack_json(attack)},
                        {"robust_acc", acc}};
    os << line.dump() << "\n";
  }
  detail::write_text_file(out_dir + "/metrics_" + r.model + ".jsonl", os.str());
  detail::write_text_file(out_dir + "/metrics_" + r.model + ".time.txt",
                          format_msg("%.3f\n", r.wall_seconds));
}

inline std::vector<MetricsReport> run_evaluate(const ExperimentConfig& cfg) {
  auto [train_raw, test_raw] = build_datasets(cfg.dataset);
  Dataset test_set = detail::shaped_for_model(test_raw, cfg.model);
  const ModelSpec spec = build_model_spec(cfg.model, test_set);

  std::vector<MetricsReport> reports;
  for (const std::string& name : cfg.eval.models) {
    std::string path;
    if (name == "student") {
      path = paths::student_final(cfg.output_dir);
    } else if (name.rfind("teacher_", 0) == 0) {
      const int member = std::stoi(name.substr(8));
      path = paths::teacher_ckpt(cfg.output_dir, member, resolved_teacher_epoch(cfg));
    } else {
      throw ConfigError(format_msg("config: 'eval.models' entry '%s' is not student or teacher_<m>",
                                   name.c_str()));
    }
    if (!std::filesystem::exists(path))
      throw ArtifactError(format_msg("harness: checkpoint %s not found", path.c_str()));
    Checkpoint ck = load_checkpoint(path);
    if (!(ck.spec == spec))
      throw ArtifactError(format_msg("harness: %s was written for a different model spec",
                                     path.c_str()));

    const auto t0 = std::chrono::steady_clock::now();
    MetricsReport r;
    r.experiment = cfg.experiment;
    r.model = name;
    r.config_hash = cfg.config_hash;
    r.dataset_seed = cfg.dataset.seed;
    r.model_seed = ck.params.seed;
    r.clean_acc = evaluate(spec, ck.params, test_set).clean_acc;
    r.mean_entropy = mean_entropy(spec, ck.params, test_set);
    for (const AttackConfig& attack : cfg.eval.attacks) {
      EvalResult ev = evaluate(spec, ck.params, test_set, &attack);
      r.robust.emplace_back(attack, *ev.robust_acc);
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_metrics(r, cfg.output_dir);
    reports.push_back(std::move(r));
  }
  return reports;
}

namespace detail {

inline std::vector<Params> load_snapshots(const std::string& out_dir, const std::string& family,
                                          int epochs, const ModelSpec& spec,
                                          const ExperimentConfig& cfg) {
  std::vector<Params> snaps;
  std::vector<int> missing;
  for (int k = 1; k <= epochs; ++k) {
    const std::string path = family == "student" ? paths::student_ckpt(out_dir, k)
                                                 : paths::teacher_ckpt(out_dir, 0, k);
    if (!std::filesystem::exists(path)) {
      missing.push_back(k);
      continue;
    }
    Checkpoint ck = load_checkpoint(path);
    if (!(ck.spec == spec))
      throw ArtifactError(format_msg("harness: %s was written for a different model spec",
                                     path.c_str()));
    snaps.push_back(std::move(ck.params));
  }
  if (!missing.empty()) {
    std::ostringstream os;
    os << "harness: missing " << family << " snapshots for epochs";
    for (int k : missing) os << " " << k;
    os << " under " << out_dir << "; train with checkpoint_every_epoch";
    throw ArtifactError(os.str());
  }
  (void)cfg;
  return snaps;
}

inline std::string tsv_header(const std::string& config_hash, const std::string& columns) {
  return "# config_hash=" + config_hash + "\n" + columns + "\n";
}

}  // namespace detail

// Emits the difficulty ranking, per-sample trajectory table, cosine
// similarity and improvement series (natural and, when configured,
// adversarial) and the per-epoch entropy series.
inline void run_analyze(const ExperimentConfig& cfg) {
  if (!cfg.analysis.enabled) throw ConfigError("config: 'analysis.enabled' is false");
  if (!cfg.teacher || !cfg.student)
    throw ConfigError("config: analyze needs both 'teacher' and 'student' blocks");
  if (cfg.teacher->train.epochs != cfg.student->train.epochs)
    throw ConfigError("config: analyze needs equal teacher and student epoch counts");
  const int epochs = cfg.teacher->train.epochs;

  auto [train_raw, test_raw] = build_datasets(cfg.dataset);
  Dataset ds = detail::shaped_for_model(
      cfg.analysis.split == Split::Test ? test_raw : train_raw, cfg.model);
  const ModelSpec spec = build_model_spec(cfg.model, ds);

  std::vector<Params> teacher_snaps =
      detail::load_snapshots(cfg.output_dir, "teacher", epochs, spec, cfg);
  std::vector<Params> student_snaps =
      detail::load_snapshots(cfg.output_dir, "student", epochs, spec, cfg);

  const std::vector<Params>& difficulty_snaps =
      cfg.analysis.difficulty_from == "teacher" ? teacher_snaps : student_snaps;
  DifficultyRanking ranking = build_ranking(difficulty_scores(spec, difficulty_snaps, ds));

  auto traj_t_nat = record_trajectories(spec, teacher_snaps, ds, nullptr,
                                        TrajectoryModel::Teacher);
  auto traj_s_nat = record_trajectories(spec, student_snaps, ds, nullptr,
                                        TrajectoryModel::Student);
  const AttackConfig* atk = cfg.analysis.attack ? &*cfg.analysis.attack : nullptr;
  std::vector<Trajectory> traj_t_adv, traj_s_adv;
  if (atk) {
    traj_t_adv = record_trajectories(spec, teacher_snaps, ds, atk, TrajectoryModel::Teacher);
    traj_s_adv = record_trajectories(spec, student_snaps, ds, atk, TrajectoryModel::Student);
  }

  std::size_t window = static_cast<std::size_t>(cfg.analysis.smoothing_window);
  if (window > ds.n()) window = ds.n() % 2 == 1 ? ds.n() : ds.n() - 1;

  // Difficulty ranking, easiest first.
  {
    std::ostringstream os;
    os << detail::tsv_header(cfg.config_hash, "rank\tsample_id\tscore");
    for (std::size_t r = 0; r < ranking.entries.size(); ++r)
      os << r << "\t" << ranking.entries[r].first << "\t"
         << detail::double_str(ranking.entries[r].second) << "\n";
    detail::write_text_file(cfg.output_dir + "/analysis_difficulty.tsv", os.str());
  }

  auto emit_tables = [&](const std::vector<Trajectory>& ts, const std::vector<Trajectory>& ss,
                         const std::string& suffix) {
    std::unordered_map<std::size_t, double> score_by_id;
    for (const auto& [id, score] : ranking.entries) score_by_id[id] = score;

    std::vector<double> deltas, cossims;
    deltas.reserve(ranking.entries.size());
    auto improvement = improvement_curve(ss, ts, ranking);
    for (const auto& p : improvement) deltas.push_back(p.delta);
    for (const auto& [id, score] : ranking.entries)
      cossims.push_back(cosine_similarity(ss[id], ts[id]));
    std::vector<double> deltas_smooth = moving_average(deltas, window);
    std::vector<double> cossims_smooth = moving_average(cossims, window);

    std::ostringstream traj;
    traj << detail::tsv_header(cfg.config_hash,
                               "sample_id\tdifficulty\tp_T_K\tp_S_K\tdelta\tcossim");
    for (std::size_t r = 0; r < ranking.entries.size(); ++r) {
      const std::size_t id = ranking.entries[r].first;
      traj << id << "\t" << detail::double_str(score_by_id[id]) << "\t"
           << detail::double_str(ts[id].probs.back()) << "\t"
           << detail::double_str(ss[id].probs.back()) << "\t"
           << detail::double_str(deltas[r]) << "\t" << detail::double_str(cossims[r]) << "\n";
    }
    detail::write_text_file(cfg.output_dir + "/analysis_trajectories" + suffix + ".tsv",
                            traj.str());

    std::ostringstream imp;
    imp << detail::tsv_header(cfg.config_hash, "rank\tsample_id\tdelta\tdelta_smooth");
    for (std::size_t r = 0; r < improvement.size(); ++r)
      imp << r << "\t" << improvement[r].sample_id << "\t" << detail::double_str(deltas[r])
          << "\t" << detail::double_str(deltas_smooth[r]) << "\n";
    detail::write_text_file(cfg.output_dir + "/analysis_improvement" + suffix + ".tsv", imp.str());

    std::ostringstream cs;
    cs << detail::tsv_header(cfg.config_hash, "rank\tsample_id\tcossim\tcossim_smooth");
    for (std::size_t r = 0; r < ranking.entries.size(); ++r)
      cs << r << "\t" << ranking.entries[r].first << "\t" << detail::double_str(cossims[r])
         << "\t" << detail::double_str(cossims_smooth[r]) << "\n";
    detail::write_text_file(cfg.output_dir + "/analysis_cossim" + suffix + ".tsv", cs.str());
  };

  emit_tables(traj_t_nat, traj_s_nat, "");
  if (atk) emit_tables(traj_t_adv, traj_s_adv, "_adv");

  {
    std::ostringstream os;
    os << detail::tsv_header(cfg.config_hash, "epoch\tstudent_entropy\tteacher_entropy");
    for (int k = 1; k <= epochs; ++k)
      os << k << "\t"
         << detail::double_str(mean_entropy(spec, student_snaps[static_cast<std::size_t>(k - 1)],
                                            ds))
         << "\t"
         << detail::double_str(mean_entropy(spec, teacher_snaps[static_cast<std::size_t>(k - 1)],
                                            ds))
         << "\n";
    detail::write_text_file(cfg.output_dir + "/analysis_entropy.tsv", os.str());
  }
}

}  // namespace rkd
