#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "rkd/analysis.hpp"
#include "rkd/attack.hpp"
#include "rkd/checkpoint.hpp"
#include "rkd/common.hpp"
#include "rkd/data.hpp"
#include "rkd/losses.hpp"
#include "rkd/model.hpp"
#include "rkd/schedule.hpp"

namespace rkd {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 128;
  std::uint64_t seed = 0;
  Schedule schedule;
  LossVariant loss;
  std::optional<AttackConfig> attack;       // present => adversarial / distill training
  std::optional<AttackConfig> eval_attack;  // per-epoch robust metric; defaults to attack
  bool log_robust_acc = true;               // per-epoch robust metric can be costly
  std::optional<int> early_stop_epoch;      // designate the snapshot of this epoch (1-based)
  bool checkpoint_every_epoch = false;
  double momentum = 0.0;
  double weight_decay = 0.0;
  bool record_sample_probs = false;

  void validate() const {
    if (epochs < 1) throw ValueError(format_msg("train: epochs %d < 1", epochs));
    if (batch_size < 1) throw ValueError(format_msg("train: batch_size %d < 1", batch_size));
    schedule.validate();
    loss.validate();
    if (attack) {
      attack->validate();
      if (attack->restarts != 1)
        throw ValueError("train: training-time attacks must use restarts = 1");
    }
    if (eval_attack) eval_attack->validate();
    if (early_stop_epoch && (*early_stop_epoch < 1 || *early_stop_epoch > epochs))
      throw ValueError(format_msg("train: early_stop_epoch %d outside [1, %d]",
                                  *early_stop_epoch, epochs));
    if (momentum < 0.0 || momentum >= 1.0)
      throw ValueError(format_msg("train: momentum %g outside [0,1)", momentum));
    if (weight_decay < 0.0) throw ValueError("train: weight_decay < 0");
  }
};

struct EpochRecord {
  int epoch = 0;  // 1-based, matching checkpoint filenames
  double lr = 0.0;
  double loss = 0.0;
  double clean_acc = 0.0;
  std::optional<double> robust_acc;
  double entropy = 0.0;
};

struct RunLog {
  std::vector<EpochRecord> records;
  // Per-epoch correct-class probabilities on the training set, when enabled.
  std::vector<std::vector<double>> sample_probs;
};

namespace detail {
inline std::string double_str(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}
}  // namespace detail

// One JSON record per epoch; stable keys, shortest round-trip doubles.
inline void write_runlog_jsonl(const RunLog& log, const std::string& path,
                               const std::string& config_hash) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ArtifactError(format_msg("runlog: cannot write %s", path.c_str()));
  for (const EpochRecord& r : log.records) {
    out << "{\"clean_acc\":" << detail::double_str(r.clean_acc)
        << ",\"config_hash\":\"" << config_hash << "\""
        << ",\"entropy\":" << detail::double_str(r.entropy)
        << ",\"epoch\":" << r.epoch
        << ",\"loss\":" << detail::double_str(r.loss)
        << ",\"lr\":" << detail::double_str(r.lr)
        << ",\"robust_acc\":" << (r.robust_acc ? detail::double_str(*r.robust_acc) : "null")
        << "}\n";
  }
}

// w <- w - lr * (g + weight_decay * w); optional heavy-ball momentum buffers
// run parallel to params.named.
inline void sgd_step(Params& params, double lr, double momentum = 0.0, double weight_decay = 0.0,
                     std::vector<std::vector<double>>* velocity = nullptr) {
  if (momentum > 0.0 && velocity == nullptr)
    throw ValueError("sgd_step: momentum needs a velocity buffer");
  if (velocity && velocity->empty()) velocity->resize(params.named.size());
  for (std::size_t t = 0; t < params.named.size(); ++t) {
    Tensor& w = params.named[t].second;
    if (!w.requires_grad()) continue;
    if (!w.has_grad())
      throw ValueError(format_msg("sgd_step: missing gradient for '%s'",
                                  params.named[t].first.c_str()));
    const std::vector<double>& g = w.grad();
    std::vector<double>* v = nullptr;
    if (momentum > 0.0) {
      v = &(*velocity)[t];
      if (v->empty()) v->assign(g.size(), 0.0);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      double step = g[i] + weight_decay * w.values()[i];
      if (v) step = ((*v)[i] = momentum * (*v)[i] + step);
      w.values()[i] -= lr * step;
    }
  }
}

struct EvalResult {
  double clean_acc = 0.0;
  std::optional<double> robust_acc;
};

// Whole-dataset evaluation in a single pass, so results cannot depend on any
// batching choice. With restarts, a sample counts as robust only if it stays
// correct under every restart.
inline EvalResult evaluate(const ModelSpec& spec, const Params& params, const Dataset& ds,
                           const AttackConfig* attack = nullptr) {
  if (ds.n() == 0) throw ValueError("evaluate: empty dataset");
  Tensor x = ds.all_inputs();
  Tensor probs = predict_probs(spec, params, x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.n(); ++i)
    correct += argmax_row(probs, i) == ds.labels[i] ? 1 : 0;
  EvalResult res;
  res.clean_acc = static_cast<double>(correct) / static_cast<double>(ds.n());
  if (attack) {
    attack->validate();
    std::vector<char> robust(ds.n(), 1);
    AttackObjective obj = ce_objective(spec, params);
    for (int r = 0; r < attack->restarts; ++r) {
      AttackConfig acfg = *attack;
      acfg.restarts = 1;
      acfg.seed = mix_seed(attack->seed, 0xe7a1ULL /* eval restart stream */, r);
      Tensor x_adv = run_attack(obj, x, ds.labels, acfg);
      Tensor adv_probs = predict_probs(spec, params, x_adv);
      for (std::size_t i = 0; i < ds.n(); ++i)
        if (argmax_row(adv_probs, i) != ds.labels[i]) robust[i] = 0;
    }
    std::size_t n_robust = 0;
    for (char c : robust) n_robust += c;
    res.robust_acc = static_cast<double>(n_robust) / static_cast<double>(ds.n());
  }
  return res;
}

struct TrainOptions {
  std::string checkpoint_dir;  // per-epoch checkpoints land here when enabled
  std::string checkpoint_prefix = "model";
  std::string meta;  // stored in checkpoint metadata (e.g. the config hash)
};

struct TrainResult {
  Params final_params;
  Params designated_params;  // early-stop snapshot when configured, else final
  int designated_epoch = 0;
  RunLog log;
  std::vector<Params> snapshots;  // frozen clone at the end of each epoch
  std::vector<std::string> checkpoint_files;
};

// SGD training for standard, adversarial and distillation losses. Everything
// random derives from cfg.seed (init) and per-(epoch, batch) streams, so a
// fixed config reproduces the run bit for bit.
inline TrainResult train(const ModelSpec& spec, const Dataset& train_set, const TrainConfig& cfg,
                         const EnsembleTeacher* teacher = nullptr,
                         const Dataset* eval_set = nullptr, const TrainOptions& opts = {}) {
  cfg.validate();
  spec.validate();
  if (train_set.n() == 0) throw ValueError("train: empty dataset");
  if (train_set.sample_shape != spec.sample_shape())
    throw ValueError(format_msg("train: dataset samples %s do not match model input %s",
                                shape_str(train_set.sample_shape).c_str(),
                                shape_str(spec.sample_shape()).c_str()));
  if (cfg.loss.needs_teacher()) {
    if (!teacher) throw ValueError(format_msg("train: loss %s requires a teacher",
                                              loss_tag_name(cfg.loss.tag)));
    teacher->validate();
  }
  if (cfg.loss.needs_adversarial() && !cfg.attack)
    throw ValueError(format_msg("train: loss %s requires an attack config",
                                loss_tag_name(cfg.loss.tag)));

  Params params = init_params(spec, cfg.seed);
  params.set_requires_grad(true);

  const std::size_t spb =
      (train_set.n() + static_cast<std::size_t>(cfg.batch_size) - 1) /
      static_cast<std::size_t>(cfg.batch_size);
  Schedule sched = cfg.schedule;
  if (sched.kind == Schedule::Kind::OneCycle && sched.total_steps == 0)
    sched.total_steps = static_cast<long>(cfg.epochs) * static_cast<long>(spb);

  TrainResult result;
  std::vector<std::vector<double>> velocity;
  const Dataset& metric_set = eval_set ? *eval_set : train_set;
  const AttackConfig* metric_attack =
      cfg.eval_attack ? &*cfg.eval_attack : (cfg.attack ? &*cfg.attack : nullptr);
  if (!cfg.log_robust_acc) metric_attack = nullptr;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto batches = batch_iter(train_set, static_cast<std::size_t>(cfg.batch_size), cfg.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      Tensor x = train_set.gather(batches[b]);
      std::vector<int> y = train_set.gather_labels(batches[b]);
      Tensor x_adv;
      if (cfg.attack) {
        AttackConfig acfg = *cfg.attack;
        acfg.seed = mix_seed(cfg.attack->seed, static_cast<std::uint64_t>(epoch), b);
        x_adv = run_attack(ce_objective(spec, params), x, y, acfg);
      }
      Model student{spec, params};
      Tensor loss = distill_loss(cfg.loss, student, teacher, x, x_adv, y);
      params.zero_grad();
      backward(loss);
      const double lr = lr_at(sched, epoch, static_cast<int>(b), static_cast<int>(spb));
      sgd_step(params, lr, cfg.momentum, cfg.weight_decay, &velocity);
      loss_sum += loss.item() * static_cast<double>(y.size());
    }

    result.snapshots.push_back(params.frozen_clone());
    const int k = epoch + 1;

    EpochRecord rec;
    rec.epoch = k;
    rec.lr = lr_at(sched, epoch, 0, static_cast<int>(spb));
    rec.loss = loss_sum / static_cast<double>(train_set.n());
    EvalResult ev = evaluate(spec, params, metric_set, metric_attack);
    rec.clean_acc = ev.clean_acc;
    rec.robust_acc = ev.robust_acc;
    rec.entropy = mean_entropy(spec, params, train_set);
    result.log.records.push_back(rec);

    if (cfg.record_sample_probs) {
      Tensor probs = predict_probs(spec, params, train_set.all_inputs());
      const std::size_t c = probs.shape().back();
      std::vector<double> correct_probs(train_set.n());
      for (std::size_t i = 0; i < train_set.n(); ++i)
        correct_probs[i] =
            probs.values()[i * c + static_cast<std::size_t>(train_set.labels[i])];
      result.log.sample_probs.push_back(std::move(correct_probs));
    }

    if (cfg.checkpoint_every_epoch && !opts.checkpoint_dir.empty()) {
      const std::string path = opts.checkpoint_dir + "/" + opts.checkpoint_prefix + "_ep" +
                               std::to_string(k) + ".ckpt";
      save_checkpoint(spec, params, path, static_cast<std::uint32_t>(k), opts.meta);
      result.checkpoint_files.push_back(path);
    }
  }

  result.final_params = params.clone();
  if (cfg.early_stop_epoch) {
    result.designated_epoch = *cfg.early_stop_epoch;
    result.designated_params =
        result.snapshots[static_cast<std::size_t>(*cfg.early_stop_epoch - 1)].clone();
  } else {
    result.designated_epoch = cfg.epochs;
    result.designated_params = params.frozen_clone();
  }
  return result;
}

}  // namespace rkd
