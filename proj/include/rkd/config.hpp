#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rkd/attack.hpp"
#include "rkd/common.hpp"
#include "rkd/data.hpp"
#include "rkd/losses.hpp"
#include "rkd/model.hpp"
#include "rkd/schedule.hpp"
#include "rkd/train.hpp"

namespace rkd {

struct DatasetConfig {
  enum class Kind { TwoMoons, GaussianBlobs, Idx };
  Kind kind = Kind::TwoMoons;
  std::uint64_t seed = 0;
  std::size_t n_train = 1000;
  std::size_t n_test = 500;
  double noise = 0.1;        // two_moons
  std::size_t dim = 2;       // gaussian_blobs
  int classes = 2;           // gaussian_blobs
  double separation = 4.0;   // gaussian_blobs
  std::string train_images, train_labels, test_images, test_labels;  // idx
  std::vector<int> filter;                                           // idx
};

struct ModelConfig {
  ModelKind kind = ModelKind::Mlp;
  std::vector<int> hidden{64, 64};  // mlp hidden widths; output layer appended
  int channels = 4;                 // tiny_conv
  int kernel = 3;
  int conv_hidden = 32;
};

struct TeacherConfig {
  int count = 1;
  std::vector<std::uint64_t> seeds;
  std::vector<double> beta;  // defaults to uniform 1/M
  TrainConfig train;
};

struct StudentConfig {
  TrainConfig train;
  std::optional<int> teacher_epoch;  // which teacher snapshot to distill from
};

struct EvalConfig {
  std::vector<std::string> models;  // defaults to {"student"}
  std::vector<AttackConfig> attacks;
};

struct AnalysisConfig {
  bool enabled = false;
  Split split = Split::Test;
  int smoothing_window = 51;
  std::string difficulty_from = "teacher";  // which snapshots rank difficulty
  std::optional<AttackConfig> attack;       // adversarial trajectories when set
};

struct ExperimentConfig {
  std::string experiment;
  std::string output_dir;
  DatasetConfig dataset;
  ModelConfig model;
  std::optional<TeacherConfig> teacher;
  std::optional<StudentConfig> student;
  EvalConfig eval;
  AnalysisConfig analysis;
  std::string config_hash;  // canonical hash of the config file bytes
};

// Canonical form: parsed JSON re-serialized with sorted keys and no
// whitespace; the hash ignores formatting but not content.
inline std::string canonical_config_hash(const std::string& file_bytes) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(file_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(format_msg("config: invalid JSON: %s", e.what()));
  }
  return to_hex(fnv1a64(j.dump()));
}

namespace cfgdetail {

using json = nlohmann::json;

inline void check_keys(const json& obj, const std::string& path,
                       const std::set<std::string>& allowed) {
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw ConfigError(format_msg("config: unknown field '%s.%s'", path.c_str(), key.c_str()));
}

inline const json& require(const json& obj, const std::string& path, const std::string& key) {
  if (!obj.contains(key))
    throw ConfigError(format_msg("config: missing field '%s.%s'", path.c_str(), key.c_str()));
  return obj.at(key);
}

template <typename T>
T get_as(const json& obj, const std::string& path, const std::string& key) {
  try {
    return require(obj, path, key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(format_msg("config: field '%s.%s' has the wrong type", path.c_str(),
                                 key.c_str()));
  }
}

template <typename T>
T get_or(const json& obj, const std::string& path, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  return get_as<T>(obj, path, key);
}

inline AttackConfig parse_attack(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(format_msg("config: '%s' must be an object", path.c_str()));
  check_keys(j, path,
             {"method", "epsilon", "step_size", "iterations", "random_start", "restarts",
              "clamp_lo", "clamp_hi", "seed"});
  AttackConfig a;
  try {
    a.method = attack_method_from_string(get_or<std::string>(j, path, "method", "pgd"));
  } catch (const ValueError& e) {
    throw ConfigError(format_msg("config: '%s.method': %s", path.c_str(), e.what()));
  }
  a.epsilon = get_as<double>(j, path, "epsilon");
  // Conventional defaults: pgd steps at eps/4, ffgsm overshoots at 1.25 eps,
  // fgsm is the single full-size step.
  double default_step = a.epsilon / 4.0;
  if (a.method == AttackMethod::Ffgsm) default_step = 1.25 * a.epsilon;
  if (a.method == AttackMethod::Fgsm) default_step = a.epsilon;
  a.step_size = get_or<double>(j, path, "step_size", default_step > 0 ? default_step : 1e-3);
  a.iterations = get_or<int>(j, path, "iterations", a.method == AttackMethod::Pgd ? 7 : 1);
  a.random_start = get_or<bool>(j, path, "random_start", a.method != AttackMethod::Fgsm);
  a.restarts = get_or<int>(j, path, "restarts", 1);
  a.clamp_lo = get_or<double>(j, path, "clamp_lo", 0.0);
  a.clamp_hi = get_or<double>(j, path, "clamp_hi", 1.0);
  a.seed = get_or<std::uint64_t>(j, path, "seed", 0);
  try {
    a.validate();
  } catch (const ValueError& e) {
    throw ConfigError(format_msg("config: '%s': %s", path.c_str(), e.what()));
  }
  return a;
}

inline Schedule parse_schedule(const json& j, const std::string& path) {
  check_keys(j, path,
             {"kind", "base_lr", "decay", "max_lr", "total_steps", "warmup_div", "final_div"});
  Schedule s;
  try {
    s.kind = schedule_kind_from_string(get_as<std::string>(j, path, "kind"));
  } catch (const ValueError& e) {
    throw ConfigError(format_msg("config: '%s.kind': %s", path.c_str(), e.what()));
  }
  s.base_lr = get_or<double>(j, path, "base_lr", 0.1);
  s.decay = get_or<double>(j, path, "decay", 0.9);
  s.max_lr = get_or<double>(j, path, "max_lr", 0.21);
  s.total_steps = get_or<long>(j, path, "total_steps", 0);
  s.warmup_div = get_or<double>(j, path, "warmup_div", 25.0);
  s.final_div = get_or<double>(j, path, "final_div", 2500.0);
  try {
    s.validate();
  } catch (const ValueError& e) {
    throw ConfigError(format_msg("config: '%s': %s", path.c_str(), e.what()));
  }
  return s;
}

inline LossVariant parse_loss(const json& j, const std::string& path) {
  check_keys(j, path, {"tag", "lambda", "alpha"});
  LossVariant v;
  try {
    v.tag = loss_tag_from_string(get_as<std::string>(j, path, "tag"));
  } catch (const ValueError& e) {
    throw ConfigError(format_msg("config: '%s.tag': %s", path.c_str(), e.what()));
  }
  v.lambda = get_or<double>(j, path, "lambda", 0.5);
  v.alpha = get_or<double>(j, path, "alpha", 0.5);
  try {
    v.validate();
  } catch (const ValueError& e) {
    throw ConfigError(format_msg("config: '%s': %s", path.c_str(), e.what()));
  }
  return v;
}

inline TrainConfig parse_train(const json& j, const std::string& path) {
  check_keys(j, path,
             {"epochs", "batch_size", "seed", "schedule", "loss", "attack", "eval_attack",
              "early_stop_epoch", "checkpoint_every_epoch", "momentum", "weight_decay",
              "record_sample_probs", "log_robust_acc"});
  TrainConfig t;
  t.epochs = get_or<int>(j, path, "epochs", 50);
  t.batch_size = get_or<int>(j, path, "batch_size", 128);
  t.seed = get_or<std::uint64_t>(j, path, "seed", 0);
  if (j.contains("schedule")) t.schedule = parse_schedule(j.at("schedule"), path + ".schedule");
  if (j.contains("loss")) t.loss = parse_loss(j.at("loss"), path + ".loss");
  if (j.contains("attack")) t.attack = parse_attack(j.at("attack"), path + ".attack");
  if (j.contains("eval_attack"))
    t.eval_attack = parse_attack(j.at("eval_attack"), path + ".eval_attack");
  if (j.contains("early_stop_epoch"))
    t.early_stop_epoch = get_as<int>(j, path, "early_stop_epoch");
  t.checkpoint_every_epoch = get_or<bool>(j, path, "checkpoint_every_epoch", false);
  t.momentum = get_or<double>(j, path, "momentum", 0.0);
  t.weight_decay = get_or<double>(j, path, "weight_decay", 0.0);
  t.record_sample_probs = get_or<bool>(j, path, "record_sample_probs", false);
  t.log_robust_acc = get_or<bool>(j, path, "log_robust_acc", true);
  try {
    t.validate();
  } catch (const ValueError& e) {
    throw ConfigError(format_msg("config: '%s': %s", path.c_str(), e.what()));
  }
  return t;
}

inline DatasetConfig parse_dataset(const json& j, const std::string& path) {
  check_keys(j, path,
             {"kind", "seed", "n_train", "n_test", "noise", "dim", "classes", "separation",
              "train_images", "train_labels", "test_images", "test_labels", "filter"});
  DatasetConfig d;
  const std::string kind = get_as<std::string>(j, path, "kind");
  if (kind == "two_moons")
    d.kind = DatasetConfig::Kind::TwoMoons;
  else if (kind == "gaussian_blobs")
    d.kind = DatasetConfig::Kind::GaussianBlobs;
  else if (kind == "idx")
    d.kind = DatasetConfig::Kind::Idx;
  else
    throw ConfigError(format_msg("config: '%s.kind': unknown dataset kind '%s'", path.c_str(),
                                 kind.c_str()));
  d.seed = get_or<std::uint64_t>(j, path, "seed", 0);
  d.n_train = get_or<std::size_t>(j, path, "n_train", 1000);
  d.n_test = get_or<std::size_t>(j, path, "n_test", 500);
  d.noise = get_or<double>(j, path, "noise", 0.1);
  d.dim = get_or<std::size_t>(j, path, "dim", 2);
  d.classes = get_or<int>(j, path, "classes", 2);
  d.separation = get_or<double>(j, path, "separation", 4.0);
  if (d.kind == DatasetConfig::Kind::Idx) {
    d.train_images = get_as<std::string>(j, path, "train_images");
    d.train_labels = get_as<std::string>(j, path, "train_labels");
    d.test_images = get_as<std::string>(j, path, "test_images");
    d.test_labels = get_as<std::string>(j, path, "test_labels");
    d.filter = get_or<std::vector<int>>(j, path, "filter", {});
  } else {
    if (d.n_train < 2 || d.n_test < 1)
      throw ConfigError(format_msg("config: '%s': n_train/n_test too small", path.c_str()));
  }
  return d;
}

inline ModelConfig parse_model(const json& j, const std::string& path) {
  check_keys(j, path, {"kind", "hidden", "channels", "kernel"});
  ModelConfig m;
  const std::string kind = get_or<std::string>(j, path, "kind", "mlp");
  if (kind == "mlp")
    m.kind = ModelKind::Mlp;
  else if (kind == "tiny_conv")
    m.kind = ModelKind::TinyConv;
  else
    throw ConfigError(format_msg("config: '%s.kind': unknown model kind '%s'", path.c_str(),
                                 kind.c_str()));
  if (m.kind == ModelKind::Mlp) {
    m.hidden = get_or<std::vector<int>>(j, path, "hidden", {64, 64});
    for (int w : m.hidden)
      if (w <= 0) throw ConfigError(format_msg("config: '%s.hidden': widths must be positive",
                                               path.c_str()));
  } else {
    m.channels = get_or<int>(j, path, "channels", 4);
    m.kernel = get_or<int>(j, path, "kernel", 3);
    m.conv_hidden = 0;
    if (j.contains("hidden")) {
      auto h = get_as<std::vector<int>>(j, path, "hidden");
      if (h.size() != 1)
        throw ConfigError(format_msg("config: '%s.hidden': tiny_conv takes one hidden width",
                                     path.c_str()));
      m.conv_hidden = h[0];
    } else {
      m.conv_hidden = 32;
    }
    if (m.channels <= 0 || m.kernel <= 0 || m.conv_hidden <= 0)
      throw ConfigError(format_msg("config: '%s': channels/kernel/hidden must be positive",
                                   path.c_str()));
  }
  return m;
}

inline TeacherConfig parse_teacher(const json& j, const std::string& path) {
  check_keys(j, path, {"count", "seeds", "beta", "train"});
  TeacherConfig t;
  t.count = get_or<int>(j, path, "count", 1);
  if (t.count < 1) throw ConfigError(format_msg("config: '%s.count' must be >= 1", path.c_str()));
  t.seeds = get_or<std::vector<std::uint64_t>>(j, path, "seeds", {});
  if (t.seeds.empty())
    for (int i = 0; i < t.count; ++i) t.seeds.push_back(static_cast<std::uint64_t>(i) + 1);
  if (t.seeds.size() != static_cast<std::size_t>(t.count))
    throw ConfigError(format_msg("config: '%s.seeds' must list %d seeds", path.c_str(), t.count));
  for (std::size_t i = 0; i < t.seeds.size(); ++i)
    for (std::size_t k = i + 1; k < t.seeds.size(); ++k)
      if (t.seeds[i] == t.seeds[k])
        throw ConfigError(format_msg("config: '%s.seeds' must be distinct", path.c_str()));
  t.beta = get_or<std::vector<double>>(j, path, "beta", {});
  if (t.beta.empty())
    t.beta.assign(static_cast<std::size_t>(t.count), 1.0 / static_cast<double>(t.count));
  if (t.beta.size() != static_cast<std::size_t>(t.count))
    throw ConfigError(format_msg("config: '%s.beta' must list %d weights", path.c_str(), t.count));
  double total = 0.0;
  for (double b : t.beta) {
    if (b < 0.0) throw ConfigError(format_msg("config: '%s.beta' entries must be >= 0", path.c_str()));
    total += b;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError(format_msg("config: '%s.beta' sums to %.12g, expected 1", path.c_str(),
                                 total));
  t.train = parse_train(require(j, path, "train"), path + ".train");
  return t;
}

inline StudentConfig parse_student(const json& j, const std::string& path) {
  check_keys(j, path, {"train", "teacher_epoch"});
  StudentConfig s;
  s.train = parse_train(require(j, path, "train"), path + ".train");
  if (j.contains("teacher_epoch")) s.teacher_epoch = get_as<int>(j, path, "teacher_epoch");
  return s;
}

inline EvalConfig parse_eval(const json& j, const std::string& path) {
  check_keys(j, path, {"models", "attacks"});
  EvalConfig e;
  e.models = get_or<std::vector<std::string>>(j, path, "models", {"student"});
  if (j.contains("attacks")) {
    const json& arr = j.at("attacks");
    if (!arr.is_array())
      throw ConfigError(format_msg("config: '%s.attacks' must be an array", path.c_str()));
    for (std::size_t i = 0; i < arr.size(); ++i)
      e.attacks.push_back(parse_attack(arr[i], path + ".attacks[" + std::to_string(i) + "]"));
  }
  return e;
}

inline AnalysisConfig parse_analysis(const json& j, const std::string& path) {
  check_keys(j, path, {"enabled", "split", "smoothing_window", "difficulty_from", "attack"});
  AnalysisConfig a;
  a.enabled = get_or<bool>(j, path, "enabled", true);
  const std::string split = get_or<std::string>(j, path, "split", "test");
  if (split == "test")
    a.split = Split::Test;
  else if (split == "train")
    a.split = Split::Train;
  else
    throw ConfigError(format_msg("config: '%s.split' must be train or test", path.c_str()));
  a.smoothing_window = get_or<int>(j, path, "smoothing_window", 51);
  if (a.smoothing_window < 1 || a.smoothing_window % 2 == 0)
    throw ConfigError(format_msg("config: '%s.smoothing_window' must be odd and >= 1",
                                 path.c_str()));
  a.difficulty_from = get_or<std::string>(j, path, "difficulty_from", "teacher");
  if (a.difficulty_from != "teacher" && a.difficulty_from != "student")
    throw ConfigError(format_msg("config: '%s.difficulty_from' must be teacher or student",
                                 path.c_str()));
  if (j.contains("attack")) a.attack = parse_attack(j.at("attack"), path + ".attack");
  return a;
}

}  // namespace cfgdetail

// Parses and validates the whole experiment file; throws ConfigError naming
// the offending field. No side effects.
inline ExperimentConfig parse_experiment_config(const std::string& file_bytes) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(file_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(format_msg("config: invalid JSON: %s", e.what()));
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  cfgdetail::check_keys(j, "",
                        {"experiment", "output_dir", "dataset", "model", "teacher", "student",
                         "eval", "analysis"});
  ExperimentConfig cfg;
  cfg.experiment = cfgdetail::get_as<std::string>(j, "", "experiment");
  cfg.output_dir = cfgdetail::get_as<std::string>(j, "", "output_dir");
  if (cfg.experiment.empty()) throw ConfigError("config: 'experiment' must not be empty");
  if (cfg.output_dir.empty()) throw ConfigError("config: 'output_dir' must not be empty");
  cfg.dataset = cfgdetail::parse_dataset(cfgdetail::require(j, "", "dataset"), "dataset");
  if (j.contains("model")) cfg.model = cfgdetail::parse_model(j.at("model"), "model");
  if (j.contains("teacher")) cfg.teacher = cfgdetail::parse_teacher(j.at("teacher"), "teacher");
  if (j.contains("student")) cfg.student = cfgdetail::parse_student(j.at("student"), "student");
  if (j.contains("eval")) cfg.eval = cfgdetail::parse_eval(j.at("eval"), "eval");
  if (j.contains("analysis"))
    cfg.analysis = cfgdetail::parse_analysis(j.at("analysis"), "analysis");

  // Cross-field checks.
  if (cfg.teacher && cfg.teacher->train.loss.needs_teacher())
    throw ConfigError(format_msg("config: 'teacher.train.loss.tag' %s cannot itself need a teacher",
                                 loss_tag_name(cfg.teacher->train.loss.tag)));
  if (cfg.student) {
    const LossVariant& loss = cfg.student->train.loss;
    if (loss.needs_teacher() && !cfg.teacher)
      throw ConfigError(format_msg("config: 'student.train.loss.tag' %s requires a 'teacher' block",
                                   loss_tag_name(loss.tag)));
    if (cfg.teacher && cfg.teacher->count > 1 && loss.tag == LossTag::AKD)
      throw ConfigError("config: 'student.train.loss.tag' must be ENSEMBLE_AKD for count > 1");
    if (cfg.teacher && cfg.student->teacher_epoch &&
        (*cfg.student->teacher_epoch < 1 || *cfg.student->teacher_epoch > cfg.teacher->train.epochs))
      throw ConfigError(format_msg("config: 'student.teacher_epoch' outside [1, %d]",
                                   cfg.teacher->train.epochs));
  }
  cfg.config_hash = canonical_config_hash(file_bytes);
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(format_msg("config: cannot open %s", path.c_str()));
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_experiment_config(bytes);
}

// Builds the train/test splits named by the config; generated test splits use
// a derived seed so they never overlap the training draw.
inline std::pair<Dataset, Dataset> build_datasets(const DatasetConfig& d) {
  switch (d.kind) {
    case DatasetConfig::Kind::TwoMoons: {
      Dataset train = gen_two_moons(d.n_train, d.noise, d.seed);
      Dataset test = gen_two_moons(d.n_test, d.noise, mix_seed(d.seed, 0x7e57ULL));
      test.split = Split::Test;
      return {std::move(train), std::move(test)};
    }
    case DatasetConfig::Kind::GaussianBlobs: {
      Dataset train = gen_gaussian_blobs(d.n_train, d.dim, d.classes, d.separation, d.seed);
      Dataset test =
          gen_gaussian_blobs(d.n_test, d.dim, d.classes, d.separation, mix_seed(d.seed, 0x7e57ULL));
      test.split = Split::Test;
      return {std::move(train), std::move(test)};
    }
    case DatasetConfig::Kind::Idx: {
      Dataset train = load_idx_images(d.train_images, d.train_labels, d.filter);
      Dataset test = load_idx_images(d.test_images, d.test_labels, d.filter);
      test.split = Split::Test;
      return {std::move(train), std::move(test)};
    }
  }
  throw ConfigError("config: unknown dataset kind");
}

// Model spec for this dataset; teachers and students share the architecture.
inline ModelSpec build_model_spec(const ModelConfig& m, const Dataset& ds) {
  ModelSpec spec;
  spec.kind = m.kind;
  spec.num_classes = ds.num_classes;
  if (m.kind == ModelKind::Mlp) {
    spec.input_dim = static_cast<int>(ds.sample_size());
    spec.layer_widths = m.hidden;
    spec.layer_widths.push_back(ds.num_classes);
  } else {
    if (ds.sample_shape.size() != 3)
      throw ConfigError("config: tiny_conv needs image-shaped inputs");
    spec.input_shape = {static_cast<int>(ds.sample_shape[0]),
                        static_cast<int>(ds.sample_shape[1]),
                        static_cast<int>(ds.sample_shape[2])};
    spec.conv_channels = m.channels;
    spec.conv_kernel = m.kernel;
    spec.conv_hidden = m.conv_hidden;
  }
  spec.validate();
  return spec;
}

}  // namespace rkd
