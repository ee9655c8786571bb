#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "rkd/checkpoint.hpp"
#include "rkd/data.hpp"
#include "rkd/train.hpp"
#include "test_util.hpp"

namespace {

rkd::ModelSpec moons_spec() {
  rkd::ModelSpec spec;
  spec.input_dim = 2;
  spec.layer_widths = {24, 2};
  spec.num_classes = 2;
  return spec;
}

rkd::TrainConfig quick_cfg(int epochs, std::uint64_t seed) {
  rkd::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 64;
  cfg.seed = seed;
  cfg.schedule.kind = rkd::Schedule::Kind::Constant;
  cfg.schedule.base_lr = 0.5;
  return cfg;
}

rkd::AttackConfig quick_attack() {
  rkd::AttackConfig a;
  a.epsilon = 0.08;
  a.step_size = 0.02;
  a.iterations = 3;
  a.random_start = true;
  a.seed = 2;
  return a;
}

}  // namespace

TEST_CASE("exponential schedule values", "[schedule]") {
  rkd::Schedule s;
  s.kind = rkd::Schedule::Kind::Exponential;
  s.base_lr = 0.1;
  s.decay = 0.9;
  CHECK(rkd::lr_at(s, 0, 0, 10) == 0.1);
  CHECK(rkd::lr_at(s, 1, 0, 10) == 0.1 * 0.9);
  double expected = 0.1;
  for (int i = 0; i < 10; ++i) expected *= 0.9;
  CHECK(rkd::lr_at(s, 10, 0, 10) == expected);
  CHECK(rkd::lr_at(s, 10, 5, 10) == expected);  // constant within the epoch
}

TEST_CASE("one-cycle schedule peaks at max_lr mid-run", "[schedule]") {
  rkd::Schedule s;
  s.kind = rkd::Schedule::Kind::OneCycle;
  s.max_lr = 0.21;
  s.total_steps = 100;
  CHECK(rkd::lr_at(s, 0, 0, 10) == 0.21 / 25.0);
  CHECK(rkd::lr_at(s, 5, 0, 10) == 0.21);  // step 50 of 100
  CHECK(rkd::lr_at(s, 9, 9, 10) < 0.21);
  CHECK(rkd::lr_at(s, 10, 0, 10) == 0.21 / 2500.0);
  // Monotone up then down.
  double prev = 0.0;
  for (int t = 0; t <= 50; ++t) {
    const double lr = rkd::lr_at(s, 0, t, 1000);
    CHECK(lr >= prev);
    prev = lr;
  }
}

TEST_CASE("constant schedule ignores the step", "[schedule]") {
  rkd::Schedule s;
  s.kind = rkd::Schedule::Kind::Constant;
  s.base_lr = 0.05;
  CHECK(rkd::lr_at(s, 3, 7, 10) == 0.05);
}

TEST_CASE("sgd_step applies the update rule", "[train]") {
  rkd::ModelSpec spec = moons_spec();
  rkd::Params p = rkd::init_params(spec, 1);
  p.set_requires_grad(true);
  rkd::Params before = p.clone();

  // Manufacture a gradient of all twos on every tensor.
  rkd::Tensor loss = rkd::sum(rkd::scale(p.named[0].second, 2.0));
  for (std::size_t i = 1; i < p.named.size(); ++i)
    loss = rkd::add(loss, rkd::sum(rkd::scale(p.named[i].second, 2.0)));
  rkd::backward(loss);

  rkd::sgd_step(p, 0.0);
  CHECK(p.at("w0").values() == before.at("w0").values());

  rkd::sgd_step(p, 0.1);
  for (std::size_t i = 0; i < p.at("w0").size(); ++i)
    CHECK(p.at("w0").values()[i] ==
          Catch::Approx(before.at("w0").values()[i] - 0.1 * 2.0).margin(1e-15));

  rkd::Params q = rkd::init_params(spec, 2);
  q.set_requires_grad(true);
  CHECK_THROWS_AS(rkd::sgd_step(q, 0.1), rkd::ValueError);  // no gradients yet
}

TEST_CASE("training is deterministic end to end", "[train]") {
  auto ds = rkd::gen_two_moons(128, 0.1, 3);
  auto a = rkd::train(moons_spec(), ds, quick_cfg(3, 9));
  auto b = rkd::train(moons_spec(), ds, quick_cfg(3, 9));
  REQUIRE(a.log.records.size() == b.log.records.size());
  for (std::size_t i = 0; i < a.log.records.size(); ++i) {
    CHECK(a.log.records[i].loss == b.log.records[i].loss);
    CHECK(a.log.records[i].clean_acc == b.log.records[i].clean_acc);
    CHECK(a.log.records[i].entropy == b.log.records[i].entropy);
  }
  CHECK(a.final_params.checksum() == b.final_params.checksum());
}

TEST_CASE("akd with alpha zero matches plain adversarial training", "[train][oracle]") {
  auto ds = rkd::gen_two_moons(96, 0.1, 5);
  rkd::ModelSpec spec = moons_spec();
  rkd::EnsembleTeacher teacher =
      rkd::EnsembleTeacher::single({spec, rkd::init_params(spec, 77)});

  rkd::TrainConfig at_cfg = quick_cfg(3, 11);
  at_cfg.attack = quick_attack();
  at_cfg.loss = {rkd::LossTag::CE, 0.0, 0.0};
  auto at_run = rkd::train(spec, ds, at_cfg);

  rkd::TrainConfig akd_cfg = quick_cfg(3, 11);
  akd_cfg.attack = quick_attack();
  akd_cfg.loss = {rkd::LossTag::AKD, 0.0, 0.0};  // alpha = 0
  auto akd_run = rkd::train(spec, ds, akd_cfg, &teacher);

  for (std::size_t i = 0; i < 3; ++i)
    CHECK(std::abs(at_run.log.records[i].loss - akd_run.log.records[i].loss) <= 1e-12);
}

TEST_CASE("early stopping designates the matching checkpoint file", "[train]") {
  auto dir = rkdtest::fresh_temp_dir("train_es");
  auto ds = rkd::gen_two_moons(96, 0.1, 6);
  rkd::TrainConfig cfg = quick_cfg(4, 2);
  cfg.early_stop_epoch = 2;
  cfg.checkpoint_every_epoch = true;
  rkd::TrainOptions opts;
  opts.checkpoint_dir = dir.string();
  opts.checkpoint_prefix = "teacher";
  auto res = rkd::train(moons_spec(), ds, cfg, nullptr, nullptr, opts);

  REQUIRE(res.checkpoint_files.size() == 4);
  CHECK(res.designated_epoch == 2);
  rkd::Checkpoint ck = rkd::load_checkpoint((dir / "teacher_ep2.ckpt").string());
  CHECK(ck.epoch == 2);
  for (std::size_t i = 0; i < ck.params.named.size(); ++i)
    CHECK(ck.params.named[i].second.values() ==
          res.designated_params.named[i].second.values());
  CHECK_FALSE(res.designated_params.checksum() == res.final_params.checksum());
}

TEST_CASE("robust accuracy is bounded by clean accuracy without random start",
          "[train][oracle]") {
  auto ds = rkd::gen_two_moons(256, 0.1, 8);
  rkd::TrainConfig cfg = quick_cfg(15, 4);
  auto res = rkd::train(moons_spec(), ds, cfg);

  rkd::AttackConfig attack = quick_attack();
  attack.random_start = false;
  attack.iterations = 5;
  auto ev = rkd::evaluate(moons_spec(), res.final_params, ds, &attack);
  REQUIRE(ev.robust_acc.has_value());
  CHECK(*ev.robust_acc <= ev.clean_acc);

  rkd::AttackConfig null_attack = attack;
  null_attack.epsilon = 0.0;
  auto ev0 = rkd::evaluate(moons_spec(), res.final_params, ds, &null_attack);
  CHECK(*ev0.robust_acc == ev0.clean_acc);
}

TEST_CASE("constant-output model scores one half on a balanced set", "[train]") {
  auto ds = rkd::gen_two_moons(200, 0.1, 9);
  rkd::ModelSpec spec = moons_spec();
  rkd::Params p = rkd::init_params(spec, 1);
  for (auto& [n, t] : p.named)
    for (double& v : t.values()) v = 0.0;
  // All-zero weights give uniform probabilities; argmax ties resolve to
  // class 0, which holds exactly half of a balanced set.
  CHECK(rkd::evaluate(spec, p, ds).clean_acc == 0.5);
}

TEST_CASE("training loss trends down on a separable task", "[train]") {
  auto ds = rkd::gen_gaussian_blobs(200, 2, 2, 6.0, 12);
  rkd::TrainConfig cfg = quick_cfg(5, 3);
  cfg.schedule.base_lr = 0.3;
  auto res = rkd::train(moons_spec(), ds, cfg);
  int non_increasing = 0;
  for (std::size_t i = 1; i < res.log.records.size(); ++i)
    if (res.log.records[i].loss <= res.log.records[i - 1].loss) non_increasing++;
  CHECK(non_increasing >= 4);
}

TEST_CASE("teacher parameters are untouched by student training", "[train]") {
  auto ds = rkd::gen_two_moons(96, 0.1, 10);
  rkd::ModelSpec spec = moons_spec();
  rkd::EnsembleTeacher teacher =
      rkd::EnsembleTeacher::single({spec, rkd::init_params(spec, 55)});
  const std::uint64_t before = teacher.members[0].params.checksum();

  rkd::TrainConfig cfg = quick_cfg(2, 1);
  cfg.attack = quick_attack();
  cfg.loss = {rkd::LossTag::AKD, 0.5, 0.75};
  rkd::train(spec, ds, cfg, &teacher);
  CHECK(teacher.members[0].params.checksum() == before);
}

TEST_CASE("train validates its inputs", "[train]") {
  auto ds = rkd::gen_two_moons(64, 0.1, 1);
  rkd::TrainConfig cfg = quick_cfg(2, 1);
  cfg.loss = {rkd::LossTag::AKD, 0.5, 0.5};
  cfg.attack = quick_attack();
  CHECK_THROWS_AS(rkd::train(moons_spec(), ds, cfg), rkd::ValueError);  // teacher missing

  rkd::TrainConfig bad_restarts = quick_cfg(2, 1);
  bad_restarts.attack = quick_attack();
  bad_restarts.attack->restarts = 3;
  CHECK_THROWS_AS(bad_restarts.validate(), rkd::ValueError);

  rkd::TrainConfig bad_es = quick_cfg(2, 1);
  bad_es.early_stop_epoch = 5;
  CHECK_THROWS_AS(bad_es.validate(), rkd::ValueError);
}

TEST_CASE("runlog serializes one stable record per epoch", "[train]") {
  auto dir = rkdtest::fresh_temp_dir("runlog");
  auto ds = rkd::gen_two_moons(64, 0.1, 2);
  rkd::TrainConfig cfg = quick_cfg(3, 7);
  cfg.attack = quick_attack();
  auto res = rkd::train(moons_spec(), ds, cfg);
  REQUIRE(res.log.records.size() == 3);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(res.log.records[i].epoch == static_cast<int>(i) + 1);

  const std::string path = (dir / "runlog.jsonl").string();
  rkd::write_runlog_jsonl(res.log, path, "cafe0123");
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* key : {"epoch", "lr", "loss", "clean_acc", "robust_acc", "entropy",
                            "config_hash"})
      CHECK(j.contains(key));
    CHECK(j["config_hash"] == "cafe0123");
    lines++;
  }
  CHECK(lines == 3);
}

TEST_CASE("sample probability recording tracks the training set", "[train]") {
  auto ds = rkd::gen_two_moons(48, 0.1, 4);
  rkd::TrainConfig cfg = quick_cfg(2, 3);
  cfg.record_sample_probs = true;
  auto res = rkd::train(moons_spec(), ds, cfg);
  REQUIRE(res.log.sample_probs.size() == 2);
  for (const auto& epoch : res.log.sample_probs) {
    REQUIRE(epoch.size() == ds.n());
    for (double p : epoch) CHECK((p >= 0.0 && p <= 1.0));
  }
}
