#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "rkd/data.hpp"
#include "rkd/model.hpp"
#include "rkd/train.hpp"
#include "test_util.hpp"

namespace {

void write_be32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

void write_idx_pair(const std::string& images, const std::string& labels,
                    const std::vector<unsigned char>& pixels, const std::vector<unsigned char>& y,
                    std::uint32_t rows, std::uint32_t cols) {
  std::ofstream img(images, std::ios::binary);
  write_be32(img, 0x00000803);
  write_be32(img, static_cast<std::uint32_t>(y.size()));
  write_be32(img, rows);
  write_be32(img, cols);
  img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<long>(pixels.size()));
  std::ofstream lab(labels, std::ios::binary);
  write_be32(lab, 0x00000801);
  write_be32(lab, static_cast<std::uint32_t>(y.size()));
  lab.write(reinterpret_cast<const char*>(y.data()), static_cast<long>(y.size()));
}

}  // namespace

TEST_CASE("two moons is deterministic, balanced and in range", "[data]") {
  auto a = rkd::gen_two_moons(101, 0.1, 7);
  auto b = rkd::gen_two_moons(101, 0.1, 7);
  CHECK(a.inputs == b.inputs);
  CHECK(a.labels == b.labels);
  auto c = rkd::gen_two_moons(101, 0.1, 8);
  CHECK(a.inputs != c.inputs);

  int counts[2] = {0, 0};
  for (int y : a.labels) counts[y]++;
  CHECK(std::abs(counts[0] - counts[1]) <= 1);
  a.validate();
}

TEST_CASE("noiseless moons sit exactly on the generating arcs", "[data]") {
  auto ds = rkd::gen_two_moons(200, 0.0, 3);
  for (std::size_t i = 0; i < ds.n(); ++i) {
    auto [x, y] = rkd::two_moons_raw(ds.inputs[2 * i], ds.inputs[2 * i + 1]);
    const double r2 = ds.labels[i] == 0
                          ? x * x + y * y
                          : (x - 1.0) * (x - 1.0) + (y - 0.5) * (y - 0.5);
    CHECK(std::abs(r2 - 1.0) <= 1e-9);
  }
}

TEST_CASE("gaussian blobs are deterministic and balanced", "[data]") {
  auto a = rkd::gen_gaussian_blobs(103, 3, 4, 5.0, 42);
  auto b = rkd::gen_gaussian_blobs(103, 3, 4, 5.0, 42);
  CHECK(a.inputs == b.inputs);
  a.validate();
  std::vector<int> counts(4, 0);
  for (int y : a.labels) counts[y]++;
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  CHECK(*hi - *lo <= 1);
  CHECK_THROWS_AS(rkd::gen_gaussian_blobs(2, 2, 4, 1.0, 0), rkd::ValueError);
}

TEST_CASE("well-separated blobs are linearly separable", "[data][oracle]") {
  // A single-layer softmax model is the linear probe.
  auto ds = rkd::gen_gaussian_blobs(120, 2, 2, 8.0, 5);
  rkd::ModelSpec spec;
  spec.input_dim = 2;
  spec.layer_widths = {2};
  spec.num_classes = 2;
  rkd::TrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 120;
  cfg.seed = 1;
  cfg.schedule.kind = rkd::Schedule::Kind::Constant;
  cfg.schedule.base_lr = 1.0;
  auto res = rkd::train(spec, ds, cfg);
  CHECK(rkd::evaluate(spec, res.final_params, ds).clean_acc == 1.0);
}

TEST_CASE("idx loader scales, counts and filters", "[data]") {
  auto dir = rkdtest::fresh_temp_dir("idx");
  const std::string images = (dir / "imgs.idx").string();
  const std::string labels = (dir / "labs.idx").string();
  // Six 2x2 images, labels 0..2 repeating; pixel value = 40*i + j.
  std::vector<unsigned char> pixels;
  std::vector<unsigned char> y;
  for (unsigned i = 0; i < 6; ++i) {
    y.push_back(static_cast<unsigned char>(i % 3));
    for (unsigned j = 0; j < 4; ++j) pixels.push_back(static_cast<unsigned char>(40 * i + j));
  }
  pixels[0] = 0;
  pixels[1] = 255;
  write_idx_pair(images, labels, pixels, y, 2, 2);

  auto ds = rkd::load_idx_images(images, labels);
  CHECK(ds.n() == 6);
  CHECK(ds.num_classes == 3);
  CHECK(ds.sample_shape == rkd::Shape{1, 2, 2});
  CHECK(ds.inputs[0] == 0.0);
  CHECK(ds.inputs[1] == 1.0);
  ds.validate();

  auto filtered = rkd::load_idx_images(images, labels, {2, 0});
  CHECK(filtered.n() == 4);
  CHECK(filtered.num_classes == 2);
  for (std::size_t i = 0; i < filtered.n(); ++i) CHECK(filtered.labels[i] <= 1);
  // Class 2 remaps to 0, class 0 remaps to 1, in filter order.
  CHECK(filtered.labels[0] == 1);
  CHECK(filtered.labels[1] == 0);

  CHECK_THROWS_AS(rkd::load_idx_images(images, labels, {7}), rkd::ValueError);
  CHECK_THROWS_AS(rkd::load_idx_images(labels, labels), rkd::ArtifactError);  // wrong magic
  CHECK_THROWS_AS(rkd::load_idx_images((dir / "nope.idx").string(), labels),
                  rkd::ArtifactError);

  // Truncated payload.
  std::ofstream trunc((dir / "trunc.idx").string(), std::ios::binary);
  write_be32(trunc, 0x00000803);
  write_be32(trunc, 6);
  write_be32(trunc, 2);
  write_be32(trunc, 2);
  trunc.write("abc", 3);
  trunc.close();
  CHECK_THROWS_AS(rkd::load_idx_images((dir / "trunc.idx").string(), labels),
                  rkd::ArtifactError);
}

TEST_CASE("batch_iter permutes per epoch and keeps partial batches", "[data]") {
  auto ds = rkd::gen_two_moons(33, 0.1, 1);
  auto batches = rkd::batch_iter(ds, 10, 5, 0);
  REQUIRE(batches.size() == 4);
  CHECK(batches.back().size() == 3);
  std::set<std::size_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  CHECK(seen.size() == 33);

  auto again = rkd::batch_iter(ds, 10, 5, 0);
  CHECK(batches == again);
  auto other_epoch = rkd::batch_iter(ds, 10, 5, 1);
  CHECK(batches != other_epoch);

  auto one = rkd::batch_iter(ds, 64, 5, 0);
  REQUIRE(one.size() == 1);
  CHECK(one[0].size() == 33);
}
