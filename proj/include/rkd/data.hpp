#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "rkd/common.hpp"
#include "rkd/tensor.hpp"

namespace rkd {

enum class Split { Train, Test };

struct Dataset {
  Shape sample_shape;          // per-sample shape, e.g. {2} or {1, 8, 8}
  std::vector<double> inputs;  // n x prod(sample_shape), row-major
  std::vector<int> labels;
  int num_classes = 2;
  std::string name;
  std::uint64_t seed = 0;
  Split split = Split::Train;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;

  std::size_t n() const { return labels.size(); }
  std::size_t sample_size() const { return numel(sample_shape); }

  void validate() const {
    if (inputs.size() != n() * sample_size())
      throw ValueError("dataset: inputs and labels sizes disagree");
    if (!(clamp_lo < clamp_hi)) throw ValueError("dataset: clamp_lo must be < clamp_hi");
    for (int y : labels)
      if (y < 0 || y >= num_classes)
        throw ValueError(format_msg("dataset: label %d outside [0, %d)", y, num_classes));
    for (double v : inputs)
      if (!(v >= clamp_lo && v <= clamp_hi))
        throw ValueError(format_msg("dataset: input %g outside [%g, %g]", v, clamp_lo, clamp_hi));
  }

  // Gather rows into a batch tensor [b, ...sample_shape].
  Tensor gather(const std::vector<std::size_t>& idx) const {
    Shape shape{idx.size()};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    Tensor t = Tensor::zeros(std::move(shape));
    const std::size_t d = sample_size();
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(inputs.begin() + static_cast<long>(idx[i] * d), d,
                  t.values().begin() + static_cast<long>(i * d));
    return t;
  }

  std::vector<int> gather_labels(const std::vector<std::size_t>& idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
  }

  Tensor all_inputs() const {
    std::vector<std::size_t> idx(n());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return gather(idx);
  }

  // Same samples viewed as flat vectors (for dense models over image data).
  Dataset flattened() const {
    Dataset d = *this;
    d.sample_shape = {sample_size()};
    return d;
  }
};

// c isotropic unit-variance Gaussian clusters with centers on a circle of
// radius `separation` (first two dims), affinely rescaled into [0,1]^d and
// clipped. Labels are assigned round-robin so class counts differ by <= 1.
inline Dataset gen_gaussian_blobs(std::size_t n, std::size_t d, int c, double separation,
                                  std::uint64_t seed) {
  if (c < 2 || n < static_cast<std::size_t>(c) || d == 0 || !(separation > 0.0))
    throw ValueError("gaussian_blobs: need n >= c >= 2, d >= 1, separation > 0");
  Dataset ds;
  ds.sample_shape = {d};
  ds.num_classes = c;
  ds.name = "gaussian_blobs";
  ds.seed = seed;
  ds.inputs.resize(n * d);
  ds.labels.resize(n);
  Rng rng(seed);
  const double pi = 3.141592653589793238462643383279502884;
  const double radius = separation + 4.0;  // 4 sigma of slack before clipping
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(c));
    ds.labels[i] = label;
    const double angle = 2.0 * pi * static_cast<double>(label) / static_cast<double>(c);
    for (std::size_t j = 0; j < d; ++j) {
      double center = 0.0;
      if (j == 0) center = separation * std::cos(angle);
      if (j == 1) center = separation * std::sin(angle);
      const double raw = center + rng.normal();
      ds.inputs[i * d + j] = std::clamp((raw + radius) / (2.0 * radius), 0.0, 1.0);
    }
  }
  return ds;
}

// Two interleaved half-circles: class 0 on x^2 + y^2 = 1 (upper arc), class 1
// on (x-1)^2 + (y-0.5)^2 = 1 (lower arc), plus Gaussian noise, rescaled from
// the generating frame x in [-1.25, 2.25], y in [-0.75, 1.25] into [0,1]^2.
inline Dataset gen_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n < 2 || noise < 0.0) throw ValueError("two_moons: need n >= 2 and noise >= 0");
  Dataset ds;
  ds.sample_shape = {2};
  ds.num_classes = 2;
  ds.name = "two_moons";
  ds.seed = seed;
  ds.inputs.resize(n * 2);
  ds.labels.resize(n);
  Rng rng(seed);
  const double pi = 3.141592653589793238462643383279502884;
  const std::size_t per_class[2] = {n - n / 2, n / 2};
  std::size_t taken[2] = {0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    ds.labels[i] = label;
    const std::size_t j = taken[label]++;
    const std::size_t m = per_class[label];
    const double t = m > 1 ? pi * static_cast<double>(j) / static_cast<double>(m - 1) : 0.0;
    double x, y;
    if (label == 0) {
      x = std::cos(t);
      y = std::sin(t);
    } else {
      x = 1.0 - std::cos(t);
      y = 0.5 - std::sin(t);
    }
    x += noise * rng.normal();
    y += noise * rng.normal();
    ds.inputs[i * 2 + 0] = std::clamp((x + 1.25) / 3.5, 0.0, 1.0);
    ds.inputs[i * 2 + 1] = std::clamp((y + 0.75) / 2.0, 0.0, 1.0);
  }
  return ds;
}

// Maps a point of a two-moons dataset back to the generating frame (for
// checking the arc equations).
inline std::pair<double, double> two_moons_raw(double u, double v) {
  return {u * 3.5 - 1.25, v * 2.0 - 0.75};
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw ArtifactError(format_msg("idx: truncated header in %s", path.c_str()));
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace detail

// Reads an IDX image/label file pair (magics 0x00000803 / 0x00000801, big
// endian dims, ubyte payload). Pixels are scaled to [0,1]. An optional class
// filter keeps only the listed classes and remaps labels to 0..len-1 in the
// given order.
inline Dataset load_idx_images(const std::string& images_path, const std::string& labels_path,
                               const std::vector<int>& classes_filter = {}) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw ArtifactError(format_msg("idx: cannot open %s", images_path.c_str()));
  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw ArtifactError(format_msg("idx: cannot open %s", labels_path.c_str()));

  if (detail::read_be32(imgs, images_path) != 0x00000803u)
    throw ArtifactError(format_msg("idx: bad image magic in %s", images_path.c_str()));
  const std::uint32_t n_img = detail::read_be32(imgs, images_path);
  const std::uint32_t rows = detail::read_be32(imgs, images_path);
  const std::uint32_t cols = detail::read_be32(imgs, images_path);

  if (detail::read_be32(labs, labels_path) != 0x00000801u)
    throw ArtifactError(format_msg("idx: bad label magic in %s", labels_path.c_str()));
  const std::uint32_t n_lab = detail::read_be32(labs, labels_path);
  if (n_img != n_lab)
    throw ArtifactError(format_msg("idx: %u images but %u labels", n_img, n_lab));

  std::vector<unsigned char> pixels(static_cast<std::size_t>(n_img) * rows * cols);
  if (!imgs.read(reinterpret_cast<char*>(pixels.data()), static_cast<long>(pixels.size())))
    throw ArtifactError(format_msg("idx: truncated payload in %s", images_path.c_str()));
  std::vector<unsigned char> raw_labels(n_lab);
  if (!labs.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<long>(raw_labels.size())))
    throw ArtifactError(format_msg("idx: truncated payload in %s", labels_path.c_str()));

  int max_label = 0;
  for (unsigned char l : raw_labels) max_label = std::max(max_label, static_cast<int>(l));

  std::vector<int> remap;  // original label -> new label, -1 drops the sample
  int out_classes;
  if (classes_filter.empty()) {
    out_classes = max_label + 1;
    remap.resize(static_cast<std::size_t>(out_classes));
    for (int i = 0; i < out_classes; ++i) remap[static_cast<std::size_t>(i)] = i;
  } else {
    remap.assign(static_cast<std::size_t>(max_label) + 1, -1);
    for (std::size_t i = 0; i < classes_filter.size(); ++i) {
      const int cls = classes_filter[i];
      bool present = false;
      for (unsigned char l : raw_labels) present |= (static_cast<int>(l) == cls);
      if (cls < 0 || !present)
        throw ValueError(format_msg("idx: filter class %d not present in %s", cls,
                                    labels_path.c_str()));
      remap[static_cast<std::size_t>(cls)] = static_cast<int>(i);
    }
    out_classes = static_cast<int>(classes_filter.size());
  }
  if (out_classes < 2) throw ValueError("idx: need at least 2 classes after filtering");

  Dataset ds;
  ds.sample_shape = {1, rows, cols};
  ds.num_classes = out_classes;
  ds.name = "idx";
  const std::size_t d = static_cast<std::size_t>(rows) * cols;
  for (std::uint32_t i = 0; i < n_img; ++i) {
    const int mapped = remap[raw_labels[i]];
    if (mapped < 0) continue;
    ds.labels.push_back(mapped);
    for (std::size_t j = 0; j < d; ++j)
      ds.inputs.push_back(static_cast<double>(pixels[i * d + j]) / 255.0);
  }
  ds.validate();
  return ds;
}

// Seeded permutation of the dataset split into batches; the last partial
// batch is kept.
inline std::vector<std::vector<std::size_t>> batch_iter(const Dataset& ds, std::size_t batch_size,
                                                        std::uint64_t seed, int epoch) {
  if (batch_size == 0) throw ValueError("batch_iter: batch_size must be >= 1");
  std::vector<std::size_t> perm(ds.n());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng rng(mix_seed(seed, 0x53485546ULL /* shuffle stream */, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < perm.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, perm.size());
    batches.emplace_back(perm.begin() + static_cast<long>(start),
                         perm.begin() + static_cast<long>(end));
  }
  return batches;
}

}  // namespace rkd
