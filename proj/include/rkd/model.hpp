#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rkd/common.hpp"
#include "rkd/tensor.hpp"

namespace rkd {

enum class ModelKind { Mlp, TinyConv };

// Desk-scale classifier family: a plain MLP for vector inputs and a single
// conv layer + two dense layers for small image inputs.
struct ModelSpec {
  ModelKind kind = ModelKind::Mlp;
  // mlp: per-layer output widths, last entry == num_classes.
  std::vector<int> layer_widths;
  int input_dim = 0;
  // tiny_conv: input [channels, height, width] and the (channels, kernel,
  // hidden) triple of the network.
  std::array<int, 3> input_shape{0, 0, 0};
  int conv_channels = 0;
  int conv_kernel = 0;
  int conv_hidden = 0;
  int num_classes = 2;

  bool operator==(const ModelSpec&) const = default;

  void validate() const {
    if (num_classes < 2) throw ValueError(format_msg("model: num_classes %d < 2", num_classes));
    if (kind == ModelKind::Mlp) {
      if (input_dim <= 0) throw ValueError("model: mlp input_dim must be positive");
      if (layer_widths.empty()) throw ValueError("model: mlp needs at least one layer");
      for (int w : layer_widths)
        if (w <= 0) throw ValueError(format_msg("model: layer width %d must be positive", w));
      if (layer_widths.back() != num_classes)
        throw ValueError(format_msg("model: last layer width %d != num_classes %d",
                                    layer_widths.back(), num_classes));
    } else {
      for (int d : input_shape)
        if (d <= 0) throw ValueError("model: tiny_conv input_shape must be positive");
      if (conv_channels <= 0 || conv_kernel <= 0 || conv_hidden <= 0)
        throw ValueError("model: tiny_conv (channels, kernel, hidden) must be positive");
      if (conv_kernel > input_shape[1] || conv_kernel > input_shape[2])
        throw ValueError(format_msg("model: kernel %d exceeds input %dx%d", conv_kernel,
                                    input_shape[1], input_shape[2]));
    }
  }

  // Shape of one sample, without the batch dim.
  Shape sample_shape() const {
    if (kind == ModelKind::Mlp) return {static_cast<std::size_t>(input_dim)};
    return {static_cast<std::size_t>(input_shape[0]), static_cast<std::size_t>(input_shape[1]),
            static_cast<std::size_t>(input_shape[2])};
  }
};

struct Params {
  std::vector<std::pair<std::string, Tensor>> named;
  std::uint64_t seed = 0;

  Tensor& at(std::string_view name) {
    for (auto& [n, t] : named)
      if (n == name) return t;
    throw ValueError(format_msg("params: no tensor named '%s'", std::string(name).c_str()));
  }
  const Tensor& at(std::string_view name) const {
    return const_cast<Params*>(this)->at(name);
  }

  Params clone() const {
    Params out;
    out.seed = seed;
    out.named.reserve(named.size());
    for (const auto& [n, t] : named) {
      Tensor c = t.detach();
      c.set_requires_grad(t.requires_grad());
      out.named.emplace_back(n, std::move(c));
    }
    return out;
  }

  Params frozen_clone() const {
    Params out = clone();
    out.set_requires_grad(false);
    return out;
  }

  void set_requires_grad(bool v) {
    for (auto& [n, t] : named) t.set_requires_grad(v);
  }

  void zero_grad() {
    for (auto& [n, t] : named) t.zero_grad();
  }

  std::uint64_t checksum() const {
    std::uint64_t h = fnv1a64(&seed, sizeof(seed));
    for (const auto& [n, t] : named) {
      h = fnv1a64(n.data(), n.size(), h);
      h = fnv1a64(t.values().data(), t.values().size() * sizeof(double), h);
    }
    return h;
  }
};

struct Model {
  ModelSpec spec;
  Params params;
};

namespace detail {
inline Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}
}  // namespace detail

// Scaled-uniform fan-in weights, zero biases; bit-identical for a given
// (spec, seed).
inline Params init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Params params;
  params.seed = seed;
  auto push = [&](std::string name, Tensor t) {
    params.named.emplace_back(std::move(name), std::move(t));
  };
  if (spec.kind == ModelKind::Mlp) {
    std::size_t in = static_cast<std::size_t>(spec.input_dim);
    for (std::size_t i = 0; i < spec.layer_widths.size(); ++i) {
      const std::size_t out = static_cast<std::size_t>(spec.layer_widths[i]);
      push("w" + std::to_string(i), detail::init_weight({in, out}, in, rng));
      push("b" + std::to_string(i), Tensor::zeros({out}));
      in = out;
    }
  } else {
    const std::size_t ci = static_cast<std::size_t>(spec.input_shape[0]);
    const std::size_t k = static_cast<std::size_t>(spec.conv_kernel);
    const std::size_t co = static_cast<std::size_t>(spec.conv_channels);
    const std::size_t ho = static_cast<std::size_t>(spec.input_shape[1]) - k + 1;
    const std::size_t wo = static_cast<std::size_t>(spec.input_shape[2]) - k + 1;
    const std::size_t flat = co * ho * wo;
    const std::size_t hidden = static_cast<std::size_t>(spec.conv_hidden);
    const std::size_t c = static_cast<std::size_t>(spec.num_classes);
    push("conv_w", detail::init_weight({co, ci, k, k}, ci * k * k, rng));
    push("conv_b", Tensor::zeros({co}));
    push("w1", detail::init_weight({flat, hidden}, flat, rng));
    push("b1", Tensor::zeros({hidden}));
    push("w2", detail::init_weight({hidden, c}, hidden, rng));
    push("b2", Tensor::zeros({c}));
  }
  return params;
}

// Forward pass to logits; builds lineage whenever x or the params require
// gradients.
inline Tensor logits(const ModelSpec& spec, const Params& params, const Tensor& x) {
  if (spec.kind == ModelKind::Mlp) {
    if (x.shape().size() != 2 || x.shape()[1] != static_cast<std::size_t>(spec.input_dim))
      throw ValueError(format_msg("model: input %s does not match input_dim %d",
                                  shape_str(x.shape()).c_str(), spec.input_dim));
    Tensor h = x;
    const std::size_t layers = spec.layer_widths.size();
    for (std::size_t i = 0; i < layers; ++i) {
      h = add(matmul(h, params.at("w" + std::to_string(i))),
              params.at("b" + std::to_string(i)));
      if (i + 1 < layers) h = relu(h);
    }
    return h;
  }
  const Shape want = {x.shape().empty() ? 0 : x.shape()[0],
                      static_cast<std::size_t>(spec.input_shape[0]),
                      static_cast<std::size_t>(spec.input_shape[1]),
                      static_cast<std::size_t>(spec.input_shape[2])};
  if (x.shape() != want)
    throw ValueError(format_msg("model: input %s does not match conv input shape",
                                shape_str(x.shape()).c_str()));
  Tensor h = relu(conv2d(x, params.at("conv_w"), params.at("conv_b")));
  h = reshape(h, {x.shape()[0], h.size() / x.shape()[0]});
  h = relu(add(matmul(h, params.at("w1")), params.at("b1")));
  return add(matmul(h, params.at("w2")), params.at("b2"));
}

// Graph-connected probabilities (for losses that differentiate through them).
inline Tensor probs_graph(const ModelSpec& spec, const Params& params, const Tensor& x) {
  return softmax(logits(spec, params, x));
}

// Probability rows as plain values; lineage is dropped.
inline Tensor predict_probs(const ModelSpec& spec, const Params& params, const Tensor& x) {
  return probs_graph(spec, params, x).detach();
}

inline int argmax_row(const Tensor& probs, std::size_t row) {
  const std::size_t c = probs.shape().back();
  const double* p = probs.values().data() + row * c;
  int best = 0;
  for (std::size_t i = 1; i < c; ++i)
    if (p[i] > p[best]) best = static_cast<int>(i);
  return best;
}

inline Tensor one_hot(const std::vector<int>& labels, int num_classes) {
  Tensor t = Tensor::zeros({labels.size(), static_cast<std::size_t>(num_classes)});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ValueError(format_msg("one_hot: label %d outside [0, %d)", labels[i], num_classes));
    t.values()[i * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(labels[i])] =
        1.0;
  }
  return t;
}

struct EnsembleTeacher {
  std::vector<Model> members;
  std::vector<double> beta;

  void validate() const {
    if (members.empty()) throw ValueError("ensemble: needs at least one member");
    if (beta.size() != members.size())
      throw ValueError(format_msg("ensemble: %zu beta weights for %zu members", beta.size(),
                                  members.size()));
    double total = 0.0;
    for (double b : beta) {
      if (b < 0.0) throw ValueError(format_msg("ensemble: beta %g < 0", b));
      total += b;
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw ValueError(format_msg("ensemble: beta sums to %.12g, expected 1", total));
    for (const Model& m : members)
      if (m.spec.num_classes != members[0].spec.num_classes)
        throw ValueError("ensemble: members disagree on num_classes");
  }

  static EnsembleTeacher single(Model m) { return EnsembleTeacher{{std::move(m)}, {1.0}}; }
};

// Convex mixture of member probability outputs.
inline Tensor ensemble_probs(const EnsembleTeacher& ens, const Tensor& x) {
  ens.validate();
  Tensor acc;
  for (std::size_t i = 0; i < ens.members.size(); ++i) {
    Tensor p = predict_probs(ens.members[i].spec, ens.members[i].params, x);
    if (i == 0) {
      for (double& v : p.values()) v *= ens.beta[0];
      acc = std::move(p);
    } else {
      if (p.shape() != acc.shape()) throw ValueError("ensemble: member output shapes disagree");
      for (std::size_t j = 0; j < p.size(); ++j) acc.values()[j] += ens.beta[i] * p.values()[j];
    }
  }
  return acc;
}

}  // namespace rkd
