#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cpprompt/cpprompt.hpp"

namespace testing_support {

using namespace cpprompt;

/// A backbone small enough that forward passes take microseconds.
inline BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.dim = 16;
  c.vision_layers = 2;
  c.text_layers = 1;
  c.heads = 2;
  c.image_size = 8;
  c.patch = 4;
  c.vocab = 16;
  c.classes = 3;
  c.label_tokens = 2;
  c.mlp_ratio = 2;
  return c;
}

inline PromptConfig tiny_prompts() {
  PromptConfig p;
  p.common_length = 2;
  p.image_prompt_length = 4;
  p.text_prompt_length = 2;
  p.layer_start = 0;
  p.layer_end = 1;
  return p;
}

inline Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, bool grad = false,
                            double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor::randn({r, c}, stddev, rng, grad);
}

/// Central-difference check of one tensor's analytic gradient against `f`,
/// which recomputes the scalar loss from scratch. Returns
/// max|analytic − numeric| / max(max|numeric|, 1e-12).
inline double fd_relative_error(Tensor param, const std::function<double()>& f, double eps = 1e-6) {
  std::vector<double> analytic(param.grad().begin(), param.grad().end());
  if (analytic.size() != param.size()) analytic.assign(param.size(), 0.0);
  double worst = 0.0, scale = 0.0;
  auto data = param.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double keep = data[i];
    data[i] = keep + eps;
    const double up = f();
    data[i] = keep - eps;
    const double down = f();
    data[i] = keep;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric));
    scale = std::max(scale, std::abs(numeric));
  }
  return worst / std::max(scale, 1e-12);
}

/// Scalar probe sum(x · w) with a fixed random column w, so that upstream
/// gradients are not uniform.
inline Tensor probe(Tape& tape, const Tensor& x, std::uint64_t seed = 99) {
  return sum(tape, matmul(tape, x, random_matrix(x.cols(), 1, seed)));
}

/// Labelled dataset with the given images and labels, for selector tests.
inline Dataset make_dataset(std::size_t h, std::size_t w, std::size_t classes, std::vector<int> labels,
                            std::vector<float> pixels) {
  Dataset d;
  d.height = h;
  d.width = w;
  d.channels = 1;
  d.classes = classes;
  d.labels = std::move(labels);
  d.pixels = std::move(pixels);
  return d;
}

}  // namespace testing_support
