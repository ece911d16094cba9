#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cpprompt/error.hpp"

namespace cpprompt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles with optional gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage, like a
/// framework tensor. Use clone() for an independent deep copy. The gradient
/// buffer is allocated lazily, and only ever on tensors with requires_grad.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> data(numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(data), requires_grad);
  }

  /// I.i.d. normal entries; used for parameter and prompt initialisation.
  template <typename Rng>
  static Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = dist(rng);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t size() const { return impl().data.size(); }
  std::size_t dim(std::size_t i) const { return impl().shape.at(i); }

  /// Leading dimension for rank >= 2, otherwise 1.
  std::size_t rows() const { return rank() >= 2 ? impl().shape[0] : 1; }
  /// Product of the trailing dimensions (the row width).
  std::size_t cols() const {
    const auto& s = impl().shape;
    if (s.empty()) return 1;
    if (s.size() == 1) return s[0];
    return numel(s) / s[0];
  }

  std::span<double> data() { return impl().data; }
  std::span<const double> data() const { return impl().data; }
  double& operator[](std::size_t i) { return impl().data[i]; }
  double operator[](std::size_t i) const { return impl().data[i]; }
  double& at(std::size_t r, std::size_t c) { return impl().data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return impl().data[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
    return impl().data[0];
  }

  bool requires_grad() const { return impl().requires_grad; }

  /// Marks the tensor trainable or frozen. Freezing drops any gradient buffer.
  void set_requires_grad(bool on) {
    impl().requires_grad = on;
    if (!on) impl().grad.clear();
  }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const double> grad() const { return impl().grad; }

  /// Mutable gradient, allocated on first use. Throws on frozen tensors.
  /// The gradient lives in the shared storage, so this is callable through
  /// any handle.
  std::span<double> grad_mut() const {
    if (!impl_) throw UsageError("use of an undefined tensor");
    auto& s = *impl_;
    if (!s.requires_grad) throw UsageError("gradient write on a frozen tensor");
    if (s.grad.size() != s.data.size()) s.grad.assign(s.data.size(), 0.0);
    return s.grad;
  }

  void zero_grad() {
    auto& s = impl();
    if (!s.grad.empty()) std::fill(s.grad.begin(), s.grad.end(), 0.0);
  }
  void drop_grad() { impl().grad.clear(); }

  /// Deep copy of shape and data. The copy is frozen and carries no gradient.
  Tensor clone() const { return Tensor(impl().shape, impl().data, false); }

  Tensor reshaped(Shape shape) const {
    Tensor out = clone();
    if (numel(shape) != out.size()) {
      throw DimensionError("cannot reshape " + to_string(this->shape()) + " to " + to_string(shape));
    }
    out.impl().shape = std::move(shape);
    return out;
  }

  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  Tensor(Shape shape, std::vector<double> data, bool requires_grad)
      : impl_(std::make_shared<Storage>(Storage{std::move(shape), std::move(data), {}, requires_grad})) {}

  Storage& impl() {
    if (!impl_) throw UsageError("use of an undefined tensor");
    return *impl_;
  }
  const Storage& impl() const {
    if (!impl_) throw UsageError("use of an undefined tensor");
    return *impl_;
  }

  std::shared_ptr<Storage> impl_;
};

/// Bitwise equality of shape and data.
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data();
  auto y = b.data();
  return std::equal(x.begin(), x.end(), y.begin(),
                    [](double p, double q) { return std::memcmp(&p, &q, sizeof(double)) == 0; });
}

}  // namespace cpprompt
