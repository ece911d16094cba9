#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "cpprompt/detail/gemm.hpp"
#include "cpprompt/tape.hpp"
#include "cpprompt/tensor.hpp"

namespace cpprompt {

namespace detail {

inline bool needs_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

template <typename... Ts>
bool any_needs_grad(const Ts&... ts) {
  return (needs_grad(ts) || ...);
}

inline void require_matrix(const Tensor& t, const char* op, const char* what) {
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError(std::string(op) + ": " + what + " must be a matrix, got " +
                         (t.defined() ? to_string(t.shape()) : std::string("undefined")));
  }
}

inline void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m×k] · b[k×n].
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul", "lhs");
  detail::require_matrix(b, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n}, detail::any_needs_grad(a, b));
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data().data());
  if (out.requires_grad()) {
    tape.record(out, [a, b, m, k, n](std::span<const double> g) mutable {
      if (a.requires_grad()) detail::gemm_nt(m, n, k, g.data(), b.data().data(), a.grad_mut().data());
      if (b.requires_grad()) detail::gemm_tn(k, m, n, a.data().data(), g.data(), b.grad_mut().data());
    });
  }
  return out;
}

/// x[n×k] · w[k×o] + bias[o]; bias may be undefined.
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  detail::require_matrix(x, "linear", "input");
  detail::require_matrix(w, "linear", "weight");
  const std::size_t n = x.dim(0), k = x.dim(1), o = w.dim(1);
  if (w.dim(0) != k) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " does not fit weight " +
                         to_string(w.shape()));
  }
  if (bias.defined() && bias.size() != o) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " does not fit weight " +
                         to_string(w.shape()));
  }
  Tensor out = Tensor::zeros({n, o}, detail::any_needs_grad(x, w, bias));
  auto y = out.data();
  if (bias.defined()) {
    auto bd = bias.data();
    for (std::size_t i = 0; i < n; ++i) std::copy(bd.begin(), bd.end(), y.begin() + i * o);
  }
  detail::gemm_nn(n, k, o, x.data().data(), w.data().data(), y.data());
  if (out.requires_grad()) {
    tape.record(out, [x, w, bias, n, k, o](std::span<const double> g) mutable {
      if (x.requires_grad()) detail::gemm_nt(n, o, k, g.data(), w.data().data(), x.grad_mut().data());
      if (w.requires_grad()) detail::gemm_tn(k, n, o, x.data().data(), g.data(), w.grad_mut().data());
      if (detail::needs_grad(bias)) {
        auto gb = bias.grad_mut();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < o; ++j) gb[j] += g[i * o + j];
      }
    });
  }
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& x) {
  detail::require_matrix(x, "transpose", "input");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({c, r}, x.requires_grad());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  if (out.requires_grad()) {
    tape.record(out, [x, r, c](std::span<const double> g) mutable {
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape(), detail::any_needs_grad(a, b));
  auto y = out.data();
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = ad[i] + bd[i];
  if (out.requires_grad()) {
    tape.record(out, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) detail::add_into(a.grad_mut(), g);
      if (b.requires_grad()) detail::add_into(b.grad_mut(), g);
    });
  }
  return out;
}

/// x[(B·n)×d] + tile[n×d] repeated over the B blocks of rows.
inline Tensor add_tiled(Tape& tape, const Tensor& x, const Tensor& tile) {
  detail::require_matrix(x, "add_tiled", "input");
  detail::require_matrix(tile, "add_tiled", "tile");
  const std::size_t n = tile.dim(0), d = tile.dim(1);
  if (x.dim(1) != d || n == 0 || x.dim(0) % n != 0) {
    throw DimensionError("add_tiled: " + to_string(x.shape()) + " is not a stack of " +
                         to_string(tile.shape()));
  }
  Tensor out = Tensor::zeros(x.shape(), detail::any_needs_grad(x, tile));
  auto y = out.data();
  auto xd = x.data(), td = tile.data();
  const std::size_t block = n * d;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] + td[i % block];
  if (out.requires_grad()) {
    tape.record(out, [x, tile, block](std::span<const double> g) mutable {
      if (x.requires_grad()) detail::add_into(x.grad_mut(), g);
      if (tile.requires_grad()) {
        auto gt = tile.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i % block] += g[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& x, double s) {
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
  auto y = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] * s;
  if (out.requires_grad()) {
    tape.record(out, [x, s](std::span<const double> g) mutable {
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
    });
  }
  return out;
}

/// x · min(exp(log_scale), max_scale); log_scale is a one-element tensor.
inline Tensor scale_by_exp(Tape& tape, const Tensor& x, const Tensor& log_scale, double max_scale) {
  if (log_scale.size() != 1) throw DimensionError("scale_by_exp: log_scale must hold one value");
  const double raw = std::exp(log_scale[0]);
  const bool clamped = raw >= max_scale;
  const double s = clamped ? max_scale : raw;
  Tensor out = Tensor::zeros(x.shape(), detail::any_needs_grad(x, log_scale));
  auto y = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] * s;
  if (out.requires_grad()) {
    tape.record(out, [x, log_scale, s, clamped](std::span<const double> g) mutable {
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
      }
      if (log_scale.requires_grad() && !clamped) {
        double acc = 0.0;
        auto xd = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xd[i];
        log_scale.grad_mut()[0] += acc * s;
      }
    });
  }
  return out;
}

/// Tanh-approximated GELU.
inline Tensor gelu(Tape& tape, const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
  auto y = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = xd[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v)));
  }
  if (out.requires_grad()) {
    tape.record(out, [x](std::span<const double> g) mutable {
      auto gx = x.grad_mut();
      auto xd = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xd[i];
        const double t = std::tanh(c * (v + a * v * v * v));
        const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise normalisations

/// Row softmax, stabilised by subtracting each row's maximum.
inline Tensor softmax_rows(Tape& tape, const Tensor& x) {
  detail::require_matrix(x, "softmax_rows", "input");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
  auto y = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = xd.data() + i * n;
    double* yi = y.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(xi[j])) throw NumericError("softmax_rows: non-finite input at row " + std::to_string(i));
      mx = std::max(mx, xi[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    for (std::size_t j = 0; j < n; ++j) yi[j] /= sum;
  }
  if (out.requires_grad()) {
    tape.record(out, [x, out, m, n](std::span<const double> g) mutable {
      auto gx = x.grad_mut();
      auto y = out.data();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return out;
}

/// Per-row standardisation followed by the affine gain/bias.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  detail::require_matrix(x, "layer_norm", "input");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (n < 2) throw DimensionError("layer_norm: row width must be at least 2, got " + std::to_string(n));
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not fit rows of width " + std::to_string(n));
  }
  Tensor out = Tensor::zeros(x.shape(), detail::any_needs_grad(x, gain, bias));
  std::vector<double> xhat(m * n), inv_std(m);
  auto y = out.data();
  auto xd = x.data(), gd = gain.data(), bd = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = xd.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xi[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xi[j] - mean) * inv_std[i];
      y[i * n + j] = xhat[i * n + j] * gd[j] + bd[j];
    }
  }
  if (out.requires_grad()) {
    tape.record(out, [x, gain, bias, m, n, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](std::span<const double> g) mutable {
      if (gain.requires_grad()) {
        auto gg = gain.grad_mut();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_mut();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        auto gd = gain.data();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[i * n + j] * gd[j];
            mean_d += d;
            mean_dx += d * xhat[i * n + j];
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[i * n + j] * gd[j];
            gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
      }
    });
  }
  return out;
}

/// Scales every row to unit Euclidean length.
inline Tensor l2_normalize_rows(Tape& tape, const Tensor& x) {
  detail::require_matrix(x, "l2_normalize_rows", "input");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
  std::vector<double> norms(m);
  auto y = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += xd[i * n + j] * xd[i * n + j];
    norms[i] = std::max(std::sqrt(ss), 1e-300);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = xd[i * n + j] / norms[i];
  }
  if (out.requires_grad()) {
    tape.record(out, [x, out, m, n, norms = std::move(norms)](std::span<const double> g) mutable {
      auto gx = x.grad_mut();
      auto y = out.data();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) / norms[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row bookkeeping

/// Vertical stack in argument order. Parts may have zero rows.
inline Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const std::size_t d = parts.front().cols();
  std::size_t rows = 0;
  bool grad = false;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows", "part");
    if (p.dim(1) != d) {
      throw DimensionError("concat_rows: column mismatch " + to_string(parts.front().shape()) + " vs " +
                           to_string(p.shape()));
    }
    rows += p.dim(0);
    grad = grad || p.requires_grad();
  }
  Tensor out = Tensor::zeros({rows, d}, grad);
  auto y = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    auto pd = p.data();
    std::copy(pd.begin(), pd.end(), y.begin() + offset);
    offset += pd.size();
  }
  if (grad) {
    tape.record(out, [parts](std::span<const double> g) mutable {
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) detail::add_into(p.grad_mut(), g.subspan(offset, p.size()));
        offset += p.size();
      }
    });
  }
  return out;
}

/// Gathers rows by index; repeated indices accumulate in backward.
inline Tensor take_rows(Tape& tape, const Tensor& x, std::vector<std::size_t> index) {
  detail::require_matrix(x, "take_rows", "input");
  const std::size_t n = x.dim(1);
  for (auto r : index) {
    if (r >= x.dim(0)) throw DimensionError("take_rows: row " + std::to_string(r) + " out of " + to_string(x.shape()));
  }
  Tensor out = Tensor::zeros({index.size(), n}, x.requires_grad());
  auto y = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < index.size(); ++i)
    std::copy_n(xd.begin() + index[i] * n, n, y.begin() + i * n);
  if (out.requires_grad()) {
    tape.record(out, [x, index = std::move(index), n](std::span<const double> g) mutable {
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < index.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) gx[index[i] * n + j] += g[i * n + j];
    });
  }
  return out;
}

/// Contiguous row range [begin, begin + count).
inline Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> index(count);
  std::iota(index.begin(), index.end(), begin);
  return take_rows(tape, x, std::move(index));
}

/// Mean over consecutive blocks of `block` rows: [(U·block)×d] -> [U×d].
inline Tensor block_mean(Tape& tape, const Tensor& x, std::size_t block) {
  detail::require_matrix(x, "block_mean", "input");
  if (block == 0 || x.dim(0) % block != 0) {
    throw DimensionError("block_mean: " + std::to_string(x.dim(0)) + " rows not divisible into blocks of " +
                         std::to_string(block));
  }
  const std::size_t u = x.dim(0) / block, d = x.dim(1);
  const double inv = 1.0 / static_cast<double>(block);
  Tensor out = Tensor::zeros({u, d}, x.requires_grad());
  auto y = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < u; ++i)
    for (std::size_t r = 0; r < block; ++r)
      for (std::size_t j = 0; j < d; ++j) y[i * d + j] += xd[(i * block + r) * d + j] * inv;
  if (out.requires_grad()) {
    tape.record(out, [x, u, d, block, inv](std::span<const double> g) mutable {
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < u; ++i)
        for (std::size_t r = 0; r < block; ++r)
          for (std::size_t j = 0; j < d; ++j) gx[(i * block + r) * d + j] += g[i * d + j] * inv;
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::from({1}, {acc}, x.requires_grad());
  if (out.requires_grad()) {
    tape.record(out, [x](std::span<const double> g) mutable {
      for (auto& v : x.grad_mut()) v += g[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

/// Attention probabilities captured from one call, laid out
/// [sample][head][query row][key column].
struct AttentionMap {
  std::size_t samples = 0, heads = 0, rows = 0, cols = 0;
  std::vector<double> probs;

  double at(std::size_t s, std::size_t h, std::size_t i, std::size_t j) const {
    return probs[((s * heads + h) * rows + i) * cols + j];
  }
};

/// Multi-head scaled dot-product attention over row blocks, with optional
/// key/value prefix rows shared by every block.
///
/// q, k, v are [(B·M)×D], one block of M rows per sample. For block b the
/// keys are [k_b; k_prefix] and the values [v_b; v_prefix]; queries never
/// see the prefix, so the output keeps B·M rows. Key columns are ordered
/// data rows first, prefix rows after.
inline Tensor multi_head_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                                   const Tensor& k_prefix, const Tensor& v_prefix, std::size_t block_rows,
                                   std::size_t heads, AttentionMap* capture = nullptr) {
  detail::require_matrix(q, "attention", "queries");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: q/k/v shapes differ " + to_string(q.shape()) + " " + to_string(k.shape()) +
                         " " + to_string(v.shape()));
  }
  const std::size_t total = q.dim(0), d = q.dim(1);
  if (block_rows == 0 || total % block_rows != 0) {
    throw DimensionError("attention: " + std::to_string(total) + " rows are not whole blocks of " +
                         std::to_string(block_rows));
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  const bool has_prefix = k_prefix.defined() && k_prefix.dim(0) > 0;
  const std::size_t lp = has_prefix ? k_prefix.dim(0) : 0;
  if (has_prefix) {
    if (!v_prefix.defined() || v_prefix.shape() != k_prefix.shape() || k_prefix.dim(1) != d) {
      throw DimensionError("attention: prefix shapes " + to_string(k_prefix.shape()) + "/" +
                           (v_prefix.defined() ? to_string(v_prefix.shape()) : std::string("undefined")) +
                           " do not fit width " + std::to_string(d));
    }
  }
  const std::size_t bsz = total / block_rows, m = block_rows, dh = d / heads, cols = m + lp;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  const double* kpd = has_prefix ? k_prefix.data().data() : nullptr;
  const double* vpd = has_prefix ? v_prefix.data().data() : nullptr;

  auto key_row = [&](std::size_t b, std::size_t j) {
    return j < m ? kd + (b * m + j) * d : kpd + (j - m) * d;
  };
  auto value_row = [&](std::size_t b, std::size_t j) {
    return j < m ? vd + (b * m + j) * d : vpd + (j - m) * d;
  };

  const bool grad =
      detail::any_needs_grad(q, k, v) || (has_prefix && detail::any_needs_grad(k_prefix, v_prefix));
  Tensor out = Tensor::zeros({total, d}, grad);
  double* od = out.data().data();
  std::vector<double> probs(bsz * heads * m * cols);

  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < m; ++i) {
        const double* qi = qd + (b * m + i) * d + off;
        double* pi = probs.data() + ((b * heads + h) * m + i) * cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < cols; ++j) {
          const double* kj = key_row(b, j) + off;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          pi[j] = s * sc;
          mx = std::max(mx, pi[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          sum += pi[j];
        }
        for (std::size_t j = 0; j < cols; ++j) pi[j] /= sum;
        double* oi = od + (b * m + i) * d + off;
        for (std::size_t j = 0; j < cols; ++j) {
          const double* vj = value_row(b, j) + off;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += pi[j] * vj[t];
        }
      }
    }
  }
  if (capture) *capture = AttentionMap{bsz, heads, m, cols, probs};

  if (grad) {
    tape.record(out, [q, k, v, k_prefix, v_prefix, has_prefix, bsz, heads, m, lp, d, dh, cols, sc,
                      probs = std::move(probs)](std::span<const double> g) mutable {
      const bool gq = q.requires_grad(), gk = k.requires_grad(), gv = v.requires_grad();
      const bool gkp = has_prefix && k_prefix.requires_grad();
      const bool gvp = has_prefix && v_prefix.requires_grad();
      const double* qd = q.data().data();
      const double* kd = k.data().data();
      const double* vd = v.data().data();
      const double* kpd = has_prefix ? k_prefix.data().data() : nullptr;
      const double* vpd = has_prefix ? v_prefix.data().data() : nullptr;
      double* dq = gq ? q.grad_mut().data() : nullptr;
      double* dk = gk ? k.grad_mut().data() : nullptr;
      double* dv = gv ? v.grad_mut().data() : nullptr;
      double* dkp = gkp ? k_prefix.grad_mut().data() : nullptr;
      double* dvp = gvp ? v_prefix.grad_mut().data() : nullptr;
      std::vector<double> dp(cols);
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < m; ++i) {
            const double* gi = g.data() + (b * m + i) * d + off;
            const double* pi = probs.data() + ((b * heads + h) * m + i) * cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
              const double* vj = j < m ? vd + (b * m + j) * d + off : vpd + (j - m) * d + off;
              double s = 0.0;
              for (std::size_t t = 0; t < dh; ++t) s += gi[t] * vj[t];
              dp[j] = s;
              dot += s * pi[j];
              double* dvj = j < m ? (dv ? dv + (b * m + j) * d + off : nullptr)
                                  : (dvp ? dvp + (j - m) * d + off : nullptr);
              if (dvj)
                for (std::size_t t = 0; t < dh; ++t) dvj[t] += pi[j] * gi[t];
            }
            const double* qi = qd + (b * m + i) * d + off;
            double* dqi = dq ? dq + (b * m + i) * d + off : nullptr;
            for (std::size_t j = 0; j < cols; ++j) {
              const double ds = pi[j] * (dp[j] - dot) * sc;
              if (ds == 0.0) continue;
              const double* kj = j < m ? kd + (b * m + j) * d + off : kpd + (j - m) * d + off;
              if (dqi)
                for (std::size_t t = 0; t < dh; ++t) dqi[t] += ds * kj[t];
              double* dkj = j < m ? (dk ? dk + (b * m + j) * d + off : nullptr)
                                  : (dkp ? dkp + (j - m) * d + off : nullptr);
              if (dkj)
                for (std::size_t t = 0; t < dh; ++t) dkj[t] += ds * qi[t];
            }
          }
        }
      }
      (void)lp;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over rows of −Σ_j target[i][j]·log softmax(logits[i])[j].
inline Tensor soft_cross_entropy(Tape& tape, const Tensor& logits, const Tensor& targets) {
  detail::require_matrix(logits, "soft_cross_entropy", "logits");
  if (targets.shape() != logits.shape()) {
    throw DimensionError("soft_cross_entropy: targets " + to_string(targets.shape()) + " vs logits " +
                         to_string(logits.shape()));
  }
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (m == 0) throw DimensionError("soft_cross_entropy: empty batch");
  std::vector<double> sm(m * n);
  double total = 0.0;
  auto z = logits.data();
  auto t = targets.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(z[i * n + j])) throw NumericError("soft_cross_entropy: NaN logit");
      mx = std::max(mx, z[i * n + j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(z[i * n + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) {
      sm[i * n + j] = std::exp(z[i * n + j] - lse);
      if (t[i * n + j] != 0.0) total -= t[i * n + j] * (z[i * n + j] - lse);
    }
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  Tensor out = Tensor::from({1}, {total * inv_m}, logits.requires_grad());
  if (out.requires_grad()) {
    tape.record(out, [logits, targets, sm = std::move(sm), m, n, inv_m](std::span<const double> g) mutable {
      auto gz = logits.grad_mut();
      auto t = targets.data();
      for (std::size_t i = 0; i < m; ++i) {
        double tsum = 0.0;
        for (std::size_t j = 0; j < n; ++j) tsum += t[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          gz[i * n + j] += g[0] * inv_m * (tsum * sm[i * n + j] - t[i * n + j]);
      }
    });
  }
  return out;
}

/// Mean softmax cross-entropy against integer class labels.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  detail::require_matrix(logits, "cross_entropy", "logits");
  if (labels.size() != logits.dim(0)) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         to_string(logits.shape()) + " logits");
  }
  Tensor targets = Tensor::zeros(logits.shape());
  const std::size_t n = logits.dim(1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n) {
      throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(n) + ")");
    }
    targets.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return soft_cross_entropy(tape, logits, targets);
}

/// −1/(2n) Σ_i Σ_u [y log σ(z) + (1−y) log(1−σ(z))] for one-hot targets y.
inline Tensor binary_cross_entropy(Tape& tape, const Tensor& logits, const Tensor& targets) {
  detail::require_matrix(logits, "binary_cross_entropy", "logits");
  if (targets.shape() != logits.shape()) {
    throw DimensionError("binary_cross_entropy: targets " + to_string(targets.shape()) + " vs logits " +
                         to_string(logits.shape()));
  }
  const std::size_t m = logits.dim(0);
  if (m == 0) throw DimensionError("binary_cross_entropy: empty batch");
  const double norm = 1.0 / (2.0 * static_cast<double>(m));
  auto z = logits.data();
  auto y = targets.data();
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (std::isnan(z[i])) throw NumericError("binary_cross_entropy: NaN logit");
    // log σ(z) = −softplus(−z), log(1 − σ(z)) = −softplus(z)
    total += y[i] * detail::softplus(-z[i]) + (1.0 - y[i]) * detail::softplus(z[i]);
  }
  Tensor out = Tensor::from({1}, {total * norm}, logits.requires_grad());
  if (out.requires_grad()) {
    tape.record(out, [logits, targets, norm](std::span<const double> g) mutable {
      auto gz = logits.grad_mut();
      auto z = logits.data();
      auto y = targets.data();
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-z[i]));
        gz[i] += g[0] * norm * (s - y[i]);
      }
    });
  }
  return out;
}

}  // namespace cpprompt
