#pragma once

// Differentiable operations recorded on a Tape. Every op validates shapes and
// throws DimensionError on mismatch; there is no implicit broadcasting except
// the bias row in add_bias/linear.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "cmdret/numerics/tape.hpp"
#include "cmdret/numerics/tensor.hpp"

namespace cmdret::ops {

/// Layer-norm epsilon used by every LN in the model.
inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

inline Tape& tape_of(Var a) { return *a.tape; }

inline Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
  return *a.tape;
}

// C[m×n] (+)= A[m×k] · B[k×n]
inline void gemm(std::span<const double> a, std::span<const double> b,
                 std::span<double> c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b.data() + p * n;
      double* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

inline Tensor transposed(const Tensor& a) {
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Tape& tape = detail::tape_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return tape.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::tape_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return tape.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, g);
    Tensor ng = g;
    for (double& v : ng.values()) v = -v;
    t.accumulate(b, ng);
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tape.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    Tensor ga = g, gb = g;
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] *= bv[i];
      gb[i] *= av[i];
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= c;
  return a.tape->record(std::move(out), {a}, [a = a.id, c](Tape& t, const Tensor& g, const Tensor&) {
    Tensor ga = g;
    for (double& v : ga.values()) v *= c;
    t.accumulate(a, ga);
  });
}

/// Elementwise product with a constant tensor of the same shape.
inline Var mul_const(Var a, const Tensor& c) {
  require_same_shape(a.value(), c, "mul_const");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return a.tape->record(std::move(out), {a}, [a = a.id, c](Tape& t, const Tensor& g, const Tensor&) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= c[i];
    t.accumulate(a, ga);
  });
}

inline Var add_const(Var a, const Tensor& c) {
  require_same_shape(a.value(), c, "add_const");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return a.tape->record(std::move(out), {a},
                        [a = a.id](Tape& t, const Tensor& g, const Tensor&) { t.accumulate(a, g); });
}

/// Multiplies every element of `a` by the scalar node `s`.
inline Var mul_scalar(Var a, Var s) {
  Tape& tape = detail::tape_of(a, s);
  if (s.value().size() != 1) {
    throw DimensionError("mul_scalar: scalar operand has shape " + shape_str(s.shape()));
  }
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (double& v : out.values()) v *= sv;
  return tape.record(std::move(out), {a, s}, [a = a.id, s = s.id](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = t.value(a);
    const double sv = t.value(s)[0];
    Tensor ga = g;
    double gs = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] *= sv;
      gs += g[i] * av[i];
    }
    t.accumulate(a, ga);
    t.accumulate(s, Tensor(t.value(s).shape(), gs));
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  return a.tape->record(std::move(out), {a}, [a = a.id](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= y[i];
    t.accumulate(a, ga);
  });
}

/// min(a, cap) elementwise; gradient is zero where the cap is active.
inline Var clamp_max(Var a, double cap) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::min(v, cap);
  return a.tape->record(std::move(out), {a}, [a = a.id, cap](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = t.value(a);
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (av[i] > cap) ga[i] = 0.0;
    t.accumulate(a, ga);
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a = a.id](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, Tensor(t.value(a).shape(), g[0]));
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(out), {a}, [a = a.id](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, g.reshaped(t.value(a).shape()));
  });
}

inline Var transpose(Var a) {
  require_rank(a.value(), 2, "transpose");
  Tensor out = detail::transposed(a.value());
  return a.tape->record(std::move(out), {a}, [a = a.id](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, detail::transposed(g));
  });
}

/// a[m×k] · b[k×n]; dA = dC·Bᵀ, dB = Aᵀ·dC.
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  detail::gemm(av.data(), bv.data(), out.data(), m, k, n);
  return tape.record(std::move(out), {a, b}, [a = a.id, b = b.id, m, k, n](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor ga(Shape{m, k});
      detail::gemm(g.data(), detail::transposed(bv).data(), ga.data(), m, n, k);
      t.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor gb(Shape{k, n});
      detail::gemm(detail::transposed(av).data(), g.data(), gb.data(), k, m, n);
      t.accumulate(b, gb);
    }
  });
}

/// x[...×n] + b[n], with b broadcast over all leading positions.
inline Var add_bias(Var x, Var b) {
  Tape& tape = detail::tape_of(x, b);
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 1 || xv.rank() == 0 || xv.cols() != bv.dim(0)) {
    throw DimensionError("add_bias: " + shape_str(xv.shape()) + " and " + shape_str(bv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = bv.dim(0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  return tape.record(std::move(out), {x, b}, [x = x.id, b = b.id, n](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(x, g);
    if (t.requires_grad(b)) {
      Tensor gb(Shape{n});
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
      t.accumulate(b, gb);
    }
  });
}

/// x[...×Din] · W[Din×Dout] + b[Dout].
inline Var linear(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() == 0 || wv.rank() != 2 || xv.cols() != wv.dim(0) || b.value().rank() != 1 ||
      b.value().dim(0) != wv.dim(1)) {
    throw DimensionError("linear: x " + shape_str(xv.shape()) + ", W " + shape_str(wv.shape()) +
                         ", b " + shape_str(b.value().shape()));
  }
  Shape out_shape = xv.shape();
  out_shape.back() = wv.dim(1);
  Var x2 = xv.rank() == 2 ? x : reshape(x, Shape{xv.rows(), xv.cols()});
  Var y = add_bias(matmul(x2, w), b);
  return out_shape.size() == 2 ? y : reshape(y, std::move(out_shape));
}

namespace detail {

inline void check_mask(const Tensor& x, const std::vector<bool>* mask) {
  if (mask == nullptr) return;
  if (mask->size() != x.cols()) {
    throw DimensionError("softmax mask length " + std::to_string(mask->size()) +
                         " vs last extent " + std::to_string(x.cols()));
  }
  bool any = false;
  for (bool m : *mask) any = any || m;
  if (!any) throw DataError("softmax mask has no valid positions");
}

}  // namespace detail

/// Softmax over the last axis. `valid`, when given, marks which columns take
/// part; masked columns receive exactly zero probability.
inline Var softmax_rows(Var x, const std::vector<bool>* valid = nullptr) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("softmax of a scalar");
  detail::check_mask(xv, valid);
  const std::size_t rows = xv.rows(), n = xv.cols();
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j)
      if (!valid || (*valid)[j]) mx = std::max(mx, xv(r, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = (!valid || (*valid)[j]) ? std::exp(xv(r, j) - mx) : 0.0;
      y(r, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) y(r, j) /= z;
  }
  return x.tape->record(std::move(y), {x}, [x = x.id](Tape& t, const Tensor& g, const Tensor& y) {
    const std::size_t rows = y.rows(), n = y.cols();
    Tensor gx(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g(r, j) * y(r, j);
      for (std::size_t j = 0; j < n; ++j) gx(r, j) = y(r, j) * (g(r, j) - s);
    }
    t.accumulate(x, gx);
  });
}

/// log-softmax over the last axis via log-sum-exp.
inline Var log_softmax_rows(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("log_softmax of a scalar");
  const std::size_t rows = xv.rows(), n = xv.cols();
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = xv(r, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv(r, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xv(r, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y(r, j) = xv(r, j) - lse;
  }
  return x.tape->record(std::move(y), {x}, [x = x.id](Tape& t, const Tensor& g, const Tensor& y) {
    const std::size_t rows = y.rows(), n = y.cols();
    Tensor gx(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g(r, j);
      for (std::size_t j = 0; j < n; ++j) gx(r, j) = g(r, j) - std::exp(y(r, j)) * s;
    }
    t.accumulate(x, gx);
  });
}

/// Per-row normalization over the last axis followed by gamma/beta affine.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.rank() == 0 ? 0 : xv.cols();
  if (d == 0 || gamma.value().shape() != Shape{d} || beta.value().shape() != Shape{d}) {
    throw DimensionError("layer_norm: x " + shape_str(xv.shape()) + ", gamma " +
                         shape_str(gamma.value().shape()) + ", beta " +
                         shape_str(beta.value().shape()));
  }
  const std::size_t rows = xv.rows();
  Tensor xhat(xv.shape());
  Tensor inv_std(Shape{rows});
  Tensor y(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv(r, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xv(r, j) - mu) * (xv(r, j) - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat(r, j) = (xv(r, j) - mu) * is;
      y(r, j) = xhat(r, j) * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      std::move(y), {x, gamma, beta},
      [x = x.id, gm = gamma.id, bt = beta.id, xhat = std::move(xhat), inv_std = std::move(inv_std),
       rows, d](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& gv = t.value(gm);
        Tensor gx(xhat.shape());
        Tensor gg(Shape{d});
        Tensor gb(Shape{d});
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dx = 0.0, mean_dx_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g(r, j) * gv[j];
            mean_dx += dxh;
            mean_dx_xhat += dxh * xhat(r, j);
            gg[j] += g(r, j) * xhat(r, j);
            gb[j] += g(r, j);
          }
          mean_dx /= dd;
          mean_dx_xhat /= dd;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g(r, j) * gv[j];
            gx(r, j) = inv_std[r] * (dxh - mean_dx - xhat(r, j) * mean_dx_xhat);
          }
        }
        t.accumulate(x, gx);
        t.accumulate(gm, gg);
        t.accumulate(bt, gb);
      });
}

/// Gaussian error linear unit, exact (erf) form.
inline Var gelu(Var x) {
  Tensor y = x.value();
  for (double& v : y.values()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  return x.tape->record(std::move(y), {x}, [x = x.id](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& xv = t.value(x);
    Tensor gx = g;
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] *= cdf + v * pdf;
    }
    t.accumulate(x, gx);
  });
}

/// Rows scaled to unit Euclidean norm. A row with norm below 1e-12 is a data
/// error.
inline Var l2_normalize_rows(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("l2_normalize of a scalar");
  const std::size_t rows = xv.rows(), n = xv.cols();
  Tensor y(xv.shape());
  Tensor norms(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double nr = l2_norm(xv.row(r));
    if (!(nr >= 1e-12)) throw DataError("cannot normalize a vector with norm " + std::to_string(nr));
    norms[r] = nr;
    for (std::size_t j = 0; j < n; ++j) y(r, j) = xv(r, j) / nr;
  }
  return x.tape->record(std::move(y), {x},
                        [x = x.id, norms = std::move(norms)](Tape& t, const Tensor& g, const Tensor& y) {
                          const std::size_t rows = y.rows(), n = y.cols();
                          Tensor gx(y.shape());
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double yg = dot(y.row(r), g.row(r));
                            for (std::size_t j = 0; j < n; ++j)
                              gx(r, j) = (g(r, j) - y(r, j) * yg) / norms[r];
                          }
                          t.accumulate(x, gx);
                        });
}

/// Concatenates matrices with equal column counts along rows.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of zero parts");
  Tape& tape = *parts[0].tape;
  const std::size_t n = parts[0].value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    detail::tape_of(parts[0], p);
    require_rank(p.value(), 2, "concat_rows");
    if (p.value().cols() != n) {
      throw DimensionError("concat_rows: " + shape_str(parts[0].shape()) + " and " +
                           shape_str(p.shape()));
    }
    rows += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(rows * n);
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, rows)
  for (const Var& p : parts) {
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    spans.emplace_back(p.id, p.value().rows());
  }
  return tape.record(Tensor(Shape{rows, n}, std::move(data)), parts,
                     [spans = std::move(spans), n](Tape& t, const Tensor& g, const Tensor&) {
                       std::size_t offset = 0;
                       for (auto [id, r] : spans) {
                         if (t.requires_grad(id)) {
                           std::vector<double> part(g.data().begin() + static_cast<std::ptrdiff_t>(offset * n),
                                                    g.data().begin() + static_cast<std::ptrdiff_t>((offset + r) * n));
                           t.accumulate(id, Tensor(Shape{r, n}, std::move(part)));
                         }
                         offset += r;
                       }
                     });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank(xv, 2, "slice_rows");
  if (count == 0 || begin + count > xv.dim(0)) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") of " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.dim(1);
  std::vector<double> data(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                           xv.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  return x.tape->record(Tensor(Shape{count, n}, std::move(data)), {x},
                        [x = x.id, begin, n](Tape& t, const Tensor& g, const Tensor&) {
                          Tensor gx(t.value(x).shape());
                          std::copy(g.data().begin(), g.data().end(),
                                    gx.data().begin() + static_cast<std::ptrdiff_t>(begin * n));
                          t.accumulate(x, gx);
                        });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank(xv, 2, "slice_cols");
  if (count == 0 || begin + count > xv.dim(1)) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") of " + shape_str(xv.shape()));
  }
  const std::size_t m = xv.dim(0);
  Tensor out(Shape{m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = xv(i, begin + j);
  return x.tape->record(std::move(out), {x}, [x = x.id, begin, count, m](Tape& t, const Tensor& g, const Tensor&) {
    Tensor gx(t.value(x).shape());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gx(i, begin + j) = g(i, j);
    t.accumulate(x, gx);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of zero parts");
  Tape& tape = *parts[0].tape;
  const std::size_t m = parts[0].value().rows();
  std::size_t cols = 0;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, cols)
  for (const Var& p : parts) {
    detail::tape_of(parts[0], p);
    require_rank(p.value(), 2, "concat_cols");
    if (p.value().dim(0) != m) {
      throw DimensionError("concat_cols: " + shape_str(parts[0].shape()) + " and " +
                           shape_str(p.shape()));
    }
    spans.emplace_back(p.id, p.value().dim(1));
    cols += p.value().dim(1);
  }
  Tensor out(Shape{m, cols});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < pv.dim(1); ++j) out(i, offset + j) = pv(i, j);
    offset += pv.dim(1);
  }
  return tape.record(std::move(out), parts, [spans = std::move(spans), m](Tape& t, const Tensor& g, const Tensor&) {
    std::size_t offset = 0;
    for (auto [id, c] : spans) {
      if (t.requires_grad(id)) {
        Tensor gp(Shape{m, c});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) gp(i, j) = g(i, offset + j);
        t.accumulate(id, gp);
      }
      offset += c;
    }
  });
}

/// Σₗ weights[l] · layers[l] over constant layer tensors of identical shape.
inline Var weighted_sum(Var weights, const std::vector<Tensor>& layers) {
  const Tensor& wv = weights.value();
  if (wv.rank() != 1 || wv.dim(0) != layers.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(layers.size()) +
                         " layers vs weights " + shape_str(wv.shape()));
  }
  Tensor out(layers.at(0).shape());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    require_same_shape(layers[0], layers[l], "weighted_sum");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wv[l] * layers[l][i];
  }
  return weights.tape->record(std::move(out), {weights}, [w = weights.id, layers](Tape& t, const Tensor& g, const Tensor&) {
    Tensor gw(Shape{layers.size()});
    for (std::size_t l = 0; l < layers.size(); ++l) gw[l] = dot(g.data(), layers[l].data());
    t.accumulate(w, gw);
  });
}

}  // namespace cmdret::ops
