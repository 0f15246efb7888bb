// SPDX-License-Identifier: Apache-2.0
#include "amfn/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>

namespace amfn {
namespace {

template <class Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using CMap = Eigen::Map<const Mat<Real>>;
template <class Real>
using MMap = Eigen::Map<Mat<Real>>;

using Index = Eigen::Index;

template <class Real>
CMap<Real> cmap(std::span<const Real> v, std::size_t rows, std::size_t cols) {
  return CMap<Real>(v.data(), static_cast<Index>(rows), static_cast<Index>(cols));
}
template <class Real>
MMap<Real> mmap(std::span<Real> v, std::size_t rows, std::size_t cols) {
  return MMap<Real>(v.data(), static_cast<Index>(rows), static_cast<Index>(cols));
}

std::string two_shapes(const Shape& a, const Shape& b) {
  return shape_str(a) + " and " + shape_str(b);
}

// b's shape must equal a suffix of a's shape; returns b.numel().
std::size_t suffix_numel(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size())
    throw ShapeError(std::string(op) + ": shapes " + two_shapes(a, b) + " are incompatible");
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i])
      throw ShapeError(std::string(op) + ": shape " + shape_str(b) +
                       " is not a trailing suffix of " + shape_str(a));
  }
  return shape_numel(b);
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  AxisSplit sp{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

// Elementwise unary op with backward dx = g * dfn(x, y).
template <class Real, class Fwd, class Dfn>
Tensor<Real> unary_op(const char* name, const Tensor<Real>& x, std::type_identity_t<Tape<Real>*> tape, Fwd fwd,
                      Dfn dfn) {
  const std::size_t n = x.numel();
  std::vector<Real> vals(n);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) vals[i] = fwd(xd[i]);
  Tensor<Real> out = Tensor<Real>::from(x.shape(), std::move(vals));
  if (tape && tape->tracks(x)) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x), oc = out;
    out.node = tape->record(n, [on, xc, oc, dfn](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto dx = tp.grad_slot(xc.node);
      auto xs = xc.data();
      auto ys = oc.data();
      for (std::size_t i = 0; i < xs.size(); ++i) dx[i] += g[i] * dfn(xs[i], ys[i]);
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, name);
  }
  return out;
}

}  // namespace

template <class Real>
void ensure_finite(const Tensor<Real>& t, const char* op) {
  for (Real v : t.data()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b, std::type_identity_t<Tape<Real>*> tape) {
  const std::size_t bn = suffix_numel("add", a.shape(), b.shape());
  const std::size_t n = a.numel();
  std::vector<Real> vals(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) vals[i] = ad[i] + bd[i % bn];
  Tensor<Real> out = Tensor<Real>::from(a.shape(), std::move(vals));
  if (tape && (tape->tracks(a) || tape->tracks(b))) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> ac = tape->claim(a), bc = tape->claim(b);
    out.node = tape->record(n, [on, ac, bc, bn](Tape<Real>& tp) {
      auto g = tp.grad(on);
      if (ac.node >= 0) {
        auto da = tp.grad_slot(ac.node);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (bc.node >= 0) {
        auto db = tp.grad_slot(bc.node);
        for (std::size_t i = 0; i < g.size(); ++i) db[i % bn] += g[i];
      }
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "add");
  }
  return out;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b, std::type_identity_t<Tape<Real>*> tape) {
  const std::size_t bn = suffix_numel("mul", a.shape(), b.shape());
  const std::size_t n = a.numel();
  std::vector<Real> vals(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) vals[i] = ad[i] * bd[i % bn];
  Tensor<Real> out = Tensor<Real>::from(a.shape(), std::move(vals));
  if (tape && (tape->tracks(a) || tape->tracks(b))) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> ac = tape->claim(a), bc = tape->claim(b);
    out.node = tape->record(n, [on, ac, bc, bn](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto ad2 = ac.data();
      auto bd2 = bc.data();
      if (ac.node >= 0) {
        auto da = tp.grad_slot(ac.node);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bd2[i % bn];
      }
      if (bc.node >= 0) {
        auto db = tp.grad_slot(bc.node);
        for (std::size_t i = 0; i < g.size(); ++i) db[i % bn] += g[i] * ad2[i];
      }
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "mul");
  }
  return out;
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, std::type_identity_t<Real> c, std::type_identity_t<Tape<Real>*> tape) {
  return unary_op(
      "scale", a, tape, [c](Real v) { return c * v; }, [c](Real, Real) { return c; });
}

template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x, std::type_identity_t<Tape<Real>*> tape) {
  constexpr double inv_sqrt2 = 0.70710678118654752;
  constexpr double inv_sqrt2pi = 0.39894228040143268;
  return unary_op(
      "gelu", x, tape,
      [](Real v) {
        double xv = static_cast<double>(v);
        return static_cast<Real>(0.5 * xv * (1.0 + std::erf(xv * inv_sqrt2)));
      },
      [](Real v, Real) {
        double xv = static_cast<double>(v);
        double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
        return static_cast<Real>(cdf + xv * pdf);
      });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x, std::type_identity_t<Tape<Real>*> tape) {
  return unary_op(
      "sigmoid", x, tape,
      [](Real v) {
        if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
        Real e = std::exp(v);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Tensor<Real> softplus(const Tensor<Real>& x, std::type_identity_t<Tape<Real>*> tape) {
  return unary_op(
      "softplus", x, tape,
      [](Real v) {
        Real m = v > Real(0) ? v : Real(0);
        return m + std::log1p(std::exp(-std::abs(v)));
      },
      [](Real v, Real) {
        if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
        Real e = std::exp(v);
        return e / (Real(1) + e);
      });
}

template <class Real>
Tensor<Real> pow_const(const Tensor<Real>& x, std::type_identity_t<Real> exponent, std::type_identity_t<Tape<Real>*> tape) {
  if (exponent == Real(0)) {
    Tensor<Real> out = Tensor<Real>::full(x.shape(), Real(1));
    return out;  // constant in both value and derivative
  }
  return unary_op(
      "pow_const", x, tape, [exponent](Real v) { return std::pow(v, exponent); },
      [exponent](Real v, Real) { return exponent * std::pow(v, exponent - Real(1)); });
}

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b, std::type_identity_t<Tape<Real>*> tape) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + two_shapes(a.shape(), b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<Real> out = Tensor<Real>::zeros({m, n});
  {
    auto& od = out.mutable_data();
    mmap<Real>({od.data(), od.size()}, m, n).noalias() = cmap(a.data(), m, k) * cmap(b.data(), k, n);
  }
  if (tape && (tape->tracks(a) || tape->tracks(b))) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> ac = tape->claim(a), bc = tape->claim(b);
    out.node = tape->record(m * n, [on, ac, bc, m, k, n](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto gm = cmap(std::span<const Real>(g.data(), g.size()), m, n);
      if (ac.node >= 0)
        mmap(tp.grad_slot(ac.node), m, k).noalias() += gm * cmap(bc.data(), k, n).transpose();
      if (bc.node >= 0)
        mmap(tp.grad_slot(bc.node), k, n).noalias() += cmap(ac.data(), m, k).transpose() * gm;
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "matmul");
  }
  return out;
}

template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b,
                    std::type_identity_t<Tape<Real>*> tape) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0))
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  const std::size_t din = w.dim(0), dout = w.dim(1);
  if (b.rank() != 1 || b.dim(0) != dout)
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  const std::size_t rows = x.numel() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<Real> out = Tensor<Real>::zeros(out_shape);
  {
    auto& od = out.mutable_data();
    auto om = mmap<Real>({od.data(), od.size()}, rows, dout);
    om.noalias() = cmap(x.data(), rows, din) * cmap(w.data(), din, dout);
    om.rowwise() += cmap(b.data(), 1, dout).row(0);
  }
  if (tape && (tape->tracks(x) || tape->tracks(w) || tape->tracks(b))) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x), wc = tape->claim(w), bc = tape->claim(b);
    out.node = tape->record(out.numel(), [on, xc, wc, bc, rows, din, dout](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto gm = cmap(std::span<const Real>(g.data(), g.size()), rows, dout);
      if (xc.node >= 0)
        mmap(tp.grad_slot(xc.node), rows, din).noalias() +=
            gm * cmap(wc.data(), din, dout).transpose();
      if (wc.node >= 0)
        mmap(tp.grad_slot(wc.node), din, dout).noalias() +=
            cmap(xc.data(), rows, din).transpose() * gm;
      if (bc.node >= 0) mmap(tp.grad_slot(bc.node), 1, dout) += gm.colwise().sum();
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "linear");
  }
  return out;
}

template <class Real>
Tensor<Real> bmm(const Tensor<Real>& a, const Tensor<Real>& b, bool trans_b, std::type_identity_t<Tape<Real>*> tape) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw ShapeError("bmm: incompatible shapes " + two_shapes(a.shape(), b.shape()));
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t kb = trans_b ? b.dim(2) : b.dim(1);
  const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
  if (kb != k)
    throw ShapeError("bmm: incompatible shapes " + two_shapes(a.shape(), b.shape()) +
                     (trans_b ? " (trans_b)" : ""));
  Tensor<Real> out = Tensor<Real>::zeros({bs, m, n});
  {
    auto& od = out.mutable_data();
    for (std::size_t i = 0; i < bs; ++i) {
      auto am = cmap(a.data().subspan(i * m * k, m * k), m, k);
      auto om = mmap<Real>({od.data() + i * m * n, m * n}, m, n);
      if (trans_b)
        om.noalias() = am * cmap(b.data().subspan(i * n * k, n * k), n, k).transpose();
      else
        om.noalias() = am * cmap(b.data().subspan(i * k * n, k * n), k, n);
    }
  }
  if (tape && (tape->tracks(a) || tape->tracks(b))) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> ac = tape->claim(a), bc = tape->claim(b);
    out.node = tape->record(out.numel(), [on, ac, bc, trans_b, bs, m, k, n](Tape<Real>& tp) {
      auto g = tp.grad(on);
      for (std::size_t i = 0; i < bs; ++i) {
        auto gm = cmap(std::span<const Real>(g.data() + i * m * n, m * n), m, n);
        if (ac.node >= 0) {
          auto da = mmap<Real>(tp.grad_slot(ac.node).subspan(i * m * k, m * k), m, k);
          if (trans_b)
            da.noalias() += gm * cmap(bc.data().subspan(i * n * k, n * k), n, k);
          else
            da.noalias() += gm * cmap(bc.data().subspan(i * k * n, k * n), k, n).transpose();
        }
        if (bc.node >= 0) {
          auto am = cmap(ac.data().subspan(i * m * k, m * k), m, k);
          if (trans_b) {
            auto db = mmap<Real>(tp.grad_slot(bc.node).subspan(i * n * k, n * k), n, k);
            db.noalias() += gm.transpose() * am;
          } else {
            auto db = mmap<Real>(tp.grad_slot(bc.node).subspan(i * k * n, k * n), k, n);
            db.noalias() += am.transpose() * gm;
          }
        }
      }
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "bmm");
  }
  return out;
}

template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis, std::type_identity_t<Tape<Real>*> tape) {
  const AxisSplit sp = split_axis("softmax", x.shape(), axis);
  const std::size_t n = x.numel();
  std::vector<Real> vals(n);
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      Real mx = xd[base];
      for (std::size_t e = 1; e < sp.extent; ++e)
        mx = std::max(mx, xd[base + e * sp.inner]);
      Real sum = Real(0);
      for (std::size_t e = 0; e < sp.extent; ++e) {
        Real v = std::exp(xd[base + e * sp.inner] - mx);
        vals[base + e * sp.inner] = v;
        sum += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) vals[base + e * sp.inner] /= sum;
    }
  }
  Tensor<Real> out = Tensor<Real>::from(x.shape(), std::move(vals));
  if (tape && tape->tracks(x)) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x), oc = out;
    out.node = tape->record(n, [on, xc, oc, sp](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto dx = tp.grad_slot(xc.node);
      auto y = oc.data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = o * sp.extent * sp.inner + i;
          Real dot = Real(0);
          for (std::size_t e = 0; e < sp.extent; ++e) {
            const std::size_t idx = base + e * sp.inner;
            dot += g[idx] * y[idx];
          }
          for (std::size_t e = 0; e < sp.extent; ++e) {
            const std::size_t idx = base + e * sp.inner;
            dx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "softmax");
  }
  return out;
}

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        std::type_identity_t<Real> eps, std::type_identity_t<Tape<Real>*> tape) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input " + shape_str(x.shape()));
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match input " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  std::vector<Real> vals(x.numel());
  auto xhat = std::make_shared<std::vector<Real>>(x.numel());
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xd.data() + r * d;
    Real mean = Real(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= Real(d);
    Real var = Real(0);
    for (std::size_t j = 0; j < d; ++j) {
      Real c = row[j] - mean;
      var += c * c;
    }
    var /= Real(d);
    Real inv = Real(1) / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      Real h = (row[j] - mean) * inv;
      (*xhat)[r * d + j] = h;
      vals[r * d + j] = h * gd[j] + bd[j];
    }
  }
  Tensor<Real> out = Tensor<Real>::from(x.shape(), std::move(vals));
  if (tape && (tape->tracks(x) || tape->tracks(gain) || tape->tracks(bias))) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x), gc = tape->claim(gain), bc = tape->claim(bias);
    out.node =
        tape->record(out.numel(), [on, xc, gc, bc, xhat, inv_std, rows, d](Tape<Real>& tp) {
          auto g = tp.grad(on);
          auto gaind = gc.data();
          for (std::size_t r = 0; r < rows; ++r) {
            const Real* grow = g.data() + r * d;
            const Real* hrow = xhat->data() + r * d;
            if (xc.node >= 0) {
              Real m1 = Real(0), m2 = Real(0);
              for (std::size_t j = 0; j < d; ++j) {
                Real gy = grow[j] * gaind[j];
                m1 += gy;
                m2 += gy * hrow[j];
              }
              m1 /= Real(d);
              m2 /= Real(d);
              auto dx = tp.grad_slot(xc.node);
              const Real inv = (*inv_std)[r];
              for (std::size_t j = 0; j < d; ++j) {
                Real gy = grow[j] * gaind[j];
                dx[r * d + j] += inv * (gy - m1 - hrow[j] * m2);
              }
            }
            if (gc.node >= 0) {
              auto dg = tp.grad_slot(gc.node);
              for (std::size_t j = 0; j < d; ++j) dg[j] += grow[j] * hrow[j];
            }
            if (bc.node >= 0) {
              auto db = tp.grad_slot(bc.node);
              for (std::size_t j = 0; j < d; ++j) db[j] += grow[j];
            }
          }
        });
    out.tape_serial = tape->serial();
    ensure_finite(out, "layer_norm");
  }
  return out;
}

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& x, std::type_identity_t<Tape<Real>*> tape) {
  Real total = Real(0);
  for (Real v : x.data()) total += v;
  Tensor<Real> out = Tensor<Real>::scalar(total);
  if (tape && tape->tracks(x)) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x);
    out.node = tape->record(1, [on, xc](Tape<Real>& tp) {
      const Real g = tp.grad(on)[0];
      auto dx = tp.grad_slot(xc.node);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "sum_all");
  }
  return out;
}

template <class Real>
Tensor<Real> mean_axis(const Tensor<Real>& x, std::size_t axis, std::type_identity_t<Tape<Real>*> tape) {
  const AxisSplit sp = split_axis("mean_axis", x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<Real> vals(sp.outer * sp.inner, Real(0));
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i)
        vals[o * sp.inner + i] += xd[(o * sp.extent + e) * sp.inner + i];
  const Real inv = Real(1) / Real(sp.extent);
  for (Real& v : vals) v *= inv;
  Tensor<Real> out = Tensor<Real>::from(out_shape, std::move(vals));
  if (tape && tape->tracks(x)) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x);
    out.node = tape->record(out.numel(), [on, xc, sp, inv](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto dx = tp.grad_slot(xc.node);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t e = 0; e < sp.extent; ++e)
          for (std::size_t i = 0; i < sp.inner; ++i)
            dx[(o * sp.extent + e) * sp.inner + i] += g[o * sp.inner + i] * inv;
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "mean_axis");
  }
  return out;
}

template <class Real>
Tensor<Real> masked_mean_axis0(const Tensor<Real>& x, const std::vector<std::uint8_t>& mask,
                               std::type_identity_t<Tape<Real>*> tape) {
  if (x.rank() < 2 || mask.size() != x.dim(0))
    throw ShapeError("masked_mean_axis0: mask of size " + std::to_string(mask.size()) +
                     " does not match input " + shape_str(x.shape()));
  std::size_t count = 0;
  for (auto m : mask) count += (m != 0);
  if (count == 0)
    throw UsageError("masked_mean_axis0: pooling requires at least one valid entry");
  const std::size_t k = x.dim(0);
  const std::size_t rest = x.numel() / k;
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  std::vector<Real> vals(rest, Real(0));
  auto xd = x.data();
  for (std::size_t j = 0; j < k; ++j) {
    if (!mask[j]) continue;
    for (std::size_t r = 0; r < rest; ++r) vals[r] += xd[j * rest + r];
  }
  const Real inv = Real(1) / Real(count);
  for (Real& v : vals) v *= inv;
  Tensor<Real> out = Tensor<Real>::from(out_shape, std::move(vals));
  if (tape && tape->tracks(x)) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x);
    out.node = tape->record(rest, [on, xc, mask, inv, k, rest](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto dx = tp.grad_slot(xc.node);
      for (std::size_t j = 0; j < k; ++j) {
        if (!mask[j]) continue;
        for (std::size_t r = 0; r < rest; ++r) dx[j * rest + r] += g[r] * inv;
      }
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "masked_mean_axis0");
  }
  return out;
}

template <class Real>
Tensor<Real> scale_axis0(const Tensor<Real>& x, const std::vector<Real>& w, std::type_identity_t<Tape<Real>*> tape) {
  if (x.rank() < 1 || w.size() != x.dim(0))
    throw ShapeError("scale_axis0: weight count " + std::to_string(w.size()) +
                     " does not match input " + shape_str(x.shape()));
  const std::size_t k = x.dim(0);
  const std::size_t rest = x.numel() / k;
  std::vector<Real> vals(x.numel());
  auto xd = x.data();
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t r = 0; r < rest; ++r) vals[j * rest + r] = xd[j * rest + r] * w[j];
  Tensor<Real> out = Tensor<Real>::from(x.shape(), std::move(vals));
  if (tape && tape->tracks(x)) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x);
    out.node = tape->record(x.numel(), [on, xc, w, k, rest](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto dx = tp.grad_slot(xc.node);
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t r = 0; r < rest; ++r) dx[j * rest + r] += g[j * rest + r] * w[j];
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "scale_axis0");
  }
  return out;
}

template <class Real>
Tensor<Real> mul_time_broadcast(const Tensor<Real>& a, const Tensor<Real>& w, std::type_identity_t<Tape<Real>*> tape) {
  if (a.rank() != 3 || w.rank() != 2 || a.dim(0) != w.dim(0) || a.dim(2) != w.dim(1))
    throw ShapeError("mul_time_broadcast: incompatible shapes " +
                     two_shapes(a.shape(), w.shape()));
  const std::size_t k = a.dim(0), t = a.dim(1), d = a.dim(2);
  std::vector<Real> vals(a.numel());
  auto ad = a.data();
  auto wd = w.data();
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t c = 0; c < d; ++c)
        vals[(j * t + s) * d + c] = ad[(j * t + s) * d + c] * wd[j * d + c];
  Tensor<Real> out = Tensor<Real>::from(a.shape(), std::move(vals));
  if (tape && (tape->tracks(a) || tape->tracks(w))) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> ac = tape->claim(a), wc = tape->claim(w);
    out.node = tape->record(a.numel(), [on, ac, wc, k, t, d](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto ad2 = ac.data();
      auto wd2 = wc.data();
      if (ac.node >= 0) {
        auto da = tp.grad_slot(ac.node);
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t s = 0; s < t; ++s)
            for (std::size_t c = 0; c < d; ++c)
              da[(j * t + s) * d + c] += g[(j * t + s) * d + c] * wd2[j * d + c];
      }
      if (wc.node >= 0) {
        auto dw = tp.grad_slot(wc.node);
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t s = 0; s < t; ++s)
            for (std::size_t c = 0; c < d; ++c)
              dw[j * d + c] += g[(j * t + s) * d + c] * ad2[(j * t + s) * d + c];
      }
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "mul_time_broadcast");
  }
  return out;
}

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis, std::type_identity_t<Tape<Real>*> tape) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size() || axis >= p.rank())
      throw ShapeError("concat: rank mismatch at axis " + std::to_string(axis) + " between " +
                       two_shapes(first, p.shape()));
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != axis && p.dim(i) != first[i])
        throw ShapeError("concat: incompatible shapes " + two_shapes(first, p.shape()));
    total += p.dim(axis);
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  const AxisSplit sp = split_axis("concat", out_shape, axis);
  std::vector<Real> vals(shape_numel(out_shape));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t block = p.dim(axis) * sp.inner;
      std::memcpy(vals.data() + (o * sp.extent + off) * sp.inner,
                  p.data().data() + o * block, block * sizeof(Real));
      off += p.dim(axis);
    }
  }
  Tensor<Real> out = Tensor<Real>::from(out_shape, std::move(vals));
  bool tracked = false;
  if (tape)
    for (const auto& p : parts) tracked = tracked || tape->tracks(p);
  if (tape && tracked) {
    const int on = static_cast<int>(tape->size());
    std::vector<Tensor<Real>> pc;
    for (const auto& p : parts) pc.push_back(tape->claim(p));
    out.node = tape->record(out.numel(), [on, pc, sp, axis](Tape<Real>& tp) {
      auto g = tp.grad(on);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        std::size_t off = 0;
        for (const auto& p : pc) {
          const std::size_t block = p.dim(axis) * sp.inner;
          if (p.node >= 0) {
            auto dp = tp.grad_slot(p.node);
            const Real* src = g.data() + (o * sp.extent + off) * sp.inner;
            for (std::size_t i = 0; i < block; ++i) dp[o * block + i] += src[i];
          }
          off += p.dim(axis);
        }
      }
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "concat");
  }
  return out;
}

template <class Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t axis, std::size_t start, std::size_t len,
                   std::type_identity_t<Tape<Real>*> tape) {
  const AxisSplit sp = split_axis("slice", x.shape(), axis);
  if (len == 0 || start + len > sp.extent)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of bounds for axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::vector<Real> vals(sp.outer * len * sp.inner);
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::memcpy(vals.data() + o * len * sp.inner,
                xd.data() + (o * sp.extent + start) * sp.inner, len * sp.inner * sizeof(Real));
  Tensor<Real> out = Tensor<Real>::from(out_shape, std::move(vals));
  if (tape && tape->tracks(x)) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x);
    out.node = tape->record(out.numel(), [on, xc, sp, start, len](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto dx = tp.grad_slot(xc.node);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        Real* dst = dx.data() + (o * sp.extent + start) * sp.inner;
        const Real* src = g.data() + o * len * sp.inner;
        for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
      }
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "slice");
  }
  return out;
}

namespace {

// Walks dst indices in order, yielding the matching src linear index when the
// dst axes are src axes rearranged by perm.
template <class Fn>
void permute_walk(const Shape& src_shape, const std::vector<std::size_t>& perm, Fn&& fn) {
  const std::size_t r = src_shape.size();
  std::vector<std::size_t> src_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) src_strides[i - 1] = src_strides[i] * src_shape[i];
  std::vector<std::size_t> out_dims(r), out_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_dims[i] = src_shape[perm[i]];
    out_strides[i] = src_strides[perm[i]];
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  const std::size_t n = shape_numel(src_shape);
  for (std::size_t dst = 0; dst < n; ++dst) {
    fn(dst, src);
    for (std::size_t i = r; i-- > 0;) {
      ++idx[i];
      src += out_strides[i];
      if (idx[i] < out_dims[i]) break;
      src -= out_strides[i] * out_dims[i];
      idx[i] = 0;
    }
  }
}

}  // namespace

template <class Real>
Tensor<Real> permute(const Tensor<Real>& x, const std::vector<std::size_t>& perm,
                     std::type_identity_t<Tape<Real>*> tape) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  if (perm.size() != r)
    throw ShapeError("permute: permutation of size " + std::to_string(perm.size()) +
                     " does not match rank of " + shape_str(x.shape()));
  for (std::size_t p : perm) {
    if (p >= r || seen[p])
      throw ShapeError("permute: invalid permutation for " + shape_str(x.shape()));
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<Real> vals(x.numel());
  auto xd = x.data();
  permute_walk(x.shape(), perm, [&](std::size_t dst, std::size_t src) { vals[dst] = xd[src]; });
  Tensor<Real> out = Tensor<Real>::from(out_shape, std::move(vals));
  if (tape && tape->tracks(x)) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x);
    std::vector<std::size_t> pc = perm;
    out.node = tape->record(out.numel(), [on, xc, pc](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto dx = tp.grad_slot(xc.node);
      permute_walk(xc.shape(), pc,
                   [&](std::size_t dst, std::size_t src) { dx[src] += g[dst]; });
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "permute");
  }
  return out;
}

template <class Real>
Tensor<Real> resize_time(const Tensor<Real>& x, std::size_t t_out, std::type_identity_t<Tape<Real>*> tape) {
  if (x.rank() != 3)
    throw ShapeError("resize_time: expected rank-3 input, got " + shape_str(x.shape()));
  if (t_out == 0) throw ShapeError("resize_time: target length must be positive");
  const std::size_t k = x.dim(0), t_in = x.dim(1), d = x.dim(2);
  if (t_out == t_in) return x;
  std::vector<Real> vals(k * t_out * d);
  auto xd = x.data();
  if (t_out > t_in) {
    // Nearest-index repetition.
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i < t_out; ++i) {
        const std::size_t src = i * t_in / t_out;
        std::memcpy(vals.data() + (j * t_out + i) * d, xd.data() + (j * t_in + src) * d,
                    d * sizeof(Real));
      }
  } else {
    // Window means, accumulated relative to the window's first element so a
    // constant window reproduces its value bit-exactly.
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i < t_out; ++i) {
        const std::size_t j0 = i * t_in / t_out;
        const std::size_t j1 = (i + 1) * t_in / t_out;
        const Real w = Real(j1 - j0);
        for (std::size_t c = 0; c < d; ++c) {
          const Real base = xd[(j * t_in + j0) * d + c];
          Real acc = Real(0);
          for (std::size_t s = j0 + 1; s < j1; ++s) acc += xd[(j * t_in + s) * d + c] - base;
          vals[(j * t_out + i) * d + c] = base + acc / w;
        }
      }
  }
  Tensor<Real> out = Tensor<Real>::from({k, t_out, d}, std::move(vals));
  if (tape && tape->tracks(x)) {
    const int on = static_cast<int>(tape->size());
    Tensor<Real> xc = tape->claim(x);
    out.node = tape->record(out.numel(), [on, xc, k, t_in, t_out, d](Tape<Real>& tp) {
      auto g = tp.grad(on);
      auto dx = tp.grad_slot(xc.node);
      if (t_out > t_in) {
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t i = 0; i < t_out; ++i) {
            const std::size_t src = i * t_in / t_out;
            for (std::size_t c = 0; c < d; ++c)
              dx[(j * t_in + src) * d + c] += g[(j * t_out + i) * d + c];
          }
      } else {
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t i = 0; i < t_out; ++i) {
            const std::size_t j0 = i * t_in / t_out;
            const std::size_t j1 = (i + 1) * t_in / t_out;
            const Real inv = Real(1) / Real(j1 - j0);
            for (std::size_t s = j0; s < j1; ++s)
              for (std::size_t c = 0; c < d; ++c)
                dx[(j * t_in + s) * d + c] += g[(j * t_out + i) * d + c] * inv;
          }
      }
    });
    out.tape_serial = tape->serial();
    ensure_finite(out, "resize_time");
  }
  return out;
}

template <class Real>
Tensor<Real> attention_key_bias(const std::vector<std::uint8_t>& visible) {
  std::size_t count = 0;
  for (auto v : visible) count += (v != 0);
  if (count == 0)
    throw UsageError("attention_key_bias: at least one key must be visible");
  std::vector<Real> vals(visible.size());
  for (std::size_t i = 0; i < visible.size(); ++i)
    vals[i] = visible[i] ? Real(0) : Real(-1e9);
  return Tensor<Real>::from({visible.size()}, std::move(vals));
}

template <class Real>
Tensor<Real> multi_head_self_attention(
    const Tensor<Real>& x, const Tensor<Real>& w_qkv, const Tensor<Real>& b_qkv,
    const Tensor<Real>& w_out, const Tensor<Real>& b_out, std::size_t heads,
    const std::type_identity_t<std::optional<Tensor<Real>>>& key_bias, std::type_identity_t<Tape<Real>*> tape,
    Tensor<Real>* attn_out) {
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2)
    throw ShapeError("multi_head_self_attention: expected rank 2 or 3 input, got " +
                     shape_str(x.shape()));
  const std::size_t bsz = batched ? x.dim(0) : 1;
  const std::size_t m = batched ? x.dim(1) : x.dim(0);
  const std::size_t dm = batched ? x.dim(2) : x.dim(1);
  if (heads == 0 || dm % heads != 0)
    throw ShapeError("multi_head_self_attention: model dim " + std::to_string(dm) +
                     " is not divisible by " + std::to_string(heads) + " heads");
  if (w_qkv.rank() != 2 || w_qkv.dim(0) != dm || w_qkv.dim(1) != 3 * dm)
    throw ShapeError("multi_head_self_attention: packed qkv weight " +
                     shape_str(w_qkv.shape()) + " does not match input " + shape_str(x.shape()));
  if (w_out.rank() != 2 || w_out.dim(0) != dm || w_out.dim(1) != dm)
    throw ShapeError("multi_head_self_attention: output weight " + shape_str(w_out.shape()) +
                     " does not match input " + shape_str(x.shape()));
  if (key_bias && (key_bias->rank() != 1 || key_bias->dim(0) != m))
    throw ShapeError("multi_head_self_attention: key bias " + shape_str(key_bias->shape()) +
                     " does not match " + std::to_string(m) + " tokens");
  const std::size_t dh = dm / heads;

  Tensor<Real> xb = batched ? x : x.reshaped({1, m, dm});
  Tensor<Real> qkv = linear(xb, w_qkv, b_qkv, tape);  // (B,M,3D)
  auto head_split = [&](Tensor<Real> part) {
    part = part.reshaped({bsz, m, heads, dh});
    part = permute(part, {0, 2, 1, 3}, tape);
    return part.reshaped({bsz * heads, m, dh});
  };
  Tensor<Real> q = head_split(slice(qkv, 2, 0, dm, tape));
  Tensor<Real> k = head_split(slice(qkv, 2, dm, dm, tape));
  Tensor<Real> v = head_split(slice(qkv, 2, 2 * dm, dm, tape));

  Tensor<Real> scores = bmm(q, k, /*trans_b=*/true, tape);  // (B*H,M,M)
  scores = scale(scores, Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh))), tape);
  if (key_bias) scores = add(scores, *key_bias, tape);
  Tensor<Real> attn = softmax(scores, 2, tape);
  if (attn_out) {
    Tensor<Real> probs = attn.reshaped({bsz, heads, m, m});
    probs.node = -1;
    *attn_out = probs;
  }
  Tensor<Real> ctx = bmm(attn, v, /*trans_b=*/false, tape);  // (B*H,M,dh)
  ctx = permute(ctx.reshaped({bsz, heads, m, dh}), {0, 2, 1, 3}, tape).reshaped({bsz, m, dm});
  Tensor<Real> out = linear(ctx, w_out, b_out, tape);
  return batched ? out : out.reshaped({m, dm});
}

template <class Real>
Tensor<Real> sinusoidal_pe(std::size_t length, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0)
    throw ShapeError("sinusoidal_pe: dimension must be even, got " + std::to_string(dim));
  std::vector<Real> vals(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    const std::vector<double> row = sinusoid_features(static_cast<double>(pos), dim);
    for (std::size_t j = 0; j < dim; ++j) vals[pos * dim + j] = static_cast<Real>(row[j]);
  }
  return Tensor<Real>::from({length, dim}, std::move(vals));
}

template <class Real>
Tensor<Real> sinusoidal_pe_2d(std::size_t rows, std::size_t cols, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0)
    throw ShapeError("sinusoidal_pe_2d: dimension must be a multiple of 4, got " +
                     std::to_string(dim));
  const std::size_t half = dim / 2;
  std::vector<Real> vals(rows * cols * dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::vector<double> row_enc = sinusoid_features(static_cast<double>(r), half);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::vector<double> col_enc = sinusoid_features(static_cast<double>(c), half);
      Real* cell = vals.data() + (r * cols + c) * dim;
      for (std::size_t j = 0; j < half; ++j) {
        cell[j] = static_cast<Real>(col_enc[j]);
        cell[half + j] = static_cast<Real>(row_enc[j]);
      }
    }
  }
  return Tensor<Real>::from({rows * cols, dim}, std::move(vals));
}

std::vector<double> sinusoid_features(double pos, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0)
    throw ShapeError("sinusoid_features: dimension must be even, got " + std::to_string(dim));
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double freq =
        std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out[2 * i] = std::sin(pos * freq);
    out[2 * i + 1] = std::cos(pos * freq);
  }
  return out;
}

#define AMFN_INSTANTIATE_OPS(Real)                                                              \
  template void ensure_finite<Real>(const Tensor<Real>&, const char*);                          \
  template Tensor<Real> add<Real>(const Tensor<Real>&, const Tensor<Real>&, Tape<Real>*);       \
  template Tensor<Real> mul<Real>(const Tensor<Real>&, const Tensor<Real>&, Tape<Real>*);       \
  template Tensor<Real> scale<Real>(const Tensor<Real>&, Real, Tape<Real>*);                    \
  template Tensor<Real> gelu<Real>(const Tensor<Real>&, Tape<Real>*);                           \
  template Tensor<Real> sigmoid<Real>(const Tensor<Real>&, Tape<Real>*);                        \
  template Tensor<Real> softplus<Real>(const Tensor<Real>&, Tape<Real>*);                       \
  template Tensor<Real> pow_const<Real>(const Tensor<Real>&, Real, Tape<Real>*);                \
  template Tensor<Real> matmul<Real>(const Tensor<Real>&, const Tensor<Real>&, Tape<Real>*);    \
  template Tensor<Real> linear<Real>(const Tensor<Real>&, const Tensor<Real>&,                  \
                                     const Tensor<Real>&, Tape<Real>*);                         \
  template Tensor<Real> bmm<Real>(const Tensor<Real>&, const Tensor<Real>&, bool,               \
                                  Tape<Real>*);                                                 \
  template Tensor<Real> softmax<Real>(const Tensor<Real>&, std::size_t, Tape<Real>*);           \
  template Tensor<Real> layer_norm<Real>(const Tensor<Real>&, const Tensor<Real>&,              \
                                         const Tensor<Real>&, Real, Tape<Real>*);               \
  template Tensor<Real> sum_all<Real>(const Tensor<Real>&, Tape<Real>*);                        \
  template Tensor<Real> mean_axis<Real>(const Tensor<Real>&, std::size_t, Tape<Real>*);         \
  template Tensor<Real> masked_mean_axis0<Real>(const Tensor<Real>&,                            \
                                                const std::vector<std::uint8_t>&, Tape<Real>*); \
  template Tensor<Real> scale_axis0<Real>(const Tensor<Real>&, const std::vector<Real>&,        \
                                          Tape<Real>*);                                         \
  template Tensor<Real> mul_time_broadcast<Real>(const Tensor<Real>&, const Tensor<Real>&,      \
                                                 Tape<Real>*);                                  \
  template Tensor<Real> concat<Real>(const std::vector<Tensor<Real>>&, std::size_t,             \
                                     Tape<Real>*);                                              \
  template Tensor<Real> slice<Real>(const Tensor<Real>&, std::size_t, std::size_t, std::size_t, \
                                    Tape<Real>*);                                               \
  template Tensor<Real> permute<Real>(const Tensor<Real>&, const std::vector<std::size_t>&,     \
                                      Tape<Real>*);                                             \
  template Tensor<Real> resize_time<Real>(const Tensor<Real>&, std::size_t, Tape<Real>*);       \
  template Tensor<Real> attention_key_bias<Real>(const std::vector<std::uint8_t>&);             \
  template Tensor<Real> multi_head_self_attention<Real>(                                        \
      const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&,       \
      const Tensor<Real>&, std::size_t,                                                         \
      const std::type_identity_t<std::optional<Tensor<Real>>>&, Tape<Real>*, Tensor<Real>*);    \
  template Tensor<Real> sinusoidal_pe<Real>(std::size_t, std::size_t);                          \
  template Tensor<Real> sinusoidal_pe_2d<Real>(std::size_t, std::size_t, std::size_t);

AMFN_INSTANTIATE_OPS(float)
AMFN_INSTANTIATE_OPS(double)

#undef AMFN_INSTANTIATE_OPS

}  // namespace amfn
