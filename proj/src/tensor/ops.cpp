#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tail/tensor.hpp"

namespace tail {

namespace {

using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

Index norm_axis(std::string_view op, Index axis, Index rank) {
  const Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

struct AxisSplit {
  Index outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, Index axis) {
  AxisSplit r;
  for (Index i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, Index axis) {
  Shape r = s;
  r.erase(r.begin() + axis);
  return r;
}

#ifndef NDEBUG
void check_finite(std::string_view op, const Vec& v) {
  if (!v.allFinite()) throw std::runtime_error(std::string(op) + ": non-finite output");
}
#else
inline void check_finite(std::string_view, const Vec&) {}
#endif

// How `small` repeats over `big` for elementwise ops.
enum class Bcast { same, rhs, lhs };

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

Bcast broadcast_mode(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (is_suffix(b.shape(), a.shape())) return Bcast::rhs;
  if (is_suffix(a.shape(), b.shape())) return Bcast::lhs;
  shape_fail(op, "incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
}

// Sum `g` (length n*k) over its n leading blocks into `out` (length k).
void reduce_blocks(const Vec& g, Vec& out) {
  const Index k = out.size();
  const Index n = g.size() / k;
  out += MapC(g.data(), n, k).colwise().sum().transpose();
}

template <class F>
Vec elementwise(const Tensor& a, const Tensor& b, Bcast mode, F f) {
  if (mode == Bcast::same) return f(a.values().array(), b.values().array()).matrix();
  const Tensor& big = mode == Bcast::rhs ? a : b;
  const Tensor& small = mode == Bcast::rhs ? b : a;
  const Index k = small.numel();
  const Index n = big.numel() / k;
  Vec out(big.numel());
  for (Index i = 0; i < n; ++i) {
    auto bs = big.values().segment(i * k, k).array();
    auto ss = small.values().array();
    if (mode == Bcast::rhs) out.segment(i * k, k) = f(bs, ss).matrix();
    else out.segment(i * k, k) = f(ss, bs).matrix();
  }
  return out;
}

template <class F, class DF>
Tensor unary(OpKind kind, const Tensor& a, F f, DF df) {
  Vec out = a.values().unaryExpr(f);
  check_finite(op_name(kind), out);
  auto x = a;  // holds input data alive
  return Tape::record(kind, a.shape(), std::move(out), {&a, 1},
                      [x, df](const Vec& g, std::span<Vec* const> gi) {
                        if (gi[0]) *gi[0] += g.binaryExpr(x.values(), df);
                      });
}

}  // namespace

// ---- matmul --------------------------------------------------------------------

// Below this many multiply-adds per slice, blocked GEMM setup costs more
// than the product itself.
constexpr Index kSmallProduct = 16 * 16 * 16;

Tensor matmul(const Tensor& a, const Tensor& b) {
  constexpr std::string_view op = "matmul";
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] { shape_fail(op, "cannot contract " + to_string(sa) + " with " + to_string(sb)); };

  if (a.rank() >= 2 && b.rank() == 2) {
    const Index k = sa.back();
    if (k != sb[0]) mismatch();
    const Index rows = a.numel() / k;
    const Index m = sb[1];
    Shape so = sa;
    so.back() = m;
    Vec out(rows * m);
    Map(out.data(), rows, m).noalias() = MapC(a.data(), rows, k) * MapC(b.data(), k, m);
    Tensor ta = a, tb = b;
    return Tape::record(OpKind::matmul, std::move(so), std::move(out), std::array{a, b},
                        [ta, tb, rows, k, m](const Vec& g, std::span<Vec* const> gi) {
                          MapC G(g.data(), rows, m);
                          if (gi[0]) Map(gi[0]->data(), rows, k).noalias() += G * MapC(tb.data(), k, m).transpose();
                          if (gi[1]) Map(gi[1]->data(), k, m).noalias() += MapC(ta.data(), rows, k).transpose() * G;
                        });
  }
  if (a.rank() == 2 && b.rank() == 1) {
    const Index n = sa[0], k = sa[1];
    if (k != sb[0]) mismatch();
    Vec out = MapC(a.data(), n, k) * b.values();
    Tensor ta = a, tb = b;
    return Tape::record(OpKind::matmul, {n}, std::move(out), std::array{a, b},
                        [ta, tb, n, k](const Vec& g, std::span<Vec* const> gi) {
                          if (gi[0]) Map(gi[0]->data(), n, k).noalias() += g * tb.values().transpose();
                          if (gi[1]) *gi[1] += MapC(ta.data(), n, k).transpose() * g;
                        });
  }
  if (a.rank() == 1 && b.rank() == 2) {
    const Index k = sa[0], m = sb[1];
    if (k != sb[0]) mismatch();
    Vec out = MapC(b.data(), k, m).transpose() * a.values();
    Tensor ta = a, tb = b;
    return Tape::record(OpKind::matmul, {m}, std::move(out), std::array{a, b},
                        [ta, tb, k, m](const Vec& g, std::span<Vec* const> gi) {
                          if (gi[0]) *gi[0] += MapC(tb.data(), k, m) * g;
                          if (gi[1]) Map(gi[1]->data(), k, m).noalias() += ta.values() * g.transpose();
                        });
  }
  if (a.rank() >= 3 && a.rank() == b.rank()) {
    if (!std::equal(sa.begin(), sa.end() - 2, sb.begin())) mismatch();
    const Index n = sa[sa.size() - 2], k = sa.back(), m = sb.back();
    if (sb[sb.size() - 2] != k) mismatch();
    const Index batch = a.numel() / (n * k);
    Shape so = sa;
    so.back() = m;
    Vec out(batch * n * m);
    const bool small = n * k * m <= kSmallProduct;
    for (Index i = 0; i < batch; ++i) {
      MapC A(a.data() + i * n * k, n, k), B(b.data() + i * k * m, k, m);
      Map O(out.data() + i * n * m, n, m);
      if (small)
        O.noalias() = A.lazyProduct(B);
      else
        O.noalias() = A * B;
    }
    Tensor ta = a, tb = b;
    return Tape::record(OpKind::matmul, std::move(so), std::move(out), std::array{a, b},
                        [ta, tb, batch, n, k, m, small](const Vec& g, std::span<Vec* const> gi) {
                          for (Index i = 0; i < batch; ++i) {
                            MapC G(g.data() + i * n * m, n, m);
                            MapC A(ta.data() + i * n * k, n, k), B(tb.data() + i * k * m, k, m);
                            if (gi[0]) {
                              Map GA(gi[0]->data() + i * n * k, n, k);
                              if (small)
                                GA.noalias() += G.lazyProduct(B.transpose());
                              else
                                GA.noalias() += G * B.transpose();
                            }
                            if (gi[1]) {
                              Map GB(gi[1]->data() + i * k * m, k, m);
                              if (small)
                                GB.noalias() += A.transpose().lazyProduct(G);
                              else
                                GB.noalias() += A.transpose() * G;
                            }
                          }
                        });
  }
  mismatch();
  return {};
}

// ---- elementwise binary ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const Bcast mode = broadcast_mode("add", a, b);
  Vec out = elementwise(a, b, mode, [](auto x, auto y) { return x + y; });
  const Shape shape = mode == Bcast::lhs ? b.shape() : a.shape();
  return Tape::record(OpKind::add, shape, std::move(out), std::array{a, b},
                      [mode](const Vec& g, std::span<Vec* const> gi) {
                        for (int s = 0; s < 2; ++s) {
                          if (!gi[s]) continue;
                          const bool small = (mode == Bcast::rhs && s == 1) || (mode == Bcast::lhs && s == 0);
                          if (small) reduce_blocks(g, *gi[s]);
                          else *gi[s] += g;
                        }
                      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Bcast mode = broadcast_mode("sub", a, b);
  Vec out = elementwise(a, b, mode, [](auto x, auto y) { return x - y; });
  const Shape shape = mode == Bcast::lhs ? b.shape() : a.shape();
  return Tape::record(OpKind::sub, shape, std::move(out), std::array{a, b},
                      [mode](const Vec& g, std::span<Vec* const> gi) {
                        for (int s = 0; s < 2; ++s) {
                          if (!gi[s]) continue;
                          const double sign = s == 0 ? 1.0 : -1.0;
                          const bool small = (mode == Bcast::rhs && s == 1) || (mode == Bcast::lhs && s == 0);
                          if (small) {
                            Vec tmp = Vec::Zero(gi[s]->size());
                            reduce_blocks(g, tmp);
                            *gi[s] += sign * tmp;
                          } else {
                            *gi[s] += sign * g;
                          }
                        }
                      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Bcast mode = broadcast_mode("mul", a, b);
  Vec out = elementwise(a, b, mode, [](auto x, auto y) { return x * y; });
  const Shape shape = mode == Bcast::lhs ? b.shape() : a.shape();
  Tensor ta = a, tb = b;
  return Tape::record(OpKind::mul, shape, std::move(out), std::array{a, b},
                      [ta, tb, mode](const Vec& g, std::span<Vec* const> gi) {
                        const Tensor* other[2] = {&tb, &ta};
                        for (int s = 0; s < 2; ++s) {
                          if (!gi[s]) continue;
                          const bool small = (mode == Bcast::rhs && s == 1) || (mode == Bcast::lhs && s == 0);
                          const Tensor& o = *other[s];
                          if (mode == Bcast::same) {
                            *gi[s] += g.cwiseProduct(o.values());
                          } else if (small) {
                            // o is the big operand
                            Vec prod = g.cwiseProduct(o.values());
                            reduce_blocks(prod, *gi[s]);
                          } else {
                            const Index k = o.numel();
                            const Index n = g.size() / k;
                            for (Index i = 0; i < n; ++i)
                              gi[s]->segment(i * k, k) += g.segment(i * k, k).cwiseProduct(o.values());
                          }
                        }
                      });
}

Tensor scale(const Tensor& a, double s) {
  Vec out = a.values() * s;
  return Tape::record(OpKind::scale, a.shape(), std::move(out), {&a, 1},
                      [s](const Vec& g, std::span<Vec* const> gi) {
                        if (gi[0]) *gi[0] += s * g;
                      });
}

// ---- structural ----------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, Index axis) {
  constexpr std::string_view op = "concat";
  if (parts.empty()) shape_fail(op, "no inputs");
  const Shape& s0 = parts[0].shape();
  const Index ax = norm_axis(op, axis, static_cast<Index>(s0.size()));
  Shape so = s0;
  so[ax] = 0;
  std::vector<Index> lens;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (static_cast<Index>(i) != ax && s[i] != s0[i]) ok = false;
    if (!ok) shape_fail(op, "shape " + to_string(s) + " incompatible with " + to_string(s0) + " along axis " + std::to_string(ax));
    so[ax] += s[ax];
    lens.push_back(s[ax]);
  }
  const AxisSplit sp = split_at(so, ax);
  Vec out(numel(so));
  Index off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Index block = lens[p] * sp.inner;
    for (Index o = 0; o < sp.outer; ++o)
      out.segment(o * sp.len * sp.inner + off, block) = parts[p].values().segment(o * block, block);
    off += block;
  }
  return Tape::record(OpKind::concat, so, std::move(out), parts,
                      [lens, sp](const Vec& g, std::span<Vec* const> gi) {
                        Index off = 0;
                        for (std::size_t p = 0; p < lens.size(); ++p) {
                          const Index block = lens[p] * sp.inner;
                          if (gi[p])
                            for (Index o = 0; o < sp.outer; ++o)
                              gi[p]->segment(o * block, block) += g.segment(o * sp.len * sp.inner + off, block);
                          off += block;
                        }
                      });
}

Tensor slice(const Tensor& a, Index axis, Index begin, Index end) {
  constexpr std::string_view op = "slice";
  const Index ax = norm_axis(op, axis, a.rank());
  const Index len = a.shape()[ax];
  if (begin < 0 || end > len || begin >= end)
    shape_fail(op, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis of length " +
                       std::to_string(len) + " in " + to_string(a.shape()));
  Shape so = a.shape();
  so[ax] = end - begin;
  const AxisSplit sp = split_at(a.shape(), ax);
  const Index block = (end - begin) * sp.inner;
  Vec out(sp.outer * block);
  for (Index o = 0; o < sp.outer; ++o)
    out.segment(o * block, block) = a.values().segment(o * sp.len * sp.inner + begin * sp.inner, block);
  return Tape::record(OpKind::slice, so, std::move(out), {&a, 1},
                      [sp, block, begin](const Vec& g, std::span<Vec* const> gi) {
                        if (!gi[0]) return;
                        for (Index o = 0; o < sp.outer; ++o)
                          gi[0]->segment(o * sp.len * sp.inner + begin * sp.inner, block) += g.segment(o * block, block);
                      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel())
    shape_fail("reshape", "cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  return Tape::record(OpKind::reshape, std::move(shape), a.values(), {&a, 1},
                      [](const Vec& g, std::span<Vec* const> gi) {
                        if (gi[0]) *gi[0] += g;
                      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) shape_fail("transpose", "needs rank >= 2, got " + to_string(a.shape()));
  if (a.rank() == 2) {
    const Index n = a.shape()[0], m = a.shape()[1];
    Vec out(n * m);
    Map(out.data(), m, n) = MapC(a.data(), n, m).transpose();
    return Tape::record(OpKind::transpose, {m, n}, std::move(out), {&a, 1},
                        [n, m](const Vec& g, std::span<Vec* const> gi) {
                          if (gi[0]) Map(gi[0]->data(), n, m) += MapC(g.data(), m, n).transpose();
                        });
  }
  std::vector<Index> perm(static_cast<std::size_t>(a.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return transpose(a, perm);
}

Tensor transpose(const Tensor& a, std::span<const Index> perm) {
  constexpr std::string_view op = "transpose";
  const Index r = a.rank();
  if (static_cast<Index>(perm.size()) != r) shape_fail(op, "permutation length mismatch for " + to_string(a.shape()));
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (Index p : perm) {
    if (p < 0 || p >= r || seen[p]) shape_fail(op, "invalid permutation");
    seen[p] = true;
  }
  const Shape& si = a.shape();
  std::vector<Index> in_stride(static_cast<std::size_t>(r), 1);
  for (Index i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * si[i + 1];
  Shape so(static_cast<std::size_t>(r));
  std::vector<Index> src_stride(static_cast<std::size_t>(r));
  for (Index i = 0; i < r; ++i) {
    so[i] = si[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  // gather map: out flat index -> in flat index
  const Index n = a.numel();
  auto index_map = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
  std::vector<Index> ctr(static_cast<std::size_t>(r), 0);
  Index src = 0;
  for (Index o = 0; o < n; ++o) {
    (*index_map)[o] = src;
    for (Index d = r - 1; d >= 0; --d) {
      if (++ctr[d] < so[d]) {
        src += src_stride[d];
        break;
      }
      src -= src_stride[d] * (so[d] - 1);
      ctr[d] = 0;
    }
  }
  Vec out(n);
  for (Index o = 0; o < n; ++o) out[o] = a[(*index_map)[o]];
  return Tape::record(OpKind::transpose, so, std::move(out), {&a, 1},
                      [index_map](const Vec& g, std::span<Vec* const> gi) {
                        if (!gi[0]) return;
                        const auto& m = *index_map;
                        for (Index o = 0; o < g.size(); ++o) (*gi[0])[m[o]] += g[o];
                      });
}

// ---- reductions / normalisation ------------------------------------------------

Tensor softmax(const Tensor& a, Index axis) {
  const Index ax = norm_axis("softmax", axis, a.rank());
  const AxisSplit sp = split_at(a.shape(), ax);
  Vec out(a.numel());
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index l = 0; l < sp.len; ++l) mx = std::max(mx, a[base + l * sp.inner]);
      double s = 0.0;
      for (Index l = 0; l < sp.len; ++l) {
        const double e = std::exp(a[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        s += e;
      }
      for (Index l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= s;
    }
  auto y = std::make_shared<const Vec>(out);
  return Tape::record(OpKind::softmax, a.shape(), std::move(out), {&a, 1},
                      [y, sp](const Vec& g, std::span<Vec* const> gi) {
                        if (!gi[0]) return;
                        for (Index o = 0; o < sp.outer; ++o)
                          for (Index i = 0; i < sp.inner; ++i) {
                            const Index base = o * sp.len * sp.inner + i;
                            double dot = 0.0;
                            for (Index l = 0; l < sp.len; ++l) dot += g[base + l * sp.inner] * (*y)[base + l * sp.inner];
                            for (Index l = 0; l < sp.len; ++l) {
                              const Index j = base + l * sp.inner;
                              (*gi[0])[j] += (*y)[j] * (g[j] - dot);
                            }
                          }
                      });
}

Tensor logsumexp(const Tensor& a, Index axis) {
  const Index ax = norm_axis("logsumexp", axis, a.rank());
  const AxisSplit sp = split_at(a.shape(), ax);
  Vec out(sp.outer * sp.inner);
  auto soft = std::make_shared<Vec>(a.numel());
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index l = 0; l < sp.len; ++l) mx = std::max(mx, a[base + l * sp.inner]);
      double s = 0.0;
      for (Index l = 0; l < sp.len; ++l) {
        const double e = std::exp(a[base + l * sp.inner] - mx);
        (*soft)[base + l * sp.inner] = e;
        s += e;
      }
      for (Index l = 0; l < sp.len; ++l) (*soft)[base + l * sp.inner] /= s;
      out[o * sp.inner + i] = mx + std::log(s);
    }
  check_finite("logsumexp", out);
  return Tape::record(OpKind::logsumexp, drop_axis(a.shape(), ax), std::move(out), {&a, 1},
                      [soft, sp](const Vec& g, std::span<Vec* const> gi) {
                        if (!gi[0]) return;
                        for (Index o = 0; o < sp.outer; ++o)
                          for (Index i = 0; i < sp.inner; ++i) {
                            const Index base = o * sp.len * sp.inner + i;
                            const double go = g[o * sp.inner + i];
                            for (Index l = 0; l < sp.len; ++l)
                              (*gi[0])[base + l * sp.inner] += go * (*soft)[base + l * sp.inner];
                          }
                      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  constexpr std::string_view op = "layer_norm";
  if (x.rank() < 1) shape_fail(op, "needs rank >= 1");
  const Index d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    shape_fail(op, "gamma/beta " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                       " do not match feature width " + std::to_string(d));
  const Index rows = x.numel() / d;
  auto xhat = std::make_shared<RowMat>(rows, d);
  auto inv_std = std::make_shared<Vec>(rows);
  MapC X(x.data(), rows, d);
  for (Index r = 0; r < rows; ++r) {
    const double mu = X.row(r).mean();
    const double var = (X.row(r).array() - mu).square().mean();
    (*inv_std)[r] = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (X.row(r).array() - mu) * (*inv_std)[r];
  }
  Vec out(x.numel());
  Map Y(out.data(), rows, d);
  Y = (xhat->array().rowwise() * gamma.values().transpose().array()).rowwise() + beta.values().transpose().array();
  Tensor tg = gamma;
  return Tape::record(OpKind::layer_norm, x.shape(), std::move(out), std::array{x, gamma, beta},
                      [xhat, inv_std, tg, rows, d](const Vec& g, std::span<Vec* const> gi) {
                        MapC G(g.data(), rows, d);
                        if (gi[1]) *gi[1] += (G.array() * xhat->array()).colwise().sum().transpose().matrix();
                        if (gi[2]) *gi[2] += G.colwise().sum().transpose();
                        if (!gi[0]) return;
                        Map DX(gi[0]->data(), rows, d);
                        for (Index r = 0; r < rows; ++r) {
                          Eigen::RowVectorXd dxh = G.row(r).array() * tg.values().transpose().array();
                          const double m1 = dxh.mean();
                          const double m2 = (dxh.array() * xhat->row(r).array()).mean();
                          DX.row(r).array() += (*inv_std)[r] * (dxh.array() - m1 - xhat->row(r).array() * m2);
                        }
                      });
}

Tensor sum(const Tensor& a, Index axis) {
  const Index ax = norm_axis("sum", axis, a.rank());
  const AxisSplit sp = split_at(a.shape(), ax);
  Vec out = Vec::Zero(sp.outer * sp.inner);
  for (Index o = 0; o < sp.outer; ++o)
    for (Index l = 0; l < sp.len; ++l)
      out.segment(o * sp.inner, sp.inner) += a.values().segment((o * sp.len + l) * sp.inner, sp.inner);
  return Tape::record(OpKind::sum, drop_axis(a.shape(), ax), std::move(out), {&a, 1},
                      [sp](const Vec& g, std::span<Vec* const> gi) {
                        if (!gi[0]) return;
                        for (Index o = 0; o < sp.outer; ++o)
                          for (Index l = 0; l < sp.len; ++l)
                            gi[0]->segment((o * sp.len + l) * sp.inner, sp.inner) += g.segment(o * sp.inner, sp.inner);
                      });
}

Tensor sum(const Tensor& a) {
  Vec out = Vec::Constant(1, a.values().sum());
  return Tape::record(OpKind::sum, {}, std::move(out), {&a, 1},
                      [](const Vec& g, std::span<Vec* const> gi) {
                        if (gi[0]) gi[0]->array() += g[0];
                      });
}

Tensor mean(const Tensor& a, Index axis) {
  const Index ax = norm_axis("mean", axis, a.rank());
  const double inv = 1.0 / static_cast<double>(a.shape()[ax]);
  const AxisSplit sp = split_at(a.shape(), ax);
  Vec out = Vec::Zero(sp.outer * sp.inner);
  for (Index o = 0; o < sp.outer; ++o)
    for (Index l = 0; l < sp.len; ++l)
      out.segment(o * sp.inner, sp.inner) += a.values().segment((o * sp.len + l) * sp.inner, sp.inner);
  out *= inv;
  return Tape::record(OpKind::mean, drop_axis(a.shape(), ax), std::move(out), {&a, 1},
                      [sp, inv](const Vec& g, std::span<Vec* const> gi) {
                        if (!gi[0]) return;
                        for (Index o = 0; o < sp.outer; ++o)
                          for (Index l = 0; l < sp.len; ++l)
                            gi[0]->segment((o * sp.len + l) * sp.inner, sp.inner) += inv * g.segment(o * sp.inner, sp.inner);
                      });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  Vec out = Vec::Constant(1, a.values().sum() * inv);
  return Tape::record(OpKind::mean, {}, std::move(out), {&a, 1},
                      [inv](const Vec& g, std::span<Vec* const> gi) {
                        if (gi[0]) gi[0]->array() += g[0] * inv;
                      });
}

// ---- pointwise -------------------------------------------------------------------

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      OpKind::gelu, a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double g, double x) {
        const double t = std::tanh(c * (x + k * x * x * x));
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x));
      });
}

Tensor tanh(const Tensor& a) {
  return unary(
      OpKind::tanh, a, [](double x) { return std::tanh(x); },
      [](double g, double x) {
        const double t = std::tanh(x);
        return g * (1.0 - t * t);
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      OpKind::exp, a, [](double x) { return std::exp(x); }, [](double g, double x) { return g * std::exp(x); });
}

Tensor log(const Tensor& a) {
  return unary(
      OpKind::log, a, [](double x) { return std::log(x); }, [](double g, double x) { return g / x; });
}

Tensor softplus(const Tensor& a) {
  return unary(
      OpKind::softplus, a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double g, double x) {
        // sigmoid, evaluated without overflow
        const double e = std::exp(-std::abs(x));
        return g * (x >= 0 ? 1.0 / (1.0 + e) : e / (1.0 + e));
      });
}

// ---- indexing / masking ----------------------------------------------------------

Tensor embedding_lookup(const Tensor& table, std::span<const Index> rows) {
  constexpr std::string_view op = "embedding_lookup";
  if (table.rank() != 2) shape_fail(op, "table must be rank 2, got " + to_string(table.shape()));
  if (rows.empty()) shape_fail(op, "empty index list");
  const Index v = table.shape()[0], d = table.shape()[1];
  const Index n = static_cast<Index>(rows.size());
  Vec out(n * d);
  for (Index i = 0; i < n; ++i) {
    if (rows[i] < 0 || rows[i] >= v)
      shape_fail(op, "row " + std::to_string(rows[i]) + " out of range for table " + to_string(table.shape()));
    out.segment(i * d, d) = table.values().segment(rows[i] * d, d);
  }
  auto idx = std::make_shared<std::vector<Index>>(rows.begin(), rows.end());
  return Tape::record(OpKind::embedding_lookup, {n, d}, std::move(out), {&table, 1},
                      [idx, d](const Vec& g, std::span<Vec* const> gi) {
                        if (!gi[0]) return;
                        for (std::size_t i = 0; i < idx->size(); ++i)
                          gi[0]->segment((*idx)[i] * d, d) += g.segment(static_cast<Index>(i) * d, d);
                      });
}

Tensor dropout(const Tensor& a, double p, const DropoutKey& key, bool train) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  if (!train || p == 0.0) return a;
  const std::uint64_t stream = hash_combine(hash_combine(key.seed, key.step), key.site);
  auto mask = std::make_shared<Vec>(a.numel());
  const double keep_scale = 1.0 / (1.0 - p);
  for (Index i = 0; i < a.numel(); ++i) {
    const double u = static_cast<double>(hash_combine(stream, static_cast<std::uint64_t>(i)) >> 11) * 0x1.0p-53;
    (*mask)[i] = u >= p ? keep_scale : 0.0;
  }
  Vec out = a.values().cwiseProduct(*mask);
  return Tape::record(OpKind::dropout, a.shape(), std::move(out), {&a, 1},
                      [mask](const Vec& g, std::span<Vec* const> gi) {
                        if (gi[0]) *gi[0] += g.cwiseProduct(*mask);
                      });
}

Tensor masked_fill(const Tensor& a, const Tensor& mask, double value) {
  if (mask.requires_grad()) throw AutogradError("masked_fill: mask must not require grad");
  if (a.shape() != mask.shape() && !is_suffix(mask.shape(), a.shape()))
    shape_fail("masked_fill", "mask " + to_string(mask.shape()) + " does not broadcast to " + to_string(a.shape()));
  const Index k = mask.numel();
  Vec out = a.values();
  for (Index i = 0; i < out.size(); ++i)
    if (mask[i % k] != 0.0) out[i] = value;
  Tensor tm = mask;
  return Tape::record(OpKind::masked_fill, a.shape(), std::move(out), {&a, 1},
                      [tm, k](const Vec& g, std::span<Vec* const> gi) {
                        if (!gi[0]) return;
                        for (Index i = 0; i < g.size(); ++i)
                          if (tm[i % k] == 0.0) (*gi[0])[i] += g[i];
                      });
}

// ---- dispatcher --------------------------------------------------------------------

Tensor forward_op(OpKind kind, std::span<const Tensor> in, const OpAttrs& at) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::scale: need(1); return scale(in[0], at.value);
    case OpKind::concat: return concat(in, at.axis);
    case OpKind::slice: need(1); return slice(in[0], at.axis, at.begin, at.end);
    case OpKind::reshape: need(1); return reshape(in[0], at.shape);
    case OpKind::transpose:
      need(1);
      return at.indices.empty() ? transpose(in[0]) : transpose(in[0], at.indices);
    case OpKind::softmax: need(1); return softmax(in[0], at.axis);
    case OpKind::logsumexp: need(1); return logsumexp(in[0], at.axis);
    case OpKind::layer_norm: need(3); return layer_norm(in[0], in[1], in[2], at.eps);
    case OpKind::gelu: need(1); return gelu(in[0]);
    case OpKind::tanh: need(1); return tanh(in[0]);
    case OpKind::exp: need(1); return exp(in[0]);
    case OpKind::log: need(1); return log(in[0]);
    case OpKind::softplus: need(1); return softplus(in[0]);
    case OpKind::sum: need(1); return sum(in[0], at.axis);
    case OpKind::mean: need(1); return mean(in[0], at.axis);
    case OpKind::embedding_lookup: need(1); return embedding_lookup(in[0], at.indices);
    case OpKind::dropout: need(1); return dropout(in[0], at.value, at.key, at.train);
    case OpKind::masked_fill: need(2); return masked_fill(in[0], in[1], at.value);
    case OpKind::leaf: break;
  }
  throw std::invalid_argument("unknown op kind");
}

}  // namespace tail
