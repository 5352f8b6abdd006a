#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "layoutgen/tensor.hpp"

namespace layoutgen {

// Handle to a node on a Graph tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Minimum,
  Maximum,
  ScalarMulC,
  ScalarAddC,
  MatMul,
  MatMulNT,
  AddRowBias,
  AddChanBias,
  Conv2d,
  Pointwise,
  ReduceAxis,
  MeanAll,
  SumAll,
  RepeatRows,
  RepeatCols,
  BroadcastScalar,
  Stack0,
  ConcatCols,
  Pick2,
  Reshape,
  Permute3,
  MulScalarVar,
  RelationMix,
  SoftmaxXent,
  RenderPoint,
  RenderRect,
  RenderTriangle,
  ComposeChannels,
};

enum class Pw : std::uint8_t { Relu, Sigmoid, Abs, Clamp01, Tent, Softplus };
enum class Red : std::uint8_t { Max, Mean, Sum };

namespace detail {

// Fixed subgradient conventions at kinks: relu'(0)=0, tent'(0)=0,
// tent'(|d|=1)=0, clamp01' is 0 at both boundaries, abs'(0)=0.
inline double tent(double d) { return std::max(0.0, 1.0 - std::fabs(d)); }

inline double tent_grad(double d) {
  if (d > 0.0 && d < 1.0) return -1.0;
  if (d < 0.0 && d > -1.0) return 1.0;
  return 0.0;
}

inline double clamp01(double d) { return std::min(std::max(0.0, d), 1.0); }

inline double clamp01_grad(double d) { return (d > 0.0 && d < 1.0) ? 1.0 : 0.0; }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

inline double tent_kink_gap(double d) {
  return std::min(std::fabs(d), std::fabs(std::fabs(d) - 1.0));
}

inline double clamp01_kink_gap(double d) {
  return std::min(std::fabs(d), std::fabs(d - 1.0));
}

// Total-order key so a multiset of doubles can be summed in a canonical
// order independent of how it was produced (element-permutation bit-exactness).
inline std::uint64_t sort_key(double v) {
  const std::uint64_t b = std::bit_cast<std::uint64_t>(v);
  return (b & 0x8000000000000000ULL) ? ~b : (b | 0x8000000000000000ULL);
}

}  // namespace detail

struct Node {
  Op op{};
  Pw pw{};
  Red red{};
  int a0 = 0, a1 = 0, a2 = 0;  // op attributes (axis, stride/pad, sizes, perm)
  std::vector<int> inputs;
  Tensor value;
  Tensor grad;
  Tensor stash;  // forward intermediates (RelationMix H, SoftmaxXent probs)
  std::vector<int> aux;     // argmax indices, branch codes
  std::vector<int> labels;  // SoftmaxXent targets
  bool requires_grad = false;
  bool has_grad = false;
  std::string name;  // non-empty for named (trainable) leaves
};

// Append-only reverse-mode tape. Nodes are topologically ordered by
// construction; values are computed eagerly.
class Graph {
 public:
  bool track_kinks = true;
  bool finite_checks = false;

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  bool has_grad(Var v) const { return nodes_[v.id].has_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Minimum observed distance of any kinked-op argument to its kink (or of a
  // max reduction to a tie), in argument units. +inf when no kinked op ran.
  double min_kink_gap() const { return min_kink_gap_; }
  void reset_kink_gap() { min_kink_gap_ = std::numeric_limits<double>::infinity(); }

  Var leaf(Tensor t, std::string name) {
    if (!name.empty()) {
      auto it = named_.find(name);
      if (it != named_.end()) return Var{it->second};
    }
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(t);
    n.requires_grad = !name.empty();
    n.name = name;
    const int id = push(std::move(n));
    if (!name.empty()) named_.emplace(std::move(name), id);
    return Var{id};
  }

  Var constant(Tensor t) { return leaf(std::move(t), ""); }
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  Var add(Var a, Var b) { return binary(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
  Var minimum(Var a, Var b) { return binary(Op::Minimum, a, b); }
  Var maximum(Var a, Var b) { return binary(Op::Maximum, a, b); }

  Var scalar_mul(Var x, double c) {
    Node n = unary(Op::ScalarMulC, x);
    n.value = val(x);
    for (double& v : n.value.data) v *= c;
    n.stash = Tensor::scalar(c);
    return Var{push(std::move(n))};
  }

  Var scalar_add(Var x, double c) {
    Node n = unary(Op::ScalarAddC, x);
    n.value = val(x);
    for (double& v : n.value.data) v += c;
    return Var{push(std::move(n))};
  }

  Var pointwise(Var x, Pw kind) {
    Node n = unary(Op::Pointwise, x);
    n.pw = kind;
    const Tensor& xv = val(x);
    n.value = Tensor(xv.shape);
    for (long long i = 0; i < xv.size(); ++i) {
      const double d = xv[i];
      double y = 0.0;
      switch (kind) {
        case Pw::Relu:
          y = d > 0.0 ? d : 0.0;
          note_kink(std::fabs(d));
          break;
        case Pw::Sigmoid:
          y = detail::sigmoid(d);
          break;
        case Pw::Abs:
          y = std::fabs(d);
          note_kink(std::fabs(d));
          break;
        case Pw::Clamp01:
          y = detail::clamp01(d);
          note_kink(detail::clamp01_kink_gap(d));
          break;
        case Pw::Tent:
          y = detail::tent(d);
          note_kink(detail::tent_kink_gap(d));
          break;
        case Pw::Softplus:
          y = detail::softplus(d);
          break;
      }
      n.value[i] = y;
    }
    return Var{push(std::move(n))};
  }

  Var relu(Var x) { return pointwise(x, Pw::Relu); }
  Var sigmoid(Var x) { return pointwise(x, Pw::Sigmoid); }
  Var abs(Var x) { return pointwise(x, Pw::Abs); }
  Var clamp01(Var x) { return pointwise(x, Pw::Clamp01); }
  Var tent(Var x) { return pointwise(x, Pw::Tent); }
  Var softplus(Var x) { return pointwise(x, Pw::Softplus); }

  Var matmul(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
      throw ShapeError("matmul shape mismatch " + A.shape_str() + " x " + B.shape_str());
    const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Node nd = make(Op::MatMul, {a, b});
    nd.value = Tensor({m, n});
    for (int i = 0; i < m; ++i) {
      const double* ar = &A.data[static_cast<std::size_t>(i) * k];
      double* out = &nd.value.data[static_cast<std::size_t>(i) * n];
      for (int kk = 0; kk < k; ++kk) {
        const double av = ar[kk];
        if (av == 0.0) continue;
        const double* br = &B.data[static_cast<std::size_t>(kk) * n];
        for (int j = 0; j < n; ++j) out[j] += av * br[j];
      }
    }
    return Var{push(std::move(nd))};
  }

  // A[m,k] * B[n,k]^T -> [m,n]
  Var matmul_nt(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1))
      throw ShapeError("matmul_nt shape mismatch");
    const int m = A.dim(0), k = A.dim(1), n = B.dim(0);
    Node nd = make(Op::MatMulNT, {a, b});
    nd.value = Tensor({m, n});
    for (int i = 0; i < m; ++i) {
      const double* ar = &A.data[static_cast<std::size_t>(i) * k];
      for (int j = 0; j < n; ++j) {
        const double* br = &B.data[static_cast<std::size_t>(j) * k];
        double acc = 0.0;
        for (int kk = 0; kk < k; ++kk) acc += ar[kk] * br[kk];
        nd.value.data[static_cast<std::size_t>(i) * n + j] = acc;
      }
    }
    return Var{push(std::move(nd))};
  }

  Var add_row_bias(Var x, Var b) {
    const Tensor& X = val(x);
    const Tensor& B = val(b);
    if (B.rank() != 1 || X.rank() < 1 || X.dim(X.rank() - 1) != B.dim(0))
      throw ShapeError("add_row_bias shape mismatch");
    Node n = make(Op::AddRowBias, {x, b});
    n.value = X;
    const int d = B.dim(0);
    for (long long i = 0; i < X.size(); ++i) n.value[i] += B[i % d];
    return Var{push(std::move(n))};
  }

  Var add_chan_bias(Var x, Var b) {
    const Tensor& X = val(x);
    const Tensor& B = val(b);
    if (X.rank() != 4 || B.rank() != 1 || X.dim(1) != B.dim(0))
      throw ShapeError("add_chan_bias shape mismatch");
    Node n = make(Op::AddChanBias, {x, b});
    n.value = X;
    const int bs = X.dim(0), c = X.dim(1);
    const long long plane = static_cast<long long>(X.dim(2)) * X.dim(3);
    for (int bb = 0; bb < bs; ++bb)
      for (int cc = 0; cc < c; ++cc) {
        double* p = &n.value.data[(static_cast<std::size_t>(bb) * c + cc) * plane];
        const double bv = B[cc];
        for (long long i = 0; i < plane; ++i) p[i] += bv;
      }
    return Var{push(std::move(n))};
  }

  // y = x W + b on the last axis; x may be [N,Din] or [B,N,Din].
  Var linear(Var x, Var w, Var b) {
    const Tensor& X = val(x);
    if (X.rank() == 2) return add_row_bias(matmul(x, w), b);
    if (X.rank() == 3) {
      const int b0 = X.dim(0), n0 = X.dim(1), d0 = X.dim(2);
      Var flat = reshape(x, {b0 * n0, d0});
      Var y = add_row_bias(matmul(flat, w), b);
      return reshape(y, {b0, n0, val(w).dim(1)});
    }
    throw ShapeError("linear expects rank-2 or rank-3 input");
  }

  // Cross-correlation with zero padding; x[B,C,H,W], k[Co,C,Kh,Kw].
  Var conv2d(Var x, Var k, int stride, int pad) {
    const Tensor& X = val(x);
    const Tensor& K = val(k);
    if (X.rank() != 4 || K.rank() != 4) throw ShapeError("conv2d expects rank-4 tensors");
    if (X.dim(1) != K.dim(1)) throw ShapeError("conv2d channel mismatch");
    if (K.dim(2) % 2 == 0 || K.dim(3) % 2 == 0) throw ShapeError("conv2d kernel dims must be odd");
    if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
    const int bs = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
    const int co = K.dim(0), kh = K.dim(2), kw = K.dim(3);
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (w + 2 * pad - kw) / stride + 1;
    if (ho < 1 || wo < 1) throw ShapeError("conv2d output would be empty");
    Node n = make(Op::Conv2d, {x, k});
    n.a0 = stride;
    n.a1 = pad;
    n.value = Tensor({bs, co, ho, wo});
    for (int b = 0; b < bs; ++b)
      for (int oc = 0; oc < co; ++oc) {
        double* out = &n.value.data[(static_cast<std::size_t>(b) * co + oc) * ho * wo];
        for (int ic = 0; ic < c; ++ic) {
          const double* xp = &X.data[(static_cast<std::size_t>(b) * c + ic) * h * w];
          const double* kp = &K.data[(static_cast<std::size_t>(oc) * c + ic) * kh * kw];
          for (int r = 0; r < kh; ++r)
            for (int s = 0; s < kw; ++s) {
              const double kv = kp[r * kw + s];
              if (kv == 0.0) continue;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * stride + r - pad;
                if (iy < 0 || iy >= h) continue;
                const double* xrow = xp + static_cast<std::size_t>(iy) * w;
                double* orow = out + static_cast<std::size_t>(oy) * wo;
                for (int ox = 0; ox < wo; ++ox) {
                  const int ix = ox * stride + s - pad;
                  if (ix < 0 || ix >= w) continue;
                  orow[ox] += kv * xrow[ix];
                }
              }
            }
        }
      }
    return Var{push(std::move(n))};
  }

  // Reduce along one axis. Max ties break to the lowest index.
  Var reduce(Var x, Red kind, int axis) {
    const Tensor& X = val(x);
    if (axis < 0 || axis >= X.rank()) throw ShapeError("reduce axis out of range");
    long long pre = 1, post = 1;
    for (int i = 0; i < axis; ++i) pre *= X.dim(i);
    for (int i = axis + 1; i < X.rank(); ++i) post *= X.dim(i);
    const int nred = X.dim(axis);
    Node n = make(Op::ReduceAxis, {x});
    n.red = kind;
    n.a0 = axis;
    std::vector<int> oshape;
    for (int i = 0; i < X.rank(); ++i)
      if (i != axis) oshape.push_back(X.dim(i));
    if (oshape.empty()) oshape.push_back(1);
    n.value = Tensor(oshape);
    if (kind == Red::Max) n.aux.assign(static_cast<std::size_t>(pre * post), 0);
    for (long long p = 0; p < pre; ++p)
      for (long long q = 0; q < post; ++q) {
        const double* base = &X.data[static_cast<std::size_t>(p) * nred * post + q];
        double acc;
        if (kind == Red::Max) {
          double best = base[0];
          double second = -std::numeric_limits<double>::infinity();
          int arg = 0;
          for (int j = 1; j < nred; ++j) {
            const double v = base[static_cast<std::size_t>(j) * post];
            if (v > best) {
              second = best;
              best = v;
              arg = j;
            } else if (v > second) {
              second = v;
            }
          }
          if (nred > 1) note_kink(best - second);
          n.aux[static_cast<std::size_t>(p * post + q)] = arg;
          acc = best;
        } else {
          acc = 0.0;
          for (int j = 0; j < nred; ++j) acc += base[static_cast<std::size_t>(j) * post];
          if (kind == Red::Mean) acc /= nred;
        }
        n.value[p * post + q] = acc;
      }
    return Var{push(std::move(n))};
  }

  Var reduce_max(Var x, int axis) { return reduce(x, Red::Max, axis); }
  Var reduce_mean(Var x, int axis) { return reduce(x, Red::Mean, axis); }
  Var reduce_sum(Var x, int axis) { return reduce(x, Red::Sum, axis); }

  Var sum_all(Var x) {
    Node n = unary(Op::SumAll, x);
    double acc = 0.0;
    for (double v : val(x).data) acc += v;
    n.value = Tensor::scalar(acc);
    return Var{push(std::move(n))};
  }

  Var mean_all(Var x) {
    Node n = unary(Op::MeanAll, x);
    double acc = 0.0;
    for (double v : val(x).data) acc += v;
    n.value = Tensor::scalar(acc / static_cast<double>(val(x).size()));
    return Var{push(std::move(n))};
  }

  // v[K] -> [R,K] (v repeated as rows)
  Var repeat_rows(Var v, int r) {
    const Tensor& V = val(v);
    if (V.rank() != 1) throw ShapeError("repeat_rows expects rank-1");
    const int k = V.dim(0);
    Node n = unary(Op::RepeatRows, v);
    n.a0 = r;
    n.value = Tensor({r, k});
    for (int i = 0; i < r; ++i)
      std::memcpy(&n.value.data[static_cast<std::size_t>(i) * k], V.data.data(),
                  sizeof(double) * static_cast<std::size_t>(k));
    return Var{push(std::move(n))};
  }

  // v[K] -> [K,C] (v repeated as columns)
  Var repeat_cols(Var v, int c) {
    const Tensor& V = val(v);
    if (V.rank() != 1) throw ShapeError("repeat_cols expects rank-1");
    const int k = V.dim(0);
    Node n = unary(Op::RepeatCols, v);
    n.a0 = c;
    n.value = Tensor({k, c});
    for (int i = 0; i < k; ++i) {
      const double x = V[i];
      double* row = &n.value.data[static_cast<std::size_t>(i) * c];
      for (int j = 0; j < c; ++j) row[j] = x;
    }
    return Var{push(std::move(n))};
  }

  Var broadcast_scalar(Var s, int k) {
    const Tensor& S = val(s);
    if (S.size() != 1) throw ShapeError("broadcast_scalar expects a scalar");
    Node n = unary(Op::BroadcastScalar, s);
    n.value = Tensor::full({k}, S[0]);
    return Var{push(std::move(n))};
  }

  Var stack0(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("stack0 of nothing");
    const Tensor& first = val(xs[0]);
    Node n = make(Op::Stack0, xs);
    std::vector<int> oshape;
    oshape.push_back(static_cast<int>(xs.size()));
    for (int d : first.shape) oshape.push_back(d);
    n.value = Tensor(oshape);
    const long long chunk = first.size();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Tensor& t = val(xs[i]);
      if (!t.same_shape(first)) throw ShapeError("stack0 shape mismatch");
      std::memcpy(&n.value.data[i * static_cast<std::size_t>(chunk)], t.data.data(),
                  sizeof(double) * static_cast<std::size_t>(chunk));
    }
    return Var{push(std::move(n))};
  }

  Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols of nothing");
    const int rows = val(xs[0]).dim(0);
    int cols = 0;
    for (Var v : xs) {
      const Tensor& t = val(v);
      if (t.rank() != 2 || t.dim(0) != rows) throw ShapeError("concat_cols shape mismatch");
      cols += t.dim(1);
    }
    Node n = make(Op::ConcatCols, xs);
    n.value = Tensor({rows, cols});
    int off = 0;
    for (Var v : xs) {
      const Tensor& t = val(v);
      const int c = t.dim(1);
      for (int r = 0; r < rows; ++r)
        std::memcpy(&n.value.data[static_cast<std::size_t>(r) * cols + off],
                    &t.data[static_cast<std::size_t>(r) * c], sizeof(double) * c);
      off += c;
    }
    return Var{push(std::move(n))};
  }

  // One entry of a rank-2 tensor as a scalar node.
  Var pick2(Var x, int i, int j) {
    const Tensor& X = val(x);
    if (X.rank() != 2 || i < 0 || i >= X.dim(0) || j < 0 || j >= X.dim(1))
      throw ShapeError("pick2 out of range");
    Node n = unary(Op::Pick2, x);
    n.a0 = i;
    n.a1 = j;
    n.value = Tensor::scalar(X.at2(i, j));
    return Var{push(std::move(n))};
  }

  Var reshape(Var x, std::vector<int> shape) {
    const Tensor& X = val(x);
    if (Tensor::numel(shape) != X.size()) throw ShapeError("reshape numel mismatch");
    Node n = unary(Op::Reshape, x);
    n.value = Tensor(std::move(shape), X.data);
    return Var{push(std::move(n))};
  }

  Var permute3(Var x, int p0, int p1, int p2) {
    const Tensor& X = val(x);
    if (X.rank() != 3) throw ShapeError("permute3 expects rank-3");
    const int perm[3] = {p0, p1, p2};
    int os[3];
    for (int i = 0; i < 3; ++i) os[i] = X.dim(perm[i]);
    Node n = unary(Op::Permute3, x);
    n.a0 = p0;
    n.a1 = p1;
    n.a2 = p2;
    n.value = Tensor({os[0], os[1], os[2]});
    const int d1 = X.dim(1), d2 = X.dim(2);
    for (int i = 0; i < os[0]; ++i)
      for (int j = 0; j < os[1]; ++j)
        for (int k = 0; k < os[2]; ++k) {
          int src[3];
          src[perm[0]] = i;
          src[perm[1]] = j;
          src[perm[2]] = k;
          n.value.data[(static_cast<std::size_t>(i) * os[1] + j) * os[2] + k] =
              X.data[(static_cast<std::size_t>(src[0]) * d1 + src[1]) * d2 + src[2]];
        }
    return Var{push(std::move(n))};
  }

  Var mul_scalar_var(Var x, Var s) {
    const Tensor& S = val(s);
    if (S.size() != 1) throw ShapeError("mul_scalar_var expects scalar second arg");
    Node n = make(Op::MulScalarVar, {x, s});
    n.value = val(x);
    const double sv = S[0];
    for (double& v : n.value.data) v *= sv;
    return Var{push(std::move(n))};
  }

  // out_i = (1/N) * sum_{j != i} (psi_i . phi_j) * u_j
  // The inner sum over j is evaluated in a canonical (value-sorted) order so
  // the result is bit-identical under any permutation of the N elements.
  Var relation_mix(Var psi, Var phi, Var u) {
    const Tensor& P = val(psi);
    const Tensor& Q = val(phi);
    const Tensor& U = val(u);
    if (P.rank() != 2 || Q.rank() != 2 || U.rank() != 2 || P.dim(0) != Q.dim(0) ||
        P.dim(0) != U.dim(0) || P.dim(1) != Q.dim(1))
      throw ShapeError("relation_mix shape mismatch");
    const int n = P.dim(0), k = P.dim(1), d = U.dim(1);
    Node nd = make(Op::RelationMix, {psi, phi, u});
    nd.value = Tensor({n, d});
    nd.stash = Tensor({n, n});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double* pi = &P.data[static_cast<std::size_t>(i) * k];
        const double* qj = &Q.data[static_cast<std::size_t>(j) * k];
        double acc = 0.0;
        for (int kk = 0; kk < k; ++kk) acc += pi[kk] * qj[kk];
        nd.stash.at2(i, j) = acc;
      }
    std::vector<double> terms;
    terms.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      for (int dd = 0; dd < d; ++dd) {
        terms.clear();
        for (int j = 0; j < n; ++j) {
          if (j == i) continue;
          terms.push_back(nd.stash.at2(i, j) * U.at2(j, dd));
        }
        std::sort(terms.begin(), terms.end(), [](double a, double b) {
          return detail::sort_key(a) < detail::sort_key(b);
        });
        double acc = 0.0;
        for (double t : terms) acc += t;
        nd.value.at2(i, dd) = acc / static_cast<double>(n);
      }
    return Var{push(std::move(nd))};
  }

  // Mean cross-entropy of row-wise softmax against integer labels.
  Var softmax_xent(Var logits, std::vector<int> labels) {
    const Tensor& X = val(logits);
    if (X.rank() != 2 || static_cast<std::size_t>(X.dim(0)) != labels.size())
      throw ShapeError("softmax_xent label count mismatch");
    const int b = X.dim(0), k = X.dim(1);
    Node n = unary(Op::SoftmaxXent, logits);
    n.labels = std::move(labels);
    n.stash = Tensor({b, k});
    double loss = 0.0;
    for (int i = 0; i < b; ++i) {
      const double* row = &X.data[static_cast<std::size_t>(i) * k];
      double mx = row[0];
      for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
      const double lse = mx + std::log(z);
      for (int j = 0; j < k; ++j) n.stash.at2(i, j) = std::exp(row[j] - lse);
      const int lab = n.labels[static_cast<std::size_t>(i)];
      if (lab < 0 || lab >= k) throw ShapeError("softmax_xent label out of range");
      loss += lse - row[lab];
    }
    n.value = Tensor::scalar(loss / b);
    return Var{push(std::move(n))};
  }

  // ---- Differentiable rasterization primitives (pixel-space inputs) ----

  // F(x,y) = tent(x - xc) * tent(y - yc); at most 4 nonzero pixels.
  Var render_point_px(Var xc, Var yc, int w, int h) {
    require_scalar(xc, "render_point");
    require_scalar(yc, "render_point");
    Node n = make(Op::RenderPoint, {xc, yc});
    n.a0 = w;
    n.a1 = h;
    n.value = Tensor({w, h});
    const double px = val(xc)[0], py = val(yc)[0];
    note_lattice_kink(px, w);
    note_lattice_kink(py, h);
    const int x0 = std::max(0, static_cast<int>(std::ceil(px - 1.0)));
    const int x1 = std::min(w - 1, static_cast<int>(std::floor(px + 1.0)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(py - 1.0)));
    const int y1 = std::min(h - 1, static_cast<int>(std::floor(py + 1.0)));
    for (int x = x0; x <= x1; ++x)
      for (int y = y0; y <= y1; ++y)
        n.value.data[static_cast<std::size_t>(x) * h + y] =
            detail::tent(x - px) * detail::tent(y - py);
    return Var{push(std::move(n))};
  }

  // Eq-style wireframe rectangle: max of the four edge terms
  //   k(x-l) b(y-t) b(b-y), k(x-r) b(y-t) b(b-y),
  //   k(y-t) b(x-l) b(r-x), k(y-b) b(x-l) b(r-x)
  // with tent k and clamp01 b. Corners must already be canonical (l<=r, t<=b).
  Var render_rect_px(Var l, Var t, Var r, Var b, int w, int h) {
    for (Var v : {l, t, r, b}) require_scalar(v, "render_rect");
    Node n = make(Op::RenderRect, {l, t, r, b});
    n.a0 = w;
    n.a1 = h;
    n.value = Tensor({w, h});
    n.aux.assign(static_cast<std::size_t>(w) * h, 0);
    const double lv = val(l)[0], tv = val(t)[0], rv = val(r)[0], bv = val(b)[0];
    for (int x = 0; x < w; ++x)
      for (int y = 0; y < h; ++y) {
        const double kxl = detail::tent(x - lv), kxr = detail::tent(x - rv);
        const double kyt = detail::tent(y - tv), kyb = detail::tent(y - bv);
        const double gy = detail::clamp01(y - tv) * detail::clamp01(bv - y);
        const double gx = detail::clamp01(x - lv) * detail::clamp01(rv - x);
        const double terms[4] = {kxl * gy, kxr * gy, kyt * gx, kyb * gx};
        int arg = 0;
        double best = terms[0], second = -std::numeric_limits<double>::infinity();
        for (int j = 1; j < 4; ++j) {
          if (terms[j] > best) {
            second = best;
            best = terms[j];
            arg = j;
          } else if (terms[j] > second) {
            second = terms[j];
          }
        }
        if (track_kinks) {
          note_kink(best - second);
          note_kink(detail::tent_kink_gap(x - lv));
          note_kink(detail::tent_kink_gap(x - rv));
          note_kink(detail::tent_kink_gap(y - tv));
          note_kink(detail::tent_kink_gap(y - bv));
          note_kink(detail::clamp01_kink_gap(y - tv));
          note_kink(detail::clamp01_kink_gap(bv - y));
          note_kink(detail::clamp01_kink_gap(x - lv));
          note_kink(detail::clamp01_kink_gap(rv - x));
        }
        n.value.data[static_cast<std::size_t>(x) * h + y] = best;
        n.aux[static_cast<std::size_t>(x) * h + y] = arg;
      }
    return Var{push(std::move(n))};
  }

  // Wireframe triangle from three vertices (x1,y1,x2,y2,x3,y3 in pixel space).
  // Each edge term is a tent of the vertical distance to the edge line, gated
  // by the clamp01 horizontal extent of the edge. Near-vertical edges use the
  // transposed (y-parameterized) form; near-degenerate edges collapse to the
  // point kernel at the edge's first vertex.
  Var render_triangle_px(const std::array<Var, 6>& v, int w, int h) {
    for (Var x : v) require_scalar(x, "render_triangle");
    Node n = make(Op::RenderTriangle, {v[0], v[1], v[2], v[3], v[4], v[5]});
    n.a0 = w;
    n.a1 = h;
    n.value = Tensor({w, h});
    double c[6];
    for (int i = 0; i < 6; ++i) c[i] = val(v[i])[0];
    const double eps = kVerticalEps * (w - 1);
    static constexpr int kEdgeA[3] = {0, 0, 1};
    static constexpr int kEdgeB[3] = {1, 2, 2};
    // aux: [branch0..branch2, argmax per pixel]
    n.aux.assign(3 + static_cast<std::size_t>(w) * h, 0);
    double sl[3] = {0, 0, 0};
    for (int e = 0; e < 3; ++e) {
      const double xa = c[2 * kEdgeA[e]], ya = c[2 * kEdgeA[e] + 1];
      const double xb = c[2 * kEdgeB[e]], yb = c[2 * kEdgeB[e] + 1];
      int br;
      if (std::fabs(xb - xa) >= eps) {
        br = 0;
        sl[e] = (yb - ya) / (xb - xa);
      } else if (std::fabs(yb - ya) >= eps) {
        br = 1;
        sl[e] = (xb - xa) / (yb - ya);
      } else {
        br = 2;
      }
      n.aux[static_cast<std::size_t>(e)] = br;
      if (track_kinks) {
        note_kink(std::fabs(std::fabs(xb - xa) - eps));
        note_kink(std::fabs(std::fabs(yb - ya) - eps));
      }
    }
    for (int x = 0; x < w; ++x)
      for (int y = 0; y < h; ++y) {
        double terms[3];
        for (int e = 0; e < 3; ++e) {
          const double xa = c[2 * kEdgeA[e]], ya = c[2 * kEdgeA[e] + 1];
          const double xb = c[2 * kEdgeB[e]], yb = c[2 * kEdgeB[e] + 1];
          const int br = n.aux[static_cast<std::size_t>(e)];
          double term;
          if (br == 0) {
            const double u = y - sl[e] * (x - xa) - ya;
            const double xmin = std::min(xa, xb), xmax = std::max(xa, xb);
            term = detail::tent(u) * detail::clamp01(x - xmin) * detail::clamp01(xmax - x);
            if (track_kinks) {
              note_kink(detail::tent_kink_gap(u));
              note_kink(detail::clamp01_kink_gap(x - xmin));
              note_kink(detail::clamp01_kink_gap(xmax - x));
            }
          } else if (br == 1) {
            const double u = x - sl[e] * (y - ya) - xa;
            const double ymin = std::min(ya, yb), ymax = std::max(ya, yb);
            term = detail::tent(u) * detail::clamp01(y - ymin) * detail::clamp01(ymax - y);
            if (track_kinks) {
              note_kink(detail::tent_kink_gap(u));
              note_kink(detail::clamp01_kink_gap(y - ymin));
              note_kink(detail::clamp01_kink_gap(ymax - y));
            }
          } else {
            term = detail::tent(x - xa) * detail::tent(y - ya);
            if (track_kinks) {
              note_kink(detail::tent_kink_gap(x - xa));
              note_kink(detail::tent_kink_gap(y - ya));
            }
          }
          terms[e] = term;
        }
        int arg = 0;
        double best = terms[0], second = -std::numeric_limits<double>::infinity();
        for (int j = 1; j < 3; ++j) {
          if (terms[j] > best) {
            second = best;
            best = terms[j];
            arg = j;
          } else if (terms[j] > second) {
            second = terms[j];
          }
        }
        note_kink(best - second);
        n.value.data[static_cast<std::size_t>(x) * h + y] = best;
        n.aux[3 + static_cast<std::size_t>(x) * h + y] = arg;
      }
    return Var{push(std::move(n))};
  }

  // I(x,y,c) = max_i p[i][c] * F_i(x,y); ties break to the lowest element
  // index. p is [N,M]; each F_i is [W,H]; output [W,H,M].
  Var compose_channels(Var p, const std::vector<Var>& maps) {
    const Tensor& P = val(p);
    if (P.rank() != 2 || static_cast<std::size_t>(P.dim(0)) != maps.size())
      throw ShapeError("compose_channels element count mismatch");
    if (maps.empty()) throw ShapeError("compose_channels needs elements");
    const Tensor& f0 = val(maps[0]);
    if (f0.rank() != 2) throw ShapeError("compose_channels maps must be rank-2");
    const int n = P.dim(0), m = P.dim(1), w = f0.dim(0), h = f0.dim(1);
    std::vector<Var> ins;
    ins.reserve(maps.size() + 1);
    ins.push_back(p);
    for (Var v : maps) {
      if (!val(v).same_shape(f0)) throw ShapeError("compose_channels map shape mismatch");
      ins.push_back(v);
    }
    Node nd = make(Op::ComposeChannels, ins);
    nd.a0 = n;
    nd.a1 = m;
    nd.value = Tensor({w, h, m});
    nd.aux.assign(static_cast<std::size_t>(w) * h * m, 0);
    std::vector<const double*> fp(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) fp[static_cast<std::size_t>(i)] = val(maps[static_cast<std::size_t>(i)]).data.data();
    for (int x = 0; x < w; ++x)
      for (int y = 0; y < h; ++y) {
        const std::size_t pix = static_cast<std::size_t>(x) * h + y;
        double* out = &nd.value.data[pix * m];
        int* arg = &nd.aux[pix * m];
        for (int cc = 0; cc < m; ++cc) {
          double best = P.at2(0, cc) * fp[0][pix];
          double second = -std::numeric_limits<double>::infinity();
          int bi = 0;
          for (int i = 1; i < n; ++i) {
            const double t = P.at2(i, cc) * fp[static_cast<std::size_t>(i)][pix];
            if (t > best) {
              second = best;
              best = t;
              bi = i;
            } else if (t > second) {
              second = t;
            }
          }
          if (n > 1) note_kink(best - second);
          out[cc] = best;
          arg[cc] = bi;
        }
      }
    return Var{push(std::move(nd))};
  }

  // Reverse accumulation from a scalar loss. Leaves never touched by the loss
  // keep zero gradients (see gradients()).
  void backward(Var loss) {
    Node& ln = nodes_[loss.id];
    if (ln.value.size() != 1) throw ShapeError("backward expects a scalar loss");
    if (!ln.requires_grad) return;
    touch(loss.id);
    nodes_[loss.id].grad[0] += 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.requires_grad || n.op == Op::Leaf) continue;
      backprop(n);
    }
  }

  // Gradients of all named leaves; zeros for leaves the loss never reached.
  std::map<std::string, Tensor> gradients() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : named_) {
      const Node& n = nodes_[id];
      out[name] = n.has_grad ? n.grad : Tensor(n.value.shape);
    }
    return out;
  }

 private:
  static constexpr double kVerticalEps = 1e-6;

  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> named_;
  double min_kink_gap_ = std::numeric_limits<double>::infinity();

  const Tensor& val(Var v) const { return nodes_[v.id].value; }

  void require_scalar(Var v, const char* who) const {
    if (val(v).size() != 1) throw ShapeError(std::string(who) + " expects scalar coordinate nodes");
  }

  void note_kink(double gap) {
    if (track_kinks && gap < min_kink_gap_) min_kink_gap_ = gap;
  }

  // Distance of a pixel-space coordinate to the nearest integer lattice point,
  // which is where the point kernel's tent kinks sit.
  void note_lattice_kink(double p, int extent) {
    if (!track_kinks) return;
    if (p < -2.0 || p > extent + 1.0) return;
    const double f = p - std::floor(p);
    note_kink(std::min(f, 1.0 - f));
  }

  Node make(Op op, const std::vector<Var>& ins) {
    Node n;
    n.op = op;
    n.inputs.reserve(ins.size());
    for (Var v : ins) {
      if (!v.valid()) throw ShapeError("invalid input var");
      n.inputs.push_back(v.id);
      if (nodes_[v.id].requires_grad) n.requires_grad = true;
    }
    return n;
  }

  Node unary(Op op, Var x) { return make(op, {x}); }

  Node binary_make(Op op, Var a, Var b) { return make(op, {a, b}); }

  Var binary(Op op, Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) throw ShapeError("elementwise shape mismatch");
    Node n = binary_make(op, a, b);
    n.value = Tensor(A.shape);
    for (long long i = 0; i < A.size(); ++i) {
      const double x = A[i], y = B[i];
      double o = 0.0;
      switch (op) {
        case Op::Add: o = x + y; break;
        case Op::Sub: o = x - y; break;
        case Op::Mul: o = x * y; break;
        case Op::Minimum:
          o = (x <= y) ? x : y;
          note_kink(std::fabs(x - y));
          break;
        case Op::Maximum:
          o = (x >= y) ? x : y;
          note_kink(std::fabs(x - y));
          break;
        default: throw ShapeError("not a binary op");
      }
      n.value[i] = o;
    }
    return Var{push(std::move(n))};
  }

  int push(Node n) {
    if (finite_checks && !n.value.all_finite())
      throw Error("non-finite value produced by graph op");
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void touch(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape);
      n.has_grad = true;
    }
  }

  Tensor& gref(int id) {
    touch(id);
    return nodes_[id].grad;
  }

  bool wants(int id) const { return nodes_[id].requires_grad; }

  void backprop(Node& n) {
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add: {
        for (int s = 0; s < 2; ++s)
          if (wants(n.inputs[s])) {
            Tensor& d = gref(n.inputs[s]);
            for (long long i = 0; i < g.size(); ++i) d[i] += g[i];
          }
        break;
      }
      case Op::Sub: {
        if (wants(n.inputs[0])) {
          Tensor& d = gref(n.inputs[0]);
          for (long long i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (wants(n.inputs[1])) {
          Tensor& d = gref(n.inputs[1]);
          for (long long i = 0; i < g.size(); ++i) d[i] -= g[i];
        }
        break;
      }
      case Op::Mul: {
        const Tensor& a = nodes_[n.inputs[0]].value;
        const Tensor& b = nodes_[n.inputs[1]].value;
        if (wants(n.inputs[0])) {
          Tensor& d = gref(n.inputs[0]);
          for (long long i = 0; i < g.size(); ++i) d[i] += g[i] * b[i];
        }
        if (wants(n.inputs[1])) {
          Tensor& d = gref(n.inputs[1]);
          for (long long i = 0; i < g.size(); ++i) d[i] += g[i] * a[i];
        }
        break;
      }
      case Op::Minimum:
      case Op::Maximum: {
        const Tensor& a = nodes_[n.inputs[0]].value;
        const Tensor& b = nodes_[n.inputs[1]].value;
        const bool is_min = n.op == Op::Minimum;
        for (long long i = 0; i < g.size(); ++i) {
          const bool first = is_min ? (a[i] <= b[i]) : (a[i] >= b[i]);
          const int tgt = first ? n.inputs[0] : n.inputs[1];
          if (wants(tgt)) gref(tgt)[i] += g[i];
        }
        break;
      }
      case Op::ScalarMulC: {
        if (wants(n.inputs[0])) {
          const double c = n.stash[0];
          Tensor& d = gref(n.inputs[0]);
          for (long long i = 0; i < g.size(); ++i) d[i] += g[i] * c;
        }
        break;
      }
      case Op::ScalarAddC: {
        if (wants(n.inputs[0])) {
          Tensor& d = gref(n.inputs[0]);
          for (long long i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        break;
      }
      case Op::Pointwise: {
        if (!wants(n.inputs[0])) break;
        const Tensor& x = nodes_[n.inputs[0]].value;
        Tensor& d = gref(n.inputs[0]);
        for (long long i = 0; i < g.size(); ++i) {
          const double v = x[i];
          double dv = 0.0;
          switch (n.pw) {
            case Pw::Relu: dv = v > 0.0 ? 1.0 : 0.0; break;
            case Pw::Sigmoid: {
              const double s = n.value[i];
              dv = s * (1.0 - s);
              break;
            }
            case Pw::Abs: dv = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); break;
            case Pw::Clamp01: dv = detail::clamp01_grad(v); break;
            case Pw::Tent: dv = detail::tent_grad(v); break;
            case Pw::Softplus: dv = detail::sigmoid(v); break;
          }
          d[i] += g[i] * dv;
        }
        break;
      }
      case Op::MatMul: {
        const Tensor& A = nodes_[n.inputs[0]].value;
        const Tensor& B = nodes_[n.inputs[1]].value;
        const int m = A.dim(0), k = A.dim(1), c = B.dim(1);
        if (wants(n.inputs[0])) {
          Tensor& dA = gref(n.inputs[0]);
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              const double* gr = &g.data[static_cast<std::size_t>(i) * c];
              const double* br = &B.data[static_cast<std::size_t>(kk) * c];
              double acc = 0.0;
              for (int j = 0; j < c; ++j) acc += gr[j] * br[j];
              dA.data[static_cast<std::size_t>(i) * k + kk] += acc;
            }
        }
        if (wants(n.inputs[1])) {
          Tensor& dB = gref(n.inputs[1]);
          for (int kk = 0; kk < k; ++kk)
            for (int i = 0; i < m; ++i) {
              const double a = A.data[static_cast<std::size_t>(i) * k + kk];
              if (a == 0.0) continue;
              const double* gr = &g.data[static_cast<std::size_t>(i) * c];
              double* dr = &dB.data[static_cast<std::size_t>(kk) * c];
              for (int j = 0; j < c; ++j) dr[j] += a * gr[j];
            }
        }
        break;
      }
      case Op::MatMulNT: {
        const Tensor& A = nodes_[n.inputs[0]].value;
        const Tensor& B = nodes_[n.inputs[1]].value;
        const int m = A.dim(0), k = A.dim(1), c = B.dim(0);
        if (wants(n.inputs[0])) {
          Tensor& dA = gref(n.inputs[0]);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < c; ++j) {
              const double gv = g.data[static_cast<std::size_t>(i) * c + j];
              if (gv == 0.0) continue;
              const double* br = &B.data[static_cast<std::size_t>(j) * k];
              double* dr = &dA.data[static_cast<std::size_t>(i) * k];
              for (int kk = 0; kk < k; ++kk) dr[kk] += gv * br[kk];
            }
        }
        if (wants(n.inputs[1])) {
          Tensor& dB = gref(n.inputs[1]);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < c; ++j) {
              const double gv = g.data[static_cast<std::size_t>(i) * c + j];
              if (gv == 0.0) continue;
              const double* ar = &A.data[static_cast<std::size_t>(i) * k];
              double* dr = &dB.data[static_cast<std::size_t>(j) * k];
              for (int kk = 0; kk < k; ++kk) dr[kk] += gv * ar[kk];
            }
        }
        break;
      }
      case Op::AddRowBias: {
        const int d = nodes_[n.inputs[1]].value.dim(0);
        if (wants(n.inputs[0])) {
          Tensor& dx = gref(n.inputs[0]);
          for (long long i = 0; i < g.size(); ++i) dx[i] += g[i];
        }
        if (wants(n.inputs[1])) {
          Tensor& db = gref(n.inputs[1]);
          for (long long i = 0; i < g.size(); ++i) db[i % d] += g[i];
        }
        break;
      }
      case Op::AddChanBias: {
        const Tensor& x = nodes_[n.inputs[0]].value;
        const int bs = x.dim(0), c = x.dim(1);
        const long long plane = static_cast<long long>(x.dim(2)) * x.dim(3);
        if (wants(n.inputs[0])) {
          Tensor& dx = gref(n.inputs[0]);
          for (long long i = 0; i < g.size(); ++i) dx[i] += g[i];
        }
        if (wants(n.inputs[1])) {
          Tensor& db = gref(n.inputs[1]);
          for (int bb = 0; bb < bs; ++bb)
            for (int cc = 0; cc < c; ++cc) {
              const double* gp = &g.data[(static_cast<std::size_t>(bb) * c + cc) * plane];
              double acc = 0.0;
              for (long long i = 0; i < plane; ++i) acc += gp[i];
              db[cc] += acc;
            }
        }
        break;
      }
      case Op::Conv2d: {
        const Tensor& X = nodes_[n.inputs[0]].value;
        const Tensor& K = nodes_[n.inputs[1]].value;
        const int stride = n.a0, pad = n.a1;
        const int bs = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
        const int co = K.dim(0), kh = K.dim(2), kw = K.dim(3);
        const int ho = n.value.dim(2), wo = n.value.dim(3);
        const bool wx = wants(n.inputs[0]);
        const bool wk = wants(n.inputs[1]);
        Tensor* dX = wx ? &gref(n.inputs[0]) : nullptr;
        Tensor* dK = wk ? &gref(n.inputs[1]) : nullptr;
        for (int b = 0; b < bs; ++b)
          for (int oc = 0; oc < co; ++oc) {
            const double* gp = &g.data[(static_cast<std::size_t>(b) * co + oc) * ho * wo];
            for (int ic = 0; ic < c; ++ic) {
              const double* xp = &X.data[(static_cast<std::size_t>(b) * c + ic) * h * w];
              const double* kp = &K.data[(static_cast<std::size_t>(oc) * c + ic) * kh * kw];
              double* dxp = wx ? &dX->data[(static_cast<std::size_t>(b) * c + ic) * h * w] : nullptr;
              double* dkp = wk ? &dK->data[(static_cast<std::size_t>(oc) * c + ic) * kh * kw] : nullptr;
              for (int r = 0; r < kh; ++r)
                for (int s = 0; s < kw; ++s) {
                  const double kv = kp[r * kw + s];
                  double kacc = 0.0;
                  for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + r - pad;
                    if (iy < 0 || iy >= h) continue;
                    const double* grow = gp + static_cast<std::size_t>(oy) * wo;
                    const double* xrow = xp + static_cast<std::size_t>(iy) * w;
                    double* dxrow = wx ? dxp + static_cast<std::size_t>(iy) * w : nullptr;
                    for (int ox = 0; ox < wo; ++ox) {
                      const int ix = ox * stride + s - pad;
                      if (ix < 0 || ix >= w) continue;
                      const double gv = grow[ox];
                      if (gv == 0.0) continue;
                      if (wx) dxrow[ix] += kv * gv;
                      if (wk) kacc += xrow[ix] * gv;
                    }
                  }
                  if (wk) dkp[r * kw + s] += kacc;
                }
            }
          }
        break;
      }
      case Op::ReduceAxis: {
        if (!wants(n.inputs[0])) break;
        const Tensor& x = nodes_[n.inputs[0]].value;
        Tensor& dx = gref(n.inputs[0]);
        const int axis = n.a0;
        long long pre = 1, post = 1;
        for (int i = 0; i < axis; ++i) pre *= x.dim(i);
        for (int i = axis + 1; i < x.rank(); ++i) post *= x.dim(i);
        const int nred = x.dim(axis);
        for (long long p = 0; p < pre; ++p)
          for (long long q = 0; q < post; ++q) {
            const double gv = g[p * post + q];
            if (gv == 0.0) continue;
            double* base = &dx.data[static_cast<std::size_t>(p) * nred * post + q];
            switch (n.red) {
              case Red::Max:
                base[static_cast<std::size_t>(n.aux[static_cast<std::size_t>(p * post + q)]) * post] += gv;
                break;
              case Red::Sum:
                for (int j = 0; j < nred; ++j) base[static_cast<std::size_t>(j) * post] += gv;
                break;
              case Red::Mean: {
                const double s = gv / nred;
                for (int j = 0; j < nred; ++j) base[static_cast<std::size_t>(j) * post] += s;
                break;
              }
            }
          }
        break;
      }
      case Op::SumAll: {
        if (!wants(n.inputs[0])) break;
        Tensor& dx = gref(n.inputs[0]);
        const double gv = g[0];
        for (long long i = 0; i < dx.size(); ++i) dx[i] += gv;
        break;
      }
      case Op::MeanAll: {
        if (!wants(n.inputs[0])) break;
        Tensor& dx = gref(n.inputs[0]);
        const double gv = g[0] / static_cast<double>(dx.size());
        for (long long i = 0; i < dx.size(); ++i) dx[i] += gv;
        break;
      }
      case Op::RepeatRows: {
        if (!wants(n.inputs[0])) break;
        Tensor& dv = gref(n.inputs[0]);
        const int k = dv.dim(0), r = n.a0;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < k; ++j) dv[j] += g.data[static_cast<std::size_t>(i) * k + j];
        break;
      }
      case Op::RepeatCols: {
        if (!wants(n.inputs[0])) break;
        Tensor& dv = gref(n.inputs[0]);
        const int k = dv.dim(0), c = n.a0;
        for (int i = 0; i < k; ++i) {
          const double* gr = &g.data[static_cast<std::size_t>(i) * c];
          double acc = 0.0;
          for (int j = 0; j < c; ++j) acc += gr[j];
          dv[i] += acc;
        }
        break;
      }
      case Op::BroadcastScalar: {
        if (!wants(n.inputs[0])) break;
        double acc = 0.0;
        for (long long i = 0; i < g.size(); ++i) acc += g[i];
        gref(n.inputs[0])[0] += acc;
        break;
      }
      case Op::Stack0: {
        const long long chunk = g.size() / static_cast<long long>(n.inputs.size());
        for (std::size_t s = 0; s < n.inputs.size(); ++s) {
          if (!wants(n.inputs[s])) continue;
          Tensor& d = gref(n.inputs[s]);
          const double* gp = &g.data[s * static_cast<std::size_t>(chunk)];
          for (long long i = 0; i < chunk; ++i) d[i] += gp[i];
        }
        break;
      }
      case Op::ConcatCols: {
        const int rows = n.value.dim(0), cols = n.value.dim(1);
        int off = 0;
        for (std::size_t s = 0; s < n.inputs.size(); ++s) {
          const Tensor& t = nodes_[n.inputs[s]].value;
          const int c = t.dim(1);
          if (wants(n.inputs[s])) {
            Tensor& d = gref(n.inputs[s]);
            for (int r = 0; r < rows; ++r)
              for (int j = 0; j < c; ++j)
                d.data[static_cast<std::size_t>(r) * c + j] +=
                    g.data[static_cast<std::size_t>(r) * cols + off + j];
          }
          off += c;
        }
        break;
      }
      case Op::Pick2: {
        if (!wants(n.inputs[0])) break;
        Tensor& d = gref(n.inputs[0]);
        d.at2(n.a0, n.a1) += g[0];
        break;
      }
      case Op::Reshape: {
        if (!wants(n.inputs[0])) break;
        Tensor& d = gref(n.inputs[0]);
        for (long long i = 0; i < g.size(); ++i) d[i] += g[i];
        break;
      }
      case Op::Permute3: {
        if (!wants(n.inputs[0])) break;
        const Tensor& x = nodes_[n.inputs[0]].value;
        Tensor& d = gref(n.inputs[0]);
        const int perm[3] = {n.a0, n.a1, n.a2};
        const int os1 = n.value.dim(1), os2 = n.value.dim(2);
        const int d1 = x.dim(1), d2 = x.dim(2);
        for (int i = 0; i < n.value.dim(0); ++i)
          for (int j = 0; j < os1; ++j)
            for (int k = 0; k < os2; ++k) {
              int src[3];
              src[perm[0]] = i;
              src[perm[1]] = j;
              src[perm[2]] = k;
              d.data[(static_cast<std::size_t>(src[0]) * d1 + src[1]) * d2 + src[2]] +=
                  g.data[(static_cast<std::size_t>(i) * os1 + j) * os2 + k];
            }
        break;
      }
      case Op::MulScalarVar: {
        const Tensor& x = nodes_[n.inputs[0]].value;
        const double sv = nodes_[n.inputs[1]].value[0];
        if (wants(n.inputs[0])) {
          Tensor& dx = gref(n.inputs[0]);
          for (long long i = 0; i < g.size(); ++i) dx[i] += g[i] * sv;
        }
        if (wants(n.inputs[1])) {
          double acc = 0.0;
          for (long long i = 0; i < g.size(); ++i) acc += g[i] * x[i];
          gref(n.inputs[1])[0] += acc;
        }
        break;
      }
      case Op::RelationMix: {
        const Tensor& P = nodes_[n.inputs[0]].value;
        const Tensor& Q = nodes_[n.inputs[1]].value;
        const Tensor& U = nodes_[n.inputs[2]].value;
        const Tensor& H = n.stash;
        const int nn = P.dim(0), k = P.dim(1), d = U.dim(1);
        const double inv = 1.0 / nn;
        Tensor dH({nn, nn});
        for (int i = 0; i < nn; ++i)
          for (int j = 0; j < nn; ++j) {
            if (j == i) continue;
            double acc = 0.0;
            const double* gr = &g.data[static_cast<std::size_t>(i) * d];
            const double* ur = &U.data[static_cast<std::size_t>(j) * d];
            for (int dd = 0; dd < d; ++dd) acc += gr[dd] * ur[dd];
            dH.at2(i, j) = acc * inv;
          }
        if (wants(n.inputs[2])) {
          Tensor& dU = gref(n.inputs[2]);
          for (int j = 0; j < nn; ++j)
            for (int i = 0; i < nn; ++i) {
              if (i == j) continue;
              const double hv = H.at2(i, j) * inv;
              if (hv == 0.0) continue;
              const double* gr = &g.data[static_cast<std::size_t>(i) * d];
              double* dr = &dU.data[static_cast<std::size_t>(j) * d];
              for (int dd = 0; dd < d; ++dd) dr[dd] += hv * gr[dd];
            }
        }
        if (wants(n.inputs[0])) {
          Tensor& dP = gref(n.inputs[0]);
          for (int i = 0; i < nn; ++i)
            for (int j = 0; j < nn; ++j) {
              if (j == i) continue;
              const double hg = dH.at2(i, j);
              if (hg == 0.0) continue;
              const double* qr = &Q.data[static_cast<std::size_t>(j) * k];
              double* dr = &dP.data[static_cast<std::size_t>(i) * k];
              for (int kk = 0; kk < k; ++kk) dr[kk] += hg * qr[kk];
            }
        }
        if (wants(n.inputs[1])) {
          Tensor& dQ = gref(n.inputs[1]);
          for (int i = 0; i < nn; ++i)
            for (int j = 0; j < nn; ++j) {
              if (j == i) continue;
              const double hg = dH.at2(i, j);
              if (hg == 0.0) continue;
              const double* pr = &P.data[static_cast<std::size_t>(i) * k];
              double* dr = &dQ.data[static_cast<std::size_t>(j) * k];
              for (int kk = 0; kk < k; ++kk) dr[kk] += hg * pr[kk];
            }
        }
        break;
      }
      case Op::SoftmaxXent: {
        if (!wants(n.inputs[0])) break;
        Tensor& dx = gref(n.inputs[0]);
        const int b = dx.dim(0), k = dx.dim(1);
        const double gv = g[0] / b;
        for (int i = 0; i < b; ++i)
          for (int j = 0; j < k; ++j) {
            double p = n.stash.at2(i, j);
            if (j == n.labels[static_cast<std::size_t>(i)]) p -= 1.0;
            dx.at2(i, j) += gv * p;
          }
        break;
      }
      case Op::RenderPoint: {
        const double px = nodes_[n.inputs[0]].value[0];
        const double py = nodes_[n.inputs[1]].value[0];
        const int w = n.a0, h = n.a1;
        double dxc = 0.0, dyc = 0.0;
        const int x0 = std::max(0, static_cast<int>(std::ceil(px - 1.0)));
        const int x1 = std::min(w - 1, static_cast<int>(std::floor(px + 1.0)));
        const int y0 = std::max(0, static_cast<int>(std::ceil(py - 1.0)));
        const int y1 = std::min(h - 1, static_cast<int>(std::floor(py + 1.0)));
        for (int x = x0; x <= x1; ++x)
          for (int y = y0; y <= y1; ++y) {
            const double gv = g.data[static_cast<std::size_t>(x) * h + y];
            if (gv == 0.0) continue;
            const double kx = detail::tent(x - px), ky = detail::tent(y - py);
            dxc += gv * (-detail::tent_grad(x - px)) * ky;
            dyc += gv * kx * (-detail::tent_grad(y - py));
          }
        if (wants(n.inputs[0])) gref(n.inputs[0])[0] += dxc;
        if (wants(n.inputs[1])) gref(n.inputs[1])[0] += dyc;
        break;
      }
      case Op::RenderRect: {
        const double lv = nodes_[n.inputs[0]].value[0];
        const double tv = nodes_[n.inputs[1]].value[0];
        const double rv = nodes_[n.inputs[2]].value[0];
        const double bv = nodes_[n.inputs[3]].value[0];
        const int w = n.a0, h = n.a1;
        double acc[4] = {0, 0, 0, 0};  // d(l,t,r,b)
        for (int x = 0; x < w; ++x)
          for (int y = 0; y < h; ++y) {
            const double gv = g.data[static_cast<std::size_t>(x) * h + y];
            if (gv == 0.0) continue;
            switch (n.aux[static_cast<std::size_t>(x) * h + y]) {
              case 0: {  // k(x-l) b(y-t) b(b-y)
                const double k = detail::tent(x - lv);
                const double c1 = detail::clamp01(y - tv), c2 = detail::clamp01(bv - y);
                acc[0] += gv * (-detail::tent_grad(x - lv)) * c1 * c2;
                acc[1] += gv * k * (-detail::clamp01_grad(y - tv)) * c2;
                acc[3] += gv * k * c1 * detail::clamp01_grad(bv - y);
                break;
              }
              case 1: {  // k(x-r) b(y-t) b(b-y)
                const double k = detail::tent(x - rv);
                const double c1 = detail::clamp01(y - tv), c2 = detail::clamp01(bv - y);
                acc[2] += gv * (-detail::tent_grad(x - rv)) * c1 * c2;
                acc[1] += gv * k * (-detail::clamp01_grad(y - tv)) * c2;
                acc[3] += gv * k * c1 * detail::clamp01_grad(bv - y);
                break;
              }
              case 2: {  // k(y-t) b(x-l) b(r-x)
                const double k = detail::tent(y - tv);
                const double c1 = detail::clamp01(x - lv), c2 = detail::clamp01(rv - x);
                acc[1] += gv * (-detail::tent_grad(y - tv)) * c1 * c2;
                acc[0] += gv * k * (-detail::clamp01_grad(x - lv)) * c2;
                acc[2] += gv * k * c1 * detail::clamp01_grad(rv - x);
                break;
              }
              case 3: {  // k(y-b) b(x-l) b(r-x)
                const double k = detail::tent(y - bv);
                const double c1 = detail::clamp01(x - lv), c2 = detail::clamp01(rv - x);
                acc[3] += gv * (-detail::tent_grad(y - bv)) * c1 * c2;
                acc[0] += gv * k * (-detail::clamp01_grad(x - lv)) * c2;
                acc[2] += gv * k * c1 * detail::clamp01_grad(rv - x);
                break;
              }
            }
          }
        for (int s = 0; s < 4; ++s)
          if (wants(n.inputs[s])) gref(n.inputs[s])[0] += acc[s];
        break;
      }
      case Op::RenderTriangle: {
        double c[6];
        for (int i = 0; i < 6; ++i) c[i] = nodes_[n.inputs[i]].value[0];
        const int w = n.a0, h = n.a1;
        static constexpr int kEdgeA[3] = {0, 0, 1};
        static constexpr int kEdgeB[3] = {1, 2, 2};
        double acc[6] = {0, 0, 0, 0, 0, 0};
        for (int x = 0; x < w; ++x)
          for (int y = 0; y < h; ++y) {
            const double gv = g.data[static_cast<std::size_t>(x) * h + y];
            if (gv == 0.0) continue;
            const int e = n.aux[3 + static_cast<std::size_t>(x) * h + y];
            const int ia = kEdgeA[e], ib = kEdgeB[e];
            const double xa = c[2 * ia], ya = c[2 * ia + 1];
            const double xb = c[2 * ib], yb = c[2 * ib + 1];
            const int br = n.aux[static_cast<std::size_t>(e)];
            if (br == 0) {
              const double ddx = xb - xa;
              const double s = (yb - ya) / ddx;
              const double u = y - s * (x - xa) - ya;
              const double k = detail::tent(u), kp = detail::tent_grad(u);
              const bool a_is_min = xa <= xb;
              const double xmin = a_is_min ? xa : xb, xmax = a_is_min ? xb : xa;
              const double g1 = detail::clamp01(x - xmin), g2 = detail::clamp01(xmax - x);
              const double gate = g1 * g2;
              const double du_dxa = -(s / ddx) * (x - xa) + s;
              const double du_dxb = (s / ddx) * (x - xa);
              const double du_dya = (x - xa) / ddx - 1.0;
              const double du_dyb = -(x - xa) / ddx;
              acc[2 * ia] += gv * kp * du_dxa * gate;
              acc[2 * ib] += gv * kp * du_dxb * gate;
              acc[2 * ia + 1] += gv * kp * du_dya * gate;
              acc[2 * ib + 1] += gv * kp * du_dyb * gate;
              const double dmin = gv * k * (-detail::clamp01_grad(x - xmin)) * g2;
              const double dmax = gv * k * g1 * detail::clamp01_grad(xmax - x);
              acc[2 * (a_is_min ? ia : ib)] += dmin;
              acc[2 * (a_is_min ? ib : ia)] += dmax;
            } else if (br == 1) {
              const double ddy = yb - ya;
              const double s = (xb - xa) / ddy;
              const double u = x - s * (y - ya) - xa;
              const double k = detail::tent(u), kp = detail::tent_grad(u);
              const bool a_is_min = ya <= yb;
              const double ymin = a_is_min ? ya : yb, ymax = a_is_min ? yb : ya;
              const double g1 = detail::clamp01(y - ymin), g2 = detail::clamp01(ymax - y);
              const double gate = g1 * g2;
              const double du_dya = -(s / ddy) * (y - ya) + s;
              const double du_dyb = (s / ddy) * (y - ya);
              const double du_dxa = (y - ya) / ddy - 1.0;
              const double du_dxb = -(y - ya) / ddy;
              acc[2 * ia + 1] += gv * kp * du_dya * gate;
              acc[2 * ib + 1] += gv * kp * du_dyb * gate;
              acc[2 * ia] += gv * kp * du_dxa * gate;
              acc[2 * ib] += gv * kp * du_dxb * gate;
              const double dmin = gv * k * (-detail::clamp01_grad(y - ymin)) * g2;
              const double dmax = gv * k * g1 * detail::clamp01_grad(ymax - y);
              acc[2 * (a_is_min ? ia : ib) + 1] += dmin;
              acc[2 * (a_is_min ? ib : ia) + 1] += dmax;
            } else {
              const double kx = detail::tent(x - xa), ky = detail::tent(y - ya);
              acc[2 * ia] += gv * (-detail::tent_grad(x - xa)) * ky;
              acc[2 * ia + 1] += gv * kx * (-detail::tent_grad(y - ya));
            }
          }
        for (int s = 0; s < 6; ++s)
          if (wants(n.inputs[s])) gref(n.inputs[s])[0] += acc[s];
        break;
      }
      case Op::ComposeChannels: {
        const Tensor& P = nodes_[n.inputs[0]].value;
        const int nn = n.a0, m = n.a1;
        const int w = n.value.dim(0), h = n.value.dim(1);
        const bool wp = wants(n.inputs[0]);
        Tensor* dP = wp ? &gref(n.inputs[0]) : nullptr;
        for (int x = 0; x < w; ++x)
          for (int y = 0; y < h; ++y) {
            const std::size_t pix = static_cast<std::size_t>(x) * h + y;
            for (int cc = 0; cc < m; ++cc) {
              const double gv = g.data[pix * m + cc];
              if (gv == 0.0) continue;
              const int i = n.aux[pix * m + cc];
              const int fin = n.inputs[static_cast<std::size_t>(1 + i)];
              const double fv = nodes_[fin].value.data[pix];
              if (wp) dP->at2(i, cc) += gv * fv;
              if (wants(fin)) gref(fin).data[pix] += gv * P.at2(i, cc);
            }
          }
        (void)nn;
        break;
      }
    }
  }
};

}  // namespace layoutgen
