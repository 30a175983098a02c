#pragma once

// Dense 64-bit float tensors with define-by-run reverse-mode autodiff.
//
// A Tensor is a value type: shape + row-major data + an optional tape node
// id (-1 marks a constant that gradients do not flow into). Ops are free
// functions taking the Tape they record onto; the tape is rebuilt on every
// forward pass. Matrix products go through OpenBLAS when available.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#ifdef DETLAB_USE_OPENBLAS
#include <cblas-openblas.h>
#endif

namespace detlab {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  int node = -1;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d, int n = -1)
      : shape(std::move(s)), data(std::move(d)), node(n) {}

  static Tensor zeros(std::vector<int> s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor full(std::vector<int> s, double v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<double> v) {
    int n = static_cast<int>(v.size());
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(int r, int c, std::vector<double> v) {
    return Tensor({r, c}, std::move(v));
  }

  int numel() const { return static_cast<int>(data.size()); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  bool tracked() const { return node >= 0; }

  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * cols() + j]; }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// C[m x n] += A op B with optional transposes. A is lda-strided, etc.
inline void gemm_acc(bool trans_a, bool trans_b, int m, int n, int k,
                     const double* a, int lda, const double* b, int ldb,
                     double* c, int ldc) {
#ifdef DETLAB_USE_OPENBLAS
  static const bool single_threaded = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)single_threaded;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0, a, lda, b,
              ldb, 1.0, c, ldc);
#else
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av = trans_a ? a[static_cast<std::size_t>(p) * lda + i]
                                : a[static_cast<std::size_t>(i) * lda + p];
      if (av == 0.0) continue;
      const double* brow = trans_b ? nullptr : b + static_cast<std::size_t>(p) * ldb;
      double* crow = c + static_cast<std::size_t>(i) * ldc;
      if (trans_b) {
        for (int j = 0; j < n; ++j)
          crow[j] += av * b[static_cast<std::size_t>(j) * ldb + p];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
#endif
}

}  // namespace detail

// Append-only record of tensor operations. Node parents always precede the
// node, so one reverse sweep visits each node exactly once.
class Tape {
 public:
  using BackFn = std::function<void(std::span<const double>, Tape&)>;

  int record(int numel, std::vector<int> parents, BackFn back) {
    nodes_.push_back(Node{numel, std::move(parents), std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Registers a leaf whose gradient can be queried after backward().
  Tensor watch(const Tensor& t) {
    Tensor out = t;
    out.node = record(t.numel(), {}, nullptr);
    return out;
  }

  void backward(const Tensor& loss) {
    detail::require(loss.numel() == 1,
                    "backward: loss must be a scalar, got " + shape_str(loss.shape));
    detail::require(loss.tracked() && loss.node < static_cast<int>(nodes_.size()),
                    "backward: loss was not produced on this tape");
    grads_.assign(nodes_.size(), {});
    reached_.assign(nodes_.size(), 0);
    reached_[static_cast<std::size_t>(loss.node)] = 1;
    grad_buf(loss.node)[0] = 1.0;
    for (int i = loss.node; i >= 0; --i) {
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!reached_[static_cast<std::size_t>(i)]) continue;
      for (int p : n.parents) reached_[static_cast<std::size_t>(p)] = 1;
      if (n.back) n.back(std::span<const double>(grad_buf(i)), *this);
    }
  }

  // Gradient of the last backward() w.r.t. a watched/derived tensor.
  // Empty span means the tensor was not reached (gradient is zero).
  std::span<const double> grad(int node) const {
    if (node < 0 || node >= static_cast<int>(grads_.size())) return {};
    return grads_[static_cast<std::size_t>(node)];
  }
  std::span<const double> grad(const Tensor& t) const { return grad(t.node); }

  std::vector<double>& grad_buf(int node) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].numel), 0.0);
    return g;
  }

  std::size_t size() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    grads_.clear();
    reached_.clear();
  }

 private:
  struct Node {
    int numel;
    std::vector<int> parents;
    BackFn back;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::vector<char> reached_;
};

namespace detail {

inline std::vector<int> tracked_parents(std::initializer_list<int> nodes) {
  std::vector<int> out;
  for (int n : nodes)
    if (n >= 0) out.push_back(n);
  return out;
}

inline void axpy(std::vector<double>& dst, std::span<const double> src, double scale = 1.0) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += scale * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products

inline Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
  detail::require(a.shape.size() == 2 && b.shape.size() == 2,
                  "matmul: expects matrices, got " + shape_str(a.shape) + " x " +
                      shape_str(b.shape));
  detail::require(a.shape[1] == b.shape[0],
                  "matmul: inner dimensions disagree: " + shape_str(a.shape) +
                      " x " + shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  detail::gemm_acc(false, false, m, n, k, a.data.data(), k, b.data.data(), n,
                   out.data.data(), n);
  if (!a.tracked() && !b.tracked()) return out;
  const int pa = a.node, pb = b.node;
  out.node = t.record(
      out.numel(), detail::tracked_parents({pa, pb}),
      [pa, pb, m, k, n, ad = a.data, bd = b.data](std::span<const double> g, Tape& tp) {
        if (pa >= 0)  // dA += G * B^T
          detail::gemm_acc(false, true, m, k, n, g.data(), n, bd.data(), n,
                           tp.grad_buf(pa).data(), k);
        if (pb >= 0)  // dB += A^T * G
          detail::gemm_acc(true, false, k, n, m, ad.data(), k, g.data(), n,
                           tp.grad_buf(pb).data(), n);
      });
  return out;
}

// a [m x k] times b^T where b is [n x k].
inline Tensor matmul_nt(Tape& t, const Tensor& a, const Tensor& b) {
  detail::require(a.shape.size() == 2 && b.shape.size() == 2 && a.shape[1] == b.shape[1],
                  "matmul_nt: shapes disagree: " + shape_str(a.shape) + " x " +
                      shape_str(b.shape) + "^T");
  const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor out = Tensor::zeros({m, n});
  detail::gemm_acc(false, true, m, n, k, a.data.data(), k, b.data.data(), k,
                   out.data.data(), n);
  if (!a.tracked() && !b.tracked()) return out;
  const int pa = a.node, pb = b.node;
  out.node = t.record(
      out.numel(), detail::tracked_parents({pa, pb}),
      [pa, pb, m, k, n, ad = a.data, bd = b.data](std::span<const double> g, Tape& tp) {
        if (pa >= 0)  // dA += G * B
          detail::gemm_acc(false, false, m, k, n, g.data(), n, bd.data(), k,
                           tp.grad_buf(pa).data(), k);
        if (pb >= 0)  // dB += G^T * A
          detail::gemm_acc(true, false, n, k, m, g.data(), n, ad.data(), k,
                           tp.grad_buf(pb).data(), k);
      });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops

namespace detail {

template <typename Fwd, typename Back>
Tensor binary_same_shape(Tape& t, const Tensor& a, const Tensor& b,
                         const char* name, Fwd fwd, Back back) {
  require(a.shape == b.shape, std::string(name) + ": shapes disagree: " +
                                  shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor out = Tensor::zeros(a.shape);
  for (int i = 0; i < out.numel(); ++i) out.data[i] = fwd(a.data[i], b.data[i]);
  if (!a.tracked() && !b.tracked()) return out;
  out.node = t.record(out.numel(), tracked_parents({a.node, b.node}),
                      back(a.node, b.node, a.data, b.data));
  return out;
}

}  // namespace detail

inline Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      t, a, b, "add", [](double x, double y) { return x + y; },
      [](int pa, int pb, const std::vector<double>&, const std::vector<double>&) {
        return [pa, pb](std::span<const double> g, Tape& tp) {
          if (pa >= 0) detail::axpy(tp.grad_buf(pa), g);
          if (pb >= 0) detail::axpy(tp.grad_buf(pb), g);
        };
      });
}

inline Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      t, a, b, "sub", [](double x, double y) { return x - y; },
      [](int pa, int pb, const std::vector<double>&, const std::vector<double>&) {
        return [pa, pb](std::span<const double> g, Tape& tp) {
          if (pa >= 0) detail::axpy(tp.grad_buf(pa), g);
          if (pb >= 0) detail::axpy(tp.grad_buf(pb), g, -1.0);
        };
      });
}

inline Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      t, a, b, "mul", [](double x, double y) { return x * y; },
      [](int pa, int pb, const std::vector<double>& ad, const std::vector<double>& bd) {
        return [pa, pb, ad, bd](std::span<const double> g, Tape& tp) {
          if (pa >= 0) {
            auto& ga = tp.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
          }
        };
      });
}

inline Tensor divide(Tape& t, const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      t, a, b, "divide", [](double x, double y) { return x / y; },
      [](int pa, int pb, const std::vector<double>& ad, const std::vector<double>& bd) {
        return [pa, pb, ad, bd](std::span<const double> g, Tape& tp) {
          if (pa >= 0) {
            auto& ga = tp.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bd[i];
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (std::size_t i = 0; i < g.size(); ++i)
              gb[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
          }
        };
      });
}

// Ties go to the first argument; the gradient at a tie follows the output.
inline Tensor minimum(Tape& t, const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      t, a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
      [](int pa, int pb, const std::vector<double>& ad, const std::vector<double>& bd) {
        return [pa, pb, ad, bd](std::span<const double> g, Tape& tp) {
          if (pa >= 0) {
            auto& ga = tp.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i)
              if (ad[i] <= bd[i]) ga[i] += g[i];
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (std::size_t i = 0; i < g.size(); ++i)
              if (ad[i] > bd[i]) gb[i] += g[i];
          }
        };
      });
}

inline Tensor maximum(Tape& t, const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      t, a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
      [](int pa, int pb, const std::vector<double>& ad, const std::vector<double>& bd) {
        return [pa, pb, ad, bd](std::span<const double> g, Tape& tp) {
          if (pa >= 0) {
            auto& ga = tp.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i)
              if (ad[i] >= bd[i]) ga[i] += g[i];
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (std::size_t i = 0; i < g.size(); ++i)
              if (ad[i] < bd[i]) gb[i] += g[i];
          }
        };
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <typename Fwd, typename MakeBack>
Tensor unary(Tape& t, const Tensor& a, Fwd fwd, MakeBack make_back) {
  Tensor out = Tensor::zeros(a.shape);
  for (int i = 0; i < out.numel(); ++i) out.data[i] = fwd(a.data[i]);
  if (!a.tracked()) return out;
  out.node = t.record(out.numel(), {a.node}, make_back(a.node, a.data, out.data));
  return out;
}

}  // namespace detail

inline Tensor relu(Tape& t, const Tensor& a) {
  return detail::unary(
      t, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](int p, const std::vector<double>& ad, const std::vector<double>&) {
        // gradient at exactly 0 is defined as 0
        return [p, ad](std::span<const double> g, Tape& tp) {
          auto& gp = tp.grad_buf(p);
          for (std::size_t i = 0; i < g.size(); ++i)
            if (ad[i] > 0.0) gp[i] += g[i];
        };
      });
}

inline Tensor exp(Tape& t, const Tensor& a) {
  return detail::unary(
      t, a, [](double x) { return std::exp(x); },
      [](int p, const std::vector<double>&, const std::vector<double>& od) {
        return [p, od](std::span<const double> g, Tape& tp) {
          auto& gp = tp.grad_buf(p);
          for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * od[i];
        };
      });
}

inline Tensor log(Tape& t, const Tensor& a) {
  for (int i = 0; i < a.numel(); ++i)
    if (!(a.data[i] > 0.0))
      throw std::domain_error("log: nonpositive input " + std::to_string(a.data[i]));
  return detail::unary(
      t, a, [](double x) { return std::log(x); },
      [](int p, const std::vector<double>& ad, const std::vector<double>&) {
        return [p, ad](std::span<const double> g, Tape& tp) {
          auto& gp = tp.grad_buf(p);
          for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] / ad[i];
        };
      });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(Tape& t, const Tensor& a) {
  return detail::unary(
      t, a, [](double x) { return sigmoid_value(x); },
      [](int p, const std::vector<double>&, const std::vector<double>& od) {
        return [p, od](std::span<const double> g, Tape& tp) {
          auto& gp = tp.grad_buf(p);
          for (std::size_t i = 0; i < g.size(); ++i)
            gp[i] += g[i] * od[i] * (1.0 - od[i]);
        };
      });
}

inline Tensor abs(Tape& t, const Tensor& a) {
  return detail::unary(
      t, a, [](double x) { return std::fabs(x); },
      [](int p, const std::vector<double>& ad, const std::vector<double>&) {
        // gradient at exactly 0 is defined as 0
        return [p, ad](std::span<const double> g, Tape& tp) {
          auto& gp = tp.grad_buf(p);
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (ad[i] > 0.0)
              gp[i] += g[i];
            else if (ad[i] < 0.0)
              gp[i] -= g[i];
          }
        };
      });
}

inline Tensor neg(Tape& t, const Tensor& a) {
  return detail::unary(
      t, a, [](double x) { return -x; },
      [](int p, const std::vector<double>&, const std::vector<double>&) {
        return [p](std::span<const double> g, Tape& tp) {
          detail::axpy(tp.grad_buf(p), g, -1.0);
        };
      });
}

inline Tensor scale(Tape& t, const Tensor& a, double c) {
  return detail::unary(
      t, a, [c](double x) { return c * x; },
      [c](int p, const std::vector<double>&, const std::vector<double>&) {
        return [p, c](std::span<const double> g, Tape& tp) {
          detail::axpy(tp.grad_buf(p), g, c);
        };
      });
}

inline Tensor add_scalar(Tape& t, const Tensor& a, double c) {
  return detail::unary(
      t, a, [c](double x) { return x + c; },
      [](int p, const std::vector<double>&, const std::vector<double>&) {
        return [p](std::span<const double> g, Tape& tp) {
          detail::axpy(tp.grad_buf(p), g);
        };
      });
}

// Elementwise max against a fixed scalar floor; gradient passes where a > c.
inline Tensor max_scalar(Tape& t, const Tensor& a, double c) {
  return detail::unary(
      t, a, [c](double x) { return x > c ? x : c; },
      [c](int p, const std::vector<double>& ad, const std::vector<double>&) {
        return [p, c, ad](std::span<const double> g, Tape& tp) {
          auto& gp = tp.grad_buf(p);
          for (std::size_t i = 0; i < g.size(); ++i)
            if (ad[i] > c) gp[i] += g[i];
        };
      });
}

// out = s * x for a one-element tensor s; either operand may be a constant.
inline Tensor mul_scalar(Tape& t, const Tensor& a, const Tensor& s) {
  detail::require(s.numel() == 1, "mul_scalar: scale must have one element, got " +
                                      shape_str(s.shape));
  const double sv = s.data[0];
  Tensor out = Tensor::zeros(a.shape);
  for (int i = 0; i < out.numel(); ++i) out.data[i] = sv * a.data[i];
  if (!a.tracked() && !s.tracked()) return out;
  const int pa = a.node, ps = s.node;
  out.node = t.record(out.numel(), detail::tracked_parents({pa, ps}),
                      [pa, ps, sv, ad = a.data](std::span<const double> g, Tape& tp) {
                        if (pa >= 0) detail::axpy(tp.grad_buf(pa), g, sv);
                        if (ps >= 0) {
                          double acc = 0.0;
                          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * ad[i];
                          tp.grad_buf(ps)[0] += acc;
                        }
                      });
  return out;
}

// ---------------------------------------------------------------------------
// Row/column broadcasts

// out[i][j] = x[i][j] + b[j], b a length-n vector.
inline Tensor add_rowvec(Tape& t, const Tensor& x, const Tensor& b) {
  detail::require(x.shape.size() == 2 && b.numel() == x.shape[1],
                  "add_rowvec: shapes disagree: " + shape_str(x.shape) + " + " +
                      shape_str(b.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) + b.data[j];
  if (!x.tracked() && !b.tracked()) return out;
  const int px = x.node, pb = b.node;
  out.node = t.record(out.numel(), detail::tracked_parents({px, pb}),
                      [px, pb, m, n](std::span<const double> g, Tape& tp) {
                        if (px >= 0) detail::axpy(tp.grad_buf(px), g);
                        if (pb >= 0) {
                          auto& gb = tp.grad_buf(pb);
                          for (int i = 0; i < m; ++i)
                            for (int j = 0; j < n; ++j)
                              gb[j] += g[static_cast<std::size_t>(i) * n + j];
                        }
                      });
  return out;
}

// out[i][j] = x[i][j] + c[i] for a constant per-row shift (no gradient into c).
inline Tensor shift_rows(Tape& t, const Tensor& x, const std::vector<double>& c) {
  detail::require(x.shape.size() == 2 && static_cast<int>(c.size()) == x.shape[0],
                  "shift_rows: need one shift per row of " + shape_str(x.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) + c[static_cast<std::size_t>(i)];
  if (!x.tracked()) return out;
  const int px = x.node;
  out.node = t.record(out.numel(), {px}, [px](std::span<const double> g, Tape& tp) {
    detail::axpy(tp.grad_buf(px), g);
  });
  return out;
}

// out[i][j] = x[i][j] * r[i] for a constant per-row factor (no gradient into r).
inline Tensor scale_rows(Tape& t, const Tensor& x, const std::vector<double>& r) {
  detail::require(x.shape.size() == 2 && static_cast<int>(r.size()) == x.shape[0],
                  "scale_rows: need one factor per row of " + shape_str(x.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) * r[static_cast<std::size_t>(i)];
  if (!x.tracked()) return out;
  const int px = x.node;
  out.node = t.record(out.numel(), {px}, [px, m, n, r](std::span<const double> g, Tape& tp) {
    auto& gx = tp.grad_buf(px);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        gx[static_cast<std::size_t>(i) * n + j] +=
            g[static_cast<std::size_t>(i) * n + j] * r[static_cast<std::size_t>(i)];
  });
  return out;
}

// out[i][j] = x[i][j] / c[i] with c an [m x 1] tensor.
inline Tensor div_colvec(Tape& t, const Tensor& x, const Tensor& c) {
  detail::require(x.shape.size() == 2 && c.numel() == x.shape[0],
                  "div_colvec: need one divisor per row of " + shape_str(x.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) / c.data[static_cast<std::size_t>(i)];
  if (!x.tracked() && !c.tracked()) return out;
  const int px = x.node, pc = c.node;
  out.node = t.record(
      out.numel(), detail::tracked_parents({px, pc}),
      [px, pc, m, n, cd = c.data, od = out.data](std::span<const double> g, Tape& tp) {
        if (px >= 0) {
          auto& gx = tp.grad_buf(px);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              gx[static_cast<std::size_t>(i) * n + j] +=
                  g[static_cast<std::size_t>(i) * n + j] / cd[static_cast<std::size_t>(i)];
        }
        if (pc >= 0) {
          auto& gc = tp.grad_buf(pc);
          for (int i = 0; i < m; ++i) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) {
              const std::size_t k = static_cast<std::size_t>(i) * n + j;
              acc -= g[k] * od[k];
            }
            gc[static_cast<std::size_t>(i)] += acc / cd[static_cast<std::size_t>(i)];
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and row-wise softmax

inline Tensor sum(Tape& t, const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (!a.tracked()) return out;
  const int p = a.node;
  out.node = t.record(1, {p}, [p](std::span<const double> g, Tape& tp) {
    auto& gp = tp.grad_buf(p);
    for (auto& v : gp) v += g[0];
  });
  return out;
}

inline Tensor mean(Tape& t, const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v;
  const double inv = 1.0 / a.numel();
  Tensor out = Tensor::scalar(acc * inv);
  if (!a.tracked()) return out;
  const int p = a.node;
  out.node = t.record(1, {p}, [p, inv](std::span<const double> g, Tape& tp) {
    auto& gp = tp.grad_buf(p);
    for (auto& v : gp) v += g[0] * inv;
  });
  return out;
}

inline Tensor row_sum(Tape& t, const Tensor& x) {
  detail::require(x.shape.size() == 2, "row_sum: expects a matrix, got " + shape_str(x.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor out = Tensor::zeros({m, 1});
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int j = 0; j < n; ++j) acc += x.at(i, j);
    out.data[static_cast<std::size_t>(i)] = acc;
  }
  if (!x.tracked()) return out;
  const int p = x.node;
  out.node = t.record(m, {p}, [p, m, n](std::span<const double> g, Tape& tp) {
    auto& gp = tp.grad_buf(p);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        gp[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(i)];
  });
  return out;
}

// Row-wise softmax, stabilized by subtracting each row's max.
inline Tensor softmax_rows(Tape& t, const Tensor& x) {
  detail::require(x.shape.size() == 2,
                  "softmax_rows: expects a matrix, got " + shape_str(x.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  for (int i = 0; i < m; ++i) {
    double mx = x.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(x.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= denom;
  }
  if (!x.tracked()) return out;
  const int p = x.node;
  out.node = t.record(out.numel(), {p},
                      [p, m, n, od = out.data](std::span<const double> g, Tape& tp) {
                        auto& gp = tp.grad_buf(p);
                        for (int i = 0; i < m; ++i) {
                          double dot = 0.0;
                          for (int j = 0; j < n; ++j) {
                            const std::size_t k = static_cast<std::size_t>(i) * n + j;
                            dot += g[k] * od[k];
                          }
                          for (int j = 0; j < n; ++j) {
                            const std::size_t k = static_cast<std::size_t>(i) * n + j;
                            gp[k] += od[k] * (g[k] - dot);
                          }
                        }
                      });
  return out;
}

inline Tensor log_softmax_rows(Tape& t, const Tensor& x) {
  detail::require(x.shape.size() == 2,
                  "log_softmax_rows: expects a matrix, got " + shape_str(x.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  for (int i = 0; i < m; ++i) {
    double mx = x.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(x.at(i, j) - mx);
    const double lse = mx + std::log(denom);
    for (int j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) - lse;
  }
  if (!x.tracked()) return out;
  const int p = x.node;
  out.node = t.record(out.numel(), {p},
                      [p, m, n, od = out.data](std::span<const double> g, Tape& tp) {
                        auto& gp = tp.grad_buf(p);
                        for (int i = 0; i < m; ++i) {
                          double gsum = 0.0;
                          for (int j = 0; j < n; ++j)
                            gsum += g[static_cast<std::size_t>(i) * n + j];
                          for (int j = 0; j < n; ++j) {
                            const std::size_t k = static_cast<std::size_t>(i) * n + j;
                            gp[k] += g[k] - std::exp(od[k]) * gsum;
                          }
                        }
                      });
  return out;
}

// Row-wise layer normalization: each row is centered and scaled to unit
// variance, then shifted by a learned per-column gain and bias.
inline Tensor layer_norm_rows(Tape& t, const Tensor& x, const Tensor& gain, const Tensor& bias,
                              double eps = 1e-5) {
  detail::require(x.shape.size() == 2 && gain.numel() == x.shape[1] &&
                      bias.numel() == x.shape[1],
                  "layer_norm_rows: shapes disagree: " + shape_str(x.shape) + " with gain " +
                      shape_str(gain.shape) + " and bias " + shape_str(bias.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  std::vector<double> hat(static_cast<std::size_t>(m) * n);
  std::vector<double> inv_sigma(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += x.at(i, j);
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = x.at(i, j) - mu;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<std::size_t>(i)] = inv;
    for (int j = 0; j < n; ++j) {
      const double h = (x.at(i, j) - mu) * inv;
      hat[static_cast<std::size_t>(i) * n + j] = h;
      out.at(i, j) = gain.data[j] * h + bias.data[j];
    }
  }
  if (!x.tracked() && !gain.tracked() && !bias.tracked()) return out;
  const int px = x.node, pg = gain.node, pb = bias.node;
  out.node = t.record(
      out.numel(), detail::tracked_parents({px, pg, pb}),
      [px, pg, pb, m, n, hat = std::move(hat), inv_sigma = std::move(inv_sigma),
       gd = gain.data](std::span<const double> g, Tape& tp) {
        for (int i = 0; i < m; ++i) {
          const std::size_t row = static_cast<std::size_t>(i) * n;
          if (pg >= 0) {
            auto& gg = tp.grad_buf(pg);
            for (int j = 0; j < n; ++j) gg[j] += g[row + j] * hat[row + j];
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (int j = 0; j < n; ++j) gb[j] += g[row + j];
          }
          if (px >= 0) {
            auto& gx = tp.grad_buf(px);
            double q_mean = 0.0, qh_mean = 0.0;
            for (int j = 0; j < n; ++j) {
              const double q = g[row + j] * gd[j];
              q_mean += q;
              qh_mean += q * hat[row + j];
            }
            q_mean /= n;
            qh_mean /= n;
            const double inv = inv_sigma[static_cast<std::size_t>(i)];
            for (int j = 0; j < n; ++j) {
              const double q = g[row + j] * gd[j];
              gx[row + j] += (q - q_mean - hat[row + j] * qh_mean) * inv;
            }
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// Shape surgery

inline Tensor reshape(Tape& t, const Tensor& a, std::vector<int> shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  detail::require(n == a.data.size(), "reshape: cannot view " + shape_str(a.shape) +
                                          " as " + shape_str(shape));
  Tensor out(std::move(shape), a.data);
  if (!a.tracked()) return out;
  const int p = a.node;
  out.node = t.record(out.numel(), {p}, [p](std::span<const double> g, Tape& tp) {
    detail::axpy(tp.grad_buf(p), g);
  });
  return out;
}

inline Tensor slice_cols(Tape& t, const Tensor& x, int c0, int c1) {
  detail::require(x.shape.size() == 2 && 0 <= c0 && c0 < c1 && c1 <= x.shape[1],
                  "slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                      ") out of bounds for " + shape_str(x.shape));
  const int m = x.shape[0], n = x.shape[1], w = c1 - c0;
  Tensor out = Tensor::zeros({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = x.at(i, c0 + j);
  if (!x.tracked()) return out;
  const int p = x.node;
  out.node = t.record(out.numel(), {p}, [p, m, n, w, c0](std::span<const double> g, Tape& tp) {
    auto& gp = tp.grad_buf(p);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        gp[static_cast<std::size_t>(i) * n + c0 + j] += g[static_cast<std::size_t>(i) * w + j];
  });
  return out;
}

inline Tensor slice_rows(Tape& t, const Tensor& x, int r0, int r1) {
  detail::require(x.shape.size() == 2 && 0 <= r0 && r0 < r1 && r1 <= x.shape[0],
                  "slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                      ") out of bounds for " + shape_str(x.shape));
  const int n = x.shape[1], h = r1 - r0;
  Tensor out = Tensor::zeros({h, n});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x.at(r0 + i, j);
  if (!x.tracked()) return out;
  const int p = x.node;
  out.node = t.record(out.numel(), {p}, [p, n, h, r0](std::span<const double> g, Tape& tp) {
    auto& gp = tp.grad_buf(p);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < n; ++j)
        gp[static_cast<std::size_t>(r0 + i) * n + j] += g[static_cast<std::size_t>(i) * n + j];
  });
  return out;
}

// Concatenation along the last axis of equal-height matrices.
inline Tensor concat_last_dim(Tape& t, const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_last_dim: no inputs");
  const int m = parts.front().shape.size() == 2 ? parts.front().shape[0] : 1;
  int total = 0;
  bool tracked = false;
  for (const Tensor& p : parts) {
    const int pm = p.shape.size() == 2 ? p.shape[0] : 1;
    detail::require(pm == m, "concat_last_dim: row counts disagree: " +
                                 shape_str(parts.front().shape) + " vs " + shape_str(p.shape));
    total += p.cols();
    tracked = tracked || p.tracked();
  }
  Tensor out = Tensor::zeros({m, total});
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) out.at(i, off + j) = p.data[static_cast<std::size_t>(i) * w + j];
    off += w;
  }
  if (!tracked) return out;
  std::vector<int> nodes, widths;
  std::vector<int> parents;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node);
    widths.push_back(p.cols());
    if (p.node >= 0) parents.push_back(p.node);
  }
  out.node = t.record(out.numel(), std::move(parents),
                      [nodes, widths, m, total](std::span<const double> g, Tape& tp) {
                        int off = 0;
                        for (std::size_t k = 0; k < nodes.size(); ++k) {
                          const int w = widths[k];
                          if (nodes[k] >= 0) {
                            auto& gp = tp.grad_buf(nodes[k]);
                            for (int i = 0; i < m; ++i)
                              for (int j = 0; j < w; ++j)
                                gp[static_cast<std::size_t>(i) * w + j] +=
                                    g[static_cast<std::size_t>(i) * total + off + j];
                          }
                          off += w;
                        }
                      });
  return out;
}

}  // namespace detlab
