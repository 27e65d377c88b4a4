#pragma once

// Dense double-precision tensors (rank 1 and 2, row-major) with reverse-mode
// automatic differentiation on a define-by-run tape.
//
// Conventions:
//   - Parameters are created outside any tape and live across steps; their
//     gradients accumulate additively until zero_grad() is called.
//   - Intermediates are created by tape ops; their gradient buffers start at
//     zero for the tape's single backward() pass.
//   - An op records a backward closure only if some input requires grad, so
//     frozen subgraphs cost nothing in the backward pass.
//   - NaN inputs propagate to outputs; ops never silently clamp.

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "hypofuse/common.hpp"

namespace hypofuse {

namespace detail {

inline std::string shape_str(const std::vector<size_t>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// C[M x N] += A[M x K] * B[K x N]
inline void mm_acc_nn(const double* a, const double* b, double* c, size_t m,
                      size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[M x N] += A[M x K] * B[N x K]^T
inline void mm_acc_nt(const double* a, const double* b, double* c, size_t m,
                      size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C[M x N] += A[K x M]^T * B[K x N]
inline void mm_acc_tn(const double* a, const double* b, double* c, size_t m,
                      size_t k, size_t n) {
  for (size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

struct TensorData {
  std::vector<size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    if (shape.empty() || n == 0)
      throw DimensionError("Tensor: shape " + detail::shape_str(shape) +
                           " has zero elements");
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->value.assign(n, 0.0);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
  }

  static Tensor of(std::vector<size_t> shape, std::vector<double> data,
                   bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (data.size() != t.size())
      throw DimensionError("Tensor: data length " + std::to_string(data.size()) +
                           " does not match shape " +
                           detail::shape_str(t.shape()));
    t.d_->value = std::move(data);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return of({1}, {v}, requires_grad);
  }

  bool valid() const { return static_cast<bool>(d_); }
  const std::vector<size_t>& shape() const { return d_->shape; }
  size_t rank() const { return d_->shape.size(); }
  size_t size() const { return d_->value.size(); }
  size_t rows() const { return d_->shape[0]; }
  size_t cols() const { return d_->shape.size() > 1 ? d_->shape[1] : 1; }

  // Tensor is a shared-ownership handle: constness is shallow, and gradient
  // mutation (an autodiff bookkeeping concern) is allowed through const
  // handles so backward closures can capture operands by value.
  double* data() const { return d_->value.data(); }
  std::vector<double>& value() const { return d_->value; }

  double item() const {
    if (size() != 1)
      throw DimensionError("Tensor::item on shape " +
                           detail::shape_str(shape()));
    return d_->value[0];
  }
  double& at(size_t r, size_t c) const { return d_->value[r * cols() + c]; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) const { d_->requires_grad = rg; }

  void ensure_grad() const {
    if (d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), 0.0);
  }
  double* grad_data() const {
    ensure_grad();
    return d_->grad.data();
  }
  const std::vector<double>& grad() const { return d_->grad; }
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad() const {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

class Tape {
 public:
  Tape() = default;
  // A non-recording tape runs the same forward code but never allocates
  // gradients or closures; use it for inference.
  explicit Tape(bool recording) : recording_(recording) {}

  // --- linear algebra ---

  // a[M x K] * b[K x N]
  Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul lhs");
    require_rank2(b, "matmul rhs");
    const size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
      throw DimensionError("matmul: inner dimensions disagree, lhs " +
                           detail::shape_str(a.shape()) + " rhs " +
                           detail::shape_str(b.shape()));
    Tensor out = make({m, n}, a.requires_grad() || b.requires_grad());
    detail::mm_acc_nn(a.data(), b.data(), out.data(), m, k, n);
    if (out.requires_grad())
      record([a, b, out, m, k, n]() mutable {
        const double* g = out.grad_data();
        if (a.requires_grad())
          detail::mm_acc_nt(g, b.data(), a.grad_data(), m, n, k);
        if (b.requires_grad())
          detail::mm_acc_tn(a.data(), g, b.grad_data(), k, m, n);
      });
    return out;
  }

  // a[M x K] * b[N x K]^T; the attention-score shape.
  Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt lhs");
    require_rank2(b, "matmul_nt rhs");
    const size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k)
      throw DimensionError("matmul_nt: inner dimensions disagree, lhs " +
                           detail::shape_str(a.shape()) + " rhs " +
                           detail::shape_str(b.shape()));
    Tensor out = make({m, n}, a.requires_grad() || b.requires_grad());
    detail::mm_acc_nt(a.data(), b.data(), out.data(), m, k, n);
    if (out.requires_grad())
      record([a, b, out, m, k, n]() mutable {
        const double* g = out.grad_data();
        if (a.requires_grad())
          detail::mm_acc_nn(g, b.data(), a.grad_data(), m, n, k);
        if (b.requires_grad())
          detail::mm_acc_tn(g, a.data(), b.grad_data(), n, m, k);
      });
    return out;
  }

  Tensor transpose(const Tensor& x) {
    require_rank2(x, "transpose");
    const size_t m = x.rows(), n = x.cols();
    Tensor out = make({n, m}, x.requires_grad());
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) out.data()[j * m + i] = x.data()[i * n + j];
    if (out.requires_grad())
      record([x, out, m, n]() mutable {
        const double* g = out.grad_data();
        double* gx = x.grad_data();
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
      });
    return out;
  }

  // --- elementwise ---

  Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = make(a.shape(), a.requires_grad() || b.requires_grad());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (out.requires_grad())
      record([a, b, out, n]() mutable {
        const double* g = out.grad_data();
        if (a.requires_grad()) {
          double* ga = a.grad_data();
          for (size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
          double* gb = b.grad_data();
          for (size_t i = 0; i < n; ++i) gb[i] += g[i];
        }
      });
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = make(a.shape(), a.requires_grad() || b.requires_grad());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (out.requires_grad())
      record([a, b, out, n]() mutable {
        const double* g = out.grad_data();
        if (a.requires_grad()) {
          double* ga = a.grad_data();
          for (size_t i = 0; i < n; ++i) ga[i] += g[i] * b.data()[i];
        }
        if (b.requires_grad()) {
          double* gb = b.grad_data();
          for (size_t i = 0; i < n; ++i) gb[i] += g[i] * a.data()[i];
        }
      });
    return out;
  }

  // out = s * x where s is a learnable scalar (shape [1]).
  Tensor mul_scalar(const Tensor& x, const Tensor& s) {
    if (s.size() != 1)
      throw DimensionError("mul_scalar: scale must have one element, got " +
                           detail::shape_str(s.shape()));
    Tensor out = make(x.shape(), x.requires_grad() || s.requires_grad());
    const double sv = s.data()[0];
    const size_t n = x.size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = sv * x.data()[i];
    if (out.requires_grad())
      record([x, s, out, sv, n]() mutable {
        const double* g = out.grad_data();
        if (x.requires_grad()) {
          double* gx = x.grad_data();
          for (size_t i = 0; i < n; ++i) gx[i] += sv * g[i];
        }
        if (s.requires_grad()) {
          double acc = 0.0;
          for (size_t i = 0; i < n; ++i) acc += g[i] * x.data()[i];
          s.grad_data()[0] += acc;
        }
      });
    return out;
  }

  Tensor scale(const Tensor& x, double c) {
    Tensor out = make(x.shape(), x.requires_grad());
    const size_t n = x.size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = c * x.data()[i];
    if (out.requires_grad())
      record([x, out, c, n]() mutable {
        const double* g = out.grad_data();
        double* gx = x.grad_data();
        for (size_t i = 0; i < n; ++i) gx[i] += c * g[i];
      });
    return out;
  }

  Tensor silu(const Tensor& x) {
    Tensor out = make(x.shape(), x.requires_grad());
    const size_t n = x.size();
    for (size_t i = 0; i < n; ++i)
      out.data()[i] = x.data()[i] * detail::sigmoid(x.data()[i]);
    if (out.requires_grad())
      record([x, out, n]() mutable {
        const double* g = out.grad_data();
        double* gx = x.grad_data();
        for (size_t i = 0; i < n; ++i) {
          const double s = detail::sigmoid(x.data()[i]);
          gx[i] += g[i] * s * (1.0 + x.data()[i] * (1.0 - s));
        }
      });
    return out;
  }

  // Exact erf form.
  Tensor gelu(const Tensor& x) {
    static const double inv_sqrt2 = 0.7071067811865475244;
    static const double inv_sqrt2pi = 0.3989422804014326779;
    Tensor out = make(x.shape(), x.requires_grad());
    const size_t n = x.size();
    for (size_t i = 0; i < n; ++i) {
      const double v = x.data()[i];
      out.data()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    if (out.requires_grad())
      record([x, out, n]() mutable {
        const double* g = out.grad_data();
        double* gx = x.grad_data();
        for (size_t i = 0; i < n; ++i) {
          const double v = x.data()[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          gx[i] += g[i] * (cdf + v * inv_sqrt2pi * std::exp(-0.5 * v * v));
        }
      });
    return out;
  }

  // --- normalization and attention pieces ---

  // Softmax along `axis` (default last). Max-subtracted, so magnitude-shifted
  // rows like [1000, 0] stay finite.
  Tensor softmax(const Tensor& x, int axis = -1) {
    const int r = static_cast<int>(x.rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
      throw DimensionError("softmax: axis " + std::to_string(axis) +
                           " out of range for shape " +
                           detail::shape_str(x.shape()));
    // Iterate the tensor as [outer, len, inner] around the softmax axis.
    size_t len = x.shape()[static_cast<size_t>(axis)];
    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= x.shape()[static_cast<size_t>(i)];
    Tensor out = make(x.shape(), x.requires_grad());
    for (size_t o = 0; o < outer; ++o)
      for (size_t in = 0; in < inner; ++in) {
        const size_t base = o * len * inner + in;
        double mx = x.data()[base];
        for (size_t i = 1; i < len; ++i)
          mx = std::max(mx, x.data()[base + i * inner]);
        double z = 0.0;
        for (size_t i = 0; i < len; ++i) {
          const double e = std::exp(x.data()[base + i * inner] - mx);
          out.data()[base + i * inner] = e;
          z += e;
        }
        for (size_t i = 0; i < len; ++i) out.data()[base + i * inner] /= z;
      }
    if (out.requires_grad())
      record([x, out, outer, len, inner]() mutable {
        const double* g = out.grad_data();
        const double* p = out.data();
        double* gx = x.grad_data();
        for (size_t o = 0; o < outer; ++o)
          for (size_t in = 0; in < inner; ++in) {
            const size_t base = o * len * inner + in;
            double dot = 0.0;
            for (size_t i = 0; i < len; ++i)
              dot += g[base + i * inner] * p[base + i * inner];
            for (size_t i = 0; i < len; ++i)
              gx[base + i * inner] +=
                  p[base + i * inner] * (g[base + i * inner] - dot);
          }
      });
    return out;
  }

  Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-8) {
    require_rank2(x, "rmsnorm input");
    if (gain.rank() != 1 || gain.size() != x.cols())
      throw DimensionError("rmsnorm: gain shape " +
                           detail::shape_str(gain.shape()) +
                           " does not match input " +
                           detail::shape_str(x.shape()));
    const size_t m = x.rows(), d = x.cols();
    Tensor out = make({m, d}, x.requires_grad() || gain.requires_grad());
    std::vector<double> inv_rms(m);
    for (size_t i = 0; i < m; ++i) {
      const double* xi = x.data() + i * d;
      double ss = 0.0;
      for (size_t j = 0; j < d; ++j) ss += xi[j] * xi[j];
      const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
      inv_rms[i] = r;
      double* oi = out.data() + i * d;
      for (size_t j = 0; j < d; ++j) oi[j] = xi[j] * r * gain.data()[j];
    }
    if (out.requires_grad())
      record([x, gain, out, inv_rms = std::move(inv_rms), m, d]() mutable {
        const double* g = out.grad_data();
        for (size_t i = 0; i < m; ++i) {
          const double* xi = x.data() + i * d;
          const double* gi = g + i * d;
          const double r = inv_rms[i];
          if (x.requires_grad()) {
            double dot = 0.0;
            for (size_t j = 0; j < d; ++j) dot += gi[j] * gain.data()[j] * xi[j];
            const double k = dot * r * r * r / static_cast<double>(d);
            double* gx = x.grad_data() + i * d;
            for (size_t j = 0; j < d; ++j)
              gx[j] += gi[j] * gain.data()[j] * r - xi[j] * k;
          }
          if (gain.requires_grad()) {
            double* gg = gain.grad_data();
            for (size_t j = 0; j < d; ++j) gg[j] += gi[j] * xi[j] * r;
          }
        }
      });
    return out;
  }

  // --- gather / reshape family ---

  Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    require_rank2(table, "embedding table");
    const size_t v = table.rows(), d = table.cols();
    if (ids.empty()) throw DimensionError("embedding: empty id list");
    for (int id : ids)
      if (id < 0 || static_cast<size_t>(id) >= v)
        throw ValueError("embedding: id " + std::to_string(id) +
                         " outside table of " + std::to_string(v) + " rows");
    Tensor out = make({ids.size(), d}, table.requires_grad());
    for (size_t i = 0; i < ids.size(); ++i)
      std::memcpy(out.data() + i * d,
                  table.data() + static_cast<size_t>(ids[i]) * d,
                  d * sizeof(double));
    if (out.requires_grad())
      record([table, out, ids, d]() mutable {
        const double* g = out.grad_data();
        double* gt = table.grad_data();
        for (size_t i = 0; i < ids.size(); ++i) {
          double* row = gt + static_cast<size_t>(ids[i]) * d;
          const double* gi = g + i * d;
          for (size_t j = 0; j < d; ++j) row[j] += gi[j];
        }
      });
    return out;
  }

  Tensor slice_rows(const Tensor& x, size_t start, size_t len) {
    require_rank2(x, "slice_rows");
    if (start + len > x.rows() || len == 0)
      throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " +
                           std::to_string(start + len) + ") outside " +
                           detail::shape_str(x.shape()));
    const size_t d = x.cols();
    Tensor out = make({len, d}, x.requires_grad());
    std::memcpy(out.data(), x.data() + start * d, len * d * sizeof(double));
    if (out.requires_grad())
      record([x, out, start, len, d]() mutable {
        const double* g = out.grad_data();
        double* gx = x.grad_data() + start * d;
        for (size_t i = 0; i < len * d; ++i) gx[i] += g[i];
      });
    return out;
  }

  Tensor slice_cols(const Tensor& x, size_t start, size_t len) {
    require_rank2(x, "slice_cols");
    if (start + len > x.cols() || len == 0)
      throw DimensionError("slice_cols: cols [" + std::to_string(start) + ", " +
                           std::to_string(start + len) + ") outside " +
                           detail::shape_str(x.shape()));
    const size_t m = x.rows(), n = x.cols();
    Tensor out = make({m, len}, x.requires_grad());
    for (size_t i = 0; i < m; ++i)
      std::memcpy(out.data() + i * len, x.data() + i * n + start,
                  len * sizeof(double));
    if (out.requires_grad())
      record([x, out, start, len, m, n]() mutable {
        const double* g = out.grad_data();
        double* gx = x.grad_data();
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < len; ++j)
            gx[i * n + start + j] += g[i * len + j];
      });
    return out;
  }

  Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require_rank2(a, "concat_rows lhs");
    require_rank2(b, "concat_rows rhs");
    if (a.cols() != b.cols())
      throw DimensionError("concat_rows: column counts disagree, " +
                           detail::shape_str(a.shape()) + " vs " +
                           detail::shape_str(b.shape()));
    const size_t d = a.cols(), ma = a.rows(), mb = b.rows();
    Tensor out = make({ma + mb, d}, a.requires_grad() || b.requires_grad());
    std::memcpy(out.data(), a.data(), ma * d * sizeof(double));
    std::memcpy(out.data() + ma * d, b.data(), mb * d * sizeof(double));
    if (out.requires_grad())
      record([a, b, out, ma, mb, d]() mutable {
        const double* g = out.grad_data();
        if (a.requires_grad()) {
          double* ga = a.grad_data();
          for (size_t i = 0; i < ma * d; ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
          double* gb = b.grad_data();
          for (size_t i = 0; i < mb * d; ++i) gb[i] += g[ma * d + i];
        }
      });
    return out;
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no tensors");
    const size_t m = parts[0].rows();
    size_t total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
      require_rank2(p, "concat_cols part");
      if (p.rows() != m)
        throw DimensionError("concat_cols: row counts disagree, " +
                             detail::shape_str(parts[0].shape()) + " vs " +
                             detail::shape_str(p.shape()));
      total += p.cols();
      rg = rg || p.requires_grad();
    }
    Tensor out = make({m, total}, rg);
    size_t off = 0;
    for (const Tensor& p : parts) {
      const size_t w = p.cols();
      for (size_t i = 0; i < m; ++i)
        std::memcpy(out.data() + i * total + off, p.data() + i * w,
                    w * sizeof(double));
      off += w;
    }
    if (out.requires_grad())
      record([parts, out, m, total]() mutable {
        const double* g = out.grad_data();
        size_t off = 0;
        for (const Tensor& p : parts) {
          const size_t w = p.cols();
          if (p.requires_grad()) {
            double* gp = p.grad_data();
            for (size_t i = 0; i < m; ++i)
              for (size_t j = 0; j < w; ++j)
                gp[i * w + j] += g[i * total + off + j];
          }
          off += w;
        }
      });
    return out;
  }

  // --- reductions and loss ---

  Tensor sum(const Tensor& x) {
    Tensor out = make({1}, x.requires_grad());
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x.data()[i];
    out.data()[0] = s;
    if (out.requires_grad())
      record([x, out]() mutable {
        const double g = out.grad_data()[0];
        double* gx = x.grad_data();
        for (size_t i = 0; i < x.size(); ++i) gx[i] += g;
      });
    return out;
  }

  Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
  }

  // Mean over masked positions of -log softmax(logits)[target]. Positions
  // with mask false contribute nothing and receive exactly zero gradient.
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                       const std::vector<unsigned char>& mask) {
    require_rank2(logits, "cross_entropy logits");
    const size_t t = logits.rows(), v = logits.cols();
    if (targets.size() != t || mask.size() != t)
      throw DimensionError(
          "cross_entropy: logits " + detail::shape_str(logits.shape()) +
          " with " + std::to_string(targets.size()) + " targets and " +
          std::to_string(mask.size()) + " mask entries");
    size_t n_masked = 0;
    for (unsigned char m : mask) n_masked += (m != 0);
    if (n_masked == 0)
      throw ValueError("cross_entropy: mask selects no positions");
    double loss = 0.0;
    for (size_t i = 0; i < t; ++i) {
      if (!mask[i]) continue;
      if (targets[i] < 0 || static_cast<size_t>(targets[i]) >= v)
        throw ValueError("cross_entropy: target " + std::to_string(targets[i]) +
                         " outside vocabulary of " + std::to_string(v));
      const double* row = logits.data() + i * v;
      double mx = row[0];
      for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
      loss += (mx + std::log(z)) - row[static_cast<size_t>(targets[i])];
    }
    Tensor out = make({1}, logits.requires_grad());
    out.data()[0] = loss / static_cast<double>(n_masked);
    if (out.requires_grad())
      record([logits, out, targets, mask, t, v, n_masked]() mutable {
        const double g = out.grad_data()[0] / static_cast<double>(n_masked);
        double* gx = logits.grad_data();
        for (size_t i = 0; i < t; ++i) {
          if (!mask[i]) continue;
          const double* row = logits.data() + i * v;
          double mx = row[0];
          for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
          double z = 0.0;
          for (size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
          double* grow = gx + i * v;
          for (size_t j = 0; j < v; ++j)
            grow[j] += g * std::exp(row[j] - mx) / z;
          grow[static_cast<size_t>(targets[i])] -= g;
        }
      });
    return out;
  }

  // Runs the recorded closures in reverse order, seeding d(loss)/d(loss) = 1.
  // One backward pass per tape; parameter gradients accumulate across tapes.
  void backward(const Tensor& loss) {
    if (loss.size() != 1)
      throw DimensionError("backward: loss must be a single element, got " +
                           detail::shape_str(loss.shape()));
    if (backward_ran_)
      throw ValueError("backward: tape already consumed; build a new tape");
    backward_ran_ = true;
    Tensor seed = loss;
    seed.grad_data()[0] += 1.0;
    for (auto it = backward_ops_.rbegin(); it != backward_ops_.rend(); ++it)
      (*it)();
  }

  size_t node_count() const { return backward_ops_.size(); }

 private:
  static void require_rank2(const Tensor& x, const char* what) {
    if (x.rank() != 2)
      throw DimensionError(std::string(what) + ": expected rank 2, got shape " +
                           detail::shape_str(x.shape()));
  }
  static void require_same_shape(const Tensor& a, const Tensor& b,
                                 const char* what) {
    if (a.shape() != b.shape())
      throw DimensionError(std::string(what) + ": shapes disagree, " +
                           detail::shape_str(a.shape()) + " vs " +
                           detail::shape_str(b.shape()));
  }

  Tensor make(std::vector<size_t> shape, bool requires_grad) {
    const bool rg = requires_grad && recording_;
    Tensor t = Tensor::zeros(std::move(shape), rg);
    if (rg) t.ensure_grad();
    return t;
  }

  void record(std::function<void()> fn) {
    backward_ops_.push_back(std::move(fn));
  }

  std::vector<std::function<void()>> backward_ops_;
  bool recording_ = true;
  bool backward_ran_ = false;
};

}  // namespace hypofuse
