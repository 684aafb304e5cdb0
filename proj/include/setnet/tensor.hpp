#pragma once

// Dense 64-bit tensors with reverse-mode gradients. The operation set is
// exactly what point-set networks need: dense layers, batch norm, column-wise
// max over a set, softmax cross entropy, dropout, plus the small glue ops
// (reshape, slicing, concatenation, broadcasts). Gradients accumulate
// additively into Tensor::grad; a Graph is a tape of backward closures
// replayed in reverse insertion order.
//
// All reductions run in a fixed left-to-right order so that repeated runs of
// the same program are bit-identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace setnet {

using Rng = std::mt19937_64;

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct EmptySetError : std::runtime_error {
  explicit EmptySetError(const std::string& m) : std::runtime_error(m) {}
};
struct LabelError : std::runtime_error {
  explicit LabelError(const std::string& m) : std::runtime_error(m) {}
};
struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& m) : std::runtime_error(m) {}
};
struct UnsupportedError : std::runtime_error {
  explicit UnsupportedError(const std::string& m) : std::runtime_error(m) {}
};

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

/// Dense n-dimensional array of doubles with a same-shape gradient buffer.
class Tensor {
 public:
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // zero after construction and zero_grad()
  bool requires_grad = false;

  Tensor(std::vector<std::size_t> shape_, std::vector<double> data_, bool rg)
      : shape(std::move(shape_)), data(std::move(data_)), requires_grad(rg) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extent must be positive");
      n *= e;
    }
    if (n != data.size())
      throw DimensionError("tensor data length does not match shape");
    grad.assign(n, 0.0);
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

inline TensorPtr tensor(std::vector<std::size_t> shape, std::vector<double> data,
                        bool requires_grad = false) {
  return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

inline TensorPtr zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

inline TensorPtr scalar(double v, bool requires_grad = false) {
  return tensor({1}, {v}, requires_grad);
}

inline TensorPtr identity_matrix(std::size_t d) {
  auto t = zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) t->data[i * d + i] = 1.0;
  return t;
}

inline bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape;
}

inline std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i)
    os << (i ? "x" : "") << t.shape[i];
  os << "]";
  return os.str();
}

/// Tape of recorded operations in insertion (topological) order. backward()
/// zeroes the gradients of every tensor the tape produced, seeds the scalar
/// root with 1, and replays the backward rules in reverse order. Derived
/// gradients are therefore rebuilt from scratch on every pass while leaf
/// tensors (anything not produced by this tape) accumulate additively, so
/// running backward twice doubles leaf gradients.
class Graph {
 public:
  void record(TensorPtr output, std::function<void()> backward_rule) {
    nodes_.push_back({std::move(output), std::move(backward_rule)});
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(const TensorPtr& root) {
    if (root->size() != 1)
      throw DimensionError("backward requires a scalar root");
    for (auto& n : nodes_) n.out->zero_grad();
    root->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->rule();
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    TensorPtr out;
    std::function<void()> rule;
  };
  std::vector<Node> nodes_;
};

namespace detail {

inline bool want_grad(Graph* g, std::initializer_list<const TensorPtr*> ins) {
  if (!g) return false;
  for (const TensorPtr* t : ins)
    if ((*t)->requires_grad) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

inline TensorPtr matmul(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->cols() != b->rows())
    throw DimensionError("matmul shape mismatch: " + shape_str(*a) + " x " +
                         shape_str(*b));
  const std::size_t r = a->rows(), k = a->cols(), c = b->cols();
  auto out = zeros({r, c});
  out->requires_grad = detail::want_grad(g, {&a, &b});
  const double* A = a->data.data();
  const double* B = b->data.data();
  double* C = out->data.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* Bp = B + p * c;
      double* Ci = C + i * c;
      for (std::size_t j = 0; j < c; ++j) Ci[j] += aip * Bp[j];
    }
  if (out->requires_grad)
    g->record(out, [a, b, out, r, k, c] {
      const double* dC = out->grad.data();
      if (a->requires_grad) {
        double* dA = a->grad.data();
        const double* B = b->data.data();
        // dA = dC * B^T
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double* dCi = dC + i * c;
            const double* Bp = B + p * c;
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += dCi[j] * Bp[j];
            dA[i * k + p] += s;
          }
      }
      if (b->requires_grad) {
        double* dB = b->grad.data();
        const double* A = a->data.data();
        // dB = A^T * dC
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            const double* dCi = dC + i * c;
            double* dBp = dB + p * c;
            for (std::size_t j = 0; j < c; ++j) dBp[j] += aip * dCi[j];
          }
      }
    });
  return out;
}

inline TensorPtr transpose(Graph* g, const TensorPtr& x) {
  if (x->rank() != 2) throw DimensionError("transpose expects a matrix");
  const std::size_t r = x->rows(), c = x->cols();
  auto out = zeros({c, r});
  out->requires_grad = detail::want_grad(g, {&x});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out->data[j * r + i] = x->data[i * c + j];
  if (out->requires_grad)
    g->record(out, [x, out, r, c] {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          x->grad[i * c + j] += out->grad[j * r + i];
    });
  return out;
}

inline TensorPtr reshape(Graph* g, const TensorPtr& x, std::vector<std::size_t> shape) {
  auto out = tensor(std::move(shape), x->data);
  if (out->size() != x->size())
    throw DimensionError("reshape changes element count");
  out->requires_grad = detail::want_grad(g, {&x});
  if (out->requires_grad)
    g->record(out, [x, out] {
      for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
    });
  return out;
}

inline TensorPtr add(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  if (!same_shape(*a, *b)) throw DimensionError("add shape mismatch");
  auto out = zeros(a->shape);
  out->requires_grad = detail::want_grad(g, {&a, &b});
  for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] + b->data[i];
  if (out->requires_grad)
    g->record(out, [a, b, out] {
      if (a->requires_grad)
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] += out->grad[i];
    });
  return out;
}

inline TensorPtr sub(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  if (!same_shape(*a, *b)) throw DimensionError("sub shape mismatch");
  auto out = zeros(a->shape);
  out->requires_grad = detail::want_grad(g, {&a, &b});
  for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] - b->data[i];
  if (out->requires_grad)
    g->record(out, [a, b, out] {
      if (a->requires_grad)
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] -= out->grad[i];
    });
  return out;
}

inline TensorPtr mul(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  if (!same_shape(*a, *b)) throw DimensionError("mul shape mismatch");
  auto out = zeros(a->shape);
  out->requires_grad = detail::want_grad(g, {&a, &b});
  for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] * b->data[i];
  if (out->requires_grad)
    g->record(out, [a, b, out] {
      if (a->requires_grad)
        for (std::size_t i = 0; i < a->size(); ++i)
          a->grad[i] += out->grad[i] * b->data[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < b->size(); ++i)
          b->grad[i] += out->grad[i] * a->data[i];
    });
  return out;
}

inline TensorPtr scale(Graph* g, const TensorPtr& x, double c) {
  auto out = zeros(x->shape);
  out->requires_grad = detail::want_grad(g, {&x});
  for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = x->data[i] * c;
  if (out->requires_grad)
    g->record(out, [x, out, c] {
      for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i] * c;
    });
  return out;
}

// x[n x d] + row vector b[d], broadcast over rows.
inline TensorPtr add_rowvec(Graph* g, const TensorPtr& x, const TensorPtr& b) {
  if (x->rank() != 2 || b->size() != x->cols())
    throw DimensionError("add_rowvec shape mismatch");
  const std::size_t n = x->rows(), d = x->cols();
  auto out = zeros(x->shape);
  out->requires_grad = detail::want_grad(g, {&x, &b});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out->data[i * d + j] = x->data[i * d + j] + b->data[j];
  if (out->requires_grad)
    g->record(out, [x, b, out, n, d] {
      if (x->requires_grad)
        for (std::size_t i = 0; i < n * d; ++i) x->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (std::size_t j = 0; j < d; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < n; ++i) s += out->grad[i * d + j];
          b->grad[j] += s;
        }
    });
  return out;
}

// v[d] replicated into n rows.
inline TensorPtr broadcast_row(Graph* g, const TensorPtr& v, std::size_t n) {
  const std::size_t d = v->size();
  auto out = zeros({n, d});
  out->requires_grad = detail::want_grad(g, {&v});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out->data[i * d + j] = v->data[j];
  if (out->requires_grad)
    g->record(out, [v, out, n, d] {
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += out->grad[i * d + j];
        v->grad[j] += s;
      }
    });
  return out;
}

inline TensorPtr relu(Graph* g, const TensorPtr& x) {
  auto out = zeros(x->shape);
  out->requires_grad = detail::want_grad(g, {&x});
  for (std::size_t i = 0; i < x->size(); ++i)
    out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
  if (out->requires_grad)
    g->record(out, [x, out] {
      // subgradient 0 at exactly 0
      for (std::size_t i = 0; i < x->size(); ++i)
        if (x->data[i] > 0.0) x->grad[i] += out->grad[i];
    });
  return out;
}

inline TensorPtr slice_rows(Graph* g, const TensorPtr& x, std::size_t r0,
                            std::size_t r1) {
  if (x->rank() != 2 || r0 >= r1 || r1 > x->rows())
    throw DimensionError("slice_rows out of range");
  const std::size_t d = x->cols(), n = r1 - r0;
  auto out = zeros({n, d});
  out->requires_grad = detail::want_grad(g, {&x});
  std::copy(x->data.begin() + r0 * d, x->data.begin() + r1 * d, out->data.begin());
  if (out->requires_grad)
    g->record(out, [x, out, r0, d, n] {
      for (std::size_t i = 0; i < n * d; ++i) x->grad[r0 * d + i] += out->grad[i];
    });
  return out;
}

inline TensorPtr concat_rows(Graph* g, const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw EmptySetError("concat_rows of nothing");
  const std::size_t d = parts[0]->cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->cols() != d)
      throw DimensionError("concat_rows column mismatch");
    n += p->rows();
  }
  auto out = zeros({n, d});
  bool rg = false;
  for (const auto& p : parts) rg = rg || (g && p->requires_grad);
  out->requires_grad = rg;
  std::size_t row = 0;
  for (const auto& p : parts) {
    std::copy(p->data.begin(), p->data.end(), out->data.begin() + row * d);
    row += p->rows();
  }
  if (out->requires_grad)
    g->record(out, [parts, out, d] {
      std::size_t row = 0;
      for (const auto& p : parts) {
        if (p->requires_grad)
          for (std::size_t i = 0; i < p->size(); ++i)
            p->grad[i] += out->grad[row * d + i];
        row += p->rows();
      }
    });
  return out;
}

inline TensorPtr concat_cols(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->rows() != b->rows())
    throw DimensionError("concat_cols row mismatch");
  const std::size_t n = a->rows(), p = a->cols(), q = b->cols();
  auto out = zeros({n, p + q});
  out->requires_grad = detail::want_grad(g, {&a, &b});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a->data.begin() + i * p, a->data.begin() + (i + 1) * p,
              out->data.begin() + i * (p + q));
    std::copy(b->data.begin() + i * q, b->data.begin() + (i + 1) * q,
              out->data.begin() + i * (p + q) + p);
  }
  if (out->requires_grad)
    g->record(out, [a, b, out, n, p, q] {
      for (std::size_t i = 0; i < n; ++i) {
        if (a->requires_grad)
          for (std::size_t j = 0; j < p; ++j)
            a->grad[i * p + j] += out->grad[i * (p + q) + j];
        if (b->requires_grad)
          for (std::size_t j = 0; j < q; ++j)
            b->grad[i * q + j] += out->grad[i * (p + q) + p + j];
      }
    });
  return out;
}

inline TensorPtr sum_all(Graph* g, const TensorPtr& x) {
  auto out = scalar(0.0);
  out->requires_grad = detail::want_grad(g, {&x});
  double s = 0.0;
  for (std::size_t i = 0; i < x->size(); ++i) s += x->data[i];
  out->data[0] = s;
  if (out->requires_grad)
    g->record(out, [x, out] {
      for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[0];
    });
  return out;
}

inline TensorPtr mean_all(Graph* g, const TensorPtr& x) {
  auto out = sum_all(g, x);
  return scale(g, out, 1.0 / static_cast<double>(x->size()));
}

// Column-wise mean of an n x d matrix.
inline TensorPtr mean_rows(Graph* g, const TensorPtr& x) {
  if (x->rank() != 2) throw DimensionError("mean_rows expects a matrix");
  if (x->rows() == 0) throw EmptySetError("mean_rows of empty set");
  const std::size_t n = x->rows(), d = x->cols();
  auto out = zeros({d});
  out->requires_grad = detail::want_grad(g, {&x});
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x->data[i * d + j];
    out->data[j] = s / static_cast<double>(n);
  }
  if (out->requires_grad)
    g->record(out, [x, out, n, d] {
      const double inv = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
          x->grad[i * d + j] += out->grad[j] * inv;
    });
  return out;
}

/// Column-wise maximum over the rows of an n x K matrix, with the index of
/// the first row attaining each maximum. Backward routes each column's
/// gradient only to its argmax row.
struct MaxOverSet {
  TensorPtr values;                 // [K]
  std::vector<std::size_t> argmax;  // [K], lowest attaining row index
};

inline MaxOverSet max_over_set(Graph* g, const TensorPtr& x) {
  if (x->rank() != 2) throw DimensionError("max_over_set expects a matrix");
  const std::size_t n = x->rows(), k = x->cols();
  if (n == 0) throw EmptySetError("max_over_set of empty set");
  MaxOverSet r;
  r.values = zeros({k});
  r.values->requires_grad = detail::want_grad(g, {&x});
  r.argmax.assign(k, 0);
  for (std::size_t j = 0; j < k; ++j) {
    double best = x->data[j];
    std::size_t arg = 0;
    for (std::size_t i = 1; i < n; ++i) {
      const double v = x->data[i * k + j];
      if (v > best) {  // strict: ties keep the lowest row index
        best = v;
        arg = i;
      }
    }
    r.values->data[j] = best;
    r.argmax[j] = arg;
  }
  if (r.values->requires_grad) {
    auto out = r.values;
    auto arg = r.argmax;
    g->record(out, [x, out, arg, k] {
      for (std::size_t j = 0; j < k; ++j) x->grad[arg[j] * k + j] += out->grad[j];
    });
  }
  return r;
}

/// Softmax of a single column vector [n] or [n x 1].
inline TensorPtr softmax_vec(Graph* g, const TensorPtr& x) {
  const std::size_t n = x->size();
  if (n == 0) throw EmptySetError("softmax of empty vector");
  auto out = zeros(x->shape);
  out->requires_grad = detail::want_grad(g, {&x});
  double mx = x->data[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x->data[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out->data[i] = std::exp(x->data[i] - mx);
    z += out->data[i];
  }
  for (std::size_t i = 0; i < n; ++i) out->data[i] /= z;
  if (out->requires_grad)
    g->record(out, [x, out, n] {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += out->grad[i] * out->data[i];
      for (std::size_t i = 0; i < n; ++i)
        x->grad[i] += out->data[i] * (out->grad[i] - dot);
    });
  return out;
}

/// Mean over the batch of -log softmax(logits)[label], stabilized by
/// max-subtraction. Backward is (softmax - one_hot) / batch.
inline TensorPtr softmax_cross_entropy(Graph* g, const TensorPtr& logits,
                                       const std::vector<int>& labels) {
  if (logits->rank() != 2) throw DimensionError("logits must be batch x classes");
  const std::size_t b = logits->rows(), c = logits->cols();
  if (labels.size() != b) throw DimensionError("label count != batch size");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= c)
      throw LabelError("label out of range [0, classes)");
  auto probs = std::make_shared<std::vector<double>>(b * c, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits->data.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      (*probs)[i * c + j] = std::exp(row[j] - mx);
      z += (*probs)[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= z;
    loss += -(row[labels[i]] - mx - std::log(z));
  }
  auto out = scalar(loss / static_cast<double>(b));
  out->requires_grad = detail::want_grad(g, {&logits});
  if (out->requires_grad)
    g->record(out, [logits, out, probs, labels, b, c] {
      const double up = out->grad[0] / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          double p = (*probs)[i * c + j];
          if (j == static_cast<std::size_t>(labels[i])) p -= 1.0;
          logits->grad[i * c + j] += up * p;
        }
    });
  return out;
}

enum class Mode { train, eval };

/// Inverted dropout: train mode zeroes each element with probability
/// 1 - keep_prob and scales survivors by 1/keep_prob; eval mode is identity.
inline TensorPtr dropout(Graph* g, const TensorPtr& x, double keep_prob, Mode mode,
                         Rng& rng) {
  if (!(keep_prob > 0.0) || keep_prob > 1.0)
    throw ConfigError("dropout keep_prob must be in (0, 1]");
  if (mode == Mode::eval || keep_prob == 1.0) {
    auto out = tensor(x->shape, x->data);
    out->requires_grad = detail::want_grad(g, {&x});
    if (out->requires_grad)
      g->record(out, [x, out] {
        for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
      });
    return out;
  }
  auto mask = std::make_shared<std::vector<double>>(x->size(), 0.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double inv = 1.0 / keep_prob;
  for (std::size_t i = 0; i < x->size(); ++i)
    (*mask)[i] = uni(rng) < keep_prob ? inv : 0.0;
  auto out = zeros(x->shape);
  out->requires_grad = detail::want_grad(g, {&x});
  for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = x->data[i] * (*mask)[i];
  if (out->requires_grad)
    g->record(out, [x, out, mask] {
      for (std::size_t i = 0; i < x->size(); ++i)
        x->grad[i] += out->grad[i] * (*mask)[i];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Running statistics of one batch-norm layer. Train mode updates them as
/// running <- momentum * running + (1 - momentum) * batch_stat.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;

  explicit BatchNormState(std::size_t width = 0)
      : running_mean(width, 0.0), running_var(width, 1.0) {}
};

inline TensorPtr batch_norm(Graph* g, const TensorPtr& x, BatchNormState& state,
                            Mode mode, const TensorPtr& gamma, const TensorPtr& beta,
                            double momentum, double eps, bool update_running = true) {
  if (x->rank() != 2) throw DimensionError("batch_norm expects batch x features");
  const std::size_t n = x->rows(), f = x->cols();
  if (gamma->size() != f || beta->size() != f || state.running_mean.size() != f)
    throw DimensionError("batch_norm parameter width mismatch");
  if (mode == Mode::train && n < 2)
    throw ConfigError("batch_norm train mode needs batch >= 2");

  auto out = zeros(x->shape);
  out->requires_grad = detail::want_grad(g, {&x, &gamma, &beta});

  if (mode == Mode::eval) {
    auto inv_std = std::make_shared<std::vector<double>>(f);
    for (std::size_t j = 0; j < f; ++j)
      (*inv_std)[j] = 1.0 / std::sqrt(state.running_var[j] + eps);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) {
        const double xhat = (x->data[i * f + j] - state.running_mean[j]) * (*inv_std)[j];
        out->data[i * f + j] = gamma->data[j] * xhat + beta->data[j];
      }
    if (out->requires_grad) {
      auto mean = std::make_shared<std::vector<double>>(state.running_mean);
      g->record(out, [x, gamma, beta, out, mean, inv_std, n, f] {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < f; ++j) {
            const double dy = out->grad[i * f + j];
            const double xhat = (x->data[i * f + j] - (*mean)[j]) * (*inv_std)[j];
            if (gamma->requires_grad) gamma->grad[j] += dy * xhat;
            if (beta->requires_grad) beta->grad[j] += dy;
            if (x->requires_grad)
              x->grad[i * f + j] += dy * gamma->data[j] * (*inv_std)[j];
          }
      });
    }
    return out;
  }

  // train mode: normalize by batch statistics
  auto mean = std::make_shared<std::vector<double>>(f, 0.0);
  auto var = std::make_shared<std::vector<double>>(f, 0.0);
  auto inv_std = std::make_shared<std::vector<double>>(f, 0.0);
  for (std::size_t j = 0; j < f; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x->data[i * f + j];
    (*mean)[j] = s / static_cast<double>(n);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x->data[i * f + j] - (*mean)[j];
      v += d * d;
    }
    (*var)[j] = v / static_cast<double>(n);
    (*inv_std)[j] = 1.0 / std::sqrt((*var)[j] + eps);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double xhat = (x->data[i * f + j] - (*mean)[j]) * (*inv_std)[j];
      out->data[i * f + j] = gamma->data[j] * xhat + beta->data[j];
    }
  if (update_running)
    for (std::size_t j = 0; j < f; ++j) {
      state.running_mean[j] = momentum * state.running_mean[j] + (1.0 - momentum) * (*mean)[j];
      state.running_var[j] = momentum * state.running_var[j] + (1.0 - momentum) * (*var)[j];
    }

  if (out->requires_grad)
    g->record(out, [x, gamma, beta, out, mean, inv_std, n, f] {
      // full gradient including the batch-statistic terms
      const double invn = 1.0 / static_cast<double>(n);
      for (std::size_t j = 0; j < f; ++j) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double dy = out->grad[i * f + j];
          const double xhat = (x->data[i * f + j] - (*mean)[j]) * (*inv_std)[j];
          sum_dy += dy;
          sum_dy_xhat += dy * xhat;
        }
        if (gamma->requires_grad) gamma->grad[j] += sum_dy_xhat;
        if (beta->requires_grad) beta->grad[j] += sum_dy;
        if (x->requires_grad) {
          const double gj = gamma->data[j] * (*inv_std)[j];
          for (std::size_t i = 0; i < n; ++i) {
            const double dy = out->grad[i * f + j];
            const double xhat = (x->data[i * f + j] - (*mean)[j]) * (*inv_std)[j];
            x->grad[i * f + j] +=
                gj * (dy - invn * sum_dy - invn * xhat * sum_dy_xhat);
          }
        }
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Bias-corrected Adam. m and v always have the same total length as the
/// parameter vector.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(std::span<double> params, std::span<const double> grads,
                      AdamState& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size())
    throw DimensionError("adam_step length mismatch");
  state.step += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
  }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// A scalar-valued tensor program. Called with a non-null graph when the
/// analytic gradient is wanted, and with nullptr for pure value evaluation.
/// Must be free of persistent side effects.
using ScalarFn = std::function<TensorPtr(Graph*, const std::vector<TensorPtr>&)>;

/// Central-difference gradient check. Returns the max over all coordinates of
/// |analytic - numeric| / max(1, |analytic|).
inline double finite_difference_check(const ScalarFn& fn,
                                      const std::vector<TensorPtr>& inputs,
                                      double h = 1e-5) {
  for (const auto& t : inputs) t->requires_grad = true;
  Graph g;
  auto out = fn(&g, inputs);
  if (out->size() != 1) throw DimensionError("gradient check needs a scalar output");
  if (!std::isfinite(out->data[0])) throw NumericError("non-finite function value");
  for (const auto& t : inputs) t->zero_grad();
  g.backward(out);

  double max_err = 0.0;
  for (const auto& t : inputs) {
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double saved = t->data[i];
      t->data[i] = saved + h;
      const double fp = fn(nullptr, inputs)->data[0];
      t->data[i] = saved - h;
      const double fm = fn(nullptr, inputs)->data[0];
      t->data[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("non-finite value during finite differences");
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = t->grad[i];
      const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace setnet
