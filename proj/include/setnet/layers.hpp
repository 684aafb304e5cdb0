#pragma once

// Point-set layer primitives: dense layers shared across all points of a
// cloud, batch normalization wrappers, the three symmetric aggregators
// (max, average, attention-weighted sum), and canonical row sorting.

#include "setnet/tensor.hpp"

namespace setnet {

inline TensorPtr glorot_uniform(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> uni(-limit, limit);
  auto w = zeros({in, out});
  for (auto& v : w->data) v = uni(rng);
  return w;
}

/// One dense layer y = x W + b applied row-wise. Parameters require grad.
struct Dense {
  TensorPtr W;
  TensorPtr b;

  Dense() = default;
  Dense(std::size_t in, std::size_t out, Rng& rng)
      : W(glorot_uniform(in, out, rng)), b(zeros({out})) {
    W->requires_grad = true;
    b->requires_grad = true;
  }

  std::size_t in_width() const { return W->rows(); }
  std::size_t out_width() const { return W->cols(); }

  TensorPtr forward(Graph* g, const TensorPtr& x) const {
    return add_rowvec(g, matmul(g, x, W), b);
  }
};

/// Batch-norm layer: learnable gamma/beta plus running statistics.
struct BNLayer {
  TensorPtr gamma;
  TensorPtr beta;
  BatchNormState state;
  double eps = 1e-5;

  BNLayer() = default;
  explicit BNLayer(std::size_t width)
      : gamma(tensor({width}, std::vector<double>(width, 1.0))),
        beta(zeros({width})),
        state(width) {
    gamma->requires_grad = true;
    beta->requires_grad = true;
  }

  TensorPtr forward(Graph* g, const TensorPtr& x, Mode mode, double momentum,
                    bool update_running = true) {
    return batch_norm(g, x, state, mode, gamma, beta, momentum, eps, update_running);
  }
};

enum class FinalActivation { relu, none };

struct SharedMLPSpec {
  std::vector<std::size_t> layer_widths;  // output width of each layer
  bool use_batch_norm = true;
  FinalActivation final_activation = FinalActivation::relu;
};

/// A stack of dense(+BN)(+ReLU) layers applied identically to every row, so
/// it commutes with row permutations in eval mode.
struct SharedMLP {
  SharedMLPSpec spec;
  std::vector<Dense> dense;
  std::vector<BNLayer> bn;

  SharedMLP() = default;
  SharedMLP(std::size_t in_dim, SharedMLPSpec s, Rng& rng) : spec(std::move(s)) {
    if (spec.layer_widths.empty())
      throw ConfigError("shared MLP needs at least one layer");
    std::size_t prev = in_dim;
    for (std::size_t w : spec.layer_widths) {
      dense.emplace_back(prev, w, rng);
      if (spec.use_batch_norm) bn.emplace_back(w);
      prev = w;
    }
  }

  std::size_t in_width() const { return dense.front().in_width(); }
  std::size_t out_width() const { return dense.back().out_width(); }

  TensorPtr forward(Graph* g, const TensorPtr& points, Mode mode,
                    double momentum = 0.5, bool update_running = true) {
    if (points->rank() != 2 || points->cols() != in_width())
      throw DimensionError("shared MLP input width mismatch: got " +
                           shape_str(*points));
    TensorPtr h = points;
    for (std::size_t i = 0; i < dense.size(); ++i) {
      h = dense[i].forward(g, h);
      if (spec.use_batch_norm) h = bn[i].forward(g, h, mode, momentum, update_running);
      const bool last = (i + 1 == dense.size());
      if (!last || spec.final_activation == FinalActivation::relu) h = relu(g, h);
    }
    return h;
  }
};

enum class AggKind { max, average, attention };

/// Order-invariant set aggregation. Attention predicts one scalar score per
/// row, softmax-normalizes the scores across rows, and takes the weighted sum;
/// its score layer starts at zero so an untrained aggregator behaves like
/// average pooling.
struct Aggregator {
  AggKind kind = AggKind::max;
  Dense score;  // K -> 1, attention only

  Aggregator() = default;
  Aggregator(AggKind k, std::size_t feature_width) : kind(k) {
    if (kind == AggKind::attention) {
      score.W = zeros({feature_width, 1}, true);
      score.b = zeros({1}, true);
    }
  }

  TensorPtr forward(Graph* g, const TensorPtr& features) {
    if (features->rank() != 2) throw DimensionError("aggregate expects n x K");
    switch (kind) {
      case AggKind::max:
        return max_over_set(g, features).values;
      case AggKind::average:
        return mean_rows(g, features);
      case AggKind::attention: {
        auto raw = score.forward(g, features);        // n x 1
        auto w = softmax_vec(g, raw);                 // n x 1, sums to 1
        auto pooled = matmul(g, transpose(g, w), features);  // 1 x K
        return reshape(g, pooled, {features->cols()});
      }
    }
    throw ConfigError("unknown aggregator kind");
  }
};

inline TensorPtr aggregate(Graph* g, const TensorPtr& features, Aggregator& agg) {
  return agg.forward(g, features);
}

/// Rows sorted lexicographically by coordinate (dim 0, then 1, ...). Stable,
/// so duplicate rows keep their relative order. Backward scatters gradients
/// through the permutation.
inline TensorPtr sort_canonical(Graph* g, const TensorPtr& points) {
  if (points->rank() != 2) throw DimensionError("sort_canonical expects n x d");
  const std::size_t n = points->rows(), d = points->cols();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (std::size_t j = 0; j < d; ++j) {
      const double va = points->data[a * d + j], vb = points->data[b * d + j];
      if (va != vb) return va < vb;
    }
    return false;
  });
  auto out = zeros({n, d});
  out->requires_grad = detail::want_grad(g, {&points});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out->data[i * d + j] = points->data[order[i] * d + j];
  if (out->requires_grad)
    g->record(out, [points, out, order, n, d] {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
          points->grad[order[i] * d + j] += out->grad[i * d + j];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Parameter traversal
// ---------------------------------------------------------------------------
// Serialization, optimizer flattening and parameter counting all walk the
// same fixed order: per dense layer W then b, then that layer's BN gamma and
// beta. Running statistics are not learnable and are visited separately.

template <class F>
void visit_params(Dense& layer, F&& f) {
  f(layer.W);
  f(layer.b);
}

template <class F>
void visit_params(BNLayer& layer, F&& f) {
  f(layer.gamma);
  f(layer.beta);
}

template <class F>
void visit_params(SharedMLP& mlp, F&& f) {
  for (std::size_t i = 0; i < mlp.dense.size(); ++i) {
    visit_params(mlp.dense[i], f);
    if (mlp.spec.use_batch_norm) visit_params(mlp.bn[i], f);
  }
}

template <class F>
void visit_params(Aggregator& agg, F&& f) {
  if (agg.kind == AggKind::attention) visit_params(agg.score, f);
}

template <class F>
void visit_bn_states(SharedMLP& mlp, F&& f) {
  for (auto& layer : mlp.bn) f(layer.state);
}

}  // namespace setnet
