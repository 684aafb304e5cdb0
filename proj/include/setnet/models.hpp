#pragma once

// Point-set network models: alignment T-nets, the classification network,
// the segmentation / normal-estimation network, both loss terms, parameter
// counting, and binary checkpoints.
//
// Batching convention: a batch of b clouds is one (n_1+...+n_b) x d matrix
// plus an offsets array. Per-point stages run on all points jointly (so batch
// norm pools statistics across every point in the batch); per-cloud stages
// (max aggregation, the FC head) operate on b rows.

#include <cstring>
#include <fstream>
#include <optional>

#include "setnet/layers.hpp"

namespace setnet {

struct CloudBatch {
  TensorPtr points;                  // (sum n_i) x d
  std::vector<std::size_t> offsets;  // size b+1, offsets[0] == 0

  std::size_t count() const { return offsets.size() - 1; }
  std::size_t cloud_size(std::size_t i) const {
    return offsets[i + 1] - offsets[i];
  }
};

inline CloudBatch make_batch(const std::vector<TensorPtr>& clouds) {
  if (clouds.empty()) throw EmptySetError("batch of zero clouds");
  CloudBatch b;
  b.offsets.push_back(0);
  for (const auto& c : clouds) {
    if (c->rank() != 2 || c->cols() != clouds[0]->cols())
      throw DimensionError("clouds in a batch must share point dimension");
    b.offsets.push_back(b.offsets.back() + c->rows());
  }
  b.points = clouds.size() == 1 ? clouds[0] : concat_rows(nullptr, clouds);
  return b;
}

struct ForwardOptions {
  Mode mode = Mode::eval;
  double momentum = 0.5;       // batch-norm running-stat decay
  bool update_running = true;  // false keeps BN state untouched (grad checks)
  Rng* rng = nullptr;          // consumed by dropout in train mode
};

// ---------------------------------------------------------------------------
// T-net
// ---------------------------------------------------------------------------

struct TNetSpec {
  std::size_t input_dim = 3;
  std::vector<std::size_t> mlp_widths{64, 128, 1024};
  std::vector<std::size_t> fc_widths{512, 256};
};

/// Mini-network predicting one input_dim x input_dim alignment matrix per
/// cloud. The final layer starts as zero weights with an identity bias, so a
/// freshly initialized T-net outputs exactly I for any input.
struct TNet {
  TNetSpec spec;
  SharedMLP mlp;
  Dense fc1, fc2;
  BNLayer bn1, bn2;
  Dense out;

  TNet() = default;
  TNet(TNetSpec s, Rng& rng) : spec(std::move(s)) {
    SharedMLPSpec ms;
    ms.layer_widths = spec.mlp_widths;
    mlp = SharedMLP(spec.input_dim, ms, rng);
    fc1 = Dense(spec.mlp_widths.back(), spec.fc_widths[0], rng);
    bn1 = BNLayer(spec.fc_widths[0]);
    fc2 = Dense(spec.fc_widths[0], spec.fc_widths[1], rng);
    bn2 = BNLayer(spec.fc_widths[1]);
    const std::size_t d = spec.input_dim;
    out = Dense(spec.fc_widths[1], d * d, rng);
    std::fill(out.W->data.begin(), out.W->data.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) out.b->data[i * d + i] = 1.0;
  }

  // points: (sum n_i) x d  ->  b x d*d, one flattened matrix per cloud
  TensorPtr forward(Graph* g, const TensorPtr& points,
                    const std::vector<std::size_t>& offsets,
                    const ForwardOptions& opts) {
    auto h = mlp.forward(g, points, opts.mode, opts.momentum, opts.update_running);
    std::vector<TensorPtr> pooled;
    for (std::size_t i = 0; i + 1 < offsets.size(); ++i) {
      auto fi = slice_rows(g, h, offsets[i], offsets[i + 1]);
      auto mx = max_over_set(g, fi).values;
      pooled.push_back(reshape(g, mx, {1, mx->size()}));
    }
    auto u = concat_rows(g, pooled);  // b x 1024
    auto z = relu(g, bn1.forward(g, fc1.forward(g, u), opts.mode, opts.momentum,
                                 opts.update_running));
    z = relu(g, bn2.forward(g, fc2.forward(g, z), opts.mode, opts.momentum,
                            opts.update_running));
    return out.forward(g, z);  // b x d*d
  }
};

/// Row-vector transform: every point x becomes x * M.
inline TensorPtr apply_transform(Graph* g, const TensorPtr& points,
                                 const TensorPtr& m) {
  if (m->rank() != 2 || m->rows() != m->cols() || points->cols() != m->rows())
    throw DimensionError("apply_transform shape mismatch");
  return matmul(g, points, m);
}

// Applies cloud i's matrix (row i of mats, reshaped d x d) to cloud i's rows.
inline TensorPtr apply_batched_transform(Graph* g, const TensorPtr& points,
                                         const std::vector<std::size_t>& offsets,
                                         const TensorPtr& mats) {
  const std::size_t d = points->cols();
  if (mats->cols() != d * d || mats->rows() + 1 != offsets.size())
    throw DimensionError("batched transform shape mismatch");
  std::vector<TensorPtr> parts;
  for (std::size_t i = 0; i + 1 < offsets.size(); ++i) {
    auto mi = reshape(g, slice_rows(g, mats, i, i + 1), {d, d});
    auto pi = slice_rows(g, points, offsets[i], offsets[i + 1]);
    parts.push_back(matmul(g, pi, mi));
  }
  return parts.size() == 1 ? parts[0] : concat_rows(g, parts);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// || I - A A^T ||_F^2, the alignment regularizer.
inline TensorPtr orthogonality_loss(Graph* g, const TensorPtr& a) {
  if (a->rank() != 2 || a->rows() != a->cols())
    throw DimensionError("orthogonality_loss expects a square matrix");
  auto diff = sub(g, identity_matrix(a->rows()), matmul(g, a, transpose(g, a)));
  return sum_all(g, mul(g, diff, diff));
}

// Mean orthogonality loss over a batch of flattened d x d matrices.
inline TensorPtr orthogonality_loss_batched(Graph* g, const TensorPtr& mats,
                                            std::size_t d) {
  if (mats->cols() != d * d)
    throw DimensionError("batched orthogonality loss width mismatch");
  TensorPtr acc;
  for (std::size_t i = 0; i < mats->rows(); ++i) {
    auto mi = reshape(g, slice_rows(g, mats, i, i + 1), {d, d});
    auto li = orthogonality_loss(g, mi);
    acc = acc ? add(g, acc, li) : li;
  }
  return scale(g, acc, 1.0 / static_cast<double>(mats->rows()));
}

/// task_loss + reg_weight * L_reg(A); pass a null transform to skip the term.
inline TensorPtr total_loss(Graph* g, const TensorPtr& task_loss,
                            const TensorPtr& feature_transform, double reg_weight) {
  if (!feature_transform || reg_weight == 0.0) return task_loss;
  return add(g, task_loss,
             scale(g, orthogonality_loss(g, feature_transform), reg_weight));
}

inline TensorPtr total_loss_batched(Graph* g, const TensorPtr& task_loss,
                                    const TensorPtr& mats, std::size_t d,
                                    double reg_weight) {
  if (!mats || reg_weight == 0.0) return task_loss;
  return add(g, task_loss,
             scale(g, orthogonality_loss_batched(g, mats, d), reg_weight));
}

/// Mean over rows of 1 - |cos(pred_i, gt_i)|. Predictions need not be unit
/// length; a vanishing denominator is guarded by 1e-12.
inline TensorPtr cosine_normal_loss(Graph* g, const TensorPtr& pred,
                                    const TensorPtr& gt) {
  if (!same_shape(*pred, *gt) || pred->rank() != 2)
    throw DimensionError("cosine_normal_loss shape mismatch");
  const std::size_t n = pred->rows(), d = pred->cols();
  const double eps = 1e-12;
  auto rows = std::make_shared<std::vector<double>>();  // a, |p|, |t|, s per row
  rows->reserve(n * 4);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double a = 0.0, pp = 0.0, tt = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double p = pred->data[i * d + j], t = gt->data[i * d + j];
      a += p * t;
      pp += p * p;
      tt += t * t;
    }
    const double pn = std::sqrt(pp), tn = std::sqrt(tt);
    double den = pn * tn;
    if (den < eps) den = eps;  // zero-length prediction guard
    const double s = a / den;
    rows->push_back(a);
    rows->push_back(pn);
    rows->push_back(tn);
    rows->push_back(s);
    loss += 1.0 - std::abs(s);
  }
  auto out = scalar(loss / static_cast<double>(n));
  out->requires_grad = detail::want_grad(g, {&pred});
  if (out->requires_grad)
    g->record(out, [pred, gt, out, rows, n, d, eps] {
      const double up = out->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double a = (*rows)[i * 4 + 0];
        const double pn = (*rows)[i * 4 + 1];
        const double tn = (*rows)[i * 4 + 2];
        const double s = (*rows)[i * 4 + 3];
        const double sgn = s > 0.0 ? 1.0 : (s < 0.0 ? -1.0 : 0.0);
        if (sgn == 0.0) continue;
        double den = pn * tn;
        if (den < eps) den = eps;
        for (std::size_t j = 0; j < d; ++j) {
          const double p = pred->data[i * d + j], t = gt->data[i * d + j];
          double ds = t / den;
          if (pn > eps) ds -= a * tn * p / (pn * den * den);
          pred->grad[i * d + j] += up * (-sgn) * ds;
        }
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

struct ClassifierSpec {
  std::size_t input_dim = 3;
  bool use_input_transform = true;
  bool use_feature_transform = true;
  std::vector<std::size_t> pre_widths{64, 64};
  std::vector<std::size_t> post_widths{64, 128, 1024};  // last entry is K
  std::vector<std::size_t> fc_widths{512, 256};
  std::size_t num_classes = 40;
  double dropout_keep = 0.7;
  double reg_weight = 0.001;
  AggKind aggregator = AggKind::max;

  std::size_t bottleneck() const { return post_widths.back(); }
};

struct ClassifyOutput {
  TensorPtr logits;       // b x num_classes
  TensorPtr global;       // b x K
  TensorPtr penultimate;  // b x 256, input of the score layer
  TensorPtr point_feats;  // (sum n) x 64, after the feature transform
  TensorPtr set_feats;    // (sum n) x K, the per-point features fed to max
  std::vector<std::vector<std::size_t>> argmax;  // per cloud, max kind only
  TensorPtr input_transform;    // b x d*d, null when disabled
  TensorPtr feature_transform;  // b x 64*64, null when disabled
};

struct Classifier {
  ClassifierSpec spec;
  std::uint64_t init_seed = 0;
  std::optional<TNet> input_tnet;
  SharedMLP pre;
  std::optional<TNet> feature_tnet;
  SharedMLP post;
  Aggregator agg;
  Dense fc1, fc2;
  BNLayer bn1, bn2;
  Dense score;  // logits layer

  Classifier() = default;
  Classifier(ClassifierSpec s, std::uint64_t seed) : spec(std::move(s)), init_seed(seed) {
    Rng rng(seed);
    if (spec.use_input_transform) {
      TNetSpec ts;
      ts.input_dim = spec.input_dim;
      input_tnet.emplace(ts, rng);
    }
    SharedMLPSpec ps;
    ps.layer_widths = spec.pre_widths;
    pre = SharedMLP(spec.input_dim, ps, rng);
    if (spec.use_feature_transform) {
      TNetSpec ts;
      ts.input_dim = spec.pre_widths.back();
      feature_tnet.emplace(ts, rng);
    }
    SharedMLPSpec qs;
    qs.layer_widths = spec.post_widths;
    post = SharedMLP(spec.pre_widths.back(), qs, rng);
    agg = Aggregator(spec.aggregator, spec.bottleneck());
    fc1 = Dense(spec.bottleneck(), spec.fc_widths[0], rng);
    bn1 = BNLayer(spec.fc_widths[0]);
    fc2 = Dense(spec.fc_widths[0], spec.fc_widths[1], rng);
    bn2 = BNLayer(spec.fc_widths[1]);
    score = Dense(spec.fc_widths[1], spec.num_classes, rng);
  }

  ClassifyOutput forward(Graph* g, const CloudBatch& batch, const ForwardOptions& opts) {
    if (batch.points->cols() != spec.input_dim)
      throw DimensionError("classifier input dim mismatch");
    if (opts.mode == Mode::train && spec.dropout_keep < 1.0 && !opts.rng)
      throw ConfigError("train-mode forward needs an rng for dropout");
    ClassifyOutput r;
    TensorPtr pts = batch.points;
    if (input_tnet) {
      r.input_transform = input_tnet->forward(g, pts, batch.offsets, opts);
      pts = apply_batched_transform(g, pts, batch.offsets, r.input_transform);
    }
    auto h = pre.forward(g, pts, opts.mode, opts.momentum, opts.update_running);
    if (feature_tnet) {
      r.feature_transform = feature_tnet->forward(g, h, batch.offsets, opts);
      h = apply_batched_transform(g, h, batch.offsets, r.feature_transform);
    }
    r.point_feats = h;
    r.set_feats = post.forward(g, h, opts.mode, opts.momentum, opts.update_running);

    std::vector<TensorPtr> pooled;
    for (std::size_t i = 0; i < batch.count(); ++i) {
      auto fi = slice_rows(g, r.set_feats, batch.offsets[i], batch.offsets[i + 1]);
      TensorPtr v;
      if (spec.aggregator == AggKind::max) {
        auto mx = max_over_set(g, fi);
        r.argmax.push_back(mx.argmax);
        v = mx.values;
      } else {
        v = agg.forward(g, fi);
      }
      pooled.push_back(reshape(g, v, {1, v->size()}));
    }
    r.global = pooled.size() == 1 ? pooled[0] : concat_rows(g, pooled);

    auto z = relu(g, bn1.forward(g, fc1.forward(g, r.global), opts.mode,
                                 opts.momentum, opts.update_running));
    z = relu(g, bn2.forward(g, fc2.forward(g, z), opts.mode, opts.momentum,
                            opts.update_running));
    r.penultimate = z;
    Rng fallback(0);
    auto dropped = dropout(g, z, spec.dropout_keep, opts.mode,
                           opts.rng ? *opts.rng : fallback);
    r.logits = score.forward(g, dropped);
    return r;
  }

  /// The per-point feature map h: one point in, K features out, evaluated
  /// row-independently (eval-mode BN). Optional fixed alignment matrices
  /// condition h on a reference cloud; a vanilla model passes none.
  TensorPtr per_point_features(Graph* g, const TensorPtr& points,
                               const TensorPtr& input_m = nullptr,
                               const TensorPtr& feature_m = nullptr) {
    TensorPtr x = points;
    if (input_m) x = apply_transform(g, x, input_m);
    auto h = pre.forward(g, x, Mode::eval);
    if (feature_m) h = apply_transform(g, h, feature_m);
    return post.forward(g, h, Mode::eval);
  }
};

// ---------------------------------------------------------------------------
// Segmenter (also the normal-estimation head via out_width = 3)
// ---------------------------------------------------------------------------

struct SegmenterSpec {
  ClassifierSpec backbone;  // fc head fields unused here
  std::vector<std::size_t> head_widths{512, 256, 128};
  std::size_t num_parts = 50;
  bool category_conditioning = false;
  std::size_t num_categories = 0;

  std::size_t head_input_width() const {
    return backbone.pre_widths.back() + backbone.bottleneck() +
           (category_conditioning ? num_categories : 0);
  }
};

struct SegmentOutput {
  TensorPtr logits;       // (sum n) x num_parts
  TensorPtr global;       // b x K
  TensorPtr point_feats;  // (sum n) x 64
  TensorPtr set_feats;    // (sum n) x K
  std::vector<std::vector<std::size_t>> argmax;
  TensorPtr input_transform;
  TensorPtr feature_transform;
};

struct Segmenter {
  SegmenterSpec spec;
  std::uint64_t init_seed = 0;
  std::optional<TNet> input_tnet;
  SharedMLP pre;
  std::optional<TNet> feature_tnet;
  SharedMLP post;
  SharedMLP head;
  Dense part_score;

  Segmenter() = default;
  Segmenter(SegmenterSpec s, std::uint64_t seed) : spec(std::move(s)), init_seed(seed) {
    if (spec.category_conditioning && spec.num_categories == 0)
      throw ConfigError("category conditioning needs num_categories");
    Rng rng(seed);
    const auto& bb = spec.backbone;
    if (bb.use_input_transform) {
      TNetSpec ts;
      ts.input_dim = bb.input_dim;
      input_tnet.emplace(ts, rng);
    }
    SharedMLPSpec ps;
    ps.layer_widths = bb.pre_widths;
    pre = SharedMLP(bb.input_dim, ps, rng);
    if (bb.use_feature_transform) {
      TNetSpec ts;
      ts.input_dim = bb.pre_widths.back();
      feature_tnet.emplace(ts, rng);
    }
    SharedMLPSpec qs;
    qs.layer_widths = bb.post_widths;
    post = SharedMLP(bb.pre_widths.back(), qs, rng);
    SharedMLPSpec hs;
    hs.layer_widths = spec.head_widths;
    head = SharedMLP(spec.head_input_width(), hs, rng);
    part_score = Dense(spec.head_widths.back(), spec.num_parts, rng);
  }

  SegmentOutput forward(Graph* g, const CloudBatch& batch, const ForwardOptions& opts,
                        const std::vector<int>* categories = nullptr) {
    const auto& bb = spec.backbone;
    if (batch.points->cols() != bb.input_dim)
      throw DimensionError("segmenter input dim mismatch");
    if (spec.category_conditioning) {
      if (!categories || categories->size() != batch.count())
        throw ConfigError("category conditioning needs one category per cloud");
      for (int c : *categories)
        if (c < 0 || static_cast<std::size_t>(c) >= spec.num_categories)
          throw LabelError("category id out of range");
    }
    SegmentOutput r;
    TensorPtr pts = batch.points;
    if (input_tnet) {
      r.input_transform = input_tnet->forward(g, pts, batch.offsets, opts);
      pts = apply_batched_transform(g, pts, batch.offsets, r.input_transform);
    }
    auto h = pre.forward(g, pts, opts.mode, opts.momentum, opts.update_running);
    if (feature_tnet) {
      r.feature_transform = feature_tnet->forward(g, h, batch.offsets, opts);
      h = apply_batched_transform(g, h, batch.offsets, r.feature_transform);
    }
    r.point_feats = h;
    r.set_feats = post.forward(g, h, opts.mode, opts.momentum, opts.update_running);

    std::vector<TensorPtr> pooled, fused;
    for (std::size_t i = 0; i < batch.count(); ++i) {
      const std::size_t n_i = batch.cloud_size(i);
      auto fi = slice_rows(g, r.set_feats, batch.offsets[i], batch.offsets[i + 1]);
      auto mx = max_over_set(g, fi);
      r.argmax.push_back(mx.argmax);
      pooled.push_back(reshape(g, mx.values, {1, mx.values->size()}));
      auto pf = slice_rows(g, r.point_feats, batch.offsets[i], batch.offsets[i + 1]);
      auto gl = broadcast_row(g, mx.values, n_i);
      auto cat = concat_cols(g, pf, gl);
      if (spec.category_conditioning) {
        auto onehot = zeros({n_i, spec.num_categories});
        for (std::size_t p = 0; p < n_i; ++p)
          onehot->data[p * spec.num_categories +
                       static_cast<std::size_t>((*categories)[i])] = 1.0;
        cat = concat_cols(g, cat, onehot);
      }
      fused.push_back(cat);
    }
    r.global = pooled.size() == 1 ? pooled[0] : concat_rows(g, pooled);
    auto all = fused.size() == 1 ? fused[0] : concat_rows(g, fused);
    auto z = head.forward(g, all, opts.mode, opts.momentum, opts.update_running);
    r.logits = part_score.forward(g, z);
    return r;
  }

  /// Trunk feature map h, mirroring the classifier's: row-independent, with
  /// optional fixed alignment matrices.
  TensorPtr per_point_features(Graph* g, const TensorPtr& points,
                               const TensorPtr& input_m = nullptr,
                               const TensorPtr& feature_m = nullptr) {
    TensorPtr x = points;
    if (input_m) x = apply_transform(g, x, input_m);
    auto h = pre.forward(g, x, Mode::eval);
    if (feature_m) h = apply_transform(g, h, feature_m);
    return post.forward(g, h, Mode::eval);
  }
};

// ---------------------------------------------------------------------------
// Parameter traversal, counting, flattening
// ---------------------------------------------------------------------------

template <class F>
void visit_params(TNet& t, F&& f) {
  visit_params(t.mlp, f);
  visit_params(t.fc1, f);
  visit_params(t.bn1, f);
  visit_params(t.fc2, f);
  visit_params(t.bn2, f);
  visit_params(t.out, f);
}

template <class F>
void visit_bn_states(TNet& t, F&& f) {
  visit_bn_states(t.mlp, f);
  f(t.bn1.state);
  f(t.bn2.state);
}

template <class F>
void visit_params(Classifier& m, F&& f) {
  if (m.input_tnet) visit_params(*m.input_tnet, f);
  visit_params(m.pre, f);
  if (m.feature_tnet) visit_params(*m.feature_tnet, f);
  visit_params(m.post, f);
  visit_params(m.agg, f);
  visit_params(m.fc1, f);
  visit_params(m.bn1, f);
  visit_params(m.fc2, f);
  visit_params(m.bn2, f);
  visit_params(m.score, f);
}

template <class F>
void visit_bn_states(Classifier& m, F&& f) {
  if (m.input_tnet) visit_bn_states(*m.input_tnet, f);
  visit_bn_states(m.pre, f);
  if (m.feature_tnet) visit_bn_states(*m.feature_tnet, f);
  visit_bn_states(m.post, f);
  f(m.bn1.state);
  f(m.bn2.state);
}

template <class F>
void visit_params(Segmenter& m, F&& f) {
  if (m.input_tnet) visit_params(*m.input_tnet, f);
  visit_params(m.pre, f);
  if (m.feature_tnet) visit_params(*m.feature_tnet, f);
  visit_params(m.post, f);
  visit_params(m.head, f);
  visit_params(m.part_score, f);
}

template <class F>
void visit_bn_states(Segmenter& m, F&& f) {
  if (m.input_tnet) visit_bn_states(*m.input_tnet, f);
  visit_bn_states(m.pre, f);
  if (m.feature_tnet) visit_bn_states(*m.feature_tnet, f);
  visit_bn_states(m.post, f);
  visit_bn_states(m.head, f);
}

namespace detail {

inline std::size_t count_dense(std::size_t in, std::size_t out) {
  return in * out + out;
}
inline std::size_t count_bn(std::size_t w) { return 2 * w; }

inline std::size_t count_mlp(std::size_t in, const std::vector<std::size_t>& widths,
                             bool bn = true) {
  std::size_t total = 0, prev = in;
  for (std::size_t w : widths) {
    total += count_dense(prev, w);
    if (bn) total += count_bn(w);
    prev = w;
  }
  return total;
}

}  // namespace detail

inline std::size_t count_parameters(const TNetSpec& s) {
  std::size_t total = detail::count_mlp(s.input_dim, s.mlp_widths);
  std::size_t prev = s.mlp_widths.back();
  for (std::size_t w : s.fc_widths) {
    total += detail::count_dense(prev, w) + detail::count_bn(w);
    prev = w;
  }
  return total + detail::count_dense(prev, s.input_dim * s.input_dim);
}

inline std::size_t count_parameters(const ClassifierSpec& s) {
  std::size_t total = 0;
  if (s.use_input_transform) {
    TNetSpec t;
    t.input_dim = s.input_dim;
    total += count_parameters(t);
  }
  total += detail::count_mlp(s.input_dim, s.pre_widths);
  if (s.use_feature_transform) {
    TNetSpec t;
    t.input_dim = s.pre_widths.back();
    total += count_parameters(t);
  }
  total += detail::count_mlp(s.pre_widths.back(), s.post_widths);
  if (s.aggregator == AggKind::attention)
    total += detail::count_dense(s.bottleneck(), 1);
  std::size_t prev = s.bottleneck();
  for (std::size_t w : s.fc_widths) {
    total += detail::count_dense(prev, w) + detail::count_bn(w);
    prev = w;
  }
  return total + detail::count_dense(prev, s.num_classes);
}

inline std::size_t count_parameters(const SegmenterSpec& s) {
  const auto& bb = s.backbone;
  std::size_t total = 0;
  if (bb.use_input_transform) {
    TNetSpec t;
    t.input_dim = bb.input_dim;
    total += count_parameters(t);
  }
  total += detail::count_mlp(bb.input_dim, bb.pre_widths);
  if (bb.use_feature_transform) {
    TNetSpec t;
    t.input_dim = bb.pre_widths.back();
    total += count_parameters(t);
  }
  total += detail::count_mlp(bb.pre_widths.back(), bb.post_widths);
  total += detail::count_mlp(s.head_input_width(), s.head_widths);
  return total + detail::count_dense(s.head_widths.back(), s.num_parts);
}

template <class Model>
std::size_t parameter_count(Model& m) {
  std::size_t total = 0;
  visit_params(m, [&](const TensorPtr& p) { total += p->size(); });
  return total;
}

template <class Model>
std::vector<double> flatten_params(Model& m) {
  std::vector<double> flat;
  visit_params(m, [&](const TensorPtr& p) {
    flat.insert(flat.end(), p->data.begin(), p->data.end());
  });
  return flat;
}

template <class Model>
std::vector<double> flatten_grads(Model& m) {
  std::vector<double> flat;
  visit_params(m, [&](const TensorPtr& p) {
    flat.insert(flat.end(), p->grad.begin(), p->grad.end());
  });
  return flat;
}

template <class Model>
void unflatten_params(Model& m, std::span<const double> flat) {
  std::size_t pos = 0;
  visit_params(m, [&](const TensorPtr& p) {
    if (pos + p->size() > flat.size())
      throw DimensionError("flat parameter vector too short");
    std::copy(flat.begin() + pos, flat.begin() + pos + p->size(), p->data.begin());
    pos += p->size();
  });
  if (pos != flat.size())
    throw DimensionError("flat parameter vector length mismatch");
}

template <class Model>
void zero_param_grads(Model& m) {
  visit_params(m, [](const TensorPtr& p) { p->zero_grad(); });
}

template <class Model>
std::vector<double> flatten_bn_stats(Model& m) {
  std::vector<double> flat;
  visit_bn_states(m, [&](BatchNormState& st) {
    flat.insert(flat.end(), st.running_mean.begin(), st.running_mean.end());
    flat.insert(flat.end(), st.running_var.begin(), st.running_var.end());
  });
  return flat;
}

template <class Model>
void unflatten_bn_stats(Model& m, std::span<const double> flat) {
  std::size_t pos = 0;
  visit_bn_states(m, [&](BatchNormState& st) {
    const std::size_t w = st.running_mean.size();
    if (pos + 2 * w > flat.size())
      throw DimensionError("flat BN statistics vector too short");
    std::copy(flat.begin() + pos, flat.begin() + pos + w, st.running_mean.begin());
    std::copy(flat.begin() + pos + w, flat.begin() + pos + 2 * w,
              st.running_var.begin());
    pos += 2 * w;
  });
  if (pos != flat.size())
    throw DimensionError("flat BN statistics length mismatch");
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
// Binary layout: the 5 magic bytes "PNET1", then four length-prefixed arrays
// of little-endian doubles: spec encoding, seed (one slot, bit-cast u64),
// flat parameters, flat BN running statistics. Round-trips are bit-exact.

enum class TaskKind { classify = 0, segment = 1, normals = 2 };

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw ParseError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline void write_array(std::ostream& os, const std::vector<double>& a) {
  write_u64(os, a.size());
  for (double d : a) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_u64(os, bits);
  }
}

inline std::vector<double> read_array(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1ull << 32)) throw ParseError("checkpoint array implausibly large");
  std::vector<double> a(n);
  for (auto& d : a) {
    const std::uint64_t bits = read_u64(is);
    std::memcpy(&d, &bits, 8);
  }
  return a;
}

inline void push_widths(std::vector<double>& v, const std::vector<std::size_t>& w) {
  v.push_back(static_cast<double>(w.size()));
  for (std::size_t x : w) v.push_back(static_cast<double>(x));
}

inline std::vector<std::size_t> pop_widths(const std::vector<double>& v,
                                           std::size_t& pos) {
  if (pos >= v.size()) throw ParseError("checkpoint spec truncated");
  const std::size_t n = static_cast<std::size_t>(v[pos++]);
  if (pos + n > v.size()) throw ParseError("checkpoint spec truncated");
  std::vector<std::size_t> w(n);
  for (auto& x : w) x = static_cast<std::size_t>(v[pos++]);
  return w;
}

inline std::vector<double> encode_spec(TaskKind task, const ClassifierSpec& s) {
  std::vector<double> v{static_cast<double>(static_cast<int>(task)),
                        static_cast<double>(s.input_dim),
                        s.use_input_transform ? 1.0 : 0.0,
                        s.use_feature_transform ? 1.0 : 0.0,
                        static_cast<double>(static_cast<int>(s.aggregator)),
                        static_cast<double>(s.num_classes),
                        s.dropout_keep,
                        s.reg_weight};
  push_widths(v, s.pre_widths);
  push_widths(v, s.post_widths);
  push_widths(v, s.fc_widths);
  return v;
}

inline ClassifierSpec decode_classifier_spec(const std::vector<double>& v) {
  if (v.size() < 8) throw ParseError("checkpoint spec truncated");
  ClassifierSpec s;
  std::size_t pos = 1;
  s.input_dim = static_cast<std::size_t>(v[pos++]);
  s.use_input_transform = v[pos++] != 0.0;
  s.use_feature_transform = v[pos++] != 0.0;
  s.aggregator = static_cast<AggKind>(static_cast<int>(v[pos++]));
  s.num_classes = static_cast<std::size_t>(v[pos++]);
  s.dropout_keep = v[pos++];
  s.reg_weight = v[pos++];
  s.pre_widths = pop_widths(v, pos);
  s.post_widths = pop_widths(v, pos);
  s.fc_widths = pop_widths(v, pos);
  return s;
}

inline std::vector<double> encode_spec(TaskKind task, const SegmenterSpec& s) {
  std::vector<double> v{static_cast<double>(static_cast<int>(task)),
                        static_cast<double>(s.backbone.input_dim),
                        s.backbone.use_input_transform ? 1.0 : 0.0,
                        s.backbone.use_feature_transform ? 1.0 : 0.0,
                        static_cast<double>(s.num_parts),
                        s.backbone.reg_weight,
                        s.category_conditioning ? 1.0 : 0.0,
                        static_cast<double>(s.num_categories)};
  push_widths(v, s.backbone.pre_widths);
  push_widths(v, s.backbone.post_widths);
  push_widths(v, s.head_widths);
  return v;
}

inline SegmenterSpec decode_segmenter_spec(const std::vector<double>& v) {
  if (v.size() < 8) throw ParseError("checkpoint spec truncated");
  SegmenterSpec s;
  std::size_t pos = 1;
  s.backbone.input_dim = static_cast<std::size_t>(v[pos++]);
  s.backbone.use_input_transform = v[pos++] != 0.0;
  s.backbone.use_feature_transform = v[pos++] != 0.0;
  s.num_parts = static_cast<std::size_t>(v[pos++]);
  s.backbone.reg_weight = v[pos++];
  s.category_conditioning = v[pos++] != 0.0;
  s.num_categories = static_cast<std::size_t>(v[pos++]);
  s.backbone.pre_widths = pop_widths(v, pos);
  s.backbone.post_widths = pop_widths(v, pos);
  s.head_widths = pop_widths(v, pos);
  return s;
}

inline constexpr char kCheckpointMagic[5] = {'P', 'N', 'E', 'T', '1'};

template <class Model>
void save_checkpoint_impl(Model& m, TaskKind task, const std::string& path,
                          const std::vector<double>& spec_enc) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, 5);
  write_array(os, spec_enc);
  double seed_slot;
  const std::uint64_t seed = m.init_seed;
  std::memcpy(&seed_slot, &seed, 8);
  write_array(os, {seed_slot});
  write_array(os, flatten_params(m));
  write_array(os, flatten_bn_stats(m));
  if (!os) throw ParseError("checkpoint write failed: " + path);
}

}  // namespace detail

inline void save_checkpoint(Classifier& m, const std::string& path) {
  detail::save_checkpoint_impl(m, TaskKind::classify, path,
                               detail::encode_spec(TaskKind::classify, m.spec));
}

inline void save_checkpoint(Segmenter& m, const std::string& path,
                            TaskKind task = TaskKind::segment) {
  if (task == TaskKind::classify)
    throw ConfigError("segmenter checkpoint cannot carry the classify tag");
  detail::save_checkpoint_impl(m, task, path, detail::encode_spec(task, m.spec));
}

/// A loaded checkpoint: exactly one of the two model slots is filled,
/// selected by the task tag the file carries.
struct Checkpoint {
  TaskKind task = TaskKind::classify;
  std::optional<Classifier> classifier;
  std::optional<Segmenter> segmenter;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open checkpoint: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 5) != 0)
    throw ParseError("not a PNET1 checkpoint: " + path);
  const auto spec_enc = detail::read_array(is);
  const auto seed_arr = detail::read_array(is);
  const auto params = detail::read_array(is);
  const auto bn = detail::read_array(is);
  if (spec_enc.empty() || seed_arr.size() != 1)
    throw ParseError("malformed checkpoint header: " + path);
  std::uint64_t seed;
  std::memcpy(&seed, seed_arr.data(), 8);

  Checkpoint ck;
  ck.task = static_cast<TaskKind>(static_cast<int>(spec_enc[0]));
  switch (ck.task) {
    case TaskKind::classify: {
      ck.classifier.emplace(detail::decode_classifier_spec(spec_enc), seed);
      unflatten_params(*ck.classifier, params);
      unflatten_bn_stats(*ck.classifier, bn);
      break;
    }
    case TaskKind::segment:
    case TaskKind::normals: {
      ck.segmenter.emplace(detail::decode_segmenter_spec(spec_enc), seed);
      unflatten_params(*ck.segmenter, params);
      unflatten_bn_stats(*ck.segmenter, bn);
      break;
    }
    default:
      throw ParseError("unknown task tag in checkpoint: " + path);
  }
  return ck;
}

}  // namespace setnet
