#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "setnet/models.hpp"

using namespace setnet;

namespace {

TensorPtr random_cloud(std::size_t n, std::size_t d, Rng& rng) {
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  auto t = zeros({n, d});
  for (auto& v : t->data) v = uni(rng);
  return t;
}

TensorPtr permute_rows(const TensorPtr& x, const std::vector<std::size_t>& perm) {
  auto out = zeros(x->shape);
  const std::size_t d = x->cols();
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out->data[i * d + j] = x->at(perm[i], j);
  return out;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// A small spec that keeps unit tests fast; the Table-6-scale specs are
// exercised separately.
ClassifierSpec small_spec(bool input_t, bool feature_t) {
  ClassifierSpec s;
  s.use_input_transform = input_t;
  s.use_feature_transform = feature_t;
  s.pre_widths = {8, 8};
  s.post_widths = {8, 16, 24};
  s.fc_widths = {16, 12};
  s.num_classes = 5;
  return s;
}

SegmenterSpec small_seg_spec(bool input_t, bool feature_t) {
  SegmenterSpec s;
  s.backbone = small_spec(input_t, feature_t);
  s.head_widths = {16, 12, 8};
  s.num_parts = 4;
  return s;
}

}  // namespace

TEST_CASE("freshly initialized T-net outputs exactly the identity") {
  Rng rng(1);
  for (std::size_t d : {std::size_t{3}, std::size_t{64}}) {
    TNetSpec ts;
    ts.input_dim = d;
    TNet tnet(ts, rng);
    auto cloud = random_cloud(10, d, rng);
    CloudBatch batch = make_batch({cloud});
    ForwardOptions opts;
    auto m = tnet.forward(nullptr, batch.points, batch.offsets, opts);
    REQUIRE(m->shape == std::vector<std::size_t>{1, d * d});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        REQUIRE(m->data[i * d + j] == (i == j ? 1.0 : 0.0));
  }
}

TEST_CASE("T-net output is permutation invariant") {
  Rng rng(2);
  TNetSpec ts;
  ts.mlp_widths = {8, 16};
  ts.fc_widths = {12, 8};
  TNet tnet(ts, rng);
  // make it non-identity so the check is not vacuous
  std::uniform_real_distribution<double> uni(-0.3, 0.3);
  for (auto& v : tnet.out.W->data) v = uni(rng);

  auto cloud = random_cloud(9, 3, rng);
  std::vector<std::size_t> perm{4, 7, 0, 8, 2, 6, 1, 3, 5};
  CloudBatch b1 = make_batch({cloud});
  CloudBatch b2 = make_batch({permute_rows(cloud, perm)});
  ForwardOptions opts;
  auto m1 = tnet.forward(nullptr, b1.points, b1.offsets, opts);
  auto m2 = tnet.forward(nullptr, b2.points, b2.offsets, opts);
  REQUIRE(bit_equal(m1->data, m2->data));
}

TEST_CASE("T-net gradient matches finite differences") {
  Rng rng(3);
  TNetSpec ts;
  ts.mlp_widths = {8, 16};
  ts.fc_widths = {12, 8};
  TNet tnet(ts, rng);
  std::uniform_real_distribution<double> uni(-0.3, 0.3);
  for (auto& v : tnet.out.W->data) v = uni(rng);

  auto c1 = random_cloud(6, 3, rng);
  auto c2 = random_cloud(5, 3, rng);
  auto fn = [&tnet](Graph* g, const std::vector<TensorPtr>& in) {
    auto batch = make_batch({in[0], in[1]});
    // concat in make_batch runs outside the graph; rebuild it on-tape
    auto pts = concat_rows(g, {in[0], in[1]});
    ForwardOptions opts;
    opts.mode = Mode::train;
    opts.update_running = false;
    auto m = tnet.forward(g, pts, batch.offsets, opts);
    return sum_all(g, mul(g, m, m));
  };
  REQUIRE(finite_difference_check(fn, {c1, c2}) <= 1e-4);
}

TEST_CASE("apply_transform conventions") {
  Rng rng(4);
  auto pts = random_cloud(5, 3, rng);

  SECTION("identity changes nothing") {
    auto out = apply_transform(nullptr, pts, identity_matrix(3));
    REQUIRE(bit_equal(out->data, pts->data));
  }
  SECTION("90 degree counter-clockwise z-rotation") {
    auto m = tensor({3, 3}, {0, 1, 0, -1, 0, 0, 0, 0, 1});
    auto x = tensor({1, 3}, {1, 0, 0});
    auto out = apply_transform(nullptr, x, m);
    REQUIRE(out->data[0] == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(out->data[1] == Catch::Approx(1.0).margin(1e-15));
    REQUIRE(out->data[2] == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("composition equals product") {
    auto a = random_cloud(3, 3, rng);
    auto b = random_cloud(3, 3, rng);
    auto two_step = apply_transform(nullptr, apply_transform(nullptr, pts, a), b);
    auto one_step = apply_transform(nullptr, pts, matmul(nullptr, a, b));
    for (std::size_t i = 0; i < pts->size(); ++i)
      REQUIRE(two_step->data[i] == Catch::Approx(one_step->data[i]).margin(1e-12));
  }
  SECTION("shape mismatch is rejected") {
    REQUIRE_THROWS_AS(apply_transform(nullptr, pts, identity_matrix(2)),
                      DimensionError);
  }
}

TEST_CASE("orthogonality loss closed forms") {
  REQUIRE(orthogonality_loss(nullptr, identity_matrix(3))->data[0] == 0.0);

  const double th = 0.7;
  auto rot = tensor({3, 3}, {std::cos(th), std::sin(th), 0, -std::sin(th),
                             std::cos(th), 0, 0, 0, 1});
  REQUIRE(orthogonality_loss(nullptr, rot)->data[0] <= 1e-12);

  auto two_i = scale(nullptr, identity_matrix(3), 2.0);
  REQUIRE(orthogonality_loss(nullptr, two_i)->data[0] == 27.0);

  auto rect = zeros({2, 3});
  REQUIRE_THROWS_AS(orthogonality_loss(nullptr, rect), DimensionError);
}

TEST_CASE("total loss composition") {
  auto task = scalar(1.0);
  auto two_i = scale(nullptr, identity_matrix(3), 2.0);

  REQUIRE(total_loss(nullptr, task, two_i, 0.0)->data[0] == 1.0);
  REQUIRE(total_loss(nullptr, task, identity_matrix(3), 0.5)->data[0] == 1.0);
  REQUIRE(total_loss(nullptr, task, nullptr, 0.5)->data[0] == 1.0);
  REQUIRE(total_loss(nullptr, task, two_i, 0.001)->data[0] ==
          Catch::Approx(1.027).epsilon(1e-12));
}

TEST_CASE("cosine normal loss closed forms and gradient") {
  auto gt = tensor({2, 3}, {1, 0, 0, 0, 1, 0});

  SECTION("perfect prediction") {
    REQUIRE(cosine_normal_loss(nullptr, gt, gt)->data[0] <= 1e-12);
  }
  SECTION("sign flips are free") {
    auto neg = scale(nullptr, gt, -1.0);
    REQUIRE(cosine_normal_loss(nullptr, neg, gt)->data[0] <= 1e-12);
  }
  SECTION("perpendicular prediction costs 1") {
    auto perp = tensor({2, 3}, {0, 0, 1, 0, 0, 1});
    REQUIRE(cosine_normal_loss(nullptr, perp, gt)->data[0] ==
            Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("gradient matches finite differences") {
    Rng rng(5);
    auto pred = random_cloud(4, 3, rng);
    auto targ = random_cloud(4, 3, rng);
    // normalize targets to unit length as the contract expects
    for (std::size_t i = 0; i < 4; ++i) {
      double nrm = 0;
      for (std::size_t j = 0; j < 3; ++j) nrm += targ->at(i, j) * targ->at(i, j);
      nrm = std::sqrt(nrm);
      for (std::size_t j = 0; j < 3; ++j) targ->at(i, j) /= nrm;
    }
    auto fn = [&targ](Graph* g, const std::vector<TensorPtr>& in) {
      return cosine_normal_loss(g, in[0], targ);
    };
    REQUIRE(finite_difference_check(fn, {pred}) <= 1e-4);
  }
}

TEST_CASE("parameter counts reproduce the published model sizes") {
  ClassifierSpec full;  // defaults: both transforms, K 1024, 40 classes
  const std::size_t full_count = count_parameters(full);
  REQUIRE(full_count == 3480049);
  REQUIRE(full_count >= 3430000);
  REQUIRE(full_count <= 3570000);

  ClassifierSpec vanilla;
  vanilla.use_input_transform = false;
  vanilla.use_feature_transform = false;
  const std::size_t vanilla_count = count_parameters(vanilla);
  REQUIRE(vanilla_count == 819624);
  REQUIRE(vanilla_count >= 760000);
  REQUIRE(vanilla_count <= 840000);

  TNetSpec t3;
  REQUIRE(count_parameters(t3) == 803081);
  TNetSpec t64;
  t64.input_dim = 64;
  REQUIRE(count_parameters(t64) == 1857344);
  REQUIRE(vanilla_count + count_parameters(t3) + count_parameters(t64) ==
          full_count);

  ClassifierSpec d;
  d.pre_widths = {64};
  d.use_input_transform = false;
  d.use_feature_transform = false;
  REQUIRE(detail::count_dense(3, 64) == 256);
}

TEST_CASE("count_parameters equals brute-force enumeration") {
  for (int it = 0; it < 2; ++it)
    for (int ft = 0; ft < 2; ++ft) {
      auto spec = small_spec(it, ft);
      Classifier m(spec, 7);
      REQUIRE(parameter_count(m) == count_parameters(spec));
    }
  {
    auto spec = small_spec(false, false);
    spec.aggregator = AggKind::attention;
    Classifier m(spec, 7);
    REQUIRE(parameter_count(m) == count_parameters(spec));
  }
  {
    auto spec = small_seg_spec(true, true);
    Segmenter m(spec, 7);
    REQUIRE(parameter_count(m) == count_parameters(spec));
  }
  {
    auto spec = small_seg_spec(false, false);
    spec.category_conditioning = true;
    spec.num_categories = 4;
    Segmenter m(spec, 7);
    REQUIRE(parameter_count(m) == count_parameters(spec));
  }
}

TEST_CASE("segmenter head input width follows the concat layout") {
  SegmenterSpec s;  // defaults: 64-dim point features, K = 1024
  REQUIRE(s.head_input_width() == 1088);
  s.category_conditioning = true;
  s.num_categories = 16;
  REQUIRE(s.head_input_width() == 1104);
}

TEST_CASE("classification logits are permutation invariant in eval mode") {
  Rng rng(8);
  for (int it = 0; it < 2; ++it)
    for (int ft = 0; ft < 2; ++ft) {
      Classifier m(small_spec(it, ft), 11);
      auto cloud = random_cloud(12, 3, rng);
      std::vector<std::size_t> perm(12);
      std::iota(perm.begin(), perm.end(), 0);
      ForwardOptions opts;
      auto base = m.forward(nullptr, make_batch({cloud}), opts);
      for (int trial = 0; trial < 3; ++trial) {
        std::shuffle(perm.begin(), perm.end(), rng);
        auto out = m.forward(nullptr, make_batch({permute_rows(cloud, perm)}), opts);
        INFO("transforms " << it << ft << " trial " << trial);
        REQUIRE(bit_equal(out.logits->data, base.logits->data));
      }
    }
}

TEST_CASE("duplicating a point never changes eval-mode logits") {
  Rng rng(9);
  Classifier m(small_spec(true, true), 13);
  auto cloud = random_cloud(10, 3, rng);
  ForwardOptions opts;
  auto base = m.forward(nullptr, make_batch({cloud}), opts);
  for (std::size_t dup : {std::size_t{0}, std::size_t{4}, std::size_t{9}}) {
    auto row = slice_rows(nullptr, cloud, dup, dup + 1);
    auto grown = concat_rows(nullptr, {cloud, row});
    auto out = m.forward(nullptr, make_batch({grown}), opts);
    REQUIRE(bit_equal(out.logits->data, base.logits->data));
  }
}

TEST_CASE("fresh T-nets leave the vanilla computation unchanged") {
  Rng rng(10);
  Classifier full(small_spec(true, true), 17);
  Classifier vanilla(small_spec(false, false), 18);
  // copy the shared trunk weights from the full model into the vanilla one
  std::vector<TensorPtr> src, dst;
  visit_params(full.pre, [&](const TensorPtr& p) { src.push_back(p); });
  visit_params(full.post, [&](const TensorPtr& p) { src.push_back(p); });
  visit_params(full.fc1, [&](const TensorPtr& p) { src.push_back(p); });
  visit_params(full.bn1, [&](const TensorPtr& p) { src.push_back(p); });
  visit_params(full.fc2, [&](const TensorPtr& p) { src.push_back(p); });
  visit_params(full.bn2, [&](const TensorPtr& p) { src.push_back(p); });
  visit_params(full.score, [&](const TensorPtr& p) { src.push_back(p); });
  visit_params(vanilla.pre, [&](const TensorPtr& p) { dst.push_back(p); });
  visit_params(vanilla.post, [&](const TensorPtr& p) { dst.push_back(p); });
  visit_params(vanilla.fc1, [&](const TensorPtr& p) { dst.push_back(p); });
  visit_params(vanilla.bn1, [&](const TensorPtr& p) { dst.push_back(p); });
  visit_params(vanilla.fc2, [&](const TensorPtr& p) { dst.push_back(p); });
  visit_params(vanilla.bn2, [&](const TensorPtr& p) { dst.push_back(p); });
  visit_params(vanilla.score, [&](const TensorPtr& p) { dst.push_back(p); });
  REQUIRE(src.size() == dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->data = src[i]->data;

  auto cloud = random_cloud(14, 3, rng);
  ForwardOptions opts;
  auto a = full.forward(nullptr, make_batch({cloud}), opts);
  auto b = vanilla.forward(nullptr, make_batch({cloud}), opts);
  for (std::size_t i = 0; i < a.logits->size(); ++i)
    REQUIRE(a.logits->data[i] == Catch::Approx(b.logits->data[i]).margin(1e-12));
}

TEST_CASE("per-point feature helper agrees with the batched pipeline") {
  Rng rng(12);

  SECTION("vanilla model: rows are independent and max recovers the global") {
    Classifier m(small_spec(false, false), 19);
    auto cloud = random_cloud(9, 3, rng);
    auto feats = m.per_point_features(nullptr, cloud);
    ForwardOptions opts;
    auto out = m.forward(nullptr, make_batch({cloud}), opts);
    REQUIRE(bit_equal(feats->data, out.set_feats->data));
    auto mx = max_over_set(nullptr, feats);
    REQUIRE(bit_equal(mx.values->data, out.global->data));
    // single-row evaluation matches the joint one
    for (std::size_t i : {std::size_t{0}, std::size_t{5}}) {
      auto row = slice_rows(nullptr, cloud, i, i + 1);
      auto single = m.per_point_features(nullptr, row);
      for (std::size_t j = 0; j < single->size(); ++j)
        REQUIRE(single->data[j] == feats->data[i * feats->cols() + j]);
    }
  }
  SECTION("transform-bearing model conditioned on its own matrices") {
    Classifier m(small_spec(true, true), 20);
    // perturb the T-net output layers so the transforms are not identity
    std::uniform_real_distribution<double> uni(-0.2, 0.2);
    for (auto& v : m.input_tnet->out.W->data) v = uni(rng);
    for (auto& v : m.feature_tnet->out.W->data) v = uni(rng);
    auto cloud = random_cloud(7, 3, rng);
    ForwardOptions opts;
    auto out = m.forward(nullptr, make_batch({cloud}), opts);
    auto im = reshape(nullptr, out.input_transform, {3, 3});
    auto fm = reshape(nullptr, out.feature_transform, {8, 8});
    auto feats = m.per_point_features(nullptr, cloud, im, fm);
    REQUIRE(bit_equal(feats->data, out.set_feats->data));
  }
}

TEST_CASE("classifier loss gradient matches finite differences end to end") {
  Rng rng(14);
  Classifier m(small_spec(true, true), 21);
  auto c1 = random_cloud(16, 3, rng);
  auto c2 = random_cloud(16, 3, rng);
  std::vector<int> labels{1, 3};
  auto fn = [&](Graph* g, const std::vector<TensorPtr>& in) {
    auto pts = concat_rows(g, {in[0], in[1]});
    CloudBatch batch;
    batch.points = pts;
    batch.offsets = {0, 16, 32};
    ForwardOptions opts;
    opts.mode = Mode::train;
    opts.update_running = false;
    Rng drop(31);
    opts.rng = &drop;
    auto out = m.forward(g, batch, opts);
    auto task = softmax_cross_entropy(g, out.logits, labels);
    return total_loss_batched(g, task, out.feature_transform, 8,
                              m.spec.reg_weight);
  };
  REQUIRE(finite_difference_check(fn, {c1, c2}) <= 1e-4);
}

TEST_CASE("segmentation logits are permutation equivariant in eval mode") {
  Rng rng(15);
  Segmenter m(small_seg_spec(true, true), 23);
  auto cloud = random_cloud(11, 3, rng);
  ForwardOptions opts;
  auto base = m.forward(nullptr, make_batch({cloud}), opts);
  std::vector<std::size_t> perm(11);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    auto out = m.forward(nullptr, make_batch({permute_rows(cloud, perm)}), opts);
    auto expected = permute_rows(base.logits, perm);
    REQUIRE(bit_equal(out.logits->data, expected->data));
  }
}

TEST_CASE("segmenter loss gradient matches finite differences end to end") {
  Rng rng(16);
  Segmenter m(small_seg_spec(true, true), 27);
  auto c1 = random_cloud(16, 3, rng);
  auto c2 = random_cloud(16, 3, rng);
  std::vector<int> labels(32);
  std::uniform_int_distribution<int> lab(0, 3);
  for (auto& l : labels) l = lab(rng);
  auto fn = [&](Graph* g, const std::vector<TensorPtr>& in) {
    auto pts = concat_rows(g, {in[0], in[1]});
    CloudBatch batch;
    batch.points = pts;
    batch.offsets = {0, 16, 32};
    ForwardOptions opts;
    opts.mode = Mode::train;
    opts.update_running = false;
    auto out = m.forward(g, batch, opts);
    auto task = softmax_cross_entropy(g, out.logits, labels);
    return total_loss_batched(g, task, out.feature_transform, 8,
                              m.spec.backbone.reg_weight);
  };
  REQUIRE(finite_difference_check(fn, {c1, c2}) <= 1e-4);
}

TEST_CASE("category conditioning is validated") {
  auto spec = small_seg_spec(false, false);
  spec.category_conditioning = true;
  spec.num_categories = 0;
  REQUIRE_THROWS_AS(Segmenter(spec, 1), ConfigError);

  spec.num_categories = 3;
  Segmenter m(spec, 1);
  Rng rng(17);
  auto cloud = random_cloud(6, 3, rng);
  ForwardOptions opts;
  REQUIRE_THROWS_AS(m.forward(nullptr, make_batch({cloud}), opts), ConfigError);
  std::vector<int> bad{5};
  REQUIRE_THROWS_AS(m.forward(nullptr, make_batch({cloud}), opts, &bad),
                    LabelError);
  std::vector<int> good{2};
  auto out = m.forward(nullptr, make_batch({cloud}), opts, &good);
  REQUIRE(out.logits->shape == std::vector<std::size_t>{6, 4});
}

TEST_CASE("empty batches are rejected") {
  REQUIRE_THROWS_AS(make_batch({}), EmptySetError);
}

TEST_CASE("checkpoints round-trip bit exactly") {
  Rng rng(18);
  const std::string path = "test_checkpoint.pnet";

  SECTION("classifier") {
    Classifier m(small_spec(true, true), 29);
    // move parameters and BN stats off their initial values
    auto c1 = random_cloud(8, 3, rng);
    auto c2 = random_cloud(8, 3, rng);
    auto batch = make_batch({c1, c2});
    Graph g;
    ForwardOptions opts;
    opts.mode = Mode::train;
    Rng drop(1);
    opts.rng = &drop;
    auto out = m.forward(&g, batch, opts);
    auto loss = softmax_cross_entropy(&g, out.logits, {0, 2});
    zero_param_grads(m);
    g.backward(loss);
    auto params = flatten_params(m);
    auto grads = flatten_grads(m);
    AdamState ad(params.size());
    adam_step(params, grads, ad, 1e-3);
    unflatten_params(m, params);

    save_checkpoint(m, path);
    auto ck = load_checkpoint(path);
    REQUIRE(ck.task == TaskKind::classify);
    REQUIRE(ck.classifier.has_value());
    REQUIRE(bit_equal(flatten_params(*ck.classifier), flatten_params(m)));
    REQUIRE(bit_equal(flatten_bn_stats(*ck.classifier), flatten_bn_stats(m)));
    REQUIRE(ck.classifier->init_seed == 29);
    REQUIRE(ck.classifier->spec.num_classes == 5);

    auto probe = random_cloud(6, 3, rng);
    ForwardOptions ev;
    auto a = m.forward(nullptr, make_batch({probe}), ev);
    auto b = ck.classifier->forward(nullptr, make_batch({probe}), ev);
    REQUIRE(bit_equal(a.logits->data, b.logits->data));
    std::remove(path.c_str());
  }
  SECTION("segmenter with the normals tag") {
    auto spec = small_seg_spec(false, true);
    spec.num_parts = 3;
    Segmenter m(spec, 31);
    save_checkpoint(m, path, TaskKind::normals);
    auto ck = load_checkpoint(path);
    REQUIRE(ck.task == TaskKind::normals);
    REQUIRE(ck.segmenter.has_value());
    REQUIRE(bit_equal(flatten_params(*ck.segmenter), flatten_params(m)));
    REQUIRE(ck.segmenter->spec.num_parts == 3);
    std::remove(path.c_str());
  }
  SECTION("bad magic is rejected") {
    std::ofstream os(path, std::ios::binary);
    os << "NOTPN" << std::string(64, '\0');
    os.close();
    REQUIRE_THROWS_AS(load_checkpoint(path), ParseError);
    std::remove(path.c_str());
  }
}
