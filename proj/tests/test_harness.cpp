#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "setnet/harness.hpp"

using namespace setnet;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("setnet_harness_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig tiny_classify() {
  ExperimentConfig cfg;
  cfg.task = Task::classify;
  cfg.dataset.points = 32;
  cfg.dataset.clouds_per_class = 6;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.model.bottleneck = 32;
  cfg.model.dropout_keep = 1.0;
  return cfg;
}

// Cached so the sweep tests reuse one trained model.
TrainResult& tiny_trained() {
  static TrainResult r = train(tiny_classify());
  return r;
}

}  // namespace

TEST_CASE("config text round trips through serialize and parse") {
  ExperimentConfig cfg;
  cfg.task = Task::segment;
  cfg.seed = 17;
  cfg.epochs = 3;
  cfg.lr = 0.00025;
  cfg.corruption = "outliers";
  cfg.corruption_amount = 0.1;
  cfg.outdir = "/tmp/somewhere";
  cfg.dataset.noise = 0.01;
  cfg.model.input_transform = false;
  cfg.model.bottleneck = 64;
  cfg.model.aggregator = "average";

  const std::string text = serialize_config(cfg);
  ExperimentConfig back = parse_config_text(text);
  CHECK(serialize_config(back) == text);
  CHECK(back.task == Task::segment);
  CHECK(back.seed == 17);
  CHECK(back.lr == 0.00025);
  CHECK(back.corruption == "outliers");
  CHECK(back.model.input_transform == false);
  CHECK(back.model.aggregator == "average");
}

TEST_CASE("config parsing accepts comments and rejects junk") {
  auto cfg = parse_config_text("# a comment\n\n task = classify \nlr=0.5\n");
  CHECK(cfg.task == Task::classify);
  CHECK(cfg.lr == 0.5);

  CHECK_THROWS_AS(parse_config_text("frobnicate = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.frobnicate = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("task classify\n"), ParseError);
  CHECK_THROWS_WITH(parse_config_text("lr = 0.1\nbogus line\n", "cfg.txt"),
                    Catch::Matchers::ContainsSubstring("cfg.txt:2:"));
  CHECK_THROWS_AS(parse_config_text("task = regression\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("corruption = melt\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("dataset.kind = shapenet\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.aggregator = median\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("epochs = three\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("epochs = 3x\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.input_transform = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("lr = fast\n"), ConfigError);
}

TEST_CASE("config files load from disk and overrides land after parsing") {
  auto dir = temp_dir("cfg");
  {
    std::ofstream os(dir / "run.cfg");
    os << "task = classify\nseed = 5\nlr = 0.01\n";
  }
  ExperimentConfig cfg = read_config_file((dir / "run.cfg").string());
  CHECK(cfg.seed == 5);
  set_config_key(cfg, "lr", "0.001");  // CLI-style override
  CHECK(cfg.lr == 0.001);
  CHECK_THROWS_AS(read_config_file((dir / "missing.cfg").string()), ParseError);
}

TEST_CASE("config validation catches unusable settings") {
  ExperimentConfig cfg = tiny_classify();
  cfg.batch_size = 1;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = tiny_classify();
  cfg.epochs = 0;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = tiny_classify();
  cfg.model.dropout_keep = 0.0;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = tiny_classify();
  cfg.lr = 0.0;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = tiny_classify();
  cfg.task = Task::segment;
  cfg.dataset.kind = "digits";
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = tiny_classify();
  cfg.task = Task::normals;
  cfg.dataset.kind = "digits";
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  CHECK_NOTHROW(validate_config(tiny_classify()));
}

TEST_CASE("datasets build from config for both kinds") {
  ExperimentConfig cfg = tiny_classify();
  Dataset synth = build_dataset(cfg);
  CHECK(synth.clouds.size() == 4 * cfg.dataset.clouds_per_class);
  CHECK(synth.num_classes == 4);
  CHECK(synth.num_parts == kSynthNumParts);
  CHECK(synth.clouds[0].size() == cfg.dataset.points);
  CHECK(synth.clouds[0].dim() == 3);

  cfg.dataset.kind = "digits";
  cfg.dataset.count = 12;
  Dataset digits = build_dataset(cfg);
  CHECK(digits.clouds.size() == 12);
  CHECK(digits.num_classes == 10);
  CHECK(digits.clouds[0].dim() == 2);
}

TEST_CASE("accuracy scoring matches hand examples and direct counting") {
  // perfect predictor
  CHECK(accuracy_from_predictions({0, 1, 2}, {0, 1, 2}) ==
        std::pair<double, double>{1.0, 1.0});
  // constant predictor on two balanced classes
  CHECK(accuracy_from_predictions({0, 0, 0, 0}, {0, 0, 1, 1}) ==
        std::pair<double, double>{0.5, 0.5});
  // constant majority predictor on a 90/10 imbalance
  std::vector<int> gt(100, 0), pred(100, 0);
  for (int i = 90; i < 100; ++i) gt[i] = 1;
  auto [overall, avg] = accuracy_from_predictions(pred, gt);
  CHECK(overall == 0.9);
  CHECK(avg == 0.5);

  CHECK_THROWS_AS(accuracy_from_predictions({}, {}), EmptySetError);
  CHECK_THROWS_AS(accuracy_from_predictions({0}, {0, 1}), DimensionError);

  // overall accuracy == 1 - Hamming error rate on random vectors
  Rng rng(11);
  std::uniform_int_distribution<int> lab(0, 4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> p(37), g(37);
    for (auto& x : p) x = lab(rng);
    for (auto& x : g) x = lab(rng);
    std::size_t mismatches = 0, matches = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      mismatches += p[i] != g[i];
      matches += p[i] == g[i];
    }
    REQUIRE(matches == 37 - mismatches);  // the complement identity, exactly
    const double acc = accuracy_from_predictions(p, g).first;
    CHECK(acc == static_cast<double>(matches) / 37.0);
    CHECK(std::abs(acc - (1.0 - static_cast<double>(mismatches) / 37.0)) <= 1e-15);
  }
}

TEST_CASE("part mIoU matches the worked examples") {
  const std::vector<int> parts{0, 1};
  CHECK(part_miou({0, 0, 1, 0}, {0, 0, 1, 1}, parts) == (2.0 / 3.0 + 0.5) / 2.0);
  CHECK(part_miou({1, 0, 1}, {1, 0, 1}, parts) == 1.0);
  // both sides all zero: part 1 has an empty union and scores 1
  CHECK(part_miou({0, 0, 0}, {0, 0, 0}, parts) == 1.0);

  CHECK_THROWS_AS(part_miou({2}, {0}, parts), LabelError);
  CHECK_THROWS_AS(part_miou({0}, {2}, parts), LabelError);
  CHECK_THROWS_AS(part_miou({0, 0}, {0}, parts), DimensionError);
  CHECK_THROWS_AS(part_miou({0}, {0}, {}), ConfigError);
}

namespace {

// Brute-force oracle: per-part index sets, exact integer intersection and
// union counts via set algebra, empty union scored as the exact fraction 1/1.
double miou_oracle(const std::vector<int>& pred, const std::vector<int>& gt,
                   const std::vector<int>& parts) {
  double sum = 0.0;
  for (int p : parts) {
    std::set<std::size_t> a, b;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == p) a.insert(i);
      if (gt[i] == p) b.insert(i);
    }
    std::vector<std::size_t> inter, uni;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                          std::back_inserter(inter));
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(uni));
    const long long num = uni.empty() ? 1 : static_cast<long long>(inter.size());
    const long long den = uni.empty() ? 1 : static_cast<long long>(uni.size());
    sum += static_cast<double>(num) / static_cast<double>(den);
  }
  return sum / static_cast<double>(parts.size());
}

}  // namespace

TEST_CASE("part mIoU agrees with the brute-force set oracle on 1000 instances") {
  Rng rng(123);
  std::uniform_int_distribution<std::size_t> len(1, 10);
  std::size_t empty_union_hits = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    // parts are a random prefix of {0..3}; labels are drawn from a possibly
    // smaller range so some parts end up absent from both vectors
    std::uniform_int_distribution<int> nparts(1, 4);
    const int np = nparts(rng);
    std::vector<int> parts;
    for (int p = 0; p < np; ++p) parts.push_back(p);
    std::uniform_int_distribution<int> lab(0, std::max(0, np - 2));
    const std::size_t n = len(rng);
    std::vector<int> pred(n), gt(n);
    for (auto& x : pred) x = lab(rng);
    for (auto& x : gt) x = lab(rng);
    if (np > 1) ++empty_union_hits;  // part np-1 touches neither vector
    REQUIRE(part_miou(pred, gt, parts) == miou_oracle(pred, gt, parts));
  }
  CHECK(empty_union_hits > 100);
}

TEST_CASE("dataset mIoU aggregates per-shape scores both ways") {
  ExperimentConfig cfg = tiny_classify();
  cfg.task = Task::segment;
  cfg.dataset.clouds_per_class = 3;
  Dataset ds = build_dataset(cfg);
  Segmenter model(make_segmenter_spec(cfg, 3, ds.num_parts), 7);

  const auto parts_table = synth_parts_by_class();
  const auto names = synth_class_names();
  MiouReport rep = dataset_miou(model, ds, parts_table, names);

  double shape_sum = 0.0;
  std::map<std::string, std::pair<double, std::size_t>> cat;
  for (const auto& cloud : ds.clouds) {
    const auto& parts = parts_table[*cloud.class_label];
    const auto pred = predict_parts(model, cloud, parts);
    for (int p : pred)  // argmax is restricted to the category's parts
      CHECK(std::find(parts.begin(), parts.end(), p) != parts.end());
    const double m = part_miou(pred, cloud.part_labels, parts);
    shape_sum += m;
    auto& [s, c] = cat[names[*cloud.class_label]];
    s += m;
    ++c;
  }
  CHECK(rep.mean_over_shapes == shape_sum / static_cast<double>(ds.clouds.size()));
  double cat_sum = 0.0;
  for (const auto& [name, sc] : cat) {
    REQUIRE(rep.per_category.count(name) == 1);
    CHECK(rep.per_category.at(name) == sc.first / static_cast<double>(sc.second));
    cat_sum += rep.per_category.at(name);
  }
  CHECK(rep.mean_over_categories == cat_sum / static_cast<double>(cat.size()));
  CHECK(rep.mean_over_shapes >= 0.0);
  CHECK(rep.mean_over_shapes <= 1.0);

  CHECK_THROWS_AS(dataset_miou(model, Dataset{}, parts_table, names), EmptySetError);
}

TEST_CASE("normal alignment is a bounded score and needs normals") {
  ExperimentConfig cfg = tiny_classify();
  cfg.task = Task::normals;
  cfg.dataset.clouds_per_class = 2;
  Dataset ds = build_dataset(cfg);
  Segmenter model(make_segmenter_spec(cfg, 3, ds.num_parts), 3);
  CHECK(model.spec.num_parts == 3);
  const double a = normal_alignment(model, ds);
  CHECK(a >= 0.0);
  CHECK(a <= 1.0);

  Dataset bare = ds;
  for (auto& c : bare.clouds) c.normals.reset();
  CHECK_THROWS_AS(normal_alignment(model, bare), ConfigError);
}

TEST_CASE("a small classification run trains to finite losses and sane metrics") {
  TrainResult& r = tiny_trained();
  REQUIRE(r.classifier);
  CHECK_FALSE(r.segmenter);
  CHECK(r.metrics.loss_curve.size() == 2);
  CHECK(r.metrics.reg_curve.size() == 2);
  REQUIRE_FALSE(r.step_losses.empty());
  for (double v : r.step_losses) CHECK(std::isfinite(v));
  // the regularizer component is non-negative at every recorded step
  for (double v : r.step_regs) CHECK(v >= 0.0);
  for (double v : r.metrics.reg_curve) CHECK(v >= 0.0);
  CHECK(r.metrics.overall_accuracy >= 0.0);
  CHECK(r.metrics.overall_accuracy <= 1.0);
  CHECK(r.metrics.avg_class_accuracy >= 0.0);
  CHECK(r.metrics.avg_class_accuracy <= 1.0);
  CHECK(r.metrics.final_loss == r.metrics.loss_curve.back());
  CHECK(r.metrics.wall_seconds > 0.0);
  CHECK_FALSE(r.train_set.clouds.empty());
  CHECK_FALSE(r.test_set.clouds.empty());
}

TEST_CASE("the learning rate follows the halving schedule with a floor") {
  ExperimentConfig cfg = tiny_classify();
  cfg.dataset.clouds_per_class = 3;
  cfg.epochs = 21;
  TrainResult r = train(cfg);
  REQUIRE(r.metrics.lr_curve.size() == 21);
  for (std::size_t e = 0; e < 20; ++e) CHECK(r.metrics.lr_curve[e] == 0.001);
  CHECK(r.metrics.lr_curve[20] == 0.0005);

  cfg.epochs = 2;
  cfg.lr_floor = 0.002;  // floor above the base rate pins every epoch
  TrainResult f = train(cfg);
  for (double lr : f.metrics.lr_curve) CHECK(lr == 0.002);
}

TEST_CASE("training aborts on a non-finite loss with diagnostics") {
  ExperimentConfig cfg = tiny_classify();
  Dataset full = build_dataset(cfg);
  TrainResult r;
  split_dataset(full, r.train_set, r.test_set);
  Classifier model(make_classifier_spec(cfg, 3, full.num_classes), cfg.seed);
  auto nan_loss = [&](Graph* g, const std::vector<PointCloud>& batch,
                      ForwardOptions opts) {
    std::vector<TensorPtr> pts;
    std::vector<int> labels;
    for (const auto& c : batch) {
      pts.push_back(c.points);
      labels.push_back(*c.class_label);
    }
    auto out = model.forward(g, make_batch(pts), opts);
    auto task = softmax_cross_entropy(g, out.logits, labels);
    detail::StepLoss sl;
    sl.loss = scale(g, task, std::numeric_limits<double>::quiet_NaN());
    return sl;
  };
  CHECK_THROWS_WITH(detail::training_loop(model, r.train_set, cfg, nan_loss, r, nullptr),
                    Catch::Matchers::ContainsSubstring("non-finite loss at epoch 0") &&
                        Catch::Matchers::ContainsSubstring("batch 0") &&
                        Catch::Matchers::ContainsSubstring("grad_norm"));
}

TEST_CASE("identical config and seed reproduce parameters and files bitwise") {
  auto dir_a = temp_dir("det_a"), dir_b = temp_dir("det_b");
  ExperimentConfig cfg = tiny_classify();
  cfg.dataset.clouds_per_class = 4;
  cfg.outdir = dir_a.string();
  TrainResult a = train(cfg);
  // replay purely from the serialized config text
  ExperimentConfig replay = parse_config_text(serialize_config(cfg));
  replay.outdir = dir_b.string();
  TrainResult b = train(replay);

  CHECK(flatten_params(*a.classifier) == flatten_params(*b.classifier));
  CHECK(a.metrics.loss_curve == b.metrics.loss_curve);
  CHECK(a.metrics.overall_accuracy == b.metrics.overall_accuracy);
  CHECK(read_file((dir_a / "metrics.txt").string()) ==
        read_file((dir_b / "metrics.txt").string()));
  CHECK(read_file((dir_a / "checkpoint.pnet").string()) ==
        read_file((dir_b / "checkpoint.pnet").string()));
  CHECK(read_file((dir_a / "loss_curve.txt").string()) ==
        read_file((dir_b / "loss_curve.txt").string()));
  // the echoed config embeds outdir, the one line that legitimately differs
  auto strip_outdir = [](std::string text) {
    std::istringstream is(text);
    std::ostringstream os;
    std::string line;
    while (std::getline(is, line))
      if (line.rfind("outdir = ", 0) != 0) os << line << "\n";
    return os.str();
  };
  CHECK(strip_outdir(read_file((dir_a / "train.log").string())) ==
        strip_outdir(read_file((dir_b / "train.log").string())));
}

TEST_CASE("a training run writes the full output tree") {
  auto dir = temp_dir("tree");
  ExperimentConfig cfg = tiny_classify();
  cfg.dataset.clouds_per_class = 4;
  cfg.epochs = 1;
  cfg.outdir = dir.string();
  TrainResult r = train(cfg);

  const std::string cfg_echo = read_file((dir / "config.txt").string());
  CHECK(cfg_echo == serialize_config(cfg));
  CHECK(serialize_config(parse_config_text(cfg_echo)) == cfg_echo);

  const std::string metrics = read_file((dir / "metrics.txt").string());
  CHECK(metrics.find("overall_accuracy = ") != std::string::npos);
  CHECK(metrics.find("final_loss = ") != std::string::npos);
  CHECK(metrics.find("wall") == std::string::npos);

  const std::string curve = read_file((dir / "loss_curve.txt").string());
  CHECK(curve.rfind("# setnet-curve v1\n", 0) == 0);
  CHECK(curve.find("# columns: epoch mean_loss mean_reg lr") != std::string::npos);

  // Logs must stay byte-reproducible, so no timings land in any output file.
  const std::string log = read_file((dir / "train.log").string());
  CHECK(log.find("epoch 0 loss ") != std::string::npos);
  CHECK(log.find("wall") == std::string::npos);

  Checkpoint ck = load_checkpoint((dir / "checkpoint.pnet").string());
  REQUIRE(ck.task == TaskKind::classify);
  REQUIRE(ck.classifier);
  CHECK(flatten_params(*ck.classifier) == flatten_params(*r.classifier));
}

TEST_CASE("segmentation and normals runs produce their task metrics") {
  auto dir = temp_dir("seg");
  ExperimentConfig cfg = tiny_classify();
  cfg.task = Task::segment;
  cfg.dataset.clouds_per_class = 4;
  cfg.epochs = 1;
  cfg.outdir = dir.string();
  TrainResult seg = train(cfg);
  REQUIRE(seg.segmenter);
  CHECK_FALSE(seg.classifier);
  CHECK(seg.metrics.mean_iou_shapes >= 0.0);
  CHECK(seg.metrics.mean_iou_shapes <= 1.0);
  CHECK(seg.metrics.mean_iou_categories >= 0.0);
  CHECK(seg.metrics.mean_iou_categories <= 1.0);
  CHECK_FALSE(seg.metrics.per_category_iou.empty());
  CHECK(seg.metrics.overall_accuracy == -1.0);
  Checkpoint ck = load_checkpoint((dir / "checkpoint.pnet").string());
  CHECK(ck.task == TaskKind::segment);
  const std::string metrics = read_file((dir / "metrics.txt").string());
  CHECK(metrics.find("mean_iou_shapes = ") != std::string::npos);
  CHECK(metrics.find("mean_iou_categories = ") != std::string::npos);
  CHECK(metrics.find("iou.sphere = ") != std::string::npos);

  cfg.task = Task::normals;
  cfg.outdir.clear();
  TrainResult nrm = train(cfg);
  REQUIRE(nrm.segmenter);
  CHECK(nrm.segmenter->spec.num_parts == 3);
  CHECK(nrm.metrics.normal_alignment >= 0.0);
  CHECK(nrm.metrics.normal_alignment <= 1.0);
}

TEST_CASE("evaluation-time corruption shrinks the test clouds, not training") {
  ExperimentConfig cfg = tiny_classify();
  cfg.dataset.clouds_per_class = 4;
  cfg.epochs = 1;
  cfg.corruption = "delete_random";
  cfg.corruption_amount = 0.5;
  TrainResult r = train(cfg);
  // metrics came from corrupted copies; the stored split stays intact
  for (const auto& c : r.test_set.clouds) CHECK(c.size() == cfg.dataset.points);
  CHECK(r.metrics.overall_accuracy >= 0.0);

  Dataset corrupted = corrupt_dataset(r.test_set, {CorruptionKind::delete_random, 0.5}, 9);
  for (const auto& c : corrupted.clouds) CHECK(c.size() == cfg.dataset.points / 2);
  Dataset again = corrupt_dataset(r.test_set, {CorruptionKind::delete_random, 0.5}, 9);
  for (std::size_t i = 0; i < corrupted.clouds.size(); ++i)
    CHECK(corrupted.clouds[i].points->data == again.clouds[i].points->data);
  Dataset untouched = corrupt_dataset(r.test_set, {CorruptionKind::none, 0.0}, 9);
  for (std::size_t i = 0; i < untouched.clouds.size(); ++i)
    CHECK(untouched.clouds[i].points.get() == r.test_set.clouds[i].points.get());
}

TEST_CASE("the robustness sweep covers the fixed grids and anchors at zero") {
  TrainResult& r = tiny_trained();
  auto dir = temp_dir("robust");
  const std::string out = (dir / "robustness.txt").string();
  RobustnessReport rep = robustness_sweep(*r.classifier, r.test_set, 0, out);

  CHECK(rep.rows.size() == 5 + 5 + 4 + 6);
  for (const auto& row : rep.rows) {
    CHECK(row.accuracy >= 0.0);
    CHECK(row.accuracy <= 1.0);
    if (row.severity == 0.0) CHECK(row.accuracy == rep.clean_accuracy);
  }
  std::size_t zero_rows = 0;
  for (const auto& row : rep.rows) zero_rows += row.severity == 0.0;
  CHECK(zero_rows == 4);

  const std::string text = read_file(out);
  CHECK(text.rfind("# setnet-curve v1\n", 0) == 0);
  CHECK(text.find("# columns: protocol severity accuracy") != std::string::npos);
  std::size_t data_rows = 0;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty() && line[0] != '#') ++data_rows;
  CHECK(data_rows == rep.rows.size());
  CHECK(text.find("delete_furthest 0.5 ") != std::string::npos);
}

TEST_CASE("the ablation trains five labeled variants reproducibly") {
  ExperimentConfig base = tiny_classify();
  base.dataset.clouds_per_class = 4;
  base.dataset.points = 24;
  base.epochs = 1;
  base.model.bottleneck = 16;
  AblationReport rep = ablation_run(base);

  REQUIRE(rep.rows.size() == 5);
  CHECK(rep.rows[0].label == "none");
  CHECK(rep.rows[1].label == "input");
  CHECK(rep.rows[2].label == "feature");
  CHECK(rep.rows[3].label == "feature+reg");
  CHECK(rep.rows[4].label == "both");
  CHECK(rep.rows[0].param_count < rep.rows[4].param_count);
  CHECK(rep.rows[2].param_count == rep.rows[3].param_count);
  CHECK(rep.rows[3].reg_weight > 0.0);
  CHECK(rep.rows[2].reg_weight == 0.0);
  for (const auto& row : rep.rows) {
    CHECK(row.accuracy >= 0.0);
    CHECK(row.accuracy <= 1.0);
  }

  AblationReport rerun = ablation_run(base);
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(rep.rows[i].accuracy == rerun.rows[i].accuracy);

  ExperimentConfig seg = base;
  seg.task = Task::segment;
  CHECK_THROWS_AS(ablation_run(seg), ConfigError);
}

TEST_CASE("SETNET_THREADS parallelism leaves sweep results bitwise unchanged") {
  ExperimentConfig base = tiny_classify();
  base.dataset.clouds_per_class = 4;
  base.dataset.points = 24;
  base.epochs = 1;
  base.model.bottleneck = 16;
  AblationReport serial = ablation_run(base);
  setenv("SETNET_THREADS", "3", 1);
  AblationReport parallel = ablation_run(base);
  unsetenv("SETNET_THREADS");
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(serial.rows[i].label == parallel.rows[i].label);
    CHECK(serial.rows[i].accuracy == parallel.rows[i].accuracy);
  }

  setenv("SETNET_THREADS", "zippy", 1);
  CHECK_THROWS_AS(sweep_threads(), ConfigError);
  unsetenv("SETNET_THREADS");
  CHECK(sweep_threads() == 1);
}

TEST_CASE("the bottleneck sweep fills its grid and respects the critical bound") {
  ExperimentConfig base = tiny_classify();
  base.dataset.clouds_per_class = 4;
  base.epochs = 1;
  auto dir = temp_dir("grid");
  const std::string out = (dir / "bottleneck.txt").string();
  BottleneckReport rep = bottleneck_sweep(base, {8, 16}, {16, 24}, out);

  REQUIRE(rep.cells.size() == 4);
  CHECK(rep.cells[0].bottleneck == 8);
  CHECK(rep.cells[0].points == 16);
  CHECK(rep.cells[1].bottleneck == 8);
  CHECK(rep.cells[1].points == 24);
  CHECK(rep.cells[3].bottleneck == 16);
  CHECK(rep.cells[3].points == 24);
  for (const auto& cell : rep.cells) {
    CHECK(cell.accuracy >= 0.0);
    CHECK(cell.accuracy <= 1.0);
    CHECK(cell.critical_ok);
    CHECK(cell.max_critical >= 1);
    CHECK(cell.max_critical <= cell.bottleneck);
  }

  const std::string text = read_file(out);
  CHECK(text.rfind("# setnet-curve v1\n", 0) == 0);
  std::size_t data_rows = 0;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty() && line[0] != '#') ++data_rows;
  CHECK(data_rows == 4);

  CHECK_THROWS_AS(bottleneck_sweep(base, {}, {16}), ConfigError);
  ExperimentConfig seg = base;
  seg.task = Task::segment;
  CHECK_THROWS_AS(bottleneck_sweep(seg, {8}, {16}), ConfigError);
}
