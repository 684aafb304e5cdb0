#pragma once

// Experiment harness: configs, the training loop, evaluation metrics, and the
// sweep protocols (robustness, ablation, bottleneck grid). Every run is a pure
// function of its config and seed; reruns produce bit-identical checkpoints
// and metric files. Wall-clock timings go to the run log and nowhere else.

#include "setnet/analysis.hpp"
#include "setnet/data.hpp"
#include "setnet/models.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace setnet {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Task { classify, segment, normals };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::classify: return "classify";
    case Task::segment: return "segment";
    case Task::normals: return "normals";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  if (s == "classify") return Task::classify;
  if (s == "segment") return Task::segment;
  if (s == "normals") return Task::normals;
  throw ConfigError("unknown task: " + s);
}

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::none: return "none";
    case CorruptionKind::delete_random: return "delete_random";
    case CorruptionKind::delete_furthest: return "delete_furthest";
    case CorruptionKind::outliers: return "outliers";
    case CorruptionKind::perturb: return "perturb";
  }
  return "?";
}

inline CorruptionKind parse_corruption(const std::string& s) {
  if (s == "none") return CorruptionKind::none;
  if (s == "delete_random") return CorruptionKind::delete_random;
  if (s == "delete_furthest") return CorruptionKind::delete_furthest;
  if (s == "outliers") return CorruptionKind::outliers;
  if (s == "perturb") return CorruptionKind::perturb;
  throw ConfigError("unknown corruption protocol: " + s);
}

inline const char* aggregator_name(AggKind k) {
  switch (k) {
    case AggKind::max: return "max";
    case AggKind::average: return "average";
    case AggKind::attention: return "attention";
  }
  return "?";
}

inline AggKind parse_aggregator(const std::string& s) {
  if (s == "max") return AggKind::max;
  if (s == "average") return AggKind::average;
  if (s == "attention") return AggKind::attention;
  throw ConfigError("unknown aggregator: " + s);
}

struct DatasetConfig {
  std::string kind = "synth";  // synth | digits
  std::size_t points = 256;
  std::size_t clouds_per_class = 50;  // synth
  double noise = 0.0;                 // synth jitter sigma
  std::size_t count = 2000;           // digits: total images
};

struct ModelConfig {
  bool input_transform = true;
  bool feature_transform = true;
  std::size_t bottleneck = 1024;
  std::string aggregator = "max";
  double dropout_keep = 0.7;
  double reg_weight = 0.001;
};

struct ExperimentConfig {
  Task task = Task::classify;
  DatasetConfig dataset;
  ModelConfig model;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 0.001;  // halved every 20 epochs
  double lr_floor = 1e-5;
  std::uint64_t seed = 0;
  std::string corruption = "none";  // applied to test clouds at evaluation
  double corruption_amount = 0.0;
  std::string outdir;  // empty: keep everything in memory, write nothing
};

namespace detail {

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("invalid boolean for " + key + ": " + v);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    unsigned long long r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(r);
  } catch (const std::exception&) {
    throw ConfigError("invalid integer for " + key + ": " + v);
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("invalid number for " + key + ": " + v);
  }
}

}  // namespace detail

/// Assigns one `key = value` pair. Unknown keys are hard errors so a typo in a
/// config file or a CLI override never passes silently.
inline void set_config_key(ExperimentConfig& cfg, const std::string& key,
                           const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_size;
  if (key == "task") cfg.task = parse_task(value);
  else if (key == "seed") cfg.seed = parse_size(key, value);
  else if (key == "epochs") cfg.epochs = parse_size(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_size(key, value);
  else if (key == "lr") cfg.lr = parse_double(key, value);
  else if (key == "lr_floor") cfg.lr_floor = parse_double(key, value);
  else if (key == "corruption") cfg.corruption = corruption_name(parse_corruption(value));
  else if (key == "corruption_amount") cfg.corruption_amount = parse_double(key, value);
  else if (key == "outdir") cfg.outdir = value;
  else if (key == "dataset.kind") {
    if (value != "synth" && value != "digits")
      throw ConfigError("unknown dataset kind: " + value);
    cfg.dataset.kind = value;
  } else if (key == "dataset.points") cfg.dataset.points = parse_size(key, value);
  else if (key == "dataset.clouds_per_class")
    cfg.dataset.clouds_per_class = parse_size(key, value);
  else if (key == "dataset.noise") cfg.dataset.noise = parse_double(key, value);
  else if (key == "dataset.count") cfg.dataset.count = parse_size(key, value);
  else if (key == "model.input_transform")
    cfg.model.input_transform = parse_bool(key, value);
  else if (key == "model.feature_transform")
    cfg.model.feature_transform = parse_bool(key, value);
  else if (key == "model.bottleneck") cfg.model.bottleneck = parse_size(key, value);
  else if (key == "model.aggregator")
    cfg.model.aggregator = aggregator_name(parse_aggregator(value));
  else if (key == "model.dropout_keep") cfg.model.dropout_keep = parse_double(key, value);
  else if (key == "model.reg_weight") cfg.model.reg_weight = parse_double(key, value);
  else throw ConfigError("unknown config key: " + key);
}

/// Flat `key = value` text, `#` comments, blank lines ignored.
inline ExperimentConfig parse_config_text(const std::string& text,
                                          const std::string& origin = "<config>") {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError(origin + ":" + std::to_string(lineno) +
                       ": expected key = value, got: " + t);
    set_config_key(cfg, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return cfg;
}

inline ExperimentConfig read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str(), path);
}

/// Canonical echo; parse_config_text(serialize_config(c)) reproduces c.
inline std::string serialize_config(const ExperimentConfig& c) {
  using detail::fmt17;
  std::ostringstream os;
  os << "task = " << task_name(c.task) << "\n";
  os << "seed = " << c.seed << "\n";
  os << "epochs = " << c.epochs << "\n";
  os << "batch_size = " << c.batch_size << "\n";
  os << "lr = " << fmt17(c.lr) << "\n";
  os << "lr_floor = " << fmt17(c.lr_floor) << "\n";
  os << "corruption = " << c.corruption << "\n";
  os << "corruption_amount = " << fmt17(c.corruption_amount) << "\n";
  os << "outdir = " << c.outdir << "\n";
  os << "dataset.kind = " << c.dataset.kind << "\n";
  os << "dataset.points = " << c.dataset.points << "\n";
  os << "dataset.clouds_per_class = " << c.dataset.clouds_per_class << "\n";
  os << "dataset.noise = " << fmt17(c.dataset.noise) << "\n";
  os << "dataset.count = " << c.dataset.count << "\n";
  os << "model.input_transform = " << (c.model.input_transform ? "true" : "false") << "\n";
  os << "model.feature_transform = " << (c.model.feature_transform ? "true" : "false")
     << "\n";
  os << "model.bottleneck = " << c.model.bottleneck << "\n";
  os << "model.aggregator = " << c.model.aggregator << "\n";
  os << "model.dropout_keep = " << fmt17(c.model.dropout_keep) << "\n";
  os << "model.reg_weight = " << fmt17(c.model.reg_weight) << "\n";
  return os.str();
}

inline void validate_config(const ExperimentConfig& c) {
  if (c.epochs < 1) throw ConfigError("epochs must be at least 1");
  // Trailing batches with fewer than 2 clouds are dropped (batch norm needs
  // more than one row in the classifier head), so a batch size below 2 would
  // train on nothing.
  if (c.batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (!(c.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(c.lr_floor > 0.0)) throw ConfigError("lr_floor must be positive");
  if (c.dataset.points < 1) throw ConfigError("dataset.points must be at least 1");
  if (c.model.bottleneck < 1) throw ConfigError("model.bottleneck must be at least 1");
  if (!(c.model.dropout_keep > 0.0) || c.model.dropout_keep > 1.0)
    throw ConfigError("model.dropout_keep must be in (0, 1]");
  if (c.model.reg_weight < 0.0) throw ConfigError("model.reg_weight must be >= 0");
  if (c.task != Task::classify && c.dataset.kind != "synth")
    throw ConfigError(std::string(task_name(c.task)) +
                      " task needs the synth dataset (digits have no part labels "
                      "or surface normals)");
  parse_corruption(c.corruption);
}

// ---------------------------------------------------------------------------
// Dataset and model construction
// ---------------------------------------------------------------------------

inline Dataset build_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.kind == "synth") {
    SynthSpec s;
    s.points_per_cloud = cfg.dataset.points;
    s.clouds_per_class = cfg.dataset.clouds_per_class;
    s.noise_sigma = cfg.dataset.noise;
    s.seed = cfg.seed;
    return synth_generate(s);
  }
  std::vector<std::uint8_t> labels;
  IdxImages imgs = generate_digit_images(cfg.dataset.count, cfg.seed, &labels);
  return pointset_digits(imgs, labels, cfg.seed, cfg.dataset.points);
}

inline int class_of(const PointCloud& c) {
  if (!c.class_label) throw LabelError("cloud " + c.id + " has no class label");
  return *c.class_label;
}

inline ClassifierSpec make_classifier_spec(const ExperimentConfig& cfg,
                                           std::size_t input_dim,
                                           std::size_t num_classes) {
  ClassifierSpec s;
  s.input_dim = input_dim;
  s.use_input_transform = cfg.model.input_transform;
  s.use_feature_transform = cfg.model.feature_transform;
  s.post_widths.back() = cfg.model.bottleneck;
  s.num_classes = num_classes;
  s.dropout_keep = cfg.model.dropout_keep;
  s.reg_weight = cfg.model.reg_weight;
  s.aggregator = parse_aggregator(cfg.model.aggregator);
  return s;
}

inline SegmenterSpec make_segmenter_spec(const ExperimentConfig& cfg,
                                         std::size_t input_dim,
                                         std::size_t num_parts) {
  SegmenterSpec s;
  s.backbone = make_classifier_spec(cfg, input_dim, 0);
  // The normals task reuses the segmentation head as a 3-channel regression.
  s.num_parts = cfg.task == Task::normals ? 3 : num_parts;
  return s;
}

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

/// Overall accuracy and the unweighted mean of per-class recalls. Classes
/// absent from the ground truth do not enter the average.
inline std::pair<double, double> accuracy_from_predictions(
    const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.size() != gt.size()) throw DimensionError("pred/gt length mismatch");
  if (pred.empty()) throw EmptySetError("no predictions to score");
  std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // correct, total
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto& [c, t] = per_class[gt[i]];
    ++t;
    if (pred[i] == gt[i]) { ++c; ++correct; }
  }
  double recall_sum = 0.0;
  for (const auto& [label, ct] : per_class)
    recall_sum += static_cast<double>(ct.first) / static_cast<double>(ct.second);
  return {static_cast<double>(correct) / static_cast<double>(pred.size()),
          recall_sum / static_cast<double>(per_class.size())};
}

/// Batched eval-mode predictions for a labeled dataset.
inline std::vector<int> predict_classes(Classifier& model, const Dataset& ds,
                                        std::size_t chunk = 32) {
  if (ds.clouds.empty()) throw EmptySetError("empty dataset");
  std::vector<int> pred;
  pred.reserve(ds.clouds.size());
  ForwardOptions opts;  // eval mode
  for (std::size_t at = 0; at < ds.clouds.size(); at += chunk) {
    const std::size_t b = std::min(chunk, ds.clouds.size() - at);
    std::vector<TensorPtr> pts;
    pts.reserve(b);
    for (std::size_t i = 0; i < b; ++i) pts.push_back(ds.clouds[at + i].points);
    auto out = model.forward(nullptr, make_batch(pts), opts);
    const std::size_t c = out.logits->cols();
    for (std::size_t i = 0; i < b; ++i) {
      const double* row = out.logits->data.data() + i * c;
      pred.push_back(static_cast<int>(
          std::max_element(row, row + c) - row));
    }
  }
  return pred;
}

inline std::pair<double, double> evaluate_classification(Classifier& model,
                                                         const Dataset& ds) {
  std::vector<int> gt;
  gt.reserve(ds.clouds.size());
  for (const auto& c : ds.clouds) gt.push_back(class_of(c));
  return accuracy_from_predictions(predict_classes(model, ds), gt);
}

// ---------------------------------------------------------------------------
// Segmentation metrics
// ---------------------------------------------------------------------------

/// Shape-level mean IoU over the category's parts. A part absent from both
/// prediction and ground truth has an empty union and counts as 1.
inline double part_miou(const std::vector<int>& pred, const std::vector<int>& gt,
                        const std::vector<int>& parts) {
  if (pred.size() != gt.size()) throw DimensionError("pred/gt length mismatch");
  if (parts.empty()) throw ConfigError("empty part set");
  const std::set<int> allowed(parts.begin(), parts.end());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!allowed.count(pred[i]))
      throw LabelError("predicted label " + std::to_string(pred[i]) +
                       " outside the category's part set");
    if (!allowed.count(gt[i]))
      throw LabelError("ground-truth label " + std::to_string(gt[i]) +
                       " outside the category's part set");
  }
  double sum = 0.0;
  for (int p : parts) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool a = pred[i] == p, b = gt[i] == p;
      if (a && b) ++inter;
      if (a || b) ++uni;
    }
    sum += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return sum / static_cast<double>(parts.size());
}

inline std::vector<std::vector<int>> synth_parts_by_class() {
  std::vector<std::vector<int>> table;
  for (int c = 0; c < 4; ++c)
    table.push_back(parts_of_class(static_cast<PrimitiveClass>(c)));
  return table;
}

inline std::vector<std::string> synth_class_names() {
  std::vector<std::string> names;
  for (int c = 0; c < 4; ++c)
    names.push_back(primitive_name(static_cast<PrimitiveClass>(c)));
  return names;
}

struct MiouReport {
  std::map<std::string, double> per_category;
  double mean_over_shapes = 0.0;      // every shape weighted equally
  double mean_over_categories = 0.0;  // every category weighted equally
};

/// Per-point argmax is restricted to the shape's own category parts, the
/// usual part-segmentation protocol.
inline std::vector<int> predict_parts(Segmenter& model, const PointCloud& cloud,
                                      const std::vector<int>& parts) {
  ForwardOptions opts;
  auto out = model.forward(nullptr, make_batch({cloud.points}), opts);
  std::vector<int> pred(cloud.size());
  const std::size_t w = out.logits->cols();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double* row = out.logits->data.data() + i * w;
    int best = parts.front();
    for (int p : parts)
      if (row[p] > row[best]) best = p;
    pred[i] = best;
  }
  return pred;
}

inline MiouReport dataset_miou(Segmenter& model, const Dataset& ds,
                               const std::vector<std::vector<int>>& parts_by_class,
                               const std::vector<std::string>& class_names) {
  if (ds.clouds.empty()) throw EmptySetError("empty dataset");
  MiouReport r;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  double shape_sum = 0.0;
  for (const auto& cloud : ds.clouds) {
    const auto cls = static_cast<std::size_t>(class_of(cloud));
    if (cls >= parts_by_class.size())
      throw LabelError("class label " + std::to_string(class_of(cloud)) +
                       " has no part table");
    const auto& parts = parts_by_class[cls];
    const double miou = part_miou(predict_parts(model, cloud, parts),
                                  cloud.part_labels, parts);
    shape_sum += miou;
    auto& [s, n] = acc[class_names.at(cls)];
    s += miou;
    ++n;
  }
  r.mean_over_shapes = shape_sum / static_cast<double>(ds.clouds.size());
  double cat_sum = 0.0;
  for (const auto& [name, sn] : acc) {
    r.per_category[name] = sn.first / static_cast<double>(sn.second);
    cat_sum += r.per_category[name];
  }
  r.mean_over_categories = cat_sum / static_cast<double>(acc.size());
  return r;
}

// ---------------------------------------------------------------------------
// Normals metric
// ---------------------------------------------------------------------------

/// Mean |cos| between predicted and true normals over all test points; 1 is
/// perfect alignment up to sign, 0 is orthogonal.
inline double normal_alignment(Segmenter& model, const Dataset& ds) {
  if (ds.clouds.empty()) throw EmptySetError("empty dataset");
  double sum = 0.0;
  std::size_t n = 0;
  ForwardOptions opts;
  for (const auto& cloud : ds.clouds) {
    if (!cloud.normals) throw ConfigError("cloud " + cloud.id + " has no normals");
    auto out = model.forward(nullptr, make_batch({cloud.points}), opts);
    const std::size_t d = out.logits->cols();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      double dot = 0.0, pp = 0.0, tt = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double p = out.logits->at(i, j), t = cloud.normals->at(i, j);
        dot += p * t;
        pp += p * p;
        tt += t * t;
      }
      const double denom = std::sqrt(pp) * std::sqrt(tt);
      sum += denom > 0.0 ? std::abs(dot) / denom : 0.0;
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct MetricsReport {
  // -1 marks a field the task does not produce.
  double overall_accuracy = -1.0;
  double avg_class_accuracy = -1.0;
  double mean_iou_shapes = -1.0;
  double mean_iou_categories = -1.0;
  std::map<std::string, double> per_category_iou;
  double normal_alignment = -1.0;
  std::vector<double> loss_curve;  // per-epoch mean of the optimized loss
  std::vector<double> reg_curve;   // per-epoch mean regularizer component
  std::vector<double> lr_curve;
  double final_loss = 0.0;
  double wall_seconds = 0.0;  // run log only, never in metric files
};

struct TrainResult {
  ExperimentConfig config;
  MetricsReport metrics;
  std::shared_ptr<Classifier> classifier;  // set for Task::classify
  std::shared_ptr<Segmenter> segmenter;    // set for segment and normals
  Dataset train_set, test_set;
  std::vector<double> step_losses;  // every optimizer step, in order
  std::vector<double> step_regs;
};

/// Evaluation-time corruption; per-cloud streams keyed by the cloud index.
inline Dataset corrupt_dataset(const Dataset& ds, const CorruptionSpec& spec,
                               std::uint64_t seed) {
  if (spec.kind == CorruptionKind::none) return ds;
  Dataset out;
  out.num_classes = ds.num_classes;
  out.num_parts = ds.num_parts;
  out.clouds.reserve(ds.clouds.size());
  for (std::size_t i = 0; i < ds.clouds.size(); ++i) {
    Rng rng(seed ^ (0x9E3779B97F4A7C15ull * (i + 1)));
    out.clouds.push_back(corrupt(ds.clouds[i], spec, rng));
  }
  return out;
}

namespace detail {

inline void write_metrics_file(const std::string& path, const MetricsReport& m) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot write " + path);
  auto put = [&](const char* key, double v) {
    if (v >= 0.0) os << key << " = " << fmt17(v) << "\n";
  };
  put("overall_accuracy", m.overall_accuracy);
  put("avg_class_accuracy", m.avg_class_accuracy);
  put("mean_iou_shapes", m.mean_iou_shapes);
  put("mean_iou_categories", m.mean_iou_categories);
  for (const auto& [name, v] : m.per_category_iou)
    os << "iou." << name << " = " << fmt17(v) << "\n";
  put("normal_alignment", m.normal_alignment);
  os << "final_loss = " << fmt17(m.final_loss) << "\n";
  os << "epochs = " << m.loss_curve.size() << "\n";
}

inline void write_loss_curve(const std::string& path, const MetricsReport& m) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot write " + path);
  os << "# setnet-curve v1\n";
  os << "# columns: epoch mean_loss mean_reg lr\n";
  for (std::size_t e = 0; e < m.loss_curve.size(); ++e)
    os << e << " " << fmt17(m.loss_curve[e]) << " " << fmt17(m.reg_curve[e]) << " "
       << fmt17(m.lr_curve[e]) << "\n";
}

struct StepLoss {
  TensorPtr loss;          // scalar to optimize (task + weighted regularizer)
  double reg_value = 0.0;  // regularizer component alone
};

/// One shared loop for all three tasks; `make_loss` builds the batch loss on
/// the given graph from the already augmented batch clouds.
template <class Model, class LossFn>
void training_loop(Model& model, const Dataset& train_set,
                   const ExperimentConfig& cfg, LossFn&& make_loss,
                   TrainResult& r, std::ostream* log) {
  auto flat = flatten_params(model);
  AdamState opt(flat.size());
  Rng order_rng(cfg.seed ^ 0x8badf00d5eedull);
  Rng aug_rng(cfg.seed ^ 0xa5a5a5a5ull);
  Rng drop_rng(cfg.seed ^ 0xc3c3c3c3ull);
  std::vector<std::size_t> order(train_set.clouds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr =
        std::max(cfg.lr * std::pow(0.5, static_cast<double>(epoch / 20)), cfg.lr_floor);
    // Batch-norm decay ramps linearly from 0.5 to 0.99 over the epoch budget.
    const double momentum =
        cfg.epochs > 1
            ? 0.5 + 0.49 * static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1)
            : 0.5;
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0, reg_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t at = 0; at + 2 <= order.size(); at += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - at);
      if (b < 2) break;  // batch norm needs at least two clouds
      std::vector<PointCloud> batch;
      batch.reserve(b);
      for (std::size_t i = 0; i < b; ++i)
        batch.push_back(augment(train_set.clouds[order[at + i]], aug_rng));
      zero_param_grads(model);
      Graph g;
      ForwardOptions opts{Mode::train, momentum, true, &drop_rng};
      StepLoss sl = make_loss(&g, batch, opts);
      const double lv = sl.loss->data[0];
      if (!std::isfinite(lv)) {
        g.backward(sl.loss);
        const auto grads = flatten_grads(model);
        double norm = 0.0;
        for (double x : grads) norm += x * x;
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                           " batch " + std::to_string(batches) + ": loss=" +
                           fmt17(lv) + " grad_norm=" + fmt17(std::sqrt(norm)));
      }
      g.backward(sl.loss);
      adam_step(flat, flatten_grads(model), opt, lr);
      unflatten_params(model, flat);
      r.step_losses.push_back(lv);
      r.step_regs.push_back(sl.reg_value);
      loss_sum += lv;
      reg_sum += sl.reg_value;
      ++batches;
    }
    if (batches == 0) throw EmptySetError("no trainable batches (need 2+ clouds)");
    r.metrics.loss_curve.push_back(loss_sum / static_cast<double>(batches));
    r.metrics.reg_curve.push_back(reg_sum / static_cast<double>(batches));
    r.metrics.lr_curve.push_back(lr);
    if (log)
      *log << "epoch " << epoch << " loss " << fmt17(r.metrics.loss_curve.back())
           << " reg " << fmt17(r.metrics.reg_curve.back()) << " lr " << fmt17(lr)
           << "\n";
  }
  r.metrics.final_loss = r.metrics.loss_curve.back();
}

inline double reg_component(const TensorPtr& mats) {
  if (!mats) return 0.0;
  return orthogonality_loss_batched(nullptr, mats, 64)->data[0];
}

}  // namespace detail

inline TrainResult train(const ExperimentConfig& cfg) {
  validate_config(cfg);
  const auto start = std::chrono::steady_clock::now();
  TrainResult r;
  r.config = cfg;

  Dataset full = build_dataset(cfg);
  split_dataset(full, r.train_set, r.test_set);
  if (r.train_set.clouds.empty() || r.test_set.clouds.empty())
    throw EmptySetError("dataset too small to split; increase clouds_per_class/count");
  const std::size_t input_dim = r.train_set.clouds[0].dim();

  namespace fs = std::filesystem;
  std::ofstream log;
  if (!cfg.outdir.empty()) {
    fs::create_directories(cfg.outdir);
    std::ofstream cfg_os(cfg.outdir + "/config.txt");
    cfg_os << serialize_config(cfg);
    log.open(cfg.outdir + "/train.log");
    log << "# resolved config\n" << serialize_config(cfg) << "# training\n";
  }
  std::ostream* logp = cfg.outdir.empty() ? nullptr : &log;

  const double reg_w = cfg.model.feature_transform ? cfg.model.reg_weight : 0.0;

  if (cfg.task == Task::classify) {
    r.classifier = std::make_shared<Classifier>(
        make_classifier_spec(cfg, input_dim, full.num_classes), cfg.seed);
    auto& model = *r.classifier;
    detail::training_loop(
        model, r.train_set, cfg,
        [&](Graph* g, const std::vector<PointCloud>& batch, ForwardOptions opts) {
          std::vector<TensorPtr> pts;
          std::vector<int> labels;
          for (const auto& c : batch) {
            pts.push_back(c.points);
            labels.push_back(class_of(c));
          }
          auto out = model.forward(g, make_batch(pts), opts);
          auto task = softmax_cross_entropy(g, out.logits, labels);
          detail::StepLoss sl;
          sl.loss = total_loss_batched(g, task, out.feature_transform, 64, reg_w);
          sl.reg_value = detail::reg_component(out.feature_transform);
          return sl;
        },
        r, logp);
  } else {
    r.segmenter = std::make_shared<Segmenter>(
        make_segmenter_spec(cfg, input_dim, full.num_parts), cfg.seed);
    auto& model = *r.segmenter;
    const bool want_normals = cfg.task == Task::normals;
    detail::training_loop(
        model, r.train_set, cfg,
        [&](Graph* g, const std::vector<PointCloud>& batch, ForwardOptions opts) {
          std::vector<TensorPtr> pts;
          for (const auto& c : batch) pts.push_back(c.points);
          auto out = model.forward(g, make_batch(pts), opts);
          TensorPtr task;
          if (want_normals) {
            std::vector<TensorPtr> gts;
            for (const auto& c : batch) {
              if (!c.normals)
                throw ConfigError("cloud " + c.id + " has no normals");
              gts.push_back(c.normals);
            }
            task = cosine_normal_loss(g, out.logits,
                                      gts.size() == 1 ? gts[0] : concat_rows(nullptr, gts));
          } else {
            std::vector<int> labels;
            for (const auto& c : batch)
              labels.insert(labels.end(), c.part_labels.begin(), c.part_labels.end());
            task = softmax_cross_entropy(g, out.logits, labels);
          }
          detail::StepLoss sl;
          sl.loss = total_loss_batched(g, task, out.feature_transform, 64, reg_w);
          sl.reg_value = detail::reg_component(out.feature_transform);
          return sl;
        },
        r, logp);
  }

  // Evaluation, on corrupted test clouds when a protocol is configured.
  const CorruptionSpec eval_spec{parse_corruption(cfg.corruption), cfg.corruption_amount};
  const Dataset eval_set = corrupt_dataset(r.test_set, eval_spec, cfg.seed);
  if (cfg.task == Task::classify) {
    auto [overall, avg] = evaluate_classification(*r.classifier, eval_set);
    r.metrics.overall_accuracy = overall;
    r.metrics.avg_class_accuracy = avg;
  } else if (cfg.task == Task::segment) {
    auto miou =
        dataset_miou(*r.segmenter, eval_set, synth_parts_by_class(), synth_class_names());
    r.metrics.mean_iou_shapes = miou.mean_over_shapes;
    r.metrics.mean_iou_categories = miou.mean_over_categories;
    r.metrics.per_category_iou = miou.per_category;
  } else {
    r.metrics.normal_alignment = normal_alignment(*r.segmenter, eval_set);
  }
  r.metrics.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (!cfg.outdir.empty()) {
    if (r.classifier)
      save_checkpoint(*r.classifier, cfg.outdir + "/checkpoint.pnet");
    else
      save_checkpoint(*r.segmenter, cfg.outdir + "/checkpoint.pnet",
                      cfg.task == Task::normals ? TaskKind::normals : TaskKind::segment);
    detail::write_metrics_file(cfg.outdir + "/metrics.txt", r.metrics);
    detail::write_loss_curve(cfg.outdir + "/loss_curve.txt", r.metrics);
    log << "done\n";
  }
  return r;
}

// ---------------------------------------------------------------------------
// Sweep parallelism
// ---------------------------------------------------------------------------

inline std::size_t sweep_threads() {
  const char* env = std::getenv("SETNET_THREADS");
  if (!env) return 1;
  try {
    const auto n = std::stoull(env);
    return n < 1 ? 1 : static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError(std::string("invalid SETNET_THREADS: ") + env);
  }
}

/// Runs fn(0..count-1), up to SETNET_THREADS jobs at a time. The first
/// exception wins and is rethrown after all workers drain.
template <class Fn>
void run_parallel(std::size_t count, Fn&& fn) {
  const std::size_t workers = std::min(sweep_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Robustness sweep
// ---------------------------------------------------------------------------

struct RobustnessRow {
  CorruptionKind kind = CorruptionKind::none;
  double severity = 0.0;
  double accuracy = 0.0;
};

struct RobustnessReport {
  double clean_accuracy = 0.0;
  std::vector<RobustnessRow> rows;
};

/// Accuracy under the four corruption protocols at the fixed severity grids.
inline RobustnessReport robustness_sweep(Classifier& model, const Dataset& test,
                                         std::uint64_t seed = 0,
                                         const std::string& outpath = "") {
  std::vector<int> gt;
  for (const auto& c : test.clouds) gt.push_back(class_of(c));
  RobustnessReport rep;
  rep.clean_accuracy =
      accuracy_from_predictions(predict_classes(model, test), gt).first;

  const std::vector<std::pair<CorruptionKind, std::vector<double>>> grid = {
      {CorruptionKind::delete_random, {0.0, 0.25, 0.5, 0.75, 0.875}},
      {CorruptionKind::delete_furthest, {0.0, 0.25, 0.5, 0.75, 0.875}},
      {CorruptionKind::outliers, {0.0, 0.05, 0.1, 0.2}},
      {CorruptionKind::perturb, {0.0, 0.02, 0.04, 0.06, 0.08, 0.1}},
  };
  std::size_t row_index = 0;
  for (const auto& [kind, severities] : grid)
    for (double s : severities) {
      const Dataset corrupted = corrupt_dataset(test, {kind, s}, seed + row_index);
      const double acc =
          accuracy_from_predictions(predict_classes(model, corrupted), gt).first;
      rep.rows.push_back({kind, s, acc});
      ++row_index;
    }

  if (!outpath.empty()) {
    std::ofstream os(outpath);
    if (!os) throw ParseError("cannot write " + outpath);
    os << "# setnet-curve v1\n";
    os << "# columns: protocol severity accuracy\n";
    for (const auto& row : rep.rows)
      os << corruption_name(row.kind) << " " << detail::fmt17(row.severity) << " "
         << detail::fmt17(row.accuracy) << "\n";
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Transform ablation
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string label;
  bool input_transform = false;
  bool feature_transform = false;
  double reg_weight = 0.0;
  double accuracy = 0.0;
  std::size_t param_count = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
};

/// Trains the five alignment variants on identical data with a shared seed.
inline AblationReport ablation_run(const ExperimentConfig& base,
                                   const std::string& outpath = "") {
  if (base.task != Task::classify)
    throw ConfigError("ablation_run needs a classification config");
  const double reg = base.model.reg_weight > 0.0 ? base.model.reg_weight : 0.001;
  struct Variant {
    const char* label;
    bool input_t, feature_t;
    double reg_w;
  };
  const std::vector<Variant> variants = {
      {"none", false, false, 0.0},
      {"input", true, false, 0.0},
      {"feature", false, true, 0.0},
      {"feature+reg", false, true, reg},
      {"both", true, true, reg},
  };
  AblationReport rep;
  rep.rows.resize(variants.size());
  run_parallel(variants.size(), [&](std::size_t i) {
    const auto& v = variants[i];
    ExperimentConfig cfg = base;
    cfg.model.input_transform = v.input_t;
    cfg.model.feature_transform = v.feature_t;
    cfg.model.reg_weight = v.reg_w;
    if (!base.outdir.empty()) cfg.outdir = base.outdir + "/" + v.label;
    TrainResult res = train(cfg);
    rep.rows[i] = {v.label,
                   v.input_t,
                   v.feature_t,
                   v.reg_w,
                   res.metrics.overall_accuracy,
                   count_parameters(res.classifier->spec)};
  });

  if (!outpath.empty()) {
    std::ofstream os(outpath);
    if (!os) throw ParseError("cannot write " + outpath);
    os << "# setnet-curve v1\n";
    os << "# columns: variant accuracy params\n";
    for (const auto& row : rep.rows)
      os << row.label << " " << detail::fmt17(row.accuracy) << " " << row.param_count
         << "\n";
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Bottleneck sweep
// ---------------------------------------------------------------------------

struct BottleneckCell {
  std::size_t bottleneck = 0;
  std::size_t points = 0;
  double accuracy = 0.0;
  std::size_t max_critical = 0;  // largest |critical set| over the probed clouds
  bool critical_ok = false;      // |critical set| <= bottleneck on every probe
};

struct BottleneckReport {
  std::vector<std::size_t> bottlenecks, point_counts;
  std::vector<BottleneckCell> cells;  // row-major over (bottleneck, points)
};

inline BottleneckReport bottleneck_sweep(
    const ExperimentConfig& base,
    const std::vector<std::size_t>& bottlenecks = {64, 128, 256, 512, 1024},
    const std::vector<std::size_t>& point_counts = {64, 128, 256},
    const std::string& outpath = "") {
  if (base.task != Task::classify)
    throw ConfigError("bottleneck_sweep needs a classification config");
  if (bottlenecks.empty() || point_counts.empty())
    throw ConfigError("bottleneck_sweep needs non-empty grids");
  BottleneckReport rep;
  rep.bottlenecks = bottlenecks;
  rep.point_counts = point_counts;
  rep.cells.resize(bottlenecks.size() * point_counts.size());
  run_parallel(rep.cells.size(), [&](std::size_t i) {
    const std::size_t k = bottlenecks[i / point_counts.size()];
    const std::size_t n = point_counts[i % point_counts.size()];
    ExperimentConfig cfg = base;
    cfg.model.bottleneck = k;
    cfg.dataset.points = n;
    cfg.seed = base.seed + i;  // per-run stream
    if (!base.outdir.empty())
      cfg.outdir = base.outdir + "/k" + std::to_string(k) + "_n" + std::to_string(n);
    TrainResult res = train(cfg);
    BottleneckCell cell{k, n, res.metrics.overall_accuracy, 0, true};
    const std::size_t probes = std::min<std::size_t>(10, res.test_set.clouds.size());
    for (std::size_t c = 0; c < probes; ++c) {
      const auto crit = critical_set(*res.classifier, res.test_set.clouds[c]);
      cell.max_critical = std::max(cell.max_critical, crit.critical_indices.size());
      if (crit.critical_indices.size() > k) cell.critical_ok = false;
    }
    rep.cells[i] = cell;
  });

  if (!outpath.empty()) {
    std::ofstream os(outpath);
    if (!os) throw ParseError("cannot write " + outpath);
    os << "# setnet-curve v1\n";
    os << "# columns: bottleneck points accuracy max_critical\n";
    for (const auto& cell : rep.cells)
      os << cell.bottleneck << " " << cell.points << " " << detail::fmt17(cell.accuracy)
         << " " << cell.max_critical << "\n";
  }
  return rep;
}

}  // namespace setnet
