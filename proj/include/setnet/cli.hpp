#pragma once

// Command-line front end. All verb logic lives here so the test suite can
// drive it in-process; tools/setnet.cpp is a thin main(). Every command
// echoes its fully resolved configuration before doing work, writes only
// under its output directory, and exits 0 on success, 1 on usage errors,
// 2 on runtime failures.

#include "setnet/analysis.hpp"
#include "setnet/data.hpp"
#include "setnet/harness.hpp"
#include "setnet/models.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace setnet::cli {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline const char* usage_text() {
  return
      "usage: setnet <verb> [flags] [key=value overrides]\n"
      "\n"
      "verbs:\n"
      "  train   --config F [--out DIR] [--seed N] [key=value ...]\n"
      "  eval    --checkpoint C --data DIR\n"
      "  analyze critical    --checkpoint C --cloud F --out DIR\n"
      "  analyze upperbound  --checkpoint C --cloud F --out DIR [--resolution R]\n"
      "  analyze grid        --checkpoint C --cloud F --dim J --out DIR [--resolution R]\n"
      "  analyze retrieve    --checkpoint C --query F --gallery DIR [--k N] [--out DIR]\n"
      "  analyze correspond  --checkpoint C --cloud-a F --cloud-b G [--out DIR]\n"
      "  sweep ablation      --config F --out DIR [key=value ...]\n"
      "  sweep robustness    --config F --out DIR [key=value ...]\n"
      "  sweep bottleneck    --config F --out DIR [--bottlenecks L] [--points L] [key=value ...]\n"
      "  data synth          --out DIR [--seed N] [key=value ...]\n"
      "  data mnist          --out DIR [--seed N] [key=value ...]\n"
      "\n"
      "Config files are flat `key = value` text; overrides apply after the file\n"
      "in command-line order. Seeds default to 0. SETNET_THREADS caps sweep\n"
      "parallelism (default 1).\n";
}

namespace detail {

using setnet::detail::fmt17;

struct Args {
  std::map<std::string, std::string> flags;
  std::vector<std::pair<std::string, std::string>> overrides;  // argv order
};

/// `--seed` and `--out` are sugar for the config keys `seed` and `outdir`,
/// kept in override order so later settings win.
inline Args parse_args(const std::vector<std::string>& argv, std::size_t start,
                       const std::vector<std::string>& allowed) {
  Args a;
  for (std::size_t i = start; i < argv.size(); ++i) {
    const std::string& tok = argv[i];
    if (tok.rfind("--", 0) == 0) {
      const std::string name = tok.substr(2);
      if (name == "seed" || name == "out") {
        if (i + 1 >= argv.size()) throw UsageError("flag --" + name + " needs a value");
        a.overrides.emplace_back(name == "out" ? "outdir" : "seed", argv[++i]);
        continue;
      }
      if (std::find(allowed.begin(), allowed.end(), name) == allowed.end())
        throw UsageError("unknown flag --" + name);
      if (i + 1 >= argv.size()) throw UsageError("flag --" + name + " needs a value");
      a.flags[name] = argv[++i];
    } else if (tok.find('=') != std::string::npos) {
      const auto eq = tok.find('=');
      a.overrides.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
    } else {
      throw UsageError("unexpected argument: " + tok);
    }
  }
  return a;
}

inline std::string need_flag(const Args& a, const std::string& name) {
  auto it = a.flags.find(name);
  if (it == a.flags.end()) throw UsageError("missing required flag --" + name);
  return it->second;
}

inline std::size_t flag_size(const Args& a, const std::string& name,
                             std::size_t fallback) {
  auto it = a.flags.find(name);
  if (it == a.flags.end()) return fallback;
  try {
    return std::stoull(it->second);
  } catch (const std::exception&) {
    throw UsageError("flag --" + name + " needs an integer, got: " + it->second);
  }
}

inline std::vector<std::size_t> flag_size_list(const Args& a, const std::string& name,
                                               std::vector<std::size_t> fallback) {
  auto it = a.flags.find(name);
  if (it == a.flags.end()) return fallback;
  std::vector<std::size_t> out;
  std::istringstream is(it->second);
  std::string part;
  while (std::getline(is, part, ',')) {
    try {
      out.push_back(std::stoull(part));
    } catch (const std::exception&) {
      throw UsageError("flag --" + name + " needs comma-separated integers, got: " +
                       it->second);
    }
  }
  if (out.empty())
    throw UsageError("flag --" + name + " needs at least one value");
  return out;
}

/// Command-line overrides and sugar flags; an unknown key here is a usage
/// error since it came from argv, not a file.
inline void apply_overrides(ExperimentConfig& cfg, const Args& a) {
  for (const auto& [key, value] : a.overrides) {
    try {
      set_config_key(cfg, key, value);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
}

inline ExperimentConfig config_from_args(const Args& a) {
  ExperimentConfig cfg = read_config_file(need_flag(a, "config"));
  apply_overrides(cfg, a);
  return cfg;
}

inline void echo_config(std::ostream& out, const std::string& verb,
                        const ExperimentConfig& cfg) {
  out << "# effective config\nverb = " << verb << "\n" << serialize_config(cfg);
}

inline void echo_flags(std::ostream& out, const std::string& verb,
                       const std::vector<std::pair<std::string, std::string>>& kv) {
  out << "# effective config\nverb = " << verb << "\n";
  for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
}

inline std::string require_outdir(const ExperimentConfig& cfg) {
  if (cfg.outdir.empty())
    throw UsageError("missing output directory (--out DIR or outdir=DIR)");
  return cfg.outdir;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset directories: one .cloud file per shape plus an index manifest
// ---------------------------------------------------------------------------

struct DatasetDir {
  Dataset ds;
  std::vector<std::vector<int>> parts_by_class;  // empty when parts == 0
  std::vector<std::string> class_names;
};

inline void write_dataset_dir(const Dataset& ds, const std::string& dir,
                              const std::vector<std::vector<int>>& parts_by_class = {},
                              const std::vector<std::string>& class_names = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream os(fs::path(dir) / "index.txt");
  if (!os) throw ParseError("cannot write " + dir + "/index.txt");
  os << "# setnet-index v1\n";
  os << "classes = " << ds.num_classes << "\n";
  os << "parts = " << ds.num_parts << "\n";
  for (std::size_t c = 0; c < class_names.size(); ++c)
    os << "name " << c << " " << class_names[c] << "\n";
  for (std::size_t c = 0; c < parts_by_class.size(); ++c) {
    os << "partset " << c;
    for (int p : parts_by_class[c]) os << " " << p;
    os << "\n";
  }
  for (const auto& cloud : ds.clouds) {
    const std::string file = cloud.id + ".cloud";
    write_cloud_file(cloud, (fs::path(dir) / file).string());
    if (!cloud.class_label)
      throw LabelError("cloud " + cloud.id + " has no class label");
    os << "cloud " << file << " " << *cloud.class_label << "\n";
  }
}

inline DatasetDir read_dataset_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string index = (fs::path(dir) / "index.txt").string();
  std::ifstream is(index);
  if (!is) throw ParseError("cannot open dataset index: " + index);
  DatasetDir r;
  std::string line;
  std::size_t lineno = 0;
  bool saw_header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (lineno == 1) {
      if (line != "# setnet-index v1")
        throw ParseError(index + ":1: expected '# setnet-index v1'");
      saw_header = true;
      continue;
    }
    std::string tag;
    ls >> tag;
    auto bad = [&](const std::string& why) {
      return ParseError(index + ":" + std::to_string(lineno) + ": " + why);
    };
    if (tag == "classes" || tag == "parts") {
      std::string eq;
      std::size_t v = 0;
      if (!(ls >> eq >> v) || eq != "=") throw bad("expected '" + tag + " = N'");
      (tag == "classes" ? r.ds.num_classes : r.ds.num_parts) = v;
    } else if (tag == "name") {
      std::size_t c = 0;
      std::string name;
      if (!(ls >> c >> name)) throw bad("expected 'name <class> <label>'");
      if (r.class_names.size() <= c) r.class_names.resize(c + 1);
      r.class_names[c] = name;
    } else if (tag == "partset") {
      std::size_t c = 0;
      if (!(ls >> c)) throw bad("expected 'partset <class> <parts...>'");
      std::vector<int> parts;
      int p = 0;
      while (ls >> p) parts.push_back(p);
      if (parts.empty()) throw bad("partset with no parts");
      if (r.parts_by_class.size() <= c) r.parts_by_class.resize(c + 1);
      r.parts_by_class[c] = parts;
    } else if (tag == "cloud") {
      std::string file;
      int label = 0;
      if (!(ls >> file >> label)) throw bad("expected 'cloud <file> <class>'");
      PointCloud cloud = read_cloud_file((fs::path(dir) / file).string());
      cloud.class_label = label;
      r.ds.clouds.push_back(std::move(cloud));
    } else {
      throw bad("unknown record: " + tag);
    }
  }
  if (!saw_header) throw ParseError(index + ":1: empty index file");
  if (r.ds.clouds.empty()) throw ParseError(index + ": index lists no clouds");
  if (r.class_names.empty())
    for (std::size_t c = 0; c < r.ds.num_classes; ++c)
      r.class_names.push_back("class" + std::to_string(c));
  return r;
}

// ---------------------------------------------------------------------------
// Verbs
// ---------------------------------------------------------------------------

namespace detail {

inline int cmd_train(const std::vector<std::string>& argv, std::ostream& out) {
  Args a = parse_args(argv, 1, {"config"});
  ExperimentConfig cfg = config_from_args(a);
  echo_config(out, "train", cfg);
  require_outdir(cfg);
  TrainResult r = train(cfg);
  out << "# results\n";
  if (r.metrics.overall_accuracy >= 0.0) {
    out << "overall_accuracy = " << fmt17(r.metrics.overall_accuracy) << "\n";
    out << "avg_class_accuracy = " << fmt17(r.metrics.avg_class_accuracy) << "\n";
  }
  if (r.metrics.mean_iou_shapes >= 0.0) {
    out << "mean_iou_shapes = " << fmt17(r.metrics.mean_iou_shapes) << "\n";
    out << "mean_iou_categories = " << fmt17(r.metrics.mean_iou_categories) << "\n";
  }
  if (r.metrics.normal_alignment >= 0.0)
    out << "normal_alignment = " << fmt17(r.metrics.normal_alignment) << "\n";
  out << "final_loss = " << fmt17(r.metrics.final_loss) << "\n";
  out << "wall_seconds = " << fmt17(r.metrics.wall_seconds) << "\n";
  out << "outputs = " << cfg.outdir << "\n";
  return 0;
}

inline int cmd_eval(const std::vector<std::string>& argv, std::ostream& out) {
  Args a = parse_args(argv, 1, {"checkpoint", "data"});
  const std::string ckpath = need_flag(a, "checkpoint");
  const std::string datadir = need_flag(a, "data");
  echo_flags(out, "eval", {{"checkpoint", ckpath}, {"data", datadir}});

  Checkpoint ck = load_checkpoint(ckpath);
  DatasetDir data = read_dataset_dir(datadir);
  out << "# results\n";
  if (ck.task == TaskKind::classify) {
    auto [overall, avg] = evaluate_classification(*ck.classifier, data.ds);
    out << "overall_accuracy = " << fmt17(overall) << "\n";
    out << "avg_class_accuracy = " << fmt17(avg) << "\n";
  } else if (ck.task == TaskKind::segment) {
    if (data.parts_by_class.empty())
      throw ParseError("dataset index has no partset records; cannot score "
                       "segmentation");
    MiouReport rep =
        dataset_miou(*ck.segmenter, data.ds, data.parts_by_class, data.class_names);
    out << "mean_iou_shapes = " << fmt17(rep.mean_over_shapes) << "\n";
    out << "mean_iou_categories = " << fmt17(rep.mean_over_categories) << "\n";
    for (const auto& [name, v] : rep.per_category)
      out << "iou." << name << " = " << fmt17(v) << "\n";
  } else {
    throw UnsupportedError(
        "normals checkpoints score against generated normals during training; "
        "cloud files carry no normals to evaluate");
  }
  return 0;
}

template <class Fn>
auto with_checkpoint_model(Checkpoint& ck, Fn&& fn) {
  if (ck.classifier) return fn(*ck.classifier);
  return fn(*ck.segmenter);
}

inline int cmd_analyze(const std::vector<std::string>& argv, std::ostream& out) {
  if (argv.size() < 2)
    throw UsageError("analyze needs a mode: critical|upperbound|grid|retrieve|correspond");
  const std::string mode = argv[1];
  namespace fs = std::filesystem;

  if (mode == "critical" || mode == "upperbound") {
    Args a = parse_args(argv, 2, {"checkpoint", "cloud", "resolution"});
    const std::string ckpath = need_flag(a, "checkpoint");
    const std::string cloudpath = need_flag(a, "cloud");
    const std::size_t resolution = flag_size(a, "resolution", 32);
    std::string outdir;
    for (const auto& [k, v] : a.overrides)
      if (k == "outdir") outdir = v;
    if (outdir.empty()) throw UsageError("missing required flag --out");
    std::vector<std::pair<std::string, std::string>> echo = {
        {"checkpoint", ckpath}, {"cloud", cloudpath}, {"out", outdir}};
    if (mode == "upperbound") echo.push_back({"resolution", std::to_string(resolution)});
    echo_flags(out, "analyze " + mode, echo);

    Checkpoint ck = load_checkpoint(ckpath);
    PointCloud cloud = read_cloud_file(cloudpath);
    CriticalSetReport rep = with_checkpoint_model(ck, [&](auto& model) {
      auto pf = point_function(model, cloud);
      CriticalSetReport r = critical_set(pf, cloud);
      if (mode == "upperbound")
        r.upper_bound_points = upper_bound_shape(pf, r.u, resolution);
      return r;
    });
    fs::create_directories(outdir);
    const std::string file =
        (fs::path(outdir) / (mode + "_" + cloud.id + ".txt")).string();
    write_critical_file(rep, file);
    out << "# results\n";
    out << "critical_count = " << rep.critical_indices.size() << "\n";
    out << "bottleneck = " << rep.bottleneck << "\n";
    out << "checks_pass = " << (rep.all_checks_pass() ? 1 : 0) << "\n";
    if (mode == "upperbound")
      out << "upper_bound_points = " << rep.upper_bound_points.size() << "\n";
    out << "wrote = " << file << "\n";
    return 0;
  }

  if (mode == "grid") {
    Args a = parse_args(argv, 2, {"checkpoint", "cloud", "dim", "resolution"});
    const std::string ckpath = need_flag(a, "checkpoint");
    const std::string cloudpath = need_flag(a, "cloud");
    const std::size_t dim = flag_size(a, "dim", 0);
    if (!a.flags.count("dim")) throw UsageError("missing required flag --dim");
    const std::size_t resolution = flag_size(a, "resolution", 32);
    std::string outdir;
    for (const auto& [k, v] : a.overrides)
      if (k == "outdir") outdir = v;
    if (outdir.empty()) throw UsageError("missing required flag --out");
    echo_flags(out, "analyze grid",
               {{"checkpoint", ckpath},
                {"cloud", cloudpath},
                {"dim", std::to_string(dim)},
                {"resolution", std::to_string(resolution)},
                {"out", outdir}});

    Checkpoint ck = load_checkpoint(ckpath);
    PointCloud cloud = read_cloud_file(cloudpath);
    ActivationGrid grid = with_checkpoint_model(ck, [&](auto& model) {
      return point_function_grid(point_function(model, cloud), dim, resolution);
    });
    fs::create_directories(outdir);
    const std::string file =
        (fs::path(outdir) / ("grid_dim" + std::to_string(dim) + ".txt")).string();
    write_grid_file(grid, file);
    out << "# results\n";
    out << "resolution = " << grid.resolution << "\n";
    out << "mask_fraction = " << fmt17(mask_fraction(grid)) << "\n";
    out << "wrote = " << file << "\n";
    return 0;
  }

  if (mode == "retrieve") {
    Args a = parse_args(argv, 2, {"checkpoint", "query", "gallery", "k"});
    const std::string ckpath = need_flag(a, "checkpoint");
    const std::string querypath = need_flag(a, "query");
    const std::string gallerydir = need_flag(a, "gallery");
    const std::size_t k = flag_size(a, "k", 5);
    std::string outdir;
    for (const auto& [kk, v] : a.overrides)
      if (kk == "outdir") outdir = v;
    echo_flags(out, "analyze retrieve",
               {{"checkpoint", ckpath},
                {"query", querypath},
                {"gallery", gallerydir},
                {"k", std::to_string(k)}});

    Checkpoint ck = load_checkpoint(ckpath);
    if (ck.task != TaskKind::classify)
      throw UnsupportedError(
          "retrieval uses the classifier's penultimate features; load a "
          "classification checkpoint");
    PointCloud query = read_cloud_file(querypath);
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(gallerydir))
      if (entry.path().extension() == ".cloud") files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    std::vector<PointCloud> gallery;
    for (const auto& f : files) gallery.push_back(read_cloud_file(f));
    RetrievalResult res = retrieve(*ck.classifier, query, gallery, k);
    out << "# results\n# columns: rank id distance\n";
    std::ostringstream rows;
    for (std::size_t i = 0; i < res.ids.size(); ++i)
      rows << i << " " << res.ids[i] << " " << fmt17(res.distances[i]) << "\n";
    out << rows.str();
    if (!outdir.empty()) {
      fs::create_directories(outdir);
      const std::string file = (fs::path(outdir) / "retrieval.txt").string();
      std::ofstream os(file);
      os << "# setnet-curve v1\n# columns: rank id distance\n" << rows.str();
      out << "wrote = " << file << "\n";
    }
    return 0;
  }

  if (mode == "correspond") {
    Args a = parse_args(argv, 2, {"checkpoint", "cloud-a", "cloud-b"});
    const std::string ckpath = need_flag(a, "checkpoint");
    const std::string apath = need_flag(a, "cloud-a");
    const std::string bpath = need_flag(a, "cloud-b");
    std::string outdir;
    for (const auto& [k, v] : a.overrides)
      if (k == "outdir") outdir = v;
    echo_flags(out, "analyze correspond",
               {{"checkpoint", ckpath}, {"cloud-a", apath}, {"cloud-b", bpath}});

    Checkpoint ck = load_checkpoint(ckpath);
    if (ck.task != TaskKind::classify)
      throw UnsupportedError(
          "correspondence uses classifier argmax sources; load a classification "
          "checkpoint");
    PointCloud ca = read_cloud_file(apath);
    PointCloud cb = read_cloud_file(bpath);
    auto pairs = correspondence(*ck.classifier, ca, cb);
    out << "# results\n# columns: index_a index_b\n";
    std::ostringstream rows;
    for (const auto& [ia, ib] : pairs) rows << ia << " " << ib << "\n";
    out << rows.str();
    out << "pairs = " << pairs.size() << "\n";
    if (!outdir.empty()) {
      fs::create_directories(outdir);
      const std::string file = (fs::path(outdir) / "correspondence.txt").string();
      std::ofstream os(file);
      os << "# setnet-curve v1\n# columns: index_a index_b\n" << rows.str();
      out << "wrote = " << file << "\n";
    }
    return 0;
  }

  throw UsageError("unknown analyze mode: " + mode);
}

inline int cmd_sweep(const std::vector<std::string>& argv, std::ostream& out) {
  if (argv.size() < 2)
    throw UsageError("sweep needs a mode: ablation|robustness|bottleneck");
  const std::string mode = argv[1];
  namespace fs = std::filesystem;

  if (mode == "ablation") {
    Args a = parse_args(argv, 2, {"config"});
    ExperimentConfig base = config_from_args(a);
    echo_config(out, "sweep ablation", base);
    const std::string outdir = require_outdir(base);
    fs::create_directories(outdir);
    AblationReport rep = ablation_run(base, outdir + "/ablation.txt");
    out << "# results\n# columns: variant accuracy params\n";
    for (const auto& row : rep.rows)
      out << row.label << " " << fmt17(row.accuracy) << " " << row.param_count << "\n";
    out << "wrote = " << outdir << "/ablation.txt\n";
    return 0;
  }

  if (mode == "robustness") {
    Args a = parse_args(argv, 2, {"config"});
    ExperimentConfig base = config_from_args(a);
    echo_config(out, "sweep robustness", base);
    const std::string outdir = require_outdir(base);
    if (base.task != Task::classify)
      throw ConfigError("robustness sweep needs a classification config");
    TrainResult r = train(base);
    RobustnessReport rep = robustness_sweep(*r.classifier, r.test_set, base.seed,
                                            outdir + "/robustness.txt");
    out << "# results\n";
    out << "clean_accuracy = " << fmt17(rep.clean_accuracy) << "\n";
    out << "# columns: protocol severity accuracy\n";
    for (const auto& row : rep.rows)
      out << corruption_name(row.kind) << " " << fmt17(row.severity) << " "
          << fmt17(row.accuracy) << "\n";
    out << "wrote = " << outdir << "/robustness.txt\n";
    return 0;
  }

  if (mode == "bottleneck") {
    Args a = parse_args(argv, 2, {"config", "bottlenecks", "points"});
    ExperimentConfig base = config_from_args(a);
    echo_config(out, "sweep bottleneck", base);
    const std::string outdir = require_outdir(base);
    const auto ks = flag_size_list(a, "bottlenecks", {64, 128, 256, 512, 1024});
    const auto ns = flag_size_list(a, "points", {64, 128, 256});
    BottleneckReport rep = bottleneck_sweep(base, ks, ns, outdir + "/bottleneck.txt");
    out << "# results\n# columns: bottleneck points accuracy max_critical\n";
    for (const auto& cell : rep.cells)
      out << cell.bottleneck << " " << cell.points << " " << fmt17(cell.accuracy) << " "
          << cell.max_critical << "\n";
    out << "wrote = " << outdir << "/bottleneck.txt\n";
    return 0;
  }

  throw UsageError("unknown sweep mode: " + mode);
}

inline int cmd_data(const std::vector<std::string>& argv, std::ostream& out) {
  if (argv.size() < 2) throw UsageError("data needs a mode: synth|mnist");
  const std::string mode = argv[1];
  if (mode != "synth" && mode != "mnist") throw UsageError("unknown data mode: " + mode);
  Args a = parse_args(argv, 2, {});
  ExperimentConfig cfg;
  cfg.dataset.kind = mode == "mnist" ? "digits" : "synth";
  apply_overrides(cfg, a);
  const std::string outdir = require_outdir(cfg);
  echo_config(out, "data " + mode, cfg);
  namespace fs = std::filesystem;
  fs::create_directories(outdir);

  if (mode == "synth") {
    Dataset ds = build_dataset(cfg);
    write_dataset_dir(ds, outdir, synth_parts_by_class(), synth_class_names());
    out << "# results\n";
    out << "clouds = " << ds.clouds.size() << "\n";
    out << "classes = " << ds.num_classes << "\n";
    out << "parts = " << ds.num_parts << "\n";
    out << "wrote = " << outdir << "/index.txt\n";
    return 0;
  }

  std::vector<std::uint8_t> labels;
  IdxImages imgs = generate_digit_images(cfg.dataset.count, cfg.seed, &labels);
  const std::string ipath = (fs::path(outdir) / "images-idx3-ubyte").string();
  const std::string lpath = (fs::path(outdir) / "labels-idx1-ubyte").string();
  write_idx_images(imgs, ipath);
  write_idx_labels(labels, lpath);
  out << "# results\n";
  out << "images = " << imgs.count << "\n";
  out << "wrote = " << ipath << "\n";
  out << "wrote = " << lpath << "\n";
  return 0;
}

}  // namespace detail

/// Entry point shared by the binary and the tests. Returns the process exit
/// code: 0 success, 1 usage error, 2 runtime failure.
inline int run(const std::vector<std::string>& argv, std::ostream& out,
               std::ostream& err) {
  try {
    if (argv.empty()) {
      err << usage_text();
      return 1;
    }
    const std::string& verb = argv[0];
    if (verb == "train") return detail::cmd_train(argv, out);
    if (verb == "eval") return detail::cmd_eval(argv, out);
    if (verb == "analyze") return detail::cmd_analyze(argv, out);
    if (verb == "sweep") return detail::cmd_sweep(argv, out);
    if (verb == "data") return detail::cmd_data(argv, out);
    if (verb == "help" || verb == "--help" || verb == "-h") {
      out << usage_text();
      return 0;
    }
    throw UsageError("unknown verb: " + verb);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n\n" << usage_text();
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace setnet::cli
