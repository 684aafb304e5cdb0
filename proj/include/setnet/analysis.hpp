#pragma once

// Executable structure theory for max-aggregated point networks: critical
// sets, upper-bound shapes, verification that any set between the two leaves
// the global feature untouched, activation grids over the unit cube, feature
// retrieval, and critical-point correspondence.

#include <array>
#include <cstring>
#include <map>
#include <set>

#include "setnet/data.hpp"
#include "setnet/models.hpp"

namespace setnet {

// ---------------------------------------------------------------------------
// Frozen per-point feature map
// ---------------------------------------------------------------------------

/// h: one point in, K features out, evaluated row-independently in eval mode.
/// Models with alignment nets get their transforms frozen on a reference
/// cloud, so h stays a fixed function while sets vary. Borrows the model; do
/// not outlive it.
struct PointFunction {
  std::function<TensorPtr(const TensorPtr&)> h;  // q x m -> q x K
  std::size_t K = 0;
  std::size_t input_dim = 0;
  AggKind aggregator = AggKind::max;
};

namespace detail {

template <class Model>
PointFunction make_point_function(Model& m, std::size_t input_dim, std::size_t K,
                                  AggKind agg, const PointCloud& reference) {
  check_cloud(reference);
  if (reference.dim() != input_dim)
    throw DimensionError("reference cloud dim does not match the model");
  TensorPtr in_m, feat_m;
  if (m.input_tnet || m.feature_tnet) {
    ForwardOptions opts;  // eval
    const std::vector<std::size_t> offsets{0, reference.size()};
    TensorPtr pts = reference.points;
    if (m.input_tnet) {
      auto t = m.input_tnet->forward(nullptr, pts, offsets, opts);
      in_m = reshape(nullptr, t, {input_dim, input_dim});
      pts = apply_transform(nullptr, pts, in_m);
    }
    if (m.feature_tnet) {
      auto hh = m.pre.forward(nullptr, pts, Mode::eval);
      const std::size_t fw = m.pre.out_width();
      auto t = m.feature_tnet->forward(nullptr, hh, offsets, opts);
      feat_m = reshape(nullptr, t, {fw, fw});
    }
  }
  PointFunction pf;
  pf.K = K;
  pf.input_dim = input_dim;
  pf.aggregator = agg;
  pf.h = [&m, in_m, feat_m](const TensorPtr& pts) {
    return m.per_point_features(nullptr, pts, in_m, feat_m);
  };
  return pf;
}

}  // namespace detail

inline PointFunction point_function(Classifier& m, const PointCloud& reference) {
  return detail::make_point_function(m, m.spec.input_dim, m.spec.bottleneck(),
                                     m.spec.aggregator, reference);
}

inline PointFunction point_function(Segmenter& m, const PointCloud& reference) {
  const auto& b = m.spec.backbone;
  return detail::make_point_function(m, b.input_dim, b.bottleneck(), b.aggregator,
                                     reference);
}

// ---------------------------------------------------------------------------
// Critical sets
// ---------------------------------------------------------------------------

struct CriticalSetReport {
  std::string cloud_id;
  std::size_t bottleneck = 0;
  std::vector<double> u;                      // K-dim global feature
  std::vector<std::size_t> critical_indices;  // sorted, unique
  std::vector<std::array<double, 3>> upper_bound_points;
  std::map<std::string, bool> checks;

  bool all_checks_pass() const {
    for (const auto& [name, ok] : checks)
      if (!ok) return false;
    return true;
  }
};

/// The critical set: for each feature dimension, the first row attaining the
/// columnwise max. Points that win no column are removable (see below).
inline CriticalSetReport critical_set(const PointFunction& pf,
                                      const PointCloud& cloud) {
  check_cloud(cloud);
  if (pf.aggregator != AggKind::max)
    throw UnsupportedError("critical sets are defined for max aggregation only");
  if (cloud.dim() != pf.input_dim)
    throw DimensionError("cloud dim does not match the feature map");
  auto H = pf.h(cloud.points);
  auto mx = max_over_set(nullptr, H);
  CriticalSetReport r;
  r.cloud_id = cloud.id;
  r.bottleneck = pf.K;
  r.u = mx.values->data;
  const std::set<std::size_t> uniq(mx.argmax.begin(), mx.argmax.end());
  r.critical_indices.assign(uniq.begin(), uniq.end());
  bool in_range = true;
  for (std::size_t i : r.critical_indices) in_range = in_range && i < cloud.size();
  r.checks["critical_count_within_bottleneck"] =
      r.critical_indices.size() <= pf.K;
  r.checks["critical_indices_in_range"] = in_range;
  return r;
}

template <class Model>
  requires requires(Model& mm, const PointCloud& cc) { point_function(mm, cc); }
CriticalSetReport critical_set(Model& m, const PointCloud& cloud) {
  return critical_set(point_function(m, cloud), cloud);
}

// ---------------------------------------------------------------------------
// Upper-bound shape
// ---------------------------------------------------------------------------

namespace detail {

/// Runs `consume(points, first_linear_index, count)` over the r^3 grid on
/// [-1,1]^3 in slabs, x-major then y then z.
template <class F>
void walk_cube_grid(std::size_t r, F&& consume) {
  if (r < 2) throw ConfigError("grid resolution must be at least 2");
  auto coord = [r](std::size_t i) {
    return -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(r - 1);
  };
  const std::size_t total = r * r * r;
  const std::size_t chunk = std::min<std::size_t>(total, 4096);
  std::vector<double> buf;
  buf.reserve(chunk * 3);
  std::size_t start = 0;
  for (std::size_t lin = 0; lin < total; ++lin) {
    const std::size_t ix = lin / (r * r), iy = (lin / r) % r, iz = lin % r;
    buf.push_back(coord(ix));
    buf.push_back(coord(iy));
    buf.push_back(coord(iz));
    if (buf.size() == chunk * 3 || lin + 1 == total) {
      const std::size_t count = buf.size() / 3;
      consume(tensor({count, 3}, std::move(buf)), start, count);
      buf = {};
      buf.reserve(chunk * 3);
      start = lin + 1;
    }
  }
}

}  // namespace detail

/// All grid points of the [-1,1]^3 cube whose features are elementwise <= u.
/// Exact comparison: boundary points count as inside, mirroring max semantics.
inline std::vector<std::array<double, 3>> upper_bound_shape(
    const PointFunction& pf, const std::vector<double>& u,
    std::size_t resolution = 32) {
  if (pf.input_dim != 3)
    throw UnsupportedError("upper-bound sampling needs 3-D input");
  if (u.size() != pf.K) throw DimensionError("u must have K entries");
  std::vector<std::array<double, 3>> inside;
  detail::walk_cube_grid(resolution, [&](const TensorPtr& pts, std::size_t, std::size_t count) {
    auto H = pf.h(pts);
    for (std::size_t i = 0; i < count; ++i) {
      bool ok = true;
      for (std::size_t j = 0; j < pf.K && ok; ++j)
        ok = H->at(i, j) <= u[j];
      if (ok)
        inside.push_back({pts->at(i, 0), pts->at(i, 1), pts->at(i, 2)});
    }
  });
  return inside;
}

inline std::vector<std::array<double, 3>> upper_bound_shape(
    const PointFunction& pf, const PointCloud& cloud, std::size_t resolution = 32) {
  return upper_bound_shape(pf, critical_set(pf, cloud).u, resolution);
}

template <class Model>
  requires requires(Model& mm, const PointCloud& cc) { point_function(mm, cc); }
std::vector<std::array<double, 3>> upper_bound_shape(Model& m, const PointCloud& cloud,
                                                     std::size_t resolution = 32) {
  auto pf = point_function(m, cloud);
  return upper_bound_shape(pf, critical_set(pf, cloud).u, resolution);
}

// ---------------------------------------------------------------------------
// Structure verification: u(T) == u(S) for every C_S <= T <= N_S
// ---------------------------------------------------------------------------

struct StructureCheck {
  std::string name;
  bool passed = false;
  std::string detail;  // names the first offending dimension on failure
};

struct StructureReport {
  CriticalSetReport critical;
  std::size_t upper_bound_sample = 0;
  std::vector<StructureCheck> checks;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }
};

/// Recomputes the global feature on sandwiched sets T: the critical points
/// alone, the critical points plus every sampled upper-bound point, and
/// `trials` random mixtures. Every u(T) must equal u(S) bit for bit.
inline StructureReport verify_structure(const PointFunction& pf, const PointCloud& cloud,
                                         std::size_t trials, Rng& rng,
                                         std::size_t resolution = 8) {
  StructureReport rep;
  rep.critical = critical_set(pf, cloud);
  std::vector<std::array<double, 3>> sample;
  if (pf.input_dim == 3)
    sample = upper_bound_shape(pf, rep.critical.u, resolution);
  rep.upper_bound_sample = sample.size();

  const std::size_t m = cloud.dim();
  auto build = [&](const std::vector<std::size_t>& cloud_rows,
                   const std::vector<std::size_t>& sample_rows) {
    std::vector<double> pts;
    pts.reserve((cloud_rows.size() + sample_rows.size()) * m);
    for (std::size_t i : cloud_rows)
      for (std::size_t j = 0; j < m; ++j) pts.push_back(cloud.points->at(i, j));
    for (std::size_t s : sample_rows)
      for (std::size_t j = 0; j < m; ++j) pts.push_back(sample[s][j]);
    const std::size_t rows = pts.size() / m;
    return tensor({rows, m}, std::move(pts));
  };
  auto check = [&](const std::string& name, const TensorPtr& T) {
    StructureCheck c;
    c.name = name;
    auto u = max_over_set(nullptr, pf.h(T)).values;
    c.passed = std::memcmp(u->data.data(), rep.critical.u.data(),
                           pf.K * sizeof(double)) == 0;
    if (!c.passed)
      for (std::size_t j = 0; j < pf.K; ++j)
        if (u->data[j] != rep.critical.u[j]) {
          c.detail = "dim " + std::to_string(j) + ": " + std::to_string(u->data[j]) +
                     " != " + std::to_string(rep.critical.u[j]);
          break;
        }
    rep.checks.push_back(std::move(c));
  };

  std::vector<std::size_t> all_cloud(cloud.size());
  std::iota(all_cloud.begin(), all_cloud.end(), 0);
  std::vector<std::size_t> all_sample(sample.size());
  std::iota(all_sample.begin(), all_sample.end(), 0);

  check("T=S", build(all_cloud, {}));
  check("T=critical", build(rep.critical.critical_indices, {}));
  check("T=critical+upper_bound", build(rep.critical.critical_indices, all_sample));
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<std::size_t> pick = all_sample;
    std::shuffle(pick.begin(), pick.end(), rng);
    if (!pick.empty())
      pick.resize(std::uniform_int_distribution<std::size_t>(0, pick.size())(rng));
    check("T=critical+random_sample_" + std::to_string(t),
          build(rep.critical.critical_indices, pick));
  }
  return rep;
}

template <class Model>
  requires requires(Model& mm, const PointCloud& cc) { point_function(mm, cc); }
StructureReport verify_structure(Model& m, const PointCloud& cloud, std::size_t trials,
                                 Rng& rng, std::size_t resolution = 8) {
  return verify_structure(point_function(m, cloud), cloud, trials, rng, resolution);
}

/// Direct corollary check: dropping any single non-critical point leaves the
/// global feature bitwise unchanged.
inline bool deletion_invariance(const PointFunction& pf, const PointCloud& cloud) {
  auto crit = critical_set(pf, cloud);
  const std::set<std::size_t> critical(crit.critical_indices.begin(),
                                       crit.critical_indices.end());
  const std::size_t n = cloud.size(), m = cloud.dim();
  for (std::size_t drop = 0; drop < n; ++drop) {
    if (critical.count(drop)) continue;
    std::vector<double> pts;
    pts.reserve((n - 1) * m);
    for (std::size_t i = 0; i < n; ++i) {
      if (i == drop) continue;
      for (std::size_t j = 0; j < m; ++j) pts.push_back(cloud.points->at(i, j));
    }
    auto u = max_over_set(nullptr, pf.h(tensor({n - 1, m}, std::move(pts)))).values;
    if (std::memcmp(u->data.data(), crit.u.data(), pf.K * sizeof(double)) != 0)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Activation grids
// ---------------------------------------------------------------------------

struct ActivationGrid {
  std::size_t dim = 0;         // feature index j
  std::size_t resolution = 0;  // r points per axis
  std::vector<double> values;  // r^3, linear index (ix*r + iy)*r + iz

  double coordinate(std::size_t i) const {
    return -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(resolution - 1);
  }
};

/// h_j sampled over the unit cube, for level-set plots.
inline ActivationGrid point_function_grid(const PointFunction& pf, std::size_t j,
                                          std::size_t resolution = 32) {
  if (pf.input_dim != 3)
    throw UnsupportedError("activation grids need 3-D input");
  if (j >= pf.K) throw IndexError("feature dim out of range");
  ActivationGrid grid;
  grid.dim = j;
  grid.resolution = resolution;
  grid.values.resize(resolution * resolution * resolution);
  detail::walk_cube_grid(resolution,
                         [&](const TensorPtr& pts, std::size_t start, std::size_t count) {
                           auto H = pf.h(pts);
                           for (std::size_t i = 0; i < count; ++i)
                             grid.values[start + i] = H->at(i, j);
                         });
  return grid;
}

/// Fraction of grid points activated above the threshold.
inline double mask_fraction(const ActivationGrid& grid, double threshold = 0.5) {
  std::size_t hit = 0;
  for (double v : grid.values)
    if (v > threshold) ++hit;
  return static_cast<double>(hit) / static_cast<double>(grid.values.size());
}

// ---------------------------------------------------------------------------
// Retrieval and correspondence
// ---------------------------------------------------------------------------

struct RetrievalResult {
  std::vector<std::size_t> indices;  // into the gallery, best first
  std::vector<std::string> ids;
  std::vector<double> distances;
};

/// The 256-dim activations feeding the score layer, used as the shape
/// descriptor for retrieval.
inline TensorPtr penultimate_features(Classifier& m, const PointCloud& cloud) {
  check_cloud(cloud);
  return m.forward(nullptr, make_batch({cloud.points}), {}).penultimate;
}

/// Nearest neighbors in penultimate-feature space; distance ties break by id.
inline RetrievalResult retrieve(Classifier& m, const PointCloud& query,
                                const std::vector<PointCloud>& gallery,
                                std::size_t k) {
  if (gallery.empty()) throw EmptySetError("retrieval gallery is empty");
  if (k < 1 || k > gallery.size())
    throw ConfigError("k must be between 1 and the gallery size");
  auto q = penultimate_features(m, query);
  struct Entry {
    double dist;
    std::string id;
    std::size_t index;
  };
  std::vector<Entry> entries;
  entries.reserve(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    auto f = penultimate_features(m, gallery[i]);
    double s = 0.0;
    for (std::size_t j = 0; j < f->size(); ++j) {
      const double d = f->data[j] - q->data[j];
      s += d * d;
    }
    entries.push_back({std::sqrt(s), gallery[i].id, i});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return std::tie(a.dist, a.id, a.index) < std::tie(b.dist, b.id, b.index);
  });
  RetrievalResult r;
  for (std::size_t i = 0; i < k; ++i) {
    r.indices.push_back(entries[i].index);
    r.ids.push_back(entries[i].id);
    r.distances.push_back(entries[i].dist);
  }
  return r;
}

/// Pairs the points of two clouds that win the same feature dimensions, one
/// candidate pair per dimension, duplicates collapsed, ordered by dimension.
inline std::vector<std::pair<std::size_t, std::size_t>> correspondence(
    Classifier& m, const PointCloud& a, const PointCloud& b) {
  if (m.spec.aggregator != AggKind::max)
    throw UnsupportedError("correspondence is defined for max aggregation only");
  check_cloud(a);
  check_cloud(b);
  auto ra = m.forward(nullptr, make_batch({a.points}), {});
  auto rb = m.forward(nullptr, make_batch({b.points}), {});
  const auto& am = ra.argmax[0];
  const auto& bm = rb.argmax[0];
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (std::size_t j = 0; j < am.size(); ++j) {
    const std::pair<std::size_t, std::size_t> p{am[j], bm[j]};
    if (seen.insert(p).second) pairs.push_back(p);
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Segmentation consistency
// ---------------------------------------------------------------------------

/// Eval-mode part predictions on the points shared by S and a sandwiched set
/// T (critical points plus optional upper-bound sample) are identical bitwise:
/// per-point features are row-independent and the global feature is preserved.
/// Needs a transform-free backbone, since alignment matrices are recomputed
/// per set.
inline bool segmentation_consistency(Segmenter& m, const PointCloud& cloud,
                                     std::size_t resolution = 0,
                                     const std::vector<int>* categories = nullptr) {
  const auto& bb = m.spec.backbone;
  if (bb.use_input_transform || bb.use_feature_transform)
    throw UnsupportedError(
        "consistency check needs a transform-free backbone: alignment depends on "
        "the whole set");
  auto pf = point_function(m, cloud);
  auto crit = critical_set(pf, cloud);
  std::vector<std::array<double, 3>> extra;
  if (resolution >= 2 && pf.input_dim == 3)
    extra = upper_bound_shape(pf, crit.u, resolution);

  const std::size_t m_dim = cloud.dim();
  std::vector<double> pts;
  for (std::size_t i : crit.critical_indices)
    for (std::size_t j = 0; j < m_dim; ++j) pts.push_back(cloud.points->at(i, j));
  for (const auto& p : extra)
    for (std::size_t j = 0; j < m_dim; ++j) pts.push_back(p[j]);
  const std::size_t t_rows = pts.size() / m_dim;
  auto T = tensor({t_rows, m_dim}, std::move(pts));

  ForwardOptions opts;  // eval
  auto outS = m.forward(nullptr, make_batch({cloud.points}), opts, categories);
  auto outT = m.forward(nullptr, make_batch({T}), opts, categories);
  const std::size_t parts = m.spec.num_parts;
  for (std::size_t t = 0; t < crit.critical_indices.size(); ++t) {
    const std::size_t s = crit.critical_indices[t];
    for (std::size_t j = 0; j < parts; ++j)
      if (outS.logits->at(s, j) != outT.logits->at(t, j)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Text serialization
// ---------------------------------------------------------------------------
// # setnet-critical v1: keyword-led records (cloud, bottleneck, check, u,
// critical, upperbound).
// # setnet-grid v1: dim and resolution records, then r^3 rows of
// x y z value mask, mask being the 0.5 level set.

inline void write_critical_file(const CriticalSetReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open for writing: " + path);
  os << "# setnet-critical v1\n";
  os << "cloud " << (r.cloud_id.empty() ? "?" : r.cloud_id) << "\n";
  os << "bottleneck " << r.bottleneck << "\n";
  for (const auto& [name, ok] : r.checks)
    os << "check " << name << " " << (ok ? 1 : 0) << "\n";
  char buf[32];
  os << "u";
  for (double v : r.u) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << " " << buf;
  }
  os << "\ncritical";
  for (std::size_t i : r.critical_indices) os << " " << i;
  os << "\n";
  for (const auto& p : r.upper_bound_points) {
    os << "upperbound";
    for (double v : p) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << " " << buf;
    }
    os << "\n";
  }
  if (!os) throw ParseError("write failed: " + path);
}

inline CriticalSetReport read_critical_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open: " + path);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw ParseError(path + ":" + std::to_string(line_no) + ": " + what);
  };
  if (!std::getline(is, line)) throw ParseError(path + ": empty file");
  ++line_no;
  if (line != "# setnet-critical v1") fail("bad header: " + line);
  CriticalSetReport r;
  bool saw_u = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "cloud") {
      ls >> r.cloud_id;
    } else if (key == "bottleneck") {
      if (!(ls >> r.bottleneck)) fail("bad bottleneck value");
    } else if (key == "check") {
      std::string name;
      int v = 0;
      if (!(ls >> name >> v)) fail("bad check record");
      r.checks[name] = v != 0;
    } else if (key == "u") {
      double v;
      while (ls >> v) r.u.push_back(v);
      saw_u = true;
    } else if (key == "critical") {
      std::size_t i;
      while (ls >> i) r.critical_indices.push_back(i);
    } else if (key == "upperbound") {
      std::array<double, 3> p{};
      if (!(ls >> p[0] >> p[1] >> p[2])) fail("bad upperbound record");
      r.upper_bound_points.push_back(p);
    } else {
      fail("unknown record: " + key);
    }
  }
  if (!saw_u) throw ParseError(path + ": missing u record");
  if (r.bottleneck == 0) throw ParseError(path + ": missing bottleneck record");
  if (r.u.size() != r.bottleneck)
    throw ParseError(path + ": u has " + std::to_string(r.u.size()) +
                     " values, bottleneck is " + std::to_string(r.bottleneck));
  return r;
}

inline void write_grid_file(const ActivationGrid& grid, const std::string& path,
                            double mask_threshold = 0.5) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open for writing: " + path);
  os << "# setnet-grid v1\n";
  os << "dim " << grid.dim << "\n";
  os << "resolution " << grid.resolution << "\n";
  char buf[32];
  const std::size_t r = grid.resolution;
  for (std::size_t lin = 0; lin < grid.values.size(); ++lin) {
    const std::size_t ix = lin / (r * r), iy = (lin / r) % r, iz = lin % r;
    for (std::size_t axis : {ix, iy, iz}) {
      std::snprintf(buf, sizeof buf, "%.17g", grid.coordinate(axis));
      os << buf << " ";
    }
    std::snprintf(buf, sizeof buf, "%.17g", grid.values[lin]);
    os << buf << " " << (grid.values[lin] > mask_threshold ? 1 : 0) << "\n";
  }
  if (!os) throw ParseError("write failed: " + path);
}

inline ActivationGrid read_grid_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open: " + path);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw ParseError(path + ":" + std::to_string(line_no) + ": " + what);
  };
  if (!std::getline(is, line)) throw ParseError(path + ": empty file");
  ++line_no;
  if (line != "# setnet-grid v1") fail("bad header: " + line);
  ActivationGrid grid;
  bool saw_dim = false, saw_res = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    if (!saw_dim || !saw_res) {
      std::string key;
      ls >> key;
      if (key == "dim") {
        if (!(ls >> grid.dim)) fail("bad dim record");
        saw_dim = true;
      } else if (key == "resolution") {
        if (!(ls >> grid.resolution)) fail("bad resolution record");
        if (grid.resolution < 2) fail("resolution must be at least 2");
        saw_res = true;
      } else {
        fail("expected dim/resolution, found: " + key);
      }
      continue;
    }
    double x, y, z, v;
    int mask;
    if (!(ls >> x >> y >> z >> v >> mask)) fail("expected 'x y z value mask'");
    grid.values.push_back(v);
  }
  const std::size_t want = grid.resolution * grid.resolution * grid.resolution;
  if (!saw_dim || !saw_res || grid.values.size() != want)
    throw ParseError(path + ": expected " + std::to_string(want) +
                     " grid rows, found " + std::to_string(grid.values.size()));
  return grid;
}

}  // namespace setnet
