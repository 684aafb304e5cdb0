#pragma once

// Desk-scale data: labeled synthetic primitives, IDX image ingestion (the
// MNIST container format) plus a procedural digit-glyph generator for offline
// use, point-set conversion, normalization, augmentation, furthest-point
// sampling, corruption protocols, and a text format for single clouds.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "setnet/tensor.hpp"

namespace setnet {

struct PointCloud {
  TensorPtr points;             // n x m
  TensorPtr normals;            // null or n x m, unit surface normals
  std::vector<int> part_labels; // empty = unlabeled, else one per point
  std::optional<int> class_label;
  std::string id;

  std::size_t size() const { return points ? points->rows() : 0; }
  std::size_t dim() const { return points ? points->cols() : 0; }
};

inline void check_cloud(const PointCloud& c) {
  if (!c.points || c.points->rank() != 2)
    throw DimensionError("point cloud needs an n x m matrix");
  if (c.normals && !same_shape(*c.normals, *c.points))
    throw DimensionError("normals must match the point matrix shape");
  if (!c.part_labels.empty() && c.part_labels.size() != c.size())
    throw LabelError("per-point label count does not match point count");
}

// ---------------------------------------------------------------------------
// Normalization and augmentation
// ---------------------------------------------------------------------------

/// Centroid to the origin, then scale so the farthest point sits on the unit
/// sphere. A degenerate cloud (all points identical) maps to all zeros.
inline PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  check_cloud(cloud);
  const std::size_t n = cloud.size(), m = cloud.dim();
  PointCloud out = cloud;
  out.points = tensor(cloud.points->shape, cloud.points->data);
  auto& d = out.points->data;
  for (std::size_t j = 0; j < m; ++j) {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) c += d[i * m + j];
    c /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) d[i * m + j] -= c;
  }
  auto max_norm = [&] {
    double best = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += d[i * m + j] * d[i * m + j];
      best = std::max(best, std::sqrt(s));
    }
    return best;
  };
  double r = max_norm();
  if (r == 0.0) return out;  // degenerate cloud stays at the origin
  for (double& v : d) v /= r;
  // a couple of ulps can survive the division; renormalize until the radius
  // is exactly <= 1
  for (int guard = 0; guard < 3 && (r = max_norm()) > 1.0; ++guard)
    for (double& v : d) v /= r;
  return out;
}

/// Rotation about the z (up) axis by `angle`, row-vector convention, counter-
/// clockwise when seen from +z. Requires 3-D points.
inline PointCloud rotate_z(const PointCloud& cloud, double angle) {
  check_cloud(cloud);
  if (cloud.dim() != 3) throw DimensionError("z-rotation needs 3-D points");
  PointCloud out = cloud;
  const double c = std::cos(angle), s = std::sin(angle);
  auto spin = [&](const TensorPtr& src) {
    auto t = tensor(src->shape, src->data);
    auto& d = t->data;
    for (std::size_t i = 0; i < src->rows(); ++i) {
      const double x = d[i * 3], y = d[i * 3 + 1];
      d[i * 3] = x * c - y * s;
      d[i * 3 + 1] = x * s + y * c;
    }
    return t;
  };
  out.points = spin(cloud.points);
  if (cloud.normals) out.normals = spin(cloud.normals);
  return out;
}

/// I.i.d. Gaussian jitter, sigma per coordinate.
inline PointCloud jitter(const PointCloud& cloud, Rng& rng, double sigma) {
  check_cloud(cloud);
  PointCloud out = cloud;
  out.points = tensor(cloud.points->shape, cloud.points->data);
  if (sigma == 0.0) return out;
  std::normal_distribution<double> g(0.0, sigma);
  for (double& v : out.points->data) v += g(rng);
  return out;
}

/// Training augmentation: uniform random rotation about the up axis, then
/// jitter with sigma 0.02. Non-3-D clouds skip the rotation.
inline PointCloud augment(const PointCloud& cloud, Rng& rng, double sigma = 0.02) {
  check_cloud(cloud);
  PointCloud out = cloud;
  if (cloud.dim() == 3) {
    std::uniform_real_distribution<double> uni(0.0, 2.0 * std::acos(-1.0));
    out = rotate_z(cloud, uni(rng));
  }
  return jitter(out, rng, sigma);
}

// ---------------------------------------------------------------------------
// Furthest-point sampling
// ---------------------------------------------------------------------------

/// Greedy max-min selection: start from start_index, repeatedly add the point
/// farthest from the selected set. Ties resolve to the lowest index.
inline std::vector<std::size_t> furthest_point_sample(const PointCloud& cloud,
                                                      std::size_t k,
                                                      std::size_t start_index = 0) {
  check_cloud(cloud);
  const std::size_t n = cloud.size(), m = cloud.dim();
  if (k < 1 || k > n) throw DimensionError("sample size must be in [1, n]");
  if (start_index >= n) throw IndexError("start index out of range");
  const auto& d = cloud.points->data;
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> picked{start_index};
  picked.reserve(k);
  std::size_t last = start_index;
  while (picked.size() < k) {
    std::size_t best = 0;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double diff = d[i * m + j] - d[last * m + j];
        s += diff * diff;
      }
      if (s < dist[i]) dist[i] = s;
      if (dist[i] > best_dist) {  // strict: ties keep the lowest index
        best_dist = dist[i];
        best = i;
      }
    }
    picked.push_back(best);
    last = best;
  }
  return picked;
}

inline PointCloud select_points(const PointCloud& cloud,
                                const std::vector<std::size_t>& indices) {
  check_cloud(cloud);
  if (indices.empty()) throw EmptySetError("selecting zero points");
  const std::size_t m = cloud.dim();
  PointCloud out;
  out.class_label = cloud.class_label;
  out.id = cloud.id;
  std::vector<double> pts, nrm;
  pts.reserve(indices.size() * m);
  for (std::size_t idx : indices) {
    if (idx >= cloud.size()) throw IndexError("point index out of range");
    for (std::size_t j = 0; j < m; ++j) {
      pts.push_back(cloud.points->data[idx * m + j]);
      if (cloud.normals) nrm.push_back(cloud.normals->data[idx * m + j]);
    }
    if (!cloud.part_labels.empty()) out.part_labels.push_back(cloud.part_labels[idx]);
  }
  out.points = tensor({indices.size(), m}, std::move(pts));
  if (cloud.normals) out.normals = tensor({indices.size(), m}, std::move(nrm));
  return out;
}

// ---------------------------------------------------------------------------
// Corruption protocols
// ---------------------------------------------------------------------------

enum class CorruptionKind { none, delete_random, delete_furthest, outliers, perturb };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::none;
  double amount = 0.0;  // deletion/outlier ratio in [0,1), or perturb sigma
};

inline PointCloud corrupt(const PointCloud& cloud, const CorruptionSpec& spec,
                          Rng& rng) {
  check_cloud(cloud);
  const std::size_t n = cloud.size(), m = cloud.dim();
  switch (spec.kind) {
    case CorruptionKind::none:
      return cloud;
    case CorruptionKind::delete_random: {
      if (spec.amount < 0.0 || spec.amount >= 1.0)
        throw ConfigError("deletion ratio must be in [0, 1)");
      const std::size_t drop = static_cast<std::size_t>(spec.amount * n);
      if (drop == 0) return cloud;
      if (drop >= n) throw EmptySetError("deletion would empty the cloud");
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(n - drop);
      std::sort(idx.begin(), idx.end());
      return select_points(cloud, idx);
    }
    case CorruptionKind::delete_furthest: {
      if (spec.amount < 0.0 || spec.amount >= 1.0)
        throw ConfigError("deletion ratio must be in [0, 1)");
      const std::size_t keep = n - static_cast<std::size_t>(spec.amount * n);
      if (keep == 0) throw EmptySetError("deletion would empty the cloud");
      if (keep == n) return cloud;
      auto idx = furthest_point_sample(cloud, keep);
      std::sort(idx.begin(), idx.end());
      return select_points(cloud, idx);
    }
    case CorruptionKind::outliers: {
      if (spec.amount < 0.0 || spec.amount >= 1.0)
        throw ConfigError("outlier ratio must be in [0, 1)");
      const std::size_t extra = static_cast<std::size_t>(spec.amount * n);
      if (extra == 0) return cloud;
      PointCloud out = cloud;
      std::vector<double> pts = cloud.points->data;
      std::vector<double> nrm = cloud.normals ? cloud.normals->data : std::vector<double>{};
      std::uniform_real_distribution<double> uni(-1.0, 1.0);
      std::vector<double> probe(m);
      for (std::size_t e = 0; e < extra; ++e) {
        // rejection-sample the unit ball
        double s;
        do {
          s = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            probe[j] = uni(rng);
            s += probe[j] * probe[j];
          }
        } while (s > 1.0);
        // labels and normals for an outlier come from its nearest point
        if (!cloud.part_labels.empty() || cloud.normals) {
          std::size_t nearest = 0;
          double best = std::numeric_limits<double>::infinity();
          for (std::size_t i = 0; i < n; ++i) {
            double dd = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double diff = cloud.points->data[i * m + j] - probe[j];
              dd += diff * diff;
            }
            if (dd < best) {
              best = dd;
              nearest = i;
            }
          }
          if (!cloud.part_labels.empty())
            out.part_labels.push_back(cloud.part_labels[nearest]);
          if (cloud.normals)
            for (std::size_t j = 0; j < m; ++j)
              nrm.push_back(cloud.normals->data[nearest * m + j]);
        }
        pts.insert(pts.end(), probe.begin(), probe.end());
      }
      out.points = tensor({n + extra, m}, std::move(pts));
      if (cloud.normals) out.normals = tensor({n + extra, m}, std::move(nrm));
      return out;
    }
    case CorruptionKind::perturb: {
      if (spec.amount < 0.0) throw ConfigError("perturbation sigma must be >= 0");
      return jitter(cloud, rng, spec.amount);
    }
  }
  throw ConfigError("unknown corruption kind");
}

// ---------------------------------------------------------------------------
// Cloud text format
// ---------------------------------------------------------------------------
// # setnet-cloud v1 dims=<m> labels=<0|1>
// one point per line: m floats, then one integer part label when labels=1

inline void write_cloud_file(const PointCloud& cloud, const std::string& path) {
  check_cloud(cloud);
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open for writing: " + path);
  const bool labels = !cloud.part_labels.empty();
  os << "# setnet-cloud v1 dims=" << cloud.dim() << " labels=" << (labels ? 1 : 0)
     << "\n";
  char buf[32];
  const std::size_t m = cloud.dim();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", cloud.points->data[i * m + j]);
      os << (j ? " " : "") << buf;
    }
    if (labels) os << " " << cloud.part_labels[i];
    os << "\n";
  }
  if (!os) throw ParseError("write failed: " + path);
}

inline PointCloud read_cloud_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open: " + path);
  std::string line;
  std::size_t line_no = 0;
  std::size_t dims = 0;
  int labels = -1;  // -1: unknown (headerless), else 0/1
  std::vector<double> pts;
  std::vector<int> labs;

  auto fail = [&](const std::string& what) {
    throw ParseError(path + ":" + std::to_string(line_no) + ": " + what);
  };

  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string tag, ver, kv;
      hs >> tag >> ver;
      if (tag != "setnet-cloud") continue;  // plain comment
      if (ver != "v1") fail("unsupported cloud format version: " + ver);
      while (hs >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) fail("malformed header field: " + kv);
        const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        try {
          if (key == "dims")
            dims = static_cast<std::size_t>(std::stoul(val));
          else if (key == "labels")
            labels = std::stoi(val);
          else
            fail("unknown header field: " + key);
        } catch (const ParseError&) {
          throw;
        } catch (const std::exception&) {
          fail("malformed header value: " + kv);
        }
      }
      continue;
    }
    std::istringstream ls(line);
    std::vector<std::string> cols;
    std::string c;
    while (ls >> c) cols.push_back(c);
    if (dims == 0) {
      // headerless: first data line fixes the column count, no labels
      dims = cols.size();
      if (labels < 0) labels = 0;
    }
    const std::size_t want = dims + (labels == 1 ? 1 : 0);
    if (cols.size() != want)
      fail("expected " + std::to_string(want) + " columns, found " +
           std::to_string(cols.size()));
    for (std::size_t j = 0; j < dims; ++j) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cols[j], &used);
      } catch (const std::exception&) {
        fail("not a number: " + cols[j]);
      }
      if (used != cols[j].size()) fail("not a number: " + cols[j]);
      pts.push_back(v);
    }
    if (labels == 1) {
      try {
        labs.push_back(std::stoi(cols[dims]));
      } catch (const std::exception&) {
        fail("not an integer label: " + cols[dims]);
      }
    }
  }
  if (pts.empty()) throw ParseError(path + ": no points");
  const std::size_t n = pts.size() / dims;
  PointCloud cloud;
  cloud.points = tensor({n, dims}, std::move(pts));
  cloud.part_labels = std::move(labs);
  cloud.id = std::filesystem::path(path).stem().string();
  return cloud;
}

// ---------------------------------------------------------------------------
// IDX container (the MNIST format)
// ---------------------------------------------------------------------------

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols
};

namespace detail {

inline std::uint32_t read_u32_be(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw ParseError("IDX file truncated");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_u32_be(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

inline IdxImages read_idx_images(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open: " + path);
  if (detail::read_u32_be(is) != 2051)
    throw ParseError("not an IDX image file (magic != 2051): " + path);
  IdxImages img;
  img.count = detail::read_u32_be(is);
  img.rows = detail::read_u32_be(is);
  img.cols = detail::read_u32_be(is);
  img.pixels.resize(img.count * img.rows * img.cols);
  is.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw ParseError("IDX pixel data truncated: " + path);
  return img;
}

inline std::vector<std::uint8_t> read_idx_labels(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open: " + path);
  if (detail::read_u32_be(is) != 2049)
    throw ParseError("not an IDX label file (magic != 2049): " + path);
  std::vector<std::uint8_t> labels(detail::read_u32_be(is));
  is.read(reinterpret_cast<char*>(labels.data()),
          static_cast<std::streamsize>(labels.size()));
  if (!is) throw ParseError("IDX label data truncated: " + path);
  return labels;
}

inline void write_idx_images(const IdxImages& img, const std::string& path) {
  if (img.pixels.size() != img.count * img.rows * img.cols)
    throw DimensionError("IDX pixel buffer does not match header");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open for writing: " + path);
  detail::write_u32_be(os, 2051);
  detail::write_u32_be(os, static_cast<std::uint32_t>(img.count));
  detail::write_u32_be(os, static_cast<std::uint32_t>(img.rows));
  detail::write_u32_be(os, static_cast<std::uint32_t>(img.cols));
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw ParseError("write failed: " + path);
}

inline void write_idx_labels(const std::vector<std::uint8_t>& labels,
                             const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open for writing: " + path);
  detail::write_u32_be(os, 2049);
  detail::write_u32_be(os, static_cast<std::uint32_t>(labels.size()));
  os.write(reinterpret_cast<const char*>(labels.data()),
           static_cast<std::streamsize>(labels.size()));
  if (!os) throw ParseError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Image -> point set
// ---------------------------------------------------------------------------

/// Thresholds pixels above 128 into 2-D points in [-1,1]^2 (y up), then
/// resizes the set to set_size: larger sets are randomly subsampled, smaller
/// ones padded by cycling through the points in index order. Padding only
/// duplicates points, so max-aggregated features never change.
inline PointCloud image_to_pointset(const std::uint8_t* image, std::size_t rows,
                                    std::size_t cols, Rng& rng,
                                    std::size_t set_size = 256) {
  std::vector<double> pts;
  const double half_r = rows > 1 ? (static_cast<double>(rows) - 1.0) / 2.0 : 1.0;
  const double half_c = cols > 1 ? (static_cast<double>(cols) - 1.0) / 2.0 : 1.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      if (image[r * cols + c] > 128) {
        pts.push_back((static_cast<double>(c) - half_c) / half_c);
        pts.push_back((half_r - static_cast<double>(r)) / half_r);
      }
  std::size_t n = pts.size() / 2;
  if (n == 0) throw EmptySetError("image has no pixels above the threshold");
  if (n > set_size) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(set_size);
    std::sort(idx.begin(), idx.end());
    std::vector<double> keep;
    keep.reserve(set_size * 2);
    for (std::size_t i : idx) {
      keep.push_back(pts[i * 2]);
      keep.push_back(pts[i * 2 + 1]);
    }
    pts = std::move(keep);
    n = set_size;
  } else if (n < set_size) {
    pts.reserve(set_size * 2);
    for (std::size_t i = n; i < set_size; ++i) {
      pts.push_back(pts[(i % n) * 2]);
      pts.push_back(pts[(i % n) * 2 + 1]);
    }
    n = set_size;
  }
  PointCloud cloud;
  cloud.points = tensor({n, 2}, std::move(pts));
  return cloud;
}

// ---------------------------------------------------------------------------
// Procedural digit glyphs
// ---------------------------------------------------------------------------
// Seven-segment digit skeletons rendered with a soft stroke and a random
// affine warp. The output is a genuine IDX pair, so the ingestion path above
// is exercised unchanged; real MNIST files drop in the same way.

namespace detail {

struct Seg {
  double x0, y0, x1, y1;
};

inline const std::vector<Seg>& digit_segments(int digit) {
  // canvas space [0,1]^2, y down
  static const Seg A{0.30, 0.16, 0.70, 0.16};
  static const Seg B{0.70, 0.16, 0.70, 0.50};
  static const Seg C{0.70, 0.50, 0.70, 0.84};
  static const Seg D{0.30, 0.84, 0.70, 0.84};
  static const Seg E{0.30, 0.50, 0.30, 0.84};
  static const Seg F{0.30, 0.16, 0.30, 0.50};
  static const Seg G{0.30, 0.50, 0.70, 0.50};
  static const std::array<std::vector<Seg>, 10> table{{
      {A, B, C, D, E, F},     // 0
      {B, C},                 // 1
      {A, B, G, E, D},        // 2
      {A, B, G, C, D},        // 3
      {F, G, B, C},           // 4
      {A, F, G, C, D},        // 5
      {A, F, G, E, C, D},     // 6
      {A, B, C},              // 7
      {A, B, C, D, E, F, G},  // 8
      {A, B, C, D, F, G},     // 9
  }};
  return table.at(static_cast<std::size_t>(digit));
}

inline double point_segment_dist(double px, double py, const Seg& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = s.x0 + t * dx, cy = s.y0 + t * dy;
  return std::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy));
}

}  // namespace detail

/// Renders `count` digit images (28x28, labels cycling 0..9) with per-image
/// random warps. Deterministic in the seed.
inline IdxImages generate_digit_images(std::size_t count, std::uint64_t seed,
                                       std::vector<std::uint8_t>* labels_out) {
  IdxImages img;
  img.count = count;
  img.rows = 28;
  img.cols = 28;
  img.pixels.assign(count * 28 * 28, 0);
  if (labels_out) labels_out->clear();
  for (std::size_t i = 0; i < count; ++i) {
    const int digit = static_cast<int>(i % 10);
    if (labels_out) labels_out->push_back(static_cast<std::uint8_t>(digit));
    Rng rng(seed * 0x9E3779B97F4A7C15ull + i);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    const double rot = 0.12 * uni(rng);
    const double sx = 1.0 + 0.10 * uni(rng);
    const double sy = 1.0 + 0.10 * uni(rng);
    const double tx = 0.05 * uni(rng);
    const double ty = 0.05 * uni(rng);
    const double shear = 0.08 * uni(rng);
    const double thick = 0.055 + 0.012 * uni(rng);
    const double cr = std::cos(rot), sr = std::sin(rot);
    const auto& segs = detail::digit_segments(digit);
    std::uint8_t* out = img.pixels.data() + i * 28 * 28;
    for (std::size_t r = 0; r < 28; ++r)
      for (std::size_t c = 0; c < 28; ++c) {
        // map the pixel back into glyph space
        double x = (static_cast<double>(c) + 0.5) / 28.0 - 0.5 - tx;
        double y = (static_cast<double>(r) + 0.5) / 28.0 - 0.5 - ty;
        const double rx = (cr * x + sr * y) / sx;
        const double ry = (-sr * x + cr * y) / sy;
        x = rx - shear * ry + 0.5;
        y = ry + 0.5;
        double dist = std::numeric_limits<double>::infinity();
        for (const auto& s : segs)
          dist = std::min(dist, detail::point_segment_dist(x, y, s));
        double v = 0.0;
        if (dist <= thick)
          v = 255.0;
        else if (dist < 1.7 * thick)
          v = 255.0 * (1.7 * thick - dist) / (0.7 * thick);
        out[r * 28 + c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Synthetic primitives
// ---------------------------------------------------------------------------

enum class PrimitiveClass { sphere = 0, cube = 1, cylinder = 2, cone = 3 };

inline const char* primitive_name(PrimitiveClass c) {
  switch (c) {
    case PrimitiveClass::sphere: return "sphere";
    case PrimitiveClass::cube: return "cube";
    case PrimitiveClass::cylinder: return "cylinder";
    case PrimitiveClass::cone: return "cone";
  }
  return "?";
}

/// Global part-label ids per category. Sphere is single-part; the others
/// split into two geometric parts each, so ids 0..6 cover the whole taxonomy.
inline std::vector<int> parts_of_class(PrimitiveClass c) {
  switch (c) {
    case PrimitiveClass::sphere: return {0};
    case PrimitiveClass::cube: return {1, 2};      // z-faces, side faces
    case PrimitiveClass::cylinder: return {3, 4};  // side, caps
    case PrimitiveClass::cone: return {5, 6};      // lateral, base
  }
  return {};
}

inline constexpr std::size_t kSynthNumParts = 7;

struct SynthSpec {
  std::vector<PrimitiveClass> classes{PrimitiveClass::sphere, PrimitiveClass::cube,
                                      PrimitiveClass::cylinder, PrimitiveClass::cone};
  std::size_t points_per_cloud = 256;
  std::size_t clouds_per_class = 50;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<PointCloud> clouds;
  std::size_t num_classes = 0;
  std::size_t num_parts = 0;
};

namespace detail {

inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a_str(const std::string& s) {
  return fnv1a(s.data(), s.size());
}

// surface samplers; all emit a point, a global part id, and the unit normal
inline void sample_primitive(PrimitiveClass cls, Rng& rng, double* xyz, int* part,
                             double* nrm) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double pi = std::acos(-1.0);
  switch (cls) {
    case PrimitiveClass::sphere: {
      double x, y, z, r;
      do {
        x = gauss(rng);
        y = gauss(rng);
        z = gauss(rng);
        r = std::sqrt(x * x + y * y + z * z);
      } while (r < 1e-9);
      xyz[0] = nrm[0] = x / r;
      xyz[1] = nrm[1] = y / r;
      xyz[2] = nrm[2] = z / r;
      *part = 0;
      return;
    }
    case PrimitiveClass::cube: {
      // unit cube [-0.5, 0.5]^3, faces sampled uniformly (equal areas)
      const int face = static_cast<int>(uni(rng) * 6.0) % 6;
      const double a = uni(rng) - 0.5, b = uni(rng) - 0.5;
      nrm[0] = nrm[1] = nrm[2] = 0.0;
      switch (face) {
        case 0: xyz[0] = a; xyz[1] = b; xyz[2] = 0.5; nrm[2] = 1.0; break;
        case 1: xyz[0] = a; xyz[1] = b; xyz[2] = -0.5; nrm[2] = -1.0; break;
        case 2: xyz[0] = a; xyz[1] = 0.5; xyz[2] = b; nrm[1] = 1.0; break;
        case 3: xyz[0] = a; xyz[1] = -0.5; xyz[2] = b; nrm[1] = -1.0; break;
        case 4: xyz[0] = 0.5; xyz[1] = a; xyz[2] = b; nrm[0] = 1.0; break;
        default: xyz[0] = -0.5; xyz[1] = a; xyz[2] = b; nrm[0] = -1.0; break;
      }
      *part = face < 2 ? 1 : 2;
      return;
    }
    case PrimitiveClass::cylinder: {
      // radius 0.5, height 1; side area pi, cap area pi/4 each
      const double side_area = pi, cap_area = pi / 4.0;
      const double u = uni(rng) * (side_area + 2.0 * cap_area);
      const double ang = uni(rng) * 2.0 * pi;
      if (u < side_area) {
        xyz[0] = 0.5 * std::cos(ang);
        xyz[1] = 0.5 * std::sin(ang);
        xyz[2] = uni(rng) - 0.5;
        nrm[0] = std::cos(ang);
        nrm[1] = std::sin(ang);
        nrm[2] = 0.0;
        *part = 3;
      } else {
        const double rho = 0.5 * std::sqrt(uni(rng));
        const bool top = u < side_area + cap_area;
        xyz[0] = rho * std::cos(ang);
        xyz[1] = rho * std::sin(ang);
        xyz[2] = top ? 0.5 : -0.5;
        nrm[0] = nrm[1] = 0.0;
        nrm[2] = top ? 1.0 : -1.0;
        *part = 4;
      }
      return;
    }
    case PrimitiveClass::cone: {
      // base radius 0.5 at z = -0.5, apex at z = +0.5
      const double r = 0.5, h = 1.0;
      const double slant = std::sqrt(r * r + h * h);
      const double lateral_area = pi * r * slant, base_area = pi * r * r;
      const double u = uni(rng) * (lateral_area + base_area);
      const double ang = uni(rng) * 2.0 * pi;
      if (u < lateral_area) {
        const double t = std::sqrt(uni(rng));  // area density grows with t
        const double rho = r * t;
        xyz[0] = rho * std::cos(ang);
        xyz[1] = rho * std::sin(ang);
        xyz[2] = 0.5 - t * h;
        // gradient of sqrt(x^2 + y^2) - r(0.5 - z)/h, normalized
        nrm[0] = std::cos(ang) * h / slant;
        nrm[1] = std::sin(ang) * h / slant;
        nrm[2] = r / slant;
        *part = 5;
      } else {
        const double rho = r * std::sqrt(uni(rng));
        xyz[0] = rho * std::cos(ang);
        xyz[1] = rho * std::sin(ang);
        xyz[2] = -0.5;
        nrm[0] = nrm[1] = 0.0;
        nrm[2] = -1.0;
        *part = 6;
      }
      return;
    }
  }
  throw ConfigError("unknown primitive class");
}

}  // namespace detail

inline Dataset synth_generate(const SynthSpec& spec) {
  Dataset ds;
  ds.num_classes = spec.classes.size();
  ds.num_parts = kSynthNumParts;
  for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
    const PrimitiveClass cls = spec.classes[ci];
    for (std::size_t k = 0; k < spec.clouds_per_class; ++k) {
      PointCloud cloud;
      cloud.id = std::string(primitive_name(cls)) + "_" + std::to_string(k);
      cloud.class_label = static_cast<int>(ci);
      const std::uint64_t cloud_seed =
          detail::fnv1a_str(cloud.id) ^ (spec.seed * 0x9E3779B97F4A7C15ull);
      Rng rng(cloud_seed);
      std::vector<double> pts(spec.points_per_cloud * 3);
      std::vector<double> nrm(spec.points_per_cloud * 3);
      cloud.part_labels.resize(spec.points_per_cloud);
      for (std::size_t i = 0; i < spec.points_per_cloud; ++i)
        detail::sample_primitive(cls, rng, &pts[i * 3], &cloud.part_labels[i],
                                 &nrm[i * 3]);
      cloud.points = tensor({spec.points_per_cloud, 3}, std::move(pts));
      cloud.normals = tensor({spec.points_per_cloud, 3}, std::move(nrm));
      if (spec.noise_sigma > 0.0) cloud = jitter(cloud, rng, spec.noise_sigma);
      cloud = normalize_unit_sphere(cloud);
      ds.clouds.push_back(std::move(cloud));
    }
  }
  return ds;
}

/// Deterministic 80/20 split by id hash.
inline bool is_test_cloud(const std::string& id) {
  return detail::fnv1a_str(id) % 5 == 4;
}

inline void split_dataset(const Dataset& ds, Dataset& train, Dataset& test) {
  train.clouds.clear();
  test.clouds.clear();
  train.num_classes = test.num_classes = ds.num_classes;
  train.num_parts = test.num_parts = ds.num_parts;
  for (const auto& c : ds.clouds)
    (is_test_cloud(c.id) ? test : train).clouds.push_back(c);
}

/// Point-set digits from an IDX pair, one cloud per image.
inline Dataset pointset_digits(const IdxImages& images,
                               const std::vector<std::uint8_t>& labels,
                               std::uint64_t seed, std::size_t set_size = 256) {
  if (images.count != labels.size())
    throw DimensionError("image/label counts differ");
  Dataset ds;
  ds.num_classes = 10;
  ds.num_parts = 0;
  for (std::size_t i = 0; i < images.count; ++i) {
    Rng rng(seed * 0x9E3779B97F4A7C15ull + i);
    auto cloud = image_to_pointset(
        images.pixels.data() + i * images.rows * images.cols, images.rows,
        images.cols, rng, set_size);
    cloud.class_label = static_cast<int>(labels[i]);
    cloud.id = "digit" + std::to_string(labels[i]) + "_" + std::to_string(i);
    ds.clouds.push_back(std::move(cloud));
  }
  return ds;
}

}  // namespace setnet
