#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "uae/geometry.hpp"

namespace uae {

// ---------------------------------------------------------------------------
// Triangle meshes

struct TriMesh {
  std::vector<double> verts;  // flat, 3V
  std::vector<int64_t> tris;  // flat, 3F vertex indices

  int64_t vertex_count() const { return static_cast<int64_t>(verts.size()) / 3; }
  int64_t triangle_count() const { return static_cast<int64_t>(tris.size()) / 3; }
  const double* vertex(int64_t i) const { return verts.data() + 3 * i; }

  std::array<const double*, 3> triangle(int64_t f) const {
    return {vertex(tris[3 * f]), vertex(tris[3 * f + 1]), vertex(tris[3 * f + 2])};
  }

  double triangle_area(int64_t f) const {
    auto [a, b, c] = triangle(f);
    double ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
    double vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
    double cx = uy * vz - uz * vy, cy = uz * vx - ux * vz, cz = ux * vy - uy * vx;
    return 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
  }
};

// ---------------------------------------------------------------------------
// OFF loader (fan-triangulates polygons)

namespace detail {

// Pulls the next whitespace-separated token, skipping '#' comments.
class OffTokens {
 public:
  explicit OffTokens(std::istream& in) : in_(in) {}

  std::string next(const char* what) {
    std::string tok;
    while (true) {
      if (!(in_ >> tok)) throw DataError(std::string("load_off: unexpected end of file while reading ") + what);
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in_, rest);
        continue;
      }
      return tok;
    }
  }

  int64_t next_int(const char* what) {
    std::string tok = next(what);
    try {
      size_t pos = 0;
      int64_t v = std::stoll(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw DataError(std::string("load_off: expected integer for ") + what + ", got '" + tok + "'");
    }
  }

  double next_double(const char* what) {
    std::string tok = next(what);
    try {
      size_t pos = 0;
      double v = std::stod(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw DataError(std::string("load_off: expected number for ") + what + ", got '" + tok + "'");
    }
  }

 private:
  std::istream& in_;
};

}  // namespace detail

inline TriMesh load_off_stream(std::istream& in, const std::string& origin) {
  detail::OffTokens tok(in);
  std::string header = tok.next("header");
  if (header != "OFF") throw DataError("load_off: '" + origin + "' has malformed header '" + header + "'");
  int64_t nv = tok.next_int("vertex count");
  int64_t nf = tok.next_int("face count");
  tok.next_int("edge count");  // ignored, as is conventional
  if (nv < 1 || nf < 0) throw DataError("load_off: '" + origin + "' declares invalid counts");
  TriMesh m;
  m.verts.reserve(static_cast<size_t>(3 * nv));
  for (int64_t i = 0; i < nv; ++i)
    for (int c = 0; c < 3; ++c) m.verts.push_back(tok.next_double("vertex coordinate"));
  for (int64_t f = 0; f < nf; ++f) {
    int64_t arity = tok.next_int("face arity");
    if (arity < 3) throw DataError("load_off: face with fewer than 3 vertices");
    std::vector<int64_t> poly(static_cast<size_t>(arity));
    for (int64_t j = 0; j < arity; ++j) {
      poly[static_cast<size_t>(j)] = tok.next_int("face vertex index");
      if (poly[static_cast<size_t>(j)] < 0 || poly[static_cast<size_t>(j)] >= nv)
        throw DataError("load_off: face vertex index out of range");
    }
    for (int64_t j = 1; j + 1 < arity; ++j) {
      m.tris.push_back(poly[0]);
      m.tris.push_back(poly[static_cast<size_t>(j)]);
      m.tris.push_back(poly[static_cast<size_t>(j + 1)]);
    }
  }
  return m;
}

inline TriMesh load_off(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_off: cannot open '" + path + "'");
  return load_off_stream(in, path);
}

// ---------------------------------------------------------------------------
// Point-triangle distance (closest-point region analysis)

inline double point_triangle_dist(const double* p, const double* a, const double* b, const double* c) {
  auto sub = [](const double* x, const double* y, double* o) {
    o[0] = x[0] - y[0];
    o[1] = x[1] - y[1];
    o[2] = x[2] - y[2];
  };
  auto dot = [](const double* x, const double* y) {
    return x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
  };
  double ab[3], ac[3], ap[3];
  sub(b, a, ab);
  sub(c, a, ac);
  sub(p, a, ap);
  double d1 = dot(ab, ap), d2 = dot(ac, ap);
  auto dist_to = [&](double u, double v) {
    double q[3] = {a[0] + u * ab[0] + v * ac[0], a[1] + u * ab[1] + v * ac[1],
                   a[2] + u * ab[2] + v * ac[2]};
    double d[3];
    sub(p, q, d);
    return std::sqrt(dot(d, d));
  };
  if (d1 <= 0 && d2 <= 0) return dist_to(0, 0);  // vertex a
  double bp[3];
  sub(p, b, bp);
  double d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0 && d4 <= d3) return dist_to(1, 0);  // vertex b
  double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return dist_to(d1 / (d1 - d3), 0);  // edge ab
  double cp[3];
  sub(p, c, cp);
  double d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0 && d5 <= d6) return dist_to(0, 1);  // vertex c
  double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return dist_to(0, d2 / (d2 - d6));  // edge ac
  double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return dist_to(1 - w, w);  // edge bc
  }
  double denom = va + vb + vc;
  return dist_to(vb / denom, vc / denom);  // interior
}

inline double point_mesh_dist(const double* p, const TriMesh& m) {
  double best = std::numeric_limits<double>::infinity();
  for (int64_t f = 0; f < m.triangle_count(); ++f) {
    auto [a, b, c] = m.triangle(f);
    best = std::min(best, point_triangle_dist(p, a, b, c));
  }
  return best;
}

// Mean exact point-to-surface distance; evaluation only.
inline double point_to_surface(const PointCloud& cloud, const TriMesh& mesh) {
  cloud.validate();
  if (mesh.triangle_count() < 1) throw DataError("point_to_surface: mesh has no triangles");
  double total_area = 0;
  for (int64_t f = 0; f < mesh.triangle_count(); ++f) total_area += mesh.triangle_area(f);
  if (total_area <= 0) throw DataError("point_to_surface: degenerate mesh with zero area");
  std::vector<double> dists(static_cast<size_t>(cloud.size()));
  for (int64_t i = 0; i < cloud.size(); ++i)
    dists[static_cast<size_t>(i)] = point_mesh_dist(cloud.point(i), mesh);
  return sorted_sum(dists) / static_cast<double>(cloud.size());
}

// ---------------------------------------------------------------------------
// Area-weighted surface sampling

inline PointCloud sample_mesh_surface(const TriMesh& mesh, int64_t n, Rng& rng) {
  if (n < 1) throw ValueError("sample_mesh_surface: need n >= 1");
  if (mesh.triangle_count() < 1) throw DataError("sample_mesh_surface: mesh has no triangles");
  std::vector<double> cum(static_cast<size_t>(mesh.triangle_count()));
  double total = 0;
  for (int64_t f = 0; f < mesh.triangle_count(); ++f) {
    total += mesh.triangle_area(f);
    cum[static_cast<size_t>(f)] = total;
  }
  if (total <= 0) throw DataError("sample_mesh_surface: degenerate mesh with zero area");
  PointCloud out;
  out.pts.reserve(static_cast<size_t>(3 * n));
  out.source = "mesh";
  for (int64_t i = 0; i < n; ++i) {
    double target = rng.uniform() * total;
    int64_t f = static_cast<int64_t>(std::lower_bound(cum.begin(), cum.end(), target) - cum.begin());
    if (f >= mesh.triangle_count()) f = mesh.triangle_count() - 1;
    auto [a, b, c] = mesh.triangle(f);
    double r1 = std::sqrt(rng.uniform()), r2 = rng.uniform();
    double u = 1 - r1, v = r1 * (1 - r2), w = r1 * r2;
    for (int k = 0; k < 3; ++k) out.pts.push_back(u * a[k] + v * b[k] + w * c[k]);
  }
  return out;
}

}  // namespace uae
