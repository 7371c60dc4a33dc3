#pragma once

#include <cmath>
#include <string>

#include "uae/geometry.hpp"

namespace uae {

enum class ShapeKind { Sphere, Cube, Torus, Cylinder, Ellipsoid };

inline const char* shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::Cube: return "cube";
    case ShapeKind::Torus: return "torus";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Ellipsoid: return "ellipsoid";
  }
  return "?";
}

inline ShapeKind shape_from_name(const std::string& s) {
  if (s == "sphere") return ShapeKind::Sphere;
  if (s == "cube") return ShapeKind::Cube;
  if (s == "torus") return ShapeKind::Torus;
  if (s == "cylinder") return ShapeKind::Cylinder;
  if (s == "ellipsoid") return ShapeKind::Ellipsoid;
  throw ValueError("unknown shape kind: " + s);
}

// Analytic surface with an exact unsigned distance evaluator.
// Parameter conventions:
//   sphere    {radius}
//   cube      {half_extent}
//   torus     {major_radius R, tube_radius r}, r < R
//   cylinder  {radius, half_height}, closed caps
//   ellipsoid {a, b, c} semi-axes
struct SyntheticShape {
  ShapeKind kind = ShapeKind::Sphere;
  std::vector<double> params;

  void validate() const {
    size_t want = 0;
    switch (kind) {
      case ShapeKind::Sphere:
      case ShapeKind::Cube: want = 1; break;
      case ShapeKind::Torus:
      case ShapeKind::Cylinder: want = 2; break;
      case ShapeKind::Ellipsoid: want = 3; break;
    }
    if (params.size() != want)
      throw ValueError(std::string("synth_shape: ") + shape_name(kind) + " takes " +
                       std::to_string(want) + " parameter(s), got " + std::to_string(params.size()));
    for (double p : params)
      if (!(p > 0) || !std::isfinite(p))
        throw ValueError(std::string("synth_shape: ") + shape_name(kind) + " parameters must be positive");
    if (kind == ShapeKind::Torus && params[1] >= params[0])
      throw ValueError("synth_shape: torus tube radius must be smaller than major radius");
  }

  // Exact distance from p to the surface (always >= 0).
  double distance(const double* p) const {
    double x = p[0], y = p[1], z = p[2];
    switch (kind) {
      case ShapeKind::Sphere:
        return std::abs(std::sqrt(x * x + y * y + z * z) - params[0]);
      case ShapeKind::Cube: {
        double a = params[0];
        double qx = std::abs(x) - a, qy = std::abs(y) - a, qz = std::abs(z) - a;
        double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0), oz = std::max(qz, 0.0);
        double outside = std::sqrt(ox * ox + oy * oy + oz * oz);
        double inside = std::min(std::max({qx, qy, qz}), 0.0);
        return std::abs(outside + inside);
      }
      case ShapeKind::Torus: {
        double R = params[0], r = params[1];
        double q = std::sqrt(x * x + y * y) - R;
        return std::abs(std::sqrt(q * q + z * z) - r);
      }
      case ShapeKind::Cylinder: {
        double r = params[0], h = params[1];
        double dr = std::sqrt(x * x + y * y) - r;
        double dz = std::abs(z) - h;
        double ox = std::max(dr, 0.0), oz = std::max(dz, 0.0);
        double outside = std::sqrt(ox * ox + oz * oz);
        double inside = std::min(std::max(dr, dz), 0.0);
        return std::abs(outside + inside);
      }
      case ShapeKind::Ellipsoid:
        return ellipsoid_distance(x, y, z);
    }
    return 0;
  }

  // n points uniformly distributed on the surface.
  PointCloud sample(int64_t n, Rng& rng) const {
    if (n < 1) throw ValueError("synth_shape: need n >= 1");
    validate();
    PointCloud out;
    out.pts.reserve(static_cast<size_t>(3 * n));
    out.source = shape_name(kind);
    for (int64_t i = 0; i < n; ++i) {
      double p[3];
      sample_point(rng, p);
      out.pts.push_back(p[0]);
      out.pts.push_back(p[1]);
      out.pts.push_back(p[2]);
    }
    return out;
  }

 private:
  static void unit_direction(Rng& rng, double* d) {
    double n2;
    do {
      d[0] = rng.gaussian();
      d[1] = rng.gaussian();
      d[2] = rng.gaussian();
      n2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    } while (n2 < 1e-24);
    double inv = 1.0 / std::sqrt(n2);
    d[0] *= inv;
    d[1] *= inv;
    d[2] *= inv;
  }

  void sample_point(Rng& rng, double* p) const {
    switch (kind) {
      case ShapeKind::Sphere: {
        unit_direction(rng, p);
        for (int k = 0; k < 3; ++k) p[k] *= params[0];
        return;
      }
      case ShapeKind::Cube: {
        double a = params[0];
        // Six equal-area faces.
        int64_t face = rng.uniform_int(6);
        int axis = static_cast<int>(face / 2);
        double sign = (face % 2 == 0) ? 1.0 : -1.0;
        double u = rng.uniform(-a, a), v = rng.uniform(-a, a);
        p[axis] = sign * a;
        p[(axis + 1) % 3] = u;
        p[(axis + 2) % 3] = v;
        return;
      }
      case ShapeKind::Torus: {
        double R = params[0], r = params[1];
        double u = rng.uniform(0, 2 * M_PI);
        // Area element scales with R + r cos v: rejection-sample v.
        double v;
        do {
          v = rng.uniform(0, 2 * M_PI);
        } while (rng.uniform() * (R + r) > R + r * std::cos(v));
        double ring = R + r * std::cos(v);
        p[0] = ring * std::cos(u);
        p[1] = ring * std::sin(u);
        p[2] = r * std::sin(v);
        return;
      }
      case ShapeKind::Cylinder: {
        double r = params[0], h = params[1];
        double lateral = 2 * M_PI * r * (2 * h);
        double caps = 2 * M_PI * r * r;
        if (rng.uniform() * (lateral + caps) < lateral) {
          double u = rng.uniform(0, 2 * M_PI);
          p[0] = r * std::cos(u);
          p[1] = r * std::sin(u);
          p[2] = rng.uniform(-h, h);
        } else {
          double u = rng.uniform(0, 2 * M_PI);
          double rad = r * std::sqrt(rng.uniform());
          p[0] = rad * std::cos(u);
          p[1] = rad * std::sin(u);
          p[2] = (rng.uniform() < 0.5) ? h : -h;
        }
        return;
      }
      case ShapeKind::Ellipsoid: {
        double a = params[0], b = params[1], c = params[2];
        // Map the unit sphere to the ellipsoid and correct the area
        // distortion by rejection against the local area element.
        double gmax = std::max({a * b, b * c, a * c});
        while (true) {
          double d[3];
          unit_direction(rng, d);
          double g = std::sqrt(d[0] * d[0] * b * b * c * c + d[1] * d[1] * a * a * c * c +
                               d[2] * d[2] * a * a * b * b);
          if (rng.uniform() * gmax <= g) {
            p[0] = a * d[0];
            p[1] = b * d[1];
            p[2] = c * d[2];
            return;
          }
        }
      }
    }
  }

  // Exact point-to-ellipsoid distance via the root of
  // sum_i (a_i^2 p_i / (t + a_i^2))^2 = 1 (largest root, bisection).
  double ellipsoid_distance(double x, double y, double z) const {
    double a2[3] = {params[0] * params[0], params[1] * params[1], params[2] * params[2]};
    double p[3] = {x, y, z};
    // f(t) = sum a_i^2 p_i^2 / (t + a_i^2)^2 is decreasing; f(t*) = 1.
    auto f = [&](double t) {
      double s = 0;
      for (int i = 0; i < 3; ++i) {
        double d = t + a2[i];
        s += a2[i] * p[i] * p[i] / (d * d);
      }
      return s;
    };
    double amin2 = std::min({a2[0], a2[1], a2[2]});
    double lo = -amin2 + 1e-15, hi = std::max(1.0, std::sqrt(x * x + y * y + z * z)) *
                                          std::max({params[0], params[1], params[2]}) + amin2;
    // Ensure the bracket: f(lo) >= 1 >= f(hi).
    while (f(hi) > 1) hi *= 2;
    if (f(lo) < 1) {
      // p is so close to the center that the projection clamps; fall back
      // to the nearest axis-aligned surface point along the smallest axis.
      int imin = 0;
      for (int i = 1; i < 3; ++i)
        if (a2[i] < a2[imin]) imin = i;
      double q[3] = {x, y, z};
      q[imin] = (q[imin] >= 0 ? 1 : -1) * params[imin] *
                std::sqrt(std::max(0.0, 1 - (imin == 0 ? 0 : q[0] * q[0] / a2[0]) -
                                            (imin == 1 ? 0 : q[1] * q[1] / a2[1]) -
                                            (imin == 2 ? 0 : q[2] * q[2] / a2[2])));
      double d0 = x - q[0], d1 = y - q[1], d2v = z - q[2];
      return std::sqrt(d0 * d0 + d1 * d1 + d2v * d2v);
    }
    for (int it = 0; it < 200; ++it) {
      double mid = 0.5 * (lo + hi);
      if (f(mid) > 1)
        lo = mid;
      else
        hi = mid;
    }
    double t = 0.5 * (lo + hi);
    double q[3];
    for (int i = 0; i < 3; ++i) q[i] = a2[i] * p[i] / (t + a2[i]);
    double d0 = x - q[0], d1 = y - q[1], d2v = z - q[2];
    return std::sqrt(d0 * d0 + d1 * d1 + d2v * d2v);
  }
};

inline std::pair<PointCloud, SyntheticShape> synth_shape(ShapeKind kind, std::vector<double> params,
                                                         int64_t n, Rng& rng) {
  SyntheticShape shape{kind, std::move(params)};
  shape.validate();
  PointCloud cloud = shape.sample(n, rng);
  return {std::move(cloud), std::move(shape)};
}

// Mean exact point-to-surface distance against an analytic surface.
inline double point_to_surface(const PointCloud& cloud, const SyntheticShape& shape) {
  cloud.validate();
  shape.validate();
  std::vector<double> dists(static_cast<size_t>(cloud.size()));
  for (int64_t i = 0; i < cloud.size(); ++i)
    dists[static_cast<size_t>(i)] = shape.distance(cloud.point(i));
  return sorted_sum(dists) / static_cast<double>(cloud.size());
}

}  // namespace uae
