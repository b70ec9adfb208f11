#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

namespace crowdnav {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend constexpr Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend constexpr Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend constexpr bool operator==(Vec2, Vec2) = default;
};

constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
constexpr double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline double distance(Vec2 a, Vec2 b) { return norm(a - b); }

/// Wraps an angle into [-pi, pi].
inline double wrap_angle(double a) {
  if (a >= -std::numbers::pi && a <= std::numbers::pi) return a;
  return std::remainder(a, 2.0 * std::numbers::pi);
}

inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  double t = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return distance(p, a + t * ab);
}

/// Distance along a unit-direction ray to segment [a, b], if hit at t > 0.
inline std::optional<double> ray_segment_hit(Vec2 origin, Vec2 dir, Vec2 a, Vec2 b) {
  const Vec2 e = b - a;
  const Vec2 ao = a - origin;
  const double denom = cross(dir, e);
  if (denom == 0.0) {
    // Parallel. Only a collinear segment can be hit; take its nearest endpoint ahead.
    if (cross(ao, dir) != 0.0) return std::nullopt;
    const double ta = dot(a - origin, dir);
    const double tb = dot(b - origin, dir);
    if (ta <= 0.0 && tb <= 0.0) return std::nullopt;
    if (ta > 0.0 && tb > 0.0) return std::min(ta, tb);
    return std::nullopt;  // origin lies on the segment
  }
  const double t = cross(ao, e) / denom;
  const double u = cross(ao, dir) / denom;
  if (t <= 0.0 || u < 0.0 || u > 1.0) return std::nullopt;
  return t;
}

/// Distance along a unit-direction ray to the boundary of a disc, if hit at t > 0.
/// From inside the disc the exit point is returned.
inline std::optional<double> ray_disc_hit(Vec2 origin, Vec2 dir, Vec2 center, double radius) {
  const Vec2 oc = origin - center;
  const double b = dot(dir, oc);
  const double c = dot(oc, oc) - radius * radius;
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double s = std::sqrt(disc);
  const double t1 = -b - s;
  if (t1 > 0.0) return t1;
  const double t2 = -b + s;
  if (t2 > 0.0) return t2;
  return std::nullopt;
}

}  // namespace crowdnav
