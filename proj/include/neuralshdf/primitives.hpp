#pragma once

// Procedural meshes: test fixtures, dataset base shapes and benchmark inputs.

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "neuralshdf/errors.hpp"
#include "neuralshdf/mesh.hpp"

namespace nshdf::primitives {

inline Mesh triangle() {
  Mesh m;
  m.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  m.faces = {{0, 1, 2}};
  return m;
}

/// Regular grid of (nx x ny) quads in the z = 0 plane, split into triangles.
inline Mesh grid(int nx, int ny, double width, double height, Vec3 origin = Vec3::Zero()) {
  Mesh m;
  for (int j = 0; j <= ny; ++j) {
    for (int i = 0; i <= nx; ++i) {
      m.vertices.push_back(origin + Vec3(width * i / nx, height * j / ny, 0));
    }
  }
  auto id = [nx](int i, int j) { return j * (nx + 1) + i; };
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      m.faces.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      m.faces.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
  }
  return m;
}

inline Mesh unit_square() { return grid(1, 1, 1.0, 1.0); }

/// Outward-facing surface of a set of unit voxels; every voxel face is split
/// into `subdiv` x `subdiv` quads. Voxels must not touch only along an edge or corner.
inline Mesh voxel_surface(const std::vector<std::array<int, 3>>& voxels, int subdiv = 1) {
  std::map<std::array<int, 3>, bool> filled;
  for (const auto& v : voxels) filled[v] = true;
  auto has = [&](int x, int y, int z) { return filled.count({x, y, z}) > 0; };
  Mesh m;
  std::map<std::array<long, 3>, int> index;  // lattice point scaled by subdiv
  auto vertex = [&](long x, long y, long z) {
    const std::array<long, 3> key{x, y, z};
    auto [it, inserted] = index.try_emplace(key, static_cast<int>(m.vertices.size()));
    if (inserted) {
      m.vertices.push_back(Vec3(double(x) / subdiv, double(y) / subdiv, double(z) / subdiv));
    }
    return it->second;
  };
  for (const auto& v : voxels) {
    for (int axis = 0; axis < 3; ++axis) {
      for (int dir : {-1, 1}) {
        std::array<int, 3> nb = v;
        nb[axis] += dir;
        if (has(nb[0], nb[1], nb[2])) continue;
        const int u = (axis + 1) % 3;
        const int w = (axis + 2) % 3;
        for (int a = 0; a < subdiv; ++a) {
          for (int b = 0; b < subdiv; ++b) {
            auto corner = [&](int da, int db) {
              std::array<long, 3> p{long(v[0]) * subdiv, long(v[1]) * subdiv, long(v[2]) * subdiv};
              p[axis] += dir > 0 ? subdiv : 0;
              p[u] += a + da;
              p[w] += b + db;
              return vertex(p[0], p[1], p[2]);
            };
            const int c00 = corner(0, 0), c10 = corner(1, 0), c11 = corner(1, 1), c01 = corner(0, 1);
            // (u, w, axis) is right-handed, so u x w points along +axis.
            if (dir > 0) {
              m.faces.push_back({c00, c10, c11});
              m.faces.push_back({c00, c11, c01});
            } else {
              m.faces.push_back({c00, c11, c10});
              m.faces.push_back({c00, c01, c11});
            }
          }
        }
      }
    }
  }
  return m;
}

/// Unit cube [0,1]^3: 8 vertices, 12 triangles.
inline Mesh cube(int subdiv = 1) { return voxel_surface({{0, 0, 0}}, subdiv); }

inline Mesh icosphere(int subdivisions, double radius = 1.0) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  Mesh m;
  m.vertices = {Vec3(-1, t, 0), Vec3(1, t, 0),  Vec3(-1, -t, 0), Vec3(1, -t, 0),
                Vec3(0, -1, t), Vec3(0, 1, t),  Vec3(0, -1, -t), Vec3(0, 1, -t),
                Vec3(t, 0, -1), Vec3(t, 0, 1),  Vec3(-t, 0, -1), Vec3(-t, 0, 1)};
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
             {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (auto& v : m.vertices) v.normalize();
  for (int s = 0; s < subdivisions; ++s) {
    std::unordered_map<std::uint64_t, int> mid;
    auto midpoint = [&](int a, int b) {
      const auto key = Adjacency::key(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      const int id = static_cast<int>(m.vertices.size());
      m.vertices.push_back((m.vertices[a] + m.vertices[b]).normalized());
      mid.emplace(key, id);
      return id;
    };
    std::vector<Face> next;
    next.reserve(m.faces.size() * 4);
    for (const auto& f : m.faces) {
      const int a = midpoint(f[0], f[1]), b = midpoint(f[1], f[2]), c = midpoint(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    m.faces = std::move(next);
  }
  for (auto& v : m.vertices) v *= radius;
  return m;
}

inline Mesh torus(double major, double minor, int nu, int nv) {
  Mesh m;
  for (int i = 0; i < nu; ++i) {
    const double u = 2 * std::numbers::pi * i / nu;
    for (int j = 0; j < nv; ++j) {
      const double v = 2 * std::numbers::pi * j / nv;
      m.vertices.push_back(Vec3((major + minor * std::cos(v)) * std::cos(u),
                                (major + minor * std::cos(v)) * std::sin(u), minor * std::sin(v)));
    }
  }
  auto id = [&](int i, int j) { return ((i + nu) % nu) * nv + (j + nv) % nv; };
  for (int i = 0; i < nu; ++i) {
    for (int j = 0; j < nv; ++j) {
      m.faces.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      m.faces.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
  }
  return m;
}

/// Surface of revolution about the x axis. `profile` is a list of (x, radius)
/// pairs whose first and last radius are zero (the poles).
inline Mesh revolve(const std::vector<std::pair<double, double>>& profile, int segments) {
  Mesh m;
  const std::size_t n = profile.size();
  m.vertices.push_back(Vec3(profile.front().first, 0, 0));
  for (std::size_t i = 1; i + 1 < n; ++i) {
    for (int s = 0; s < segments; ++s) {
      const double a = 2 * std::numbers::pi * s / segments;
      m.vertices.push_back(Vec3(profile[i].first, profile[i].second * std::cos(a),
                                profile[i].second * std::sin(a)));
    }
  }
  m.vertices.push_back(Vec3(profile.back().first, 0, 0));
  const int rings = static_cast<int>(n) - 2;
  const int last = static_cast<int>(m.vertices.size()) - 1;
  auto id = [segments](int ring, int s) { return 1 + ring * segments + (s % segments); };
  for (int s = 0; s < segments; ++s) m.faces.push_back({0, id(0, s + 1), id(0, s)});
  for (int r = 0; r + 1 < rings; ++r) {
    for (int s = 0; s < segments; ++s) {
      m.faces.push_back({id(r, s), id(r, s + 1), id(r + 1, s + 1)});
      m.faces.push_back({id(r, s), id(r + 1, s + 1), id(r + 1, s)});
    }
  }
  for (int s = 0; s < segments; ++s) m.faces.push_back({last, id(rings - 1, s), id(rings - 1, s + 1)});
  return m;
}

/// Closed cylinder of the given radius along +x from 0 to `length`.
inline Mesh capped_cylinder(double radius, double length, int segments = 48, int cap_rings = 6,
                            int length_rings = 60) {
  std::vector<std::pair<double, double>> p;
  for (int i = 0; i <= cap_rings; ++i) p.emplace_back(0.0, radius * i / cap_rings);
  for (int i = 1; i < length_rings; ++i) p.emplace_back(length * i / length_rings, radius);
  for (int i = cap_rings; i >= 0; --i) p.emplace_back(length, radius * i / cap_rings);
  return revolve(p, segments);
}

struct DumbbellShape {
  double sphere_radius = 1.0;
  double neck_radius = 0.1;
  double neck_length = 1.0;  // gap between the two spheres along the axis
};

/// Two spheres joined along the x axis by a thin cylinder, centered at the origin.
/// `detail` scales both ring and segment counts.
inline Mesh dumbbell(const DumbbellShape& shape = {}, int detail = 1) {
  const double R = shape.sphere_radius, r = shape.neck_radius;
  const double c = 0.5 * shape.neck_length + std::sqrt(R * R - r * r);  // sphere centers at +-c
  const double join = std::asin(r / R);  // polar angle where the neck meets the sphere
  const int sphere_rings = 24 * detail;
  const int neck_rings = std::max(2, static_cast<int>(std::ceil(shape.neck_length / 0.05)) * detail);
  std::vector<std::pair<double, double>> p;
  for (int i = 0; i <= sphere_rings; ++i) {
    const double th = (std::numbers::pi - join) * i / sphere_rings;
    p.emplace_back(-c - R * std::cos(th), R * std::sin(th));
  }
  for (int i = 1; i < neck_rings; ++i) {
    p.emplace_back(-0.5 * shape.neck_length + shape.neck_length * i / neck_rings, r);
  }
  for (int i = sphere_rings; i >= 0; --i) {
    const double th = (std::numbers::pi - join) * i / sphere_rings;
    p.emplace_back(c + R * std::cos(th), R * std::sin(th));
  }
  return revolve(p, 32 * detail);
}

/// Half-length of the neck for a given dumbbell, i.e. |x| below which faces lie on the neck.
inline double dumbbell_neck_half_length(const DumbbellShape& shape = {}) {
  return 0.5 * shape.neck_length;
}

struct Bump {
  Vec3 direction;   // from the sphere center
  double height;
  double width;     // angular width in radians
};

/// Dumbbell whose +x sphere carries radial bumps.
inline Mesh dumbbell_with_bumps(const DumbbellShape& shape, const std::vector<Bump>& bumps,
                                int detail = 2) {
  Mesh m = dumbbell(shape, detail);
  const double c = 0.5 * shape.neck_length +
                   std::sqrt(shape.sphere_radius * shape.sphere_radius - shape.neck_radius * shape.neck_radius);
  const Vec3 center(c, 0, 0);
  for (auto& v : m.vertices) {
    if (v.x() <= 0.5 * shape.neck_length) continue;
    const Vec3 d = (v - center).normalized();
    double h = 0;
    for (const auto& b : bumps) {
      const double ang = std::acos(std::clamp(d.dot(b.direction.normalized()), -1.0, 1.0));
      h += b.height * std::exp(-(ang / b.width) * (ang / b.width));
    }
    v += h * d;
  }
  return m;
}

/// The default two-bump dumbbell used for refinement and benchmarking.
inline Mesh bumpy_dumbbell(int detail = 2) {
  return dumbbell_with_bumps({}, {{Vec3(0.2, 1, 0), 0.9, 0.22}, {Vec3(0.2, -0.5, 0.85), 0.9, 0.22}},
                             detail);
}

/// Two disjoint square grids side by side; the right one has `ratio` times the
/// resolution per axis of the left one.
inline Mesh two_resolution_plane(int coarse_n = 20, int ratio = 2) {
  Mesh left = grid(coarse_n, coarse_n, 1.0, 1.0);
  Mesh right = grid(coarse_n * ratio, coarse_n * ratio, 1.0, 1.0, Vec3(1.5, 0, 0));
  const int offset = static_cast<int>(left.vertices.size());
  for (const auto& v : right.vertices) left.vertices.push_back(v);
  for (const auto& f : right.faces) left.faces.push_back({f[0] + offset, f[1] + offset, f[2] + offset});
  return left;
}

/// Applies a rigid motion to every vertex.
inline Mesh transformed(Mesh m, const Eigen::Matrix3d& rotation, const Vec3& translation) {
  for (auto& v : m.vertices) v = rotation * v + translation;
  for (auto& n : m.normals) n = rotation * n;
  return m;
}

inline Mesh scaled(Mesh m, double s) {
  for (auto& v : m.vertices) v *= s;
  return m;
}

/// Mesh by name with an optional integer level, e.g. "icosphere:4" or
/// "bumpy-dumbbell:3". Names: icosphere, cube, torus, cylinder, dumbbell,
/// bumpy-dumbbell.
inline Mesh by_name(std::string_view spec) {
  const auto colon = spec.find(':');
  const std::string name(spec.substr(0, colon));
  int level = -1;
  if (colon != std::string_view::npos) {
    const std::string arg(spec.substr(colon + 1));
    std::size_t used = 0;
    try {
      level = std::stoi(arg, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != arg.size() || level < 0 || level > 8) {
      throw ContractError("bad level '" + arg + "' in mesh spec (expected 0..8)");
    }
  }
  auto lvl = [&](int fallback) { return level < 0 ? fallback : level; };
  if (name == "icosphere") return icosphere(lvl(3));
  if (name == "cube") return cube(std::max(1, lvl(1)));
  if (name == "torus") return torus(1.0, 0.3, 24 * std::max(1, lvl(2)), 12 * std::max(1, lvl(2)));
  if (name == "cylinder") return capped_cylinder(1.0, 10.0, 48 * std::max(1, lvl(1)), 6 * std::max(1, lvl(1)), 60 * std::max(1, lvl(1)));
  if (name == "dumbbell") return dumbbell({}, std::max(1, lvl(1)));
  if (name == "bumpy-dumbbell") return bumpy_dumbbell(std::max(1, lvl(2)));
  throw ContractError("unknown built-in mesh '" + name + "'");
}

}  // namespace nshdf::primitives
