#pragma once

// Poisson-disk surface sampling with full-resolution vertex neighborhoods and
// relative density weights.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "neuralshdf/errors.hpp"
#include "neuralshdf/mesh.hpp"
#include "neuralshdf/spatial.hpp"
#include "neuralshdf/util.hpp"

namespace nshdf {

struct SampleSet {
  double radius = 0;
  std::vector<Vec3> positions;
  std::vector<int> host_faces;
  std::vector<std::vector<int>> neighbors;  // full-resolution vertex ids within radius
  std::vector<double> rho;

  std::size_t size() const { return positions.size(); }
};

/// Consecutive rejected darts after which a front is closed.
inline constexpr int kDartBudget = 30;

inline double default_sampling_radius(const Mesh& mesh) { return 0.05 * bbox_diagonal(mesh); }

namespace detail {

struct SubTriangle {
  Vec3 a, b, c;
  int host;
  double area;
};

// Splits a triangle until no edge exceeds max_edge, so each piece sits in a
// small neighborhood of grid cells.
inline void split_triangle(const Vec3& a, const Vec3& b, const Vec3& c, int host, double max_edge,
                           std::vector<SubTriangle>& out, int depth = 0) {
  const double ab = (b - a).norm(), bc = (c - b).norm(), ca = (a - c).norm();
  const double longest = std::max({ab, bc, ca});
  if (longest <= max_edge || depth > 24) {
    out.push_back({a, b, c, host, 0.5 * (b - a).cross(c - a).norm()});
    return;
  }
  // Bisect the longest edge.
  if (longest == ab) {
    const Vec3 m = 0.5 * (a + b);
    split_triangle(a, m, c, host, max_edge, out, depth + 1);
    split_triangle(m, b, c, host, max_edge, out, depth + 1);
  } else if (longest == bc) {
    const Vec3 m = 0.5 * (b + c);
    split_triangle(a, b, m, host, max_edge, out, depth + 1);
    split_triangle(a, m, c, host, max_edge, out, depth + 1);
  } else {
    const Vec3 m = 0.5 * (c + a);
    split_triangle(a, b, m, host, max_edge, out, depth + 1);
    split_triangle(m, b, c, host, max_edge, out, depth + 1);
  }
}

struct Front {
  std::vector<int> pieces;
  std::vector<double> cumulative_area;
};

}  // namespace detail

/// Dart throwing over the surface. The surface is cut into pieces no longer
/// than the radius and grouped by grid cell; each cell is an independent front
/// that throws area-weighted darts until kDartBudget consecutive rejections.
inline SampleSet poisson_disk_sample(const Mesh& mesh, double radius, std::uint64_t seed) {
  if (!(radius > 0)) throw ContractError("sampling radius must be > 0");
  const FaceGeometry geo = face_geometry(mesh);
  if (!(geo.total_area > 0)) throw DomainError("mesh has no surface area to sample");
  SampleSet out;
  out.radius = radius;
  Rng rng(seed);

  if (radius >= bbox_diagonal(mesh)) {
    spdlog::warn("sampling radius {} is not below the bounding-box diagonal; returning one sample", radius);
    // One area-weighted point.
    double pick = rng.uniform() * geo.total_area;
    std::size_t f = 0;
    for (; f + 1 < mesh.faces.size(); ++f) {
      if (geo.degenerate[f]) continue;
      if (pick < geo.areas[f]) break;
      pick -= geo.areas[f];
    }
    while (geo.degenerate[f] && f > 0) --f;
    out.positions.push_back(geo.centroids[f]);
    out.host_faces.push_back(static_cast<int>(f));
    return out;
  }

  std::vector<detail::SubTriangle> pieces;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    if (geo.degenerate[f]) continue;
    const auto& t = mesh.faces[f];
    detail::split_triangle(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]], static_cast<int>(f),
                           radius, pieces);
  }

  PointGrid accepted(radius);
  // Ordered map keeps front order independent of hashing.
  std::map<PointGrid::Cell, detail::Front> fronts;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    if (!(pieces[i].area > 0)) continue;
    const Vec3 centroid = (pieces[i].a + pieces[i].b + pieces[i].c) / 3.0;
    auto& front = fronts[accepted.cell_of(centroid)];
    const double prev = front.cumulative_area.empty() ? 0.0 : front.cumulative_area.back();
    front.pieces.push_back(static_cast<int>(i));
    front.cumulative_area.push_back(prev + pieces[i].area);
  }
  std::vector<const detail::Front*> order;
  order.reserve(fronts.size());
  for (const auto& [cell, front] : fronts) order.push_back(&front);
  rng.shuffle(order);

  for (const detail::Front* front : order) {
    const double total = front->cumulative_area.back();
    int failures = 0;
    while (failures < kDartBudget) {
      const double pick = rng.uniform() * total;
      const auto it = std::upper_bound(front->cumulative_area.begin(), front->cumulative_area.end(), pick);
      const auto slot = std::min<std::size_t>(it - front->cumulative_area.begin(), front->pieces.size() - 1);
      const auto& piece = pieces[front->pieces[slot]];
      double u = rng.uniform(), v = rng.uniform();
      if (u + v > 1.0) {
        u = 1.0 - u;
        v = 1.0 - v;
      }
      const Vec3 p = piece.a + u * (piece.b - piece.a) + v * (piece.c - piece.a);
      if (accepted.any_closer(p, radius)) {
        ++failures;
        continue;
      }
      failures = 0;
      accepted.insert(p, static_cast<int>(out.positions.size()));
      out.positions.push_back(p);
      out.host_faces.push_back(piece.host);
    }
  }
  return out;
}

/// Fills each sample's list with the mesh vertices within `radius` (sorted).
/// Samples whose neighborhood is empty are dropped with a warning.
inline SampleSet build_neighborhoods(SampleSet samples, const Mesh& mesh, double radius, int threads = 1) {
  if (!(radius > 0)) throw ContractError("neighborhood radius must be > 0");
  const PointGrid grid(mesh.vertices, radius);
  std::vector<std::vector<int>> lists(samples.size());
  parallel_for(samples.size(), threads,
               [&](std::size_t i) { lists[i] = grid.within(samples.positions[i], radius); });
  SampleSet out;
  out.radius = samples.radius;
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (lists[i].empty()) {
      ++dropped;
      continue;
    }
    out.positions.push_back(samples.positions[i]);
    out.host_faces.push_back(samples.host_faces[i]);
    out.neighbors.push_back(std::move(lists[i]));
  }
  if (dropped > 0) spdlog::warn("dropped {} sample(s) with no vertex within {}", dropped, radius);
  return out;
}

/// rho_i = |N(i)| / median_j |N(j)|.
inline SampleSet compute_densities(SampleSet samples) {
  if (samples.neighbors.size() != samples.size()) throw ContractError("neighborhoods not built");
  samples.rho.assign(samples.size(), 1.0);
  if (samples.size() == 0) return samples;
  std::vector<double> counts(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) counts[i] = static_cast<double>(samples.neighbors[i].size());
  const double med = median(counts);
  for (std::size_t i = 0; i < samples.size(); ++i) samples.rho[i] = counts[i] / med;
  return samples;
}

/// Sampling, neighborhoods and densities in one call.
inline SampleSet sample_surface(const Mesh& mesh, double radius, std::uint64_t seed, int threads = 1) {
  SampleSet s = poisson_disk_sample(mesh, radius, seed);
  s = build_neighborhoods(std::move(s), mesh, radius, threads);
  if (s.size() == 0) throw GraphError("no sample has a mesh vertex within the sampling radius");
  return compute_densities(std::move(s));
}

inline constexpr int kSampleFormatVersion = 1;

inline nlohmann::json samples_to_json(const SampleSet& s) {
  nlohmann::json positions = nlohmann::json::array();
  for (const auto& p : s.positions) positions.push_back({p.x(), p.y(), p.z()});
  return {{"format", "nshdf.samples"}, {"version", kSampleFormatVersion}, {"radius", s.radius},
          {"positions", positions},    {"host_faces", s.host_faces},     {"neighbors", s.neighbors},
          {"rho", s.rho}};
}

inline SampleSet samples_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "nshdf.samples") throw ParseError("not a sample-set document");
    if (j.at("version").get<int>() != kSampleFormatVersion) throw ParseError("unsupported sample-set version");
    SampleSet s;
    s.radius = j.at("radius").get<double>();
    for (const auto& p : j.at("positions")) s.positions.emplace_back(p.at(0), p.at(1), p.at(2));
    s.host_faces = j.at("host_faces").get<std::vector<int>>();
    s.neighbors = j.at("neighbors").get<std::vector<std::vector<int>>>();
    s.rho = j.at("rho").get<std::vector<double>>();
    if (s.host_faces.size() != s.size() || s.neighbors.size() != s.size() || s.rho.size() != s.size()) {
      throw ParseError("sample-set arrays differ in length");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("sample-set JSON: ") + e.what());
  }
}

}  // namespace nshdf
