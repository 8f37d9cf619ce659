#pragma once

// Reference Shape Diameter Function: inward cone ray casting, robust
// aggregation, log normalization and feature-preserving smoothing.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuralshdf/bvh.hpp"
#include "neuralshdf/errors.hpp"
#include "neuralshdf/mesh.hpp"
#include "neuralshdf/util.hpp"

namespace nshdf {

enum class ShdfAggregator { WeightedMean, Median };

struct ShdfParams {
  double cone_half_angle = std::numbers::pi / 3.0;  // 60 degrees
  int rays_per_point = 30;
  double outlier_std_factor = 1.0;
  double normalization_alpha = 4.0;
  int smoothing_iterations = 3;
  double smoothing_sigma = 0.1;
  std::uint64_t seed = 0;
  ShdfAggregator aggregator = ShdfAggregator::WeightedMean;

  void validate() const {
    if (!(cone_half_angle > 0 && cone_half_angle < std::numbers::pi / 2)) {
      throw ContractError("cone_half_angle must lie in (0, pi/2)");
    }
    if (rays_per_point < 1) throw ContractError("rays_per_point must be >= 1");
    if (!(normalization_alpha > 0)) throw ContractError("normalization_alpha must be > 0");
    if (smoothing_iterations < 0) throw ContractError("smoothing_iterations must be >= 0");
    if (!(outlier_std_factor >= 0)) throw ContractError("outlier_std_factor must be >= 0");
  }

  /// Stable text form used for cache keys and manifests.
  std::string key() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "a=%.17g;n=%d;o=%.17g;al=%.17g;it=%d;sg=%.17g;seed=%llu;agg=%d",
                  cone_half_angle, rays_per_point, outlier_std_factor, normalization_alpha,
                  smoothing_iterations, smoothing_sigma, static_cast<unsigned long long>(seed),
                  static_cast<int>(aggregator));
    return buf;
  }
};

enum class FieldDomain { PerFace, PerSample };
enum class FieldProvenance { Oracle, Predicted };

struct ScalarField {
  FieldDomain domain = FieldDomain::PerFace;
  FieldProvenance provenance = FieldProvenance::Oracle;
  bool normalized = false;
  bool constant = false;
  std::vector<double> values;

  double min() const { return values.empty() ? 0 : *std::min_element(values.begin(), values.end()); }
  double max() const { return values.empty() ? 0 : *std::max_element(values.begin(), values.end()); }
};

/// Smallest angle used for the inverse-angle ray weight.
inline constexpr double kMinRayAngle = 1e-3;

/// Surface offset applied to ray origins, relative to the square root of the surface area.
inline constexpr double kSurfaceOffset = 1e-4;

/// Unit directions spread uniformly over the cone of half-angle `half_angle`
/// around `axis`. Stratified in cos(theta) with jitter, golden-angle azimuths
/// and a random rotation. The azimuth frame is anchored on `tangent_hint`
/// (projected off the axis), so the pattern moves rigidly with the surface.
/// `angles` receives each direction's angle to the axis.
inline void cone_directions(const Vec3& axis, const Vec3& tangent_hint, double half_angle, int count,
                            Rng& rng, std::vector<Vec3>& dirs, std::vector<double>& angles) {
  dirs.resize(count);
  angles.resize(count);
  const Vec3 w = axis.normalized();
  Vec3 u = tangent_hint - tangent_hint.dot(w) * w;
  if (!(u.norm() > 1e-12 * (1.0 + tangent_hint.norm()))) {
    const Vec3 helper = std::abs(w.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    u = w.cross(helper);
  }
  u.normalize();
  const Vec3 v = w.cross(u);
  const double one_minus_cos = 1.0 - std::cos(half_angle);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  const double phase = 2.0 * std::numbers::pi * rng.uniform();
  for (int k = 0; k < count; ++k) {
    const double s = (k + rng.uniform()) / count;
    const double cos_t = 1.0 - s * one_minus_cos;
    const double sin_t = std::sqrt(std::max(0.0, 1.0 - cos_t * cos_t));
    const double phi = phase + golden * k;
    dirs[k] = cos_t * w + sin_t * (std::cos(phi) * u + std::sin(phi) * v);
    angles[k] = std::acos(std::clamp(cos_t, -1.0, 1.0));
  }
}

/// Robust aggregate of ray lengths: drop lengths more than `std_factor`
/// standard deviations from the median, then combine the survivors.
inline std::optional<double> aggregate_ray_lengths(std::span<const double> lengths,
                                                   std::span<const double> angles,
                                                   double std_factor, ShdfAggregator agg) {
  if (lengths.empty()) return std::nullopt;
  const std::vector<double> all(lengths.begin(), lengths.end());
  const double med = median(all);
  double mean = 0;
  for (double l : lengths) mean += l;
  mean /= lengths.size();
  double var = 0;
  for (double l : lengths) var += (l - mean) * (l - mean);
  const double sd = std::sqrt(var / lengths.size());
  const double limit = std_factor * sd * (1.0 + 1e-12);
  double wsum = 0, vsum = 0;
  std::vector<double> kept;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (std::abs(lengths[i] - med) > limit) continue;
    const double w = 1.0 / std::max(angles[i], kMinRayAngle);
    wsum += w;
    vsum += w * lengths[i];
    kept.push_back(lengths[i]);
  }
  if (kept.empty()) return std::nullopt;
  if (agg == ShdfAggregator::Median) return median(kept);
  return vsum / wsum;
}

/// Raw diameter at `origin` looking along `inward_dir`; nullopt when every ray
/// misses or is rejected. `tangent_hint` orients the ray pattern (any vector
/// not parallel to `inward_dir`; a fixed world axis is used when it is).
inline std::optional<double> shdf_at_point(const RayAccel& accel, const Vec3& origin,
                                           const Vec3& inward_dir, const ShdfParams& params, Rng& rng,
                                           const Vec3& tangent_hint = Vec3::Zero()) {
  std::vector<Vec3> dirs;
  std::vector<double> angles;
  cone_directions(inward_dir, tangent_hint, params.cone_half_angle, params.rays_per_point, rng, dirs,
                  angles);
  const double eps = kSurfaceOffset * accel.surface_scale();
  const Vec3 start = origin + eps * inward_dir.normalized();
  std::vector<double> lengths, hit_angles;
  lengths.reserve(dirs.size());
  hit_angles.reserve(dirs.size());
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    const Ray ray{start, dirs[k]};
    // Only exits through the far wall count: the hit face's inward normal must
    // oppose the ray. Entering hits (self-intersections) are skipped.
    const auto hit = accel.closest_hit(ray, 0.0, std::numeric_limits<double>::infinity(),
                                       [&](int face, double) {
                                         return accel.face_normal(face).dot(ray.direction) > 0.0;
                                       });
    if (!hit) continue;
    lengths.push_back((start + hit->t * ray.direction - origin).norm());
    hit_angles.push_back(angles[k]);
  }
  return aggregate_ray_lengths(lengths, hit_angles, params.outlier_std_factor, params.aggregator);
}

/// Fills unmeasured entries with the area-weighted mean of measured neighbors,
/// growing outward until everything reachable is filled.
inline void fill_unmeasured(std::vector<std::optional<double>>& raw, std::span<const double> areas,
                            const std::vector<std::vector<int>>& neighbors) {
  const std::size_t n = raw.size();
  bool progress = true;
  while (progress) {
    progress = false;
    std::vector<std::pair<std::size_t, double>> updates;
    for (std::size_t i = 0; i < n; ++i) {
      if (raw[i]) continue;
      double wsum = 0, vsum = 0;
      for (int g : neighbors[i]) {
        if (!raw[g]) continue;
        const double w = std::max(areas[g], 1e-300);
        wsum += w;
        vsum += w * *raw[g];
      }
      if (wsum > 0) updates.emplace_back(i, vsum / wsum);
    }
    for (const auto& [i, v] : updates) raw[i] = v;
    progress = !updates.empty();
  }
  // Components without any measurement take the global area-weighted mean.
  double wsum = 0, vsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (raw[i]) {
      wsum += std::max(areas[i], 1e-300);
      vsum += std::max(areas[i], 1e-300) * *raw[i];
    }
  }
  for (auto& r : raw) {
    if (!r) r = vsum / wsum;
  }
}

/// One raw diameter per face, measured from the face centroid.
inline ScalarField compute_shdf_field(const Mesh& mesh, const RayAccel& accel, const ShdfParams& params,
                                      const Adjacency* adjacency = nullptr, int threads = 1) {
  params.validate();
  const FaceGeometry geo = face_geometry(mesh);
  const std::size_t n = mesh.faces.size();
  std::vector<std::optional<double>> raw(n);
  parallel_for(n, threads, [&](std::size_t f) {
    if (geo.degenerate[f]) return;
    Rng rng(derive_seed(params.seed, f));
    const Vec3 hint = mesh.vertices[mesh.faces[f][0]] - geo.centroids[f];
    raw[f] = shdf_at_point(accel, geo.centroids[f], -geo.normals[f], params, rng, hint);
  });
  const std::size_t measured = static_cast<std::size_t>(
      std::count_if(raw.begin(), raw.end(), [](const auto& r) { return r.has_value(); }));
  if (measured == 0) throw FieldError("no face received a diameter measurement");
  if (measured < n) {
    spdlog::debug("filling {} unmeasured face(s)", n - measured);
    if (adjacency) {
      fill_unmeasured(raw, geo.areas, adjacency->face_neighbors);
    } else {
      const Adjacency adj = build_adjacency(mesh, false);
      fill_unmeasured(raw, geo.areas, adj.face_neighbors);
    }
  }
  ScalarField field;
  field.domain = FieldDomain::PerFace;
  field.provenance = FieldProvenance::Oracle;
  field.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) field.values[i] = *raw[i];
  return field;
}

/// Raw diameters at surface points (e.g. samples), each looking against the
/// outward normal of its host face. Unmeasured points stay nullopt.
inline std::vector<std::optional<double>> compute_shdf_at_points(const Mesh& mesh, const RayAccel& accel,
                                                                 std::span<const Vec3> points,
                                                                 std::span<const int> host_faces,
                                                                 const ShdfParams& params,
                                                                 int threads = 1) {
  params.validate();
  std::vector<std::optional<double>> out(points.size());
  parallel_for(points.size(), threads, [&](std::size_t i) {
    const int f = host_faces[i];
    const Vec3 normal = accel.face_normal(f);
    if (normal.squaredNorm() == 0) return;
    Rng rng(derive_seed(params.seed, i));
    const Vec3 hint = mesh.vertices[mesh.faces[f][0]] - points[i];
    out[i] = shdf_at_point(accel, points[i], -normal, params, rng, hint);
  });
  return out;
}

/// v -> log((v - min) / (max - min) * alpha + 1) / log(alpha + 1).
inline ScalarField normalize_log(const ScalarField& field, double alpha) {
  if (!(alpha > 0)) throw ContractError("normalization alpha must be > 0");
  ScalarField out = field;
  out.normalized = true;
  const double lo = field.min(), hi = field.max();
  if (!(hi > lo)) {
    std::fill(out.values.begin(), out.values.end(), 0.0);
    out.constant = true;
    return out;
  }
  out.constant = false;
  const double denom = std::log(alpha + 1.0);
  for (auto& v : out.values) {
    const double t = (v - lo) / (hi - lo);
    v = std::clamp(std::log(t * alpha + 1.0) / denom, 0.0, 1.0);
  }
  return out;
}

/// Bilateral smoothing over an arbitrary neighbor graph: each value becomes the
/// mean of itself and its neighbors weighted by exp(-dv^2 / 2 sigma^2).
inline ScalarField smooth_anisotropic(const ScalarField& field,
                                      const std::vector<std::vector<int>>& neighbors, int iterations,
                                      double value_sigma) {
  if (neighbors.size() != field.values.size()) {
    throw ContractError("neighbor graph size does not match field size");
  }
  ScalarField out = field;
  if (iterations <= 0) return out;
  const double inv2s2 = 1.0 / (2.0 * value_sigma * value_sigma);
  std::vector<double> next(out.values.size());
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      const double vi = out.values[i];
      double wsum = 1.0, vsum = vi;
      for (int g : neighbors[i]) {
        const double d = out.values[g] - vi;
        const double w = std::exp(-d * d * inv2s2);
        wsum += w;
        vsum += w * out.values[g];
      }
      next[i] = vsum / wsum;
    }
    out.values.swap(next);
  }
  return out;
}

inline ScalarField smooth_anisotropic(const ScalarField& field, const Mesh& mesh, const Adjacency& adjacency,
                                      int iterations, double value_sigma) {
  if (field.values.size() != mesh.faces.size()) throw ContractError("field is not per-face for this mesh");
  return smooth_anisotropic(field, adjacency.face_neighbors, iterations, value_sigma);
}

/// Raw field -> normalized and smoothed field, using the params' settings.
inline ScalarField prepare_field(const ScalarField& raw, const Adjacency& adjacency, const ShdfParams& params) {
  ScalarField f = normalize_log(raw, params.normalization_alpha);
  return smooth_anisotropic(f, adjacency.face_neighbors, params.smoothing_iterations, params.smoothing_sigma);
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kFieldFormatVersion = 1;

inline nlohmann::json field_to_json(const ScalarField& f) {
  return {
      {"format", "nshdf.field"},
      {"version", kFieldFormatVersion},
      {"domain", f.domain == FieldDomain::PerFace ? "per_face" : "per_sample"},
      {"provenance", f.provenance == FieldProvenance::Oracle ? "oracle" : "predicted"},
      {"normalized", f.normalized},
      {"constant", f.constant},
      {"values", f.values},
  };
}

inline ScalarField field_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "nshdf.field") throw ParseError("not a field document");
    if (j.at("version").get<int>() != kFieldFormatVersion) {
      throw ParseError("unsupported field version " + std::to_string(j.at("version").get<int>()));
    }
    ScalarField f;
    f.domain = j.at("domain").get<std::string>() == "per_face" ? FieldDomain::PerFace : FieldDomain::PerSample;
    f.provenance =
        j.at("provenance").get<std::string>() == "oracle" ? FieldProvenance::Oracle : FieldProvenance::Predicted;
    f.normalized = j.at("normalized").get<bool>();
    f.constant = j.value("constant", false);
    f.values = j.at("values").get<std::vector<double>>();
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("field JSON: ") + e.what());
  }
}

}  // namespace nshdf
