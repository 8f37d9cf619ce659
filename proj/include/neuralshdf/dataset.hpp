#pragma once

// Synthetic training data: procedural deformations of a base mesh,
// subdivision and remeshing augmentation, and (graph, reference ShDF) pairs.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "neuralshdf/bvh.hpp"
#include "neuralshdf/emd_net.hpp"
#include "neuralshdf/errors.hpp"
#include "neuralshdf/mesh.hpp"
#include "neuralshdf/sampler.hpp"
#include "neuralshdf/shdf.hpp"
#include "neuralshdf/spatial.hpp"
#include "neuralshdf/util.hpp"

namespace nshdf {

/// Smooth radial displacement: v += displacement * (1 - (d/radius)^2)^falloff inside the radius.
struct DeformHandle {
  Vec3 center = Vec3::Zero();
  double radius = 1;
  Vec3 displacement = Vec3::Zero();
  double falloff = 2;
};

/// Rotation by `angle` about `axis` through `pivot`, applied to the region
/// (v - pivot) . direction > 0 and ramped in over `blend` along `direction`.
struct BendSpec {
  Vec3 pivot = Vec3::Zero();
  Vec3 axis = Vec3::UnitZ();
  Vec3 direction = Vec3::UnitX();
  double angle = 0;
  double blend = 0.1;
};

struct DeformSpec {
  std::vector<DeformHandle> handles;
  std::vector<BendSpec> bends;
  std::uint64_t seed = 0;

  void validate(double bbox_diag) const {
    for (const auto& h : handles) {
      if (!(h.radius > 0)) throw ContractError("deformation handle radius must be > 0");
      if (!(h.falloff > 0)) throw ContractError("deformation falloff must be > 0");
      if (h.displacement.norm() > 0.3 * bbox_diag) {
        throw ContractError("handle displacement exceeds 0.3 x bounding-box diagonal");
      }
    }
    for (const auto& b : bends) {
      if (!(b.axis.norm() > 0) || !(b.direction.norm() > 0)) throw ContractError("bend axis/direction must be non-zero");
      if (!(b.blend > 0)) throw ContractError("bend blend width must be > 0");
    }
  }
};

/// Ranges for randomly drawn deformations; lengths are fractions of the
/// base mesh's bounding-box diagonal.
struct DeformTemplate {
  int handles = 4;
  double radius_min = 0.15, radius_max = 0.35;
  double displacement_max = 0.06;
  double falloff = 2;
  int bends = 1;
  double bend_angle_max = 0.4;  // radians
  double bend_blend = 0.15;
};

inline Mesh apply_deform(const Mesh& base, const DeformSpec& spec) {
  spec.validate(bbox_diagonal(base));
  Mesh m = base;
  for (auto& v : m.vertices) {
    Vec3 offset = Vec3::Zero();
    for (const auto& h : spec.handles) {
      const double d = (v - h.center).norm() / h.radius;
      if (d < 1) offset += h.displacement * std::pow(1 - d * d, h.falloff);
    }
    v += offset;
  }
  for (const auto& b : spec.bends) {
    const Vec3 dir = b.direction.normalized();
    const Vec3 axis = b.axis.normalized();
    for (auto& v : m.vertices) {
      const double s = (v - b.pivot).dot(dir);
      if (s <= 0) continue;
      const double t = std::min(1.0, s / b.blend);
      const double w = t * t * (3 - 2 * t);
      const Eigen::AngleAxisd rot(w * b.angle, axis);
      v = b.pivot + rot * (v - b.pivot);
    }
  }
  return m;
}

inline DeformSpec random_deform_spec(const Mesh& base, const DeformTemplate& tmpl, Rng& rng) {
  const Aabb box = bounds(base);
  const double diag = box.diagonal();
  DeformSpec spec;
  for (int i = 0; i < tmpl.handles; ++i) {
    DeformHandle h;
    h.center = base.vertices[rng.below(base.vertices.size())];
    h.radius = diag * rng.uniform(tmpl.radius_min, tmpl.radius_max);
    const Vec3 dir = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    h.displacement = dir * diag * rng.uniform(0.0, tmpl.displacement_max);
    h.falloff = tmpl.falloff;
    spec.handles.push_back(h);
  }
  for (int i = 0; i < tmpl.bends; ++i) {
    BendSpec b;
    const int axis = static_cast<int>(rng.below(3));
    b.direction = Vec3::Unit(axis) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    b.axis = Vec3::Unit((axis + 1 + static_cast<int>(rng.below(2))) % 3);
    b.pivot = box.center() + b.direction * (0.5 * (box.hi - box.lo)[axis] * rng.uniform(0.2, 0.6));
    b.angle = rng.uniform(-tmpl.bend_angle_max, tmpl.bend_angle_max);
    b.blend = tmpl.bend_blend * diag;
    spec.bends.push_back(b);
  }
  return spec;
}

/// True when every face keeps a non-negligible area and its orientation.
inline bool deformation_is_valid(const Mesh& before, const Mesh& after) {
  const double floor = 1e-6 * mean_edge_length(before) * mean_edge_length(before);
  for (const auto& f : before.faces) {
    const Vec3 n0 = face_normal_unnormalized(before, f);
    const Vec3 n1 = face_normal_unnormalized(after, f);
    if (0.5 * n1.norm() < floor && 0.5 * n0.norm() >= floor) return false;
    if (n0.dot(n1) < 0) return false;
  }
  return true;
}

inline constexpr int kVariantRedrawBudget = 20;

/// `count` deformed copies of `base` (vertices move, connectivity is kept).
/// Variants with degenerate or flipped faces are redrawn up to the budget.
inline std::vector<Mesh> generate_variants(const Mesh& base, const DeformTemplate& tmpl, int count,
                                           std::uint64_t seed) {
  if (count < 0) throw ContractError("variant count must be >= 0");
  if (base.faces.empty()) throw StructuralError("base mesh has no faces");
  std::vector<Mesh> out;
  for (int i = 0; i < count; ++i) {
    bool done = false;
    for (int attempt = 0; attempt < kVariantRedrawBudget && !done; ++attempt) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i) * 1000 + attempt));
      DeformSpec spec = random_deform_spec(base, tmpl, rng);
      spec.seed = seed;
      Mesh m = apply_deform(base, spec);
      if (deformation_is_valid(base, m)) {
        out.push_back(std::move(m));
        done = true;
      } else {
        spdlog::debug("variant {} attempt {} rejected: degenerate faces", i, attempt);
      }
    }
    if (!done) throw DomainError("variant " + std::to_string(i) + " exhausted its redraw budget");
  }
  return out;
}

/// Midpoint (4-to-1) subdivision applied `levels` times.
inline Mesh tessellate(const Mesh& mesh, int levels) {
  if (levels < 0) throw ContractError("tessellation levels must be >= 0");
  Mesh cur = mesh;
  for (int l = 0; l < levels; ++l) {
    Mesh next;
    next.vertices = cur.vertices;
    std::unordered_map<std::uint64_t, int> mid;
    auto midpoint = [&](int a, int b) {
      const auto key = Adjacency::key(a, b);
      const auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      const int id = static_cast<int>(next.vertices.size());
      next.vertices.push_back(0.5 * (cur.vertices[a] + cur.vertices[b]));
      mid.emplace(key, id);
      return id;
    };
    next.faces.reserve(cur.faces.size() * 4);
    for (const auto& f : cur.faces) {
      const int ab = midpoint(f[0], f[1]), bc = midpoint(f[1], f[2]), ca = midpoint(f[2], f[0]);
      next.faces.push_back({f[0], ab, ca});
      next.faces.push_back({ab, f[1], bc});
      next.faces.push_back({ca, bc, f[2]});
      next.faces.push_back({ab, bc, ca});
    }
    cur = std::move(next);
  }
  return cur;
}

namespace detail {

inline std::vector<Vec3> vertex_normals(const Mesh& m) {
  std::vector<Vec3> n(m.vertices.size(), Vec3::Zero());
  for (const auto& f : m.faces) {
    const Vec3 fn = face_normal_unnormalized(m, f);
    for (int v : f) n[v] += fn;
  }
  for (auto& v : n) {
    const double len = v.norm();
    if (len > 0) v /= len;
  }
  return n;
}

// Triangle quality guard for flips: both triangles keep area and face the
// same way as the pair they replace.
inline bool flip_is_valid(const Mesh& m, int a, int b, int c, int d, const Vec3& ref) {
  const Vec3 n1 = (m.vertices[b] - m.vertices[a]).cross(m.vertices[c] - m.vertices[a]);
  const Vec3 n2 = (m.vertices[c] - m.vertices[a]).cross(m.vertices[d] - m.vertices[a]);
  const double scale = ref.norm();
  if (n1.norm() < 1e-3 * scale || n2.norm() < 1e-3 * scale) return false;
  return n1.dot(ref) > 0 && n2.dot(ref) > 0;
}

}  // namespace detail

/// Tangential vertex jitter (fraction of each vertex's mean incident edge
/// length) followed by random valid flips of `flip_fraction` of the interior edges.
inline Mesh remesh_perturb(const Mesh& mesh, double jitter, double flip_fraction, std::uint64_t seed) {
  if (!(jitter >= 0 && jitter < 0.5)) throw ContractError("jitter must lie in [0, 0.5)");
  if (!(flip_fraction >= 0 && flip_fraction <= 1)) throw ContractError("flip fraction must lie in [0, 1]");
  Mesh m = mesh;
  Rng rng(seed);
  if (jitter > 0) {
    const Adjacency adj = build_adjacency(m, false);
    const auto normals = detail::vertex_normals(m);
    std::vector<std::vector<int>> vertex_faces(m.vertices.size());
    for (std::size_t f = 0; f < m.faces.size(); ++f) {
      for (int v : m.faces[f]) vertex_faces[v].push_back(static_cast<int>(f));
    }
    // Boundary vertices stay put so open borders keep their shape.
    std::vector<char> boundary(m.vertices.size(), 0);
    for (const auto& e : adj.edges) {
      if (e.faces.size() == 1) boundary[e.v0] = boundary[e.v1] = 1;
    }
    for (std::size_t v = 0; v < m.vertices.size(); ++v) {
      const Vec3 offset_seed(rng.normal(), rng.normal(), rng.normal());
      const double unit = rng.uniform();
      const auto& ring = adj.vertex_rings[v];
      if (boundary[v] || ring.empty() || normals[v].squaredNorm() == 0) continue;
      double mean_len = 0;
      for (int u : ring) mean_len += (m.vertices[u] - m.vertices[v]).norm();
      mean_len /= static_cast<double>(ring.size());
      Vec3 t = offset_seed - offset_seed.dot(normals[v]) * normals[v];
      if (t.squaredNorm() == 0) continue;
      t.normalize();
      const Vec3 old = m.vertices[v];
      m.vertices[v] = old + t * (jitter * mean_len * unit);
      bool ok = true;
      for (int f : vertex_faces[v]) {
        const Vec3 n0 = face_normal_unnormalized(mesh, mesh.faces[f]);
        const Vec3 n1 = face_normal_unnormalized(m, m.faces[f]);
        if (n1.dot(n0) < 0.25 * n0.squaredNorm()) ok = false;
      }
      if (!ok) m.vertices[v] = old;
    }
  }
  if (flip_fraction > 0) {
    Adjacency adj = build_adjacency(m, false);
    std::vector<int> interior;
    for (std::size_t e = 0; e < adj.edges.size(); ++e) {
      if (adj.edges[e].faces.size() == 2) interior.push_back(static_cast<int>(e));
    }
    rng.shuffle(interior);
    const auto target = static_cast<std::size_t>(std::llround(flip_fraction * static_cast<double>(interior.size())));
    // Flipped faces are not flipped again, so the stale adjacency stays valid for the rest.
    std::vector<char> touched(m.faces.size(), 0);
    std::unordered_map<std::uint64_t, int> edges = adj.edge_lookup;
    std::size_t flips = 0;
    for (int e : interior) {
      if (flips >= target) break;
      const int f0 = adj.edges[e].faces[0], f1 = adj.edges[e].faces[1];
      if (touched[f0] || touched[f1]) continue;
      const int u = adj.edges[e].v0, w = adj.edges[e].v1;
      auto apex = [&](int f) {
        for (int v : m.faces[f]) {
          if (v != u && v != w) return v;
        }
        return -1;
      };
      // Orient so f0 = (a, b, c) with edge a->b.
      const Face& t0 = m.faces[f0];
      int k = 0;
      while (!((t0[k] == u && t0[(k + 1) % 3] == w) || (t0[k] == w && t0[(k + 1) % 3] == u))) ++k;
      const int a = t0[k], b = t0[(k + 1) % 3], c = apex(f0), d = apex(f1);
      if (c < 0 || d < 0 || c == d || edges.count(Adjacency::key(c, d))) continue;
      const Vec3 ref = face_normal_unnormalized(m, t0) + face_normal_unnormalized(m, m.faces[f1]);
      // New triangles (c, a, d) and (d, b, c) replace (a, b, c) and (b, a, d).
      if (!detail::flip_is_valid(m, c, a, d, b, ref)) continue;
      m.faces[f0] = {c, a, d};
      m.faces[f1] = {d, b, c};
      edges.erase(Adjacency::key(a, b));
      edges.emplace(Adjacency::key(c, d), -1);
      touched[f0] = touched[f1] = 1;
      ++flips;
    }
  }
  return m;
}

struct TrainPair {
  GraphInput graph;
  std::vector<double> target;    // per node, in [0, 1]
  std::vector<Vec3> positions;   // sample positions in the mesh's canonical frame
  std::string source;            // provenance tag of the mesh
};

struct TaggedMesh {
  std::string tag;
  Mesh mesh;
};

inline constexpr std::size_t kTargetNeighbors = 8;

/// Graph and reference field for one mesh: samples in the canonical frame,
/// oracle diameters at the samples, log normalization, then bilateral
/// smoothing over the 8-nearest-neighbor sample graph.
inline TrainPair build_training_pair(const TaggedMesh& tm, double radius, const ShdfParams& params,
                                     std::uint64_t seed, int threads = 1) {
  const double r = radius > 0 ? radius : default_sampling_radius(tm.mesh);
  MeshGraph mg = build_mesh_graph(tm.mesh, r, seed, threads);
  const RayAccel accel(mg.canonical);
  const auto raw = compute_shdf_at_points(mg.canonical, accel, mg.samples.positions, mg.samples.host_faces, params,
                                          threads);
  const auto knn = knn_graph(mg.samples.positions, kTargetNeighbors);
  std::vector<std::optional<double>> filled = raw;
  std::vector<double> ones(raw.size(), 1.0);
  if (std::none_of(raw.begin(), raw.end(), [](const auto& v) { return v.has_value(); })) {
    throw FieldError("no sample received a diameter measurement");
  }
  fill_unmeasured(filled, ones, knn);
  ScalarField field;
  field.domain = FieldDomain::PerSample;
  for (const auto& v : filled) field.values.push_back(*v);
  field = normalize_log(field, params.normalization_alpha);
  field = smooth_anisotropic(field, knn, params.smoothing_iterations, params.smoothing_sigma);
  TrainPair pair;
  pair.graph = std::move(mg.graph);
  pair.target = std::move(field.values);
  pair.positions = std::move(mg.samples.positions);
  pair.source = tm.tag;
  if (pair.target.size() != pair.graph.node_count()) throw ContractError("target length differs from node count");
  for (double v : pair.target) {
    if (!std::isfinite(v) || v < 0 || v > 1) throw NumericError("target", "reference value outside [0, 1]");
  }
  return pair;
}

/// Pairs for every mesh that survives its stages, shuffled by `seed`. Meshes
/// that fail are skipped with a warning.
inline std::vector<TrainPair> build_training_pairs(const std::vector<TaggedMesh>& meshes, double radius,
                                                   const ShdfParams& params, std::uint64_t seed, int threads = 1) {
  params.validate();
  std::vector<std::optional<TrainPair>> built(meshes.size());
  parallel_for(meshes.size(), threads, [&](std::size_t i) {
    try {
      built[i] = build_training_pair(meshes[i], radius, params, derive_seed(seed, i), 1);
    } catch (const Error& e) {
      spdlog::warn("skipping mesh '{}': {}", meshes[i].tag, e.what());
    }
  });
  std::vector<TrainPair> out;
  for (auto& b : built) {
    if (b) out.push_back(std::move(*b));
  }
  Rng rng(derive_seed(seed, 0x5eedULL));
  rng.shuffle(out);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kDatasetFormatVersion = 1;

inline nlohmann::json graph_to_json(const GraphInput& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (Eigen::Index i = 0; i < g.node_features.rows(); ++i) {
    std::vector<double> row(g.node_features.cols());
    for (Eigen::Index c = 0; c < g.node_features.cols(); ++c) row[c] = g.node_features(i, c);
    nodes.push_back(row);
  }
  nlohmann::json efeat = nlohmann::json::array();
  for (Eigen::Index i = 0; i < g.edge_features.rows(); ++i) {
    std::vector<double> row(g.edge_features.cols());
    for (Eigen::Index c = 0; c < g.edge_features.cols(); ++c) row[c] = g.edge_features(i, c);
    efeat.push_back(row);
  }
  return {{"node_features", nodes}, {"edges", g.edges}, {"edge_features", efeat}, {"rho", g.rho}};
}

inline GraphInput graph_from_json(const nlohmann::json& j) {
  GraphInput g;
  const auto& nodes = j.at("node_features");
  const auto& efeat = j.at("edge_features");
  g.edges = j.at("edges").get<std::vector<std::array<int, 2>>>();
  g.rho = j.at("rho").get<std::vector<double>>();
  g.node_features.resize(static_cast<Eigen::Index>(nodes.size()), kNodeFeatures);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto row = nodes[i].get<std::vector<double>>();
    if (row.size() != kNodeFeatures) throw ParseError("node feature row has the wrong width");
    for (int c = 0; c < kNodeFeatures; ++c) g.node_features(static_cast<Eigen::Index>(i), c) = row[c];
  }
  g.edge_features.resize(static_cast<Eigen::Index>(efeat.size()), kEdgeFeatures);
  for (std::size_t i = 0; i < efeat.size(); ++i) {
    const auto row = efeat[i].get<std::vector<double>>();
    if (row.size() != kEdgeFeatures) throw ParseError("edge feature row has the wrong width");
    for (int c = 0; c < kEdgeFeatures; ++c) g.edge_features(static_cast<Eigen::Index>(i), c) = row[c];
  }
  const auto n = static_cast<int>(nodes.size());
  if (g.rho.size() != nodes.size() || g.edges.size() != efeat.size()) throw ParseError("graph arrays disagree in length");
  for (const auto& e : g.edges) {
    if (e[0] < 0 || e[0] >= n || e[1] < 0 || e[1] >= n) throw ParseError("edge endpoint out of range");
  }
  return g;
}

inline nlohmann::json pair_to_json(const TrainPair& p) {
  nlohmann::json positions = nlohmann::json::array();
  for (const auto& x : p.positions) positions.push_back({x.x(), x.y(), x.z()});
  return {{"format", "nshdf.pair"},
          {"version", kDatasetFormatVersion},
          {"source", p.source},
          {"graph", graph_to_json(p.graph)},
          {"target", p.target},
          {"positions", positions}};
}

inline TrainPair pair_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "nshdf.pair") throw ParseError("not a training pair document");
    if (j.at("version").get<int>() != kDatasetFormatVersion) throw ParseError("unsupported pair version");
    TrainPair p;
    p.source = j.at("source").get<std::string>();
    p.graph = graph_from_json(j.at("graph"));
    p.target = j.at("target").get<std::vector<double>>();
    for (const auto& x : j.value("positions", nlohmann::json::array())) {
      const auto v = x.get<std::array<double, 3>>();
      p.positions.emplace_back(v[0], v[1], v[2]);
    }
    if (p.target.size() != p.graph.node_count()) throw ParseError("target length differs from node count");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("pair JSON: ") + e.what());
  }
}

/// Writes pair_NNNN.json files and manifest.json into `dir`.
inline void save_dataset(const std::filesystem::path& dir, const std::vector<TrainPair>& pairs,
                         const nlohmann::json& generation) {
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "pair_%04zu.json", i);
    write_file(dir / name, pair_to_json(pairs[i]).dump());
    files.push_back({{"file", name}, {"source", pairs[i].source}, {"nodes", pairs[i].graph.node_count()}});
  }
  const nlohmann::json manifest = {{"format", "nshdf.dataset"},
                                   {"version", kDatasetFormatVersion},
                                   {"generation", generation},
                                   {"pairs", files}};
  write_file(dir / "manifest.json", manifest.dump(2));
}

inline std::vector<TrainPair> load_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    if (manifest.at("format").get<std::string>() != "nshdf.dataset") throw ParseError("not a dataset manifest");
    if (manifest.at("version").get<int>() != kDatasetFormatVersion) throw ParseError("unsupported dataset version");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset manifest: ") + e.what());
  }
  std::vector<TrainPair> out;
  for (const auto& entry : manifest.at("pairs")) {
    const auto path = dir / entry.at("file").get<std::string>();
    try {
      out.push_back(pair_from_json(nlohmann::json::parse(read_file(path))));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::json to_json(const DeformTemplate& t) {
  return {{"handles", t.handles},       {"radius_min", t.radius_min}, {"radius_max", t.radius_max},
          {"displacement_max", t.displacement_max}, {"falloff", t.falloff}, {"bends", t.bends},
          {"bend_angle_max", t.bend_angle_max},     {"bend_blend", t.bend_blend}};
}

}  // namespace nshdf
