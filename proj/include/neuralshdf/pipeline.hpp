#pragma once

// End-to-end segmentation: field (oracle or network) -> GMM -> k-way cut ->
// boundary smoothing, with a per-mesh cache so re-partitioning and
// refinement reuse fields.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "neuralshdf/bvh.hpp"
#include "neuralshdf/emd_net.hpp"
#include "neuralshdf/errors.hpp"
#include "neuralshdf/gmm.hpp"
#include "neuralshdf/mesh.hpp"
#include "neuralshdf/partition.hpp"
#include "neuralshdf/sampler.hpp"
#include "neuralshdf/shdf.hpp"
#include "neuralshdf/util.hpp"

namespace nshdf {

enum class ShdfSource { Oracle, Model };
enum class RefineFieldPolicy { Recompute, Reuse };
enum class GridMetric { NormalizedEnergy, Silhouette };

inline std::string_view source_name(ShdfSource s) { return s == ShdfSource::Oracle ? "oracle" : "model"; }

inline ShdfSource parse_source(std::string_view s) {
  if (s == "oracle") return ShdfSource::Oracle;
  if (s == "model") return ShdfSource::Model;
  throw ContractError("unknown ShDF source '" + std::string(s) + "' (expected oracle|model)");
}

inline std::string_view metric_name(GridMetric m) {
  return m == GridMetric::NormalizedEnergy ? "energy" : "silhouette";
}

inline GridMetric parse_metric(std::string_view s) {
  if (s == "energy") return GridMetric::NormalizedEnergy;
  if (s == "silhouette") return GridMetric::Silhouette;
  throw ContractError("unknown metric '" + std::string(s) + "' (expected energy|silhouette)");
}

struct PipelineConfig {
  ShdfSource source = ShdfSource::Oracle;
  std::filesystem::path model_path;
  ShdfParams shdf;
  double sampling_radius = 0;  // <= 0: 5% of the bounding-box diagonal
  PartitionParams partition;
  int max_depth = 4;
  bool smooth = true;
  RefineFieldPolicy refine_field = RefineFieldPolicy::Recompute;
  int threads = 1;

  void validate() const {
    shdf.validate();
    partition.validate();
    if (max_depth < 0) throw ContractError("refinement depth limit must be >= 0");
    if (threads < 1) throw ContractError("threads must be >= 1");
    if (source == ShdfSource::Model) {
      if (model_path.empty()) throw ContractError("source=model needs a model file");
      if (!std::filesystem::exists(model_path)) {
        throw ContractError("model file not found: " + model_path.string());
      }
    }
  }

  double radius_for(const Mesh& mesh) const {
    return sampling_radius > 0 ? sampling_radius : default_sampling_radius(mesh);
  }

  /// Everything the field depends on.
  std::string field_key(const Mesh& mesh) const {
    std::string key = std::string(source_name(source)) + "|" + shdf.key();
    if (source == ShdfSource::Model) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "|r=%.17g", radius_for(mesh));
      key += "|" + model_path.lexically_normal().string() + buf;
    }
    return key;
  }

  nlohmann::json to_json() const {
    return {{"source", source_name(source)},
            {"model", model_path.string()},
            {"shdf",
             {{"cone_half_angle", shdf.cone_half_angle},
              {"rays_per_point", shdf.rays_per_point},
              {"outlier_std_factor", shdf.outlier_std_factor},
              {"normalization_alpha", shdf.normalization_alpha},
              {"smoothing_iterations", shdf.smoothing_iterations},
              {"smoothing_sigma", shdf.smoothing_sigma},
              {"aggregator", shdf.aggregator == ShdfAggregator::Median ? "median" : "weighted_mean"},
              {"seed", shdf.seed}}},
            {"sampling_radius", sampling_radius},
            {"partition", nshdf::to_json(partition)},
            {"max_depth", max_depth},
            {"smooth", smooth},
            {"refine_field", refine_field == RefineFieldPolicy::Recompute ? "recompute" : "reuse"}};
  }

  static PipelineConfig from_json(const nlohmann::json& j) {
    PipelineConfig c;
    c.source = parse_source(j.value("source", std::string("oracle")));
    c.model_path = j.value("model", std::string());
    if (j.contains("shdf")) {
      const auto& s = j["shdf"];
      c.shdf.cone_half_angle = s.value("cone_half_angle", c.shdf.cone_half_angle);
      c.shdf.rays_per_point = s.value("rays_per_point", c.shdf.rays_per_point);
      c.shdf.outlier_std_factor = s.value("outlier_std_factor", c.shdf.outlier_std_factor);
      c.shdf.normalization_alpha = s.value("normalization_alpha", c.shdf.normalization_alpha);
      c.shdf.smoothing_iterations = s.value("smoothing_iterations", c.shdf.smoothing_iterations);
      c.shdf.smoothing_sigma = s.value("smoothing_sigma", c.shdf.smoothing_sigma);
      c.shdf.aggregator = s.value("aggregator", std::string()) == "median" ? ShdfAggregator::Median
                                                                          : ShdfAggregator::WeightedMean;
      c.shdf.seed = s.value("seed", c.shdf.seed);
    }
    c.sampling_radius = j.value("sampling_radius", 0.0);
    if (j.contains("partition")) c.partition = partition_params_from_json(j["partition"]);
    c.max_depth = j.value("max_depth", c.max_depth);
    c.smooth = j.value("smooth", c.smooth);
    c.refine_field = j.value("refine_field", std::string("recompute")) == "reuse" ? RefineFieldPolicy::Reuse
                                                                                  : RefineFieldPolicy::Recompute;
    return c;
  }
};

struct StageTimings {
  double shdf_ms = 0;
  double partition_ms = 0;
  double refine_ms = 0;
  double post_ms = 0;
  double total_ms = 0;

  double stage_sum() const { return shdf_ms + partition_ms + refine_ms + post_ms; }

  nlohmann::json to_json() const {
    return {{"shdf_ms", shdf_ms},
            {"partition_ms", partition_ms},
            {"refine_ms", refine_ms},
            {"post_ms", post_ms},
            {"total_ms", total_ms}};
  }
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Runs fn, adding its wall time to `acc` and tagging library errors with the stage.
template <typename Fn>
auto timed_stage(const char* stage, double& acc, Fn&& fn) -> decltype(fn()) {
  const auto t0 = Clock::now();
  struct Add {
    double& acc;
    Clock::time_point t0;
    ~Add() { acc += ms_since(t0); }
  } add{acc, t0};
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const RefinementDeclined&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e.what());
  }
}

inline std::string hex_id(char prefix, std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%c%016llx", prefix, static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detail

/// Normalized, smoothed per-face field for `mesh` from the configured source.
inline ScalarField compute_field(const Mesh& mesh, const Adjacency& adj, const PipelineConfig& config,
                                 const EmdModel<float>* model) {
  if (config.source == ShdfSource::Oracle) {
    const RayAccel accel(mesh);
    const ScalarField raw = compute_shdf_field(mesh, accel, config.shdf, &adj, config.threads);
    return prepare_field(raw, adj, config.shdf);
  }
  if (!model) throw ContractError("source=model without a loaded model");
  const ScalarField predicted =
      infer_field(*model, mesh, config.radius_for(mesh), config.shdf.seed, config.threads);
  return smooth_anisotropic(predicted, adj.face_neighbors, config.shdf.smoothing_iterations,
                            config.shdf.smoothing_sigma);
}

struct ClusterModel {
  Gmm1D gmm;
  Eigen::MatrixXd probs;
};

inline ClusterModel cluster_field(const ScalarField& field, const PartitionParams& params) {
  ClusterModel cm;
  cm.gmm = fit_gmm(field.values, params.k, 200, 1e-8, params.seed).model;
  cm.probs = soft_assign(cm.gmm, field.values);
  return cm;
}

/// GMM + k-way cut (+ optional boundary smoothing) on a prepared field.
/// Adds partition and post-processing time to `timings` when given.
inline Segmentation segment_field(const DualGraph& g, const ScalarField& field, const PartitionParams& params,
                                  bool smooth, StageTimings* timings = nullptr) {
  StageTimings local;
  StageTimings& t = timings ? *timings : local;
  if (field.values.size() != static_cast<std::size_t>(g.node_count())) {
    throw ContractError("field size does not match the face count");
  }
  ClusterModel cm;
  Segmentation seg = detail::timed_stage("partition", t.partition_ms, [&] {
    cm = cluster_field(field, params);
    return kway_cut(g, cm.probs, params);
  });
  if (!smooth) return seg;
  return detail::timed_stage("post", t.post_ms, [&] {
    return smooth_boundaries(g, seg, params, &cm.probs, &seg.part_cluster);
  });
}

/// Mean silhouette of 1D values grouped by `labels`. Singleton groups score 0;
/// a single group scores 0. O(n * groups * log n) via sorted prefix sums.
inline double silhouette_1d(std::span<const double> values, std::span<const int> labels) {
  if (values.size() != labels.size()) throw ContractError("silhouette: size mismatch");
  if (values.empty()) return 0.0;
  const int groups = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<double>> sorted(groups);
  for (std::size_t i = 0; i < values.size(); ++i) sorted[labels[i]].push_back(values[i]);
  std::vector<std::vector<double>> prefix(groups);
  for (int c = 0; c < groups; ++c) {
    std::sort(sorted[c].begin(), sorted[c].end());
    prefix[c].assign(sorted[c].size() + 1, 0.0);
    for (std::size_t i = 0; i < sorted[c].size(); ++i) prefix[c][i + 1] = prefix[c][i] + sorted[c][i];
  }
  int nonempty = 0;
  for (const auto& s : sorted) nonempty += s.empty() ? 0 : 1;
  if (nonempty < 2) return 0.0;
  // Sum of |x - y| over y in group c.
  auto distance_sum = [&](double x, int c) {
    const auto& s = sorted[c];
    const auto below = static_cast<std::size_t>(std::upper_bound(s.begin(), s.end(), x) - s.begin());
    const double sum_below = prefix[c][below];
    const double sum_above = prefix[c].back() - sum_below;
    return x * static_cast<double>(below) - sum_below + sum_above - x * static_cast<double>(s.size() - below);
  };
  double total = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int own = labels[i];
    const std::size_t own_n = sorted[own].size();
    if (own_n <= 1) continue;
    const double a = distance_sum(values[i], own) / static_cast<double>(own_n - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < groups; ++c) {
      if (c == own || sorted[c].empty()) continue;
      b = std::min(b, distance_sum(values[i], c) / static_cast<double>(sorted[c].size()));
    }
    const double m = std::max(a, b);
    if (m > 0) total += (b - a) / m;
  }
  return total / static_cast<double>(values.size());
}

struct GridSpec {
  std::vector<int> ks;
  std::vector<double> lambdas;
};

struct GridPoint {
  int k = 0;
  double lambda_smooth = 0;
  double normalized_energy = 0;  // energy / face count, lower is better
  double silhouette = 0;         // higher is better
  double partition_ms = 0;
  int rank = 0;  // 1 = best under the requested metric
  Segmentation segmentation;
};

struct GridSearchResult {
  GridMetric metric = GridMetric::NormalizedEnergy;
  std::vector<GridPoint> points;  // sorted by rank
  std::size_t field_computations = 0;
  double field_ms = 0;
};

/// Exhaustive search over k x lambda on one shared field. Points run in
/// parallel; ties keep grid order (k-major).
inline GridSearchResult grid_search(const DualGraph& g, const ScalarField& field, const GridSpec& grid,
                                    const PartitionParams& base, bool smooth, GridMetric metric,
                                    int threads = 1) {
  if (grid.ks.empty() || grid.lambdas.empty()) throw ContractError("grid search needs at least one k and lambda");
  std::vector<GridPoint> points;
  for (int k : grid.ks) {
    for (double l : grid.lambdas) {
      GridPoint p;
      p.k = k;
      p.lambda_smooth = l;
      points.push_back(p);
    }
  }
  for (auto& p : points) {
    PartitionParams params = base;
    params.k = p.k;
    params.lambda_smooth = p.lambda_smooth;
    params.validate();
  }
  const double faces = std::max<double>(1.0, static_cast<double>(field.values.size()));
  parallel_for(points.size(), threads, [&](std::size_t i) {
    GridPoint& p = points[i];
    PartitionParams params = base;
    params.k = p.k;
    params.lambda_smooth = p.lambda_smooth;
    const auto t0 = detail::Clock::now();
    p.segmentation = segment_field(g, field, params, smooth);
    p.partition_ms = detail::ms_since(t0);
    p.normalized_energy = p.segmentation.energy / faces;
    p.silhouette = silhouette_1d(field.values, p.segmentation.labels);
  });
  std::vector<std::size_t> order(points.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return metric == GridMetric::NormalizedEnergy ? points[a].normalized_energy < points[b].normalized_energy
                                                  : points[a].silhouette > points[b].silhouette;
  });
  GridSearchResult result;
  result.metric = metric;
  for (std::size_t r = 0; r < order.size(); ++r) {
    points[order[r]].rank = static_cast<int>(r) + 1;
    result.points.push_back(std::move(points[order[r]]));
  }
  return result;
}

struct FieldHandle {
  std::string id;
  std::shared_ptr<const ScalarField> field;
  bool cache_hit = false;
  double elapsed_ms = 0;
};

struct SegmentResult {
  std::string id;
  std::string field_id;
  Segmentation segmentation;
  StageTimings timings;
  bool field_cache_hit = false;
};

/// One uploaded mesh with everything computed for it. `mutex` serializes
/// cache writes; cached fields and segmentations are immutable once stored.
struct MeshResource {
  std::string id;
  Mesh mesh;
  Adjacency adjacency;
  ManifoldReport report;
  std::chrono::system_clock::time_point created;

  mutable std::mutex mutex;
  std::map<std::string, std::shared_ptr<const ScalarField>> fields;  // by field id
  std::map<std::string, std::string> field_keys;                     // field id -> key
  std::map<long long, std::shared_ptr<const DualGraph>> dual_graphs;  // by concavity bias bits
  std::map<std::string, std::shared_ptr<const Segmentation>> segmentations;
  std::size_t field_computations = 0;
  std::size_t field_cache_hits = 0;
};

class Session {
 public:
  explicit Session(int threads = 1) : threads_(std::max(1, threads)) {}

  /// Registers a mesh; raises for meshes that cannot be partitioned.
  std::shared_ptr<MeshResource> add_mesh(Mesh mesh, std::string id = {}) {
    if (mesh.faces.empty()) throw StructuralError("mesh has no faces");
    auto res = std::make_shared<MeshResource>();
    res->adjacency = build_adjacency(mesh);
    res->report = validate_manifold(mesh, res->adjacency);
    res->mesh = std::move(mesh);
    res->created = std::chrono::system_clock::now();
    std::lock_guard lock(mutex_);
    if (id.empty()) {
      do {
        id = "m" + std::to_string(++next_id_);
      } while (meshes_.count(id));
    }
    if (meshes_.count(id)) throw ContractError("mesh id already in use: " + id);
    res->id = id;
    meshes_[id] = res;
    return res;
  }

  std::shared_ptr<MeshResource> find(const std::string& id) const {
    std::lock_guard lock(mutex_);
    const auto it = meshes_.find(id);
    return it == meshes_.end() ? nullptr : it->second;
  }

  bool erase(const std::string& id) {
    std::lock_guard lock(mutex_);
    return meshes_.erase(id) > 0;
  }

  std::size_t mesh_count() const {
    std::lock_guard lock(mutex_);
    return meshes_.size();
  }

  int threads() const { return threads_; }

  std::shared_ptr<const EmdModel<float>> model(const std::filesystem::path& path) {
    const std::string key = std::filesystem::absolute(path).lexically_normal().string();
    std::lock_guard lock(mutex_);
    auto& slot = models_[key];
    if (!slot) slot = std::make_shared<const EmdModel<float>>(load_model(read_file(path)));
    return slot;
  }

  /// Cached field for (mesh, source, params); computed at most once.
  FieldHandle field(MeshResource& res, const PipelineConfig& config) {
    config.validate();
    const std::string key = config.field_key(res.mesh);
    const std::string id = detail::hex_id('f', fnv1a(key));
    std::lock_guard lock(res.mutex);
    FieldHandle h;
    h.id = id;
    if (const auto it = res.fields.find(id); it != res.fields.end()) {
      ++res.field_cache_hits;
      h.field = it->second;
      h.cache_hit = true;
      return h;
    }
    const auto t0 = detail::Clock::now();
    std::shared_ptr<const EmdModel<float>> net;
    if (config.source == ShdfSource::Model) net = model(config.model_path);
    PipelineConfig c = config;
    c.threads = threads_for(config);
    auto f = std::make_shared<const ScalarField>(compute_field(res.mesh, res.adjacency, c, net.get()));
    ++res.field_computations;
    res.fields[id] = f;
    res.field_keys[id] = key;
    h.field = f;
    h.elapsed_ms = detail::ms_since(t0);
    spdlog::debug("mesh {}: computed field {} in {:.1f} ms", res.id, id, h.elapsed_ms);
    return h;
  }

  /// Inserts a field computed elsewhere (e.g. restored from disk) under `config`'s id.
  std::string adopt_field(MeshResource& res, const PipelineConfig& config, ScalarField field) {
    if (field.values.size() != res.mesh.faces.size()) throw FieldError("field size does not match face count");
    const std::string key = config.field_key(res.mesh);
    const std::string id = detail::hex_id('f', fnv1a(key));
    std::lock_guard lock(res.mutex);
    res.fields[id] = std::make_shared<const ScalarField>(std::move(field));
    res.field_keys[id] = key;
    return id;
  }

  void adopt_segmentation(MeshResource& res, const std::string& seg_id, Segmentation seg) {
    if (seg.labels.size() != res.mesh.faces.size()) throw ContractError("segmentation does not belong to this mesh");
    std::lock_guard lock(res.mutex);
    res.segmentations[seg_id] = std::make_shared<const Segmentation>(std::move(seg));
  }

  std::shared_ptr<const ScalarField> find_field(const MeshResource& res, const std::string& field_id) const {
    std::lock_guard lock(res.mutex);
    const auto it = res.fields.find(field_id);
    return it == res.fields.end() ? nullptr : it->second;
  }

  std::shared_ptr<const Segmentation> find_segmentation(const MeshResource& res, const std::string& seg_id) const {
    std::lock_guard lock(res.mutex);
    const auto it = res.segmentations.find(seg_id);
    return it == res.segmentations.end() ? nullptr : it->second;
  }

  std::shared_ptr<const DualGraph> dual_graph(MeshResource& res, double concavity_bias) {
    long long bits = 0;
    std::memcpy(&bits, &concavity_bias, sizeof bits);
    std::lock_guard lock(res.mutex);
    auto& slot = res.dual_graphs[bits];
    if (!slot) slot = std::make_shared<const DualGraph>(build_dual_graph(res.mesh, res.adjacency, concavity_bias, threads_));
    return slot;
  }

  SegmentResult segment(MeshResource& res, const PipelineConfig& config) {
    config.validate();
    const auto t0 = detail::Clock::now();
    SegmentResult out;
    const FieldHandle fh = detail::timed_stage("shdf", out.timings.shdf_ms, [&] { return field(res, config); });
    out.field_id = fh.id;
    out.field_cache_hit = fh.cache_hit;
    const auto g = detail::timed_stage("partition", out.timings.partition_ms,
                                       [&] { return dual_graph(res, config.partition.concavity_bias); });
    out.segmentation = segment_field(*g, *fh.field, config.partition, config.smooth, &out.timings);
    out.id = store(res, out.segmentation, segment_key(fh.id, config), out.timings.post_ms);
    out.timings.total_ms = detail::ms_since(t0);
    return out;
  }

  /// Segments one part of `parent` and splices the children in. Child 0 keeps
  /// the part id; further children get fresh ids after the existing parts.
  /// The energy and its history are those of the child cut.
  SegmentResult refine(MeshResource& res, const Segmentation& parent, int part, const PipelineConfig& config) {
    config.validate();
    const auto t0 = detail::Clock::now();
    if (parent.labels.size() != res.mesh.faces.size()) {
      throw ContractError("segmentation does not belong to this mesh");
    }
    if (part < 0 || part >= parent.part_count) {
      throw ContractError("part " + std::to_string(part) + " does not exist (" +
                          std::to_string(parent.part_count) + " parts)");
    }
    if (parent.depth >= config.max_depth) {
      throw RefinementDeclined("depth limit " + std::to_string(config.max_depth) + " reached");
    }
    std::vector<int> faces;
    for (std::size_t f = 0; f < parent.labels.size(); ++f) {
      if (parent.labels[f] == part) faces.push_back(static_cast<int>(f));
    }
    const auto need = static_cast<std::size_t>(config.partition.min_part_faces) *
                      static_cast<std::size_t>(config.partition.k);
    if (faces.size() < need) {
      throw RefinementDeclined("part " + std::to_string(part) + " has " + std::to_string(faces.size()) +
                               " faces; refining into k=" + std::to_string(config.partition.k) + " needs at least " +
                               std::to_string(need));
    }
    SegmentResult out;
    std::shared_ptr<const ScalarField> parent_field;
    if (config.refine_field == RefineFieldPolicy::Reuse) {
      const FieldHandle fh = detail::timed_stage("shdf", out.timings.shdf_ms, [&] { return field(res, config); });
      parent_field = fh.field;
      out.field_id = fh.id;
      out.field_cache_hit = fh.cache_hit;
    }
    const SubMesh sub = extract_submesh(res.mesh, faces);
    Segmentation child = detail::timed_stage("refine", out.timings.refine_ms, [&] {
      const Adjacency sub_adj = build_adjacency(sub.mesh, false);
      ScalarField sub_field;
      if (parent_field) {
        sub_field = *parent_field;
        sub_field.values.clear();
        for (int f : faces) sub_field.values.push_back(parent_field->values[f]);
      } else {
        std::shared_ptr<const EmdModel<float>> net;
        if (config.source == ShdfSource::Model) net = model(config.model_path);
        PipelineConfig c = config;
        c.threads = threads_for(config);
        sub_field = compute_field(sub.mesh, sub_adj, c, net.get());
      }
      const DualGraph g = build_dual_graph(sub.mesh, sub_adj, config.partition.concavity_bias, threads_);
      StageTimings ignored;
      return segment_field(g, sub_field, config.partition, config.smooth, &ignored);
    });
    if (child.part_count < 2) throw RefinementDeclined("part " + std::to_string(part) + " did not split");

    Segmentation& seg = out.segmentation;
    detail::timed_stage("post", out.timings.post_ms, [&] {
      seg = parent;
      seg.params = config.partition;
      seg.energy = child.energy;
      seg.energy_history = child.energy_history;
      seg.parent = ParentLink{labels_hash(parent.labels), part};
      seg.depth = parent.depth + 1;
      for (std::size_t i = 0; i < faces.size(); ++i) {
        const int c = child.labels[i];
        seg.labels[faces[i]] = c == 0 ? part : parent.part_count + c - 1;
      }
      seg.part_count = parent.part_count + child.part_count - 1;
      if (seg.part_cluster.size() == static_cast<std::size_t>(parent.part_count)) {
        // Child clusters come from a different mixture; offset them past the parent's.
        const int offset = *std::max_element(parent.part_cluster.begin(), parent.part_cluster.end()) + 1;
        seg.part_cluster[part] = offset + child.part_cluster.at(0);
        for (int c = 1; c < child.part_count; ++c) seg.part_cluster.push_back(offset + child.part_cluster.at(c));
      } else {
        seg.part_cluster.clear();
      }
      return 0;
    });
    const std::string key = "refine|" + std::to_string(labels_hash(parent.labels)) + "|" + std::to_string(part) +
                            "|" + segment_key(config.field_key(res.mesh), config);
    out.id = store(res, seg, key, out.timings.post_ms);
    out.timings.total_ms = detail::ms_since(t0);
    return out;
  }

  GridSearchResult grid_search(MeshResource& res, const PipelineConfig& config, const GridSpec& grid,
                               GridMetric metric) {
    config.validate();
    std::size_t before = 0;
    {
      std::lock_guard lock(res.mutex);
      before = res.field_computations;
    }
    const auto t0 = detail::Clock::now();
    const FieldHandle fh = field(res, config);
    const double field_ms = detail::ms_since(t0);
    const auto g = dual_graph(res, config.partition.concavity_bias);
    GridSearchResult r = nshdf::grid_search(*g, *fh.field, grid, config.partition, config.smooth, metric, threads_);
    {
      std::lock_guard lock(res.mutex);
      r.field_computations = res.field_computations - before;
    }
    r.field_ms = field_ms;
    return r;
  }

 private:
  int threads_for(const PipelineConfig& config) const { return std::min(threads_, config.threads); }

  static std::string segment_key(const std::string& field_id, const PipelineConfig& config) {
    return field_id + "|" + nshdf::to_json(config.partition).dump() + (config.smooth ? "|smooth" : "|raw");
  }

  std::string store(MeshResource& res, const Segmentation& seg, const std::string& key, double& post_ms) {
    const auto t0 = detail::Clock::now();
    const std::string id = detail::hex_id('s', fnv1a(key));
    {
      std::lock_guard lock(res.mutex);
      res.segmentations[id] = std::make_shared<const Segmentation>(seg);
    }
    post_ms += detail::ms_since(t0);
    return id;
  }

  int threads_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<MeshResource>> meshes_;
  std::map<std::string, std::shared_ptr<const EmdModel<float>>> models_;
  std::uint64_t next_id_ = 0;
};

/// One-shot segmentation without a persistent session.
inline SegmentResult segment(const Mesh& mesh, const PipelineConfig& config) {
  Session session(config.threads);
  auto res = session.add_mesh(mesh);
  return session.segment(*res, config);
}

/// JSON log of one pipeline invocation.
inline nlohmann::json run_manifest(const PipelineConfig& config, const StageTimings& timings, const Segmentation& seg,
                                   const std::map<std::string, std::string>& artifacts) {
  return {{"format", "nshdf.manifest"},
          {"version", 1},
          {"config", config.to_json()},
          {"timings", timings.to_json()},
          {"energy", seg.energy},
          {"part_count", seg.part_count},
          {"depth", seg.depth},
          {"artifacts", artifacts}};
}

}  // namespace nshdf
