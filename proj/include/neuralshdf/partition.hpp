#pragma once

// Face partitioning: dual graph with concavity-aware weights, alpha-expansion
// over GMM soft assignments, connectivity repair and boundary smoothing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "neuralshdf/errors.hpp"
#include "neuralshdf/maxflow.hpp"
#include "neuralshdf/mesh.hpp"
#include "neuralshdf/util.hpp"

namespace nshdf {

struct PartitionParams {
  int k = 2;
  double lambda_smooth = 1.0;
  double concavity_bias = 2.0;
  double p_floor = 1e-6;
  int max_expansion_cycles = 10;
  int min_part_faces = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1) throw ContractError("k must be >= 1");
    if (!(lambda_smooth >= 0)) throw ContractError("lambda_smooth must be >= 0");
    if (!(concavity_bias >= 0)) throw ContractError("concavity_bias must be >= 0");
    if (!(p_floor > 0 && p_floor < 1)) throw ContractError("p_floor must lie in (0, 1)");
    if (max_expansion_cycles < 0) throw ContractError("max_expansion_cycles must be >= 0");
    if (min_part_faces < 1) throw ContractError("min_part_faces must be >= 1");
  }
};

inline nlohmann::json to_json(const PartitionParams& p) {
  return {{"k", p.k},
          {"lambda_smooth", p.lambda_smooth},
          {"concavity_bias", p.concavity_bias},
          {"p_floor", p.p_floor},
          {"max_expansion_cycles", p.max_expansion_cycles},
          {"min_part_faces", p.min_part_faces},
          {"seed", p.seed}};
}

inline PartitionParams partition_params_from_json(const nlohmann::json& j) {
  PartitionParams p;
  p.k = j.value("k", p.k);
  p.lambda_smooth = j.value("lambda_smooth", p.lambda_smooth);
  p.concavity_bias = j.value("concavity_bias", p.concavity_bias);
  p.p_floor = j.value("p_floor", p.p_floor);
  p.max_expansion_cycles = j.value("max_expansion_cycles", p.max_expansion_cycles);
  p.min_part_faces = j.value("min_part_faces", p.min_part_faces);
  p.seed = j.value("seed", p.seed);
  return p;
}

struct DualEdge {
  int a = 0;
  int b = 0;
  double weight = 0;
  double angle = std::numbers::pi;  // dihedral angle of the shared mesh edge
};

struct DualGraph {
  std::vector<DualEdge> edges;
  std::vector<std::vector<std::pair<int, int>>> incident;  // per face: (neighbor face, edge index)

  std::size_t node_count() const { return incident.size(); }
  double mean_weight() const {
    if (edges.empty()) return 0;
    double s = 0;
    for (const auto& e : edges) s += e.weight;
    return s / static_cast<double>(edges.size());
  }
};

/// f(theta) = 1 for convex or flat edges, exp(-bias (theta - pi)) for concave ones.
inline double concavity_factor(double theta, double bias) {
  return theta > std::numbers::pi ? std::exp(-bias * (theta - std::numbers::pi)) : 1.0;
}

/// One node per face, one edge per mesh edge with exactly two faces, weighted
/// by (length / mean length) * concavity_factor(dihedral angle).
inline DualGraph build_dual_graph(const Mesh& mesh, const Adjacency& adj, double concavity_bias, int threads = 1) {
  DualGraph g;
  g.incident.resize(mesh.faces.size());
  std::vector<int> interior;
  for (std::size_t e = 0; e < adj.edges.size(); ++e) {
    if (adj.edges[e].faces.size() == 2) interior.push_back(static_cast<int>(e));
  }
  g.edges.resize(interior.size());
  std::vector<double> lengths(interior.size());
  parallel_for(interior.size(), threads, [&](std::size_t i) {
    const auto& e = adj.edges[interior[i]];
    lengths[i] = (mesh.vertices[e.v0] - mesh.vertices[e.v1]).norm();
    double theta = dihedral_angle(mesh, adj, interior[i]);
    if (!std::isfinite(theta)) theta = std::numbers::pi;  // degenerate neighbor
    g.edges[i] = {e.faces[0], e.faces[1], 0.0, theta};
  });
  double mean_len = 0;
  for (double l : lengths) mean_len += l;
  mean_len = interior.empty() ? 1.0 : mean_len / static_cast<double>(interior.size());
  if (!(mean_len > 0)) mean_len = 1.0;
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    g.edges[i].weight = lengths[i] / mean_len * concavity_factor(g.edges[i].angle, concavity_bias);
    g.incident[g.edges[i].a].emplace_back(g.edges[i].b, static_cast<int>(i));
    g.incident[g.edges[i].b].emplace_back(g.edges[i].a, static_cast<int>(i));
  }
  return g;
}

struct ParentLink {
  std::uint64_t labels_hash = 0;  // fnv1a of the parent's labels
  int part = -1;
};

struct Segmentation {
  std::vector<int> labels;
  int part_count = 0;
  PartitionParams params;
  double energy = 0;
  std::optional<ParentLink> parent;
  int depth = 0;  // refinement steps from the root segmentation
  std::vector<int> part_cluster;  // energy label (GMM component) of each part, when known
  std::vector<double> energy_history;  // energy after initialization and after each expansion cycle
};

inline std::uint64_t labels_hash(const std::vector<int>& labels) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (int l : labels) {
    const auto u = static_cast<std::uint32_t>(l);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(&u), sizeof u), h);
  }
  return h;
}

/// Data costs (faces x labels) plus a Potts boundary term.
struct LabelEnergy {
  Eigen::MatrixXd data;
  double lambda = 1.0;

  double evaluate(const DualGraph& g, const std::vector<int>& labels) const {
    double e = 0;
    for (std::size_t f = 0; f < labels.size(); ++f) e += data(static_cast<Eigen::Index>(f), labels[f]);
    for (const auto& de : g.edges) {
      if (labels[de.a] != labels[de.b]) e += lambda * de.weight;
    }
    return e;
  }
};

inline Eigen::MatrixXd data_costs_from_probabilities(const Eigen::MatrixXd& probs, double p_floor) {
  return probs.unaryExpr([p_floor](double p) { return -std::log(std::max(p, p_floor)); });
}

/// Binary move: faces in `movable` may switch to alpha. Returns the new labels.
inline std::vector<int> expansion_move(const DualGraph& g, const LabelEnergy& energy, const std::vector<int>& labels,
                                       int alpha, const std::vector<char>& movable) {
  const int n = static_cast<int>(labels.size());
  std::vector<int> index(n, -1);
  int count = 0;
  for (int f = 0; f < n; ++f) {
    if (movable[f] && labels[f] != alpha) index[f] = count++;
  }
  if (count == 0) return labels;
  MaxFlow flow(count);
  // Sink side = switch to alpha.
  for (int f = 0; f < n; ++f) {
    if (index[f] < 0) continue;
    flow.add_terminal(index[f], energy.data(f, alpha), energy.data(f, labels[f]));
  }
  for (const auto& e : g.edges) {
    const double w = energy.lambda * e.weight;
    if (w == 0) continue;
    const int ia = index[e.a], ib = index[e.b];
    if (ia < 0 && ib < 0) continue;
    if (ia < 0 || ib < 0) {
      // One end fixed: a unary term on the variable end.
      const int var = ia < 0 ? ib : ia;
      const int fixed_label = ia < 0 ? labels[e.a] : labels[e.b];
      const int var_label = ia < 0 ? labels[e.b] : labels[e.a];
      const double keep = var_label != fixed_label ? w : 0.0;
      const double take = alpha != fixed_label ? w : 0.0;
      flow.add_terminal(var, take, keep);
      continue;
    }
    // E(0,0)=A, E(0,1)=B, E(1,0)=C, E(1,1)=0 with 1 = switch to alpha.
    const double A = labels[e.a] != labels[e.b] ? w : 0.0;
    const double B = w, C = w;
    // E = A + (C - A) x + (0 - C) y + (B + C - A) (1 - x) y
    flow.add_terminal(ia, C - A, 0.0);
    flow.add_terminal(ib, 0.0, C);
    flow.add_edge(ia, ib, B + C - A, 0.0);
  }
  flow.solve();
  std::vector<int> out = labels;
  for (int f = 0; f < n; ++f) {
    if (index[f] >= 0 && flow.on_sink_side(index[f])) out[f] = alpha;
  }
  return out;
}

/// Alpha-expansion cycles over `label_set` until no move lowers the energy.
/// Returns the energy after initialization and after each cycle.
inline std::vector<double> alpha_expansion(const DualGraph& g, const LabelEnergy& energy, std::vector<int>& labels,
                                           const std::vector<int>& label_set, const std::vector<char>& movable,
                                           int max_cycles) {
  double current = energy.evaluate(g, labels);
  std::vector<double> history{current};
  for (int cycle = 0; cycle < max_cycles; ++cycle) {
    bool improved = false;
    for (int alpha : label_set) {
      auto candidate = expansion_move(g, energy, labels, alpha, movable);
      const double e = energy.evaluate(g, candidate);
      if (e < current - 1e-12 * (1.0 + std::abs(current))) {
        labels = std::move(candidate);
        current = e;
        improved = true;
      }
    }
    history.push_back(current);
    if (history[history.size() - 1] > history[history.size() - 2]) {
      throw NumericError("alpha_expansion", "energy increased during a cycle");
    }
    if (!improved) break;
  }
  return history;
}

/// Connected components of equal labels over the dual graph.
inline std::vector<int> label_components(const DualGraph& g, const std::vector<int>& labels, int* count) {
  const int n = static_cast<int>(labels.size());
  std::vector<int> comp(n, -1);
  std::vector<int> stack;
  int c = 0;
  for (int s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    comp[s] = c;
    stack.push_back(s);
    while (!stack.empty()) {
      const int f = stack.back();
      stack.pop_back();
      for (const auto& [nb, e] : g.incident[f]) {
        if (comp[nb] < 0 && labels[nb] == labels[f]) {
          comp[nb] = c;
          stack.push_back(nb);
        }
      }
    }
    ++c;
  }
  if (count) *count = c;
  return comp;
}

/// Splits labels into connected parts and merges parts smaller than
/// `min_faces` into the neighboring part that raises the energy least.
/// `labels` are energy labels; returns part ids (dense, ordered by first face)
/// and rewrites `labels` so every face carries its part's energy label.
inline std::vector<int> repair_connectivity(const DualGraph& g, const LabelEnergy& energy, std::vector<int>& labels,
                                           int min_faces, int* part_count) {
  const int n = static_cast<int>(labels.size());
  while (true) {
    int count = 0;
    const auto comp = label_components(g, labels, &count);
    std::vector<std::vector<int>> members(count);
    for (int f = 0; f < n; ++f) members[comp[f]].push_back(f);
    // Smallest component with at least one neighbor, ties by lowest id.
    int target = -1;
    for (int c = 0; c < count; ++c) {
      if (static_cast<int>(members[c].size()) >= min_faces) continue;
      bool has_neighbor = false;
      for (int f : members[c]) {
        for (const auto& [nb, e] : g.incident[f]) has_neighbor = has_neighbor || comp[nb] != c;
      }
      if (!has_neighbor) continue;
      if (target < 0 || members[c].size() < members[target].size()) target = c;
    }
    if (target < 0) {
      // Dense part ids in order of first face.
      std::vector<int> remap(count, -1);
      int next = 0;
      std::vector<int> parts(n);
      for (int f = 0; f < n; ++f) {
        if (remap[comp[f]] < 0) remap[comp[f]] = next++;
        parts[f] = remap[comp[f]];
      }
      if (part_count) *part_count = next;
      return parts;
    }
    // Cost of relabeling the component to each neighboring component's label.
    std::vector<int> candidates;
    for (int f : members[target]) {
      for (const auto& [nb, e] : g.incident[f]) {
        if (comp[nb] != target) candidates.push_back(comp[nb]);
      }
    }
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    int best = -1;
    double best_cost = std::numeric_limits<double>::infinity();
    for (int c : candidates) {
      const int label = labels[members[c].front()];
      double cost = 0;
      for (int f : members[target]) {
        cost += energy.data(f, label) - energy.data(f, labels[f]);
        for (const auto& [nb, e] : g.incident[f]) {
          if (comp[nb] == target) continue;
          const double w = energy.lambda * g.edges[e].weight;
          cost += (labels[nb] != label ? w : 0.0) - (labels[nb] != labels[f] ? w : 0.0);
        }
      }
      if (cost < best_cost) {
        best_cost = cost;
        best = c;
      }
    }
    const int label = labels[members[best].front()];
    for (int f : members[target]) labels[f] = label;
  }
}

/// Energy label (cluster) of each part: the cluster of its first face.
inline std::vector<int> part_clusters(const Segmentation& seg, const std::vector<int>& face_clusters) {
  std::vector<int> out(static_cast<std::size_t>(seg.part_count), 0);
  std::vector<char> seen(out.size(), 0);
  for (std::size_t f = 0; f < seg.labels.size(); ++f) {
    const int p = seg.labels[f];
    if (!seen[p]) {
      seen[p] = 1;
      out[p] = face_clusters[f];
    }
  }
  return out;
}

/// Alpha-expansion over GMM probabilities followed by the connectivity pass.
inline Segmentation kway_cut(const DualGraph& g, const Eigen::MatrixXd& probs, const PartitionParams& params) {
  params.validate();
  const auto n = static_cast<Eigen::Index>(g.node_count());
  if (probs.rows() != n) throw ContractError("probability rows do not match face count");
  if (probs.cols() < 1) throw ContractError("need at least one cluster column");
  Segmentation seg;
  seg.params = params;
  LabelEnergy energy{data_costs_from_probabilities(probs, params.p_floor), params.lambda_smooth};
  const int k = static_cast<int>(probs.cols());
  if (params.k == 1 || k == 1) {
    seg.labels.assign(static_cast<std::size_t>(n), 0);
    seg.part_count = n > 0 ? 1 : 0;
    seg.energy = energy.evaluate(g, seg.labels);
    seg.energy_history = {seg.energy};
    seg.part_cluster.assign(static_cast<std::size_t>(seg.part_count), 0);
    return seg;
  }
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Eigen::Index f = 0; f < n; ++f) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < k; ++c) {
      if (probs(f, c) > probs(f, best)) best = c;
    }
    labels[static_cast<std::size_t>(f)] = static_cast<int>(best);
  }
  std::vector<int> label_set(k);
  for (int c = 0; c < k; ++c) label_set[c] = c;
  const std::vector<char> movable(static_cast<std::size_t>(n), 1);
  seg.energy_history = alpha_expansion(g, energy, labels, label_set, movable, params.max_expansion_cycles);
  seg.labels = repair_connectivity(g, energy, labels, params.min_part_faces, &seg.part_count);
  seg.energy = energy.evaluate(g, labels);
  seg.part_cluster = part_clusters(seg, labels);
  return seg;
}

/// Faces whose dual-graph distance to a part boundary is at most `hops`.
inline std::vector<char> boundary_band(const DualGraph& g, const std::vector<int>& labels, int hops) {
  const int n = static_cast<int>(labels.size());
  std::vector<int> dist(n, -1);
  std::queue<int> q;
  for (int f = 0; f < n; ++f) {
    for (const auto& [nb, e] : g.incident[f]) {
      if (labels[nb] != labels[f]) {
        dist[f] = 0;
        q.push(f);
        break;
      }
    }
  }
  while (!q.empty()) {
    const int f = q.front();
    q.pop();
    if (dist[f] >= hops) continue;
    for (const auto& [nb, e] : g.incident[f]) {
      if (dist[nb] < 0) {
        dist[nb] = dist[f] + 1;
        q.push(nb);
      }
    }
  }
  std::vector<char> band(n, 0);
  for (int f = 0; f < n; ++f) band[f] = dist[f] >= 0 ? 1 : 0;
  return band;
}

/// Relative cost, in mean dual-edge weights, of moving a face off its label
/// when no probabilities are supplied.
inline constexpr double kBoundaryAnchor = 0.1;

/// Re-runs alpha-expansion on part labels within 3 hops of a boundary. Data
/// term: -log p of the part's cluster when `probs`/`part_cluster` are given,
/// otherwise a small anchor cost for leaving the current part. Never raises
/// the energy or the part count; returns the input otherwise.
inline Segmentation smooth_boundaries(const DualGraph& g, const Segmentation& seg, const PartitionParams& params,
                                      const Eigen::MatrixXd* probs = nullptr,
                                      const std::vector<int>* part_cluster = nullptr) {
  params.validate();
  if (seg.part_count <= 1 || seg.labels.empty()) return seg;
  const int n = static_cast<int>(seg.labels.size());
  const int parts = seg.part_count;
  LabelEnergy energy;
  energy.lambda = params.lambda_smooth;
  energy.data.resize(n, parts);
  if (probs && part_cluster) {
    const auto costs = data_costs_from_probabilities(*probs, params.p_floor);
    for (int f = 0; f < n; ++f) {
      for (int p = 0; p < parts; ++p) energy.data(f, p) = costs(f, (*part_cluster)[p]);
    }
  } else {
    const double anchor = kBoundaryAnchor * std::max(g.mean_weight(), 1e-12) * std::max(params.lambda_smooth, 1e-12);
    for (int f = 0; f < n; ++f) {
      for (int p = 0; p < parts; ++p) energy.data(f, p) = p == seg.labels[f] ? 0.0 : anchor;
    }
  }
  const auto band = boundary_band(g, seg.labels, 3);
  std::vector<int> present;
  for (int f = 0; f < n; ++f) {
    if (band[f]) present.push_back(seg.labels[f]);
  }
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());

  const double before = energy.evaluate(g, seg.labels);
  std::vector<int> labels = seg.labels;
  alpha_expansion(g, energy, labels, present, band, params.max_expansion_cycles);
  int components = 0;
  repair_connectivity(g, energy, labels, params.min_part_faces, &components);
  const double after = energy.evaluate(g, labels);
  if (after > before + 1e-12 * (1.0 + std::abs(before))) return seg;
  // Keep part ids; a part may vanish but never split.
  std::vector<char> used(parts, 0);
  for (int l : labels) used[l] = 1;
  std::vector<int> remap(parts, -1);
  int next = 0;
  for (int p = 0; p < parts; ++p) {
    if (used[p]) remap[p] = next++;
  }
  if (components != next) return seg;
  Segmentation out = seg;
  for (int f = 0; f < n; ++f) out.labels[f] = remap[labels[f]];
  out.part_count = next;
  if (seg.part_cluster.size() == static_cast<std::size_t>(parts)) {
    out.part_cluster.assign(next, 0);
    for (int p = 0; p < parts; ++p) {
      if (remap[p] >= 0) out.part_cluster[remap[p]] = seg.part_cluster[p];
    }
  }
  if (!(probs && part_cluster)) return out;
  // Keep the reported energy on cluster labels.
  LabelEnergy cluster_energy{data_costs_from_probabilities(*probs, params.p_floor), params.lambda_smooth};
  std::vector<int> clusters(n);
  for (int f = 0; f < n; ++f) clusters[f] = (*part_cluster)[labels[f]];
  out.energy = cluster_energy.evaluate(g, clusters);
  return out;
}

/// Number of dual edges whose faces carry different labels.
inline std::size_t boundary_edge_count(const DualGraph& g, const std::vector<int>& labels) {
  std::size_t c = 0;
  for (const auto& e : g.edges) c += labels[e.a] != labels[e.b] ? 1 : 0;
  return c;
}

// ---------------------------------------------------------------------------
// Serialization and export

inline constexpr int kSegmentationFormatVersion = 1;

inline nlohmann::json segmentation_to_json(const Segmentation& s) {
  nlohmann::json parent = nullptr;
  if (s.parent) parent = {{"labels_hash", s.parent->labels_hash}, {"part", s.parent->part}};
  return {{"format", "nshdf.segmentation"},
          {"version", kSegmentationFormatVersion},
          {"labels", s.labels},
          {"part_count", s.part_count},
          {"part_cluster", s.part_cluster},
          {"params", to_json(s.params)},
          {"energy", s.energy},
          {"depth", s.depth},
          {"parent", parent}};
}

inline Segmentation segmentation_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "nshdf.segmentation") throw ParseError("not a segmentation document");
    if (j.at("version").get<int>() != kSegmentationFormatVersion) throw ParseError("unsupported segmentation version");
    Segmentation s;
    s.labels = j.at("labels").get<std::vector<int>>();
    s.part_count = j.at("part_count").get<int>();
    s.params = partition_params_from_json(j.at("params"));
    s.energy = j.at("energy").get<double>();
    s.depth = j.value("depth", 0);
    if (j.contains("part_cluster")) s.part_cluster = j["part_cluster"].get<std::vector<int>>();
    if (!s.part_cluster.empty() && s.part_cluster.size() != static_cast<std::size_t>(s.part_count)) {
      throw ParseError("part_cluster size does not match part_count");
    }
    if (!j.at("parent").is_null()) {
      s.parent = ParentLink{j["parent"].at("labels_hash").get<std::uint64_t>(), j["parent"].at("part").get<int>()};
    }
    for (int l : s.labels) {
      if (l < 0 || l >= s.part_count) throw ParseError("label outside [0, part_count)");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("segmentation JSON: ") + e.what());
  }
}

/// Distinct colors by golden-ratio hue steps.
inline std::vector<std::array<std::uint8_t, 3>> part_palette(int count) {
  std::vector<std::array<std::uint8_t, 3>> out;
  double hue = 0.11;
  for (int i = 0; i < count; ++i) {
    const double s = 0.65, v = i % 2 == 0 ? 0.95 : 0.75;
    const double h6 = hue * 6.0;
    const int sector = static_cast<int>(h6) % 6;
    const double frac = h6 - std::floor(h6);
    const double p = v * (1 - s), q = v * (1 - s * frac), t = v * (1 - s * (1 - frac));
    double r = v, g = t, b = p;
    switch (sector) {
      case 1: r = q, g = v, b = p; break;
      case 2: r = p, g = v, b = t; break;
      case 3: r = p, g = q, b = v; break;
      case 4: r = t, g = p, b = v; break;
      case 5: r = v, g = p, b = q; break;
      default: break;
    }
    out.push_back({static_cast<std::uint8_t>(std::lround(r * 255)), static_cast<std::uint8_t>(std::lround(g * 255)),
                   static_cast<std::uint8_t>(std::lround(b * 255))});
    hue = std::fmod(hue + 0.618033988749895, 1.0);
  }
  return out;
}

inline std::string save_segmentation_ply(const Mesh& mesh, const Segmentation& seg, bool binary = true) {
  if (seg.labels.size() != mesh.faces.size()) throw ContractError("segmentation does not match mesh");
  const auto palette = part_palette(seg.part_count);
  std::vector<std::array<std::uint8_t, 3>> colors(mesh.faces.size());
  for (std::size_t f = 0; f < colors.size(); ++f) colors[f] = palette[seg.labels[f]];
  PlyWriteOptions opt;
  opt.binary = binary;
  opt.face_colors = colors;
  return save_ply(mesh, opt);
}

}  // namespace nshdf
