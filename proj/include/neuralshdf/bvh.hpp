#pragma once

// Bounding-volume hierarchy over mesh triangles for ray queries.

#include <algorithm>
#include <cmath>
#include <array>
#include <limits>
#include <optional>
#include <vector>

#include "neuralshdf/mesh.hpp"

namespace nshdf {

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit length
};

struct RayHit {
  double t = 0;
  int face = -1;
};

class RayAccel {
 public:
  struct Node {
    Aabb box;
    int left = -1;   // child indices; -1 for leaves
    int right = -1;
    int first = 0;   // leaf range into the triangle order
    int count = 0;
    bool is_leaf() const { return left < 0; }
  };

  RayAccel() = default;

  explicit RayAccel(const Mesh& mesh, int leaf_size = 4) : leaf_size_(std::max(1, leaf_size)) {
    const auto n = mesh.faces.size();
    v0_.resize(n);
    e1_.resize(n);
    e2_.resize(n);
    normals_.resize(n);
    std::vector<Aabb> boxes(n);
    std::vector<Vec3> centers(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& f = mesh.faces[i];
      const Vec3& a = mesh.vertices[f[0]];
      const Vec3& b = mesh.vertices[f[1]];
      const Vec3& c = mesh.vertices[f[2]];
      v0_[i] = a;
      e1_[i] = b - a;
      e2_[i] = c - a;
      const Vec3 nrm = e1_[i].cross(e2_[i]);
      const double len = nrm.norm();
      normals_[i] = len > 0 ? Vec3(nrm / len) : Vec3::Zero();
      area_ += 0.5 * len;
      boxes[i].extend(a);
      boxes[i].extend(b);
      boxes[i].extend(c);
      centers[i] = (a + b + c) / 3.0;
      bounds_.extend(boxes[i]);
    }
    order_.resize(n);
    for (std::size_t i = 0; i < n; ++i) order_[i] = static_cast<int>(i);
    if (n == 0) return;
    nodes_.reserve(2 * n / leaf_size_ + 1);
    nodes_.push_back({});
    build(0, 0, static_cast<int>(n), boxes, centers);
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  /// Triangle ids in leaf order; leaf [first, first+count) slices index this.
  const std::vector<int>& triangle_order() const { return order_; }
  const Aabb& bounds() const { return bounds_; }
  std::size_t triangle_count() const { return order_.size(); }
  const Vec3& face_normal(int face) const { return normals_[face]; }
  /// Square root of the total surface area; unlike the box diagonal it does not change under rotation.
  double surface_scale() const { return std::sqrt(area_); }

  /// Closest hit with t in (tmin, tmax) among faces accepted by `accept(face, t)`.
  template <typename Accept>
  std::optional<RayHit> closest_hit(const Ray& ray, double tmin, double tmax, Accept&& accept) const {
    if (nodes_.empty()) return std::nullopt;
    const Vec3 inv_dir(1.0 / ray.direction.x(), 1.0 / ray.direction.y(), 1.0 / ray.direction.z());
    RayHit best{tmax, -1};
    std::array<int, 256> stack;
    int sp = 0;
    stack[sp++] = 0;
    while (sp > 0) {
      const Node& node = nodes_[stack[--sp]];
      if (!slab(node.box, ray.origin, inv_dir, tmin, best.t)) continue;
      if (node.is_leaf()) {
        for (int i = node.first; i < node.first + node.count; ++i) {
          const int f = order_[i];
          const auto t = hit_triangle(ray, f, tmin);
          if (t && *t < best.t && accept(f, *t)) best = {*t, f};
        }
        continue;
      }
      // Visit the nearer child first.
      const Node& l = nodes_[node.left];
      const Node& r = nodes_[node.right];
      const double dl = entry_distance(l.box, ray.origin, inv_dir);
      const double dr = entry_distance(r.box, ray.origin, inv_dir);
      if (dl <= dr) {
        stack[sp++] = node.right;
        stack[sp++] = node.left;
      } else {
        stack[sp++] = node.left;
        stack[sp++] = node.right;
      }
    }
    if (best.face < 0) return std::nullopt;
    return best;
  }

  std::optional<RayHit> closest_hit(const Ray& ray, double tmin = 0.0,
                                    double tmax = std::numeric_limits<double>::infinity()) const {
    return closest_hit(ray, tmin, tmax, [](int, double) { return true; });
  }

 private:
  // Moller-Trumbore on the precomputed edges.
  std::optional<double> hit_triangle(const Ray& ray, int f, double tmin) const {
    const Vec3 p = ray.direction.cross(e2_[f]);
    const double det = e1_[f].dot(p);
    if (std::abs(det) < 1e-300) return std::nullopt;
    const double inv = 1.0 / det;
    const Vec3 s = ray.origin - v0_[f];
    const double u = s.dot(p) * inv;
    if (u < 0.0 || u > 1.0) return std::nullopt;
    const Vec3 q = s.cross(e1_[f]);
    const double v = ray.direction.dot(q) * inv;
    if (v < 0.0 || u + v > 1.0) return std::nullopt;
    const double t = e2_[f].dot(q) * inv;
    if (!(t > tmin)) return std::nullopt;
    return t;
  }

  static bool slab(const Aabb& b, const Vec3& o, const Vec3& inv, double tmin, double tmax) {
    for (int k = 0; k < 3; ++k) {
      double t0 = (b.lo[k] - o[k]) * inv[k];
      double t1 = (b.hi[k] - o[k]) * inv[k];
      if (t0 > t1) std::swap(t0, t1);
      // NaN from 0 * inf (ray in a slab plane) keeps the interval unchanged.
      tmin = t0 > tmin ? t0 : tmin;
      tmax = t1 < tmax ? t1 : tmax;
      if (tmin > tmax) return false;
    }
    return true;
  }

  static double entry_distance(const Aabb& b, const Vec3& o, const Vec3& inv) {
    double tmin = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
      double t0 = (b.lo[k] - o[k]) * inv[k];
      double t1 = (b.hi[k] - o[k]) * inv[k];
      if (t0 > t1) std::swap(t0, t1);
      tmin = t0 > tmin ? t0 : tmin;
    }
    return tmin;
  }

  void build(int node_index, int begin, int end, const std::vector<Aabb>& boxes,
             const std::vector<Vec3>& centers) {
    Aabb box, cbox;
    for (int i = begin; i < end; ++i) {
      box.extend(boxes[order_[i]]);
      cbox.extend(centers[order_[i]]);
    }
    nodes_[node_index].box = box;
    const int count = end - begin;
    if (count <= leaf_size_) {
      make_leaf(node_index, begin, count);
      return;
    }
    // Binned SAH split along the longest centroid axis.
    constexpr int kBins = 16;
    const Vec3 extent = cbox.hi - cbox.lo;
    int axis = 0;
    if (extent[1] > extent[axis]) axis = 1;
    if (extent[2] > extent[axis]) axis = 2;
    if (!(extent[axis] > 0)) {
      // All centroids coincide: split by count.
      const int mid = begin + count / 2;
      split_children(node_index, begin, mid, end, boxes, centers);
      return;
    }
    std::array<Aabb, kBins> bin_box;
    std::array<int, kBins> bin_count{};
    auto bin_of = [&](int tri) {
      const int b = static_cast<int>(kBins * (centers[tri][axis] - cbox.lo[axis]) / extent[axis]);
      return std::clamp(b, 0, kBins - 1);
    };
    for (int i = begin; i < end; ++i) {
      const int b = bin_of(order_[i]);
      ++bin_count[b];
      bin_box[b].extend(boxes[order_[i]]);
    }
    auto area = [](const Aabb& b) {
      if (b.empty()) return 0.0;
      const Vec3 d = b.hi - b.lo;
      return d.x() * d.y() + d.y() * d.z() + d.z() * d.x();
    };
    std::array<double, kBins - 1> left_cost{};
    Aabb acc;
    int n_left = 0;
    for (int s = 0; s < kBins - 1; ++s) {
      acc.extend(bin_box[s]);
      n_left += bin_count[s];
      left_cost[s] = area(acc) * n_left;
    }
    acc = Aabb{};
    int n_right = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    int best_split = -1;
    for (int s = kBins - 1; s > 0; --s) {
      acc.extend(bin_box[s]);
      n_right += bin_count[s];
      const double cost = left_cost[s - 1] + area(acc) * n_right;
      if (n_right > 0 && n_right < count && cost < best_cost) {
        best_cost = cost;
        best_split = s;
      }
    }
    int mid;
    if (best_split < 0) {
      mid = begin + count / 2;
      std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                       [&](int a, int b) { return centers[a][axis] < centers[b][axis]; });
    } else {
      const auto it = std::partition(order_.begin() + begin, order_.begin() + end,
                                     [&](int tri) { return bin_of(tri) < best_split; });
      mid = static_cast<int>(it - order_.begin());
    }
    split_children(node_index, begin, mid, end, boxes, centers);
  }

  void split_children(int node_index, int begin, int mid, int end, const std::vector<Aabb>& boxes,
                      const std::vector<Vec3>& centers) {
    const int left = static_cast<int>(nodes_.size());
    nodes_.push_back({});
    nodes_.push_back({});
    nodes_[node_index].left = left;
    nodes_[node_index].right = left + 1;
    build(left, begin, mid, boxes, centers);
    build(left + 1, mid, end, boxes, centers);
  }

  void make_leaf(int node_index, int begin, int count) {
    nodes_[node_index].first = begin;
    nodes_[node_index].count = count;
  }

  int leaf_size_ = 4;
  std::vector<Node> nodes_;
  std::vector<int> order_;
  std::vector<Vec3> v0_, e1_, e2_, normals_;
  Aabb bounds_;
  double area_ = 0;
};

inline RayAccel build_accel(const Mesh& mesh) { return RayAccel(mesh); }

}  // namespace nshdf
