#pragma once

// Uniform hash grid over points for radius and k-nearest queries.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "neuralshdf/errors.hpp"
#include "neuralshdf/mesh.hpp"

namespace nshdf {

class PointGrid {
 public:
  using Cell = std::array<std::int64_t, 3>;

  PointGrid(double cell_size) : cell_(cell_size) {
    if (!(cell_size > 0)) throw ContractError("grid cell size must be > 0");
  }

  PointGrid(std::span<const Vec3> points, double cell_size) : PointGrid(cell_size) {
    for (std::size_t i = 0; i < points.size(); ++i) insert(points[i], static_cast<int>(i));
  }

  double cell_size() const { return cell_; }
  std::size_t size() const { return points_.size(); }

  Cell cell_of(const Vec3& p) const {
    return {static_cast<std::int64_t>(std::floor(p.x() / cell_)), static_cast<std::int64_t>(std::floor(p.y() / cell_)),
            static_cast<std::int64_t>(std::floor(p.z() / cell_))};
  }

  void insert(const Vec3& p, int id) {
    points_.emplace_back(p, id);
    cells_[key(cell_of(p))].push_back(static_cast<int>(points_.size() - 1));
  }

  /// Calls fn(id, squared distance) for every stored point within `radius` of `p` (inclusive).
  template <typename Fn>
  void for_each_within(const Vec3& p, double radius, Fn&& fn) const {
    const double r2 = radius * radius;
    const Cell lo = cell_of(p - Vec3::Constant(radius));
    const Cell hi = cell_of(p + Vec3::Constant(radius));
    for (auto x = lo[0]; x <= hi[0]; ++x) {
      for (auto y = lo[1]; y <= hi[1]; ++y) {
        for (auto z = lo[2]; z <= hi[2]; ++z) {
          const auto it = cells_.find(key({x, y, z}));
          if (it == cells_.end()) continue;
          for (int slot : it->second) {
            const double d2 = (points_[slot].first - p).squaredNorm();
            if (d2 <= r2) fn(points_[slot].second, d2);
          }
        }
      }
    }
  }

  /// True when some stored point lies strictly closer than `radius` to `p`.
  bool any_closer(const Vec3& p, double radius) const {
    const double r2 = radius * radius;
    bool found = false;
    for_each_within(p, radius, [&](int, double d2) { found = found || d2 < r2; });
    return found;
  }

  /// Ids within `radius`, ascending.
  std::vector<int> within(const Vec3& p, double radius) const {
    std::vector<int> out;
    for_each_within(p, radius, [&](int id, double) { out.push_back(id); });
    std::sort(out.begin(), out.end());
    return out;
  }

  /// The k nearest stored ids to `p` (ties broken by id), nearest first.
  std::vector<int> nearest(const Vec3& p, std::size_t k) const {
    k = std::min(k, points_.size());
    std::vector<std::pair<double, int>> found;
    if (k == 0) return {};
    // Grow the search radius until the k-th candidate is certainly inside it.
    double radius = cell_;
    while (true) {
      found.clear();
      for_each_within(p, radius, [&](int id, double d2) { found.emplace_back(d2, id); });
      if (found.size() >= k || found.size() == points_.size()) break;
      radius *= 2.0;
    }
    std::partial_sort(found.begin(), found.begin() + static_cast<std::ptrdiff_t>(k), found.end());
    std::vector<int> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = found[i].second;
    return out;
  }

 private:
  static std::uint64_t key(const Cell& c) {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (auto v : c) h = (h ^ static_cast<std::uint64_t>(v)) * 0x100000001b3ULL + (h >> 29);
    return h;
  }

  double cell_;
  std::vector<std::pair<Vec3, int>> points_;
  std::unordered_map<std::uint64_t, std::vector<int>> cells_;
};

/// k nearest neighbors of every point among the others (self excluded).
inline std::vector<std::vector<int>> knn_graph(std::span<const Vec3> points, std::size_t k) {
  if (points.empty()) return {};
  Aabb box;
  for (const auto& p : points) box.extend(p);
  const double volume_side = std::max(box.diagonal(), 1e-12) / std::cbrt(static_cast<double>(points.size()));
  const PointGrid grid(points, std::max(volume_side, 1e-12));
  std::vector<std::vector<int>> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto ids = grid.nearest(points[i], k + 1);
    ids.erase(std::remove(ids.begin(), ids.end(), static_cast<int>(i)), ids.end());
    if (ids.size() > k) ids.resize(k);
    out[i] = std::move(ids);
  }
  return out;
}

}  // namespace nshdf
