#pragma once

// Pose-independent reference frame of a surface from its area-weighted
// second moments.

#include <Eigen/Eigenvalues>

#include "neuralshdf/mesh.hpp"

namespace nshdf {

struct CanonicalFrame {
  Vec3 center = Vec3::Zero();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // rows are the principal axes
  double scale = 1.0;                                      // box diagonal in the frame

  Vec3 to_local(const Vec3& p) const { return rotation * (p - center); }
  Vec3 rotate(const Vec3& v) const { return rotation * v; }
};

/// Principal axes of the surface, largest spread first. Axis signs follow the
/// third moment, and the third axis completes a right-handed frame, so any
/// proper rigid motion of the input yields the same local coordinates. Shapes
/// with repeated second moments (spheres, cubes) have no unique frame.
inline CanonicalFrame canonical_frame(const Mesh& mesh) {
  CanonicalFrame frame;
  double area = 0;
  Vec3 first = Vec3::Zero();
  for (const auto& f : mesh.faces) {
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    const double A = 0.5 * (b - a).cross(c - a).norm();
    area += A;
    first += A * (a + b + c) / 3.0;
  }
  if (!(area > 0)) return frame;
  frame.center = first / area;
  // Exact triangle second moment: A/12 (sum v v^T + (sum v)(sum v)^T), centered.
  Eigen::Matrix3d second = Eigen::Matrix3d::Zero();
  for (const auto& f : mesh.faces) {
    const Vec3 a = mesh.vertices[f[0]] - frame.center;
    const Vec3 b = mesh.vertices[f[1]] - frame.center;
    const Vec3 c = mesh.vertices[f[2]] - frame.center;
    const double A = 0.5 * (b - a).cross(c - a).norm();
    const Vec3 s = a + b + c;
    second += A / 12.0 * (a * a.transpose() + b * b.transpose() + c * c.transpose() + s * s.transpose());
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(second);
  Eigen::Matrix3d axes;
  for (int k = 0; k < 2; ++k) axes.row(k) = eig.eigenvectors().col(2 - k).transpose();
  // Orient the first two axes by the sign of the area-weighted third moment.
  for (int k = 0; k < 2; ++k) {
    double third = 0;
    for (const auto& f : mesh.faces) {
      const Vec3& a = mesh.vertices[f[0]];
      const Vec3& b = mesh.vertices[f[1]];
      const Vec3& c = mesh.vertices[f[2]];
      const double A = 0.5 * (b - a).cross(c - a).norm();
      const double x = axes.row(k).dot((a + b + c) / 3.0 - frame.center);
      third += A * x * x * x;
    }
    if (third < 0) axes.row(k) *= -1.0;
  }
  axes.row(2) = axes.row(0).cross(axes.row(1));
  frame.rotation = axes;
  Aabb box;
  for (const auto& v : mesh.vertices) box.extend(frame.to_local(v));
  frame.scale = std::max(box.diagonal(), 1e-300);
  return frame;
}

/// The mesh expressed in its canonical frame (unit scale is not applied).
inline Mesh to_canonical(const Mesh& mesh, const CanonicalFrame& frame) {
  Mesh out = mesh;
  for (auto& v : out.vertices) v = frame.to_local(v);
  for (auto& n : out.normals) n = frame.rotate(n);
  return out;
}

}  // namespace nshdf
