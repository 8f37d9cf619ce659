#include <gtest/gtest.h>

#include <numbers>

#include "neuralshdf/bvh.hpp"
#include "neuralshdf/primitives.hpp"
#include "neuralshdf/shdf.hpp"
#include "oracles.hpp"

using namespace nshdf;

namespace {

Vec3 random_unit(Rng& rng) {
  Vec3 v(rng.normal(), rng.normal(), rng.normal());
  return v.normalized();
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  return Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal()).normalized().toRotationMatrix();
}

ShdfParams narrow_single_ray() {
  ShdfParams p;
  p.cone_half_angle = 1e-6;
  p.rays_per_point = 1;
  return p;
}

}  // namespace

TEST(RayAccel, SingleTriangleOneLeaf) {
  const Mesh m = primitives::triangle();
  const RayAccel accel(m);
  ASSERT_EQ(accel.nodes().size(), 1u);
  EXPECT_TRUE(accel.nodes()[0].is_leaf());
  const auto hit = accel.closest_hit({Vec3(0.2, 0.2, 1), Vec3(0, 0, -1)});
  ASSERT_TRUE(hit);
  EXPECT_EQ(hit->face, 0);
  EXPECT_NEAR(hit->t, 1.0, 1e-15);
}

TEST(RayAccel, EveryTriangleInExactlyOneLeaf) {
  const Mesh m = primitives::icosphere(4);
  const RayAccel accel(m);
  std::vector<int> seen(m.faces.size(), 0);
  for (const auto& node : accel.nodes()) {
    if (!node.is_leaf()) continue;
    for (int i = node.first; i < node.first + node.count; ++i) ++seen[accel.triangle_order()[i]];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(RayAccel, RayFromCubeCenterExitsThroughOneTriangle) {
  const Mesh m = primitives::cube();
  const RayAccel accel(m);
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const Vec3 d = random_unit(rng);
    const auto brute = oracle::brute_force_hit(m, Vec3(0.5, 0.5, 0.5), d);
    EXPECT_EQ(brute.count, 1);
    const auto hit = accel.closest_hit({Vec3(0.5, 0.5, 0.5), d});
    ASSERT_TRUE(hit);
    EXPECT_EQ(hit->face, brute.face);
    EXPECT_GT(accel.face_normal(hit->face).dot(d), 0.0) << "exit face faces away from the center";
  }
}

TEST(RayAccel, AgreesWithBruteForceOnRandomRays) {
  const Mesh m = primitives::icosphere(5);  // 20480 triangles
  const RayAccel accel(m);
  Rng rng(5);
  int hits = 0;
  for (int i = 0; i < 1000; ++i) {
    const Vec3 o(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
    const Vec3 d = random_unit(rng);
    const auto brute = oracle::brute_force_hit(m, o, d);
    const auto hit = accel.closest_hit({o, d});
    ASSERT_EQ(hit.has_value(), brute.face >= 0) << "ray " << i;
    if (!hit) continue;
    ++hits;
    EXPECT_NEAR(hit->t, brute.t, 1e-9);
  }
  EXPECT_GT(hits, 200);
}

TEST(ShdfAtPoint, NarrowConeOnSphereGivesDiameter) {
  const Mesh m = primitives::icosphere(5);
  const RayAccel accel(m);
  const auto g = face_geometry(m);
  Rng rng(1);
  for (int f : {0, 100, 5000, 20000}) {
    const auto v = shdf_at_point(accel, g.centroids[f], -g.normals[f], narrow_single_ray(), rng);
    ASSERT_TRUE(v);
    // The chord through a flat face is twice the face plane's distance to the center.
    EXPECT_NEAR(*v, 2.0 * g.centroids[f].dot(g.normals[f]), 1e-6);
    EXPECT_NEAR(*v, 2.0, 2e-3);
  }
}

TEST(ShdfAtPoint, NarrowConeOnSlabGivesThickness) {
  Mesh slab = primitives::cube();
  const double d = 0.37;
  for (auto& v : slab.vertices) v = Vec3((v.x() - 0.5) * 200, (v.y() - 0.5) * 200, v.z() * d);
  const RayAccel accel(slab);
  Rng rng(2);
  const auto v = shdf_at_point(accel, Vec3(3, -4, d), Vec3(0, 0, -1), narrow_single_ray(), rng);
  ASSERT_TRUE(v);
  EXPECT_NEAR(*v, d, 1e-9);
}

TEST(ShdfAtPoint, WideConeOnSphereMatchesDenseOracle) {
  const Mesh m = primitives::icosphere(5);
  const RayAccel accel(m);
  const auto g = face_geometry(m);
  const double dense = oracle::dense_sphere_shdf(100000, std::numbers::pi / 3, 99);
  const ShdfParams params;
  for (int f : {7, 900, 12345}) {
    Rng rng(derive_seed(4, f));
    const auto v = shdf_at_point(accel, g.centroids[f], -g.normals[f], params, rng);
    ASSERT_TRUE(v);
    EXPECT_NEAR(*v, dense, 0.05 * dense);
  }
}

TEST(ShdfAtPoint, AllRaysMissGivesNoMeasure) {
  const Mesh m = primitives::triangle();
  const RayAccel accel(m);
  Rng rng(0);
  EXPECT_FALSE(shdf_at_point(accel, Vec3(0.2, 0.2, 0), Vec3(0, 0, -1), ShdfParams{}, rng));
}

TEST(ShdfAtPoint, AggregateMatchesIndependentImplementation) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(40));
    std::vector<double> len(n), ang(n);
    for (int i = 0; i < n; ++i) {
      len[i] = rng.uniform(0.1, 5.0);
      ang[i] = rng.uniform(0.0, 1.0);
    }
    const auto v = aggregate_ray_lengths(len, ang, 1.0, ShdfAggregator::WeightedMean);
    ASSERT_TRUE(v);
    EXPECT_NEAR(*v, oracle::aggregate(len, ang, 1.0), 1e-12);
  }
}

TEST(ShdfField, IcosphereValuesAgreeWithDenseAndQuadratureOracles) {
  const Mesh m = primitives::icosphere(3);
  const RayAccel accel(m);
  const auto field = compute_shdf_field(m, accel, ShdfParams{});
  ASSERT_EQ(field.values.size(), m.faces.size());
  const double dense = oracle::dense_sphere_shdf(100000, std::numbers::pi / 3, 7);
  const double analytic = oracle::cone_averaged_sphere_chord(std::numbers::pi / 3);
  EXPECT_NEAR(dense, analytic, 0.01 * analytic);
  for (double v : field.values) EXPECT_NEAR(v, dense, 0.10 * dense);
  EXPECT_NEAR(median(field.values), analytic, 0.05 * analytic);
}

TEST(ShdfField, CubeValuesDecreaseTowardCorners) {
  const Mesh m = primitives::cube(6);
  const RayAccel accel(m);
  const auto field = compute_shdf_field(m, accel, ShdfParams{});
  const auto g = face_geometry(m);
  // Classify by how many coordinates of the centroid sit near a cube boundary.
  double sums[4] = {0, 0, 0, 0};
  int counts[4] = {0, 0, 0, 0};
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    int near = 0;
    for (int k = 0; k < 3; ++k) {
      const double c = g.centroids[f][k];
      if (c < 0.2 || c > 0.8) ++near;
    }
    sums[near] += field.values[f];
    ++counts[near];
    EXPECT_GT(field.values[f], 0.0);
    EXPECT_LE(field.values[f], std::sqrt(3.0));
  }
  // near == 1: face interior, 2: along an edge, 3: at a corner.
  const double interior = sums[1] / counts[1], edge = sums[2] / counts[2], corner = sums[3] / counts[3];
  EXPECT_GT(interior, edge);
  EXPECT_GT(edge, corner);
}

TEST(ShdfField, OpenTriangleIsFieldError) {
  const Mesh m = primitives::triangle();
  EXPECT_THROW(compute_shdf_field(m, RayAccel(m), ShdfParams{}), FieldError);
}

TEST(ShdfField, UnmeasuredFacesAreFilledFromNeighbors) {
  // Open box: faces of the removed top see no far wall for rays escaping upward.
  Mesh m = primitives::cube(4);
  const auto g = face_geometry(m);
  std::vector<Face> kept;
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    if (g.centroids[f].z() < 0.999) kept.push_back(m.faces[f]);
  }
  m.faces = kept;
  const RayAccel accel(m);
  const auto field = compute_shdf_field(m, accel, ShdfParams{});
  for (double v : field.values) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GT(v, 0.0);
  }
}

TEST(ShdfField, RigidMotionInvariance) {
  const Mesh m = primitives::bumpy_dumbbell(1);
  Rng rng(8);
  const Mesh moved = primitives::transformed(m, random_rotation(rng), Vec3(3, -2, 7));
  const auto a = compute_shdf_field(m, RayAccel(m), ShdfParams{});
  const auto b = compute_shdf_field(moved, RayAccel(moved), ShdfParams{});
  double worst = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) worst = std::max(worst, std::abs(a.values[i] - b.values[i]));
  EXPECT_LT(worst, 1e-6);
}

TEST(ShdfField, ScalesLinearlyAndNormalizedIsScaleInvariant) {
  const Mesh m = primitives::dumbbell();
  const Mesh big = primitives::scaled(m, 3.5);
  const ShdfParams p;
  const auto a = compute_shdf_field(m, RayAccel(m), p);
  const auto b = compute_shdf_field(big, RayAccel(big), p);
  const auto na = normalize_log(a, p.normalization_alpha);
  const auto nb = normalize_log(b, p.normalization_alpha);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    EXPECT_NEAR(b.values[i], 3.5 * a.values[i], 1e-6 * b.values[i]);
    EXPECT_NEAR(na.values[i], nb.values[i], 1e-6);
  }
}

TEST(NormalizeLog, EndpointsMidpointAndConstant) {
  ScalarField f;
  f.values = {2.0, 3.0, 4.0};
  for (double alpha : {0.5, 4.0, 100.0}) {
    const auto n = normalize_log(f, alpha);
    EXPECT_DOUBLE_EQ(n.values[0], 0.0);
    EXPECT_DOUBLE_EQ(n.values[2], 1.0);
    EXPECT_TRUE(n.normalized);
  }
  EXPECT_NEAR(normalize_log(f, 4.0).values[1], std::log(3.0) / std::log(5.0), 1e-15);
  EXPECT_NEAR(normalize_log(f, 4.0).values[1], 0.6826, 1e-4);

  ScalarField c;
  c.values = {1.5, 1.5, 1.5};
  const auto nc = normalize_log(c, 4.0);
  EXPECT_TRUE(nc.constant);
  for (double v : nc.values) EXPECT_EQ(v, 0.0);
}

TEST(NormalizeLog, PreservesOrderingForAnyAlpha) {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    ScalarField f;
    for (int i = 0; i < 50; ++i) f.values.push_back(rng.uniform(0.0, 10.0));
    const double alpha = std::exp(rng.uniform(-5.0, 5.0));
    const auto n = normalize_log(f, alpha);
    for (int i = 0; i < 50; ++i) {
      EXPECT_GE(n.values[i], 0.0);
      EXPECT_LE(n.values[i], 1.0);
      for (int j = 0; j < 50; ++j) {
        if (f.values[i] < f.values[j]) EXPECT_LE(n.values[i], n.values[j]);
      }
    }
  }
}

TEST(SmoothAnisotropic, ZeroIterationsAndConstantFieldsAreFixed) {
  const Mesh m = primitives::icosphere(2);
  const auto adj = build_adjacency(m);
  ScalarField f;
  Rng rng(4);
  for (std::size_t i = 0; i < m.faces.size(); ++i) f.values.push_back(rng.uniform());
  EXPECT_EQ(smooth_anisotropic(f, m, adj, 0, 0.1).values, f.values);
  ScalarField c;
  c.values.assign(m.faces.size(), 0.42);
  const auto sc = smooth_anisotropic(c, m, adj, 7, 0.1);
  for (double v : sc.values) EXPECT_DOUBLE_EQ(v, 0.42);
}

TEST(SmoothAnisotropic, StepIsPreservedForSmallSigmaAndBlurredForLarge) {
  const Mesh strip = primitives::grid(20, 4, 20.0, 4.0);
  const auto adj = build_adjacency(strip);
  const auto g = face_geometry(strip);
  ScalarField f;
  for (const auto& c : g.centroids) f.values.push_back(c.x() < 10 ? 0.2 : 0.8);
  const auto sharp = smooth_anisotropic(f, strip, adj, 5, 0.05);
  for (std::size_t i = 0; i < f.values.size(); ++i) EXPECT_LT(std::abs(sharp.values[i] - f.values[i]), 0.01);

  const double mean = 0.5;
  const auto blur = smooth_anisotropic(f, strip, adj, 2000, 10.0);
  for (double v : blur.values) EXPECT_NEAR(v, mean, 0.02);
  EXPECT_LT(blur.max() - blur.min(), smooth_anisotropic(f, strip, adj, 20, 10.0).max() -
                                         smooth_anisotropic(f, strip, adj, 20, 10.0).min());
}

TEST(SmoothAnisotropic, OutputStaysWithinInputRange) {
  const Mesh m = primitives::torus(2, 0.7, 30, 14);
  const auto adj = build_adjacency(m);
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    ScalarField f;
    for (std::size_t i = 0; i < m.faces.size(); ++i) f.values.push_back(rng.uniform(-3.0, 5.0));
    const auto s = smooth_anisotropic(f, m, adj, 1 + trial, rng.uniform(0.01, 3.0));
    EXPECT_GE(s.min(), f.min());
    EXPECT_LE(s.max(), f.max());
  }
}

TEST(FieldJson, RoundTripAndVersionCheck) {
  ScalarField f;
  f.domain = FieldDomain::PerSample;
  f.provenance = FieldProvenance::Predicted;
  f.normalized = true;
  f.values = {0.1, 1.0 / 3.0, 0.9};
  const auto j = field_to_json(f);
  const auto back = field_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.values, f.values);
  EXPECT_EQ(back.domain, FieldDomain::PerSample);
  EXPECT_EQ(back.provenance, FieldProvenance::Predicted);
  auto bad = j;
  bad["version"] = 99;
  EXPECT_THROW(field_from_json(bad), ParseError);
}
