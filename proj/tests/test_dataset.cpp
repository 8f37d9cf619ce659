#include <gtest/gtest.h>

#include <filesystem>

#include "neuralshdf/dataset.hpp"
#include "neuralshdf/primitives.hpp"
#include "oracles.hpp"

using namespace nshdf;

namespace {

double mean_vertex_distance(const Mesh& a, const Mesh& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.vertices.size(); ++i) s += (a.vertices[i] - b.vertices[i]).norm();
  return s / static_cast<double>(a.vertices.size());
}

double total_area(const Mesh& m) {
  double a = 0;
  for (const auto& f : m.faces) a += 0.5 * face_normal_unnormalized(m, f).norm();
  return a;
}

}  // namespace

TEST(Variants, ZeroDisplacementIsIdentity) {
  const Mesh base = primitives::icosphere(2);
  DeformTemplate t;
  t.displacement_max = 0;
  t.bend_angle_max = 0;
  const auto variants = generate_variants(base, t, 3, 1);
  ASSERT_EQ(variants.size(), 3u);
  for (const auto& v : variants) {
    EXPECT_EQ(v.faces, base.faces);
    EXPECT_EQ(mean_vertex_distance(v, base), 0.0);
  }
}

TEST(Variants, KeepConnectivityAndDiffer) {
  const Mesh base = primitives::icosphere(3);
  const auto variants = generate_variants(base, DeformTemplate{}, 10, 42);
  ASSERT_EQ(variants.size(), 10u);
  for (const auto& v : variants) {
    EXPECT_EQ(v.vertices.size(), base.vertices.size());
    EXPECT_EQ(v.faces, base.faces);
    EXPECT_TRUE(deformation_is_valid(base, v));
  }
  for (std::size_t i = 0; i < variants.size(); ++i) {
    for (std::size_t j = i + 1; j < variants.size(); ++j) {
      EXPECT_GT(mean_vertex_distance(variants[i], variants[j]), 1e-3) << i << "," << j;
    }
  }
  const auto again = generate_variants(base, DeformTemplate{}, 10, 42);
  for (std::size_t i = 0; i < variants.size(); ++i) EXPECT_EQ(again[i].vertices, variants[i].vertices);
}

TEST(Variants, HandleDisplacementIsBounded) {
  const Mesh base = primitives::icosphere(1);
  DeformSpec spec;
  spec.handles.push_back({Vec3(1, 0, 0), 0.5, Vec3(0, 0, 0.3 * bbox_diagonal(base) * 1.01), 2});
  EXPECT_THROW(apply_deform(base, spec), ContractError);
  spec.handles[0].displacement *= 0.5;
  const Mesh m = apply_deform(base, spec);
  // Only vertices inside the handle radius move, and the center moves by the full vector.
  for (std::size_t i = 0; i < base.vertices.size(); ++i) {
    const double d = (base.vertices[i] - spec.handles[0].center).norm();
    if (d >= 0.5) EXPECT_EQ(m.vertices[i], base.vertices[i]);
    if (d == 0) EXPECT_NEAR((m.vertices[i] - base.vertices[i]).norm(), spec.handles[0].displacement.norm(), 1e-12);
  }
}

TEST(Variants, BendRotatesTheRegionRigidly) {
  const Mesh base = primitives::capped_cylinder(0.3, 4.0, 16, 2, 20);
  DeformSpec spec;
  BendSpec b;
  b.pivot = Vec3(2, 0, 0);
  b.angle = 0.5;
  b.blend = 0.5;
  spec.bends.push_back(b);
  const Mesh m = apply_deform(base, spec);
  const Eigen::AngleAxisd rot(0.5, Vec3::UnitZ());
  for (std::size_t i = 0; i < base.vertices.size(); ++i) {
    const Vec3& v = base.vertices[i];
    if (v.x() <= 2) {
      EXPECT_EQ(m.vertices[i], v);
    } else if (v.x() >= 2.5) {
      EXPECT_LT((m.vertices[i] - (b.pivot + rot * (v - b.pivot))).norm(), 1e-12);
    }
  }
}

TEST(Tessellate, FaceCountsAndSurface) {
  EXPECT_EQ(tessellate(primitives::triangle(), 1).faces.size(), 4u);
  const Mesh cube = primitives::cube();
  EXPECT_EQ(tessellate(cube, 0).faces, cube.faces);
  EXPECT_EQ(tessellate(cube, 0).vertices, cube.vertices);
  const Mesh t2 = tessellate(cube, 2);
  EXPECT_EQ(t2.faces.size(), 192u);
  EXPECT_NEAR(total_area(t2), total_area(cube), 1e-12);
  EXPECT_LT(oracle::one_sided_hausdorff(t2, cube), 1e-12);
  const auto adj = build_adjacency(t2);
  const auto report = validate_manifold(t2, adj);
  EXPECT_TRUE(report.is_closed);
  EXPECT_EQ(report.genus(), 0);
  EXPECT_THROW(tessellate(cube, -1), ContractError);
}

TEST(RemeshPerturb, ZeroIsIdentity) {
  const Mesh m = primitives::icosphere(2);
  const Mesh out = remesh_perturb(m, 0, 0, 5);
  EXPECT_EQ(out.vertices, m.vertices);
  EXPECT_EQ(out.faces, m.faces);
  EXPECT_THROW(remesh_perturb(m, 0.5, 0, 1), ContractError);
}

TEST(RemeshPerturb, StaysManifoldAndClose) {
  const Mesh sphere = primitives::icosphere(3);
  const double edge = mean_edge_length(sphere);
  const Mesh jittered = remesh_perturb(sphere, 0.2, 0, 9);
  const double h = std::max(oracle::one_sided_hausdorff(jittered, sphere), oracle::one_sided_hausdorff(sphere, jittered));
  EXPECT_LT(h, 0.25 * edge);
  EXPECT_GT(mean_vertex_distance(jittered, sphere), 0.01 * edge);

  struct Case {
    Mesh mesh;
    bool closed;
  };
  const std::vector<Case> cases{{sphere, true}, {primitives::grid(8, 8, 1, 1), false}, {primitives::torus(1, 0.3, 24, 12), true}};
  for (const auto& c : cases) {
    for (std::uint64_t seed : {1, 2, 3}) {
      const Mesh out = remesh_perturb(c.mesh, 0.3, 0.3, seed);
      EXPECT_EQ(out.faces.size(), c.mesh.faces.size());
      const auto adj = build_adjacency(out);
      const auto report = validate_manifold(out, adj);
      EXPECT_EQ(report.is_closed, c.closed);
      EXPECT_EQ(report.non_manifold_edge_count, 0u);
      EXPECT_EQ(report.genus(), validate_manifold(c.mesh, build_adjacency(c.mesh)).genus());
      EXPECT_NE(out.faces, c.mesh.faces);
      for (const auto& f : out.faces) EXPECT_GT(face_normal_unnormalized(out, f).norm(), 0.0);
    }
  }
}

TEST(TrainingPairs, ShapesRangesAndDeterminism) {
  std::vector<TaggedMesh> meshes{{"sphere", primitives::icosphere(3)}, {"dumbbell", primitives::dumbbell()}};
  const ShdfParams p;
  const auto pairs = build_training_pairs(meshes, 0, p, 7);
  ASSERT_EQ(pairs.size(), 2u);
  for (const auto& pair : pairs) {
    EXPECT_EQ(pair.target.size(), pair.graph.node_count());
    EXPECT_EQ(pair.positions.size(), pair.graph.node_count());
    for (double v : pair.target) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_TRUE(pair.source == "sphere" || pair.source == "dumbbell");
  }
  const auto again = build_training_pairs(meshes, 0, p, 7);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(again[i].source, pairs[i].source);
    EXPECT_EQ(again[i].target, pairs[i].target);
  }
  EXPECT_TRUE(build_training_pairs({}, 0, p, 7).empty());
}

TEST(TrainingPairs, FailingMeshIsSkipped) {
  std::vector<TaggedMesh> meshes{{"open", primitives::triangle()}, {"sphere", primitives::icosphere(2)}};
  const auto pairs = build_training_pairs(meshes, 0, ShdfParams{}, 1);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].source, "sphere");
}

TEST(TrainingPairs, ResolutionInvariantTargets) {
  const Mesh base = primitives::bumpy_dumbbell(1);
  const Mesh fine = tessellate(base, 1);
  const double r = 0.05 * bbox_diagonal(base);
  const ShdfParams p;
  const auto a = build_training_pair({"base", base}, r, p, 3);
  const auto b = build_training_pair({"fine", fine}, r, p, 3);
  PointGrid grid(b.positions, r);
  std::vector<double> x, y;
  for (std::size_t i = 0; i < a.positions.size(); ++i) {
    const auto nn = grid.nearest(a.positions[i], 1);
    x.push_back(a.target[i]);
    y.push_back(b.target[nn.at(0)]);
  }
  EXPECT_GE(pearson(x, y), 0.9);
}

TEST(DatasetFile, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "nshdf_dataset_test";
  std::filesystem::remove_all(dir);
  const auto pairs = build_training_pairs({{"sphere", primitives::icosphere(2)}}, 0, ShdfParams{}, 2);
  save_dataset(dir, pairs, {{"seed", 2}});
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), pairs.size());
  EXPECT_EQ(back[0].target, pairs[0].target);
  EXPECT_EQ(back[0].positions, pairs[0].positions);
  EXPECT_EQ(back[0].graph.edges, pairs[0].graph.edges);
  EXPECT_EQ(back[0].graph.node_features, pairs[0].graph.node_features);
  EXPECT_EQ(back[0].graph.edge_features, pairs[0].graph.edge_features);
  write_file(dir / "pair_0000.json", "{\"format\": \"nshdf.pair\"}");
  EXPECT_THROW(load_dataset(dir), ParseError);
  std::filesystem::remove_all(dir);
}
