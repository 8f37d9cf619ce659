#include <gtest/gtest.h>

#include <numbers>

#include "neuralshdf/mesh.hpp"
#include "neuralshdf/primitives.hpp"
#include "neuralshdf/util.hpp"

using namespace nshdf;

namespace {

const char* kCubeObj = R"(# unit cube, quads
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 4 3 2
f 5 6 7 8
f 1 2 6 5
f 2 3 7 6
f 3 4 8 7
f 4 1 5 8
)";

double signed_volume(const Mesh& m) {
  double v = 0;
  for (const auto& f : m.faces) {
    v += m.vertices[f[0]].dot(m.vertices[f[1]].cross(m.vertices[f[2]])) / 6.0;
  }
  return v;
}

}  // namespace

TEST(LoadMesh, CubeObjFanTriangulatesQuads) {
  const Mesh m = load_mesh(kCubeObj, MeshFormat::Obj);
  EXPECT_EQ(m.vertices.size(), 8u);
  EXPECT_EQ(m.faces.size(), 12u);
  EXPECT_DOUBLE_EQ(m.vertices[6].x(), 1.0);
  EXPECT_NEAR(signed_volume(m), 1.0, 1e-12);
}

TEST(LoadMesh, EmptyBufferIsParseError) {
  EXPECT_THROW(load_mesh("", MeshFormat::Obj), ParseError);
  EXPECT_THROW(load_mesh("  \n", MeshFormat::Ply), ParseError);
}

TEST(LoadMesh, MalformedLineReportsLineNumber) {
  try {
    load_mesh("v 0 0 0\nv 1 0 0\nv 0 x 0\nf 1 2 3\n", MeshFormat::Obj);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(LoadMesh, OutOfRangeIndexIsStructuralError) {
  EXPECT_THROW(load_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n", MeshFormat::Obj), StructuralError);
}

TEST(LoadMesh, SingleTriangle) {
  const Mesh m = load_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n", MeshFormat::Obj);
  ASSERT_EQ(m.faces.size(), 1u);
  const auto adj = build_adjacency(m);
  const auto rep = validate_manifold(m, adj);
  EXPECT_EQ(rep.boundary_edge_count, 3u);
  EXPECT_FALSE(rep.is_closed);
}

TEST(LoadMesh, DegenerateFacesDropped) {
  const Mesh m = load_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 1 2\nf 1 2 4\n", MeshFormat::Obj);
  EXPECT_EQ(m.faces.size(), 1u);
}

TEST(LoadMesh, ObjSlashAndNegativeIndices) {
  const Mesh m = load_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3/1/1 -2//1 -1\n", MeshFormat::Obj);
  ASSERT_EQ(m.faces.size(), 1u);
  EXPECT_EQ(m.faces[0], (Face{0, 1, 2}));
}

TEST(LoadMesh, AsciiPlyWithExtraProperties) {
  const std::string ply =
      "ply\nformat ascii 1.0\ncomment x\nelement vertex 4\nproperty float x\nproperty float y\n"
      "property float z\nproperty uchar quality\nelement face 1\nproperty list uchar int vertex_indices\n"
      "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
      "0 0 0 1\n1 0 0 1\n1 1 0 1\n0 1 0 1\n4 0 1 2 3 255 0 0\n";
  const Mesh m = load_mesh(ply, MeshFormat::Ply);
  EXPECT_EQ(m.vertices.size(), 4u);
  EXPECT_EQ(m.faces.size(), 2u);
}

TEST(LoadMesh, PlyBadIndexAndTruncation) {
  const std::string header =
      "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
      "element face 1\nproperty list uchar int vertex_indices\nend_header\n";
  EXPECT_THROW(load_mesh(header + "0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", MeshFormat::Ply), StructuralError);
  EXPECT_THROW(load_mesh(header + "0 0 0\n1 0 0\n", MeshFormat::Ply), ParseError);
  Mesh m = primitives::icosphere(1);
  std::string bin = save_ply(m, {.binary = true});
  bin.resize(bin.size() - 5);
  EXPECT_THROW(load_mesh(bin, MeshFormat::Ply), ParseError);
}

TEST(RoundTrip, BinaryPlyIsBitExactObjWithinTolerance) {
  Rng rng(3);
  Mesh m = primitives::icosphere(2);
  for (auto& v : m.vertices) v += Vec3(rng.uniform(-1e-3, 1e-3), rng.normal() * 1e-7, rng.uniform());
  const Mesh ply = load_mesh(save_ply(m, {.binary = true}), MeshFormat::Ply);
  const Mesh ply_ascii = load_mesh(save_ply(m, {.binary = false}), MeshFormat::Ply);
  const Mesh obj = load_mesh(save_obj(m), MeshFormat::Obj);
  ASSERT_EQ(ply.vertices.size(), m.vertices.size());
  ASSERT_EQ(obj.faces, m.faces);
  ASSERT_EQ(ply.faces, m.faces);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    EXPECT_EQ(ply.vertices[i], m.vertices[i]);
    EXPECT_LT((obj.vertices[i] - m.vertices[i]).norm(), 1e-6);
    EXPECT_LT((ply_ascii.vertices[i] - m.vertices[i]).norm(), 1e-6);
  }
}

TEST(Adjacency, CubeHas18EdgesEachWithTwoFaces) {
  const Mesh m = load_mesh(kCubeObj, MeshFormat::Obj);
  const auto adj = build_adjacency(m);
  EXPECT_EQ(adj.edges.size(), 18u);
  for (const auto& e : adj.edges) EXPECT_EQ(e.faces.size(), 2u);
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    for (int g : adj.face_neighbors[f]) {
      const auto& back = adj.face_neighbors[g];
      EXPECT_TRUE(std::find(back.begin(), back.end(), static_cast<int>(f)) != back.end());
    }
  }
  for (const auto& ring : adj.vertex_rings) {
    EXPECT_TRUE(std::adjacent_find(ring.begin(), ring.end()) == ring.end());
  }
}

TEST(Adjacency, SingleTriangleAndSharedEdge) {
  const auto adj1 = build_adjacency(primitives::triangle());
  EXPECT_EQ(adj1.edges.size(), 3u);
  for (const auto& e : adj1.edges) EXPECT_EQ(e.faces.size(), 1u);

  const Mesh two = primitives::unit_square();
  const auto adj2 = build_adjacency(two);
  const int shared = adj2.find_edge(0, 3);
  ASSERT_GE(shared, 0);
  EXPECT_EQ(adj2.edges[shared].faces, (std::vector<int>{0, 1}));
}

TEST(Adjacency, NonManifoldEdgeListed) {
  Mesh m;
  m.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, -1, 0), Vec3(0, 0, 1)};
  m.faces = {{0, 1, 2}, {1, 0, 3}, {0, 1, 4}};
  try {
    build_adjacency(m);
    FAIL() << "expected NonManifoldError";
  } catch (const NonManifoldError& e) {
    ASSERT_EQ(e.edges().size(), 1u);
    EXPECT_EQ(e.edges()[0], (std::pair<int, int>{0, 1}));
  }
  const auto rep = validate_manifold(m, build_adjacency(m, false));
  EXPECT_EQ(rep.non_manifold_edge_count, 1u);
}

TEST(Dihedral, CoplanarCubeAndErrors) {
  const Mesh square = primitives::unit_square();
  const auto adj = build_adjacency(square);
  EXPECT_NEAR(dihedral_angle(square, adj, 0, 3), std::numbers::pi, 1e-12);
  EXPECT_THROW(dihedral_angle(square, adj, 0, 1), DomainError);

  const Mesh cube = primitives::cube();
  const auto cadj = build_adjacency(cube);
  for (std::size_t e = 0; e < cadj.edges.size(); ++e) {
    const double a = dihedral_angle(cube, cadj, static_cast<int>(e));
    // Cube edges are convex right angles; face diagonals are flat.
    EXPECT_TRUE(std::abs(a - std::numbers::pi / 2) < 1e-12 || std::abs(a - std::numbers::pi) < 1e-12) << a;
  }
}

TEST(Dihedral, ConcaveRingWhereNeckMeetsSphere) {
  const primitives::DumbbellShape shape;
  const Mesh m = primitives::dumbbell(shape);
  const auto adj = build_adjacency(m);
  // Brute force over edges: the junction rings lie at |x| = neck half length.
  const double half = primitives::dumbbell_neck_half_length(shape);
  int junction = 0;
  for (std::size_t e = 0; e < adj.edges.size(); ++e) {
    const Vec3& a = m.vertices[adj.edges[e].v0];
    const Vec3& b = m.vertices[adj.edges[e].v1];
    const bool on_ring = std::abs(std::abs(a.x()) - half) < 1e-9 && std::abs(std::abs(b.x()) - half) < 1e-9;
    if (!on_ring) continue;
    ++junction;
    EXPECT_GT(dihedral_angle(m, adj, static_cast<int>(e)), std::numbers::pi);
  }
  EXPECT_EQ(junction, 2 * 32);
}

TEST(FaceGeometry, RightTriangleAndCubeArea) {
  const auto g = face_geometry(primitives::triangle());
  EXPECT_DOUBLE_EQ(g.areas[0], 0.5);
  EXPECT_NEAR(std::abs(g.normals[0].z()), 1.0, 1e-15);
  EXPECT_NEAR(face_geometry(primitives::cube()).total_area, 6.0, 1e-9);
}

TEST(FaceGeometry, IcosphereAreaApproachesSphere) {
  const auto g = face_geometry(primitives::icosphere(3));
  EXPECT_NEAR(g.total_area, 4 * std::numbers::pi, 0.02 * 4 * std::numbers::pi);
}

TEST(FaceGeometry, AreaWeightedNormalsCancelOnClosedMeshes) {
  for (const Mesh& m : {primitives::icosphere(2), primitives::torus(2, 0.5, 24, 12),
                        primitives::dumbbell(), primitives::capped_cylinder(1, 10)}) {
    const auto g = face_geometry(m);
    Vec3 sum = Vec3::Zero();
    for (std::size_t i = 0; i < m.faces.size(); ++i) sum += g.areas[i] * g.normals[i];
    EXPECT_LT(sum.norm(), 1e-6 * g.total_area);
    EXPECT_GT(signed_volume(m), 0.0) << "primitives are outward oriented";
  }
}

TEST(Manifold, EulerCharacteristics) {
  const Mesh cube = load_mesh(kCubeObj, MeshFormat::Obj);
  auto rep = validate_manifold(cube, build_adjacency(cube));
  EXPECT_TRUE(rep.is_closed);
  EXPECT_EQ(rep.euler_characteristic, 2);
  EXPECT_EQ(rep.genus(), 0);

  const Mesh torus = primitives::torus(2, 0.5, 24, 12);
  rep = validate_manifold(torus, build_adjacency(torus));
  EXPECT_TRUE(rep.is_closed);
  EXPECT_EQ(rep.euler_characteristic, 0);
  EXPECT_EQ(rep.genus(), 1);
}

TEST(Manifold, ClosedPrimitivesHaveNonNegativeIntegerGenus) {
  for (const Mesh& m : {primitives::icosphere(3), primitives::dumbbell(), primitives::bumpy_dumbbell(1),
                        primitives::capped_cylinder(1, 10), primitives::cube(3),
                        primitives::voxel_surface({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}, 2)}) {
    const auto rep = validate_manifold(m, build_adjacency(m));
    ASSERT_TRUE(rep.is_closed);
    EXPECT_EQ((2 - rep.euler_characteristic) % 2, 0);
    EXPECT_GE(rep.genus(), 0);
  }
}

TEST(SubMesh, ExtractKeepsGeometry) {
  const Mesh m = primitives::cube();
  const std::vector<int> faces{0, 1, 5};
  const auto sub = extract_submesh(m, faces);
  EXPECT_EQ(sub.mesh.faces.size(), 3u);
  for (std::size_t i = 0; i < faces.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      EXPECT_EQ(sub.mesh.vertices[sub.mesh.faces[i][k]], m.vertices[m.faces[faces[i]][k]]);
    }
  }
}
