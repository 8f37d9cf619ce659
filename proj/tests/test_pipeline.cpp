#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "neuralshdf/pipeline.hpp"
#include "neuralshdf/primitives.hpp"

using namespace nshdf;

namespace {

double brute_silhouette(const std::vector<double>& v, const std::vector<int>& labels) {
  const int groups = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> size(groups, 0);
  for (int l : labels) ++size[l];
  int nonempty = 0;
  for (int s : size) nonempty += s > 0;
  if (nonempty < 2) return 0;
  double total = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::vector<double> sum(groups, 0.0);
    for (std::size_t j = 0; j < v.size(); ++j) sum[labels[j]] += std::abs(v[i] - v[j]);
    if (size[labels[i]] == 1) continue;
    const double a = sum[labels[i]] / (size[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < groups; ++c) {
      if (c != labels[i] && size[c] > 0) b = std::min(b, sum[c] / size[c]);
    }
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(v.size());
}

int part_at(const Mesh& mesh, const Segmentation& seg, const Vec3& p) {
  const auto geo = face_geometry(mesh);
  std::size_t best = 0;
  for (std::size_t f = 1; f < geo.centroids.size(); ++f) {
    if ((geo.centroids[f] - p).squaredNorm() < (geo.centroids[best] - p).squaredNorm()) best = f;
  }
  return seg.labels[best];
}

// Capped cylinder along x split into three bands with constant field levels
// plus a little noise.
struct Bands {
  Mesh mesh;
  ScalarField field;
};

Bands three_bands() {
  Bands b;
  b.mesh = primitives::capped_cylinder(1.0, 9.0, 24, 3, 45);
  const auto geo = face_geometry(b.mesh);
  Rng rng(3);
  for (const auto& c : geo.centroids) {
    const double level = c.x() < 3 ? 0.1 : (c.x() < 6 ? 0.5 : 0.9);
    b.field.values.push_back(level + 0.01 * rng.normal());
  }
  b.field.normalized = true;
  return b;
}

}  // namespace

TEST(Pipeline, SecondSegmentReusesTheField) {
  Session session;
  auto res = session.add_mesh(primitives::dumbbell());
  PipelineConfig cfg;
  const auto first = session.segment(*res, cfg);
  EXPECT_FALSE(first.field_cache_hit);
  cfg.partition.k = 3;
  const auto second = session.segment(*res, cfg);
  EXPECT_TRUE(second.field_cache_hit);
  EXPECT_EQ(first.field_id, second.field_id);
  EXPECT_EQ(res->field_computations, 1u);
  EXPECT_EQ(res->field_cache_hits, 1u);
  EXPECT_LT(second.timings.shdf_ms, 0.05 * first.timings.shdf_ms);
  EXPECT_NE(first.id, second.id);
  EXPECT_NE(session.find_segmentation(*res, second.id), nullptr);
}

TEST(Pipeline, DifferentShdfParamsComputeANewField) {
  Session session;
  auto res = session.add_mesh(primitives::icosphere(2));
  PipelineConfig cfg;
  const auto a = session.field(*res, cfg);
  cfg.shdf.rays_per_point = 12;
  const auto b = session.field(*res, cfg);
  EXPECT_NE(a.id, b.id);
  EXPECT_EQ(res->field_computations, 2u);
  cfg.partition.k = 5;  // partition params do not touch the field
  EXPECT_TRUE(session.field(*res, cfg).cache_hit);
}

TEST(Pipeline, SingleClusterGivesOnePart) {
  PipelineConfig cfg;
  cfg.partition.k = 1;
  const auto r = segment(primitives::dumbbell(), cfg);
  EXPECT_EQ(r.segmentation.part_count, 1);
  for (int l : r.segmentation.labels) EXPECT_EQ(l, 0);
}

TEST(Pipeline, DumbbellLobesSeparated) {
  const Mesh m = primitives::dumbbell();
  const auto r = segment(m, PipelineConfig{});
  EXPECT_NE(part_at(m, r.segmentation, Vec3(-2.5, 0, 0)), part_at(m, r.segmentation, Vec3(2.5, 0, 0)));
  const auto& t = r.timings;
  EXPECT_GT(t.shdf_ms, 0);
  EXPECT_GT(t.partition_ms, 0);
  EXPECT_NEAR(t.stage_sum(), t.total_ms, 0.05 * t.total_ms);
}

TEST(Pipeline, CachedAndColdPathsAgree) {
  const Mesh m = primitives::bumpy_dumbbell(1);
  PipelineConfig cfg;
  cfg.partition.k = 3;
  cfg.partition.seed = 11;
  Session warm;
  auto res = warm.add_mesh(m);
  PipelineConfig other = cfg;
  other.partition.k = 2;
  warm.segment(*res, other);
  const auto cached = warm.segment(*res, cfg);
  ASSERT_TRUE(cached.field_cache_hit);
  const auto cold = segment(m, cfg);
  EXPECT_EQ(cached.segmentation.labels, cold.segmentation.labels);
  EXPECT_EQ(cached.id, cold.id);
}

TEST(Pipeline, StageErrorsNameTheStage) {
  PipelineConfig cfg;
  try {
    segment(primitives::triangle(), cfg);
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "shdf");
  }
  cfg.source = ShdfSource::Model;
  cfg.model_path = "/nonexistent/model.bin";
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = {};
  cfg.max_depth = -1;
  EXPECT_THROW(cfg.validate(), ContractError);
}

TEST(Pipeline, ModelSourceRunsEndToEnd) {
  const auto path = std::filesystem::temp_directory_path() / "nshdf_pipeline_model.bin";
  ModelConfig mc;
  mc.width = 8;
  mc.rounds = 1;
  write_file(path, save_model(EmdModel<float>::create(mc, 1)));
  PipelineConfig cfg;
  cfg.source = ShdfSource::Model;
  cfg.model_path = path;
  Session session;
  auto res = session.add_mesh(primitives::dumbbell());
  const auto r = session.segment(*res, cfg);
  EXPECT_EQ(r.segmentation.labels.size(), res->mesh.faces.size());
  const auto f = session.find_field(*res, r.field_id);
  ASSERT_NE(f, nullptr);
  EXPECT_EQ(f->provenance, FieldProvenance::Predicted);
  for (double v : f->values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  std::filesystem::remove(path);
}

class Refinement : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    session_ = new Session();
    res_ = session_->add_mesh(primitives::bumpy_dumbbell(2));
    root_ = new SegmentResult(session_->segment(*res_, PipelineConfig{}));
  }
  static void TearDownTestSuite() {
    delete root_;
    res_.reset();
    delete session_;
  }
  static Session* session_;
  static std::shared_ptr<MeshResource> res_;
  static SegmentResult* root_;
};

Session* Refinement::session_ = nullptr;
std::shared_ptr<MeshResource> Refinement::res_;
SegmentResult* Refinement::root_ = nullptr;

TEST_F(Refinement, SplicesChildrenWithoutTouchingOtherParts) {
  const Segmentation& root = root_->segmentation;
  const int lobe = part_at(res_->mesh, root, Vec3(-3.0, 0, 0));
  const auto r = session_->refine(*res_, root, lobe, PipelineConfig{});
  const Segmentation& seg = r.segmentation;
  int children = 0;
  std::set<int> inside;
  for (std::size_t f = 0; f < seg.labels.size(); ++f) {
    if (root.labels[f] == lobe) {
      inside.insert(seg.labels[f]);
    } else {
      EXPECT_EQ(seg.labels[f], root.labels[f]);
    }
  }
  children = static_cast<int>(inside.size());
  EXPECT_GE(children, 2);
  EXPECT_EQ(seg.part_count, root.part_count + children - 1);
  EXPECT_TRUE(inside.count(lobe));
  EXPECT_EQ(seg.depth, 1);
  ASSERT_TRUE(seg.parent);
  EXPECT_EQ(seg.parent->part, lobe);
  EXPECT_EQ(seg.parent->labels_hash, labels_hash(root.labels));
  EXPECT_GT(r.timings.refine_ms, 0);
}

TEST_F(Refinement, BumpsSeparateFromTheSphereBody) {
  const Mesh& m = res_->mesh;
  // Root: cut at the middle of the neck, so the +x part is a sphere carrying both bumps.
  Segmentation root;
  root.part_count = 2;
  root.part_cluster = {0, 1};
  for (const auto& c : face_geometry(m).centroids) root.labels.push_back(c.x() > 0 ? 1 : 0);
  const double c = 0.5 + std::sqrt(1.0 - 0.01);
  const Vec3 center(c, 0, 0);
  const Vec3 tip1 = center + 1.9 * Vec3(0.2, 1, 0).normalized();
  const Vec3 tip2 = center + 1.9 * Vec3(0.2, -0.5, 0.85).normalized();
  const auto r = session_->refine(*res_, root, 1, PipelineConfig{});
  const int body = part_at(m, r.segmentation, center + Vec3(1, 0, 0));
  EXPECT_EQ(body, part_at(m, r.segmentation, center + Vec3(0, -1, -0.2).normalized()));
  EXPECT_NE(part_at(m, r.segmentation, tip1), body);
  EXPECT_NE(part_at(m, r.segmentation, tip2), body);
  EXPECT_EQ(part_at(m, r.segmentation, Vec3(-3, 0, 0)), 0);
}

TEST_F(Refinement, ReusedParentFieldAlsoSplits) {
  PipelineConfig cfg;
  cfg.refine_field = RefineFieldPolicy::Reuse;
  const Segmentation& root = root_->segmentation;
  const int sphere = part_at(res_->mesh, root, Vec3(3.0, 0, 0));
  const std::size_t before = res_->field_computations;
  const auto r = session_->refine(*res_, root, sphere, cfg);
  EXPECT_TRUE(r.field_cache_hit);
  EXPECT_EQ(res_->field_computations, before);
  EXPECT_GT(r.segmentation.part_count, root.part_count);
  for (std::size_t f = 0; f < root.labels.size(); ++f) {
    if (root.labels[f] != sphere) EXPECT_EQ(r.segmentation.labels[f], root.labels[f]);
  }
}

TEST_F(Refinement, DeclinesSmallPartsAndDepthLimit) {
  Segmentation tiny = root_->segmentation;
  tiny.labels.assign(tiny.labels.size(), 0);
  tiny.labels[0] = 1;
  tiny.part_count = 2;
  tiny.part_cluster = {0, 1};
  EXPECT_THROW(session_->refine(*res_, tiny, 1, PipelineConfig{}), RefinementDeclined);
  EXPECT_THROW(session_->refine(*res_, tiny, 7, PipelineConfig{}), ContractError);
  PipelineConfig shallow;
  shallow.max_depth = 0;
  EXPECT_THROW(session_->refine(*res_, root_->segmentation, 0, shallow), RefinementDeclined);
}

TEST(Silhouette, MatchesQuadraticDefinition) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 5 + static_cast<int>(rng.below(60));
    const int groups = 1 + static_cast<int>(rng.below(4));
    std::vector<double> v;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
      labels.push_back(static_cast<int>(rng.below(groups)));
      v.push_back(labels.back() * 0.3 + rng.uniform() * 0.5);
    }
    EXPECT_NEAR(silhouette_1d(v, labels), brute_silhouette(v, labels), 1e-12);
  }
  EXPECT_EQ(silhouette_1d(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}), 0.0);
}

TEST(GridSearch, SinglePointIsRankOne) {
  Session session;
  auto res = session.add_mesh(primitives::dumbbell());
  PipelineConfig cfg;
  const auto r = session.grid_search(*res, cfg, {{2}, {1.0}}, GridMetric::NormalizedEnergy);
  ASSERT_EQ(r.points.size(), 1u);
  EXPECT_EQ(r.points[0].rank, 1);
  EXPECT_EQ(r.points[0].k, 2);
  EXPECT_EQ(r.field_computations, 1u);
}

TEST(GridSearch, SilhouettePicksTheTrueClusterCount) {
  const Bands b = three_bands();
  const Adjacency adj = build_adjacency(b.mesh);
  const DualGraph g = build_dual_graph(b.mesh, adj, 2.0);
  const auto r = grid_search(g, b.field, {{2, 3, 4}, {1.0}}, PartitionParams{}, true, GridMetric::Silhouette);
  ASSERT_EQ(r.points.size(), 3u);
  EXPECT_EQ(r.points[0].k, 3);
  EXPECT_EQ(r.points[0].segmentation.part_count, 3);
}

TEST(GridSearch, ExhaustiveAndComputesTheFieldOnce) {
  Session session(2);
  auto res = session.add_mesh(primitives::bumpy_dumbbell(1));
  PipelineConfig cfg;
  const GridSpec grid{{2, 3, 4}, {0.3, 1.0, 3.0}};
  for (GridMetric metric : {GridMetric::NormalizedEnergy, GridMetric::Silhouette}) {
    const auto r = session.grid_search(*res, cfg, grid, metric);
    ASSERT_EQ(r.points.size(), 9u);
    // Re-evaluate every point independently and check the winner.
    double best = metric == GridMetric::NormalizedEnergy ? 1e300 : -1e300;
    for (int k : grid.ks) {
      for (double l : grid.lambdas) {
        PipelineConfig c = cfg;
        c.partition.k = k;
        c.partition.lambda_smooth = l;
        const auto s = session.segment(*res, c);
        const double e = s.segmentation.energy / static_cast<double>(res->mesh.faces.size());
        const double sil = silhouette_1d(session.find_field(*res, s.field_id)->values, s.segmentation.labels);
        best = metric == GridMetric::NormalizedEnergy ? std::min(best, e) : std::max(best, sil);
      }
    }
    const auto& top = r.points.front();
    EXPECT_EQ(top.rank, 1);
    EXPECT_DOUBLE_EQ(metric == GridMetric::NormalizedEnergy ? top.normalized_energy : top.silhouette, best);
    for (std::size_t i = 1; i < r.points.size(); ++i) EXPECT_EQ(r.points[i].rank, static_cast<int>(i) + 1);
  }
  EXPECT_EQ(res->field_computations, 1u);
}

TEST(Manifest, RecordsConfigAndTimings) {
  PipelineConfig cfg;
  cfg.partition.k = 3;
  const auto r = segment(primitives::dumbbell(), cfg);
  const auto j = run_manifest(cfg, r.timings, r.segmentation, {{"segmentation", "out.json"}});
  EXPECT_EQ(j["config"]["partition"]["k"], 3);
  EXPECT_EQ(j["part_count"], r.segmentation.part_count);
  EXPECT_EQ(j["artifacts"]["segmentation"], "out.json");
  EXPECT_GT(j["timings"]["total_ms"].get<double>(), 0.0);
}
