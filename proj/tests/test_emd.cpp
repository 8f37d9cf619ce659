#include <gtest/gtest.h>

#include <numeric>

#include "neuralshdf/emd_net.hpp"
#include "neuralshdf/frame.hpp"
#include "neuralshdf/primitives.hpp"

using namespace nshdf;

namespace {

Eigen::Matrix3d rotation_from(double a, double b, double c) {
  return (Eigen::AngleAxisd(a, Vec3::UnitZ()) * Eigen::AngleAxisd(b, Vec3::UnitY()) *
          Eigen::AngleAxisd(c, Vec3::UnitX()))
      .toRotationMatrix();
}

// A 3-node toy graph: a path 0-1-2 plus a one-way edge 2->0.
GraphInput toy_graph(Rng& rng, int features = kNodeFeatures) {
  GraphInput g;
  g.node_features.resize(3, features);
  for (Eigen::Index i = 0; i < g.node_features.size(); ++i) g.node_features.data()[i] = rng.uniform(-1, 1);
  g.edges = {{0, 1}, {1, 0}, {1, 2}, {2, 1}, {2, 0}};
  g.edge_features.resize(5, kEdgeFeatures);
  for (Eigen::Index i = 0; i < g.edge_features.size(); ++i) g.edge_features.data()[i] = rng.uniform(-1, 1);
  g.rho = {0.7, 1.0, 1.6};
  return g;
}

GraphInput permute(const GraphInput& g, const std::vector<int>& perm) {
  // perm[old] = new
  GraphInput p = g;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    p.node_features.row(perm[i]) = g.node_features.row(static_cast<Eigen::Index>(i));
    p.rho[perm[i]] = g.rho[i];
  }
  for (auto& e : p.edges) e = {perm[e[0]], perm[e[1]]};
  return p;
}

MeshGraph small_graph(std::uint64_t seed = 3, double radius = 0.35) {
  return build_mesh_graph(primitives::bumpy_dumbbell(1), radius, seed);
}

std::vector<double> ramp_target(const GraphInput& g) {
  std::vector<double> t(g.node_count());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::clamp(g.node_features(static_cast<Eigen::Index>(i), 3), 0.0, 1.0);
  return t;
}

}  // namespace

TEST(CanonicalFrame, RigidMotionGivesSameLocalCoordinates) {
  const Mesh m = primitives::bumpy_dumbbell(1);
  const Mesh moved = primitives::transformed(m, rotation_from(0.4, -1.1, 2.3), Vec3(5, -3, 1));
  const auto a = canonical_frame(m), b = canonical_frame(moved);
  EXPECT_NEAR(a.scale, b.scale, 1e-9);
  for (std::size_t v = 0; v < m.vertices.size(); v += 17) {
    EXPECT_LT((a.to_local(m.vertices[v]) - b.to_local(moved.vertices[v])).norm(), 1e-9);
  }
  EXPECT_NEAR(a.rotation.determinant(), 1.0, 1e-12);
}

TEST(GraphInputTest, InvariantUnderTranslationRotationAndScale) {
  const Mesh m = primitives::bumpy_dumbbell(1);
  const SampleSet s = sample_surface(m, 0.3, 1);
  const GraphInput base = build_graph_input(s, m);
  const double scale = 2.5;
  const Eigen::Matrix3d R = rotation_from(1.0, 0.3, -0.7);
  const Vec3 t(10, 20, -5);
  Mesh moved = primitives::scaled(primitives::transformed(m, R, Vec3::Zero()), scale);
  for (auto& v : moved.vertices) v += t;
  SampleSet s2 = s;
  s2.radius *= scale;
  for (auto& p : s2.positions) p = scale * (R * p) + t;
  const GraphInput other = build_graph_input(s2, moved);
  EXPECT_EQ(other.edges, base.edges);
  EXPECT_LT((other.node_features - base.node_features).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((other.edge_features - base.edge_features).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(GraphInputTest, TwoCloseSamplesShareOneUndirectedEdge) {
  const Mesh m = primitives::unit_square();
  SampleSet s;
  s.radius = 0.2;
  s.positions = {Vec3(0.1, 0.1, 0), Vec3(0.1 + 0.3, 0.1, 0), Vec3(0.9, 0.9, 0)};
  s.host_faces = {0, 0, 0};
  s = compute_densities(build_neighborhoods(s, m, 1.0));
  const GraphInput g = build_graph_input(s, m);
  ASSERT_EQ(g.edges.size(), 2u);
  EXPECT_EQ(g.edges[0], (std::array<int, 2>{1, 0}));
  EXPECT_EQ(g.edges[1], (std::array<int, 2>{0, 1}));
  EXPECT_NEAR(g.edge_features(0, 0), 1.5, 1e-12);
  EXPECT_EQ(g.node_count(), 3u);
  EXPECT_TRUE(g.node_features.allFinite());
}

TEST(GraphInputTest, FewerThanTwoSamplesIsGraphError) {
  const Mesh m = primitives::unit_square();
  SampleSet s;
  s.radius = 0.2;
  s.positions = {Vec3(0.2, 0.2, 0)};
  s.host_faces = {0};
  s = compute_densities(build_neighborhoods(s, m, 1.0));
  EXPECT_THROW(build_graph_input(s, m), GraphError);
}

TEST(Forward, OutputsOnePerNodeInUnitInterval) {
  const auto mg = small_graph();
  const auto model = EmdModel<float>::create({}, 1);
  const auto y = predict(model, mg.graph);
  ASSERT_EQ(y.size(), mg.graph.node_count());
  for (double v : y) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Forward, ZeroModelGivesOneHalf) {
  const auto mg = small_graph();
  const auto model = EmdModel<float>::create({}, 0, true);
  for (double v : predict(model, mg.graph)) EXPECT_EQ(v, 0.5);
}

TEST(Forward, PermutationEquivariant) {
  const auto mg = small_graph();
  const auto model = EmdModel<float>::create({}, 9);
  std::vector<int> perm(mg.graph.node_count());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(2);
  rng.shuffle(perm);
  const auto a = predict(model, mg.graph);
  const auto b = predict(model, permute(mg.graph, perm));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[perm[i]], a[i], 1e-6);
}

TEST(Forward, NonFiniteValuesNameTheLayer) {
  Rng rng(1);
  auto g = toy_graph(rng);
  auto model = EmdModel<double>::create({.width = 4, .rounds = 1}, 1);
  model.encoder[0].W *= 1e200;
  g.node_features *= 1e200;
  try {
    predict(model, g);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.layer(), "encoder.layer0");
  }
  g.node_features(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    predict(model, g);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.layer(), "input");
  }
}

TEST(Loss, HandValues) {
  const std::vector<double> ref{0.0, 1.0}, pred{1.0, 1.0};
  EXPECT_EQ(loss(ref, ref, 1.0), 0.0);
  EXPECT_EQ(loss(pred, ref, 1.0), 0.5);
  EXPECT_EQ(loss(pred, ref, 2.0), 2.0 * loss(pred, ref, 1.0));
  EXPECT_THROW(loss(std::vector<double>{1.0}, ref, 1.0), ContractError);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> a(5), b(5);
    for (int k = 0; k < 5; ++k) {
      a[k] = rng.uniform();
      b[k] = rng.uniform();
    }
    EXPECT_GT(loss(a, b, 0.5), 0.0);
    EXPECT_GT(loss(a, b, 0.5, LossMode::Squared), 0.0);
  }
}

class GradientCheck : public ::testing::TestWithParam<std::tuple<Activation, LossMode>> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  const auto [act, mode] = GetParam();
  Rng rng(static_cast<std::uint64_t>(act) * 7 + 1);
  const GraphInput g = toy_graph(rng);
  const PreparedGraph<double> pg(g);
  EmdModel<double> model = EmdModel<double>::create({.width = 6, .rounds = 2, .activation = act}, 5);
  // Nonzero biases so relu units are not all on the same side.
  for (auto* p : model.parameters()) {
    if (p->rows() == 1) {
      for (Eigen::Index i = 0; i < p->size(); ++i) p->data()[i] = rng.uniform(-0.3, 0.3);
    }
  }
  const std::vector<double> ref{0.1, 0.55, 0.9};
  const double alpha = 1.7;
  const auto res = backward(model, pg, ref, alpha, mode);
  auto objective = [&](const EmdModel<double>& m) {
    const auto y = forward(m, pg);
    std::vector<double> v(y.data(), y.data() + y.size());
    return loss(v, ref, alpha, mode);
  };
  EXPECT_NEAR(res.loss, objective(model), 1e-14);
  const double h = 1e-5;
  auto params = model.parameters();
  const auto grads = res.gradients.parameters();
  int checked = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index i = 0; i < params[p]->size(); ++i) {
      double& w = params[p]->data()[i];
      const double saved = w;
      w = saved + h;
      const double up = objective(model);
      w = saved - h;
      const double down = objective(model);
      w = saved;
      const double fd = (up - down) / (2 * h);
      const double an = grads[p]->data()[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-7});
      EXPECT_LT(std::abs(fd - an) / denom, 1e-4) << "param " << p << " index " << i;
      ++checked;
    }
  }
  EXPECT_EQ(static_cast<std::size_t>(checked), model.parameter_count());
}

INSTANTIATE_TEST_SUITE_P(AllActivations, GradientCheck,
                         ::testing::Combine(::testing::Values(Activation::Relu, Activation::Tanh, Activation::Silu),
                                            ::testing::Values(LossMode::Absolute, LossMode::Squared)));

TEST(Backward, ZeroAlphaAndExactPredictionGiveZeroGradient) {
  Rng rng(4);
  const GraphInput g = toy_graph(rng);
  const PreparedGraph<double> pg(g);
  const auto model = EmdModel<double>::create({.width = 5, .rounds = 2}, 8);
  const auto y = forward(model, pg);
  const std::vector<double> exact(y.data(), y.data() + y.size());
  const std::vector<double> other{0.2, 0.4, 0.6};
  for (const auto& res : {backward(model, pg, other, 0.0), backward(model, pg, exact, 1.0)}) {
    EXPECT_EQ(res.loss, 0.0);
    for (const auto* p : res.gradients.parameters()) EXPECT_EQ(p->cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Aggregation, DensityScalesMessagesAndNormalizationCancelsIt) {
  Rng rng(6);
  GraphInput g = toy_graph(rng);
  const auto raw = aggregation_matrix<double>(g, false, false);
  const auto norm = aggregation_matrix<double>(g, true, false);
  const double c = 3.25;
  GraphInput scaled = g;
  for (auto& r : scaled.rho) r *= c;
  const Eigen::MatrixXd raw_c = aggregation_matrix<double>(scaled, false, false);
  const Eigen::MatrixXd norm_c = aggregation_matrix<double>(scaled, true, false);
  EXPECT_LT((raw_c - c * Eigen::MatrixXd(raw)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((norm_c - Eigen::MatrixXd(norm)).cwiseAbs().maxCoeff(), 1e-15);
  // Incoming weights of each receiver sum to one; a heavier sender gets more weight.
  const Eigen::MatrixXd dense = norm;
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(dense.row(i).sum(), 1.0, 1e-15);
  EXPECT_NEAR(dense(0, 2) / dense(0, 1), g.rho[2] / g.rho[1], 1e-14);
}

TEST(Schedule, EndpointsAndValidation) {
  TrainSchedule s;
  EXPECT_EQ(s.lr_at(0), 1e-3);
  EXPECT_EQ(s.lr_at(s.decay_start_step), 1e-3);
  EXPECT_NEAR(s.lr_at(s.total_steps), 1e-5, 1e-9);
  EXPECT_NEAR(s.lr_at((s.decay_start_step + s.total_steps) / 2), 1e-4, 1e-12);
  for (int step = s.decay_start_step; step < s.total_steps; step += 997) EXPECT_GT(s.lr_at(step), s.lr_at(step + 1));
  TrainSchedule bad;
  bad.decay_start_step = bad.total_steps;
  EXPECT_THROW(bad.validate(), ContractError);
  bad = {};
  bad.lr_final = 1e-2;
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(Train, OverfitsASingleGraph) {
  const auto mg = small_graph(3, 0.5);
  const std::vector<TrainingExample> data{{mg.graph, ramp_target(mg.graph)}};
  TrainSchedule s;
  s.total_steps = 5000;
  s.decay_start_step = 3000;
  const auto model = EmdModel<float>::create({}, 2);
  const double before = dataset_loss(model, data, s.alpha);
  const auto res = train(model, data, s);
  ASSERT_FALSE(res.aborted);
  EXPECT_EQ(res.steps_completed, 5000);
  EXPECT_EQ(res.history.size(), 5000u);
  const double after = dataset_loss(res.model, data, s.alpha);
  EXPECT_LE(after, 0.1 * before) << "before " << before << " after " << after;
}

TEST(Train, SameSeedGivesIdenticalHistory) {
  const auto a = small_graph(1), b = small_graph(2);
  const std::vector<TrainingExample> data{{a.graph, ramp_target(a.graph)}, {b.graph, ramp_target(b.graph)}};
  TrainSchedule s;
  s.total_steps = 60;
  s.decay_start_step = 30;
  s.batch_size = 2;
  const auto model = EmdModel<float>::create({.width = 32}, 4);
  const auto r1 = train(model, data, s);
  const auto r2 = train(model, data, s);
  EXPECT_EQ(history_csv(r1.history), history_csv(r2.history));
  EXPECT_EQ(save_model(r1.model), save_model(r2.model));
  int checkpoints = 0;
  s.checkpoint_interval = 20;
  train(model, data, s, [&](int step, const EmdModel<float>&) {
    EXPECT_EQ(step % 20, 0);
    ++checkpoints;
  });
  EXPECT_EQ(checkpoints, 3);
}

TEST(Train, NonFiniteLossAbortsWithLastCheckpoint) {
  const auto mg = small_graph();
  auto target = ramp_target(mg.graph);
  target[0] = std::numeric_limits<double>::quiet_NaN();
  TrainSchedule s;
  s.total_steps = 10;
  s.decay_start_step = 5;
  const auto model = EmdModel<float>::create({.width = 16}, 4);
  const auto res = train(model, {{mg.graph, target}}, s);
  EXPECT_TRUE(res.aborted);
  EXPECT_EQ(res.steps_completed, 0);
  EXPECT_EQ(save_model(res.model), save_model(model));
  EXPECT_THROW(train(model, {}, s), ContractError);
}

TEST(ModelFile, RoundTripIsBitIdentical) {
  const auto mg = small_graph();
  const auto model = EmdModel<float>::create({.activation = Activation::Tanh}, 77);
  const std::string bytes = save_model(model);
  const auto loaded = load_model(bytes);
  EXPECT_EQ(loaded.config.activation, Activation::Tanh);
  EXPECT_EQ(loaded.config.rounds, 4);
  EXPECT_EQ(predict(loaded, mg.graph), predict(model, mg.graph));
  EXPECT_EQ(save_model(loaded), bytes);
}

TEST(ModelFile, RejectsDamagedFiles) {
  const std::string bytes = save_model(EmdModel<float>::create({.width = 8}, 1));
  EXPECT_THROW(load_model(""), ParseError);
  EXPECT_THROW(load_model("NOTAMODEL"), ParseError);
  EXPECT_THROW(load_model(bytes.substr(0, bytes.size() - 1)), ParseError);
  EXPECT_THROW(load_model(bytes + "x"), ParseError);
  std::string wrong_version = bytes;
  wrong_version[8] = 9;
  EXPECT_THROW(load_model(wrong_version), ParseError);
}

TEST(InferField, OneValuePerFaceAndRigidInvariance) {
  const Mesh m = primitives::bumpy_dumbbell(1);
  const auto model = EmdModel<float>::create({}, 12);
  const double r = 0.25;
  const auto a = infer_field(model, m, r, 5);
  EXPECT_EQ(a.values.size(), m.faces.size());
  EXPECT_EQ(a.provenance, FieldProvenance::Predicted);
  EXPECT_TRUE(a.normalized);
  const Mesh moved = primitives::transformed(m, rotation_from(2.0, 0.5, 1.0), Vec3(-4, 2, 9));
  const auto b = infer_field(model, moved, r, 5);
  double worst = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) worst = std::max(worst, std::abs(a.values[i] - b.values[i]));
  EXPECT_LT(worst, 1e-5);
}

TEST(InferField, TooLargeRadiusIsInferenceError) {
  const auto model = EmdModel<float>::create({.width = 8}, 1);
  EXPECT_THROW(infer_field(model, primitives::icosphere(2), 10.0, 0), InferenceError);
}

TEST(Interpolation, ExactAtSamplesAndInverseDistanceBetween) {
  const std::vector<Vec3> s{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(5, 5, 5)};
  const std::vector<double> v{1.0, 2.0, 3.0, 100.0};
  const std::vector<Vec3> q{Vec3(1, 0, 0), Vec3(0.5, 0, 0)};
  const auto out = interpolate_from_samples(s, v, q, 1.0);
  EXPECT_EQ(out[0], 2.0);
  const double d2 = std::sqrt(0.25 + 1.0);
  EXPECT_NEAR(out[1], (1.0 / 0.5 + 2.0 / 0.5 + 3.0 / d2) / (2.0 / 0.5 + 1.0 / d2), 1e-12);
}
