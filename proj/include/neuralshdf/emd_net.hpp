#pragma once

// Encode-Message-Decode graph network over Poisson-disk samples: features,
// forward and reverse passes, Adam training and per-face inference.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <spdlog/spdlog.h>

#include "neuralshdf/errors.hpp"
#include "neuralshdf/frame.hpp"
#include "neuralshdf/mesh.hpp"
#include "neuralshdf/sampler.hpp"
#include "neuralshdf/shdf.hpp"
#include "neuralshdf/spatial.hpp"
#include "neuralshdf/util.hpp"

namespace nshdf {

enum class Activation { Relu, Tanh, Silu };

inline std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Silu: return "silu";
  }
  return "silu";
}

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::Relu;
  if (name == "tanh") return Activation::Tanh;
  if (name == "silu") return Activation::Silu;
  throw ContractError("unknown activation '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Graph input

inline constexpr int kNodeFeatures = 9;
inline constexpr int kEdgeFeatures = 4;

struct GraphInput {
  Eigen::MatrixXd node_features;           // n x kNodeFeatures
  std::vector<std::array<int, 2>> edges;   // directed {sender, receiver}
  Eigen::MatrixXd edge_features;           // edges x kEdgeFeatures
  std::vector<double> rho;

  std::size_t node_count() const { return static_cast<std::size_t>(node_features.rows()); }
};

/// Node features (all invariant to rigid motion and uniform scale):
///   |x|, |y|, |z| in the canonical frame over its box diagonal, distance to the
///   surface centroid over the diagonal, rho, log(1 + neighbor count), mean and
///   max neighbor distance over r, and mean neighbor offset along the host
///   normal over r.
/// Edges join samples closer than 2r; features are length, offset along each
/// endpoint normal (all over r) and normal agreement.
inline GraphInput build_graph_input(const SampleSet& samples, const Mesh& mesh) {
  const std::size_t n = samples.size();
  if (n < 2) throw GraphError("graph needs at least 2 samples, got " + std::to_string(n));
  if (samples.neighbors.size() != n || samples.rho.size() != n) {
    throw ContractError("samples need neighborhoods and densities");
  }
  const double r = samples.radius;
  if (!(r > 0)) throw ContractError("sample radius must be > 0");
  const CanonicalFrame frame = canonical_frame(mesh);
  const FaceGeometry geo = face_geometry(mesh);

  GraphInput g;
  g.rho = samples.rho;
  g.node_features.resize(static_cast<Eigen::Index>(n), kNodeFeatures);
  std::vector<Vec3> normals(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& p = samples.positions[i];
    normals[i] = geo.normals[samples.host_faces[i]];
    const Vec3 local = frame.to_local(p) / frame.scale;
    double mean_d = 0, max_d = 0, along = 0;
    for (int v : samples.neighbors[i]) {
      const Vec3 off = mesh.vertices[v] - p;
      const double d = off.norm();
      mean_d += d;
      max_d = std::max(max_d, d);
      along += off.dot(normals[i]);
    }
    const double cnt = static_cast<double>(samples.neighbors[i].size());
    mean_d /= cnt;
    along /= cnt;
    auto row = g.node_features.row(static_cast<Eigen::Index>(i));
    row << std::abs(local.x()), std::abs(local.y()), std::abs(local.z()), local.norm(), samples.rho[i],
        std::log1p(cnt), mean_d / r, max_d / r, along / r;
  }

  const PointGrid grid(samples.positions, 2.0 * r);
  std::vector<std::array<double, kEdgeFeatures>> feats;
  for (std::size_t i = 0; i < n; ++i) {
    for (int s : grid.within(samples.positions[i], 2.0 * r)) {
      if (s == static_cast<int>(i)) continue;
      const Vec3 off = samples.positions[s] - samples.positions[i];
      g.edges.push_back({s, static_cast<int>(i)});
      feats.push_back({off.norm() / r, off.dot(normals[i]) / r, off.dot(normals[s]) / r,
                       normals[s].dot(normals[i])});
    }
  }
  g.edge_features.resize(static_cast<Eigen::Index>(feats.size()), kEdgeFeatures);
  for (std::size_t e = 0; e < feats.size(); ++e) {
    for (int k = 0; k < kEdgeFeatures; ++k) g.edge_features(static_cast<Eigen::Index>(e), k) = feats[e][k];
  }
  return g;
}

/// Sparse receiver-by-sender weights rho_s (optionally divided by the
/// receiver's total incoming rho). With `per_edge` the columns index edges.
template <typename T>
Eigen::SparseMatrix<T> aggregation_matrix(const GraphInput& g, bool normalized, bool per_edge) {
  const auto n = static_cast<Eigen::Index>(g.node_count());
  std::vector<double> total(g.node_count(), 0.0);
  for (const auto& e : g.edges) total[e[1]] += g.rho[e[0]];
  std::vector<Eigen::Triplet<T>> trips;
  trips.reserve(g.edges.size());
  for (std::size_t k = 0; k < g.edges.size(); ++k) {
    const auto& e = g.edges[k];
    const double w = normalized ? g.rho[e[0]] / total[e[1]] : g.rho[e[0]];
    trips.emplace_back(e[1], per_edge ? static_cast<int>(k) : e[0], static_cast<T>(w));
  }
  Eigen::SparseMatrix<T> m(n, per_edge ? static_cast<Eigen::Index>(g.edges.size()) : n);
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

inline void validate_graph(const GraphInput& g) {
  const auto n = g.node_count();
  if (g.rho.size() != n) throw ContractError("rho count does not match node count");
  if (static_cast<std::size_t>(g.edge_features.rows()) != g.edges.size()) {
    throw ContractError("edge feature rows do not match edge count");
  }
  for (const auto& e : g.edges) {
    if (e[0] < 0 || e[1] < 0 || static_cast<std::size_t>(e[0]) >= n || static_cast<std::size_t>(e[1]) >= n) {
      throw ContractError("edge endpoint out of range");
    }
  }
  for (double r : g.rho) {
    if (!(r > 0) || !std::isfinite(r)) throw ContractError("rho must be positive and finite");
  }
  if (!g.node_features.allFinite() || !g.edge_features.allFinite()) throw NumericError("input", "non-finite feature");
}

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
  int width = 128;
  int rounds = 4;
  Activation activation = Activation::Silu;
  int node_features = kNodeFeatures;
  int edge_features = kEdgeFeatures;
};

inline constexpr std::uint32_t kModelVersion = 1;

template <typename T>
struct EmdModel {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  struct Layer {
    Mat W;  // in x out
    Mat b;  // 1 x out
  };

  ModelConfig config;
  std::uint32_t version = kModelVersion;
  std::vector<Layer> encoder;    // F -> w -> w -> w
  std::vector<Layer> messenger;  // (2w + E) -> w -> w -> w, shared by all rounds
  std::vector<Layer> decoder;    // w -> w -> 1

  /// Random initialization; pass zero_init for an all-zero model.
  static EmdModel create(const ModelConfig& cfg, std::uint64_t seed, bool zero_init = false) {
    if (cfg.width < 1 || cfg.rounds < 0 || cfg.node_features < 1 || cfg.edge_features < 0) {
      throw ContractError("invalid model configuration");
    }
    EmdModel m;
    m.config = cfg;
    const int w = cfg.width;
    Rng rng(seed);
    auto layer = [&](int in, int out, double gain) {
      Layer l{Mat::Zero(in, out), Mat::Zero(1, out)};
      if (!zero_init) {
        const double sd = gain / std::sqrt(static_cast<double>(in));
        for (Eigen::Index i = 0; i < l.W.size(); ++i) l.W.data()[i] = static_cast<T>(sd * rng.normal());
      }
      return l;
    };
    const double hidden_gain = cfg.activation == Activation::Tanh ? 1.0 : std::sqrt(2.0);
    m.encoder = {layer(cfg.node_features, w, hidden_gain), layer(w, w, hidden_gain), layer(w, w, 1.0)};
    m.messenger = {layer(2 * w + cfg.edge_features, w, hidden_gain), layer(w, w, hidden_gain), layer(w, w, 0.1)};
    m.decoder = {layer(w, w, hidden_gain), layer(w, 1, 1.0)};
    return m;
  }

  std::vector<Mat*> parameters() {
    std::vector<Mat*> out;
    for (auto* group : {&encoder, &messenger, &decoder}) {
      for (auto& l : *group) {
        out.push_back(&l.W);
        out.push_back(&l.b);
      }
    }
    return out;
  }

  std::vector<const Mat*> parameters() const {
    std::vector<const Mat*> out;
    for (auto* group : {&encoder, &messenger, &decoder}) {
      for (const auto& l : *group) {
        out.push_back(&l.W);
        out.push_back(&l.b);
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += static_cast<std::size_t>(p->size());
    return n;
  }

  /// Same shapes, all zeros.
  EmdModel zeros_like() const {
    EmdModel z = *this;
    for (auto* p : z.parameters()) p->setZero();
    return z;
  }

  template <typename U>
  EmdModel<U> cast() const {
    EmdModel<U> out;
    out.config = config;
    out.version = version;
    auto conv = [](const std::vector<Layer>& src, std::vector<typename EmdModel<U>::Layer>& dst) {
      dst.clear();
      for (const auto& l : src) dst.push_back({l.W.template cast<U>(), l.b.template cast<U>()});
    };
    conv(encoder, out.encoder);
    conv(messenger, out.messenger);
    conv(decoder, out.decoder);
    return out;
  }

  bool all_finite() const {
    for (const auto* p : parameters()) {
      if (!p->allFinite()) return false;
    }
    return true;
  }
};

namespace detail {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
Mat<T> activate(const Mat<T>& z, Activation a) {
  switch (a) {
    case Activation::Relu: return z.cwiseMax(T(0));
    case Activation::Tanh: return z.array().tanh().matrix();
    case Activation::Silu: return (z.array() / (T(1) + (-z.array()).exp())).matrix();
  }
  return z;
}

template <typename T>
Mat<T> activation_slope(const Mat<T>& z, Activation a) {
  switch (a) {
    case Activation::Relu: return (z.array() > T(0)).template cast<T>().matrix();
    case Activation::Tanh: return (T(1) - z.array().tanh().square()).matrix();
    case Activation::Silu: {
      const auto s = (T(1) / (T(1) + (-z.array()).exp())).eval();
      return (s * (T(1) + z.array() * (T(1) - s))).matrix();
    }
  }
  return Mat<T>::Ones(z.rows(), z.cols());
}

template <typename T>
struct MlpCache {
  std::vector<Mat<T>> inputs;
  std::vector<Mat<T>> pre;
};

// Activation follows every layer except the last.
template <typename T>
Mat<T> mlp_forward(const std::vector<typename EmdModel<T>::Layer>& layers, const Mat<T>& x, Activation act,
                   MlpCache<T>* cache, const std::string& name) {
  Mat<T> a = x;
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Mat<T> z = a * layers[l].W;
    z.rowwise() += layers[l].b.row(0);
    if (!z.allFinite()) throw NumericError(name + ".layer" + std::to_string(l), "non-finite pre-activation");
    if (cache) {
      cache->inputs.push_back(std::move(a));
      cache->pre.push_back(z);
    }
    a = l + 1 < layers.size() ? activate(z, act) : std::move(z);
  }
  return a;
}

// Accumulates parameter gradients into `grads`; returns d(input).
template <typename T>
Mat<T> mlp_backward(const std::vector<typename EmdModel<T>::Layer>& layers,
                    std::vector<typename EmdModel<T>::Layer>& grads, const MlpCache<T>& cache, Mat<T> d_out,
                    Activation act, bool need_input_grad) {
  for (std::size_t l = layers.size(); l-- > 0;) {
    if (l + 1 < layers.size()) d_out = d_out.cwiseProduct(activation_slope(cache.pre[l], act));
    grads[l].W.noalias() += cache.inputs[l].transpose() * d_out;
    grads[l].b += d_out.colwise().sum();
    if (l > 0 || need_input_grad) d_out = d_out * layers[l].W.transpose();
  }
  return d_out;
}

}  // namespace detail

/// Graph data converted to the model's scalar type.
template <typename T>
struct PreparedGraph {
  detail::Mat<T> x;
  Eigen::SparseMatrix<T> gather;  // n x n, normalized rho weights
  detail::Mat<T> edge_mean;      // n x E, rho-weighted mean of incoming edge features

  explicit PreparedGraph(const GraphInput& g) {
    validate_graph(g);
    x = g.node_features.cast<T>();
    gather = aggregation_matrix<T>(g, true, false);
    const Eigen::SparseMatrix<T> per_edge = aggregation_matrix<T>(g, true, true);
    edge_mean = per_edge * g.edge_features.cast<T>();
  }
};

template <typename T>
struct ForwardCache {
  detail::MlpCache<T> encoder;
  std::vector<detail::MlpCache<T>> rounds;
  detail::MlpCache<T> decoder;
  detail::Mat<T> output;  // n x 1, in [0, 1]
};

template <typename T>
detail::Mat<T> forward(const EmdModel<T>& model, const PreparedGraph<T>& g, ForwardCache<T>* cache = nullptr) {
  using M = detail::Mat<T>;
  const auto act = model.config.activation;
  const Eigen::Index n = g.x.rows();
  const int w = model.config.width;
  if (g.x.cols() != model.config.node_features || g.edge_mean.cols() != model.config.edge_features) {
    throw ContractError("graph feature widths do not match the model");
  }
  M h = detail::mlp_forward<T>(model.encoder, g.x, act, cache ? &cache->encoder : nullptr, "encoder");
  if (cache) cache->rounds.assign(model.config.rounds, {});
  M msg(n, 2 * w + model.config.edge_features);
  msg.rightCols(model.config.edge_features) = g.edge_mean;
  for (int k = 0; k < model.config.rounds; ++k) {
    msg.leftCols(w) = h;
    msg.middleCols(w, w) = g.gather * h;
    h += detail::mlp_forward<T>(model.messenger, msg, act, cache ? &cache->rounds[k] : nullptr,
                                "messenger.round" + std::to_string(k));
  }
  const M logits = detail::mlp_forward<T>(model.decoder, h, act, cache ? &cache->decoder : nullptr, "decoder");
  M out = (T(1) / (T(1) + (-logits.array()).exp())).matrix();
  if (cache) cache->output = out;
  return out;
}

/// Predicted values per node, in [0, 1].
template <typename T>
std::vector<double> predict(const EmdModel<T>& model, const GraphInput& g) {
  const PreparedGraph<T> pg(g);
  const auto out = forward(model, pg);
  std::vector<double> v(static_cast<std::size_t>(out.rows()));
  for (Eigen::Index i = 0; i < out.rows(); ++i) v[static_cast<std::size_t>(i)] = static_cast<double>(out(i, 0));
  return v;
}

// ---------------------------------------------------------------------------
// Loss and gradients

enum class LossMode { Absolute, Squared };

/// (1/n) sum alpha * |ref - pred| (or the squared residual).
inline double loss(std::span<const double> predicted, std::span<const double> reference, double alpha,
                   LossMode mode = LossMode::Absolute) {
  if (predicted.size() != reference.size()) throw ContractError("prediction and reference lengths differ");
  if (predicted.empty()) throw ContractError("loss needs at least one value");
  double sum = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double r = reference[i] - predicted[i];
    sum += mode == LossMode::Absolute ? std::abs(r) : r * r;
  }
  return alpha * sum / static_cast<double>(predicted.size());
}

template <typename T>
struct GradientResult {
  EmdModel<T> gradients;
  double loss = 0;
};

/// Exact reverse-mode gradients of the loss. Zero residuals get subgradient 0.
template <typename T>
GradientResult<T> backward(const EmdModel<T>& model, const PreparedGraph<T>& g, std::span<const double> reference,
                           double alpha, LossMode mode = LossMode::Absolute) {
  using M = detail::Mat<T>;
  const auto act = model.config.activation;
  const int w = model.config.width;
  ForwardCache<T> cache;
  const M out = forward(model, g, &cache);
  const auto n = static_cast<std::size_t>(out.rows());
  if (reference.size() != n) throw ContractError("reference length does not match node count");

  GradientResult<T> res{model.zeros_like(), 0.0};
  M d_out(out.rows(), 1);
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = static_cast<double>(out(static_cast<Eigen::Index>(i), 0));
    const double r = y - reference[i];
    double slope;
    if (mode == LossMode::Absolute) {
      sum += std::abs(r);
      slope = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
    } else {
      sum += r * r;
      slope = 2.0 * r;
    }
    d_out(static_cast<Eigen::Index>(i), 0) = static_cast<T>(alpha * slope / static_cast<double>(n));
  }
  res.loss = alpha * sum / static_cast<double>(n);
  // Through the sigmoid.
  const M d_logits = d_out.cwiseProduct((out.array() * (T(1) - out.array())).matrix());
  M d_h = detail::mlp_backward<T>(model.decoder, res.gradients.decoder, cache.decoder, d_logits, act, true);
  for (int k = model.config.rounds; k-- > 0;) {
    const M d_msg = detail::mlp_backward<T>(model.messenger, res.gradients.messenger, cache.rounds[k], d_h, act, true);
    d_h += d_msg.leftCols(w);
    d_h.noalias() += g.gather.transpose() * d_msg.middleCols(w, w);
  }
  detail::mlp_backward<T>(model.encoder, res.gradients.encoder, cache.encoder, d_h, act, false);
  return res;
}

// ---------------------------------------------------------------------------
// Training

struct TrainSchedule {
  int total_steps = 50000;
  int decay_start_step = 30000;
  double lr_initial = 1e-3;
  double lr_final = 1e-5;
  int batch_size = 1;
  double alpha = 1.0;
  LossMode loss_mode = LossMode::Absolute;
  std::uint64_t seed = 0;
  int checkpoint_interval = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    if (total_steps < 1) throw ContractError("total_steps must be >= 1");
    if (!(decay_start_step < total_steps) || decay_start_step < 0) {
      throw ContractError("decay_start_step must lie in [0, total_steps)");
    }
    if (!(lr_final < lr_initial) || !(lr_final > 0)) throw ContractError("need 0 < lr_final < lr_initial");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (!(alpha >= 0)) throw ContractError("alpha must be >= 0");
    if (checkpoint_interval < 1) throw ContractError("checkpoint_interval must be >= 1");
  }

  /// Constant until decay_start_step, then geometric interpolation to lr_final at total_steps.
  double lr_at(int step) const {
    if (step <= decay_start_step) return lr_initial;
    const double t = std::min(1.0, static_cast<double>(step - decay_start_step) / (total_steps - decay_start_step));
    return lr_initial * std::pow(lr_final / lr_initial, t);
  }
};

struct TrainingExample {
  GraphInput graph;
  std::vector<double> target;  // normalized reference per node
};

struct TrainRecord {
  int step = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainResult {
  EmdModel<float> model;
  std::vector<TrainRecord> history;
  int steps_completed = 0;
  bool aborted = false;
  std::string message;
};

/// Mean loss over the whole dataset.
template <typename T>
double dataset_loss(const EmdModel<T>& model, const std::vector<TrainingExample>& data, double alpha,
                    LossMode mode = LossMode::Absolute) {
  if (data.empty()) throw ContractError("empty dataset");
  double sum = 0;
  for (const auto& ex : data) sum += loss(predict(model, ex.graph), ex.target, alpha, mode);
  return sum / static_cast<double>(data.size());
}

using CheckpointFn = std::function<void(int step, const EmdModel<float>& model)>;

/// Adam over shuffled mini-batches of whole graphs. On a non-finite loss or
/// gradient, stops and returns the last checkpointed model with aborted set.
inline TrainResult train(EmdModel<float> model, const std::vector<TrainingExample>& data,
                         const TrainSchedule& schedule, const CheckpointFn& on_checkpoint = {}) {
  schedule.validate();
  if (data.empty()) throw ContractError("training dataset is empty");
  std::vector<PreparedGraph<float>> graphs;
  graphs.reserve(data.size());
  for (const auto& ex : data) {
    if (ex.target.size() != ex.graph.node_count()) throw ContractError("target length does not match node count");
    graphs.emplace_back(ex.graph);
  }
  using Mat = EmdModel<float>::Mat;
  TrainResult result;
  result.history.reserve(static_cast<std::size_t>(schedule.total_steps));
  EmdModel<float> first_moment = model.zeros_like(), second_moment = model.zeros_like();
  EmdModel<float> last_good = model;
  Rng rng(schedule.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();

  for (int step = 1; step <= schedule.total_steps; ++step) {
    EmdModel<float> grad = model.zeros_like();
    double batch_loss = 0;
    bool finite = true;
    try {
      for (int b = 0; b < schedule.batch_size; ++b) {
        if (cursor == order.size()) {
          for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
          rng.shuffle(order);
          cursor = 0;
        }
        const std::size_t idx = order[cursor++];
        auto g = backward(model, graphs[idx], data[idx].target, schedule.alpha, schedule.loss_mode);
        batch_loss += g.loss;
        auto dst = grad.parameters();
        auto src = g.gradients.parameters();
        for (std::size_t p = 0; p < dst.size(); ++p) *dst[p] += *src[p];
      }
    } catch (const NumericError& e) {
      finite = false;
      result.message = e.what();
    }
    batch_loss /= schedule.batch_size;
    if (finite && (!std::isfinite(batch_loss) || !grad.all_finite())) {
      finite = false;
      result.message = "non-finite loss or gradient at step " + std::to_string(step);
    }
    if (!finite) {
      spdlog::error("training aborted: {}; returning last checkpoint", result.message);
      result.model = std::move(last_good);
      result.aborted = true;
      return result;
    }
    const double lr = schedule.lr_at(step);
    const double bias1 = 1.0 - std::pow(schedule.beta1, step);
    const double bias2 = 1.0 - std::pow(schedule.beta2, step);
    const float inv_batch = 1.0f / static_cast<float>(schedule.batch_size);
    auto params = model.parameters();
    auto grads = grad.parameters();
    auto m1 = first_moment.parameters();
    auto m2 = second_moment.parameters();
    const auto b1 = static_cast<float>(schedule.beta1), b2 = static_cast<float>(schedule.beta2);
    const auto step_size = static_cast<float>(lr / bias1);
    const auto eps = static_cast<float>(schedule.adam_epsilon);
    const auto inv_sqrt_bias2 = static_cast<float>(1.0 / std::sqrt(bias2));
    for (std::size_t p = 0; p < params.size(); ++p) {
      const Mat g = *grads[p] * inv_batch;
      *m1[p] = b1 * *m1[p] + (1.0f - b1) * g;
      *m2[p] = b2 * *m2[p] + (1.0f - b2) * g.cwiseProduct(g);
      params[p]->array() -=
          step_size * m1[p]->array() / ((m2[p]->array().sqrt() * inv_sqrt_bias2) + eps);
    }
    result.history.push_back({step, lr, batch_loss});
    result.steps_completed = step;
    if (step % schedule.checkpoint_interval == 0 || step == schedule.total_steps) {
      last_good = model;
      if (on_checkpoint) on_checkpoint(step, model);
    }
  }
  result.model = std::move(model);
  return result;
}

inline std::string history_csv(const std::vector<TrainRecord>& history) {
  std::string out = "step,lr,loss\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.step, r.lr, r.loss);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model file: "NSHDFEMD", u32 version, rounds, activation, node features,
// edge features, width, layer count, then per layer u32 rows/cols followed by
// the float32 weights (column-major) and biases. Little-endian.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw ParseError("model file truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

inline constexpr std::string_view kModelMagic = "NSHDFEMD";

}  // namespace detail

inline std::string save_model(const EmdModel<float>& model) {
  static_assert(std::endian::native == std::endian::little, "model files are written on little-endian hosts");
  std::string out(detail::kModelMagic);
  detail::put_u32(out, model.version);
  detail::put_u32(out, static_cast<std::uint32_t>(model.config.rounds));
  detail::put_u32(out, static_cast<std::uint32_t>(model.config.activation));
  detail::put_u32(out, static_cast<std::uint32_t>(model.config.node_features));
  detail::put_u32(out, static_cast<std::uint32_t>(model.config.edge_features));
  detail::put_u32(out, static_cast<std::uint32_t>(model.config.width));
  const auto params = model.parameters();
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p->rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(p->cols()));
  }
  for (const auto* p : params) {
    out.append(reinterpret_cast<const char*>(p->data()), static_cast<std::size_t>(p->size()) * sizeof(float));
  }
  return out;
}

inline EmdModel<float> load_model(std::string_view bytes) {
  if (bytes.substr(0, detail::kModelMagic.size()) != detail::kModelMagic) throw ParseError("not a model file");
  std::size_t pos = detail::kModelMagic.size();
  const std::uint32_t version = detail::get_u32(bytes, pos);
  if (version != kModelVersion) throw ParseError("unsupported model version " + std::to_string(version));
  ModelConfig cfg;
  cfg.rounds = static_cast<int>(detail::get_u32(bytes, pos));
  const std::uint32_t act = detail::get_u32(bytes, pos);
  if (act > 2) throw ParseError("unknown activation code");
  cfg.activation = static_cast<Activation>(act);
  cfg.node_features = static_cast<int>(detail::get_u32(bytes, pos));
  cfg.edge_features = static_cast<int>(detail::get_u32(bytes, pos));
  cfg.width = static_cast<int>(detail::get_u32(bytes, pos));
  if (cfg.width < 1 || cfg.width > 1 << 16 || cfg.node_features < 1 || cfg.node_features > 1 << 16 ||
      cfg.edge_features > 1 << 16 || cfg.rounds > 1 << 16) {
    throw ParseError("implausible model dimensions");
  }
  EmdModel<float> model = EmdModel<float>::create(cfg, 0, true);
  auto params = model.parameters();
  if (detail::get_u32(bytes, pos) != params.size()) throw ParseError("layer count mismatch");
  for (auto* p : params) {
    const auto rows = detail::get_u32(bytes, pos), cols = detail::get_u32(bytes, pos);
    if (rows != p->rows() || cols != p->cols()) throw ParseError("layer shape mismatch");
  }
  for (auto* p : params) {
    const std::size_t len = static_cast<std::size_t>(p->size()) * sizeof(float);
    if (pos + len > bytes.size()) throw ParseError("model file truncated");
    std::memcpy(p->data(), bytes.data() + pos, len);
    pos += len;
  }
  if (pos != bytes.size()) throw ParseError("trailing bytes after model data");
  if (!model.all_finite()) throw ParseError("model contains non-finite weights");
  return model;
}

// ---------------------------------------------------------------------------
// Inference

/// A mesh posed in its canonical frame with its sample graph.
struct MeshGraph {
  CanonicalFrame frame;
  Mesh canonical;
  SampleSet samples;
  GraphInput graph;
};

/// Sampling happens in the canonical frame so that the samples, and hence the
/// prediction, follow the surface under rigid motion.
inline MeshGraph build_mesh_graph(const Mesh& mesh, double radius, std::uint64_t seed, int threads = 1) {
  MeshGraph mg;
  mg.frame = canonical_frame(mesh);
  mg.canonical = to_canonical(mesh, mg.frame);
  mg.samples = sample_surface(mg.canonical, radius, seed, threads);
  if (mg.samples.size() < 2) {
    throw InferenceError("only " + std::to_string(mg.samples.size()) +
                         " sample(s) at radius " + std::to_string(radius) + "; try a smaller radius");
  }
  mg.graph = build_graph_input(mg.samples, mg.canonical);
  return mg;
}

/// Inverse-distance weighting from the 3 nearest samples to each query point.
inline std::vector<double> interpolate_from_samples(std::span<const Vec3> samples, std::span<const double> values,
                                                    std::span<const Vec3> queries, double cell_size) {
  const PointGrid grid(samples, cell_size);
  std::vector<double> out(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto near = grid.nearest(queries[q], 3);
    double wsum = 0, vsum = 0;
    bool exact = false;
    for (int s : near) {
      const double d = (samples[s] - queries[q]).norm();
      if (d < 1e-12) {
        out[q] = values[s];
        exact = true;
        break;
      }
      wsum += 1.0 / d;
      vsum += values[s] / d;
    }
    if (!exact) out[q] = vsum / wsum;
  }
  return out;
}

/// Per-face predicted field, normalized to [0, 1].
inline ScalarField infer_field(const EmdModel<float>& model, const Mesh& mesh, double radius, std::uint64_t seed,
                               int threads = 1) {
  MeshGraph mg = [&] {
    try {
      return build_mesh_graph(mesh, radius, seed, threads);
    } catch (const GraphError& e) {
      throw InferenceError(std::string(e.what()) + "; try a smaller radius");
    }
  }();
  const std::vector<double> per_sample = predict(model, mg.graph);
  const FaceGeometry geo = face_geometry(mg.canonical);
  ScalarField field;
  field.domain = FieldDomain::PerFace;
  field.provenance = FieldProvenance::Predicted;
  field.normalized = true;
  field.values = interpolate_from_samples(mg.samples.positions, per_sample, geo.centroids, radius);
  return field;
}

}  // namespace nshdf
