#pragma once

// HTTP facade over a pipeline Session: upload a mesh once, compute its field
// once, then re-partition and refine it cheaply.

#include <atomic>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

// Eigen first: httplib pulls in <resolv.h>, whose `_res` macro clashes with Eigen parameter names.
#include "neuralshdf/pipeline.hpp"

#include <httplib.h>

namespace nshdf {

struct ServiceOptions {
  std::size_t upload_limit = 256u << 20;
  std::filesystem::path persist_dir;  // empty: in-memory only
  std::filesystem::path model_path;   // enables source=model
  std::string cors_origin = "*";
  int threads = 1;
  std::size_t inline_label_limit = 2'000'000;
};

/// A handler's outcome, independent of the HTTP library.
struct Reply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";

  static Reply json(int status, const nlohmann::json& j) { return {status, j.dump(), "application/json"}; }
};

namespace detail {

struct NotFound : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidParams : std::runtime_error {
  nlohmann::json fields;
  explicit InvalidParams(nlohmann::json f) : std::runtime_error("invalid parameters"), fields(std::move(f)) {}
};

struct BadRequest : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Typed access to a JSON request body that collects one message per bad field.
class ParamReader {
 public:
  ParamReader(const nlohmann::json& body, std::string prefix = {}) : body_(body), prefix_(std::move(prefix)) {
    if (!body_.is_object()) errors_[prefix_.empty() ? "body" : prefix_] = "must be a JSON object";
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!body_.is_object() || !body_.contains(key) || body_[key].is_null()) return fallback;
    const auto& v = body_[key];
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return fail(key, "must be a boolean", fallback);
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) return fail(key, "must be an integer", fallback);
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
        return fail(key, "must be >= 0", fallback);
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return fail(key, "must be a number", fallback);
    } else {
      if (!v.is_string()) return fail(key, "must be a string", fallback);
    }
    return v.get<T>();
  }

  void check(const std::string& key, bool ok, const std::string& message) {
    if (!ok && !errors_.contains(name(key))) errors_[name(key)] = message;
  }

  void merge(const ParamReader& other) {
    for (const auto& [k, v] : other.errors_.items()) errors_[k] = v;
  }

  void require(const std::string& key) {
    if (!body_.is_object() || !body_.contains(key)) errors_[name(key)] = "is required";
  }

  void throw_if_invalid() const {
    if (!errors_.empty()) throw InvalidParams(errors_);
  }

 private:
  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  template <class T>
  T fail(const std::string& key, const char* message, T fallback) {
    errors_[name(key)] = message;
    return fallback;
  }

  const nlohmann::json& body_;
  std::string prefix_;
  nlohmann::json errors_ = nlohmann::json::object();
};

inline nlohmann::json parse_body(const std::string& body) {
  if (body.find_first_not_of(" \t\r\n") == std::string::npos) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw BadRequest(std::string("malformed JSON: ") + e.what());
  }
}

inline void write_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

class SegService {
 public:
  explicit SegService(ServiceOptions options = {}) : options_(std::move(options)), session_(options_.threads) {
    if (!options_.persist_dir.empty()) restore();
  }

  const ServiceOptions& options() const { return options_; }
  Session& session() { return session_; }

  Reply health() const { return Reply::json(200, {{"status", "ok"}, {"meshes", session_.mesh_count()}}); }

  Reply upload(const std::string& bytes) {
    return guarded([&] {
      Mesh mesh = load_mesh(bytes, sniff_format(bytes));
      auto res = session_.add_mesh(std::move(mesh));
      {
        std::lock_guard lock(meta_mutex_);
        meta_[res->id] = std::make_shared<MeshMeta>();
      }
      persist_mesh(*res);
      spdlog::info("mesh {}: {} vertices, {} faces", res->id, res->mesh.vertices.size(), res->mesh.faces.size());
      return Reply::json(201, mesh_summary(*res));
    });
  }

  Reply compute_field(const std::string& mesh_id, const std::string& body) {
    return guarded([&] {
      auto [res, meta] = lookup(mesh_id);
      const PipelineConfig cfg = field_config(detail::parse_body(body));
      std::lock_guard op(meta->op);
      const FieldHandle fh = session_.field(*res, cfg);
      remember_field(*res, *meta, fh.id, cfg);
      return Reply::json(200, {{"field_id", fh.id}, {"stats", field_stats(*res, *fh.field)}, {"elapsed_ms", fh.elapsed_ms}});
    });
  }

  Reply segment(const std::string& mesh_id, const std::string& body) {
    return guarded([&] {
      auto [res, meta] = lookup(mesh_id);
      const auto j = detail::parse_body(body);
      detail::ParamReader r(j);
      const std::string field_id = r.get<std::string>("field_id", "");
      r.throw_if_invalid();
      PipelineConfig cfg = field_id.empty() ? field_config(nlohmann::json::object()) : known_field(*meta, field_id);
      apply_partition_params(j, cfg);
      std::lock_guard op(meta->op);
      const SegmentResult out = session_.segment(*res, cfg);
      remember_field(*res, *meta, out.field_id, cfg);
      record_segmentation(*res, *meta, out);
      return Reply::json(200, segmentation_payload(*res, out));
    });
  }

  Reply refine(const std::string& mesh_id, const std::string& seg_id, const std::string& body) {
    return guarded([&] {
      auto [res, meta] = lookup(mesh_id);
      const auto parent = session_.find_segmentation(*res, seg_id);
      if (!parent) throw detail::NotFound("unknown segmentation");
      std::string field_id;
      {
        std::lock_guard lock(meta_mutex_);
        const auto it = meta->seg_fields.find(seg_id);
        if (it != meta->seg_fields.end()) field_id = it->second;
      }
      PipelineConfig cfg = field_id.empty() ? field_config(nlohmann::json::object()) : known_field(*meta, field_id);
      const auto j = detail::parse_body(body);
      detail::ParamReader r(j);
      r.require("part");
      const int part = r.get<int>("part", -1);
      cfg.max_depth = r.get<int>("max_depth", cfg.max_depth);
      const std::string policy = r.get<std::string>("field_policy", "recompute");
      r.check("field_policy", policy == "recompute" || policy == "reuse", "must be 'recompute' or 'reuse'");
      r.check("part", part >= 0 && part < parent->part_count,
              "must be a part id in [0, " + std::to_string(parent->part_count) + ")");
      r.check("max_depth", cfg.max_depth >= 0, "must be >= 0");
      r.throw_if_invalid();
      cfg.refine_field = policy == "reuse" ? RefineFieldPolicy::Reuse : RefineFieldPolicy::Recompute;
      apply_partition_params(j, cfg);
      std::lock_guard op(meta->op);
      SegmentResult out = session_.refine(*res, *parent, part, cfg);
      if (out.field_id.empty()) out.field_id = field_id;
      record_segmentation(*res, *meta, out);
      return Reply::json(200, segmentation_payload(*res, out));
    });
  }

  Reply geometry(const std::string& mesh_id) {
    return guarded([&] {
      auto [res, meta] = lookup(mesh_id);
      std::vector<double> positions;
      positions.reserve(res->mesh.vertices.size() * 3);
      for (const auto& v : res->mesh.vertices) positions.insert(positions.end(), {v.x(), v.y(), v.z()});
      std::vector<int> faces;
      faces.reserve(res->mesh.faces.size() * 3);
      for (const auto& f : res->mesh.faces) faces.insert(faces.end(), {f[0], f[1], f[2]});
      return Reply::json(200, {{"id", res->id}, {"positions", positions}, {"faces", faces}});
    });
  }

  Reply field_values(const std::string& mesh_id, const std::string& field_id) {
    return guarded([&] {
      auto [res, meta] = lookup(mesh_id);
      const auto f = session_.find_field(*res, field_id);
      if (!f) throw detail::NotFound("unknown field");
      nlohmann::json j = field_to_json(*f);
      j["field_id"] = field_id;
      return Reply::json(200, j);
    });
  }

  /// Labels as little-endian int32, for segmentations too large to inline.
  Reply labels_binary(const std::string& mesh_id, const std::string& seg_id) {
    return guarded([&] {
      auto [res, meta] = lookup(mesh_id);
      const auto seg = session_.find_segmentation(*res, seg_id);
      if (!seg) throw detail::NotFound("unknown segmentation");
      std::string bytes(seg->labels.size() * 4, '\0');
      for (std::size_t i = 0; i < seg->labels.size(); ++i) {
        const auto v = static_cast<std::uint32_t>(seg->labels[i]);
        for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((v >> (8 * b)) & 0xff);
      }
      return Reply{200, std::move(bytes), "application/octet-stream"};
    });
  }

  Reply erase(const std::string& mesh_id) {
    return guarded([&] {
      if (!session_.erase(mesh_id)) throw detail::NotFound("unknown mesh");
      {
        std::lock_guard lock(meta_mutex_);
        meta_.erase(mesh_id);
      }
      if (!options_.persist_dir.empty()) std::filesystem::remove_all(mesh_dir(mesh_id));
      return Reply::json(200, {{"deleted", mesh_id}});
    });
  }

  /// Registers every route, CORS handling and JSON error bodies on `server`.
  void mount(httplib::Server& server) {
    server.set_payload_max_length(options_.upload_limit);
    server.set_default_headers({{"Access-Control-Allow-Origin", options_.cors_origin},
                                {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    auto send = [](httplib::Response& res, const Reply& r) { res.set_content(r.body, r.content_type); res.status = r.status; };
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.Get("/healthz", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    server.Post("/meshes", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, upload(req.body));
    });
    server.Post(R"(/meshes/([^/]+)/shdf)", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, compute_field(req.matches[1], req.body));
    });
    server.Post(R"(/meshes/([^/]+)/segment)", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, segment(req.matches[1], req.body));
    });
    server.Post(R"(/meshes/([^/]+)/segments/([^/]+)/refine)",
                [this, send](const httplib::Request& req, httplib::Response& res) {
                  send(res, refine(req.matches[1], req.matches[2], req.body));
                });
    server.Get(R"(/meshes/([^/]+)/segments/([^/]+)/labels)",
               [this, send](const httplib::Request& req, httplib::Response& res) {
                 send(res, labels_binary(req.matches[1], req.matches[2]));
               });
    server.Get(R"(/meshes/([^/]+)/geometry)", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, geometry(req.matches[1]));
    });
    server.Get(R"(/meshes/([^/]+)/fields/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, field_values(req.matches[1], req.matches[2]));
    });
    server.Delete(R"(/meshes/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, erase(req.matches[1]));
    });
    server.set_error_handler([this](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      std::string message = httplib::status_message(res.status);
      if (res.status == 413) message = "upload exceeds " + std::to_string(options_.upload_limit) + " bytes";
      res.set_content(nlohmann::json{{"error", message}}.dump(), "application/json");
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string message = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        message = e.what();
      } catch (...) {
      }
      res.status = 500;
      res.set_content(nlohmann::json{{"error", message}}.dump(), "application/json");
    });
  }

 private:
  struct MeshMeta {
    std::mutex op;
    std::map<std::string, PipelineConfig> field_configs;  // field id -> config
    std::map<std::string, std::string> seg_fields;        // seg id -> field id
  };

  template <class Fn>
  Reply guarded(Fn&& fn) {
    try {
      return fn();
    } catch (const detail::NotFound& e) {
      return Reply::json(404, {{"error", e.what()}});
    } catch (const detail::BadRequest& e) {
      return Reply::json(400, {{"error", e.what()}});
    } catch (const detail::InvalidParams& e) {
      return Reply::json(422, {{"error", e.what()}, {"fields", e.fields}});
    } catch (const RefinementDeclined& e) {
      return Reply::json(422, {{"error", e.what()}, {"declined", true}});
    } catch (const StageError& e) {
      return Reply::json(422, {{"error", e.what()}, {"stage", e.stage()}});
    } catch (const ParseError& e) {
      return Reply::json(422, {{"error", e.what()}, {"line", e.line()}});
    } catch (const ContractError& e) {
      return Reply::json(422, {{"error", e.what()}});
    } catch (const Error& e) {
      return Reply::json(422, {{"error", e.what()}});
    } catch (const std::exception& e) {
      spdlog::error("request failed: {}", e.what());
      return Reply::json(500, {{"error", e.what()}});
    }
  }

  std::pair<std::shared_ptr<MeshResource>, std::shared_ptr<MeshMeta>> lookup(const std::string& id) {
    auto res = session_.find(id);
    std::shared_ptr<MeshMeta> meta;
    {
      std::lock_guard lock(meta_mutex_);
      if (const auto it = meta_.find(id); it != meta_.end()) meta = it->second;
    }
    if (!res || !meta) throw detail::NotFound("unknown mesh");
    return {res, meta};
  }

  PipelineConfig known_field(MeshMeta& meta, const std::string& field_id) {
    std::lock_guard lock(meta_mutex_);
    const auto it = meta.field_configs.find(field_id);
    if (it == meta.field_configs.end()) throw detail::NotFound("unknown field");
    return it->second;
  }

  PipelineConfig field_config(const nlohmann::json& j) const {
    PipelineConfig cfg;
    cfg.threads = options_.threads;
    detail::ParamReader r(j);
    const std::string source = r.get<std::string>("source", "oracle");
    r.check("source", source == "oracle" || source == "model", "must be 'oracle' or 'model'");
    r.check("source", source != "model" || !options_.model_path.empty(), "no model is configured on this server");
    cfg.sampling_radius = r.get<double>("radius", 0.0);
    r.check("radius", cfg.sampling_radius >= 0, "must be >= 0");
    if (j.is_object() && j.contains("params")) {
      detail::ParamReader p(j["params"], "params");
      ShdfParams& s = cfg.shdf;
      s.cone_half_angle = p.get<double>("cone_half_angle", s.cone_half_angle);
      s.rays_per_point = p.get<int>("rays_per_point", s.rays_per_point);
      s.outlier_std_factor = p.get<double>("outlier_std_factor", s.outlier_std_factor);
      s.normalization_alpha = p.get<double>("normalization_alpha", s.normalization_alpha);
      s.smoothing_iterations = p.get<int>("smoothing_iterations", s.smoothing_iterations);
      s.smoothing_sigma = p.get<double>("smoothing_sigma", s.smoothing_sigma);
      s.seed = p.get<std::uint64_t>("seed", s.seed);
      const std::string agg = p.get<std::string>("aggregator", "weighted_mean");
      p.check("aggregator", agg == "weighted_mean" || agg == "median", "must be 'weighted_mean' or 'median'");
      s.aggregator = agg == "median" ? ShdfAggregator::Median : ShdfAggregator::WeightedMean;
      p.check("cone_half_angle", s.cone_half_angle > 0 && s.cone_half_angle < std::numbers::pi / 2,
              "must lie in (0, pi/2)");
      p.check("rays_per_point", s.rays_per_point >= 1, "must be >= 1");
      p.check("outlier_std_factor", s.outlier_std_factor >= 0, "must be >= 0");
      p.check("normalization_alpha", s.normalization_alpha > 0, "must be > 0");
      p.check("smoothing_iterations", s.smoothing_iterations >= 0, "must be >= 0");
      r.merge(p);
    }
    r.throw_if_invalid();
    if (source == "model") {
      cfg.source = ShdfSource::Model;
      cfg.model_path = options_.model_path;
    }
    return cfg;
  }

  static void apply_partition_params(const nlohmann::json& j, PipelineConfig& cfg) {
    detail::ParamReader r(j);
    PartitionParams& p = cfg.partition;
    p.k = r.get<int>("k", p.k);
    p.lambda_smooth = r.get<double>("lambda_smooth", p.lambda_smooth);
    p.concavity_bias = r.get<double>("concavity_bias", p.concavity_bias);
    p.min_part_faces = r.get<int>("min_part_faces", p.min_part_faces);
    p.max_expansion_cycles = r.get<int>("max_expansion_cycles", p.max_expansion_cycles);
    p.seed = r.get<std::uint64_t>("seed", p.seed);
    cfg.smooth = r.get<bool>("smooth_boundaries", cfg.smooth);
    r.check("k", p.k >= 1, "must be >= 1");
    r.check("lambda_smooth", p.lambda_smooth >= 0, "must be >= 0");
    r.check("concavity_bias", p.concavity_bias >= 0, "must be >= 0");
    r.check("min_part_faces", p.min_part_faces >= 1, "must be >= 1");
    r.check("max_expansion_cycles", p.max_expansion_cycles >= 0, "must be >= 0");
    r.throw_if_invalid();
  }

  nlohmann::json field_stats(MeshResource& res, const ScalarField& f) const {
    double mean = 0;
    for (double v : f.values) mean += v;
    if (!f.values.empty()) mean /= static_cast<double>(f.values.size());
    std::lock_guard lock(res.mutex);
    return {{"min", f.min()},
            {"max", f.max()},
            {"mean", mean},
            {"constant", f.constant},
            {"field_computations", res.field_computations}};
  }

  nlohmann::json segmentation_payload(MeshResource& res, const SegmentResult& out) const {
    const Segmentation& s = out.segmentation;
    nlohmann::json j = {{"seg_id", out.id},
                        {"field_id", out.field_id},
                        {"part_count", s.part_count},
                        {"part_cluster", s.part_cluster},
                        {"energy", s.energy},
                        {"depth", s.depth},
                        {"params", to_json(s.params)},
                        {"elapsed_ms", out.timings.total_ms}};
    if (s.labels.size() <= options_.inline_label_limit) {
      j["labels"] = s.labels;
    } else {
      j["labels_url"] = "/meshes/" + res.id + "/segments/" + out.id + "/labels";
    }
    std::lock_guard lock(res.mutex);
    j["stats"] = {{"field_computations", res.field_computations}};
    return j;
  }

  /// Keeps the field's config so later requests can name the field by id.
  void remember_field(MeshResource& res, MeshMeta& meta, const std::string& id, PipelineConfig cfg) {
    cfg.partition = PartitionParams{};
    cfg.smooth = true;
    {
      std::lock_guard lock(meta_mutex_);
      if (!meta.field_configs.emplace(id, cfg).second) return;
    }
    if (const auto f = session_.find_field(res, id)) persist_field(res, id, cfg, *f);
  }

  void record_segmentation(MeshResource& res, MeshMeta& meta, const SegmentResult& out) {
    {
      std::lock_guard lock(meta_mutex_);
      meta.seg_fields[out.id] = out.field_id;
    }
    if (options_.persist_dir.empty()) return;
    detail::write_atomic(mesh_dir(res.id) / "segmentations" / (out.id + ".json"),
                         nlohmann::json{{"field_id", out.field_id},
                                        {"segmentation", segmentation_to_json(out.segmentation)}}
                             .dump());
  }

  static nlohmann::json mesh_summary(const MeshResource& res) {
    const ManifoldReport& m = res.report;
    return {{"id", res.id},
            {"vertex_count", res.mesh.vertices.size()},
            {"face_count", res.mesh.faces.size()},
            {"manifold",
             {{"is_closed", m.is_closed},
              {"boundary_edge_count", m.boundary_edge_count},
              {"non_manifold_edge_count", m.non_manifold_edge_count},
              {"euler_characteristic", m.euler_characteristic},
              {"component_count", m.component_count},
              {"genus", m.genus()}}}};
  }

  // Persistence: <dir>/meshes/<id>/{mesh.obj, fields/<fid>.json, segmentations/<sid>.json}

  std::filesystem::path mesh_dir(const std::string& id) const { return options_.persist_dir / "meshes" / id; }

  void persist_mesh(const MeshResource& res) const {
    if (options_.persist_dir.empty()) return;
    detail::write_atomic(mesh_dir(res.id) / "mesh.obj", save_obj(res.mesh));
  }

  void persist_field(const MeshResource& res, const std::string& id, const PipelineConfig& cfg,
                     const ScalarField& f) const {
    if (options_.persist_dir.empty()) return;
    detail::write_atomic(mesh_dir(res.id) / "fields" / (id + ".json"),
                         nlohmann::json{{"config", cfg.to_json()}, {"field", field_to_json(f)}}.dump());
  }

  void restore() {
    namespace fs = std::filesystem;
    const fs::path root = options_.persist_dir / "meshes";
    if (!fs::is_directory(root)) return;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.is_directory()) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
      const std::string id = dir.filename().string();
      try {
        auto res = session_.add_mesh(load_mesh_file(dir / "mesh.obj"), id);
        auto meta = std::make_shared<MeshMeta>();
        if (fs::is_directory(dir / "fields")) {
          for (const auto& e : fs::directory_iterator(dir / "fields")) {
            if (e.path().extension() != ".json") continue;
            const auto j = nlohmann::json::parse(read_file(e.path()));
            PipelineConfig cfg = PipelineConfig::from_json(j.at("config"));
            cfg.threads = options_.threads;
            const std::string fid = session_.adopt_field(*res, cfg, field_from_json(j.at("field")));
            meta->field_configs.emplace(fid, cfg);
          }
        }
        if (fs::is_directory(dir / "segmentations")) {
          for (const auto& e : fs::directory_iterator(dir / "segmentations")) {
            if (e.path().extension() != ".json") continue;
            const auto j = nlohmann::json::parse(read_file(e.path()));
            const std::string sid = e.path().stem().string();
            session_.adopt_segmentation(*res, sid, segmentation_from_json(j.at("segmentation")));
            meta->seg_fields[sid] = j.value("field_id", std::string());
          }
        }
        std::lock_guard lock(meta_mutex_);
        meta_[id] = meta;
        spdlog::info("restored mesh {} ({} field(s), {} segmentation(s))", id, meta->field_configs.size(),
                     meta->seg_fields.size());
      } catch (const std::exception& e) {
        spdlog::warn("skipping persisted mesh '{}': {}", id, e.what());
        session_.erase(id);
      }
    }
  }

  ServiceOptions options_;
  Session session_;
  mutable std::mutex meta_mutex_;
  std::map<std::string, std::shared_ptr<MeshMeta>> meta_;
};

}  // namespace nshdf
