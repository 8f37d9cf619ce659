// Command-line front end: fields, sampling, training, inference,
// segmentation, refinement, grid search, data generation and benchmarks.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "neuralshdf/dataset.hpp"
#include "neuralshdf/pipeline.hpp"
#include "neuralshdf/primitives.hpp"

namespace fs = std::filesystem;
using namespace nshdf;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitProcessing = 2;

struct Common {
  int threads = 1;
  std::uint64_t seed = 0;
  int verbosity = 0;
  bool dry_run = false;
};

struct FieldOpts {
  int rays = 30;
  double cone_degrees = 60;
  double alpha = 4;
  int smooth_iterations = 3;
  double smooth_sigma = 0.1;
  std::string aggregator = "mean";

  ShdfParams params(std::uint64_t seed) const {
    ShdfParams p;
    p.rays_per_point = rays;
    p.cone_half_angle = cone_degrees * std::numbers::pi / 180.0;
    p.normalization_alpha = alpha;
    p.smoothing_iterations = smooth_iterations;
    p.smoothing_sigma = smooth_sigma;
    p.aggregator = aggregator == "median" ? ShdfAggregator::Median : ShdfAggregator::WeightedMean;
    p.seed = seed;
    return p;
  }

  void add(CLI::App* app) {
    app->add_option("--rays", rays, "Rays per point")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--cone-angle", cone_degrees, "Cone half-angle in degrees")->capture_default_str();
    app->add_option("--alpha", alpha, "Log-normalization alpha")->capture_default_str();
    app->add_option("--smooth-iterations", smooth_iterations, "Bilateral smoothing iterations")
        ->capture_default_str();
    app->add_option("--smooth-sigma", smooth_sigma, "Bilateral smoothing value sigma")->capture_default_str();
    app->add_option("--aggregator", aggregator, "Ray aggregation")
        ->check(CLI::IsMember({"mean", "median"}))
        ->capture_default_str();
  }
};

struct PartitionOpts {
  int k = 2;
  double lambda = 1.0;
  double bias = 2.0;
  int min_part_faces = 5;
  int max_cycles = 10;
  bool no_smooth = false;

  PartitionParams params(std::uint64_t seed) const {
    PartitionParams p;
    p.k = k;
    p.lambda_smooth = lambda;
    p.concavity_bias = bias;
    p.min_part_faces = min_part_faces;
    p.max_expansion_cycles = max_cycles;
    p.seed = seed;
    return p;
  }

  void add(CLI::App* app) {
    app->add_option("--k", k, "Number of clusters")->capture_default_str();
    app->add_option("--lambda", lambda, "Smoothness weight")->capture_default_str();
    app->add_option("--concavity-bias", bias, "Concavity bias of the edge weights")->capture_default_str();
    app->add_option("--min-part-faces", min_part_faces, "Smaller parts are merged")->capture_default_str();
    app->add_option("--max-cycles", max_cycles, "Alpha-expansion cycles")->capture_default_str();
    app->add_flag("--no-smooth", no_smooth, "Skip boundary smoothing");
  }
};

struct SourceOpts {
  std::string source = "oracle";
  std::string model;
  double radius = 0;

  void add(CLI::App* app) {
    app->add_option("--source", source, "Field source")
        ->check(CLI::IsMember({"oracle", "model"}))
        ->capture_default_str();
    app->add_option("--model", model, "Model file for --source model");
    app->add_option("--radius", radius, "Sampling radius (0: 5% of the bounding-box diagonal)")
        ->capture_default_str();
  }
};

Mesh load_input_mesh(const std::string& spec) {
  if (spec.rfind("builtin:", 0) == 0) return primitives::by_name(spec.substr(8));
  if (!fs::exists(spec)) throw Error("no such file: " + spec);
  return load_mesh_file(spec);
}

void emit(const std::string& path, const std::string& bytes) {
  if (path.empty() || path == "-") {
    std::cout << bytes;
    std::cout.flush();
  } else {
    write_file(path, bytes);
  }
}

std::string dump(const nlohmann::json& j) { return j.dump() + "\n"; }

PipelineConfig pipeline_config(const Common& c, const FieldOpts& f, const PartitionOpts& p, const SourceOpts& s) {
  PipelineConfig cfg;
  cfg.source = parse_source(s.source);
  cfg.model_path = s.model;
  cfg.shdf = f.params(c.seed);
  cfg.sampling_radius = s.radius;
  cfg.partition = p.params(c.seed);
  cfg.smooth = !p.no_smooth;
  cfg.threads = c.threads;
  return cfg;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (item.empty() || used != item.size()) throw CLI::ValidationError("list", "bad number '" + item + "'");
    out.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

void print_dry_run(const std::string& command, const nlohmann::json& config) {
  std::cout << nlohmann::json{{"command", command}, {"config", config}}.dump(2) << "\n";
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shape-diameter mesh segmentation toolkit"};
  app.require_subcommand(1, 1);
  app.set_config("--config", "", "key=value file layered under the command-line flags");
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--threads", common.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--seed", common.seed, "Random seed")->capture_default_str();
    sub->add_flag("-v,--verbose", common.verbosity, "More logging (repeatable)");
    sub->add_flag("--dry-run", common.dry_run, "Validate inputs and print the resolved config");
  };

  // shdf
  std::string mesh_arg, out_path, ply_path;
  bool raw = false;
  FieldOpts field_opts;
  auto* shdf_cmd = app.add_subcommand("shdf", "Oracle shape-diameter field of a mesh");
  shdf_cmd->add_option("mesh", mesh_arg, "Mesh file (OBJ/PLY) or builtin:NAME[:LEVEL]")->required();
  shdf_cmd->add_option("-o,--output", out_path, "Field JSON (default stdout)");
  shdf_cmd->add_option("--ply", ply_path, "Also write a PLY with a per-face scalar");
  shdf_cmd->add_flag("--raw", raw, "Skip normalization and smoothing");
  field_opts.add(shdf_cmd);
  add_common(shdf_cmd);

  // sample
  double radius = 0;
  auto* sample_cmd = app.add_subcommand("sample", "Poisson-disk samples with neighborhoods and densities");
  sample_cmd->add_option("mesh", mesh_arg, "Mesh file or builtin:NAME[:LEVEL]")->required();
  sample_cmd->add_option("-o,--output", out_path, "Samples JSON (default stdout)");
  sample_cmd->add_option("--radius", radius, "Sampling radius (0: 5% of the bounding-box diagonal)")
      ->capture_default_str();
  add_common(sample_cmd);

  // train
  std::string data_dir, history_path, activation = "silu", loss_name = "abs";
  TrainSchedule schedule;
  ModelConfig model_cfg;
  auto* train_cmd = app.add_subcommand("train", "Train the encode-message-decode network on a dataset");
  train_cmd->add_option("--data", data_dir, "Dataset directory from gen-data")->required();
  train_cmd->add_option("-o,--output", out_path, "Model file")->required();
  train_cmd->add_option("--steps", schedule.total_steps, "Total steps")->capture_default_str();
  auto* decay_opt = train_cmd->add_option("--decay-start", schedule.decay_start_step,
                                          "Step where the learning-rate decay starts (default: 60% of --steps)")
      ->capture_default_str();
  train_cmd->add_option("--lr", schedule.lr_initial, "Initial learning rate")->capture_default_str();
  train_cmd->add_option("--lr-final", schedule.lr_final, "Final learning rate")->capture_default_str();
  train_cmd->add_option("--batch", schedule.batch_size, "Graphs per step")->capture_default_str();
  train_cmd->add_option("--loss-alpha", schedule.alpha, "Loss scale alpha")->capture_default_str();
  train_cmd->add_option("--loss", loss_name, "Loss")->check(CLI::IsMember({"abs", "sq"}))->capture_default_str();
  train_cmd->add_option("--checkpoint-interval", schedule.checkpoint_interval, "Steps between checkpoints")
      ->capture_default_str();
  train_cmd->add_option("--width", model_cfg.width, "Hidden width")->capture_default_str();
  train_cmd->add_option("--rounds", model_cfg.rounds, "Message-passing rounds")->capture_default_str();
  train_cmd->add_option("--activation", activation, "Activation")
      ->check(CLI::IsMember({"relu", "tanh", "silu"}))
      ->capture_default_str();
  train_cmd->add_option("--history", history_path, "Write the loss history as CSV");
  add_common(train_cmd);

  // infer
  std::string model_path;
  auto* infer_cmd = app.add_subcommand("infer", "Predicted field of a mesh from a trained model");
  infer_cmd->add_option("mesh", mesh_arg, "Mesh file or builtin:NAME[:LEVEL]")->required();
  infer_cmd->add_option("--model", model_path, "Model file")->required();
  infer_cmd->add_option("-o,--output", out_path, "Field JSON (default stdout)");
  infer_cmd->add_option("--ply", ply_path, "Also write a PLY with a per-face scalar");
  infer_cmd->add_option("--radius", radius, "Sampling radius (0: 5% of the bounding-box diagonal)")
      ->capture_default_str();
  add_common(infer_cmd);

  // segment
  PartitionOpts part_opts;
  SourceOpts source_opts;
  std::string manifest_path;
  auto* segment_cmd = app.add_subcommand("segment", "Segment a mesh");
  segment_cmd->add_option("mesh", mesh_arg, "Mesh file or builtin:NAME[:LEVEL]")->required();
  segment_cmd->add_option("-o,--output", out_path, "Segmentation JSON (default stdout)");
  segment_cmd->add_option("--ply", ply_path, "Also write a colored PLY");
  segment_cmd->add_option("--manifest", manifest_path, "Write a run manifest with timings");
  field_opts.add(segment_cmd);
  part_opts.add(segment_cmd);
  source_opts.add(segment_cmd);
  add_common(segment_cmd);

  // refine
  std::string seg_path;
  int part = -1;
  int max_depth = 4;
  bool reuse_field = false;
  auto* refine_cmd = app.add_subcommand("refine", "Split one part of an existing segmentation");
  refine_cmd->add_option("mesh", mesh_arg, "Mesh file or builtin:NAME[:LEVEL]")->required();
  refine_cmd->add_option("--segmentation", seg_path, "Segmentation JSON to refine")->required();
  refine_cmd->add_option("--part", part, "Part id to refine")->required();
  refine_cmd->add_option("--max-depth", max_depth, "Refinement depth limit")->capture_default_str();
  refine_cmd->add_flag("--reuse-field", reuse_field, "Restrict the parent field instead of recomputing");
  refine_cmd->add_option("-o,--output", out_path, "Segmentation JSON (default stdout)");
  refine_cmd->add_option("--ply", ply_path, "Also write a colored PLY");
  field_opts.add(refine_cmd);
  part_opts.add(refine_cmd);
  source_opts.add(refine_cmd);
  add_common(refine_cmd);

  // grid-search
  std::string ks_text = "2,3,4", lambdas_text = "0.3,1,3", metric = "energy";
  bool with_timings = false;
  auto* grid_cmd = app.add_subcommand("grid-search", "Rank (k, lambda) combinations on one field");
  grid_cmd->add_option("mesh", mesh_arg, "Mesh file or builtin:NAME[:LEVEL]")->required();
  grid_cmd->add_option("--ks", ks_text, "Comma-separated k values")->capture_default_str();
  grid_cmd->add_option("--lambdas", lambdas_text, "Comma-separated lambda values")->capture_default_str();
  grid_cmd->add_option("--metric", metric, "Ranking metric")
      ->check(CLI::IsMember({"energy", "silhouette"}))
      ->capture_default_str();
  grid_cmd->add_flag("--timings", with_timings, "Include timings (makes the report run-dependent)");
  grid_cmd->add_option("-o,--output", out_path, "Report JSON (default stdout)");
  field_opts.add(grid_cmd);
  part_opts.add(grid_cmd);
  source_opts.add(grid_cmd);
  add_common(grid_cmd);

  // gen-data
  int count = 8, levels = 0;
  double jitter = 0, flips = 0;
  std::string meshes_dir;
  DeformTemplate deform;
  auto* gen_cmd = app.add_subcommand("gen-data", "Deformed variants of a base mesh as training pairs");
  gen_cmd->add_option("mesh", mesh_arg, "Base mesh file or builtin:NAME[:LEVEL]")->required();
  gen_cmd->add_option("-o,--output", out_path, "Dataset directory")->required();
  gen_cmd->add_option("--count", count, "Number of variants")->capture_default_str();
  gen_cmd->add_option("--tessellate", levels, "Midpoint subdivision levels per variant")->capture_default_str();
  gen_cmd->add_option("--jitter", jitter, "Tangential jitter (fraction of edge length)")->capture_default_str();
  gen_cmd->add_option("--flips", flips, "Fraction of interior edges to flip")->capture_default_str();
  gen_cmd->add_option("--radius", radius, "Sampling radius (0: 5% of the bounding-box diagonal)")
      ->capture_default_str();
  gen_cmd->add_option("--handles", deform.handles, "Deformation handles per variant")->capture_default_str();
  gen_cmd->add_option("--displacement", deform.displacement_max, "Max handle displacement (fraction of diagonal)")
      ->capture_default_str();
  gen_cmd->add_option("--bends", deform.bends, "Bends per variant")->capture_default_str();
  gen_cmd->add_option("--bend-angle", deform.bend_angle_max, "Max bend angle in radians")->capture_default_str();
  gen_cmd->add_option("--meshes-dir", meshes_dir, "Also write the variant meshes as OBJ");
  field_opts.add(gen_cmd);
  add_common(gen_cmd);

  // bench
  int repeat = 1;
  auto* bench_cmd = app.add_subcommand("bench", "Oracle vs model timing table");
  bench_cmd->add_option("mesh", mesh_arg, "Mesh file or builtin:NAME[:LEVEL]")->required();
  bench_cmd->add_option("--model", model_path, "Model file")->required();
  bench_cmd->add_option("--repeat", repeat, "Repetitions (the fastest is reported)")->capture_default_str();
  bench_cmd->add_option("-o,--output", out_path, "Report JSON");
  field_opts.add(bench_cmd);
  part_opts.add(bench_cmd);
  bench_cmd->add_option("--radius", radius, "Sampling radius (0: 5% of the bounding-box diagonal)")
      ->capture_default_str();
  add_common(bench_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  auto logger = spdlog::stderr_color_mt("nshdf");
  spdlog::set_default_logger(logger);
  spdlog::set_level(common.verbosity >= 2 ? spdlog::level::debug
                    : common.verbosity == 1 ? spdlog::level::info
                                            : spdlog::level::warn);
  configure_logging_from_env();

  try {
    if (*shdf_cmd) {
      const ShdfParams params = field_opts.params(common.seed);
      params.validate();
      const Mesh mesh = load_input_mesh(mesh_arg);
      if (common.dry_run) {
        print_dry_run("shdf", {{"mesh", mesh_arg}, {"faces", mesh.faces.size()}, {"shdf", params.key()}, {"raw", raw}});
        return 0;
      }
      const Adjacency adj = build_adjacency(mesh);
      const RayAccel accel(mesh);
      ScalarField f = compute_shdf_field(mesh, accel, params, &adj, common.threads);
      if (!raw) f = prepare_field(f, adj, params);
      emit(out_path, dump(field_to_json(f)));
      if (!ply_path.empty()) write_file(ply_path, save_ply(mesh, {.binary = true, .face_scalars = f.values}));
    } else if (*sample_cmd) {
      const Mesh mesh = load_input_mesh(mesh_arg);
      const double r = radius > 0 ? radius : default_sampling_radius(mesh);
      if (common.dry_run) {
        print_dry_run("sample", {{"mesh", mesh_arg}, {"radius", r}, {"seed", common.seed}});
        return 0;
      }
      emit(out_path, dump(samples_to_json(sample_surface(mesh, r, common.seed, common.threads))));
    } else if (*train_cmd) {
      model_cfg.activation = parse_activation(activation);
      schedule.loss_mode = loss_name == "sq" ? LossMode::Squared : LossMode::Absolute;
      schedule.seed = common.seed;
      if (decay_opt->count() == 0) schedule.decay_start_step = schedule.total_steps * 3 / 5;
      schedule.validate();
      const auto pairs = load_dataset(data_dir);
      if (pairs.empty()) throw ContractError("dataset '" + data_dir + "' has no pairs");
      if (common.dry_run) {
        print_dry_run("train", {{"data", data_dir},
                                {"pairs", pairs.size()},
                                {"steps", schedule.total_steps},
                                {"decay_start", schedule.decay_start_step},
                                {"lr", schedule.lr_initial},
                                {"lr_final", schedule.lr_final},
                                {"width", model_cfg.width},
                                {"rounds", model_cfg.rounds},
                                {"activation", activation}});
        return 0;
      }
      std::vector<TrainingExample> data;
      for (const auto& p : pairs) data.push_back({p.graph, p.target});
      const auto model = EmdModel<float>::create(model_cfg, common.seed);
      const double initial = dataset_loss(model, data, schedule.alpha, schedule.loss_mode);
      const TrainResult r = train(model, data, schedule);
      write_file(out_path, save_model(r.model));
      if (!history_path.empty()) write_file(history_path, history_csv(r.history));
      const double final_loss = dataset_loss(r.model, data, schedule.alpha, schedule.loss_mode);
      spdlog::info("loss {:.6g} -> {:.6g} after {} steps", initial, final_loss, r.steps_completed);
      if (r.aborted) {
        std::cerr << "training aborted: " << r.message << " (last checkpoint written)\n";
        return kExitProcessing;
      }
    } else if (*infer_cmd) {
      const Mesh mesh = load_input_mesh(mesh_arg);
      const double r = radius > 0 ? radius : default_sampling_radius(mesh);
      if (!fs::exists(model_path)) throw Error("no such file: " + model_path);
      if (common.dry_run) {
        print_dry_run("infer", {{"mesh", mesh_arg}, {"model", model_path}, {"radius", r}, {"seed", common.seed}});
        return 0;
      }
      const auto model = load_model(read_file(model_path));
      const ScalarField f = infer_field(model, mesh, r, common.seed, common.threads);
      emit(out_path, dump(field_to_json(f)));
      if (!ply_path.empty()) write_file(ply_path, save_ply(mesh, {.binary = true, .face_scalars = f.values}));
    } else if (*segment_cmd) {
      const PipelineConfig cfg = pipeline_config(common, field_opts, part_opts, source_opts);
      cfg.validate();
      Mesh mesh = load_input_mesh(mesh_arg);
      if (common.dry_run) {
        print_dry_run("segment", {{"mesh", mesh_arg}, {"faces", mesh.faces.size()}, {"pipeline", cfg.to_json()}});
        return 0;
      }
      Session session(common.threads);
      auto res = session.add_mesh(std::move(mesh));
      const SegmentResult r = session.segment(*res, cfg);
      emit(out_path, dump(segmentation_to_json(r.segmentation)));
      std::map<std::string, std::string> artifacts;
      if (!out_path.empty()) artifacts["segmentation"] = out_path;
      if (!ply_path.empty()) {
        write_file(ply_path, save_segmentation_ply(res->mesh, r.segmentation));
        artifacts["ply"] = ply_path;
      }
      if (!manifest_path.empty()) {
        write_file(manifest_path, run_manifest(cfg, r.timings, r.segmentation, artifacts).dump(2) + "\n");
      }
      spdlog::info("{} parts, energy {:.6g}, {:.1f} ms", r.segmentation.part_count, r.segmentation.energy,
                   r.timings.total_ms);
    } else if (*refine_cmd) {
      PipelineConfig cfg = pipeline_config(common, field_opts, part_opts, source_opts);
      cfg.max_depth = max_depth;
      cfg.refine_field = reuse_field ? RefineFieldPolicy::Reuse : RefineFieldPolicy::Recompute;
      cfg.validate();
      Mesh mesh = load_input_mesh(mesh_arg);
      if (!fs::exists(seg_path)) throw Error("no such file: " + seg_path);
      const Segmentation parent = segmentation_from_json(nlohmann::json::parse(read_file(seg_path)));
      if (common.dry_run) {
        print_dry_run("refine", {{"mesh", mesh_arg}, {"part", part}, {"pipeline", cfg.to_json()}});
        return 0;
      }
      Session session(common.threads);
      auto res = session.add_mesh(std::move(mesh));
      const SegmentResult r = session.refine(*res, parent, part, cfg);
      emit(out_path, dump(segmentation_to_json(r.segmentation)));
      if (!ply_path.empty()) write_file(ply_path, save_segmentation_ply(res->mesh, r.segmentation));
    } else if (*grid_cmd) {
      const PipelineConfig cfg = pipeline_config(common, field_opts, part_opts, source_opts);
      cfg.validate();
      GridSpec grid;
      for (double k : parse_list(ks_text)) grid.ks.push_back(static_cast<int>(k));
      grid.lambdas = parse_list(lambdas_text);
      Mesh mesh = load_input_mesh(mesh_arg);
      if (common.dry_run) {
        print_dry_run("grid-search", {{"mesh", mesh_arg},
                                      {"ks", grid.ks},
                                      {"lambdas", grid.lambdas},
                                      {"metric", metric},
                                      {"pipeline", cfg.to_json()}});
        return 0;
      }
      Session session(common.threads);
      auto res = session.add_mesh(std::move(mesh));
      const GridSearchResult r = session.grid_search(*res, cfg, grid, parse_metric(metric));
      nlohmann::json points = nlohmann::json::array();
      for (const auto& p : r.points) {
        nlohmann::json row = {{"rank", p.rank},
                              {"k", p.k},
                              {"lambda_smooth", p.lambda_smooth},
                              {"normalized_energy", p.normalized_energy},
                              {"silhouette", p.silhouette},
                              {"part_count", p.segmentation.part_count}};
        if (with_timings) row["partition_ms"] = p.partition_ms;
        points.push_back(row);
      }
      nlohmann::json report = {{"format", "nshdf.grid"},
                               {"metric", metric},
                               {"field_computations", r.field_computations},
                               {"points", points},
                               {"best", segmentation_to_json(r.points.front().segmentation)}};
      if (with_timings) report["field_ms"] = r.field_ms;
      emit(out_path, dump(report));
    } else if (*gen_cmd) {
      const ShdfParams params = field_opts.params(common.seed);
      params.validate();
      const Mesh base = load_input_mesh(mesh_arg);
      const nlohmann::json generation = {{"base", mesh_arg},
                                         {"count", count},
                                         {"tessellate", levels},
                                         {"jitter", jitter},
                                         {"flips", flips},
                                         {"radius", radius},
                                         {"seed", common.seed},
                                         {"deform", to_json(deform)},
                                         {"shdf", params.key()}};
      if (common.dry_run) {
        print_dry_run("gen-data", generation);
        return 0;
      }
      const auto variants = generate_variants(base, deform, count, common.seed);
      std::vector<TaggedMesh> tagged;
      for (std::size_t i = 0; i < variants.size(); ++i) {
        Mesh m = tessellate(variants[i], levels);
        if (jitter > 0 || flips > 0) m = remesh_perturb(m, jitter, flips, derive_seed(common.seed, 7000 + i));
        char tag[32];
        std::snprintf(tag, sizeof tag, "variant_%03zu", i);
        if (!meshes_dir.empty()) {
          fs::create_directories(meshes_dir);
          write_file(fs::path(meshes_dir) / (std::string(tag) + ".obj"), save_obj(m));
        }
        tagged.push_back({tag, std::move(m)});
      }
      const auto pairs = build_training_pairs(tagged, radius, params, common.seed, common.threads);
      save_dataset(out_path, pairs, generation);
      spdlog::info("wrote {} pair(s) to {}", pairs.size(), out_path);
    } else if (*bench_cmd) {
      const Mesh mesh = load_input_mesh(mesh_arg);
      if (!fs::exists(model_path)) throw Error("no such file: " + model_path);
      PipelineConfig cfg;
      cfg.shdf = field_opts.params(common.seed);
      cfg.partition = part_opts.params(common.seed);
      cfg.smooth = !part_opts.no_smooth;
      cfg.sampling_radius = radius;
      cfg.threads = common.threads;
      cfg.model_path = model_path;
      cfg.validate();
      if (common.dry_run) {
        print_dry_run("bench", {{"mesh", mesh_arg}, {"faces", mesh.faces.size()}, {"pipeline", cfg.to_json()}});
        return 0;
      }
      const Adjacency adj = build_adjacency(mesh);
      const auto model = load_model(read_file(model_path));
      const DualGraph g = build_dual_graph(mesh, adj, cfg.partition.concavity_bias, common.threads);
      nlohmann::json rows = nlohmann::json::array();
      std::printf("%-8s %12s %14s %12s\n", "source", "shdf_ms", "partition_ms", "total_ms");
      for (ShdfSource source : {ShdfSource::Oracle, ShdfSource::Model}) {
        cfg.source = source;
        double best_field = 1e300, best_part = 1e300;
        for (int i = 0; i < std::max(1, repeat); ++i) {
          auto t0 = std::chrono::steady_clock::now();
          const ScalarField f = compute_field(mesh, adj, cfg, &model);
          best_field = std::min(best_field, ms_since(t0));
          t0 = std::chrono::steady_clock::now();
          segment_field(g, f, cfg.partition, cfg.smooth);
          best_part = std::min(best_part, ms_since(t0));
        }
        std::printf("%-8s %12.1f %14.1f %12.1f\n", std::string(source_name(source)).c_str(), best_field, best_part,
                    best_field + best_part);
        rows.push_back({{"source", source_name(source)},
                        {"shdf_ms", best_field},
                        {"partition_ms", best_part},
                        {"total_ms", best_field + best_part}});
      }
      if (!out_path.empty()) {
        write_file(out_path, nlohmann::json{{"mesh", mesh_arg}, {"faces", mesh.faces.size()}, {"rows", rows}}.dump(2) +
                                 "\n");
      }
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitProcessing;
  }
  return 0;
}
