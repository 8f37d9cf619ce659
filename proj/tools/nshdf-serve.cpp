// HTTP segmentation service.

#include <csignal>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "neuralshdf/service.hpp"

namespace {
httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}
}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shape-diameter segmentation service"};
  nshdf::ServiceOptions opts;
  std::string host = "127.0.0.1";
  int port = 8080;
  double upload_mb = 256;
  std::string persist_dir, model_path;
  int verbosity = 0;
  app.add_option("--host", host, "Bind address")->envname("NSHDF_HOST")->capture_default_str();
  app.add_option("--port", port, "Port")->envname("NSHDF_PORT")->capture_default_str()->check(CLI::Range(1, 65535));
  app.add_option("--upload-limit", upload_mb, "Largest accepted request body in MiB")
      ->envname("NSHDF_UPLOAD_LIMIT_MB")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app.add_option("--persist-dir", persist_dir, "Write-through directory restored on start")
      ->envname("NSHDF_PERSIST_DIR");
  app.add_option("--model", model_path, "Model file enabling source=model")->envname("NSHDF_MODEL")->check(CLI::ExistingFile);
  app.add_option("--cors-origin", opts.cors_origin, "Allowed CORS origin")->envname("NSHDF_CORS_ORIGIN")->capture_default_str();
  app.add_option("--threads", opts.threads, "Worker threads per request")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_flag("-v,--verbose", verbosity, "More logging (repeatable)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  spdlog::set_default_logger(spdlog::stderr_color_mt("nshdf-serve"));
  spdlog::set_level(verbosity >= 2 ? spdlog::level::debug : spdlog::level::info);
  nshdf::configure_logging_from_env();

  opts.upload_limit = static_cast<std::size_t>(upload_mb * 1024 * 1024);
  opts.persist_dir = persist_dir;
  opts.model_path = model_path;
  try {
    nshdf::SegService service(opts);
    httplib::Server server;
    service.mount(server);
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    spdlog::info("listening on http://{}:{}", host, port);
    if (!server.listen(host, port)) {
      spdlog::error("cannot listen on {}:{}", host, port);
      return 2;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
