#include <charconv>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <boost/asio/io_context.hpp>
#include <boost/asio/signal_set.hpp>
#include <spdlog/spdlog.h>

#include "timbre/artifacts.hpp"
#include "timbre/corpus.hpp"
#include "timbre/pipeline.hpp"
#include "timbre/service.hpp"
#include "timbre/session.hpp"
#include "timbre/surface.hpp"
#include "timbre/synth.hpp"
#include "timbre/wav.hpp"

using namespace timbre;
namespace fs = std::filesystem;

namespace {

/// "0.5x16" (or "0.5×16") repeats a value; otherwise 16 comma/space separated values.
ParameterVector parse_params(std::string text) {
  for (const std::string times : {"×", "x", "X", "*"}) {
    if (const auto at = text.find(times); at != std::string::npos) {
      const double v = std::stod(text.substr(0, at));
      const int n = std::stoi(text.substr(at + times.size()));
      if (n != static_cast<int>(kParamCount)) throw std::invalid_argument("expected a repeat count of 16");
      return ParameterVector::filled(v);
    }
  }
  for (char& c : text) {
    if (c == ',') c = ' ';
  }
  std::istringstream in(text);
  std::vector<double> values;
  double v;
  while (in >> v) values.push_back(v);
  if (!in.eof()) throw std::invalid_argument("could not parse parameter list");
  return ParameterVector(values);
}

gtm::GridShape parse_grid(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw std::invalid_argument("grid must look like 20x20");
  return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
}

std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Shortest round-trip decimal form of each value.
void print_params(const ParameterVector& p) {
  std::string line;
  for (std::size_t i = 0; i < kParamCount; ++i) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, p[i]);
    if (i) line += ' ';
    line.append(buf, r.ptr);
  }
  std::printf("%s\n", line.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Timbre space pipeline: synthesis, corpus search, features, GTM, surface and service"};
  app.set_config("--config", "", "Optional config file with the same keys as the flags");
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress");

  // synth render
  auto* synth = app.add_subcommand("synth", "Synthesizer");
  synth->require_subcommand(1);
  auto* render_cmd = synth->add_subcommand("render", "Render one parameter vector to WAV");
  std::string params_text;
  RenderSettings rs;
  fs::path render_out;
  render_cmd->add_option("--params", params_text, "16 values in [0,1], or v×16")->required();
  render_cmd->add_option("--octave", rs.octave, "Octave relative to C4")->check(CLI::Range(kMinOctave, kMaxOctave));
  render_cmd->add_option("--duration", rs.duration, "Seconds")->check(CLI::PositiveNumber);
  render_cmd->add_option("--seed", rs.seed, "Noise seed");
  render_cmd->add_option("--semitones", rs.semitones, "Transposition")->check(CLI::Range(-12, 12));
  render_cmd->add_option("--rate", rs.rate, "Sample rate")->check(CLI::PositiveNumber);
  render_cmd->add_option("--out", render_out, "Output WAV")->required();

  // corpus build
  auto* corpus = app.add_subcommand("corpus", "Corpus generation");
  corpus->require_subcommand(1);
  auto* corpus_build = corpus->add_subcommand("build", "Hypercube search from presets");
  fs::path presets, corpus_out;
  ExploreConfig ec;
  ec.workers = default_workers();
  corpus_build->add_option("--presets", presets, "Preset file, 16 values per line")->required()->check(CLI::ExistingFile);
  corpus_build->add_option("--out", corpus_out, "Output directory")->required();
  corpus_build->add_option("--threshold", ec.similarity_threshold, "Similarity below which a cube is split");
  corpus_build->add_option("--min-volume", ec.min_volume, "Smallest cube volume to split");
  corpus_build->add_option("--max-depth", ec.max_depth, "Deepest split level");
  corpus_build->add_option("--duration", ec.duration, "Seconds per sound");
  corpus_build->add_option("--octave-low", ec.octave_low);
  corpus_build->add_option("--octave-high", ec.octave_high);
  corpus_build->add_option("--workers", ec.workers)->check(CLI::PositiveNumber);

  // features extract / select
  auto* features = app.add_subcommand("features", "Feature extraction and selection");
  features->require_subcommand(1);
  auto* extract = features->add_subcommand("extract", "368 candidate statistics per corpus sound");
  fs::path corpus_dir, stats_out;
  std::size_t workers = default_workers();
  extract->add_option("--corpus", corpus_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  extract->add_option("--out", stats_out, "Output matrix")->required();
  extract->add_option("--workers", workers)->check(CLI::PositiveNumber);
  auto* select = features->add_subcommand("select", "Pick 50 statistics and append parameters");
  fs::path stats_in, features_out;
  std::string criterion = "relevance";
  select->add_option("--stats", stats_in, "Candidate matrix")->required()->check(CLI::ExistingFile);
  select->add_option("--corpus", corpus_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  select->add_option("--out", features_out, "Output matrix")->required();
  select->add_option("--criterion", criterion, "relevance or gtm")->check(CLI::IsMember({"relevance", "gtm"}));

  // gtm train
  auto* gtm_cmd = app.add_subcommand("gtm", "Generative topographic mapping");
  gtm_cmd->require_subcommand(1);
  auto* train = gtm_cmd->add_subcommand("train", "Train by EM on the standardized features");
  fs::path features_in, model_out;
  gtm::Config gc;
  std::string latent = "20x20", basis = "6x6";
  train->add_option("--features", features_in, "Feature matrix")->required()->check(CLI::ExistingFile);
  train->add_option("--out", model_out, "Output model")->required();
  train->add_option("--latent", latent, "Latent grid, e.g. 20x20");
  train->add_option("--basis", basis, "Basis grid, e.g. 6x6");
  train->add_option("--width", gc.width_factor, "Basis width in units of center spacing");
  train->add_option("--lambda", gc.lambda, "Weight regularization");
  train->add_option("--rel-tol", gc.rel_tol, "Stop below this relative likelihood gain");
  train->add_option("--max-iter", gc.max_iter)->check(CLI::PositiveNumber);

  // surface build / query
  auto* surf = app.add_subcommand("surface", "Timbre surface");
  surf->require_subcommand(1);
  auto* sbuild = surf->add_subcommand("build", "Project, cluster and index");
  fs::path model_in, surface_out;
  std::size_t clusters = surface::kDefaultClusters;
  sbuild->add_option("--model", model_in, "GTM model")->required()->check(CLI::ExistingFile);
  sbuild->add_option("--features", features_in, "Feature matrix")->required()->check(CLI::ExistingFile);
  sbuild->add_option("--corpus", corpus_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  sbuild->add_option("--out", surface_out, "Output surface document")->required();
  sbuild->add_option("--clusters", clusters)->check(CLI::PositiveNumber);
  sbuild->add_option("--workers", workers)->check(CLI::PositiveNumber);
  auto* query = surf->add_subcommand("query", "Parameters at a surface position");
  fs::path surface_in, query_wav;
  double qx = 0, qy = 0;
  bool interpolate = false;
  int query_octave = 0, query_pitch = 0;
  double query_duration = kDefaultDuration;
  std::uint64_t query_seed = 0;
  query->add_option("--surface", surface_in, "Surface document")->required()->check(CLI::ExistingFile);
  query->add_option("--x", qx)->required();
  query->add_option("--y", qy)->required();
  query->add_flag("--interpolate", interpolate, "Blend the 8 nearest points");
  auto* octave_opt = query->add_option("--octave", query_octave, "Render octave (default: the point's)");
  query->add_option("--pitch-offset", query_pitch)->check(CLI::Range(-12, 12));
  query->add_option("--duration", query_duration)->check(CLI::Range(1e-9, service::kMaxRenderDuration));
  query->add_option("--seed", query_seed);
  query->add_option("--out", query_wav, "Also render to this WAV");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP and WebSocket service");
  std::optional<unsigned short> port_flag;
  std::optional<fs::path> surface_flag;
  service::Config sc;
  serve->add_option("--port", port_flag, "Listen port (env PORT)");
  serve->add_option("--surface", surface_flag, "Surface document (env SURFACE_PATH)");
  serve->add_option("--address", sc.address, "Listen address");
  serve->add_option("--corpus", sc.corpus_dir, "Corpus directory");
  serve->add_option("--log-dir", sc.log_dir, "Directory for session event logs");
  serve->add_option("--render-workers", sc.render_workers)->check(CLI::PositiveNumber);

  // session replay
  auto* session_cmd = app.add_subcommand("session", "Collaborative sessions");
  session_cmd->require_subcommand(1);
  auto* replay = session_cmd->add_subcommand("replay", "Replay an event log and print the state hash");
  fs::path log_in, replay_surface;
  std::string expect_hash;
  replay->add_option("--log", log_in, "Event log (JSON lines)")->required()->check(CLI::ExistingFile);
  replay->add_option("--surface", replay_surface, "Surface used for parameter lookups")->check(CLI::ExistingFile);
  replay->add_option("--expect-hash", expect_hash, "Fail unless the final hash matches");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::warn);

  try {
    if (render_cmd->parsed()) {
      const SoundSample s = render(parse_params(params_text), rs);
      write_wav(render_out, s.samples, s.sample_rate);
    } else if (corpus_build->parsed()) {
      const BuildSummary b = build_corpus(presets, ec, corpus_out);
      std::printf("%zu sounds -> %s\n", b.entries, b.manifest.c_str());
      if (b.failed_branches > 0) std::printf("%zu branches failed\n", b.failed_branches);
    } else if (extract->parsed()) {
      const auto r = pipeline::extract_features(corpus_dir, stats_out, workers);
      std::printf("%zu rows -> %s\n", r.rows, r.output.c_str());
    } else if (select->parsed()) {
      const auto r = pipeline::select_features(
          stats_in, corpus_dir, features_out,
          criterion == "gtm" ? pipeline::Criterion::GtmLikelihood : pipeline::Criterion::Relevance);
      std::printf("%zu rows -> %s\n", r.rows, r.output.c_str());
    } else if (train->parsed()) {
      gc.latent = parse_grid(latent);
      gc.basis = parse_grid(basis);
      const auto r = pipeline::train_gtm(features_in, model_out, gc);
      std::printf("%d iterations, log-likelihood %.10g -> %s\n", r.iterations, r.final_log_likelihood,
                  r.stage.output.c_str());
    } else if (sbuild->parsed()) {
      const auto r = pipeline::build_surface(model_in, features_in, corpus_dir, surface_out, clusters, workers);
      std::printf("%zu points -> %s\n", r.rows, r.output.c_str());
    } else if (query->parsed()) {
      const surface::TimbreSurface s = surface::load(surface_in);
      service::RenderRequest req;
      req.position = {qx, qy};
      req.mode = interpolate ? service::RenderRequest::Mode::Interpolate8 : service::RenderRequest::Mode::Nearest;
      if (octave_opt->count() > 0) req.octave = query_octave;
      req.pitch_offset = query_pitch;
      req.duration = query_duration;
      req.seed = query_seed;
      if (query_wav.empty()) {
        print_params(interpolate ? s.interpolate(req.position) : s.lookup_params(req.position));
      } else {
        const service::RenderResult r = service::render_at(s, req);
        print_params(r.params);
        write_file(query_wav, r.wav);
      }
    } else if (serve->parsed()) {
      const service::Config cfg = service::resolve_config(port_flag, surface_flag, sc);
      service::Server server(cfg);
      const unsigned short port = server.start();
      std::printf("listening on %s:%u\n", cfg.address.c_str(), port);
      std::fflush(stdout);
      boost::asio::io_context signals_ctx;
      boost::asio::signal_set signals(signals_ctx, SIGINT, SIGTERM);
      signals.async_wait([&](const boost::system::error_code&, int) { server.stop(); });
      signals_ctx.run();
    } else if (replay->parsed()) {
      std::optional<surface::TimbreSurface> s;
      if (!replay_surface.empty()) s = surface::load(replay_surface);
      const auto r = session::replay(read_file(log_in), s ? &*s : nullptr);
      const std::string hash = session::state_hash(r.state);
      std::printf("%zu events, seq %llu, hash %s\n", r.events, static_cast<unsigned long long>(r.state.seq), hash.c_str());
      if (!expect_hash.empty() && expect_hash != hash) {
        std::fflush(stdout);
        std::fprintf(stderr, "error: hash mismatch, expected %s\n", expect_hash.c_str());
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::fflush(stdout);
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return 1;
  }
  return 0;
}
