#include "timbre/corpus.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <future>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <sstream>
#include <unordered_map>

#include "timbre/artifacts.hpp"
#include "timbre/wav.hpp"
#include "timbre/work_pool.hpp"

namespace timbre {

using ordered_json = nlohmann::ordered_json;

double Hypercube::volume() const {
  double v = 1.0;
  for (std::size_t i = 0; i < kParamCount; ++i) v *= hi[i] - lo[i];
  return v;
}

double Hypercube::live_volume() const {
  double v = 1.0;
  for (std::size_t i : live_axes()) v *= hi[i] - lo[i];
  return v;
}

std::vector<std::size_t> Hypercube::live_axes() const {
  std::vector<std::size_t> axes;
  for (std::size_t i = 0; i < kParamCount; ++i) {
    if (hi[i] > lo[i]) axes.push_back(i);
  }
  return axes;
}

bool Hypercube::contains(const ParameterVector& p) const {
  for (std::size_t i = 0; i < kParamCount; ++i) {
    if (p[i] < lo[i] || p[i] > hi[i]) return false;
  }
  return true;
}

ParameterVector Hypercube::centroid() const {
  std::array<double, kParamCount> c;
  for (std::size_t i = 0; i < kParamCount; ++i) c[i] = 0.5 * (lo[i] + hi[i]);
  return ParameterVector(c);
}

std::vector<std::pair<std::size_t, std::size_t>> preset_pairs(std::size_t count) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < count; ++a) {
    for (std::size_t b = a + 1; b < count; ++b) pairs.emplace_back(a, b);
  }
  return pairs;
}

std::vector<Hypercube> presets_to_hypercubes(std::span<const ParameterVector> presets) {
  if (presets.size() < 2) throw std::invalid_argument("need at least 2 presets to span a hypercube");
  std::vector<Hypercube> cubes;
  for (auto [a, b] : preset_pairs(presets.size())) {
    std::array<double, kParamCount> lo, hi;
    for (std::size_t i = 0; i < kParamCount; ++i) {
      lo[i] = std::min(presets[a][i], presets[b][i]);
      hi[i] = std::max(presets[a][i], presets[b][i]);
    }
    cubes.push_back({ParameterVector(lo), ParameterVector(hi)});
  }
  return cubes;
}

std::pair<Hypercube, Hypercube> split(const Hypercube& h, std::size_t axis) {
  if (axis >= kParamCount) throw std::out_of_range("axis out of range");
  if (!(h.hi[axis] > h.lo[axis])) throw std::invalid_argument("cannot split a degenerate axis");
  const double mid = 0.5 * (h.lo[axis] + h.hi[axis]);
  Hypercube lower = h, upper = h;
  lower.hi.set(axis, mid);
  upper.lo.set(axis, mid);
  return {lower, upper};
}

Renderer synth_renderer(double duration, double rate) {
  return [duration, rate](const ParameterVector& p, int octave) {
    return render(p, RenderSettings{octave, duration, rate, 0, 0});
  };
}

std::pair<ParameterVector, ParameterVector> side_vertices(const Hypercube& h, std::size_t axis) {
  if (axis >= kParamCount) throw std::out_of_range("axis out of range");
  if (!(h.hi[axis] > h.lo[axis])) throw std::invalid_argument("side comparison on a degenerate axis");
  ParameterVector b = h.lo;
  b.set(axis, h.hi[axis]);
  return {quantize(h.lo), quantize(b)};
}

SimilarityScore side_similarity(const Hypercube& h, std::size_t axis, const Renderer& renderer,
                                const SimilarityMeasure& measure, int octave) {
  auto [a, b] = side_vertices(h, axis);
  if (a == b) return {1.0, 0.0};
  return measure(renderer(a, octave), renderer(b, octave));
}

void ExploreConfig::validate() const {
  if (!(similarity_threshold >= 0.0 && similarity_threshold <= 1.0))
    throw std::invalid_argument("similarity threshold must lie in [0,1]");
  if (!(min_volume > 0.0)) throw std::invalid_argument("min volume must be positive");
  if (max_depth < 1) throw std::invalid_argument("max depth must be >= 1");
  if (!(duration > 0.0)) throw std::invalid_argument("duration must be positive");
  if (octave_low > octave_high || octave_low < kMinOctave || octave_high > kMaxOctave)
    throw std::invalid_argument("octave range must lie within [-5,5]");
}

int ExploreConfig::octave_for(std::size_t root) const {
  const auto span = static_cast<std::size_t>(octave_high - octave_low + 1);
  return octave_low + static_cast<int>(root % span);
}

std::string entry_id(const ParameterVector& quantized) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (double v : quantized.values()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xff;
      h *= 0x100000001b3ull;
    }
  }
  return hex64(h);
}

namespace {

struct VertexKey {
  std::array<double, kParamCount> values;
  int octave;
  friend bool operator==(const VertexKey&, const VertexKey&) = default;
};

struct VertexKeyHash {
  std::size_t operator()(const VertexKey& k) const {
    std::uint64_t h = static_cast<std::uint64_t>(k.octave) * 0x9E3779B97F4A7C15ull;
    for (double v : k.values) h = (h ^ std::bit_cast<std::uint64_t>(v)) * 0x100000001b3ull;
    return static_cast<std::size_t>(h);
  }
};

using DescriptorPtr = std::shared_ptr<const TimbreDescriptor>;

// Insert-if-absent table of descriptors; the first requester renders, others wait.
class DescriptorCache {
 public:
  DescriptorCache(const Renderer& renderer, const SimilarityMeasure& measure)
      : renderer_(renderer), measure_(measure) {}

  DescriptorPtr get(const ParameterVector& quantized, int octave) {
    VertexKey key{quantized.values(), octave};
    std::promise<DescriptorPtr> promise;
    std::shared_future<DescriptorPtr> future;
    bool owner = false;
    {
      std::lock_guard lock(mutex_);
      auto it = table_.find(key);
      if (it == table_.end()) {
        future = promise.get_future().share();
        table_.emplace(key, future);
        owner = true;
      } else {
        future = it->second;
      }
    }
    if (owner) {
      try {
        promise.set_value(measure_.describe(renderer_(quantized, octave)));
        renders_.fetch_add(1);
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return future.get();
  }

  std::size_t renders() const { return renders_.load(); }

 private:
  const Renderer& renderer_;
  const SimilarityMeasure& measure_;
  std::mutex mutex_;
  std::unordered_map<VertexKey, std::shared_future<DescriptorPtr>, VertexKeyHash> table_;
  std::atomic<std::size_t> renders_{0};
};

struct Explorer {
  const ExploreConfig& cfg;
  std::span<const Hypercube> roots;
  const SimilarityMeasure& measure;
  DescriptorCache cache;
  WorkPool pool;

  std::mutex out_mutex;
  std::map<std::string, CorpusEntry> entries;
  std::vector<TerminalCube> terminals;
  std::atomic<std::size_t> failed{0};

  Explorer(std::span<const Hypercube> r, const ExploreConfig& c, const Renderer& renderer,
           const SimilarityMeasure& m)
      : cfg(c), roots(r), measure(m), cache(renderer, m), pool(c.workers) {}

  void emit(const ParameterVector& quantized, std::size_t root, int depth) {
    CorpusEntry e;
    e.id = entry_id(quantized);
    e.params = quantized;
    e.octave = cfg.octave_for(root);
    e.provenance = {root, depth};
    std::lock_guard lock(out_mutex);
    auto [it, inserted] = entries.emplace(e.id, e);
    if (!inserted && e.provenance < it->second.provenance) it->second = std::move(e);
  }

  void terminate(const Hypercube& cube, std::size_t root, int depth, StopReason reason,
                 std::optional<double> min_sim) {
    emit(quantize(cube.centroid()), root, depth);
    std::lock_guard lock(out_mutex);
    terminals.push_back({cube, root, depth, reason, min_sim});
  }

  void visit(Hypercube cube, std::size_t root, int depth) {
    try {
      step(cube, root, depth);
    } catch (const std::exception& e) {
      failed.fetch_add(1);
      spdlog::warn("explore: branch at root {} depth {} aborted: {}", root, depth, e.what());
    }
  }

  void step(const Hypercube& cube, std::size_t root, int depth) {
    const std::vector<std::size_t> axes = cube.live_axes();
    if (axes.empty()) return terminate(cube, root, depth, StopReason::NoLiveAxis, std::nullopt);
    if (depth >= cfg.max_depth) return terminate(cube, root, depth, StopReason::MaxDepth, std::nullopt);
    if (cube.live_volume() <= cfg.min_volume)
      return terminate(cube, root, depth, StopReason::MinVolume, std::nullopt);
    // similarity is never below 0, so a zero threshold can never split
    if (cfg.similarity_threshold <= 0.0) return terminate(cube, root, depth, StopReason::Similar, std::nullopt);

    const int octave = cfg.octave_for(root);
    std::size_t best_axis = axes.front();
    SimilarityScore best{2.0, -1.0};
    bool first = true;
    for (std::size_t axis : axes) {
      auto [a, b] = side_vertices(cube, axis);
      SimilarityScore s{1.0, 0.0};
      if (!(a == b)) s = measure.compare(*cache.get(a, octave), *cache.get(b, octave));
      if (first || s < best) {
        best = s;
        best_axis = axis;
        first = false;
      }
    }

    if (best.value < cfg.similarity_threshold) {
      auto [a, b] = side_vertices(cube, best_axis);
      emit(a, root, depth);
      emit(b, root, depth);
      auto [lower, upper] = split(cube, best_axis);
      pool.submit([this, lower, root, depth] { visit(lower, root, depth + 1); });
      pool.submit([this, upper, root, depth] { visit(upper, root, depth + 1); });
    } else {
      terminate(cube, root, depth, StopReason::Similar, best.value);
    }
  }
};

bool cube_less(const TerminalCube& a, const TerminalCube& b) {
  if (a.root != b.root) return a.root < b.root;
  if (a.depth != b.depth) return a.depth < b.depth;
  if (a.cube.lo.values() != b.cube.lo.values()) return a.cube.lo.values() < b.cube.lo.values();
  return a.cube.hi.values() < b.cube.hi.values();
}

}  // namespace

ExploreResult explore(std::span<const Hypercube> roots, const ExploreConfig& cfg, const Renderer& renderer,
                      const SimilarityMeasure& measure) {
  cfg.validate();
  Explorer ex(roots, cfg, renderer, measure);
  for (std::size_t r = 0; r < roots.size(); ++r) {
    ex.pool.submit([&ex, r] { ex.visit(ex.roots[r], r, 0); });
  }
  ex.pool.wait();

  ExploreResult result;
  for (auto& [id, e] : ex.entries) result.entries.push_back(std::move(e));
  result.terminals = std::move(ex.terminals);
  std::sort(result.terminals.begin(), result.terminals.end(), cube_less);
  result.renders = ex.cache.renders();
  result.failed_branches = ex.failed.load();
  return result;
}

// ---- presets and manifest ------------------------------------------------------

std::vector<ParameterVector> parse_presets(std::string_view text) {
  std::vector<ParameterVector> presets;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<double> values;
    std::string tok;
    while (fields >> tok) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw std::invalid_argument("presets line " + std::to_string(lineno) + ": bad number '" + tok + "'");
      }
    }
    if (values.empty()) continue;
    if (values.size() != kParamCount) {
      throw std::invalid_argument("presets line " + std::to_string(lineno) + ": expected 16 values, got " +
                                  std::to_string(values.size()));
    }
    try {
      presets.emplace_back(std::span<const double>(values));
    } catch (const DomainError& e) {
      throw std::invalid_argument("presets line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return presets;
}

std::vector<ParameterVector> load_presets(const std::filesystem::path& path) {
  return parse_presets(read_file(path));
}

std::string manifest_text(const Corpus& corpus) {
  std::string out;
  ordered_json header;
  header["v"] = kCorpusVersion;
  header["kind"] = "corpus";
  header["presets_hash"] = corpus.presets_hash;
  header["preset_count"] = corpus.preset_count;
  header["count"] = corpus.entries.size();
  out += header.dump() + "\n";
  for (const CorpusEntry& e : corpus.entries) {
    ordered_json row;
    row["id"] = e.id;
    row["params"] = e.params.values();
    row["octave"] = e.octave;
    row["wav"] = e.audio_path;
    row["preset_pair"] = e.provenance.preset_pair;
    row["depth"] = e.provenance.depth;
    out += row.dump() + "\n";
  }
  return out;
}

Corpus parse_manifest(std::string_view text) {
  Corpus corpus;
  std::istringstream in{std::string(text)};
  std::string line;
  bool have_header = false;
  std::size_t lineno = 0;
  try {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (!have_header) {
        if (j.value("kind", "") != "corpus") throw ArtifactError("missing corpus header");
        if (j.at("v").get<int>() != kCorpusVersion)
          throw ArtifactError("unsupported corpus manifest version " + j.at("v").dump());
        corpus.presets_hash = j.at("presets_hash").get<std::string>();
        corpus.preset_count = j.at("preset_count").get<std::size_t>();
        have_header = true;
        continue;
      }
      CorpusEntry e;
      e.id = j.at("id").get<std::string>();
      const auto params = j.at("params").get<std::vector<double>>();
      e.params = ParameterVector(std::span<const double>(params));
      e.octave = j.at("octave").get<int>();
      e.audio_path = j.at("wav").get<std::string>();
      e.provenance.preset_pair = j.at("preset_pair").get<std::size_t>();
      e.provenance.depth = j.at("depth").get<int>();
      corpus.entries.push_back(std::move(e));
    }
  } catch (const ArtifactError&) {
    throw;
  } catch (const std::exception& e) {
    throw ArtifactError("corpus manifest line " + std::to_string(lineno) + ": " + e.what());
  }
  if (!have_header) throw ArtifactError("empty corpus manifest");
  return corpus;
}

Corpus load_manifest(const std::filesystem::path& path) { return parse_manifest(read_file(path)); }

BuildSummary build_corpus(const std::filesystem::path& presets_file, const ExploreConfig& cfg,
                          const std::filesystem::path& out_dir) {
  const std::string text = read_file(presets_file);
  std::vector<ParameterVector> presets = parse_presets(text);
  if (presets.size() < 2) throw std::invalid_argument("presets file must contain at least 2 presets");
  for (auto& p : presets) p = quantize(p);

  const std::vector<Hypercube> roots = presets_to_hypercubes(presets);
  const GaussianKlSimilarity measure;
  const Renderer renderer = synth_renderer(cfg.duration);
  ExploreResult result = explore(roots, cfg, renderer, measure);

  std::filesystem::create_directories(out_dir / "wav");
  for (CorpusEntry& e : result.entries) e.audio_path = "wav/" + e.id + ".wav";
  parallel_for(result.entries.size(), cfg.workers, [&](std::size_t i) {
    const CorpusEntry& e = result.entries[i];
    const SoundSample s = renderer(e.params, e.octave);
    write_wav(out_dir / e.audio_path, s.samples, s.sample_rate);
  });

  Corpus corpus{content_hash(text), presets.size(), std::move(result.entries)};
  BuildSummary summary;
  summary.manifest = out_dir / "manifest.jsonl";
  summary.entries = corpus.entries.size();
  summary.failed_branches = result.failed_branches;
  write_file(summary.manifest, manifest_text(corpus));
  return summary;
}

}  // namespace timbre
