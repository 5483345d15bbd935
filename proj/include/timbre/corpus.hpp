#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "timbre/similarity.hpp"
#include "timbre/synth.hpp"

namespace timbre {

/// Axis-aligned box in normalized parameter space.
struct Hypercube {
  ParameterVector lo;
  ParameterVector hi;

  double volume() const;
  /// Product of widths over non-degenerate axes only (1 if there are none).
  double live_volume() const;
  std::vector<std::size_t> live_axes() const;
  bool contains(const ParameterVector& p) const;
  ParameterVector centroid() const;
};

std::vector<Hypercube> presets_to_hypercubes(std::span<const ParameterVector> presets);

/// Index pairs (a, b), a < b, in the same order as presets_to_hypercubes.
std::vector<std::pair<std::size_t, std::size_t>> preset_pairs(std::size_t count);

std::pair<Hypercube, Hypercube> split(const Hypercube& h, std::size_t axis);

using Renderer = std::function<SoundSample(const ParameterVector&, int octave)>;

/// Default corpus renderer: fixed-length render at the corpus sample rate, seed 0.
Renderer synth_renderer(double duration = kDefaultDuration, double rate = kDefaultRate);

/// The two vertices compared for a split along `axis`: `lo`, and `lo` with the
/// axis coordinate moved to `hi`. Both quantized.
std::pair<ParameterVector, ParameterVector> side_vertices(const Hypercube& h, std::size_t axis);

SimilarityScore side_similarity(const Hypercube& h, std::size_t axis, const Renderer& renderer,
                                const SimilarityMeasure& measure, int octave = 0);

struct ExploreConfig {
  double similarity_threshold = 0.85;
  double min_volume = 1e-12;
  int max_depth = 12;
  double duration = kDefaultDuration;
  /// Octaves are cycled over [octave_low, octave_high] by root index.
  int octave_low = -2;
  int octave_high = 2;
  std::size_t workers = 1;

  void validate() const;
  int octave_for(std::size_t root) const;
};

struct Provenance {
  std::size_t preset_pair = 0;
  int depth = 0;

  friend auto operator<=>(const Provenance&, const Provenance&) = default;
};

struct CorpusEntry {
  std::string id;
  ParameterVector params;
  int octave = 0;
  std::string audio_path;
  Provenance provenance;
};

/// Content-derived identifier of a quantized parameter vector.
std::string entry_id(const ParameterVector& quantized);

enum class StopReason { Similar, MinVolume, MaxDepth, NoLiveAxis };

struct TerminalCube {
  Hypercube cube;
  std::size_t root = 0;
  int depth = 0;
  StopReason reason = StopReason::Similar;
  /// Minimum side similarity over live axes, when it was evaluated.
  std::optional<double> min_similarity;
};

struct ExploreResult {
  /// Sorted by id; duplicates (by quantized params) merged to the smallest provenance.
  std::vector<CorpusEntry> entries;
  /// Sorted by (root, depth, lo, hi).
  std::vector<TerminalCube> terminals;
  std::size_t renders = 0;
  std::size_t failed_branches = 0;
};

ExploreResult explore(std::span<const Hypercube> roots, const ExploreConfig& cfg, const Renderer& renderer,
                      const SimilarityMeasure& measure);

/// One preset per non-empty line, 16 whitespace-separated values; '#' starts a comment.
std::vector<ParameterVector> parse_presets(std::string_view text);
std::vector<ParameterVector> load_presets(const std::filesystem::path& path);

struct Corpus {
  std::string presets_hash;
  std::size_t preset_count = 0;
  std::vector<CorpusEntry> entries;
};

inline constexpr int kCorpusVersion = 1;

/// Line-delimited JSON: a header record, then one record per entry.
std::string manifest_text(const Corpus& corpus);
Corpus parse_manifest(std::string_view text);
Corpus load_manifest(const std::filesystem::path& path);

struct BuildSummary {
  std::filesystem::path manifest;
  std::size_t entries = 0;
  std::size_t failed_branches = 0;
};

/// Explore from every preset pair, render each entry to `out_dir/wav/<id>.wav`
/// and write `out_dir/manifest.jsonl`.
BuildSummary build_corpus(const std::filesystem::path& presets_file, const ExploreConfig& cfg,
                          const std::filesystem::path& out_dir);

}  // namespace timbre
