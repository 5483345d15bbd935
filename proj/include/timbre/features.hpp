#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "timbre/corpus.hpp"
#include "timbre/synth.hpp"

namespace timbre {

inline constexpr std::size_t kFrameFeatureCount = 30;
inline constexpr std::size_t kStatsPerFeature = 8;
inline constexpr std::size_t kCrossStatCount = 128;
inline constexpr std::size_t kCandidateCount = kFrameFeatureCount * kStatsPerFeature + kCrossStatCount;  // 368
inline constexpr std::size_t kSelectedCount = 50;
inline constexpr std::size_t kFeatureDim = kSelectedCount + kParamCount;  // 66

/// Column indices of the per-frame features.
enum class FrameFeature : std::size_t {
  Centroid = 0,
  Spread,
  Skewness,
  Kurtosis,
  Flatness,
  Entropy,
  Rolloff85,
  Rolloff95,
  Brightness,
  Flux,
  ZeroCrossingRate,
  Roughness,
  Irregularity,
  Rms,
  LowEnergy,
  Mfcc0,  // 13 coefficients: Mfcc0 .. Mfcc0 + 12
  AttackSlope = 28,
  Inharmonicity = 29,
};

const std::array<std::string, kFrameFeatureCount>& frame_feature_names();
/// Names of the 368 candidate statistics, in collapse_stats order.
const std::vector<std::string>& candidate_names();
/// Column pairs whose correlation forms the 128 cross statistics.
const std::vector<std::pair<std::size_t, std::size_t>>& cross_stat_pairs();

struct FeatureTimeSeries {
  /// T x 30, finite.
  Eigen::MatrixXd frames;
  double frame_rate = 0.0;
};

/// Analysis window: next power of two at or above 46 ms (2048 at 44.1 kHz), 50% hop.
std::size_t analysis_window(double rate);

FeatureTimeSeries extract_frames(std::span<const double> samples, double rate);
inline FeatureTimeSeries extract_frames(const SoundSample& s) { return extract_frames(s.samples, s.sample_rate); }

/// Per column: mean, std, skewness, kurtosis, min, max, linear-trend slope,
/// mean absolute first difference; then 128 pairwise correlations.
std::vector<double> collapse_stats(const FeatureTimeSeries& ts);

/// Scores the standardized columns of a candidate subset; larger is better.
using SubsetScorer = std::function<double(const Eigen::MatrixXd& subset)>;

/// Minimum subset size a SubsetScorer is asked about; smaller subsets are
/// grown with the default relevance/redundancy criterion.
inline constexpr std::size_t kScorerMinColumns = 3;

/// Greedy forward selection over the non-constant columns. The default
/// criterion is relevance (4 x variance of the min-max normalized column)
/// minus mean absolute correlation with the already selected columns.
/// Ties go to the lowest column index.
std::vector<std::size_t> select_features(const Eigen::MatrixXd& matrix, std::size_t target,
                                         const SubsetScorer& scorer = {});

struct FeatureVector {
  std::vector<double> selected_stats;
  std::vector<double> params;
  std::vector<double> combined;
  std::string entry_id;
};

FeatureVector assemble(const CorpusEntry& entry, std::span<const double> stats,
                       std::span<const std::size_t> selection);

struct Standardizer {
  static constexpr double kStdFloor = 1e-12;

  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  /// Population statistics per column.
  static Standardizer fit(const Eigen::MatrixXd& matrix);
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const;
  Eigen::MatrixXd apply(const Eigen::MatrixXd& m) const;
  Eigen::VectorXd inverse(const Eigen::VectorXd& z) const;
};

enum class MatrixKind : std::uint32_t { CandidateStats = 1, Features = 2 };

/// Binary matrix artifact: header (magic, version, kind, input hash, N, D,
/// selection, standardizer, entry ids) then N x D little-endian float64, row-major.
struct FeatureMatrixFile {
  static constexpr std::uint32_t kVersion = 1;

  MatrixKind kind = MatrixKind::Features;
  std::string input_hash;
  std::vector<std::string> ids;
  std::vector<std::size_t> selection;
  Standardizer standardizer;
  Eigen::MatrixXd data;

  std::string encode() const;
  static FeatureMatrixFile decode(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static FeatureMatrixFile load(const std::filesystem::path& path);
};

/// Reads every entry's WAV and collapses it to the 368 candidates (parallel map).
FeatureMatrixFile extract_corpus(const Corpus& corpus, const std::filesystem::path& corpus_dir,
                                 const std::string& manifest_hash, std::size_t workers);

/// Selects `target` statistics and appends each entry's parameters.
FeatureMatrixFile build_feature_matrix(const FeatureMatrixFile& stats, const Corpus& corpus,
                                       const std::string& stats_hash, std::size_t target = kSelectedCount,
                                       const SubsetScorer& scorer = {});

/// Human-readable sidecar listing selected features then parameter slots.
std::string selection_sidecar(const FeatureMatrixFile& features);

}  // namespace timbre
