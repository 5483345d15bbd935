#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

#include "timbre/features.hpp"
#include "timbre/gtm.hpp"
#include "timbre/surface.hpp"

// Offline stages that read one artifact and write the next. Each output
// embeds the content hash of its input; mismatched chains raise ArtifactError.
namespace timbre::pipeline {

inline const std::string kManifestName = "manifest.jsonl";

struct StageReport {
  std::filesystem::path output;
  std::string input_hash;
  std::size_t rows = 0;
};

StageReport extract_features(const std::filesystem::path& corpus_dir, const std::filesystem::path& out,
                             std::size_t workers);

enum class Criterion { Relevance, GtmLikelihood };

/// Also writes `<out>.txt` naming the selected columns.
StageReport select_features(const std::filesystem::path& stats_path, const std::filesystem::path& corpus_dir,
                            const std::filesystem::path& out, Criterion criterion = Criterion::Relevance);

struct TrainReport {
  StageReport stage;
  int iterations = 0;
  double final_log_likelihood = 0.0;
};

TrainReport train_gtm(const std::filesystem::path& features_path, const std::filesystem::path& out,
                      const gtm::Config& cfg = {});

StageReport build_surface(const std::filesystem::path& model_path, const std::filesystem::path& features_path,
                          const std::filesystem::path& corpus_dir, const std::filesystem::path& out,
                          std::size_t clusters = surface::kDefaultClusters, std::size_t workers = 1);

}  // namespace timbre::pipeline
