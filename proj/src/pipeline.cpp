#include "timbre/pipeline.hpp"

#include <spdlog/spdlog.h>

#include "timbre/artifacts.hpp"
#include "timbre/corpus.hpp"

namespace timbre::pipeline {

namespace {

void expect_chain(const std::string& recorded, const std::string& actual, const std::string& what) {
  if (recorded != actual) {
    throw ArtifactError(what + " was built from a different input (expected " + recorded + ", found " + actual + ")");
  }
}

void expect_rows_match(const std::vector<std::string>& ids, const Corpus& corpus, const std::string& what) {
  if (ids.size() != corpus.entries.size()) throw ArtifactError(what + " row count does not match the corpus");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != corpus.entries[i].id) throw ArtifactError(what + " row " + std::to_string(i) + " does not match the corpus");
  }
}

}  // namespace

StageReport extract_features(const std::filesystem::path& corpus_dir, const std::filesystem::path& out,
                             std::size_t workers) {
  const auto manifest = corpus_dir / kManifestName;
  const std::string text = read_file(manifest);
  const Corpus corpus = parse_manifest(text);
  const FeatureMatrixFile stats = extract_corpus(corpus, corpus_dir, content_hash(text), workers);
  stats.save(out);
  spdlog::info("extracted {} candidate statistics for {} sounds", kCandidateCount, stats.ids.size());
  return {out, stats.input_hash, stats.ids.size()};
}

StageReport select_features(const std::filesystem::path& stats_path, const std::filesystem::path& corpus_dir,
                            const std::filesystem::path& out, Criterion criterion) {
  const std::string stats_bytes = read_file(stats_path);
  const FeatureMatrixFile stats = FeatureMatrixFile::decode(stats_bytes);
  const auto manifest = corpus_dir / kManifestName;
  expect_chain(stats.input_hash, file_hash(manifest), "candidate statistics");
  const Corpus corpus = load_manifest(manifest);
  expect_rows_match(stats.ids, corpus, "candidate statistics");

  const SubsetScorer scorer = criterion == Criterion::GtmLikelihood ? gtm::likelihood_scorer() : SubsetScorer{};
  const FeatureMatrixFile features = build_feature_matrix(stats, corpus, content_hash(stats_bytes), kSelectedCount, scorer);
  features.save(out);
  write_file(out.string() + ".txt", selection_sidecar(features));
  return {out, features.input_hash, features.ids.size()};
}

TrainReport train_gtm(const std::filesystem::path& features_path, const std::filesystem::path& out,
                      const gtm::Config& cfg) {
  const std::string bytes = read_file(features_path);
  const FeatureMatrixFile features = FeatureMatrixFile::decode(bytes);
  if (features.kind != MatrixKind::Features) throw ArtifactError("expected a selected feature matrix");
  const Eigen::MatrixXd z = features.standardizer.apply(features.data);

  gtm::TrainResult trained = gtm::train(gtm::init(z, cfg), z, cfg.max_iter, cfg.rel_tol);
  gtm::ModelFile file{content_hash(bytes), std::move(trained.model), features.standardizer, trained.trace};
  file.save(out);
  spdlog::info("GTM trained in {} iterations, log-likelihood {:.6g}", trained.iterations, file.trace.back());
  return {{out, file.input_hash, static_cast<std::size_t>(z.rows())}, trained.iterations, file.trace.back()};
}

StageReport build_surface(const std::filesystem::path& model_path, const std::filesystem::path& features_path,
                          const std::filesystem::path& corpus_dir, const std::filesystem::path& out,
                          std::size_t clusters, std::size_t workers) {
  const std::string model_bytes = read_file(model_path);
  const gtm::ModelFile model = gtm::ModelFile::decode(model_bytes);
  const std::string feature_bytes = read_file(features_path);
  expect_chain(model.input_hash, content_hash(feature_bytes), "GTM model");
  const FeatureMatrixFile features = FeatureMatrixFile::decode(feature_bytes);
  const Corpus corpus = load_manifest(corpus_dir / kManifestName);
  expect_rows_match(features.ids, corpus, "feature matrix");

  const Eigen::MatrixXd z = model.standardizer.apply(features.data);
  const Eigen::MatrixXd xy = gtm::project(model.model, z);
  std::vector<surface::PointRef> refs;
  for (const CorpusEntry& e : corpus.entries) refs.push_back({e.id, e.params, e.octave});
  const std::size_t k = std::min(clusters, refs.size());
  const surface::TimbreSurface s = surface::build(xy, z, refs, k, content_hash(model_bytes), workers);
  surface::save(s, out);
  return {out, s.input_hash(), s.size()};
}

}  // namespace timbre::pipeline
