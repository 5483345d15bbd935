#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "timbre/features.hpp"

namespace timbre::gtm {

struct GridShape {
  int rows = 1;
  int cols = 1;
  int count() const { return rows * cols; }
};

struct Config {
  GridShape latent{20, 20};
  GridShape basis{6, 6};
  double width_factor = 2.0;
  double lambda = 1e-4;
  double rel_tol = 1e-5;
  int max_iter = 200;
};

inline constexpr double kMinBeta = 1e-8;
inline constexpr double kMaxBeta = 1e12;
inline constexpr double kMaxLambda = 1e-2;

/// rows*cols points evenly spaced over [-1,1]^2, row-major; a single row or
/// column sits at coordinate 0.
Eigen::MatrixXd uniform_grid(GridShape shape);

/// Spacing between neighbouring centers of a grid (the larger of the two axes).
double grid_spacing(GridShape shape);

/// K x (M+1): Gaussian activations of each basis center plus a constant column.
Eigen::MatrixXd design_matrix(const Eigen::MatrixXd& latent, const Eigen::MatrixXd& centers, double sigma);

struct Model {
  GridShape latent_shape;
  GridShape basis_shape;
  double width_factor = 2.0;
  double lambda = 1e-4;
  Eigen::MatrixXd latent;   // K x 2
  Eigen::MatrixXd centers;  // M x 2
  double sigma = 1.0;
  Eigen::MatrixXd phi;  // K x (M+1)
  Eigen::MatrixXd w;    // (M+1) x D
  double beta = 1.0;

  Eigen::Index k() const { return latent.rows(); }
  Eigen::Index dim() const { return w.cols(); }
  /// K x D images y(x_k) = Phi[k] W.
  Eigen::MatrixXd images() const { return phi * w; }
};

/// Linear initialization from the top two principal directions. Throws
/// std::invalid_argument for N <= D, D < 2 or fewer than 3 non-constant columns.
Model init(const Eigen::MatrixXd& data, const Config& cfg = {});

struct EStep {
  Eigen::MatrixXd r;  // N x K, rows sum to 1
  double log_likelihood = 0.0;
};

EStep e_step(const Model& model, const Eigen::MatrixXd& data);

/// New W and beta from the responsibilities. A singular normal system is
/// retried with lambda x10 up to kMaxLambda, then std::runtime_error.
Model m_step(const Model& model, const Eigen::MatrixXd& r, const Eigen::MatrixXd& data);

struct TrainResult {
  Model model;
  /// Log-likelihood before training and after each iteration.
  std::vector<double> trace;
  int iterations = 0;
};

TrainResult train(Model model, const Eigen::MatrixXd& data, int max_iter, double rel_tol);

/// Posterior-mean latent position of one data vector.
Eigen::Vector2d project(const Model& model, const Eigen::VectorXd& t);
/// N x 2 posterior means.
Eigen::MatrixXd project(const Model& model, const Eigen::MatrixXd& data);

/// Model artifact: the trained model plus the standardizer of its training data.
struct ModelFile {
  static constexpr std::uint32_t kVersion = 1;

  std::string input_hash;
  Model model;
  Standardizer standardizer;
  std::vector<double> trace;

  std::string encode() const;
  static ModelFile decode(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static ModelFile load(const std::filesystem::path& path);
};

/// Feature-selection criterion: mean per-row log-likelihood of a small GTM
/// trained on (a row subsample of) the subset.
SubsetScorer likelihood_scorer(std::size_t max_rows = 100, int iterations = 5);

}  // namespace timbre::gtm
