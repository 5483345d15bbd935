#pragma once

// Independent reference computations and generators shared by the tests.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <sys/wait.h>
#include <utility>
#include <vector>

#include "timbre/synth.hpp"

namespace oracle {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("timbre-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
  bool coin(double p = 0.5) { return uniform() < p; }

  timbre::ParameterVector params() {
    std::array<double, timbre::kParamCount> v{};
    for (double& x : v) x = uniform();
    return timbre::ParameterVector(v);
  }

  Eigen::MatrixXd matrix(Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = uniform(lo, hi);
    return m;
  }
};

/// 3D S-shaped sheet, N x 3.
inline Eigen::MatrixXd s_curve(std::size_t n, std::uint64_t seed) {
  Gen g(seed);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 3);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double t = 3.0 * std::numbers::pi * (g.uniform() - 0.5);
    x(i, 0) = std::sin(t);
    x(i, 1) = 2.0 * g.uniform();
    x(i, 2) = (t < 0 ? -1.0 : 1.0) * (std::cos(t) - 1.0);
  }
  return x;
}

using P2 = std::array<double, 2>;

/// Linear scan: k nearest by squared distance, ties to the lower index.
inline std::vector<std::size_t> brute_knn(const std::vector<P2>& pts, const P2& q, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  all.reserve(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double dx = pts[i][0] - q[0], dy = pts[i][1] - q[1];
    all.emplace_back(dx * dx + dy * dy, i);
  }
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
  return out;
}

/// Neighbour sets of every row (self excluded) by brute force.
inline std::vector<std::vector<std::size_t>> knn_sets(const Eigen::MatrixXd& x, std::size_t k) {
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<std::vector<std::size_t>> sets(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      d.emplace_back((x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).squaredNorm(), j);
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    for (std::size_t m = 0; m < k; ++m) sets[i].push_back(d[m].second);
    std::sort(sets[i].begin(), sets[i].end());
  }
  return sets;
}

/// Mean fraction of each point's k nearest neighbours kept by the embedding.
inline double knn_preservation(const Eigen::MatrixXd& high, const Eigen::MatrixXd& low, std::size_t k) {
  const auto a = knn_sets(high, k);
  const auto b = knn_sets(low, k);
  double kept = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::vector<std::size_t> common;
    std::set_intersection(a[i].begin(), a[i].end(), b[i].begin(), b[i].end(), std::back_inserter(common));
    kept += static_cast<double>(common.size()) / static_cast<double>(k);
  }
  return kept / static_cast<double>(a.size());
}

/// Best linear 2D projection in the least-squares sense: top two right
/// singular vectors of the centered data.
inline Eigen::MatrixXd pca_2d(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeThinV);
  return c * svd.matrixV().leftCols(2);
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t m = i; m <= j; ++m) r[idx[m]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const Eigen::Map<const Eigen::VectorXd> x(ra.data(), static_cast<Eigen::Index>(ra.size()));
  const Eigen::Map<const Eigen::VectorXd> y(rb.data(), static_cast<Eigen::Index>(rb.size()));
  const Eigen::VectorXd dx = x.array() - x.mean(), dy = y.array() - y.mean();
  return dx.dot(dy) / std::sqrt(dx.squaredNorm() * dy.squaredNorm());
}

struct CommandResult {
  int status = -1;
  std::string output;  // stdout and stderr
};

inline CommandResult run(const std::string& command) {
  CommandResult r;
  FILE* pipe = popen((command + " 2>&1").c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

inline std::string quote(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

/// Least-squares fit of a sinusoid at `freq` to samples[from, end); returns
/// the residual energy relative to the total in dB.
inline double sinusoid_residual_db(const std::vector<double>& x, double freq, double rate, std::size_t from) {
  const std::size_t n = x.size() - from;
  Eigen::MatrixXd a(static_cast<Eigen::Index>(n), 2);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double ph = 2.0 * std::numbers::pi * freq * static_cast<double>(i + from) / rate;
    a(static_cast<Eigen::Index>(i), 0) = std::cos(ph);
    a(static_cast<Eigen::Index>(i), 1) = std::sin(ph);
    y[static_cast<Eigen::Index>(i)] = x[i + from];
  }
  const Eigen::Vector2d coef = a.colPivHouseholderQr().solve(y);
  const double residual = (y - a * coef).squaredNorm();
  return 10.0 * std::log10(std::max(residual, 1e-300) / y.squaredNorm());
}

/// Amplitude of the component at `freq` (correlation over samples[from, end)).
inline double tone_amplitude(const std::vector<double>& x, double freq, double rate, std::size_t from) {
  double c = 0.0, s = 0.0;
  for (std::size_t i = from; i < x.size(); ++i) {
    const double ph = 2.0 * std::numbers::pi * freq * static_cast<double>(i) / rate;
    c += x[i] * std::cos(ph);
    s += x[i] * std::sin(ph);
  }
  return 2.0 * std::sqrt(c * c + s * s) / static_cast<double>(x.size() - from);
}

/// Parameters that reduce the synthesizer to one undistorted master
/// oscillator (v = d) with a flat envelope and no effects.
inline timbre::ParameterVector plain_sine_params(double master_d_slot = 0.5) {
  using timbre::Slot;
  timbre::ParameterVector p;
  const double d = timbre::mapping::kMinD + timbre::mapping::kSpanD * master_d_slot;
  p.set(Slot::MasterD, master_d_slot);
  p.set(Slot::MasterV, timbre::mapping::slot_for_v(d));
  p.set(Slot::SlaveD, 0.5);
  p.set(Slot::AmpSustain, 1.0);
  p.set(Slot::AmpDecay, 0.0);
  p.set(Slot::ChorusFlanger, 0.5);
  return p;
}

}  // namespace oracle
