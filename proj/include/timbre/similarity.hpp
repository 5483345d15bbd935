#pragma once

#include <Eigen/Dense>

#include <memory>

#include "timbre/synth.hpp"

namespace timbre {

struct SimilarityScore {
  /// 1 = identical, 0 = maximally dissimilar.
  double value = 1.0;
  /// Divergence the value was derived from (0 for identical inputs).
  double divergence = 0.0;

  // Ordered by divergence: the value is a strictly decreasing function of it,
  // and the divergence stays distinguishable where the value underflows to 0.
  friend bool operator<(const SimilarityScore& a, const SimilarityScore& b) {
    return a.divergence > b.divergence;
  }
  friend bool operator>(const SimilarityScore& a, const SimilarityScore& b) { return b < a; }
};

/// Opaque per-sound summary a measure compares.
struct TimbreDescriptor {
  virtual ~TimbreDescriptor() = default;
};

/// Two-stage similarity: describe each sound once, compare descriptors many times.
class SimilarityMeasure {
 public:
  virtual ~SimilarityMeasure() = default;
  virtual std::shared_ptr<const TimbreDescriptor> describe(const SoundSample& sound) const = 0;
  virtual SimilarityScore compare(const TimbreDescriptor& a, const TimbreDescriptor& b) const = 0;

  SimilarityScore operator()(const SoundSample& a, const SoundSample& b) const {
    return compare(*describe(a), *describe(b));
  }
};

namespace mfcc {
inline constexpr std::size_t kCoefficients = 13;  // c1..c13, c0 dropped
inline constexpr std::size_t kMelBands = 40;
inline constexpr double kFrameSeconds = 0.023;
inline constexpr double kRegularization = 1e-6;
inline constexpr std::size_t kMinFrames = 4;
}  // namespace mfcc

/// Single Gaussian over frame-wise MFCCs.
struct GaussianTimbreModel : TimbreDescriptor {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  Eigen::MatrixXd inv_cov;
  std::size_t frames = 0;
};

/// Frame-wise MFCCs (frames x 13) over 23 ms Hann frames with 50% overlap.
Eigen::MatrixXd mfcc_frames(std::span<const double> samples, double rate);

GaussianTimbreModel mfcc_model(const SoundSample& sound);

double symmetric_kl(const GaussianTimbreModel& a, const GaussianTimbreModel& b);

/// exp(-KLsym / tau) between single-Gaussian MFCC models.
class GaussianKlSimilarity final : public SimilarityMeasure {
 public:
  static constexpr double kDefaultTau = 50.0;

  explicit GaussianKlSimilarity(double tau = kDefaultTau) : tau_(tau) {}

  std::shared_ptr<const TimbreDescriptor> describe(const SoundSample& sound) const override;
  SimilarityScore compare(const TimbreDescriptor& a, const TimbreDescriptor& b) const override;
  double tau() const { return tau_; }

 private:
  double tau_;
};

SimilarityScore similarity(const SoundSample& a, const SoundSample& b);

}  // namespace timbre
