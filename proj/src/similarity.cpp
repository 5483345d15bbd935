#include "timbre/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "timbre/dsp.hpp"

namespace timbre {

Eigen::MatrixXd mfcc_frames(std::span<const double> samples, double rate) {
  const auto window = static_cast<std::size_t>(std::lround(mfcc::kFrameSeconds * rate));
  const std::size_t hop = window / 2;
  const std::size_t count = dsp::frame_count(samples.size(), window, hop);
  if (count < mfcc::kMinFrames) {
    throw std::invalid_argument("sound too short for MFCC analysis (" + std::to_string(count) + " frames)");
  }

  const dsp::RealFft fft(dsp::next_pow2(window));
  const dsp::MelFilterbank mel(fft.size(), rate, mfcc::kMelBands);
  const dsp::Dct dct(mfcc::kMelBands, mfcc::kCoefficients + 1);
  const std::vector<double> win = dsp::hann(window);

  Eigen::MatrixXd bands(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(mfcc::kMelBands));
  std::vector<double> frame(window), power, energies(mfcc::kMelBands);
  double peak = 0.0;
  for (std::size_t f = 0; f < count; ++f) {
    const std::size_t start = f * hop;
    for (std::size_t i = 0; i < window; ++i) frame[i] = samples[start + i] * win[i];
    fft.power(frame, power);
    mel.apply(power, energies);
    for (std::size_t b = 0; b < mfcc::kMelBands; ++b) {
      bands(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(b)) = energies[b];
      peak = std::max(peak, energies[b]);
    }
  }

  // Floor relative to the loudest band so a uniform gain only shifts c0.
  const double floor = std::max(1e-30, 1e-10 * peak);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(mfcc::kCoefficients));
  std::vector<double> logs(mfcc::kMelBands), coeffs(mfcc::kCoefficients + 1);
  for (Eigen::Index f = 0; f < bands.rows(); ++f) {
    for (std::size_t b = 0; b < mfcc::kMelBands; ++b) {
      logs[b] = std::log(bands(f, static_cast<Eigen::Index>(b)) + floor);
    }
    dct.apply(logs, coeffs);
    for (std::size_t c = 0; c < mfcc::kCoefficients; ++c) out(f, static_cast<Eigen::Index>(c)) = coeffs[c + 1];
  }
  return out;
}

GaussianTimbreModel mfcc_model(const SoundSample& sound) {
  const Eigen::MatrixXd x = mfcc_frames(sound.samples, sound.sample_rate);
  GaussianTimbreModel m;
  m.frames = static_cast<std::size_t>(x.rows());
  m.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - m.mean.transpose();
  m.cov = (centered.transpose() * centered) / static_cast<double>(x.rows());
  m.cov = 0.5 * (m.cov + m.cov.transpose());
  m.cov.diagonal().array() += mfcc::kRegularization;
  m.inv_cov = m.cov.ldlt().solve(Eigen::MatrixXd::Identity(m.cov.rows(), m.cov.cols()));
  m.inv_cov = 0.5 * (m.inv_cov + m.inv_cov.transpose());
  return m;
}

double symmetric_kl(const GaussianTimbreModel& a, const GaussianTimbreModel& b) {
  const auto d = static_cast<double>(a.mean.size());
  const Eigen::VectorXd delta = a.mean - b.mean;
  const double traces = (b.inv_cov.cwiseProduct(a.cov)).sum() + (a.inv_cov.cwiseProduct(b.cov)).sum();
  const double quad = delta.dot((a.inv_cov + b.inv_cov) * delta);
  return std::max(0.0, 0.5 * (traces + quad) - d);
}

std::shared_ptr<const TimbreDescriptor> GaussianKlSimilarity::describe(const SoundSample& sound) const {
  return std::make_shared<GaussianTimbreModel>(mfcc_model(sound));
}

SimilarityScore GaussianKlSimilarity::compare(const TimbreDescriptor& a, const TimbreDescriptor& b) const {
  const auto& ga = dynamic_cast<const GaussianTimbreModel&>(a);
  const auto& gb = dynamic_cast<const GaussianTimbreModel&>(b);
  if (&ga == &gb || (ga.mean == gb.mean && ga.cov == gb.cov)) return {1.0, 0.0};
  const double kl = symmetric_kl(ga, gb);
  return {std::exp(-kl / tau_), kl};
}

SimilarityScore similarity(const SoundSample& a, const SoundSample& b) {
  return GaussianKlSimilarity{}(a, b);
}

}  // namespace timbre
