#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace timbre::dsp {

/// Periodic Hann window of length n.
std::vector<double> hann(std::size_t n);

/// Real-input FFT of a fixed size. Safe to share between threads once built.
class RealFft {
 public:
  explicit RealFft(std::size_t size);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const { return size_; }
  std::size_t bins() const { return size_ / 2 + 1; }

  /// `frame` may be shorter than size(); it is zero padded.
  void transform(std::span<const double> frame, std::vector<std::complex<double>>& out) const;
  void power(std::span<const double> frame, std::vector<double>& out) const;

 private:
  std::size_t size_;
  void* plan_;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular mel filterbank over the bins of a real FFT.
class MelFilterbank {
 public:
  MelFilterbank(std::size_t fft_size, double rate, std::size_t bands);

  std::size_t bands() const { return weights_.size(); }
  void apply(std::span<const double> power, std::span<double> out) const;
  /// Center frequency of each band in Hz.
  const std::vector<double>& centers() const { return centers_; }

 private:
  struct Band {
    std::size_t first;
    std::vector<double> w;
  };
  std::vector<Band> weights_;
  std::vector<double> centers_;
};

/// Orthonormal DCT-II, first `count` coefficients.
std::vector<double> dct2(std::span<const double> in, std::size_t count);

/// Precomputed orthonormal DCT-II basis for repeated transforms.
class Dct {
 public:
  Dct(std::size_t n, std::size_t count);
  void apply(std::span<const double> in, std::span<double> out) const;

 private:
  std::size_t n_;
  std::size_t count_;
  std::vector<double> basis_;
};

std::size_t next_pow2(std::size_t n);

/// Number of full frames of length `window` with the given hop.
std::size_t frame_count(std::size_t samples, std::size_t window, std::size_t hop);

}  // namespace timbre::dsp
