#include "timbre/dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <stdexcept>

namespace timbre::dsp {

namespace {
// FFTW planning is not thread safe; execution with the new-array API is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

std::vector<double> hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

RealFft::RealFft(std::size_t size) : size_(size), plan_(nullptr) {
  if (size < 2) throw std::invalid_argument("FFT size must be >= 2");
  std::vector<double> in(size);
  std::vector<std::complex<double>> out(size / 2 + 1);
  std::lock_guard lock(planner_mutex());
  plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(size), in.data(),
                               reinterpret_cast<fftw_complex*>(out.data()),
                               FFTW_ESTIMATE | FFTW_UNALIGNED);
  if (plan_ == nullptr) throw std::runtime_error("FFTW planning failed");
}

RealFft::~RealFft() {
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(static_cast<fftw_plan>(plan_));
}

void RealFft::transform(std::span<const double> frame, std::vector<std::complex<double>>& out) const {
  std::vector<double> in(size_, 0.0);
  std::copy_n(frame.begin(), std::min(frame.size(), size_), in.begin());
  out.resize(bins());
  fftw_execute_dft_r2c(static_cast<fftw_plan>(plan_), in.data(), reinterpret_cast<fftw_complex*>(out.data()));
}

void RealFft::power(std::span<const double> frame, std::vector<double>& out) const {
  std::vector<std::complex<double>> spec;
  transform(frame, spec);
  out.resize(spec.size());
  for (std::size_t k = 0; k < spec.size(); ++k) out[k] = std::norm(spec[k]);
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(std::size_t fft_size, double rate, std::size_t bands) {
  const std::size_t nbins = fft_size / 2 + 1;
  const double top = hz_to_mel(rate / 2.0);
  std::vector<double> edges(bands + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(bands + 1));
  }
  const double bin_hz = rate / static_cast<double>(fft_size);
  for (std::size_t b = 0; b < bands; ++b) {
    const double lo = edges[b], mid = edges[b + 1], hi = edges[b + 2];
    Band band{nbins, {}};
    std::vector<double> w;
    for (std::size_t k = 0; k < nbins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double v = 0.0;
      if (f > lo && f < hi) v = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
      if (v > 0.0) {
        if (band.first == nbins) band.first = k;
        band.w.resize(k - band.first + 1, 0.0);
        band.w.back() = v;
      }
    }
    if (band.first == nbins) {
      // band narrower than one bin: use the nearest bin
      band.first = std::min(nbins - 1, static_cast<std::size_t>(std::lround(mid / bin_hz)));
      band.w = {1.0};
    }
    weights_.push_back(std::move(band));
    centers_.push_back(mid);
  }
}

void MelFilterbank::apply(std::span<const double> power, std::span<double> out) const {
  for (std::size_t b = 0; b < weights_.size(); ++b) {
    const Band& band = weights_[b];
    double acc = 0.0;
    for (std::size_t j = 0; j < band.w.size(); ++j) acc += band.w[j] * power[band.first + j];
    out[b] = acc;
  }
}

std::vector<double> dct2(std::span<const double> in, std::size_t count) {
  const std::size_t n = in.size();
  std::vector<double> out(count, 0.0);
  for (std::size_t k = 0; k < count; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += in[i] * std::cos(std::numbers::pi * static_cast<double>(k) * (static_cast<double>(i) + 0.5) /
                              static_cast<double>(n));
    }
    out[k] = acc * std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n));
  }
  return out;
}

Dct::Dct(std::size_t n, std::size_t count) : n_(n), count_(count), basis_(n * count) {
  for (std::size_t k = 0; k < count; ++k) {
    const double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      basis_[k * n + i] = scale * std::cos(std::numbers::pi * static_cast<double>(k) *
                                           (static_cast<double>(i) + 0.5) / static_cast<double>(n));
    }
  }
}

void Dct::apply(std::span<const double> in, std::span<double> out) const {
  for (std::size_t k = 0; k < count_; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n_; ++i) acc += basis_[k * n_ + i] * in[i];
    out[k] = acc;
  }
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

std::size_t frame_count(std::size_t samples, std::size_t window, std::size_t hop) {
  if (samples < window) return 0;
  return (samples - window) / hop + 1;
}

}  // namespace timbre::dsp
