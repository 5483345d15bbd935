#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace timbre {

struct WavData {
  std::vector<double> samples;
  double sample_rate = 0.0;
};

/// RIFF/WAVE, 16-bit signed PCM, mono. Samples are scaled by 32767 and rounded
/// half away from zero after clamping to [-1,1].
std::string encode_wav(std::span<const double> samples, double sample_rate);
void write_wav(const std::filesystem::path& path, std::span<const double> samples, double sample_rate);

WavData decode_wav(std::string_view bytes);
WavData read_wav(const std::filesystem::path& path);

}  // namespace timbre
