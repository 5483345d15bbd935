#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace timbre {

inline constexpr std::size_t kParamCount = 16;
inline constexpr int kMaxSteps = 20;
inline constexpr double kDefaultRate = 44100.0;
inline constexpr double kDefaultDuration = 4.0;
inline constexpr int kMinOctave = -5;
inline constexpr int kMaxOctave = 5;
/// Reference pitch for octave 0 (C4). Every rendered sound has pitch class C.
inline constexpr double kPitchC4 = 261.6255653005986;

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Slot layout of the 16 synthesis parameters.
enum class Slot : std::size_t {
  MasterD = 0,
  MasterV,
  SlaveD,
  SlaveV,
  SlaveRatio,
  CombineMode,
  ModDepth,
  OscBalance,
  NoiseLevel,
  AmpAttack,
  AmpDecay,
  AmpSustain,
  ModEnvAmount,
  ModEnvDest,
  ReverbMix,
  ChorusFlanger,
};

/// Number of discrete levels per slot; every entry is <= kMaxSteps.
inline constexpr std::array<int, kParamCount> kSlotSteps = {
    16, 20, 16, 20, 7, 3, 10, 10, 10, 10, 10, 10, 10, 3, 10, 11};

const std::array<std::string, kParamCount>& slot_names();

/// log10 of the number of distinct quantized parameter configurations.
double parameter_space_log10_cardinality();

/// Normalized synthesizer parameters, each in [0,1].
class ParameterVector {
 public:
  ParameterVector() { values_.fill(0.0); }
  explicit ParameterVector(const std::array<double, kParamCount>& values);
  explicit ParameterVector(std::span<const double> values);

  static ParameterVector filled(double v);

  double operator[](std::size_t i) const { return values_.at(i); }
  double operator[](Slot s) const { return values_[static_cast<std::size_t>(s)]; }
  void set(std::size_t i, double v);
  void set(Slot s, double v) { set(static_cast<std::size_t>(s), v); }

  const std::array<double, kParamCount>& values() const { return values_; }
  std::span<const double> span() const { return values_; }

  friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

 private:
  std::array<double, kParamCount> values_;
};

/// Snaps a value in [0,1] to the nearest of `steps` evenly spaced levels.
double quantize(double value, int steps);
ParameterVector quantize(const ParameterVector& p);

/// Single 2D breakpoint of the phase-shaping transfer function.
struct VpsBreakpoint {
  double d = 0.5;
  double v = 0.5;

  void validate() const;
};

/// Piecewise-linear phase distortion through (0,0), (d,v), (1,1).
double vps_phase(double x, const VpsBreakpoint& bp);

std::vector<double> vps_oscillator(double freq, const VpsBreakpoint& bp, std::size_t n, double rate,
                                   double initial_phase = 0.0);

enum class CombineMode { Mix = 0, AmplitudeMod = 1, FrequencyMod = 2 };
enum class ModDestination { MasterV = 0, SlaveV = 1, ModIndex = 2 };

inline constexpr std::array<int, 7> kHarmonicRatios = {1, 2, 3, 4, 5, 6, 8};

namespace mapping {
inline constexpr double kMinD = 0.02;
inline constexpr double kSpanD = 0.96;
inline constexpr double kMaxV = 3.0;
inline constexpr double kMaxFmIndex = 8.0;
inline constexpr double kMinAttack = 0.001;  // seconds
inline constexpr double kAttackRange = 1000.0;
inline constexpr double kMinDecay = 0.01;
inline constexpr double kDecayRange = 200.0;

inline constexpr double slot_for_d(double d) { return (d - kMinD) / kSpanD; }
inline constexpr double slot_for_v(double v) { return v / kMaxV; }
}  // namespace mapping

/// Physical synthesis settings decoded from a ParameterVector.
struct Patch {
  VpsBreakpoint master;
  VpsBreakpoint slave;
  int slave_ratio = 1;
  CombineMode mode = CombineMode::Mix;
  double mod_depth = 0.0;  // normalized; FM index = depth * kMaxFmIndex, AM depth = depth
  double balance = 0.0;    // 0 = master only, 1 = slave only
  double noise = 0.0;
  double attack = 0.001;
  double decay = 0.01;
  double sustain = 1.0;
  double mod_env_amount = 0.0;
  ModDestination mod_dest = ModDestination::MasterV;
  double reverb_mix = 0.0;
  double chorus_mix = 0.0;
  double flanger_mix = 0.0;
};

Patch decode(const ParameterVector& p);

struct SoundSample {
  std::vector<double> samples;
  double sample_rate = kDefaultRate;
  int octave = 0;
  double duration = kDefaultDuration;
  ParameterVector source_params;
  std::uint64_t seed = 0;
  static constexpr char pitch_class = 'C';
};

struct RenderSettings {
  int octave = 0;
  double duration = kDefaultDuration;
  double rate = kDefaultRate;
  std::uint64_t seed = 0;
  /// Transposition in semitones on top of the octave.
  int semitones = 0;
};

double fundamental_hz(int octave, int semitones = 0);

SoundSample render(const ParameterVector& params, const RenderSettings& settings);

inline SoundSample render(const ParameterVector& params, int octave, double duration, double rate,
                          std::uint64_t seed) {
  return render(params, RenderSettings{octave, duration, rate, seed, 0});
}

/// Chorus, flanger, then reverb. Stages with zero mix are bypassed exactly.
std::vector<double> apply_effects(std::span<const double> dry, double reverb_mix, double chorus_mix,
                                  double flanger_mix, double rate = kDefaultRate);

/// Scales the buffer down if its peak exceeds 1.
void limit_peak(std::vector<double>& buffer);

/// Uniform value in [-1,1] for the given (seed, index); counter based.
double noise_at(std::uint64_t seed, std::uint64_t index);

/// Stateful chorus -> flanger -> reverb chain, one sample at a time.
class EffectChain {
 public:
  explicit EffectChain(double rate = kDefaultRate);
  ~EffectChain();
  EffectChain(EffectChain&&) noexcept;
  EffectChain& operator=(EffectChain&&) noexcept;

  double process(double x, double reverb_mix, double chorus_mix, double flanger_mix);

 private:
  struct State;
  std::unique_ptr<State> state_;
};

/// Streaming single-voice renderer. Parameter changes take effect at the next
/// control block and are ramped linearly across it.
class Voice {
 public:
  static constexpr std::size_t kBlockSize = 64;

  explicit Voice(const ParameterVector& params, RenderSettings settings = {});

  void set_params(const ParameterVector& params);
  /// Fills `out` with the next samples; output is hard-clipped to [-1,1].
  void process(std::span<double> out);
  /// Samples delivered so far.
  std::uint64_t position() const { return position_ - (kBlockSize - block_read_); }

 private:
  void render_block();

  RenderSettings settings_;
  Patch current_;
  Patch target_;
  bool pending_ = false;
  std::uint64_t position_ = 0;
  std::array<double, kBlockSize> block_{};
  std::size_t block_read_ = kBlockSize;
  EffectChain fx_;
};

}  // namespace timbre
