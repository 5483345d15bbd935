#include "timbre/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace timbre {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kOutputGain = 0.8;

void check_unit(double v, std::size_t i) {
  if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
    throw DomainError("parameter " + std::to_string(i) + " outside [0,1]: " + std::to_string(v));
  }
}

double frac(double x) {
  double r = x - std::floor(x);
  return r >= 1.0 ? 0.0 : r;
}

double shape(double x, const VpsBreakpoint& bp) {
  if (x < bp.d) return bp.v * x / bp.d;
  return bp.v + (1.0 - bp.v) * (x - bp.d) / (1.0 - bp.d);
}

double vps_wave(double phase, const VpsBreakpoint& bp) { return -std::cos(kTwoPi * shape(phase, bp)); }

struct Envelopes {
  double amp;
  double mod;
};

Envelopes envelopes(const Patch& p, double t) {
  if (t < p.attack) {
    double a = t / p.attack;
    return {a, a};
  }
  double since = t - p.attack;
  double amp = since < p.decay ? 1.0 - (1.0 - p.sustain) * since / p.decay : p.sustain;
  double mod = std::max(0.0, 1.0 - since / (2.0 * p.decay));
  return {amp, mod};
}

// One output sample before effects. Phases are derived from the sample index so
// that any sample can be computed independently.
double synth_sample(const Patch& p, std::uint64_t i, double f0, double rate, std::uint64_t seed) {
  const double t = static_cast<double>(i) / rate;
  const Envelopes env = envelopes(p, t);

  VpsBreakpoint master = p.master;
  VpsBreakpoint slave = p.slave;
  double depth = p.mod_depth;
  if (p.mod_env_amount > 0.0) {
    const double m = p.mod_env_amount * env.mod;
    switch (p.mod_dest) {
      case ModDestination::MasterV: master.v += m * mapping::kMaxV; break;
      case ModDestination::SlaveV: slave.v += m * mapping::kMaxV; break;
      case ModDestination::ModIndex: depth = std::min(1.0, depth + m); break;
    }
  }

  const double cycles = static_cast<double>(i) * f0 / rate;
  const double s = vps_wave(frac(cycles * p.slave_ratio), slave);

  double core = 0.0;
  switch (p.mode) {
    case CombineMode::Mix: core = vps_wave(frac(cycles), master); break;
    case CombineMode::AmplitudeMod:
      core = vps_wave(frac(cycles), master) * (1.0 - depth * (1.0 - s) * 0.5);
      break;
    case CombineMode::FrequencyMod:
      core = vps_wave(frac(cycles + depth * mapping::kMaxFmIndex * s / kTwoPi), master);
      break;
  }

  double sig = (1.0 - p.balance) * core + p.balance * s;
  if (p.noise > 0.0) sig = (1.0 - p.noise) * sig + p.noise * noise_at(seed, i);
  return kOutputGain * env.amp * sig;
}

double lerp(double a, double b, double t) { return a + (b - a) * t; }

Patch blend(const Patch& a, const Patch& b, double t) {
  Patch r = b;
  r.master = {lerp(a.master.d, b.master.d, t), lerp(a.master.v, b.master.v, t)};
  r.slave = {lerp(a.slave.d, b.slave.d, t), lerp(a.slave.v, b.slave.v, t)};
  r.mod_depth = lerp(a.mod_depth, b.mod_depth, t);
  r.balance = lerp(a.balance, b.balance, t);
  r.noise = lerp(a.noise, b.noise, t);
  r.sustain = lerp(a.sustain, b.sustain, t);
  r.mod_env_amount = lerp(a.mod_env_amount, b.mod_env_amount, t);
  r.reverb_mix = lerp(a.reverb_mix, b.reverb_mix, t);
  r.chorus_mix = lerp(a.chorus_mix, b.chorus_mix, t);
  r.flanger_mix = lerp(a.flanger_mix, b.flanger_mix, t);
  return r;
}

void check_settings(const RenderSettings& s) {
  if (s.octave < kMinOctave || s.octave > kMaxOctave)
    throw DomainError("octave outside [-5,5]: " + std::to_string(s.octave));
  if (!(s.duration > 0.0) || !std::isfinite(s.duration)) throw DomainError("duration must be positive");
  if (!(s.rate > 0.0) || !std::isfinite(s.rate)) throw DomainError("sample rate must be positive");
}

}  // namespace

const std::array<std::string, kParamCount>& slot_names() {
  static const std::array<std::string, kParamCount> names = {
      "master_d",     "master_v",    "slave_d",        "slave_v",
      "slave_ratio",  "combine_mode", "mod_depth",     "osc_balance",
      "noise_level",  "amp_attack",  "amp_decay",      "amp_sustain",
      "mod_env_amount", "mod_env_dest", "reverb_mix",  "chorus_flanger"};
  return names;
}

double parameter_space_log10_cardinality() {
  double sum = 0.0;
  for (int steps : kSlotSteps) sum += std::log10(static_cast<double>(steps));
  return sum;
}

ParameterVector::ParameterVector(const std::array<double, kParamCount>& values) : values_(values) {
  for (std::size_t i = 0; i < kParamCount; ++i) check_unit(values_[i], i);
}

ParameterVector::ParameterVector(std::span<const double> values) {
  if (values.size() != kParamCount)
    throw DomainError("expected 16 parameters, got " + std::to_string(values.size()));
  std::copy(values.begin(), values.end(), values_.begin());
  for (std::size_t i = 0; i < kParamCount; ++i) check_unit(values_[i], i);
}

ParameterVector ParameterVector::filled(double v) {
  std::array<double, kParamCount> a;
  a.fill(v);
  return ParameterVector(a);
}

void ParameterVector::set(std::size_t i, double v) {
  check_unit(v, i);
  values_.at(i) = v;
}

double quantize(double value, int steps) {
  if (steps < 2) throw DomainError("quantize needs at least 2 steps");
  check_unit(value, 0);
  const double levels = steps - 1;
  return std::round(value * levels) / levels;
}

ParameterVector quantize(const ParameterVector& p) {
  std::array<double, kParamCount> q;
  for (std::size_t i = 0; i < kParamCount; ++i) q[i] = quantize(p[i], kSlotSteps[i]);
  return ParameterVector(q);
}

void VpsBreakpoint::validate() const {
  if (!(d > 0.0 && d < 1.0)) throw DomainError("breakpoint d must lie in (0,1)");
  if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("breakpoint v must be >= 0");
}

double vps_phase(double x, const VpsBreakpoint& bp) {
  bp.validate();
  if (!(x >= 0.0 && x < 1.0)) throw DomainError("phase must lie in [0,1)");
  return shape(x, bp);
}

std::vector<double> vps_oscillator(double freq, const VpsBreakpoint& bp, std::size_t n, double rate,
                                   double initial_phase) {
  bp.validate();
  if (!(freq > 0.0) || !(rate > 0.0)) throw DomainError("frequency and rate must be positive");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = vps_wave(frac(initial_phase + static_cast<double>(i) * freq / rate), bp);
  }
  return out;
}

Patch decode(const ParameterVector& p) {
  using mapping::kMaxV;
  Patch r;
  r.master = {mapping::kMinD + mapping::kSpanD * p[Slot::MasterD], kMaxV * p[Slot::MasterV]};
  r.slave = {mapping::kMinD + mapping::kSpanD * p[Slot::SlaveD], kMaxV * p[Slot::SlaveV]};
  r.slave_ratio = kHarmonicRatios[static_cast<std::size_t>(std::lround(p[Slot::SlaveRatio] * 6.0))];
  r.mode = static_cast<CombineMode>(std::lround(p[Slot::CombineMode] * 2.0));
  r.mod_depth = p[Slot::ModDepth];
  r.balance = p[Slot::OscBalance];
  r.noise = p[Slot::NoiseLevel];
  r.attack = mapping::kMinAttack * std::pow(mapping::kAttackRange, p[Slot::AmpAttack]);
  r.decay = mapping::kMinDecay * std::pow(mapping::kDecayRange, p[Slot::AmpDecay]);
  r.sustain = p[Slot::AmpSustain];
  r.mod_env_amount = p[Slot::ModEnvAmount];
  r.mod_dest = static_cast<ModDestination>(std::lround(p[Slot::ModEnvDest] * 2.0));
  r.reverb_mix = p[Slot::ReverbMix];
  const double cf = p[Slot::ChorusFlanger];
  r.chorus_mix = std::max(0.0, (0.5 - cf) * 2.0);
  r.flanger_mix = std::max(0.0, (cf - 0.5) * 2.0);
  return r;
}

double fundamental_hz(int octave, int semitones) {
  return kPitchC4 * std::exp2(static_cast<double>(octave) + semitones / 12.0);
}

double noise_at(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over a seed-keyed counter
  std::uint64_t z = seed * 0xD1B54A32D192ED03ull + index * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  z ^= z >> 31;
  return static_cast<double>(z >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

SoundSample render(const ParameterVector& params, const RenderSettings& settings) {
  check_settings(settings);
  const Patch patch = decode(params);
  const auto n = static_cast<std::size_t>(std::llround(settings.duration * settings.rate));
  const double f0 = fundamental_hz(settings.octave, settings.semitones);

  std::vector<double> dry(n);
  for (std::size_t i = 0; i < n; ++i) dry[i] = synth_sample(patch, i, f0, settings.rate, settings.seed);

  SoundSample out;
  out.samples = apply_effects(dry, patch.reverb_mix, patch.chorus_mix, patch.flanger_mix, settings.rate);
  out.sample_rate = settings.rate;
  out.octave = settings.octave;
  out.duration = settings.duration;
  out.source_params = params;
  out.seed = settings.seed;
  return out;
}

void limit_peak(std::vector<double>& buffer) {
  double peak = 0.0;
  for (double x : buffer) peak = std::max(peak, std::abs(x));
  if (peak <= 1.0) return;
  const double g = 1.0 / peak;
  for (double& x : buffer) x = std::clamp(x * g, -1.0, 1.0);
}

std::vector<double> apply_effects(std::span<const double> dry, double reverb_mix, double chorus_mix,
                                  double flanger_mix, double rate) {
  for (double m : {reverb_mix, chorus_mix, flanger_mix}) {
    if (!(m >= 0.0 && m <= 1.0)) throw DomainError("effect mix outside [0,1]");
  }
  std::vector<double> out(dry.begin(), dry.end());
  if (reverb_mix > 0.0 || chorus_mix > 0.0 || flanger_mix > 0.0) {
    EffectChain chain(rate);
    for (double& x : out) x = chain.process(x, reverb_mix, chorus_mix, flanger_mix);
  }
  limit_peak(out);
  return out;
}

// ---- effects ---------------------------------------------------------------

namespace {

class DelayLine {
 public:
  explicit DelayLine(std::size_t max_delay) {
    std::size_t size = 1;
    while (size < max_delay + 2) size <<= 1;
    buf_.assign(size, 0.0);
    mask_ = size - 1;
  }

  void write(double x) {
    buf_[pos_] = x;
    pos_ = (pos_ + 1) & mask_;
  }

  // Fractional delay in samples, >= 1; linear interpolation.
  double read(double delay) const {
    const double back = std::floor(delay);
    const double f = delay - back;
    const auto k = static_cast<std::size_t>(back);
    const double a = buf_[(pos_ - k) & mask_];
    const double b = buf_[(pos_ - k - 1) & mask_];
    return a + (b - a) * f;
  }

  double tap(std::size_t delay) const { return buf_[(pos_ - delay) & mask_]; }

 private:
  std::vector<double> buf_;
  std::size_t mask_ = 0;
  std::size_t pos_ = 0;
};

struct Comb {
  DelayLine line;
  std::size_t delay;
  double store = 0.0;

  double process(double x, double feedback, double damp) {
    const double y = line.tap(delay);
    store = y * (1.0 - damp) + store * damp;
    line.write(x + store * feedback);
    return y;
  }
};

struct Allpass {
  DelayLine line;
  std::size_t delay;

  double process(double x, double g) {
    const double buffered = line.tap(delay);
    line.write(x + buffered * g);
    return buffered - x * g;
  }
};

}  // namespace

struct EffectChain::State {
  double rate;
  std::uint64_t n = 0;
  DelayLine chorus;
  DelayLine flanger;
  std::vector<Comb> combs;
  std::vector<Allpass> allpasses;

  explicit State(double r)
      : rate(r),
        chorus(static_cast<std::size_t>(0.03 * r) + 4),
        flanger(static_cast<std::size_t>(0.005 * r) + 4) {
    const double scale = r / 44100.0;
    for (int d : {1116, 1188, 1277, 1356}) {
      auto len = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(d * scale)));
      combs.push_back(Comb{DelayLine(len), len});
    }
    for (int d : {556, 441}) {
      auto len = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(d * scale)));
      allpasses.push_back(Allpass{DelayLine(len), len});
    }
  }
};

EffectChain::EffectChain(double rate) : state_(std::make_unique<State>(rate)) {}
EffectChain::~EffectChain() = default;
EffectChain::EffectChain(EffectChain&&) noexcept = default;
EffectChain& EffectChain::operator=(EffectChain&&) noexcept = default;

double EffectChain::process(double x, double reverb_mix, double chorus_mix, double flanger_mix) {
  State& s = *state_;
  const double t = static_cast<double>(s.n++) / s.rate;

  // chorus: ~20 ms modulated delay
  const double chorus_delay = (0.020 + 0.005 * std::sin(kTwoPi * 0.8 * t)) * s.rate;
  const double cw = s.chorus.read(chorus_delay);
  s.chorus.write(x);
  if (chorus_mix > 0.0) x = (1.0 - chorus_mix) * x + chorus_mix * cw;

  // flanger: ~2 ms modulated delay with feedback
  const double flanger_delay = std::max(1.0, (0.002 + 0.0015 * std::sin(kTwoPi * 0.25 * t)) * s.rate);
  const double fw = s.flanger.read(flanger_delay);
  s.flanger.write(x + 0.5 * fw);
  if (flanger_mix > 0.0) x = (1.0 - flanger_mix) * x + flanger_mix * fw;

  // reverb: parallel combs into series allpasses
  double wet = 0.0;
  for (Comb& c : s.combs) wet += c.process(x, 0.84, 0.2);
  wet *= 0.25;
  for (Allpass& a : s.allpasses) wet = a.process(wet, 0.5);
  if (reverb_mix > 0.0) x = (1.0 - reverb_mix) * x + reverb_mix * wet;
  return x;
}

// ---- streaming voice -------------------------------------------------------

Voice::Voice(const ParameterVector& params, RenderSettings settings)
    : settings_(settings), current_(decode(params)), target_(current_), fx_(settings.rate) {
  check_settings(settings_);
}

void Voice::set_params(const ParameterVector& params) {
  target_ = decode(params);
  pending_ = true;
}

void Voice::render_block() {
  const double f0 = fundamental_hz(settings_.octave, settings_.semitones);
  const bool ramp = pending_;
  for (std::size_t j = 0; j < kBlockSize; ++j) {
    const Patch p = ramp ? blend(current_, target_, static_cast<double>(j + 1) / kBlockSize) : current_;
    const double x = synth_sample(p, position_ + j, f0, settings_.rate, settings_.seed);
    block_[j] = std::clamp(fx_.process(x, p.reverb_mix, p.chorus_mix, p.flanger_mix), -1.0, 1.0);
  }
  if (ramp) {
    current_ = target_;
    pending_ = false;
  }
  position_ += kBlockSize;
  block_read_ = 0;
}

void Voice::process(std::span<double> out) {
  for (double& x : out) {
    if (block_read_ == kBlockSize) render_block();
    x = block_[block_read_++];
  }
}

}  // namespace timbre
