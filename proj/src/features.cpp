#include "timbre/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "timbre/artifacts.hpp"
#include "timbre/dsp.hpp"
#include "timbre/wav.hpp"
#include "timbre/work_pool.hpp"

namespace timbre {

static_assert(kCandidateCount == 368);
static_assert(kFeatureDim == 66);

namespace {

constexpr std::size_t kMfccCount = 13;
constexpr std::size_t kMelBands = 40;
constexpr std::size_t kMaxPeaks = 20;
constexpr double kBrightnessCutoff = 1500.0;
constexpr double kSilence = 1e-12;

// Columns whose pairwise correlations are appended, first 128 of C(17,2).
constexpr std::array<std::size_t, 17> kCrossColumns = {0, 1, 2, 3, 4, 5, 6, 8, 9, 10, 11, 12, 13, 16, 17, 18, 29};

double sanitize(double x) { return std::isfinite(x) ? x : 0.0; }

struct Peak {
  double freq;
  double amp;
};

std::vector<Peak> spectral_peaks(const std::vector<double>& mag, double bin_hz) {
  double max_amp = 0.0;
  for (double a : mag) max_amp = std::max(max_amp, a);
  std::vector<std::pair<double, std::size_t>> found;
  for (std::size_t k = 1; k + 1 < mag.size(); ++k) {
    if (mag[k] > mag[k - 1] && mag[k] >= mag[k + 1] && mag[k] > 1e-3 * max_amp) found.emplace_back(mag[k], k);
  }
  std::stable_sort(found.begin(), found.end(), [](auto& a, auto& b) { return a.first > b.first; });
  if (found.size() > kMaxPeaks) found.resize(kMaxPeaks);

  std::vector<Peak> peaks;
  for (auto [amp, k] : found) {
    // parabolic refinement on the log magnitude
    const double l = std::log(mag[k - 1] + 1e-300), c = std::log(mag[k] + 1e-300), r = std::log(mag[k + 1] + 1e-300);
    const double denom = l - 2.0 * c + r;
    const double offset = denom < 0.0 ? 0.5 * (l - r) / denom : 0.0;
    peaks.push_back({(static_cast<double>(k) + offset) * bin_hz, amp});
  }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.freq < b.freq; });
  return peaks;
}

// Sethares dissonance summed over peak pairs.
double roughness(const std::vector<Peak>& peaks) {
  double total = 0.0;
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    for (std::size_t j = i + 1; j < peaks.size(); ++j) {
      const double fmin = std::min(peaks[i].freq, peaks[j].freq);
      const double df = std::abs(peaks[j].freq - peaks[i].freq);
      const double s = 0.24 / (0.021 * fmin + 19.0);
      total += peaks[i].amp * peaks[j].amp * (std::exp(-3.5 * s * df) - std::exp(-5.75 * s * df));
    }
  }
  return total;
}

double irregularity(const std::vector<Peak>& peaks) {
  if (peaks.size() < 2) return 0.0;
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    den += peaks[i].amp * peaks[i].amp;
    if (i + 1 < peaks.size()) {
      const double d = peaks[i].amp - peaks[i + 1].amp;
      num += d * d;
    }
  }
  return den > 0.0 ? num / den : 0.0;
}

double inharmonicity(const std::vector<Peak>& peaks) {
  if (peaks.empty()) return 0.0;
  double max_amp = 0.0;
  for (const Peak& p : peaks) max_amp = std::max(max_amp, p.amp);
  double f0 = 0.0;
  for (const Peak& p : peaks) {
    if (p.amp >= 0.1 * max_amp && p.freq > 0.0) {
      f0 = p.freq;
      break;
    }
  }
  if (f0 <= 0.0) return 0.0;
  double num = 0.0, den = 0.0;
  for (const Peak& p : peaks) {
    const double ratio = p.freq / f0;
    const double w = p.amp * p.amp;
    num += w * std::abs(ratio - std::round(ratio));
    den += w;
  }
  return den > 0.0 ? num / den : 0.0;
}

struct Moments {
  double mean, std, skew, kurt;
};

Moments column_moments(const Eigen::VectorXd& c) {
  const auto n = static_cast<double>(c.size());
  const double mean = c[0] + (c.array() - c[0]).sum() / n;
  const Eigen::ArrayXd d = c.array() - mean;
  const double m2 = d.square().sum() / n;
  const double m3 = d.cube().sum() / n;
  const double m4 = (d.square() * d.square()).sum() / n;
  const double sd = std::sqrt(m2);
  if (m2 <= 0.0) return {mean, 0.0, 0.0, 0.0};
  return {mean, sd, sanitize(m3 / (m2 * sd)), sanitize(m4 / (m2 * m2))};
}

double correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::ArrayXd x = a.array() - a.mean();
  const Eigen::ArrayXd y = b.array() - b.mean();
  const double den = std::sqrt(x.square().sum() * y.square().sum());
  if (!(den > 0.0)) return 0.0;
  return sanitize((x * y).sum() / den);
}

// Sum of terms in sorted order, so the result does not depend on row order.
double sorted_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

}  // namespace

const std::array<std::string, kFrameFeatureCount>& frame_feature_names() {
  static const std::array<std::string, kFrameFeatureCount> names = [] {
    std::array<std::string, kFrameFeatureCount> n = {
        "centroid", "spread",     "skewness",     "kurtosis", "flatness",   "entropy",
        "rolloff85", "rolloff95", "brightness",   "flux",     "zcr",        "roughness",
        "irregularity", "rms",    "low_energy"};
    for (std::size_t i = 0; i < kMfccCount; ++i) n[15 + i] = "mfcc" + std::to_string(i);
    n[28] = "attack_slope";
    n[29] = "inharmonicity";
    return n;
  }();
  return names;
}

const std::vector<std::pair<std::size_t, std::size_t>>& cross_stat_pairs() {
  static const std::vector<std::pair<std::size_t, std::size_t>> pairs = [] {
    std::vector<std::pair<std::size_t, std::size_t>> p;
    for (std::size_t i = 0; i < kCrossColumns.size() && p.size() < kCrossStatCount; ++i) {
      for (std::size_t j = i + 1; j < kCrossColumns.size() && p.size() < kCrossStatCount; ++j) {
        p.emplace_back(kCrossColumns[i], kCrossColumns[j]);
      }
    }
    return p;
  }();
  return pairs;
}

const std::vector<std::string>& candidate_names() {
  static const std::vector<std::string> names = [] {
    static constexpr std::array<const char*, kStatsPerFeature> stats = {"mean", "std", "skew", "kurt",
                                                                        "min",  "max", "slope", "mad"};
    std::vector<std::string> n;
    const auto& f = frame_feature_names();
    for (std::size_t c = 0; c < kFrameFeatureCount; ++c) {
      for (const char* s : stats) n.push_back(f[c] + "." + s);
    }
    for (auto [a, b] : cross_stat_pairs()) n.push_back("corr(" + f[a] + "," + f[b] + ")");
    return n;
  }();
  return names;
}

std::size_t analysis_window(double rate) {
  return dsp::next_pow2(static_cast<std::size_t>(std::lround(0.046 * rate)));
}

FeatureTimeSeries extract_frames(std::span<const double> samples, double rate) {
  const std::size_t window = analysis_window(rate);
  const std::size_t hop = window / 2;
  const std::size_t count = dsp::frame_count(samples.size(), window, hop);
  if (count < 2) throw std::invalid_argument("sound too short for feature extraction");

  const dsp::RealFft fft(window);
  const dsp::MelFilterbank mel(window, rate, kMelBands);
  const dsp::Dct dct(kMelBands, kMfccCount);
  const std::vector<double> win = dsp::hann(window);
  const double bin_hz = rate / static_cast<double>(window);
  const std::size_t nbins = fft.bins();

  FeatureTimeSeries ts;
  ts.frame_rate = rate / static_cast<double>(hop);
  ts.frames = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(count), kFrameFeatureCount);

  std::vector<double> frame(window), power, mag(nbins), prev_norm(nbins, 0.0), energies(kMelBands),
      logs(kMelBands), coeffs(kMfccCount);
  std::vector<std::complex<double>> spec;

  for (std::size_t t = 0; t < count; ++t) {
    auto row = ts.frames.row(static_cast<Eigen::Index>(t));
    const std::span<const double> raw = samples.subspan(t * hop, window);

    double sq = 0.0;
    std::size_t crossings = 0;
    for (std::size_t i = 0; i < window; ++i) {
      sq += raw[i] * raw[i];
      if (i > 0 && raw[i - 1] * raw[i] < 0.0) ++crossings;
      frame[i] = raw[i] * win[i];
    }
    const double rms = std::sqrt(sq / static_cast<double>(window));
    row[static_cast<Eigen::Index>(FrameFeature::Rms)] = rms;
    row[static_cast<Eigen::Index>(FrameFeature::ZeroCrossingRate)] =
        static_cast<double>(crossings) * rate / static_cast<double>(window);

    fft.transform(frame, spec);
    power.resize(nbins);
    double mag_sum = 0.0, pow_sum = 0.0, mag_norm = 0.0;
    for (std::size_t k = 0; k < nbins; ++k) {
      power[k] = std::norm(spec[k]);
      mag[k] = std::sqrt(power[k]);
      mag_sum += mag[k];
      pow_sum += power[k];
      mag_norm += power[k];
    }
    mag_norm = std::sqrt(mag_norm);

    // MFCCs are defined for silence too, through the absolute floor.
    mel.apply(power, energies);
    for (std::size_t b = 0; b < kMelBands; ++b) logs[b] = std::log(energies[b] + 1e-12);
    dct.apply(logs, coeffs);
    for (std::size_t c = 0; c < kMfccCount; ++c) row[static_cast<Eigen::Index>(FrameFeature::Mfcc0) + c] = coeffs[c];

    if (mag_sum <= kSilence) {
      row[static_cast<Eigen::Index>(FrameFeature::Flatness)] = 1.0;
      row[static_cast<Eigen::Index>(FrameFeature::Entropy)] = 1.0;
      std::fill(prev_norm.begin(), prev_norm.end(), 0.0);
      continue;
    }

    double centroid = 0.0;
    for (std::size_t k = 0; k < nbins; ++k) centroid += static_cast<double>(k) * bin_hz * mag[k];
    centroid /= mag_sum;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (std::size_t k = 0; k < nbins; ++k) {
      const double d = static_cast<double>(k) * bin_hz - centroid;
      const double w = mag[k] / mag_sum;
      m2 += w * d * d;
      m3 += w * d * d * d;
      m4 += w * d * d * d * d;
    }
    const double spread = std::sqrt(m2);
    row[static_cast<Eigen::Index>(FrameFeature::Centroid)] = centroid;
    row[static_cast<Eigen::Index>(FrameFeature::Spread)] = spread;
    row[static_cast<Eigen::Index>(FrameFeature::Skewness)] = spread > 0.0 ? m3 / (spread * spread * spread) : 0.0;
    row[static_cast<Eigen::Index>(FrameFeature::Kurtosis)] = spread > 0.0 ? m4 / (m2 * m2) : 0.0;

    double log_mean = 0.0, entropy = 0.0;
    for (std::size_t k = 0; k < nbins; ++k) {
      log_mean += std::log(power[k] + 1e-300);
      const double q = mag[k] / mag_sum;
      if (q > 0.0) entropy -= q * std::log(q);
    }
    log_mean /= static_cast<double>(nbins);
    row[static_cast<Eigen::Index>(FrameFeature::Flatness)] =
        std::min(1.0, std::exp(log_mean) / (pow_sum / static_cast<double>(nbins)));
    row[static_cast<Eigen::Index>(FrameFeature::Entropy)] = entropy / std::log(static_cast<double>(nbins));

    double cumulative = 0.0, bright = 0.0;
    double roll85 = -1.0, roll95 = -1.0;
    for (std::size_t k = 0; k < nbins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      cumulative += power[k];
      if (roll85 < 0.0 && cumulative >= 0.85 * pow_sum) roll85 = f;
      if (roll95 < 0.0 && cumulative >= 0.95 * pow_sum) roll95 = f;
      if (f > kBrightnessCutoff) bright += power[k];
    }
    row[static_cast<Eigen::Index>(FrameFeature::Rolloff85)] = std::max(0.0, roll85);
    row[static_cast<Eigen::Index>(FrameFeature::Rolloff95)] = std::max(0.0, roll95);
    row[static_cast<Eigen::Index>(FrameFeature::Brightness)] = bright / pow_sum;

    double flux = 0.0;
    for (std::size_t k = 0; k < nbins; ++k) {
      const double n = mag[k] / mag_norm;
      if (t > 0) flux += (n - prev_norm[k]) * (n - prev_norm[k]);
      prev_norm[k] = n;
    }
    row[static_cast<Eigen::Index>(FrameFeature::Flux)] = std::sqrt(flux);

    const std::vector<Peak> peaks = spectral_peaks(mag, bin_hz);
    row[static_cast<Eigen::Index>(FrameFeature::Roughness)] = roughness(peaks);
    row[static_cast<Eigen::Index>(FrameFeature::Irregularity)] = irregularity(peaks);
    row[static_cast<Eigen::Index>(FrameFeature::Inharmonicity)] = inharmonicity(peaks);
  }

  const auto rms_col = ts.frames.col(static_cast<Eigen::Index>(FrameFeature::Rms));
  const double mean_rms = rms_col.mean();
  for (Eigen::Index t = 0; t < ts.frames.rows(); ++t) {
    ts.frames(t, static_cast<Eigen::Index>(FrameFeature::LowEnergy)) = rms_col[t] < mean_rms ? 1.0 : 0.0;
    const double prev = t > 0 ? rms_col[t - 1] : 0.0;
    ts.frames(t, static_cast<Eigen::Index>(FrameFeature::AttackSlope)) = (rms_col[t] - prev) * ts.frame_rate;
  }
  ts.frames = ts.frames.unaryExpr([](double x) { return sanitize(x); });
  return ts;
}

std::vector<double> collapse_stats(const FeatureTimeSeries& ts) {
  const Eigen::Index T = ts.frames.rows();
  if (T < 4) throw std::invalid_argument("need at least 4 frames to collapse statistics");
  if (ts.frames.cols() != static_cast<Eigen::Index>(kFrameFeatureCount))
    throw std::invalid_argument("feature series must have 30 columns");

  std::vector<double> out;
  out.reserve(kCandidateCount);
  const double tmean = 0.5 * static_cast<double>(T - 1);
  double tvar = 0.0;
  for (Eigen::Index t = 0; t < T; ++t) tvar += (static_cast<double>(t) - tmean) * (static_cast<double>(t) - tmean);

  for (std::size_t c = 0; c < kFrameFeatureCount; ++c) {
    const Eigen::VectorXd col = ts.frames.col(static_cast<Eigen::Index>(c));
    const Moments m = column_moments(col);
    double cov = 0.0, mad = 0.0;
    for (Eigen::Index t = 0; t < T; ++t) {
      cov += (static_cast<double>(t) - tmean) * (col[t] - m.mean);
      if (t > 0) mad += std::abs(col[t] - col[t - 1]);
    }
    out.push_back(m.mean);
    out.push_back(m.std);
    out.push_back(m.skew);
    out.push_back(m.kurt);
    out.push_back(col.minCoeff());
    out.push_back(col.maxCoeff());
    out.push_back(m.std > 0.0 ? cov / tvar : 0.0);
    out.push_back(mad / static_cast<double>(T - 1));
  }
  for (auto [a, b] : cross_stat_pairs()) {
    out.push_back(correlation(ts.frames.col(static_cast<Eigen::Index>(a)), ts.frames.col(static_cast<Eigen::Index>(b))));
  }
  for (double& x : out) x = sanitize(x);
  return out;
}

std::vector<std::size_t> select_features(const Eigen::MatrixXd& matrix, std::size_t target,
                                         const SubsetScorer& scorer) {
  const auto n = static_cast<std::size_t>(matrix.rows());
  const auto d = static_cast<std::size_t>(matrix.cols());
  if (n < 2) throw std::invalid_argument("feature selection needs at least 2 rows");
  if (target > d) throw std::invalid_argument("selection target exceeds column count");

  // Order-free column summaries: sorted values give the same sums for any row order.
  std::vector<std::size_t> live;
  std::vector<double> relevance(d, 0.0), mean(d, 0.0), ss(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> v(matrix.col(static_cast<Eigen::Index>(j)).data(),
                          matrix.col(static_cast<Eigen::Index>(j)).data() + n);
    std::sort(v.begin(), v.end());
    const double lo = v.front(), hi = v.back();
    if (!(hi > lo)) continue;
    live.push_back(j);
    double s = 0.0;
    for (double x : v) s += x;
    mean[j] = s / static_cast<double>(n);
    std::vector<double> sq(n), scaled(n);
    for (std::size_t i = 0; i < n; ++i) {
      sq[i] = (v[i] - mean[j]) * (v[i] - mean[j]);
      scaled[i] = (v[i] - lo) / (hi - lo);
    }
    ss[j] = sorted_sum(sq);
    const double smean = sorted_sum(scaled) / static_cast<double>(n);
    std::vector<double> dev(n);
    for (std::size_t i = 0; i < n; ++i) dev[i] = (scaled[i] - smean) * (scaled[i] - smean);
    relevance[j] = 4.0 * sorted_sum(dev) / static_cast<double>(n);
  }

  auto abs_corr = [&](std::size_t a, std::size_t b) {
    std::vector<double> prod(n);
    for (std::size_t i = 0; i < n; ++i) {
      prod[i] = (matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) - mean[a]) *
                (matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b)) - mean[b]);
    }
    const double den = std::sqrt(ss[a] * ss[b]);
    return den > 0.0 ? std::abs(sorted_sum(prod) / den) : 0.0;
  };

  // Scorer subsets are standardized with the same order-free statistics.
  auto standardized = [&](const std::vector<std::size_t>& cols) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const double sd = std::sqrt(ss[cols[c]] / static_cast<double>(n));
      m.col(static_cast<Eigen::Index>(c)) =
          (matrix.col(static_cast<Eigen::Index>(cols[c])).array() - mean[cols[c]]) / sd;
    }
    return m;
  };

  std::vector<std::size_t> selected;
  std::vector<double> redundancy(d, 0.0);
  std::vector<bool> taken(d, false);
  const std::size_t goal = std::min(target, live.size());
  while (selected.size() < goal) {
    const bool use_scorer = static_cast<bool>(scorer) && selected.size() + 1 >= kScorerMinColumns;
    std::size_t best = d;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t j : live) {
      if (taken[j]) continue;
      double score;
      if (use_scorer) {
        std::vector<std::size_t> cols = selected;
        cols.push_back(j);
        score = scorer(standardized(cols));
      } else {
        score = relevance[j] - (selected.empty() ? 0.0 : redundancy[j] / static_cast<double>(selected.size()));
      }
      if (score > best_score) {
        best_score = score;
        best = j;
      }
    }
    if (best == d) break;
    selected.push_back(best);
    taken[best] = true;
    for (std::size_t j : live) {
      if (!taken[j]) redundancy[j] += abs_corr(j, best);
    }
  }
  return selected;
}

FeatureVector assemble(const CorpusEntry& entry, std::span<const double> stats,
                       std::span<const std::size_t> selection) {
  if (selection.size() != kSelectedCount) {
    throw std::invalid_argument("selection must contain exactly 50 indices, got " + std::to_string(selection.size()));
  }
  FeatureVector fv;
  fv.entry_id = entry.id;
  for (std::size_t idx : selection) {
    if (idx >= stats.size()) throw std::out_of_range("selection index " + std::to_string(idx) + " out of range");
    fv.selected_stats.push_back(stats[idx]);
  }
  fv.params.assign(entry.params.values().begin(), entry.params.values().end());
  fv.combined = fv.selected_stats;
  fv.combined.insert(fv.combined.end(), fv.params.begin(), fv.params.end());
  return fv;
}

Standardizer Standardizer::fit(const Eigen::MatrixXd& m) {
  if (m.rows() < 2) throw std::invalid_argument("standardizer needs at least 2 rows");
  Standardizer s;
  const auto n = static_cast<double>(m.rows());
  s.mean.resize(m.cols());
  s.std.resize(m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const auto col = m.col(j);
    // shifted mean: exact for constant columns
    const double mean = col[0] + (col.array() - col[0]).sum() / n;
    s.mean[j] = mean;
    s.std[j] = std::max(kStdFloor, std::sqrt((col.array() - mean).square().sum() / n));
  }
  return s;
}

Eigen::VectorXd Standardizer::apply(const Eigen::VectorXd& v) const {
  if (v.size() != mean.size()) throw std::invalid_argument("standardizer dimension mismatch");
  return ((v - mean).array() / std.array()).matrix();
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& m) const {
  if (m.cols() != mean.size()) throw std::invalid_argument("standardizer dimension mismatch");
  return ((m.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array()).matrix();
}

Eigen::VectorXd Standardizer::inverse(const Eigen::VectorXd& z) const {
  if (z.size() != mean.size()) throw std::invalid_argument("standardizer dimension mismatch");
  return (z.array() * std.array()).matrix() + mean;
}

// ---- matrix file -----------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "matrix files are written in host order");

constexpr char kMagic[4] = {'T', 'B', 'F', 'M'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + at_, sizeof(T));
    at_ += sizeof(T);
    return v;
  }

  std::string get_string() {
    const auto len = get<std::uint32_t>();
    need(len);
    std::string s(b_.substr(at_, len));
    at_ += len;
    return s;
  }

  void need(std::size_t n) const {
    if (at_ + n > b_.size()) throw ArtifactError("feature matrix file truncated");
  }
  bool done() const { return at_ == b_.size(); }

 private:
  std::string_view b_;
  std::size_t at_ = 0;
};

}  // namespace

std::string FeatureMatrixFile::encode() const {
  const auto n = static_cast<std::uint64_t>(data.rows());
  const auto d = static_cast<std::uint64_t>(data.cols());
  if (ids.size() != n) throw ArtifactError("id count does not match row count");
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(kind));
  put_string(out, input_hash);
  put<std::uint64_t>(out, n);
  put<std::uint64_t>(out, d);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(selection.size()));
  for (std::size_t s : selection) put<std::uint32_t>(out, static_cast<std::uint32_t>(s));
  const bool has_std = standardizer.mean.size() == static_cast<Eigen::Index>(d);
  put<std::uint8_t>(out, has_std ? 1 : 0);
  if (has_std) {
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(d); ++j) put<double>(out, standardizer.mean[j]);
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(d); ++j) put<double>(out, standardizer.std[j]);
  }
  for (const std::string& id : ids) put_string(out, id);
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) put<double>(out, data(i, j));
  }
  return out;
}

FeatureMatrixFile FeatureMatrixFile::decode(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != std::string_view(kMagic, 4))
    throw ArtifactError("not a feature matrix file");
  Reader r(bytes.substr(4));
  FeatureMatrixFile f;
  if (const auto v = r.get<std::uint32_t>(); v != kVersion)
    throw ArtifactError("unsupported feature matrix version " + std::to_string(v));
  f.kind = static_cast<MatrixKind>(r.get<std::uint32_t>());
  f.input_hash = r.get_string();
  const auto n = r.get<std::uint64_t>();
  const auto d = r.get<std::uint64_t>();
  const auto nsel = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nsel; ++i) f.selection.push_back(r.get<std::uint32_t>());
  if (r.get<std::uint8_t>() != 0) {
    f.standardizer.mean.resize(static_cast<Eigen::Index>(d));
    f.standardizer.std.resize(static_cast<Eigen::Index>(d));
    for (std::uint64_t j = 0; j < d; ++j) f.standardizer.mean[static_cast<Eigen::Index>(j)] = r.get<double>();
    for (std::uint64_t j = 0; j < d; ++j) f.standardizer.std[static_cast<Eigen::Index>(j)] = r.get<double>();
  }
  for (std::uint64_t i = 0; i < n; ++i) f.ids.push_back(r.get_string());
  r.need(n * d * sizeof(double));
  f.data.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::uint64_t i = 0; i < n; ++i) {
    for (std::uint64_t j = 0; j < d; ++j) f.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r.get<double>();
  }
  if (!r.done()) throw ArtifactError("trailing bytes in feature matrix file");
  return f;
}

void FeatureMatrixFile::save(const std::filesystem::path& path) const { write_file(path, encode()); }

FeatureMatrixFile FeatureMatrixFile::load(const std::filesystem::path& path) { return decode(read_file(path)); }

FeatureMatrixFile extract_corpus(const Corpus& corpus, const std::filesystem::path& corpus_dir,
                                 const std::string& manifest_hash, std::size_t workers) {
  const std::size_t n = corpus.entries.size();
  if (n == 0) throw std::invalid_argument("corpus has no entries");
  FeatureMatrixFile out;
  out.kind = MatrixKind::CandidateStats;
  out.input_hash = manifest_hash;
  out.data.resize(static_cast<Eigen::Index>(n), kCandidateCount);
  for (const CorpusEntry& e : corpus.entries) out.ids.push_back(e.id);
  parallel_for(n, workers, [&](std::size_t i) {
    const WavData wav = read_wav(corpus_dir / corpus.entries[i].audio_path);
    const std::vector<double> stats = collapse_stats(extract_frames(wav.samples, wav.sample_rate));
    for (std::size_t j = 0; j < kCandidateCount; ++j) out.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = stats[j];
  });
  return out;
}

FeatureMatrixFile build_feature_matrix(const FeatureMatrixFile& stats, const Corpus& corpus,
                                       const std::string& stats_hash, std::size_t target,
                                       const SubsetScorer& scorer) {
  if (stats.kind != MatrixKind::CandidateStats) throw ArtifactError("expected a candidate statistics matrix");
  if (stats.data.cols() != static_cast<Eigen::Index>(kCandidateCount))
    throw ArtifactError("candidate matrix must have 368 columns");
  if (stats.ids.size() != corpus.entries.size()) throw ArtifactError("statistics do not match the corpus");

  const std::vector<std::size_t> selection = select_features(stats.data, target, scorer);
  if (selection.size() != target) {
    throw std::runtime_error("only " + std::to_string(selection.size()) + " non-constant candidate statistics");
  }
  FeatureMatrixFile out;
  out.kind = MatrixKind::Features;
  out.input_hash = stats_hash;
  out.selection = selection;
  out.ids = stats.ids;
  out.data.resize(stats.data.rows(), static_cast<Eigen::Index>(target + kParamCount));
  for (std::size_t i = 0; i < corpus.entries.size(); ++i) {
    const CorpusEntry& e = corpus.entries[i];
    if (e.id != stats.ids[i]) throw ArtifactError("statistics row " + std::to_string(i) + " belongs to another entry");
    const Eigen::VectorXd row = stats.data.row(static_cast<Eigen::Index>(i));
    std::vector<double> combined;
    if (target == kSelectedCount) {
      combined = assemble(e, std::span<const double>(row.data(), static_cast<std::size_t>(row.size())), selection).combined;
    } else {
      for (std::size_t s : selection) combined.push_back(row[static_cast<Eigen::Index>(s)]);
      combined.insert(combined.end(), e.params.values().begin(), e.params.values().end());
    }
    for (std::size_t j = 0; j < combined.size(); ++j) out.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = combined[j];
  }
  out.standardizer = Standardizer::fit(out.data);
  return out;
}

std::string selection_sidecar(const FeatureMatrixFile& features) {
  std::string out = "# selected statistics (column: candidate index name)\n";
  const auto& names = candidate_names();
  for (std::size_t c = 0; c < features.selection.size(); ++c) {
    const std::size_t idx = features.selection[c];
    out += std::to_string(c) + ": " + std::to_string(idx) + " " + (idx < names.size() ? names[idx] : "?") + "\n";
  }
  out += "# synthesis parameters\n";
  for (std::size_t p = 0; p < kParamCount; ++p) {
    out += std::to_string(features.selection.size() + p) + ": param " + slot_names()[p] + "\n";
  }
  return out;
}

}  // namespace timbre
