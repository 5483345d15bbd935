#include "timbre/surface.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <queue>
#include <random>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "timbre/artifacts.hpp"
#include "timbre/work_pool.hpp"

namespace timbre::surface {

namespace {

constexpr std::uint32_t kLeafSize = 8;

struct Candidate {
  double d;
  std::size_t idx;
  bool operator<(const Candidate& o) const { return d < o.d || (d == o.d && idx < o.idx); }
};

}  // namespace

KdTree::KdTree(std::vector<Point2> points) : points_(std::move(points)) {
  if (points_.size() >= std::numeric_limits<std::uint32_t>::max()) throw std::length_error("too many points");
  order_.resize(points_.size());
  for (std::uint32_t i = 0; i < order_.size(); ++i) order_[i] = i;
  nodes_.reserve(2 * points_.size() / kLeafSize + 1);
  if (!points_.empty()) build(0, static_cast<std::uint32_t>(points_.size()));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({begin, end});
  if (end - begin <= kLeafSize) return id;

  double lo[2] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  double hi[2] = {-lo[0], -lo[1]};
  for (std::uint32_t i = begin; i < end; ++i) {
    for (int a = 0; a < 2; ++a) {
      lo[a] = std::min(lo[a], points_[order_[i]][a]);
      hi[a] = std::max(hi[a], points_[order_[i]][a]);
    }
  }
  const std::uint8_t axis = (hi[1] - lo[1]) > (hi[0] - lo[0]) ? 1 : 0;
  if (!(hi[axis] > lo[axis])) return id;  // all coincident

  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) { return points_[a][axis] < points_[b][axis]; });
  nodes_[static_cast<std::size_t>(id)].axis = axis;
  nodes_[static_cast<std::size_t>(id)].split = points_[order_[mid]][axis];
  const std::int32_t l = build(begin, mid);
  const std::int32_t r = build(mid, end);
  nodes_[static_cast<std::size_t>(id)].left = l;
  nodes_[static_cast<std::size_t>(id)].right = r;
  return id;
}

std::vector<std::size_t> KdTree::nearest(const Point2& q, std::size_t k) const {
  if (points_.empty()) throw std::invalid_argument("nearest on an empty index");
  if (k == 0 || k > points_.size()) throw std::invalid_argument("k must be in [1, N]");

  std::priority_queue<Candidate> best;  // worst on top
  auto offer = [&](std::size_t idx) {
    const Candidate c{sq_dist(q, points_[idx]), idx};
    if (best.size() < k) {
      best.push(c);
    } else if (c < best.top()) {
      best.pop();
      best.push(c);
    }
  };

  // Left subtree holds coordinates <= split, right subtree >= split.
  struct Frame {
    std::int32_t node;
    double bound;
  };
  std::vector<Frame> stack{{0, 0.0}};
  while (!stack.empty()) {
    const Frame f = stack.back();
    stack.pop_back();
    if (best.size() == k && f.bound > best.top().d) continue;
    const Node& n = nodes_[static_cast<std::size_t>(f.node)];
    if (n.left < 0) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) offer(order_[i]);
      continue;
    }
    const double diff = q[n.axis] - n.split;
    const double plane = std::max(f.bound, diff * diff);
    if (diff <= 0.0) {
      stack.push_back({n.right, plane});
      stack.push_back({n.left, f.bound});
    } else {
      stack.push_back({n.left, plane});
      stack.push_back({n.right, f.bound});
    }
  }

  std::vector<std::size_t> out(best.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = best.top().idx;
    best.pop();
  }
  return out;
}

// ---- k-means ---------------------------------------------------------------

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t closest_center(const Eigen::MatrixXd& centers, const Eigen::VectorXd& x, double& dist) {
  std::size_t best = 0;
  dist = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    const double d = (centers.row(c).transpose() - x).squaredNorm();
    if (d < dist) {
      dist = d;
      best = static_cast<std::size_t>(c);
    }
  }
  return best;
}

}  // namespace

KmeansResult kmeans(const Eigen::MatrixXd& data, std::size_t k, std::uint64_t seed, int max_iter,
                    std::size_t workers) {
  const auto n = static_cast<std::size_t>(data.rows());
  if (k == 0) throw std::invalid_argument("k-means needs at least one cluster");
  if (k > n) throw std::invalid_argument("more clusters (" + std::to_string(k) + ") than points (" + std::to_string(n) + ")");
  if (!data.allFinite()) throw std::invalid_argument("k-means data contains non-finite values");

  std::mt19937_64 rng(seed);
  KmeansResult out;
  out.centers.resize(static_cast<Eigen::Index>(k), data.cols());
  std::vector<bool> chosen(n, false);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());

  std::size_t first = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
  first = std::min(first, n - 1);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t pick = first;
    if (c > 0) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : d2[i];
      if (total > 0.0) {
        const double u = uniform01(rng) * total;
        double acc = 0.0;
        pick = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (chosen[i] || d2[i] <= 0.0) continue;
          acc += d2[i];
          pick = i;
          if (acc > u) break;
        }
      } else {
        // only duplicates of existing centers remain
        pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
      }
    }
    chosen[pick] = true;
    out.centers.row(static_cast<Eigen::Index>(c)) = data.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (data.row(static_cast<Eigen::Index>(i)) - out.centers.row(static_cast<Eigen::Index>(c))).squaredNorm());
    }
  }

  out.labels.assign(n, 0);
  std::vector<double> dist(n, 0.0);
  for (int it = 0; it < std::max(max_iter, 1); ++it) {
    std::vector<std::size_t> labels(n);
    parallel_for(n, workers, [&](std::size_t i) {
      labels[i] = closest_center(out.centers, data.row(static_cast<Eigen::Index>(i)).transpose(), dist[i]);
    });
    const bool changed = it == 0 || labels != out.labels;
    out.labels = std::move(labels);
    out.iterations = it + 1;
    if (!changed) break;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(out.centers.rows(), data.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(out.labels[i])) += data.row(static_cast<Eigen::Index>(i));
      ++counts[out.labels[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) out.centers.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
    }
  }
  out.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.inertia += (data.row(static_cast<Eigen::Index>(i)) - out.centers.row(static_cast<Eigen::Index>(out.labels[i]))).squaredNorm();
  }
  return out;
}

std::vector<std::string> palette(std::size_t count) {
  constexpr double golden = 0.3819660112501051;  // 1 - 1/phi, of a full turn
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) {
    const double h = std::fmod(static_cast<double>(i) * golden, 1.0) * 6.0;
    // alternate lightness so neighbouring hues stay apart
    const double l = (i % 3 == 0) ? 0.50 : (i % 3 == 1 ? 0.62 : 0.40);
    const double s = 0.75;
    const double c = (1.0 - std::abs(2.0 * l - 1.0)) * s;
    const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(h)) {
      case 0: r = c, g = x; break;
      case 1: r = x, g = c; break;
      case 2: g = c, b = x; break;
      case 3: g = x, b = c; break;
      case 4: r = x, b = c; break;
      default: r = c, b = x; break;
    }
    const double m = l - c / 2.0;
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround((r + m) * 255)),
                  static_cast<int>(std::lround((g + m) * 255)), static_cast<int>(std::lround((b + m) * 255)));
    out.emplace_back(buf);
  }
  return out;
}

// ---- surface ---------------------------------------------------------------

TimbreSurface::TimbreSurface(std::vector<SurfacePoint> points, std::vector<std::string> palette, std::string input_hash)
    : points_(std::move(points)), palette_(std::move(palette)), input_hash_(std::move(input_hash)) {
  std::sort(points_.begin(), points_.end(), [](const SurfacePoint& a, const SurfacePoint& b) { return a.id < b.id; });
  std::vector<Point2> pos;
  pos.reserve(points_.size());
  for (std::size_t i = 0; i < points_.size(); ++i) {
    const SurfacePoint& p = points_[i];
    if (i > 0 && points_[i - 1].id == p.id) throw std::invalid_argument("duplicate surface point id " + p.id);
    if (!std::isfinite(p.position[0]) || !std::isfinite(p.position[1]))
      throw std::invalid_argument("surface point " + p.id + " has a non-finite position");
    if (p.cluster >= palette_.size()) throw std::invalid_argument("surface point " + p.id + " has cluster out of range");
    pos.push_back(p.position);
  }
  tree_ = KdTree(std::move(pos));
}

std::vector<const SurfacePoint*> TimbreSurface::nearest(const Point2& q, std::size_t k) const {
  if (points_.empty()) throw std::invalid_argument("surface is empty");
  std::vector<const SurfacePoint*> out;
  for (std::size_t i : tree_.nearest(q, k)) out.push_back(&points_[i]);
  return out;
}

const ParameterVector& TimbreSurface::lookup_params(const Point2& q) const { return nearest(q, 1).front()->params; }

std::vector<double> interpolation_weights(std::span<const double> distances) {
  if (distances.empty()) throw std::invalid_argument("no distances to weight");
  std::vector<double> w;
  w.reserve(distances.size());
  for (double d : distances) w.push_back(1.0 / (d + kCoincidence));
  double total = 0.0;
  for (double x : w) total += x;
  for (double& x : w) x /= total;
  return w;
}

ParameterVector TimbreSurface::interpolate(const Point2& q, std::size_t k) const {
  if (points_.size() < k) {
    throw std::invalid_argument("interpolation needs " + std::to_string(k) + " points, surface has " + std::to_string(points_.size()));
  }
  const auto near = nearest(q, k);
  std::vector<double> dist;
  for (const SurfacePoint* p : near) dist.push_back(std::sqrt(sq_dist(q, p->position)));
  if (dist.front() < kCoincidence) return near.front()->params;

  const std::vector<double> w = interpolation_weights(dist);
  std::array<double, kParamCount> out{};
  for (std::size_t s = 0; s < kParamCount; ++s) {
    double acc = 0.0, lo = 1.0, hi = 0.0;
    for (std::size_t i = 0; i < near.size(); ++i) {
      const double v = near[i]->params[s];
      acc += w[i] * v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    out[s] = std::clamp(acc, lo, hi);
  }
  return ParameterVector(out);
}

TimbreSurface build(const Eigen::MatrixXd& projections, const Eigen::MatrixXd& standardized_features,
                    std::span<const PointRef> refs, std::size_t clusters, std::string input_hash, std::size_t workers) {
  const auto n = static_cast<std::size_t>(projections.rows());
  if (projections.cols() != 2) throw std::invalid_argument("projections must have 2 columns");
  if (static_cast<std::size_t>(standardized_features.rows()) != n || refs.size() != n)
    throw std::invalid_argument("projections, features and entries are not aligned");
  if (n == 0) throw std::invalid_argument("cannot build an empty surface");

  const KmeansResult km = kmeans(standardized_features, clusters, kKmeansSeed, kKmeansMaxIter, workers);
  std::vector<SurfacePoint> points;
  points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    points.push_back({refs[i].id,
                      {projections(static_cast<Eigen::Index>(i), 0), projections(static_cast<Eigen::Index>(i), 1)},
                      km.labels[i],
                      refs[i].params,
                      refs[i].octave,
                      i});
  }
  return TimbreSurface(std::move(points), palette(clusters), std::move(input_hash));
}

std::string export_json(const TimbreSurface& s) {
  if (s.empty()) throw std::invalid_argument("cannot export an empty surface");
  nlohmann::ordered_json doc;
  doc["v"] = kSurfaceVersion;
  doc["kind"] = "surface";
  doc["input_hash"] = s.input_hash();
  doc["count"] = s.size();
  doc["clusters"] = s.colours().size();
  doc["palette"] = s.colours();
  auto& pts = doc["points"] = nlohmann::ordered_json::array();
  for (const SurfacePoint& p : s.points()) {
    pts.push_back({{"id", p.id},
                   {"x", p.position[0]},
                   {"y", p.position[1]},
                   {"cluster", p.cluster},
                   {"octave", p.octave},
                   {"feature_ref", p.feature_ref},
                   {"params", p.params.values()}});
  }
  return doc.dump() + "\n";
}

TimbreSurface import_json(std::string_view text) {
  try {
    const auto doc = nlohmann::json::parse(text);
    if (doc.at("kind") != "surface") throw ArtifactError("not a surface document");
    if (doc.at("v").get<int>() != kSurfaceVersion)
      throw ArtifactError("unsupported surface version " + doc.at("v").dump());
    std::vector<SurfacePoint> points;
    for (const auto& j : doc.at("points")) {
      SurfacePoint p;
      p.id = j.at("id").get<std::string>();
      p.position = {j.at("x").get<double>(), j.at("y").get<double>()};
      p.cluster = j.at("cluster").get<std::size_t>();
      p.octave = j.at("octave").get<int>();
      p.feature_ref = j.at("feature_ref").get<std::size_t>();
      p.params = ParameterVector(j.at("params").get<std::vector<double>>());
      points.push_back(std::move(p));
    }
    if (points.size() != doc.at("count").get<std::size_t>()) throw ArtifactError("surface point count mismatch");
    if (points.empty()) throw ArtifactError("surface has no points");
    return TimbreSurface(std::move(points), doc.at("palette").get<std::vector<std::string>>(),
                         doc.at("input_hash").get<std::string>());
  } catch (const ArtifactError&) {
    throw;
  } catch (const std::exception& e) {
    throw ArtifactError(std::string("malformed surface document: ") + e.what());
  }
}

void save(const TimbreSurface& s, const std::filesystem::path& path) { write_file(path, export_json(s)); }

TimbreSurface load(const std::filesystem::path& path) { return import_json(read_file(path)); }

}  // namespace timbre::surface
