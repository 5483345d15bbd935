#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "timbre/corpus.hpp"
#include "timbre/synth.hpp"

namespace timbre::surface {

inline constexpr std::size_t kDefaultClusters = 50;
inline constexpr std::size_t kInterpolationNeighbours = 8;
inline constexpr double kCoincidence = 1e-9;
inline constexpr std::uint64_t kKmeansSeed = 42;
inline constexpr int kKmeansMaxIter = 100;
inline constexpr int kSurfaceVersion = 1;

using Point2 = std::array<double, 2>;

inline double sq_dist(const Point2& a, const Point2& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1];
  return dx * dx + dy * dy;
}

/// Exact 2D k-nearest-neighbour index. Equal distances are ordered by the
/// lower point index.
class KdTree {
 public:
  KdTree() = default;
  explicit KdTree(std::vector<Point2> points);

  std::size_t size() const { return points_.size(); }
  /// Indices of the k nearest points, closest first.
  std::vector<std::size_t> nearest(const Point2& q, std::size_t k) const;

 private:
  struct Node {
    std::uint32_t begin, end;  // range into order_
    std::int32_t left = -1, right = -1;
    std::uint8_t axis = 0;
    double split = 0.0;
  };
  std::int32_t build(std::uint32_t begin, std::uint32_t end);

  std::vector<Point2> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

struct KmeansResult {
  std::vector<std::size_t> labels;
  Eigen::MatrixXd centers;
  double inertia = 0.0;
  int iterations = 0;
};

/// k-means++ seeding from a fixed seed, then Lloyd iterations. Assignment
/// ties go to the lowest center index; an empty cluster keeps its center.
KmeansResult kmeans(const Eigen::MatrixXd& data, std::size_t k, std::uint64_t seed = kKmeansSeed,
                    int max_iter = kKmeansMaxIter, std::size_t workers = 1);

/// `count` colours stepped around the hue circle by the golden angle, as "#rrggbb".
std::vector<std::string> palette(std::size_t count);

struct SurfacePoint {
  std::string id;
  Point2 position{};
  std::size_t cluster = 0;
  ParameterVector params;
  int octave = 0;
  std::size_t feature_ref = 0;

  friend bool operator==(const SurfacePoint&, const SurfacePoint&) = default;
};

struct PointRef {
  std::string id;
  ParameterVector params;
  int octave = 0;
};

class TimbreSurface {
 public:
  TimbreSurface() = default;
  /// Points are kept sorted by id, so index order is id order.
  TimbreSurface(std::vector<SurfacePoint> points, std::vector<std::string> palette, std::string input_hash = {});

  const std::vector<SurfacePoint>& points() const { return points_; }
  const std::vector<std::string>& colours() const { return palette_; }
  const std::string& input_hash() const { return input_hash_; }
  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }

  std::vector<const SurfacePoint*> nearest(const Point2& q, std::size_t k = 1) const;
  const ParameterVector& lookup_params(const Point2& q) const;
  /// Inverse-distance blend of the k nearest points' parameters.
  ParameterVector interpolate(const Point2& q, std::size_t k = kInterpolationNeighbours) const;

  friend bool operator==(const TimbreSurface& a, const TimbreSurface& b) {
    return a.points_ == b.points_ && a.palette_ == b.palette_ && a.input_hash_ == b.input_hash_;
  }

 private:
  std::vector<SurfacePoint> points_;
  std::vector<std::string> palette_;
  std::string input_hash_;
  KdTree tree_;
};

/// w_i = (1/(d_i+eps)) / sum_j (1/(d_j+eps)).
std::vector<double> interpolation_weights(std::span<const double> distances);

/// Clusters the standardized features and attaches positions and parameters.
TimbreSurface build(const Eigen::MatrixXd& projections, const Eigen::MatrixXd& standardized_features,
                    std::span<const PointRef> refs, std::size_t clusters = kDefaultClusters,
                    std::string input_hash = {}, std::size_t workers = 1);

std::string export_json(const TimbreSurface& s);
TimbreSurface import_json(std::string_view text);
void save(const TimbreSurface& s, const std::filesystem::path& path);
TimbreSurface load(const std::filesystem::path& path);

}  // namespace timbre::surface
