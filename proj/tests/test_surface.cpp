#include <doctest.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

#include "support/oracles.hpp"
#include "timbre/artifacts.hpp"
#include "timbre/gtm.hpp"
#include "timbre/surface.hpp"

using namespace timbre;
using namespace timbre::surface;

namespace {

std::vector<Point2> random_points(oracle::Gen& g, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<Point2> p(n);
  for (auto& q : p) q = {g.uniform(lo, hi), g.uniform(lo, hi)};
  return p;
}

// Snapped to a coarse lattice so that equal distances are common.
std::vector<Point2> lattice_points(oracle::Gen& g, std::size_t n) {
  std::vector<Point2> p(n);
  for (auto& q : p) q = {g.integer(-5, 5) * 0.2, g.integer(-5, 5) * 0.2};
  return p;
}

std::vector<std::size_t> brute(const std::vector<Point2>& pts, const Point2& q, std::size_t k) {
  std::vector<oracle::P2> conv;
  for (const auto& p : pts) conv.push_back({p[0], p[1]});
  return oracle::brute_knn(conv, {q[0], q[1]}, k);
}

TimbreSurface random_surface(oracle::Gen& g, std::size_t n, std::size_t clusters = 5) {
  std::vector<SurfacePoint> pts;
  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "p%06zu", (i * 7919) % n);  // ids not in insertion order
    pts.push_back({id, {g.uniform(-1, 1), g.uniform(-1, 1)}, i % clusters, g.params(), g.integer(-2, 2), i});
  }
  return TimbreSurface(std::move(pts), palette(clusters), "abc123");
}

double max_abs_diff(const ParameterVector& a, const ParameterVector& b) {
  double m = 0.0;
  for (std::size_t s = 0; s < kParamCount; ++s) m = std::max(m, std::abs(a[s] - b[s]));
  return m;
}

}  // namespace

TEST_CASE("KD-tree equals a linear scan") {
  oracle::Gen g(1);
  for (std::size_t n : {1u, 2u, 9u, 100u, 3000u}) {
    const auto pts = random_points(g, n);
    const KdTree tree(pts);
    for (int t = 0; t < 200; ++t) {
      const Point2 q{g.uniform(-1.5, 1.5), g.uniform(-1.5, 1.5)};
      for (std::size_t k : {std::size_t{1}, std::size_t{8}, n}) {
        if (k > n) continue;
        CHECK(tree.nearest(q, k) == brute(pts, q, k));
      }
    }
  }
}

TEST_CASE("KD-tree tie-breaks match the oracle on a lattice") {
  oracle::Gen g(2);
  const auto pts = lattice_points(g, 2000);  // many duplicates
  const KdTree tree(pts);
  for (int t = 0; t < 500; ++t) {
    const Point2 q{g.integer(-6, 6) * 0.1, g.integer(-6, 6) * 0.1};
    for (std::size_t k : {1u, 8u, 50u}) CHECK(tree.nearest(q, k) == brute(pts, q, k));
  }
  const std::vector<Point2> same(40, Point2{0.3, 0.3});
  const KdTree dup(same);
  const auto all = dup.nearest({0.0, 0.0}, 40);
  for (std::size_t i = 0; i < 40; ++i) CHECK(all[i] == i);
}

TEST_CASE("KD-tree exact hits, full queries and errors") {
  oracle::Gen g(3);
  const auto pts = random_points(g, 500);
  const KdTree tree(pts);
  for (std::size_t i = 0; i < pts.size(); i += 17) CHECK(tree.nearest(pts[i], 1).front() == i);
  const Point2 q{0.1, -0.2};
  const auto all = tree.nearest(q, 500);
  CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == 500);
  for (std::size_t i = 1; i < all.size(); ++i) CHECK(sq_dist(q, pts[all[i - 1]]) <= sq_dist(q, pts[all[i]]));
  CHECK_THROWS_AS(tree.nearest(q, 0), std::invalid_argument);
  CHECK_THROWS_AS(tree.nearest(q, 501), std::invalid_argument);
  CHECK_THROWS_AS(KdTree().nearest(q, 1), std::invalid_argument);
}

TEST_CASE("KD-tree queries scale sublinearly") {
  oracle::Gen g(4);
  using clock = std::chrono::steady_clock;
  auto mean_query = [&](std::size_t n) {
    const auto pts = random_points(g, n);
    const KdTree tree(pts);
    const auto queries = random_points(g, 2000);
    std::size_t sink = 0;
    const auto t0 = clock::now();
    for (const auto& q : queries) sink += tree.nearest(q, 1).front();
    const double kd = std::chrono::duration<double>(clock::now() - t0).count() / 2000;
    const auto t1 = clock::now();
    for (int i = 0; i < 20; ++i) {
      double best = 1e300;
      std::size_t arg = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = sq_dist(queries[i], pts[j]);
        if (d < best) best = d, arg = j;
      }
      sink += arg;
    }
    const double scan = std::chrono::duration<double>(clock::now() - t1).count() / 20;
    CHECK(sink > 0);
    return std::pair{kd, scan};
  };
  const auto [kd_small, scan_small] = mean_query(10'000);
  const auto [kd_big, scan_big] = mean_query(1'000'000);
  MESSAGE("kd 1e4 " << kd_small << " s, kd 1e6 " << kd_big << " s, scan 1e6 " << scan_big << " s");
  // A 100x larger set costs far less than 100x per query, and beats the scan by a wide margin.
  CHECK(kd_big < 20.0 * kd_small);
  CHECK(kd_big * 50.0 < scan_big);
  (void)scan_small;
}

TEST_CASE("k-means separates two blobs and is deterministic") {
  oracle::Gen g(5);
  Eigen::MatrixXd x(200, 66);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (Eigen::Index i = 0; i < 200; ++i)
    for (Eigen::Index j = 0; j < 66; ++j) x(i, j) = n01(g.rng) * 0.3 + (i < 100 ? -5.0 : 5.0);
  const KmeansResult a = kmeans(x, 2);
  for (Eigen::Index i = 1; i < 200; ++i) CHECK((a.labels[static_cast<std::size_t>(i)] == a.labels[0]) == (i < 100));
  const KmeansResult b = kmeans(x, 2, kKmeansSeed, kKmeansMaxIter, 4);
  CHECK(a.labels == b.labels);
  CHECK(a.centers == b.centers);
  CHECK(a.iterations <= kKmeansMaxIter);
}

TEST_CASE("k-means with one cluster per point") {
  oracle::Gen g(6);
  const Eigen::MatrixXd x = g.matrix(50, 66);
  const KmeansResult r = kmeans(x, 50);
  CHECK(r.inertia == 0.0);
  CHECK(std::set<std::size_t>(r.labels.begin(), r.labels.end()).size() == 50);
  CHECK_THROWS_AS(kmeans(x, 51), std::invalid_argument);
  CHECK_THROWS_AS(kmeans(x, 0), std::invalid_argument);
  const Eigen::MatrixXd dup = Eigen::MatrixXd::Ones(10, 3);
  const KmeansResult d = kmeans(dup, 3);
  CHECK(d.inertia == 0.0);
  for (std::size_t l : d.labels) CHECK(l == 0);  // ties to the lowest center
}

TEST_CASE("k-means inertia matches the assignment") {
  oracle::Gen g(7);
  const Eigen::MatrixXd x = g.matrix(300, 5);
  const KmeansResult r = kmeans(x, 7);
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double best = 1e300;
    std::size_t arg = 0;
    for (Eigen::Index c = 0; c < r.centers.rows(); ++c) {
      const double d = (x.row(i) - r.centers.row(c)).squaredNorm();
      if (d < best) best = d, arg = static_cast<std::size_t>(c);
    }
    CHECK(r.labels[static_cast<std::size_t>(i)] == arg);
    inertia += best;
  }
  CHECK(r.inertia == doctest::Approx(inertia).epsilon(1e-12));
}

TEST_CASE("palette colours are distinct hex strings") {
  const auto p = palette(kDefaultClusters);
  REQUIRE(p.size() == 50);
  CHECK(std::set<std::string>(p.begin(), p.end()).size() == 50);
  for (const auto& c : p) {
    CHECK(c.size() == 7);
    CHECK(c[0] == '#');
    CHECK(c.find_first_not_of("0123456789abcdef", 1) == std::string::npos);
  }
  CHECK(palette(3) == std::vector<std::string>(p.begin(), p.begin() + 3));
}

TEST_CASE("surface construction keeps points sorted by id") {
  oracle::Gen g(8);
  const TimbreSurface s = random_surface(g, 200);
  for (std::size_t i = 1; i < s.size(); ++i) CHECK(s.points()[i - 1].id < s.points()[i].id);
  auto pts = s.points();
  pts[3].id = pts[4].id;
  CHECK_THROWS_AS(TimbreSurface(pts, s.colours()), std::invalid_argument);
  pts = s.points();
  pts[0].cluster = 99;
  CHECK_THROWS_AS(TimbreSurface(pts, s.colours()), std::invalid_argument);
  pts = s.points();
  pts[0].position[1] = std::nan("");
  CHECK_THROWS_AS(TimbreSurface(pts, s.colours()), std::invalid_argument);
}

TEST_CASE("nearest and lookup on a surface") {
  oracle::Gen g(9);
  const TimbreSurface s = random_surface(g, 300);
  for (std::size_t i = 0; i < s.size(); i += 13) {
    const auto& p = s.points()[i];
    CHECK(s.nearest(p.position).front()->id == p.id);
    CHECK(s.lookup_params(p.position) == p.params);
  }
  for (int t = 0; t < 200; ++t) {
    const Point2 q{g.uniform(-3, 3), g.uniform(-3, 3)};
    CHECK(s.lookup_params(q) == s.nearest(q, 1).front()->params);
  }
  // Far outside the square: the closest boundary point answers.
  const Point2 far{50.0, 0.0};
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (sq_dist(far, s.points()[i].position) < sq_dist(far, s.points()[best].position)) best = i;
  CHECK(s.lookup_params(far) == s.points()[best].params);
  CHECK_THROWS_AS(TimbreSurface().lookup_params({0, 0}), std::invalid_argument);
}

TEST_CASE("interpolation weights") {
  oracle::Gen g(10);
  for (int t = 0; t < 10000; ++t) {
    std::vector<double> d(8);
    for (double& x : d) x = g.coin(0.05) ? 0.0 : g.uniform(0, 3);
    const auto w = interpolation_weights(d);
    double sum = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(w[i] > 0.0);
      sum += w[i];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
  const auto w = interpolation_weights(std::vector<double>{1.0, 3.0});
  CHECK(w[0] == doctest::Approx(0.75).epsilon(1e-8));
  CHECK_THROWS(interpolation_weights(std::vector<double>{}));
}

TEST_CASE("interpolation: coincidence, convexity, constant field") {
  oracle::Gen g(11);
  const TimbreSurface s = random_surface(g, 400);
  for (const auto& p : s.points()) CHECK(s.interpolate(p.position) == p.params);
  for (int t = 0; t < 500; ++t) {
    const Point2 q{g.uniform(-1.2, 1.2), g.uniform(-1.2, 1.2)};
    const ParameterVector out = s.interpolate(q);
    const auto near = s.nearest(q, kInterpolationNeighbours);
    std::vector<double> dist;
    for (const auto* p : near) dist.push_back(std::sqrt(sq_dist(q, p->position)));
    const auto w = interpolation_weights(dist);
    for (std::size_t k = 0; k < kParamCount; ++k) {
      double lo = 1.0, hi = 0.0, blend = 0.0;
      for (std::size_t i = 0; i < near.size(); ++i) {
        lo = std::min(lo, near[i]->params[k]);
        hi = std::max(hi, near[i]->params[k]);
        blend += w[i] * near[i]->params[k];
      }
      CHECK(out[k] >= lo);
      CHECK(out[k] <= hi);
      CHECK(std::abs(out[k] - blend) <= 1e-12);
    }
  }
  // Eight points on a circle with the same params.
  std::vector<SurfacePoint> ring;
  const ParameterVector same = g.params();
  for (int i = 0; i < 8; ++i) {
    const double a = i * std::numbers::pi / 4;
    ring.push_back({"r" + std::to_string(i), {0.5 * std::cos(a), 0.5 * std::sin(a)}, 0, same, 0, 0});
  }
  const TimbreSurface r(ring, palette(1));
  CHECK(max_abs_diff(r.interpolate({0.0, 0.0}), same) <= 1e-15);
  CHECK_THROWS_AS(r.interpolate({0, 0}, 9), std::invalid_argument);
}

TEST_CASE("interpolation is continuous") {
  oracle::Gen g(12);
  const TimbreSurface s = random_surface(g, 300);
  // Continuity holds wherever the 8-neighbour set does not change, and the
  // jumps at set changes are bounded by the weight of the swapped neighbour.
  for (int t = 0; t < 300; ++t) {
    const Point2 q{g.uniform(-1, 1), g.uniform(-1, 1)};
    const double angle = g.uniform(0, 2 * std::numbers::pi);
    double prev = 1e300;
    bool stable = true;
    for (double delta : {1e-3, 1e-5, 1e-7}) {
      const Point2 r{q[0] + delta * std::cos(angle), q[1] + delta * std::sin(angle)};
      const auto a = s.nearest(q, 8), b = s.nearest(r, 8);
      std::set<std::string> sa, sb;
      for (auto* p : a) sa.insert(p->id);
      for (auto* p : b) sb.insert(p->id);
      if (sa != sb) {
        stable = false;
        break;
      }
      const double diff = max_abs_diff(s.interpolate(q), s.interpolate(r));
      CHECK(diff <= prev);
      prev = diff;
    }
    if (stable) CHECK(prev <= 1e-4);
  }
}

TEST_CASE("build attaches clusters and refs") {
  oracle::Gen g(13);
  const std::size_t n = 120;
  Eigen::MatrixXd proj = g.matrix(n, 2);
  Eigen::MatrixXd feats = g.matrix(n, 66);
  std::vector<PointRef> refs;
  for (std::size_t i = 0; i < n; ++i) refs.push_back({"id" + std::to_string(1000 + n - i), g.params(), static_cast<int>(i % 3) - 1});
  const TimbreSurface s = build(proj, feats, refs, 10, "h");
  CHECK(s.size() == n);
  CHECK(s.colours().size() == 10);
  const KmeansResult km = kmeans(feats, 10);
  for (const auto& p : s.points()) {
    const auto i = static_cast<Eigen::Index>(p.feature_ref);
    CHECK(refs[p.feature_ref].id == p.id);
    CHECK(refs[p.feature_ref].params == p.params);
    CHECK(p.position[0] == proj(i, 0));
    CHECK(p.cluster == km.labels[p.feature_ref]);
  }
  CHECK(build(proj, feats, refs, 10, "h") == s);
  CHECK_THROWS_AS(build(proj, feats, refs, n + 1), std::invalid_argument);
  CHECK_THROWS_AS(build(proj.topRows(5), feats, refs, 2), std::invalid_argument);
}

TEST_CASE("surface document round trip") {
  oracle::Gen g(14);
  const TimbreSurface s = random_surface(g, 250, 7);
  const std::string doc = export_json(s);
  CHECK(import_json(doc) == s);
  oracle::TempDir dir("surface");
  save(s, dir / "s.json");
  CHECK(load(dir / "s.json") == s);
  CHECK_THROWS_AS(export_json(TimbreSurface()), std::invalid_argument);
  CHECK_THROWS_AS(import_json("{"), ArtifactError);
  CHECK_THROWS_AS(import_json(doc.substr(0, doc.size() / 2)), ArtifactError);
  std::string wrong = doc;
  wrong.replace(wrong.find("\"v\":1"), 5, "\"v\":9");
  CHECK_THROWS_AS(import_json(wrong), ArtifactError);
}

TEST_CASE("a 10k-point surface file stays under 5 MB") {
  oracle::Gen g(15);
  const TimbreSurface s = random_surface(g, 10000, 50);
  const std::string doc = export_json(s);
  MESSAGE("10k surface: " << doc.size() << " bytes");
  CHECK(doc.size() < 5u * 1024 * 1024);
}

TEST_CASE("latent distances and data distances of their images rank together") {
  const Eigen::MatrixXd x = oracle::s_curve(400, 16);
  gtm::Config c;
  c.latent = {15, 15};
  c.basis = {5, 5};
  const gtm::Model m = gtm::train(gtm::init(x, c), x, 30, 1e-6).model;
  oracle::Gen g(17);
  std::vector<double> latent, data;
  for (int t = 0; t < 2000; ++t) {
    Eigen::MatrixXd pair(2, 2);
    pair << g.uniform(-1, 1), g.uniform(-1, 1), g.uniform(-1, 1), g.uniform(-1, 1);
    const Eigen::MatrixXd y = gtm::design_matrix(pair, m.centers, m.sigma) * m.w;
    latent.push_back((pair.row(0) - pair.row(1)).norm());
    data.push_back((y.row(0) - y.row(1)).norm());
  }
  const double rho = oracle::spearman(latent, data);
  MESSAGE("rank correlation " << rho);
  CHECK(rho > 0.0);
}
