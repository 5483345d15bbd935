#include "timbre/gtm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

#include "timbre/artifacts.hpp"

namespace timbre::gtm {

namespace {

std::vector<double> axis(int n) {
  std::vector<double> a(static_cast<std::size_t>(n), 0.0);
  if (n == 1) return a;
  for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i)] = -1.0 + 2.0 * i / (n - 1);
  return a;
}

void check_shape(GridShape s, const char* what) {
  if (s.rows < 1 || s.cols < 1) throw std::invalid_argument(std::string(what) + " grid must be at least 1x1");
}

/// N x K squared distances, clamped at zero.
Eigen::MatrixXd sq_distances(const Eigen::MatrixXd& data, const Eigen::MatrixXd& images) {
  Eigen::MatrixXd d = -2.0 * data * images.transpose();
  d.colwise() += data.rowwise().squaredNorm();
  d.rowwise() += images.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

void check_data(const Model& model, const Eigen::MatrixXd& data) {
  if (data.cols() != model.dim())
    throw std::invalid_argument("data has " + std::to_string(data.cols()) + " columns, model expects " +
                                std::to_string(model.dim()));
  if (!data.allFinite()) throw std::invalid_argument("data contains non-finite values");
}

Eigen::VectorXd row_logsumexp(const Eigen::MatrixXd& a) {
  const Eigen::VectorXd mx = a.rowwise().maxCoeff();
  return mx + (a.colwise() - mx).array().exp().rowwise().sum().log().matrix();
}

double clamp_beta(double b) {
  if (!std::isfinite(b)) return kMaxBeta;
  return std::clamp(b, kMinBeta, kMaxBeta);
}

}  // namespace

Eigen::MatrixXd uniform_grid(GridShape shape) {
  check_shape(shape, "latent");
  const auto ys = axis(shape.rows), xs = axis(shape.cols);
  Eigen::MatrixXd g(shape.count(), 2);
  for (int r = 0; r < shape.rows; ++r) {
    for (int c = 0; c < shape.cols; ++c) {
      g(r * shape.cols + c, 0) = xs[static_cast<std::size_t>(c)];
      g(r * shape.cols + c, 1) = ys[static_cast<std::size_t>(r)];
    }
  }
  return g;
}

double grid_spacing(GridShape shape) {
  const int n = std::max(shape.rows, shape.cols);
  return n > 1 ? 2.0 / (n - 1) : 2.0;
}

Eigen::MatrixXd design_matrix(const Eigen::MatrixXd& latent, const Eigen::MatrixXd& centers, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("basis width must be positive");
  Eigen::MatrixXd phi(latent.rows(), centers.rows() + 1);
  for (Eigen::Index k = 0; k < latent.rows(); ++k) {
    for (Eigen::Index m = 0; m < centers.rows(); ++m) {
      phi(k, m) = std::exp(-(latent.row(k) - centers.row(m)).squaredNorm() / (2.0 * sigma * sigma));
    }
    phi(k, centers.rows()) = 1.0;
  }
  return phi;
}

Model init(const Eigen::MatrixXd& data, const Config& cfg) {
  check_shape(cfg.latent, "latent");
  check_shape(cfg.basis, "basis");
  const Eigen::Index n = data.rows(), d = data.cols();
  if (d < 2) throw std::invalid_argument("data must have at least 2 dimensions");
  if (n <= d) throw std::invalid_argument("need more rows than dimensions");
  if (!data.allFinite()) throw std::invalid_argument("data contains non-finite values");
  if (!(cfg.width_factor > 0.0) || !(cfg.lambda >= 0.0)) throw std::invalid_argument("bad GTM hyperparameters");

  int live = 0;
  for (Eigen::Index j = 0; j < d; ++j) {
    if (data.col(j).maxCoeff() > data.col(j).minCoeff()) ++live;
  }
  if (live < 3) throw std::invalid_argument("data has fewer than 3 non-degenerate dimensions");

  Model m;
  m.latent_shape = cfg.latent;
  m.basis_shape = cfg.basis;
  m.width_factor = cfg.width_factor;
  m.lambda = cfg.lambda;
  m.latent = uniform_grid(cfg.latent);
  m.centers = uniform_grid(cfg.basis);
  m.sigma = cfg.width_factor * grid_spacing(cfg.basis);
  m.phi = design_matrix(m.latent, m.centers, m.sigma);

  const Eigen::RowVectorXd mean = data.colwise().mean();
  const Eigen::MatrixXd centered = data.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("principal component analysis failed");
  // Eigenvalues ascend; fix each direction's sign so the largest component is positive.
  auto direction = [&](Eigen::Index i) {
    Eigen::VectorXd v = eig.eigenvectors().col(i);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    return v[arg] < 0.0 ? Eigen::VectorXd(-v) : v;
  };
  const Eigen::VectorXd l = eig.eigenvalues().cwiseMax(0.0);
  const Eigen::VectorXd u1 = direction(d - 1), u2 = direction(d - 2);

  Eigen::MatrixXd target(m.k(), d);
  for (Eigen::Index k = 0; k < m.k(); ++k) {
    target.row(k) = mean + m.latent(k, 0) * std::sqrt(l[d - 1]) * u1.transpose() +
                    m.latent(k, 1) * std::sqrt(l[d - 2]) * u2.transpose();
  }
  m.w = m.phi.completeOrthogonalDecomposition().solve(target);

  const Eigen::MatrixXd y = m.images();
  double sum = 0.0;
  int pairs = 0;
  for (int r = 0; r < cfg.latent.rows; ++r) {
    for (int c = 0; c < cfg.latent.cols; ++c) {
      const int k = r * cfg.latent.cols + c;
      if (c + 1 < cfg.latent.cols) sum += (y.row(k) - y.row(k + 1)).squaredNorm(), ++pairs;
      if (r + 1 < cfg.latent.rows) sum += (y.row(k) - y.row(k + cfg.latent.cols)).squaredNorm(), ++pairs;
    }
  }
  const double neighbour = pairs > 0 ? 0.5 * sum / pairs : 0.0;
  const double inv_beta = std::max(l[d - 3], neighbour);
  m.beta = clamp_beta(inv_beta > 0.0 ? 1.0 / inv_beta : kMaxBeta);
  return m;
}

EStep e_step(const Model& model, const Eigen::MatrixXd& data) {
  check_data(model, data);
  const Eigen::MatrixXd logp = -0.5 * model.beta * sq_distances(data, model.images());
  const Eigen::VectorXd lse = row_logsumexp(logp);
  EStep out;
  out.r = (logp.colwise() - lse).array().exp().matrix();
  const double d = static_cast<double>(model.dim());
  const double norm = 0.5 * d * std::log(model.beta / (2.0 * std::numbers::pi)) - std::log(static_cast<double>(model.k()));
  out.log_likelihood = lse.sum() + static_cast<double>(data.rows()) * norm;
  return out;
}

Model m_step(const Model& model, const Eigen::MatrixXd& r, const Eigen::MatrixXd& data) {
  check_data(model, data);
  if (r.rows() != data.rows() || r.cols() != model.k()) throw std::invalid_argument("responsibility shape mismatch");

  const Eigen::VectorXd g = r.colwise().sum().transpose();
  const Eigen::MatrixXd a = model.phi.transpose() * g.asDiagonal() * model.phi;
  const Eigen::MatrixXd b = model.phi.transpose() * (r.transpose() * data);
  const Eigen::Index cols = a.rows();

  Model next = model;
  double lambda = model.lambda;
  for (;;) {
    const Eigen::MatrixXd reg = a + lambda * Eigen::MatrixXd::Identity(cols, cols);
    const Eigen::LLT<Eigen::MatrixXd> llt(reg);
    if (llt.info() == Eigen::Success) {
      Eigen::MatrixXd w = llt.solve(b);
      const double resid = (reg * w - b).norm();
      if (w.allFinite() && resid <= 1e-8 * std::max(1.0, b.norm())) {
        next.w = std::move(w);
        break;
      }
    }
    lambda = lambda > 0.0 ? lambda * 10.0 : 1e-8;
    if (lambda > kMaxLambda * (1.0 + 1e-12)) throw std::runtime_error("GTM normal equations are singular");
  }

  const Eigen::MatrixXd dist = sq_distances(data, next.images());
  const double err = r.cwiseProduct(dist).sum();
  const double nd = static_cast<double>(data.rows() * data.cols());
  next.beta = clamp_beta(err > 0.0 ? nd / err : kMaxBeta);
  return next;
}

TrainResult train(Model model, const Eigen::MatrixXd& data, int max_iter, double rel_tol) {
  if (max_iter < 1) throw std::invalid_argument("max_iter must be at least 1");
  TrainResult out;
  EStep e = e_step(model, data);
  out.trace.push_back(e.log_likelihood);
  for (int it = 0; it < max_iter; ++it) {
    model = m_step(model, e.r, data);
    e = e_step(model, data);
    const double prev = out.trace.back();
    out.trace.push_back(e.log_likelihood);
    ++out.iterations;
    const double gain = (e.log_likelihood - prev) / std::max(std::abs(prev), 1e-300);
    if (gain < rel_tol) break;
  }
  out.model = std::move(model);
  return out;
}

Eigen::Vector2d project(const Model& model, const Eigen::VectorXd& t) {
  return project(model, Eigen::MatrixXd(t.transpose())).row(0).transpose();
}

Eigen::MatrixXd project(const Model& model, const Eigen::MatrixXd& data) {
  const EStep e = e_step(model, data);
  Eigen::MatrixXd x = e.r * model.latent;
  return x.cwiseMax(-1.0).cwiseMin(1.0);
}

// ---- model file ------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little);

constexpr char kMagic[4] = {'T', 'G', 'T', 'M'};

struct Writer {
  std::string out;
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out += s;
  }
  void mat(const Eigen::MatrixXd& m) {
    put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(m(i, j));
  }
  void vec(const Eigen::VectorXd& v) { mat(Eigen::MatrixXd(v)); }
};

struct Reader {
  std::string_view b;
  std::size_t at = 0;
  void need(std::size_t n) const {
    if (n > b.size() - at) throw ArtifactError("GTM model file truncated");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b.data() + at, sizeof(T));
    at += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(b.substr(at, n));
    at += n;
    return s;
  }
  Eigen::MatrixXd mat() {
    const auto r = get<std::uint64_t>(), c = get<std::uint64_t>();
    if (c != 0 && r > (b.size() - at) / sizeof(double) / c) throw ArtifactError("GTM model file truncated");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = get<double>();
    return m;
  }
  Eigen::VectorXd vec() {
    const Eigen::MatrixXd m = mat();
    if (m.cols() != 1 && m.size() != 0) throw ArtifactError("GTM model file: expected a vector");
    return m.size() ? Eigen::VectorXd(m.col(0)) : Eigen::VectorXd();
  }
};

}  // namespace

std::string ModelFile::encode() const {
  Writer w;
  w.out.assign(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.str(input_hash);
  w.put<std::int32_t>(model.latent_shape.rows);
  w.put<std::int32_t>(model.latent_shape.cols);
  w.put<std::int32_t>(model.basis_shape.rows);
  w.put<std::int32_t>(model.basis_shape.cols);
  w.put<double>(model.width_factor);
  w.put<double>(model.sigma);
  w.put<double>(model.lambda);
  w.put<double>(model.beta);
  w.mat(model.latent);
  w.mat(model.centers);
  w.mat(model.w);
  w.vec(standardizer.mean);
  w.vec(standardizer.std);
  w.put<std::uint64_t>(trace.size());
  for (double t : trace) w.put<double>(t);
  return std::move(w.out);
}

ModelFile ModelFile::decode(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != std::string_view(kMagic, 4)) throw ArtifactError("not a GTM model file");
  Reader r{bytes.substr(4)};
  if (const auto v = r.get<std::uint32_t>(); v != kVersion)
    throw ArtifactError("unsupported GTM model version " + std::to_string(v));
  ModelFile f;
  f.input_hash = r.str();
  Model& m = f.model;
  m.latent_shape.rows = r.get<std::int32_t>();
  m.latent_shape.cols = r.get<std::int32_t>();
  m.basis_shape.rows = r.get<std::int32_t>();
  m.basis_shape.cols = r.get<std::int32_t>();
  m.width_factor = r.get<double>();
  m.sigma = r.get<double>();
  m.lambda = r.get<double>();
  m.beta = r.get<double>();
  m.latent = r.mat();
  m.centers = r.mat();
  m.w = r.mat();
  f.standardizer.mean = r.vec();
  f.standardizer.std = r.vec();
  const auto n = r.get<std::uint64_t>();
  r.need(n * sizeof(double));
  for (std::uint64_t i = 0; i < n; ++i) f.trace.push_back(r.get<double>());
  if (r.at != r.b.size()) throw ArtifactError("trailing bytes in GTM model file");

  if (m.latent_shape.count() != m.latent.rows() || m.basis_shape.count() != m.centers.rows() ||
      m.latent.cols() != 2 || m.centers.cols() != 2 || m.w.rows() != m.centers.rows() + 1 || !(m.beta > 0.0) ||
      !(m.sigma > 0.0))
    throw ArtifactError("GTM model file is inconsistent");
  if (f.standardizer.mean.size() != 0 && f.standardizer.mean.size() != m.w.cols())
    throw ArtifactError("GTM standardizer dimension mismatch");
  m.phi = design_matrix(m.latent, m.centers, m.sigma);
  return f;
}

void ModelFile::save(const std::filesystem::path& path) const { write_file(path, encode()); }

ModelFile ModelFile::load(const std::filesystem::path& path) { return decode(read_file(path)); }

SubsetScorer likelihood_scorer(std::size_t max_rows, int iterations) {
  return [max_rows, iterations](const Eigen::MatrixXd& subset) {
    // evenly strided rows keep the subsample deterministic
    const auto n = static_cast<std::size_t>(subset.rows());
    const std::size_t take = std::min(n, std::max<std::size_t>(max_rows, 1));
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(take), subset.cols());
    for (std::size_t i = 0; i < take; ++i) rows.row(static_cast<Eigen::Index>(i)) = subset.row(static_cast<Eigen::Index>(i * n / take));
    Config cfg;
    cfg.latent = {8, 8};
    cfg.basis = {3, 3};
    try {
      const TrainResult t = train(init(rows, cfg), rows, iterations, 0.0);
      return t.trace.back() / static_cast<double>(take);
    } catch (const std::exception&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
}

}  // namespace timbre::gtm
