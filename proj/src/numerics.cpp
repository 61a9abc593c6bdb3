#include "distma/numerics.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>

namespace distma {

namespace {

// Symmetric tridiagonal eigen decomposition of the Jacobi matrix.
// Nodes are eigenvalues; weight_i = mass * (first eigenvector component)^2.
QuadratureRule golub_welsch(const Eigen::VectorXd& diag,
                            const Eigen::VectorXd& offdiag, double mass,
                            QuadKind kind) {
  const int n = static_cast<int>(diag.size());
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) J(i, i) = diag[i];
  for (int i = 0; i + 1 < n; ++i) {
    J(i, i + 1) = offdiag[i];
    J(i + 1, i) = offdiag[i];
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  QuadratureRule rule;
  rule.kind = kind;
  rule.nodes = es.eigenvalues();
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    const double v0 = es.eigenvectors()(0, i);
    rule.weights[i] = mass * v0 * v0;
  }
  return rule;
}

void check_node_count(int n) {
  if (n < 1 || n > 256)
    throw NumericError("quadrature node count out of range [1,256]: " +
                       std::to_string(n));
}

}  // namespace

const QuadratureRule& gauss_hermite(int n) {
  check_node_count(n);
  static std::map<int, QuadratureRule> cache;
  static std::mutex mtx;
  std::lock_guard<std::mutex> lock(mtx);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  // Probabilists' Hermite: a_i = 0, b_i = sqrt(i), weight mass 1.
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd off(n > 1 ? n - 1 : 0);
  for (int i = 1; i < n; ++i) off[i - 1] = std::sqrt(static_cast<double>(i));
  auto rule = golub_welsch(diag, off, 1.0, QuadKind::gauss_hermite_prob);
  if (n == 1) rule.nodes[0] = 0.0;
  // Polish the eigenvalue nodes with Newton on the orthonormal recurrence
  // p_{k+1} = (z p_k - sqrt(k) p_{k-1}) / sqrt(k+1); p_n' = sqrt(n) p_{n-1}.
  // Weights from w = phi(z) is already folded in: w_i = 1 / sum_k p_k(z_i)^2.
  // The raw eigen decomposition loses ~1e-9 relative accuracy in the
  // extreme weights at large n, which high moments expose.
  auto recurrence = [n](double z, double* pn_out, double* pnm1_out) {
    double pm = 0.0, p = 1.0;  // p_0 = 1 under the unit-mass normalization
    double sumsq = 1.0;
    for (int k = 0; k < n; ++k) {
      double pn = (z * p - std::sqrt(static_cast<double>(k)) * pm) /
                  std::sqrt(static_cast<double>(k + 1));
      pm = p;
      p = pn;
      if (k + 1 < n) sumsq += p * p;
    }
    *pn_out = p;
    *pnm1_out = pm;
    return sumsq;
  };
  for (int i = 0; i < n; ++i) {
    double z = rule.nodes[i];
    double p, pm;
    for (int it2 = 0; it2 < 4; ++it2) {
      recurrence(z, &p, &pm);
      const double dp = std::sqrt(static_cast<double>(n)) * pm;
      if (dp == 0.0) break;
      const double step = p / dp;
      z -= step;
      if (std::abs(step) < 1e-16 * (1.0 + std::abs(z))) break;
    }
    rule.nodes[i] = z;
    rule.weights[i] = 1.0 / recurrence(z, &p, &pm);
  }
  rule.weights /= rule.weights.sum();
  return cache.emplace(n, std::move(rule)).first->second;
}

const QuadratureRule& gauss_legendre_01(int n) {
  check_node_count(n);
  static std::map<int, QuadratureRule> cache;
  static std::mutex mtx;
  std::lock_guard<std::mutex> lock(mtx);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  // Legendre on [-1,1]: a_i = 0, b_i = i / sqrt(4i^2 - 1), mass 2;
  // then map to [0,1] with unit mass.
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd off(n > 1 ? n - 1 : 0);
  for (int i = 1; i < n; ++i) {
    const double di = static_cast<double>(i);
    off[i - 1] = di / std::sqrt(4.0 * di * di - 1.0);
  }
  auto rule = golub_welsch(diag, off, 2.0, QuadKind::gauss_legendre_01);
  for (int i = 0; i < n; ++i) {
    rule.nodes[i] = 0.5 * (rule.nodes[i] + 1.0);
    rule.weights[i] *= 0.5;
  }
  return cache.emplace(n, std::move(rule)).first->second;
}

LowerTriangular cholesky(const Eigen::MatrixXd& A) {
  const int d = static_cast<int>(A.rows());
  if (A.cols() != d) throw NumericError("cholesky: matrix not square");
  const double asym = (A - A.transpose()).cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, A.cwiseAbs().maxCoeff());
  if (asym > 1e-12 * scale)
    throw NumericError("cholesky: matrix not symmetric");
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(d, d);
  for (int j = 0; j < d; ++j) {
    double s = A(j, j);
    for (int k = 0; k < j; ++k) s -= L(j, k) * L(j, k);
    if (!(s > 0.0)) {
      std::ostringstream msg;
      msg << "cholesky: non-positive-definite pivot at index " << j;
      throw NumericError(msg.str());
    }
    L(j, j) = std::sqrt(s);
    for (int i = j + 1; i < d; ++i) {
      double t = A(i, j);
      for (int k = 0; k < j; ++k) t -= L(i, k) * L(j, k);
      L(i, j) = t / L(j, j);
    }
  }
  return LowerTriangular{std::move(L)};
}

double log_sum_exp(const std::vector<double>& xs) {
  return log_sum_exp(
      Eigen::Map<const Eigen::VectorXd>(xs.data(), static_cast<long>(xs.size())));
}

double log_sum_exp(const Eigen::VectorXd& xs) {
  if (xs.size() == 0) throw NumericError("log_sum_exp: empty input");
  const double m = xs.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf (or a +inf/nan passthrough)
  double acc = 0.0;
  for (long i = 0; i < xs.size(); ++i) acc += std::exp(xs[i] - m);
  return m + std::log(acc);
}

namespace {

double eval_checked(const ObjectiveFn& f, const Eigen::VectorXd& x) {
  const double v = f(x);
  if (!std::isfinite(v)) {
    std::ostringstream msg;
    msg << "non-finite objective value at [";
    for (long i = 0; i < x.size(); ++i)
      msg << (i ? ", " : "") << x[i];
    msg << "]";
    throw NumericError(msg.str());
  }
  return v;
}

}  // namespace

Eigen::VectorXd fd_gradient(const ObjectiveFn& f, const Eigen::VectorXd& x) {
  const long d = x.size();
  Eigen::VectorXd g(d);
  for (long i = 0; i < d; ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(x[i]));
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    g[i] = (eval_checked(f, xp) - eval_checked(f, xm)) / (2.0 * h);
  }
  return g;
}

Eigen::MatrixXd fd_hessian(const ObjectiveFn& f, const Eigen::VectorXd& x) {
  const long d = x.size();
  Eigen::VectorXd h(d);
  for (long i = 0; i < d; ++i) h[i] = 1e-4 * std::max(1.0, std::abs(x[i]));
  const double f0 = eval_checked(f, x);
  Eigen::MatrixXd H(d, d);
  for (long i = 0; i < d; ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += h[i];
    xm[i] -= h[i];
    H(i, i) = (eval_checked(f, xp) - 2.0 * f0 + eval_checked(f, xm)) /
              (h[i] * h[i]);
    for (long j = i + 1; j < d; ++j) {
      Eigen::VectorXd xpp = x, xpm = x, xmp = x, xmm = x;
      xpp[i] += h[i]; xpp[j] += h[j];
      xpm[i] += h[i]; xpm[j] -= h[j];
      xmp[i] -= h[i]; xmp[j] += h[j];
      xmm[i] -= h[i]; xmm[j] -= h[j];
      const double v = (eval_checked(f, xpp) - eval_checked(f, xpm) -
                        eval_checked(f, xmp) + eval_checked(f, xmm)) /
                       (4.0 * h[i] * h[j]);
      H(i, j) = v;
      H(j, i) = v;
    }
  }
  return 0.5 * (H + H.transpose());
}

double log_normal_pdf(double y, double mu, double var) {
  static const double log2pi = std::log(2.0 * M_PI);
  const double r = y - mu;
  return -0.5 * (log2pi + std::log(var) + r * r / var);
}

double normal_cdf(double z) {
  return boost::math::cdf(boost::math::normal_distribution<double>(), z);
}

double two_sided_p_normal(double z) {
  if (!std::isfinite(z)) return std::isnan(z) ? z : 0.0;
  return 2.0 * boost::math::cdf(boost::math::normal_distribution<double>(),
                                -std::abs(z));
}

double two_sided_p_t(double t, double df) {
  if (!std::isfinite(t)) return std::isnan(t) ? t : 0.0;
  boost::math::students_t_distribution<double> dist(df);
  return 2.0 * boost::math::cdf(dist, -std::abs(t));
}

double chi_sq_upper_p(double x, double df) {
  if (x <= 0.0) return 1.0;
  boost::math::chi_squared_distribution<double> dist(df);
  return boost::math::cdf(boost::math::complement(dist, x));
}

}  // namespace distma
