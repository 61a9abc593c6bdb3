#include "distma/likelihood.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <sstream>

#include "distma/numerics.hpp"

namespace distma {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kEtaClamp = 50.0;

double lchoose(double n, double k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// Normalizes the restricted likelihood so it is invariant to invertible
// reparameterizations of the design columns (contributes +1/2 log det X'X).
double half_logdet_xtx(const Eigen::MatrixXd& X) {
  const Eigen::MatrixXd XtX = X.transpose() * X;
  const Eigen::LLT<Eigen::MatrixXd> llt(XtX);
  double out = 0.0;
  for (int i = 0; i < XtX.rows(); ++i) out += std::log(llt.matrixL()(i, i));
  return out;
}

// Per-group normal blocks shared by multilevel3 and multivariate:
// accumulates ML loglik at beta, or the REML profile.
struct BlockAccum {
  int p;
  Method method;
  double ll_const = 0.0;  // -1/2 (log det + quad form) pieces
  double n_total = 0.0;
  Eigen::MatrixXd A;  // sum X' V^-1 X
  Eigen::VectorXd b;  // sum X' V^-1 y
  double yWy = 0.0;   // sum y' V^-1 y
  double logdet = 0.0;
  Eigen::MatrixXd XtX;  // unweighted, for the REML normalization

  BlockAccum(int p_, Method m) : p(p_), method(m) {
    A.setZero(p, p);
    b.setZero(p);
    XtX.setZero(p, p);
  }

  // V must be PD; caller supplies a context string for the error.
  void add(const Eigen::VectorXd& y, const Eigen::MatrixXd& X,
           const Eigen::MatrixXd& V, const std::string& ctx) {
    Eigen::MatrixXd L;
    try {
      L = cholesky(V).L;
    } catch (const NumericError& e) {
      throw LikelihoodError("non-positive-definite covariance for " + ctx +
                            ": " + e.what());
    }
    const Eigen::MatrixXd Linv_X =
        L.triangularView<Eigen::Lower>().solve(X);
    const Eigen::VectorXd Linv_y =
        L.triangularView<Eigen::Lower>().solve(y);
    A.noalias() += Linv_X.transpose() * Linv_X;
    b.noalias() += Linv_X.transpose() * Linv_y;
    yWy += Linv_y.squaredNorm();
    XtX.noalias() += X.transpose() * X;
    for (long i = 0; i < L.rows(); ++i) logdet += 2.0 * std::log(L(i, i));
    n_total += static_cast<double>(y.size());
  }

  // ML at a supplied beta, or REML at the profiled beta.
  double finish(const Eigen::VectorXd& beta_ml) const {
    if (method == Method::ml) {
      const double quad = yWy - 2.0 * beta_ml.dot(b) +
                          beta_ml.dot(A * beta_ml);
      return -0.5 * (n_total * kLog2Pi + logdet + quad);
    }
    const Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success)
      throw LikelihoodError("singular information matrix in REML profile");
    const Eigen::VectorXd bh = llt.solve(b);
    const double quad = yWy - bh.dot(b);
    double logdetA = 0.0;
    for (int i = 0; i < p; ++i) logdetA += 2.0 * std::log(llt.matrixL()(i, i));
    double logdetXtX = 0.0;
    const Eigen::LLT<Eigen::MatrixXd> lltx(XtX);
    for (int i = 0; i < p; ++i) logdetXtX += std::log(lltx.matrixL()(i, i));
    return -0.5 * (n_total * kLog2Pi + logdet + quad) - 0.5 * logdetA +
           logdetXtX + 0.5 * p * kLog2Pi;
  }

  GlsProfile profile() const {
    const Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success)
      throw LikelihoodError("singular information matrix in GLS profile");
    GlsProfile g;
    g.beta = llt.solve(b);
    g.cov = llt.solve(Eigen::MatrixXd::Identity(p, p));
    return g;
  }
};

// Builds the per-cluster covariance for the three-level model:
// diag(v) + tau2_w I + tau2_v B_study + tau2_u J.
Eigen::MatrixXd multilevel_cov(const CheckedInput& b, const NaturalParams& p,
                               const std::vector<int>& rows) {
  const int m = static_cast<int>(rows.size());
  Eigen::MatrixXd V(m, m);
  for (int a = 0; a < m; ++a)
    for (int c = 0; c < m; ++c) {
      double val = p.tau2_u;
      if (b.study_index[rows[a]] == b.study_index[rows[c]]) val += p.tau2_v;
      if (a == c) val += b.table.v[rows[a]] + p.tau2_w;
      V(a, c) = val;
    }
  return V;
}

void fill_blocks_multilevel(const CheckedInput& b, const NaturalParams& p,
                            BlockAccum* acc) {
  for (size_t c = 0; c < b.cluster_rows.size(); ++c) {
    const auto& rows = b.cluster_rows[c];
    const int m = static_cast<int>(rows.size());
    Eigen::VectorXd y(m);
    Eigen::MatrixXd X(m, b.X_loc.X.cols());
    for (int i = 0; i < m; ++i) {
      y[i] = b.table.y[rows[i]];
      X.row(i) = b.X_loc.X.row(rows[i]);
    }
    acc->add(y, X, multilevel_cov(b, p, rows),
             "cluster '" + b.cluster_levels[c] + "'");
  }
}

void fill_blocks_multivariate(const CheckedInput& b, const NaturalParams& p,
                              BlockAccum* acc) {
  const int l = b.n_outcomes();
  const int q = static_cast<int>(b.X_loc.X.cols());
  for (size_t s = 0; s < b.study_rows.size(); ++s) {
    const auto& rows = b.study_rows[s];
    const int m = static_cast<int>(rows.size());
    Eigen::VectorXd y(m);
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(m, l * q);
    Eigen::MatrixXd V(m, m);
    for (int i = 0; i < m; ++i) {
      const int r = rows[i];
      y[i] = b.table.y[r];
      X.block(i, b.outcome_index[r] * q, 1, q) = b.X_loc.X.row(r);
      for (int j = 0; j < m; ++j) {
        const int r2 = rows[j];
        double sig = (i == j) ? b.table.v[r]
                              : b.spec.sampling_cor *
                                    std::sqrt(b.table.v[r] * b.table.v[r2]);
        V(i, j) = sig + p.T(b.outcome_index[r], b.outcome_index[r2]);
      }
    }
    acc->add(y, X, V, "study '" + b.study_levels[s] + "'");
  }
}

}  // namespace

double ll_normal(const CheckedInput& b, const NaturalParams& p, Method method) {
  const int n = b.table.n();
  const Eigen::MatrixXd& X = b.X_loc.X;
  const int q = static_cast<int>(X.cols());
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i) w[i] = 1.0 / (b.table.v[i] + p.tau2);

  Eigen::VectorXd beta = p.beta_loc;
  Eigen::MatrixXd XtWX = X.transpose() * w.asDiagonal() * X;
  if (method == Method::reml) {
    Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(b.table.y.data(), n);
    beta = XtWX.llt().solve(X.transpose() * (w.asDiagonal() * y));
  }
  double ll = 0.0;
  for (int i = 0; i < n; ++i) {
    const double r = b.table.y[i] - X.row(i).dot(beta);
    ll += -0.5 * (kLog2Pi - std::log(w[i]) + r * r * w[i]);
  }
  if (method == Method::reml) {
    const Eigen::LLT<Eigen::MatrixXd> llt(XtWX);
    double logdetA = 0.0;
    for (int i = 0; i < q; ++i) logdetA += 2.0 * std::log(llt.matrixL()(i, i));
    ll += -0.5 * logdetA + 0.5 * q * kLog2Pi + half_logdet_xtx(X);
  }
  if (!std::isfinite(ll)) throw LikelihoodError("non-finite normal loglik");
  return ll;
}

double ll_location_scale(const CheckedInput& b, const NaturalParams& p,
                         LLDiag* diag) {
  const int n = b.table.n();
  const int nodes = b.spec.effective_quad_nodes();
  const bool re = b.spec.scale_random_effect && p.tau2_scale_re > 1e-14;
  const QuadratureRule* rule = re ? &gauss_hermite(nodes) : nullptr;
  const double sd_re = re ? std::sqrt(p.tau2_scale_re) : 0.0;

  double ll = 0.0;
  for (int i = 0; i < n; ++i) {
    const double mu = b.X_loc.X.row(i).dot(p.beta_loc);
    double eta = b.X_scale.X.row(i).dot(p.beta_scale);
    if (eta > kEtaClamp) {
      eta = kEtaClamp;
      if (diag) diag->exp_clamped = true;
    }
    if (!re) {
      ll += log_normal_pdf(b.table.y[i], mu, b.table.v[i] + std::exp(eta));
    } else {
      Eigen::VectorXd terms(rule->nodes.size());
      for (long q = 0; q < rule->nodes.size(); ++q) {
        double eta_q = eta + sd_re * rule->nodes[q];
        if (eta_q > kEtaClamp) {
          eta_q = kEtaClamp;
          if (diag) diag->exp_clamped = true;
        }
        terms[q] = std::log(rule->weights[q]) +
                   log_normal_pdf(b.table.y[i], mu,
                                  b.table.v[i] + std::exp(eta_q));
      }
      ll += log_sum_exp(terms);
    }
  }
  if (!std::isfinite(ll))
    throw LikelihoodError("non-finite location-scale loglik");
  return ll;
}

double ll_multilevel3(const CheckedInput& b, const NaturalParams& p,
                      Method method) {
  BlockAccum acc(static_cast<int>(b.X_loc.X.cols()), method);
  fill_blocks_multilevel(b, p, &acc);
  return acc.finish(p.beta_loc);
}

double ll_multivariate(const CheckedInput& b, const NaturalParams& p,
                       Method method) {
  BlockAccum acc(b.n_outcomes() * static_cast<int>(b.X_loc.X.cols()), method);
  fill_blocks_multivariate(b, p, &acc);
  return acc.finish(p.beta_loc);
}

GlsProfile gls_beta(const CheckedInput& b, const NaturalParams& p) {
  switch (b.spec.family) {
    case Family::normal_re:
    case Family::normal_metareg: {
      const int n = b.table.n();
      const Eigen::MatrixXd& X = b.X_loc.X;
      Eigen::VectorXd w(n);
      for (int i = 0; i < n; ++i) w[i] = 1.0 / (b.table.v[i] + p.tau2);
      BlockAccum acc(static_cast<int>(X.cols()), Method::reml);
      Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(b.table.y.data(), n);
      Eigen::MatrixXd V = (1.0 / w.array()).matrix().asDiagonal();
      acc.add(y, X, V, "table");
      return acc.profile();
    }
    case Family::multilevel3: {
      BlockAccum acc(static_cast<int>(b.X_loc.X.cols()), Method::reml);
      fill_blocks_multilevel(b, p, &acc);
      return acc.profile();
    }
    case Family::multivariate: {
      BlockAccum acc(b.n_outcomes() * static_cast<int>(b.X_loc.X.cols()),
                     Method::reml);
      fill_blocks_multivariate(b, p, &acc);
      return acc.profile();
    }
    default:
      throw LikelihoodError("GLS profile only defined for normal families");
  }
}

namespace {

// One-dimensional log-integrand with analytic first/second derivatives.
struct LogIntegrand {
  std::function<double(double)> value;
  std::function<double(double)> d1;  // may be empty -> finite differences
  std::function<double(double)> d2;
};

double fd1(const std::function<double(double)>& f, double x) {
  const double h = 1e-6 * std::max(1.0, std::abs(x));
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

double fd2(const std::function<double(double)>& f, double x) {
  const double h = 1e-4 * std::max(1.0, std::abs(x));
  return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
}

// Safeguarded Newton on the derivative of the log-integrand; bisection
// fallback when a step leaves the bracket. Returns the mode.
double find_mode(const LogIntegrand& g, double x0, double bracket_lo,
                 double bracket_hi) {
  auto d1 = [&](double x) { return g.d1 ? g.d1(x) : fd1(g.value, x); };
  auto d2 = [&](double x) { return g.d2 ? g.d2(x) : fd2(g.value, x); };

  double lo = bracket_lo, hi = bracket_hi;
  double x = std::clamp(x0, lo, hi);
  // Expand the bracket until the derivative changes sign across it.
  for (int tries = 0; tries < 60 && d1(lo) < 0.0; ++tries) lo -= (hi - lo);
  for (int tries = 0; tries < 60 && d1(hi) > 0.0; ++tries) hi += (hi - lo);

  for (int it = 0; it < 50; ++it) {
    const double g1 = d1(x);
    if (std::abs(g1) < 1e-10) break;
    if (g1 > 0.0) lo = x; else hi = x;
    const double g2 = d2(x);
    double step = (std::isfinite(g2) && g2 < 0.0) ? -g1 / g2 : 0.0;
    double xn = x + step;
    if (step == 0.0 || xn <= lo || xn >= hi) xn = 0.5 * (lo + hi);
    if (std::abs(xn - x) < 1e-10 * std::max(1.0, std::abs(x))) {
      x = xn;
      break;
    }
    x = xn;
  }
  return x;
}

// Gaussian-proposal adaptive quadrature of integral exp(h(x)) dx.
// Centered at `mode` with proposal sd `sd`; log-space accumulation.
double adaptive_log_integral(const std::function<double(double)>& h,
                             double mode, double sd,
                             const QuadratureRule& rule) {
  Eigen::VectorXd terms(rule.nodes.size());
  for (long q = 0; q < rule.nodes.size(); ++q) {
    const double t = rule.nodes[q];
    terms[q] = std::log(rule.weights[q]) + h(mode + sd * t) + 0.5 * t * t;
  }
  return log_sum_exp(terms) + std::log(sd) + 0.5 * kLog2Pi;
}

}  // namespace

double log_t_pdf(double x, double loc, double scale, double nu) {
  const double z = (x - loc) / scale;
  return std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
         0.5 * std::log(nu * M_PI) - std::log(scale) -
         0.5 * (nu + 1.0) * std::log1p(z * z / nu);
}

double log_skew_t_pdf(double x, double loc, double scale, double nu,
                      double gamma) {
  const double c = std::log(2.0) - std::log(gamma + 1.0 / gamma);
  const double u = (x - loc) / scale;
  const double z = (u >= 0.0) ? u / gamma : u * gamma;
  return c - std::log(scale) + log_t_pdf(z, 0.0, 1.0, nu) ;
}

double ll_glmm(const CheckedInput& b, const NaturalParams& p, bool adaptive,
               int nodes_override, LLDiag* diag) {
  const bool binom = b.spec.family == Family::glmm_binomial;
  const int nodes = nodes_override > 0 ? nodes_override
                                       : b.spec.effective_quad_nodes();
  const QuadratureRule& rule = gauss_hermite(nodes);
  const double sd = std::sqrt(std::max(p.tau2, 0.0));

  double ll = 0.0;
  for (size_t s = 0; s < b.study_rows.size(); ++s) {
    const auto& rows = b.study_rows[s];
    // Conditional data loglik at random-effect value z (standard normal
    // scale): eta_j = x_j' beta + sd * z.
    auto cond = [&](double z) {
      double acc = 0.0;
      for (int r : rows) {
        const double eta = b.X_loc.X.row(r).dot(p.beta_loc) + sd * z;
        if (binom) {
          const double nn = b.table.trials[r], yy = b.table.events[r];
          const double softplus =
              eta > 35.0 ? eta : std::log1p(std::exp(eta));
          acc += lchoose(nn, yy) + yy * eta - nn * softplus;
        } else {
          const double lam = b.table.exposure[r] * std::exp(eta);
          const double yy = b.table.count[r];
          acc += yy * std::log(lam) - lam - std::lgamma(yy + 1.0);
        }
      }
      return acc;
    };
    if (sd < 1e-8) {
      ll += cond(0.0);
      continue;
    }
    auto h = [&](double z) { return cond(z) - 0.5 * (z * z + kLog2Pi); };
    if (!adaptive) {
      Eigen::VectorXd terms(rule.nodes.size());
      for (long q = 0; q < rule.nodes.size(); ++q)
        terms[q] = std::log(rule.weights[q]) + cond(rule.nodes[q]);
      ll += log_sum_exp(terms);
      continue;
    }
    // Analytic derivatives of h for the Newton refinement.
    auto d1 = [&](double z) {
      double acc = 0.0;
      for (int r : rows) {
        const double eta = b.X_loc.X.row(r).dot(p.beta_loc) + sd * z;
        if (binom) {
          const double pr = 1.0 / (1.0 + std::exp(-eta));
          acc += b.table.events[r] - b.table.trials[r] * pr;
        } else {
          acc += b.table.count[r] - b.table.exposure[r] * std::exp(eta);
        }
      }
      return sd * acc - z;
    };
    auto d2 = [&](double z) {
      double acc = 0.0;
      for (int r : rows) {
        const double eta = b.X_loc.X.row(r).dot(p.beta_loc) + sd * z;
        if (binom) {
          const double pr = 1.0 / (1.0 + std::exp(-eta));
          acc += b.table.trials[r] * pr * (1.0 - pr);
        } else {
          acc += b.table.exposure[r] * std::exp(eta);
        }
      }
      return -sd * sd * acc - 1.0;
    };
    LogIntegrand g{h, d1, d2};
    const double mode = find_mode(g, 0.0, -10.0, 10.0);
    const double curv = d2(mode);
    if (!std::isfinite(curv) || curv >= 0.0) {
      if (diag) diag->quad_fallback = true;
      Eigen::VectorXd terms(rule.nodes.size());
      for (long q = 0; q < rule.nodes.size(); ++q)
        terms[q] = std::log(rule.weights[q]) + cond(rule.nodes[q]);
      ll += log_sum_exp(terms);
      continue;
    }
    ll += adaptive_log_integral(h, mode, 1.0 / std::sqrt(-curv), rule);
  }
  if (!std::isfinite(ll)) throw LikelihoodError("non-finite GLMM loglik");
  return ll;
}

double ll_robust(const CheckedInput& b, const NaturalParams& p,
                 int nodes_override, LLDiag* diag) {
  const int n = b.table.n();
  const Family fam = b.spec.family;
  double ll = 0.0;

  if (fam == Family::robust_mixture) {
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd terms(static_cast<long>(p.mixture.size()));
      for (size_t g = 0; g < p.mixture.size(); ++g)
        terms[static_cast<long>(g)] =
            std::log(std::max(p.mixture[g].w, 1e-300)) +
            log_normal_pdf(b.table.y[i], p.mixture[g].mu,
                           p.mixture[g].tau2 + b.table.v[i]);
      ll += log_sum_exp(terms);
    }
    if (!std::isfinite(ll)) throw LikelihoodError("non-finite mixture loglik");
    return ll;
  }

  if (fam == Family::robust_beta) {
    const double mu = p.beta_mu, t2 = p.beta_tau2;
    const double cap = mu * (1.0 - mu);
    if (!(t2 < cap) || t2 <= 0.0)
      throw LikelihoodError("invalid shape: beta variance must satisfy "
                            "0 < tau2 < mu(1-mu)");
    const double phi = (cap - t2) / t2;
    const double a = mu * phi, bb = (1.0 - mu) * phi;
    const QuadratureRule& rule =
        gauss_legendre_01(nodes_override > 0 ? nodes_override : 160);
    const double lbeta = std::lgamma(a) + std::lgamma(bb) -
                         std::lgamma(a + bb);
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd terms(rule.nodes.size());
      for (long q = 0; q < rule.nodes.size(); ++q) {
        const double u = rule.nodes[q];
        const double logbeta = (a - 1.0) * std::log(u) +
                               (bb - 1.0) * std::log1p(-u) - lbeta;
        terms[q] = std::log(rule.weights[q]) + logbeta +
                   log_normal_pdf(b.table.y[i], u, b.table.v[i]);
      }
      ll += log_sum_exp(terms);
    }
    if (!std::isfinite(ll)) throw LikelihoodError("non-finite beta-RE loglik");
    return ll;
  }

  // t and skew-t random effects.
  if (!(p.nu > 2.0))
    throw LikelihoodError("invalid shape: degrees of freedom must exceed 2");
  const double s = std::sqrt(p.tau2 * (p.nu - 2.0) / p.nu);
  const double loc = p.beta_loc[0];
  const double gamma = fam == Family::robust_skew_t ? p.skew_gamma : 1.0;
  const int nodes = nodes_override > 0 ? nodes_override
                                       : b.spec.effective_quad_nodes();
  const QuadratureRule& rule = gauss_hermite(nodes);

  for (int i = 0; i < n; ++i) {
    const double y = b.table.y[i], v = b.table.v[i];
    auto h = [&](double m) {
      return log_normal_pdf(y, m, v) + log_skew_t_pdf(m, loc, s, p.nu, gamma);
    };
    // Posterior-mean-style start and fallback proposal.
    const double prec = 1.0 / v + 1.0 / std::max(p.tau2, 1e-12);
    const double m0 = (y / v + loc / std::max(p.tau2, 1e-12)) / prec;
    const double sd0 = std::sqrt(1.0 / prec);
    const double spread = 10.0 * std::sqrt(v + p.tau2);
    LogIntegrand g{h, nullptr, nullptr};
    double mode = find_mode(g, m0, std::min(y, loc) - spread,
                            std::max(y, loc) + spread);
    double curv = fd2(h, mode);
    double sd = sd0;
    if (std::isfinite(curv) && curv < 0.0) {
      sd = 1.0 / std::sqrt(-curv);
    } else {
      mode = m0;
      if (diag) diag->quad_fallback = true;
    }
    ll += adaptive_log_integral(h, mode, sd, rule);
  }
  if (!std::isfinite(ll)) throw LikelihoodError("non-finite robust loglik");
  return ll;
}

double loglik(const CheckedInput& b, const NaturalParams& p, LLDiag* diag) {
  switch (b.spec.family) {
    case Family::normal_re:
    case Family::normal_metareg:
      return ll_normal(b, p, b.spec.method);
    case Family::location_scale:
      return ll_location_scale(b, p, diag);
    case Family::multilevel3:
      return ll_multilevel3(b, p, b.spec.method);
    case Family::multivariate:
      return ll_multivariate(b, p, b.spec.method);
    case Family::glmm_binomial:
    case Family::glmm_poisson:
      return ll_glmm(b, p, true, 0, diag);
    case Family::robust_t:
    case Family::robust_skew_t:
    case Family::robust_beta:
    case Family::robust_mixture:
      return ll_robust(b, p, 0, diag);
  }
  throw LikelihoodError("unhandled family");
}

}  // namespace distma
