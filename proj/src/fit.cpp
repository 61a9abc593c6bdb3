#include "distma/fit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "distma/numerics.hpp"

namespace distma {

namespace {

constexpr double kBig = 1e300;

double safe_eval(const ObjectiveFn& f, const Eigen::VectorXd& x) {
  try {
    const double v = f(x);
    return std::isfinite(v) ? v : kBig;
  } catch (const std::exception&) {
    return kBig;
  }
}

// Standard Nelder-Mead (minimization). Deterministic simplex init.
MinimizeResult nelder_mead(const ObjectiveFn& f, const Eigen::VectorXd& x0,
                           int max_iter, double rel_tol) {
  const int d = static_cast<int>(x0.size());
  std::vector<Eigen::VectorXd> pts(d + 1, x0);
  std::vector<double> fv(d + 1);
  for (int i = 0; i < d; ++i)
    pts[i + 1][i] += 0.25 * std::max(0.25, std::abs(x0[i]));
  for (int i = 0; i <= d; ++i) fv[i] = safe_eval(f, pts[i]);

  int it = 0;
  std::vector<int> order(d + 1);
  for (; it < max_iter; ++it) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return fv[a] < fv[b]; });
    const int best = order[0], worst = order[d], second = order[d - 1];
    const double spread = fv[worst] - fv[best];
    if (spread < rel_tol * std::max(1.0, std::abs(fv[best])) &&
        fv[best] < kBig)
      break;

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(d);
    for (int i = 0; i <= d; ++i)
      if (i != worst) centroid += pts[i];
    centroid /= d;

    const Eigen::VectorXd refl = centroid + (centroid - pts[worst]);
    const double fr = safe_eval(f, refl);
    if (fr < fv[best]) {
      const Eigen::VectorXd exp_pt = centroid + 2.0 * (centroid - pts[worst]);
      const double fe = safe_eval(f, exp_pt);
      if (fe < fr) {
        pts[worst] = exp_pt;
        fv[worst] = fe;
      } else {
        pts[worst] = refl;
        fv[worst] = fr;
      }
    } else if (fr < fv[second]) {
      pts[worst] = refl;
      fv[worst] = fr;
    } else {
      const bool outside = fr < fv[worst];
      const Eigen::VectorXd contr =
          outside ? Eigen::VectorXd(centroid + 0.5 * (refl - centroid))
                  : Eigen::VectorXd(centroid - 0.5 * (centroid - pts[worst]));
      const double fc = safe_eval(f, contr);
      if (fc < std::min(fr, fv[worst])) {
        pts[worst] = contr;
        fv[worst] = fc;
      } else {
        // shrink toward the best vertex
        for (int i = 0; i <= d; ++i) {
          if (i == best) continue;
          pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
          fv[i] = safe_eval(f, pts[i]);
        }
      }
    }
  }
  const int best = static_cast<int>(
      std::min_element(fv.begin(), fv.end()) - fv.begin());
  return {pts[best], fv[best], it, it >= max_iter};
}

Eigen::VectorXd safe_gradient(const ObjectiveFn& f, const Eigen::VectorXd& x) {
  const int d = static_cast<int>(x.size());
  Eigen::VectorXd g(d);
  for (int i = 0; i < d; ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(x[i]));
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    g[i] = (safe_eval(f, xp) - safe_eval(f, xm)) / (2.0 * h);
  }
  return g;
}

// BFGS with Armijo backtracking; polishes the Nelder-Mead optimum into the
// quadratic zone so the finite-difference Hessian is trustworthy.
MinimizeResult bfgs_polish(const ObjectiveFn& f, const Eigen::VectorXd& x0,
                           int max_iter) {
  const int d = static_cast<int>(x0.size());
  Eigen::VectorXd x = x0;
  double fx = safe_eval(f, x);
  Eigen::VectorXd g = safe_gradient(f, x);
  Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(d, d);
  int it = 0;
  for (; it < max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < 1e-8 * std::max(1.0, std::abs(fx)))
      break;
    Eigen::VectorXd dir = -Hinv * g;
    if (dir.dot(g) >= 0.0) dir = -g;  // reset on loss of descent
    double step = 1.0;
    double fn = fx;
    Eigen::VectorXd xn = x;
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls) {
      xn = x + step * dir;
      fn = safe_eval(f, xn);
      if (fn <= fx + 1e-4 * step * dir.dot(g)) {
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved || fn >= fx - 1e-14 * std::max(1.0, std::abs(fx))) break;
    const Eigen::VectorXd gn = safe_gradient(f, xn);
    const Eigen::VectorXd s = xn - x, yv = gn - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12) {
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
      const Eigen::MatrixXd V = I - (s * yv.transpose()) / sy;
      Hinv = V * Hinv * V.transpose() + (s * s.transpose()) / sy;
    }
    x = xn;
    fx = fn;
    g = gn;
  }
  return {x, fx, it, false};
}

}  // namespace

MinimizeResult nelder_mead_bfgs(const ObjectiveFn& f, const Eigen::VectorXd& x0,
                                int max_iter, double rel_tol) {
  MinimizeResult nm = nelder_mead(f, x0, max_iter, rel_tol);
  MinimizeResult pol = bfgs_polish(f, nm.x, 200);
  if (pol.fmin >= nm.fmin) {
    nm.iterations += pol.iterations;
    pol = nm;
  } else {
    pol.iterations += nm.iterations;
    pol.hit_max_iter = nm.hit_max_iter;
  }
  // Newton refinement accepted on gradient reduction: the line searches
  // above stop once f-improvements sink into evaluation noise, which still
  // leaves ~1e-8 of argmin error; a curvature step removes it.
  try {
    Eigen::VectorXd g = safe_gradient(f, pol.x);
    for (int it = 0; it < 3; ++it) {
      const Eigen::MatrixXd H = fd_hessian(f, pol.x);
      const Eigen::LLT<Eigen::MatrixXd> llt(H);
      if (llt.info() != Eigen::Success) break;
      const Eigen::VectorXd xn = pol.x - llt.solve(g);
      const double fn = safe_eval(f, xn);
      if (!std::isfinite(fn) || fn > pol.fmin + 1e-8 * std::max(1.0, std::abs(pol.fmin)))
        break;
      const Eigen::VectorXd gn = safe_gradient(f, xn);
      if (gn.lpNorm<Eigen::Infinity>() >= g.lpNorm<Eigen::Infinity>()) break;
      pol.x = xn;
      pol.fmin = std::min(pol.fmin, fn);
      g = gn;
    }
  } catch (const NumericError&) {
    // curvature unavailable at this point; keep the line-search optimum
  }
  return pol;
}

namespace {

// DerSimonian-Laird moment estimate of tau2 on (y, v), floored.
double tau2_mom(const std::vector<double>& y, const std::vector<double>& v) {
  const int k = static_cast<int>(y.size());
  if (k < 2) return 0.01;
  double sw = 0.0, swy = 0.0, sw2 = 0.0;
  for (int i = 0; i < k; ++i) {
    const double w = 1.0 / v[i];
    sw += w;
    swy += w * y[i];
    sw2 += w * w;
  }
  const double ybar = swy / sw;
  double Q = 0.0;
  for (int i = 0; i < k; ++i) Q += (y[i] - ybar) * (y[i] - ybar) / v[i];
  const double denom = sw - sw2 / sw;
  const double t2 = denom > 0.0 ? (Q - (k - 1)) / denom : 0.0;
  return std::max(t2, 1e-3);
}

Eigen::VectorXd wls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                    const Eigen::VectorXd& w) {
  const Eigen::MatrixXd A = X.transpose() * w.asDiagonal() * X;
  return A.llt().solve(X.transpose() * (w.asDiagonal() * y));
}

double quantile_of(std::vector<double> xs, double q) {
  std::sort(xs.begin(), xs.end());
  const double pos = q * (xs.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  const size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - lo) * (xs[hi] - xs[lo]);
}

}  // namespace

NaturalParams default_start(const CheckedInput& b) {
  NaturalParams p;
  const int n = b.table.n();
  const int q = static_cast<int>(b.X_loc.X.cols());
  const Family fam = b.spec.family;

  if (fam == Family::glmm_binomial || fam == Family::glmm_poisson) {
    Eigen::VectorXd z(n), w(n);
    for (int i = 0; i < n; ++i) {
      if (fam == Family::glmm_binomial) {
        const double e = b.table.events[i], t = b.table.trials[i];
        z[i] = std::log((e + 0.5) / (t - e + 0.5));
        w[i] = t;
      } else {
        z[i] = std::log((b.table.count[i] + 0.5) / b.table.exposure[i]);
        w[i] = std::max(b.table.count[i], 1.0);
      }
    }
    p.beta_loc = wls(b.X_loc.X, z, w);
    p.tau2 = 0.1;
    return p;
  }

  const Eigen::VectorXd y =
      Eigen::Map<const Eigen::VectorXd>(b.table.y.data(), n);
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i) w[i] = 1.0 / b.table.v[i];
  const double mom = tau2_mom(b.table.y, b.table.v);

  switch (fam) {
    case Family::normal_re:
    case Family::normal_metareg:
      p.beta_loc = wls(b.X_loc.X, y, w);
      p.tau2 = mom;
      break;
    case Family::location_scale:
      p.beta_loc = wls(b.X_loc.X, y, w);
      p.beta_scale.setZero(b.X_scale.X.cols());
      p.beta_scale[0] = std::log(mom);
      p.tau2_scale_re = b.spec.scale_random_effect ? 0.05 : 0.0;
      break;
    case Family::multilevel3:
      p.beta_loc = wls(b.X_loc.X, y, w);
      p.tau2_u = p.tau2_v = p.tau2_w = std::max(mom / 3.0, 1e-3);
      break;
    case Family::multivariate: {
      const int l = b.n_outcomes();
      p.beta_loc.setZero(l * q);
      p.T = Eigen::MatrixXd::Zero(l, l);
      for (int o = 0; o < l; ++o) {
        std::vector<double> yo, vo;
        std::vector<int> rows;
        for (int i = 0; i < n; ++i)
          if (b.outcome_index[i] == o) rows.push_back(i);
        Eigen::MatrixXd Xo(rows.size(), q);
        Eigen::VectorXd yv(rows.size()), wv(rows.size());
        for (size_t r = 0; r < rows.size(); ++r) {
          Xo.row(r) = b.X_loc.X.row(rows[r]);
          yv[r] = b.table.y[rows[r]];
          wv[r] = 1.0 / b.table.v[rows[r]];
          yo.push_back(b.table.y[rows[r]]);
          vo.push_back(b.table.v[rows[r]]);
        }
        p.beta_loc.segment(o * q, q) = wls(Xo, yv, wv);
        p.T(o, o) = tau2_mom(yo, vo);
      }
      break;
    }
    case Family::robust_t:
    case Family::robust_skew_t: {
      p.beta_loc.resize(1);
      p.beta_loc[0] = wls(Eigen::MatrixXd::Ones(n, 1), y, w)[0];
      p.tau2 = mom;
      p.nu = 10.0;
      p.skew_gamma = 1.0;
      break;
    }
    case Family::robust_beta: {
      const double ybar = y.mean();
      p.beta_mu = std::clamp(ybar, 0.05, 0.95);
      const double cap = p.beta_mu * (1.0 - p.beta_mu);
      p.beta_tau2 = std::min(mom, 0.2 * cap);
      break;
    }
    case Family::robust_mixture: {
      const int g = b.spec.mixture_g;
      p.mixture.resize(g);
      for (int i = 0; i < g; ++i) {
        p.mixture[i].w = 1.0 / g;
        p.mixture[i].mu = quantile_of(b.table.y, (i + 1.0) / (g + 1.0));
        p.mixture[i].tau2 = mom;
      }
      break;
    }
    default:
      break;
  }
  return p;
}

const CoefRow* FitResult::find_coef(const std::string& name) const {
  for (const auto& r : coef_table)
    if (r.name == name) return &r;
  return nullptr;
}

namespace {

// Element-wise natural map for a coordinate, where one exists.
bool natural_map(EntryKind kind, double x, double* out) {
  switch (kind) {
    case EntryKind::identity: *out = x; return true;
    case EntryKind::log_variance: *out = std::exp(x); return true;
    case EntryKind::log_nu: *out = 2.0 + std::exp(x); return true;
    case EntryKind::log_gamma: *out = std::exp(x); return true;
    case EntryKind::logit_mu: *out = 1.0 / (1.0 + std::exp(-x)); return true;
    default: return false;
  }
}

}  // namespace

FitResult fit(const CheckedInput& b, const FitOptions& opts) {
  const ParamLayout layout = make_layout(b);
  NaturalParams start = opts.start ? *opts.start : default_start(b);
  ParamVector x0 = transform(start, layout);

  LLDiag diag;
  auto ll_at = [&](const Eigen::VectorXd& x) {
    ParamVector pv{x, layout};
    return loglik(b, untransform(pv), &diag);
  };
  {
    // A non-finite likelihood at the start is unrecoverable for the simplex.
    double f0;
    try {
      f0 = ll_at(x0.values);
    } catch (const std::exception& e) {
      throw FitError(std::string("likelihood not finite at starting values (") +
                     e.what() + "); supply start overrides");
    }
    if (!std::isfinite(f0))
      throw FitError("likelihood not finite at starting values; supply start "
                     "overrides");
  }
  ObjectiveFn neg = [&](const Eigen::VectorXd& x) { return -ll_at(x); };
  MinimizeResult opt = nelder_mead_bfgs(neg, x0.values, opts.max_iter,
                                        opts.rel_tol);

  FitResult res;
  res.spec = b.spec;
  res.n_obs = b.table.n();
  res.iterations = opt.iterations;
  res.x_opt = ParamVector{opt.x, layout};
  res.estimates = untransform(res.x_opt);

  // Mixture components reported in ascending-mean order; the likelihood is
  // permutation invariant so re-anchor the coordinates at the sorted point.
  if (b.spec.family == Family::robust_mixture) {
    std::stable_sort(res.estimates.mixture.begin(), res.estimates.mixture.end(),
                     [](const MixtureComponent& a, const MixtureComponent& c) {
                       return a.mu < c.mu;
                     });
    res.x_opt = transform(res.estimates, layout);
    opt.x = res.x_opt.values;
  }

  res.loglik = ll_at(opt.x);

  // Scaled gradient at the optimum.
  const Eigen::VectorXd grad = safe_gradient(neg, opt.x);
  double gnorm = 0.0;
  for (long i = 0; i < grad.size(); ++i)
    gnorm = std::max(gnorm, std::abs(grad[i]) * std::max(1.0, std::abs(opt.x[i])));
  res.gradient_norm = gnorm / std::max(1.0, std::abs(res.loglik));
  res.converged = !opt.hit_max_iter && res.gradient_norm < 1e-4;
  if (!res.converged)
    res.warnings.push_back(opt.hit_max_iter ? "maximum iterations reached"
                                            : "gradient norm above tolerance");

  // Observed information on the transformed scale.
  Eigen::MatrixXd cov;
  bool se_ok = true;
  try {
    const Eigen::MatrixXd H = fd_hessian(
        [&](const Eigen::VectorXd& x) { return ll_at(x); }, opt.x);
    const Eigen::MatrixXd negH = -H;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(negH);
    res.hessian_pd = es.eigenvalues().minCoeff() > 0.0;
    if (res.hessian_pd) {
      cov = negH.llt().solve(
          Eigen::MatrixXd::Identity(negH.rows(), negH.cols()));
    } else {
      // pseudo-inverse on the positive part
      Eigen::VectorXd inv = es.eigenvalues();
      for (long i = 0; i < inv.size(); ++i)
        inv[i] = inv[i] > 1e-12 ? 1.0 / inv[i] : 0.0;
      cov = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
      res.warnings.push_back("Hessian not positive definite; standard errors "
                             "from the pseudo-inverse are unreliable");
    }
  } catch (const std::exception&) {
    res.hessian_pd = false;
    se_ok = false;
    cov = Eigen::MatrixXd::Zero(layout.dim(), layout.dim());
    res.warnings.push_back("Hessian evaluation failed; standard errors "
                           "unavailable");
  }

  // Boundary diagnostics on log-variance coordinates.
  for (int i = 0; i < layout.dim(); ++i) {
    if ((layout.entries[i].kind == EntryKind::log_variance ||
         layout.entries[i].kind == EntryKind::chol_diag) &&
        opt.x[i] < std::log(1e-8) / (layout.entries[i].kind == EntryKind::chol_diag ? 2.0 : 1.0)) {
      res.warnings.push_back("variance at boundary: " + layout.entries[i].name);
    }
  }
  if (diag.exp_clamped)
    res.warnings.push_back("log-variance linear predictor clamped at 50");
  if (diag.quad_fallback)
    res.warnings.push_back("adaptive quadrature fell back to the fixed rule");

  // Coefficient table. REML: profiled location coefficients first.
  if (layout.profiled_beta) {
    const GlsProfile prof = gls_beta(b, res.estimates);
    res.estimates.beta_loc = prof.beta;
    std::vector<std::string> names;
    if (b.spec.family == Family::multivariate) {
      for (const auto& lvl : b.outcome_levels)
        for (const auto& nm : b.X_loc.column_names)
          names.push_back(lvl + ":" + nm);
    } else {
      names = b.X_loc.column_names;
    }
    for (size_t i = 0; i < names.size(); ++i) {
      CoefRow row;
      row.name = names[i];
      row.estimate = prof.beta[static_cast<long>(i)];
      row.se = std::sqrt(std::max(prof.cov(i, i), 0.0));
      row.z = row.se > 0.0 ? row.estimate / row.se
                           : std::numeric_limits<double>::infinity();
      row.p = two_sided_p_normal(row.z);
      row.ci_lo = row.estimate - 1.959963984540054 * row.se;
      row.ci_hi = row.estimate + 1.959963984540054 * row.se;
      res.coef_table.push_back(row);
    }
  }
  for (int i = 0; i < layout.dim(); ++i) {
    CoefRow row;
    row.name = layout.entries[i].name;
    row.identity = layout.entries[i].identity();
    row.se = std::sqrt(std::max(cov(i, i), 0.0));
    // a direction zeroed by the pseudo-inverse has no usable curvature
    row.se_valid = se_ok && cov(i, i) > 1e-12;
    const double xi = opt.x[i];
    double nat;
    const bool elementwise = natural_map(layout.entries[i].kind, xi, &nat);
    row.estimate = elementwise ? nat : xi;
    if (row.identity && row.se_valid) {
      row.z = row.se > 0.0 ? row.estimate / row.se
                           : std::numeric_limits<double>::infinity();
      row.p = two_sided_p_normal(row.z);
      row.ci_lo = row.estimate - 1.959963984540054 * row.se;
      row.ci_hi = row.estimate + 1.959963984540054 * row.se;
    } else if (elementwise && row.se_valid) {
      // CI on the transformed scale, mapped back.
      natural_map(layout.entries[i].kind, xi - 1.959963984540054 * row.se,
                  &row.ci_lo);
      natural_map(layout.entries[i].kind, xi + 1.959963984540054 * row.se,
                  &row.ci_hi);
      row.z = std::numeric_limits<double>::quiet_NaN();
      row.p = std::numeric_limits<double>::quiet_NaN();
    } else {
      row.z = std::numeric_limits<double>::quiet_NaN();
      row.p = std::numeric_limits<double>::quiet_NaN();
      row.ci_lo = std::numeric_limits<double>::quiet_NaN();
      row.ci_hi = std::numeric_limits<double>::quiet_NaN();
    }
    res.coef_table.push_back(row);
  }

  // Information criteria. REML counts only the variance/shape block.
  res.q_params = layout.profiled_beta ? variance_param_count(b)
                                      : free_param_count(b);
  res.aic = -2.0 * res.loglik + 2.0 * res.q_params;
  res.bic = -2.0 * res.loglik + res.q_params * std::log(res.n_obs);
  return res;
}

LrtResult lrt(const FitResult& full, const FitResult& reduced) {
  if (full.spec.method != Method::ml || reduced.spec.method != Method::ml)
    throw FitError("LRT requires ML fits");
  const int df = full.q_params - reduced.q_params;
  if (df < 0) throw FitError("LRT requires the reduced model to have no more "
                             "parameters than the full model");
  LrtResult r;
  r.statistic = std::max(0.0, 2.0 * (full.loglik - reduced.loglik));
  r.df = df;
  // df = 0 covers the identical-fit degenerate case
  r.p = df == 0 ? (r.statistic > 0.0 ? 0.0 : 1.0)
                : chi_sq_upper_p(r.statistic, df);
  return r;
}

QResult q_statistic(const EffectTable& t) {
  const int n = t.n();
  if (t.k() != n) throw FitError("Q statistic requires one effect per study");
  if (n < 2) throw FitError("Q statistic requires k >= 2");
  double sw = 0.0, swy = 0.0;
  for (int i = 0; i < n; ++i) {
    const double w = 1.0 / t.v[i];
    sw += w;
    swy += w * t.y[i];
  }
  const double mu = swy / sw;
  QResult r;
  for (int i = 0; i < n; ++i)
    r.Q += (t.y[i] - mu) * (t.y[i] - mu) / t.v[i];
  r.df = n - 1;
  r.p = chi_sq_upper_p(r.Q, r.df);
  r.i2 = r.Q > 0.0 ? std::max(0.0, (r.Q - r.df) / r.Q) * 100.0 : 0.0;
  return r;
}

}  // namespace distma
