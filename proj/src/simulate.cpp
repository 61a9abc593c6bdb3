#include "distma/simulate.hpp"

#include <boost/math/distributions/normal.hpp>

#include <cmath>

#include "distma/numerics.hpp"

namespace distma {

uint64_t Rng::next_u64() {
  state_ += 0x9E3779B97F4A7C15ULL;
  uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

uint64_t Rng::substream_seed(uint64_t seed, uint64_t stream_index) {
  Rng r(seed ^ (0xA0761D6478BD642FULL * (stream_index + 1)));
  return r.next_u64();
}

double Rng::uniform() {
  // 53-bit mantissa shifted into the open unit interval
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  static const boost::math::normal_distribution<double> nd;
  return boost::math::quantile(nd, uniform());
}

double Rng::gamma(double shape) {
  if (shape < 1.0) {
    // Boost the shape, then scale back (Marsaglia-Tsang trick).
    const double u = uniform();
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, vcube;
    do {
      x = normal();
      vcube = 1.0 + c * x;
    } while (vcube <= 0.0);
    vcube = vcube * vcube * vcube;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * vcube;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - vcube + std::log(vcube)))
      return d * vcube;
  }
}

double Rng::chi_sq(double df) { return 2.0 * gamma(0.5 * df); }

double Rng::student_t(double nu) {
  return normal() / std::sqrt(chi_sq(nu) / nu);
}

double Rng::beta(double a, double b) {
  const double x = gamma(a);
  const double y = gamma(b);
  return x / (x + y);
}

double Rng::skew_t(double nu, double gamma_par) {
  const double t = std::abs(student_t(nu));
  const double p_pos = gamma_par * gamma_par / (1.0 + gamma_par * gamma_par);
  return uniform() < p_pos ? t * gamma_par : -t / gamma_par;
}

long Rng::binomial(long n, double p) {
  long c = 0;
  for (long i = 0; i < n; ++i)
    if (uniform() < p) ++c;
  return c;
}

long Rng::poisson(double lambda) {
  // Knuth's product method, chunked so exp(-lambda) never underflows.
  long c = 0;
  double remaining = lambda;
  double prod = 1.0;
  double limit = std::exp(-std::min(remaining, 500.0));
  remaining -= std::min(remaining, 500.0);
  for (;;) {
    prod *= uniform();
    while (prod < limit && remaining > 0.0) {
      const double take = std::min(remaining, 500.0);
      limit *= std::exp(-take);
      remaining -= take;
    }
    if (prod < limit) return c;
    ++c;
  }
}

namespace {

std::vector<double> draw_variances(const SimScenario& s, int n, Rng* rng) {
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) {
    if (!s.v_fixed.empty()) {
      v[i] = s.v_fixed[i % s.v_fixed.size()];
    } else {
      const double draw = s.v_lo + (s.v_hi - s.v_lo) * rng->uniform();
      v[i] = s.draw_se ? draw * draw : draw;
    }
  }
  return v;
}

void add_study_ids(EffectTable* t, int n) {
  t->study.resize(n);
  for (int i = 0; i < n; ++i) t->study[i] = "s" + std::to_string(i + 1);
}

}  // namespace

EffectTable sim_normal_re(const SimScenario& s) {
  Rng rng(s.seed);
  EffectTable t;
  const int n = s.k;
  t.v = draw_variances(s, n, &rng);
  t.y.resize(n);
  const double mu = s.truth.beta_loc.size() ? s.truth.beta_loc[0] : 0.0;
  const double sd = std::sqrt(std::max(s.truth.tau2, 0.0));
  for (int i = 0; i < n; ++i) {
    const double u = sd * rng.normal();
    t.y[i] = mu + u + std::sqrt(t.v[i]) * rng.normal();
  }
  add_study_ids(&t, n);
  return t;
}

EffectTable sim_location_scale(const SimScenario& s) {
  Rng rng(s.seed);
  EffectTable t;
  const int n = s.k;
  t.v = draw_variances(s, n, &rng);
  t.y.resize(n);
  // location: beta0 + beta1 * se (when present); scale: exp(g0 + g1 * se)
  const Eigen::VectorXd& bl = s.truth.beta_loc;
  const Eigen::VectorXd& bs = s.truth.beta_scale;
  const double re_sd = std::sqrt(std::max(s.truth.tau2_scale_re, 0.0));
  for (int i = 0; i < n; ++i) {
    const double se = std::sqrt(t.v[i]);
    double mu = bl.size() > 0 ? bl[0] : 0.0;
    if (bl.size() > 1) mu += bl[1] * se;
    double eta = bs.size() > 0 ? bs[0] : 0.0;
    if (bs.size() > 1) eta += bs[1] * se;
    if (re_sd > 0.0) eta += re_sd * rng.normal();
    const double tau_i = std::sqrt(std::exp(eta));
    t.y[i] = mu + tau_i * rng.normal() + se * rng.normal();
  }
  add_study_ids(&t, n);
  return t;
}

EffectTable sim_multilevel3(const SimScenario& s) {
  Rng rng(s.seed);
  EffectTable t;
  const int rows = s.k * s.n_per_study;
  t.v = draw_variances(s, rows, &rng);
  t.y.resize(rows);
  t.study.resize(rows);
  t.cluster.resize(rows);
  const double mu = s.truth.beta_loc.size() ? s.truth.beta_loc[0] : 0.0;
  const double sd_u = std::sqrt(std::max(s.truth.tau2_u, 0.0));
  const double sd_v = std::sqrt(std::max(s.truth.tau2_v, 0.0));
  const double sd_w = std::sqrt(std::max(s.truth.tau2_w, 0.0));
  int row = 0;
  double cluster_re = 0.0;
  for (int st = 0; st < s.k; ++st) {
    const int cl = st / std::max(1, s.studies_per_cluster);
    if (st % std::max(1, s.studies_per_cluster) == 0)
      cluster_re = sd_u * rng.normal();
    const double study_re = sd_v * rng.normal();
    for (int j = 0; j < s.n_per_study; ++j, ++row) {
      const double effect_re = sd_w * rng.normal();
      t.y[row] = mu + cluster_re + study_re + effect_re +
                 std::sqrt(t.v[row]) * rng.normal();
      t.study[row] = "s" + std::to_string(st + 1);
      t.cluster[row] = "c" + std::to_string(cl + 1);
    }
  }
  return t;
}

EffectTable sim_multivariate(const SimScenario& s) {
  Rng rng(s.seed);
  EffectTable t;
  const int l = static_cast<int>(s.truth.T.rows());
  const Eigen::MatrixXd Lt = cholesky(s.truth.T).L;
  const int rows = s.k * l;
  t.y.resize(rows);
  t.v = draw_variances(s, rows, &rng);
  t.study.resize(rows);
  t.outcome.resize(rows);
  int row = 0;
  for (int st = 0; st < s.k; ++st) {
    Eigen::VectorXd z(l);
    for (int o = 0; o < l; ++o) z[o] = rng.normal();
    const Eigen::VectorXd u = Lt * z;
    // correlated sampling errors via an equicorrelated Gaussian
    Eigen::MatrixXd C = Eigen::MatrixXd::Constant(l, l, s.within_cor);
    C.diagonal().setOnes();
    const Eigen::MatrixXd Lc = cholesky(C).L;
    Eigen::VectorXd ze(l);
    for (int o = 0; o < l; ++o) ze[o] = rng.normal();
    const Eigen::VectorXd e = Lc * ze;
    for (int o = 0; o < l; ++o, ++row) {
      const double mu = s.truth.beta_loc.size() > o ? s.truth.beta_loc[o] : 0.0;
      t.y[row] = mu + u[o] + std::sqrt(t.v[row]) * e[o];
      t.study[row] = "s" + std::to_string(st + 1);
      t.outcome[row] = "o" + std::to_string(o + 1);
    }
  }
  return t;
}

EffectTable sim_glmm(const SimScenario& s) {
  Rng rng(s.seed);
  EffectTable t;
  const bool binom = s.family == Family::glmm_binomial;
  const int rows = s.k * s.n_per_study;
  t.study.resize(rows);
  const double beta0 = s.truth.beta_loc.size() ? s.truth.beta_loc[0] : 0.0;
  const double sd = std::sqrt(std::max(s.truth.tau2, 0.0));
  if (binom) {
    t.events.resize(rows);
    t.trials.resize(rows);
  } else {
    t.count.resize(rows);
    t.exposure.resize(rows);
  }
  int row = 0;
  for (int st = 0; st < s.k; ++st) {
    const double u = sd * rng.normal();
    for (int j = 0; j < s.n_per_study; ++j, ++row) {
      t.study[row] = "s" + std::to_string(st + 1);
      const double eta = beta0 + u;
      if (binom) {
        const double p = 1.0 / (1.0 + std::exp(-eta));
        t.trials[row] = s.trials;
        t.events[row] =
            static_cast<double>(rng.binomial(static_cast<long>(s.trials), p));
      } else {
        t.exposure[row] = s.exposure;
        t.count[row] =
            static_cast<double>(rng.poisson(s.exposure * std::exp(eta)));
      }
    }
  }
  return t;
}

EffectTable sim_robust(const SimScenario& s) {
  Rng rng(s.seed);
  EffectTable t;
  const int n = s.k;
  t.v = draw_variances(s, n, &rng);
  t.y.resize(n);
  for (int i = 0; i < n; ++i) {
    double m = 0.0;
    switch (s.family) {
      case Family::robust_t: {
        const double sc =
            std::sqrt(s.truth.tau2 * (s.truth.nu - 2.0) / s.truth.nu);
        m = s.truth.beta_loc[0] + sc * rng.student_t(s.truth.nu);
        break;
      }
      case Family::robust_skew_t: {
        const double sc =
            std::sqrt(s.truth.tau2 * (s.truth.nu - 2.0) / s.truth.nu);
        m = s.truth.beta_loc[0] +
            sc * rng.skew_t(s.truth.nu, s.truth.skew_gamma);
        break;
      }
      case Family::robust_beta: {
        const double mu = s.truth.beta_mu, t2 = s.truth.beta_tau2;
        const double phi = (mu * (1.0 - mu) - t2) / t2;
        m = rng.beta(mu * phi, (1.0 - mu) * phi);
        break;
      }
      case Family::robust_mixture: {
        const double u = rng.uniform();
        double acc = 0.0;
        const MixtureComponent* pick = &s.truth.mixture.back();
        for (const auto& c : s.truth.mixture) {
          acc += c.w;
          if (u < acc) {
            pick = &c;
            break;
          }
        }
        m = pick->mu + std::sqrt(pick->tau2) * rng.normal();
        break;
      }
      default:
        throw DataError("sim_robust: not a robust family");
    }
    t.y[i] = m + std::sqrt(t.v[i]) * rng.normal();
  }
  add_study_ids(&t, n);
  return t;
}

EffectTable simulate_table(const SimScenario& s) {
  switch (s.family) {
    case Family::normal_re:
    case Family::normal_metareg:
      return sim_normal_re(s);
    case Family::location_scale:
      return sim_location_scale(s);
    case Family::multilevel3:
      return sim_multilevel3(s);
    case Family::multivariate:
      return sim_multivariate(s);
    case Family::glmm_binomial:
    case Family::glmm_poisson:
      return sim_glmm(s);
    default:
      return sim_robust(s);
  }
}

}  // namespace distma
