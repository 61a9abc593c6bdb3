#include <cmath>
#include <doctest.h>
#include <random>
#include <sstream>

#include "distma/likelihood.hpp"
#include "distma/numerics.hpp"
#include "distma/simulate.hpp"

using namespace distma;

namespace {

CheckedInput normal_bundle(const std::vector<double>& y,
                           const std::vector<double>& v,
                           Method method = Method::ml) {
  std::ostringstream csv;
  csv << "y,v,study\n";
  for (size_t i = 0; i < y.size(); ++i)
    csv << y[i] << "," << v[i] << ",s" << i << "\n";
  ModelSpec spec;
  spec.family = Family::normal_re;
  spec.method = method;
  return validate(parse_csv_text(csv.str()), spec);
}

double sum_log_normal(const std::vector<double>& y, double mu,
                      const std::vector<double>& v, double tau2) {
  double s = 0.0;
  for (size_t i = 0; i < y.size(); ++i)
    s += log_normal_pdf(y[i], mu, v[i] + tau2);
  return s;
}

}  // namespace

TEST_CASE("ll_normal zero-residual anchor") {
  CheckedInput b = normal_bundle({0.5, 0.5}, {0.1, 0.1});
  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Constant(1, 0.5);
  p.tau2 = 0.0;
  double ll = ll_normal(b, p, Method::ml);
  CHECK(ll == doctest::Approx(2.0 * log_normal_pdf(0.5, 0.5, 0.1)).epsilon(1e-12));

  // with zero residuals the likelihood strictly decreases in tau2
  double prev = ll;
  for (double t2 : {0.01, 0.05, 0.2, 1.0}) {
    p.tau2 = t2;
    double cur = ll_normal(b, p, Method::ml);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("ll_normal closed-form argmax locations") {
  // y=[0,2], v=[1,1]: ML max at (mu=1, tau2=0); REML max at (mu=1, tau2=1)
  CheckedInput ml = normal_bundle({0.0, 2.0}, {1.0, 1.0});
  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Constant(1, 1.0);
  p.tau2 = 0.0;
  double at_max = ll_normal(ml, p, Method::ml);
  for (double mu : {0.8, 1.2}) {
    NaturalParams q = p;
    q.beta_loc[0] = mu;
    CHECK(ll_normal(ml, q, Method::ml) < at_max);
  }
  for (double t2 : {0.05, 0.3, 1.0}) {
    NaturalParams q = p;
    q.tau2 = t2;
    CHECK(ll_normal(ml, q, Method::ml) < at_max);
  }

  CheckedInput reml = normal_bundle({0.0, 2.0}, {1.0, 1.0}, Method::reml);
  NaturalParams r;
  r.beta_loc = Eigen::VectorXd::Zero(1);
  r.tau2 = 1.0;
  double reml_max = ll_normal(reml, r, Method::reml);
  for (double t2 : {0.5, 0.8, 1.2, 2.0}) {
    NaturalParams q = r;
    q.tau2 = t2;
    CHECK(ll_normal(reml, q, Method::reml) < reml_max);
  }
}

TEST_CASE("ll_normal REML ignores the beta input") {
  CheckedInput b = normal_bundle({0.1, 0.4, -0.2, 0.3}, {0.02, 0.03, 0.01, 0.04},
                                 Method::reml);
  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Zero(1);
  p.tau2 = 0.05;
  double l0 = ll_normal(b, p, Method::reml);
  p.beta_loc[0] = 17.0;
  CHECK(ll_normal(b, p, Method::reml) == doctest::Approx(l0).epsilon(1e-14));
}

TEST_CASE("ll_normal REML is invariant to design reparameterization") {
  // meta-regression with x; replace (1, x) by (1 + 2x, 3x - 1)
  std::string csv =
      "y,v,study,x\n0.1,0.02,s1,0.0\n0.5,0.03,s2,1.0\n0.3,0.01,s3,2.0\n"
      "0.7,0.04,s4,3.0\n0.4,0.02,s5,1.5\n0.6,0.03,s6,2.5\n";
  ModelSpec spec;
  spec.family = Family::normal_metareg;
  spec.method = Method::reml;
  spec.loc_formula = parse_formula("1 + x");
  CheckedInput b = validate(parse_csv_text(csv), spec);

  CheckedInput b2 = b;
  Eigen::MatrixXd A(2, 2);
  A << 1.0, -1.0, 2.0, 3.0;  // invertible column mix
  b2.X_loc.X = b.X_loc.X * A;

  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Zero(2);
  for (double t2 : {0.0, 0.01, 0.1}) {
    p.tau2 = t2;
    CHECK(std::abs(ll_normal(b, p, Method::reml) -
                   ll_normal(b2, p, Method::reml)) < 1e-8);
  }
}

TEST_CASE("location_scale with zero slope reduces to normal") {
  std::string csv =
      "y,v,study\n0.1,0.02,s1\n0.5,0.03,s2\n0.3,0.01,s3\n0.7,0.04,s4\n0.4,0.02,s5\n";
  EffectTable t = parse_csv_text(csv);
  ModelSpec ls;
  ls.family = Family::location_scale;
  ls.scale_formula = parse_formula("1 + se");
  CheckedInput bls = validate(t, ls);
  ModelSpec re;
  re.family = Family::normal_re;
  CheckedInput bre = validate(t, re);

  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Constant(1, 0.4);
  p.beta_scale = Eigen::VectorXd::Zero(2);
  p.beta_scale[0] = std::log(0.07);
  NaturalParams q = p;
  q.tau2 = 0.07;
  CHECK(ll_location_scale(bls, p) ==
        doctest::Approx(ll_normal(bre, q, Method::ml)).epsilon(1e-12));
}

TEST_CASE("location_scale scale random effect at zero variance") {
  std::string csv =
      "y,v,study\n0.1,0.02,s1\n0.5,0.03,s2\n0.3,0.01,s3\n0.7,0.04,s4\n0.4,0.02,s5\n"
      "0.2,0.02,s6\n";
  EffectTable t = parse_csv_text(csv);
  ModelSpec off;
  off.family = Family::location_scale;
  off.scale_formula = parse_formula("1 + se");
  ModelSpec on = off;
  on.scale_random_effect = true;
  CheckedInput boff = validate(t, off);
  CheckedInput bon = validate(t, on);

  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Constant(1, 0.3);
  p.beta_scale = Eigen::VectorXd::Zero(2);
  p.beta_scale << std::log(0.05), 0.5;
  p.tau2_scale_re = 0.0;
  CHECK(std::abs(ll_location_scale(bon, p) - ll_location_scale(boff, p)) < 1e-10);
}

TEST_CASE("location_scale exp clamp sets the diagnostic") {
  std::string csv = "y,v,study\n0.1,0.02,s1\n0.5,0.03,s2\n0.3,0.01,s3\n";
  ModelSpec ls;
  ls.family = Family::location_scale;
  ls.scale_formula = parse_formula("1");
  CheckedInput b = validate(parse_csv_text(csv), ls);
  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Zero(1);
  p.beta_scale = Eigen::VectorXd::Constant(1, 120.0);
  LLDiag d;
  double ll = ll_location_scale(b, p, &d);
  CHECK(std::isfinite(ll));
  CHECK(d.exp_clamped);
}

TEST_CASE("multilevel3 reductions") {
  // tau_u = tau_v = 0 collapses to row variance v + tau_w
  std::string csv =
      "y,v,study,cluster\n0.1,0.02,s1,c1\n0.5,0.03,s2,c1\n0.3,0.01,s3,c2\n"
      "0.7,0.04,s4,c2\n0.4,0.02,s5,c3\n";
  EffectTable t = parse_csv_text(csv);
  ModelSpec m3;
  m3.family = Family::multilevel3;
  CheckedInput b3 = validate(t, m3);

  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Constant(1, 0.3);
  p.tau2_u = 0.0;
  p.tau2_v = 0.0;
  p.tau2_w = 0.08;
  double direct = sum_log_normal({0.1, 0.5, 0.3, 0.7, 0.4}, 0.3,
                                 {0.02, 0.03, 0.01, 0.04, 0.02}, 0.08);
  CHECK(ll_multilevel3(b3, p, Method::ml) == doctest::Approx(direct).epsilon(1e-12));

  // singleton clusters: variance components add on the diagonal
  std::string one =
      "y,v,study,cluster\n0.4,0.02,s1,c1\n0.1,0.03,s2,c2\n0.2,0.01,s3,c3\n"
      "0.3,0.04,s4,c4\n";
  CheckedInput b1 = validate(parse_csv_text(one), m3);
  NaturalParams q;
  q.beta_loc = Eigen::VectorXd::Zero(1);
  q.tau2_u = 0.01;
  q.tau2_v = 0.02;
  q.tau2_w = 0.03;
  double expect = log_normal_pdf(0.4, 0.0, 0.02 + 0.06) +
                  log_normal_pdf(0.1, 0.0, 0.03 + 0.06) +
                  log_normal_pdf(0.2, 0.0, 0.01 + 0.06) +
                  log_normal_pdf(0.3, 0.0, 0.04 + 0.06);
  CHECK(ll_multilevel3(b1, q, Method::ml) == doctest::Approx(expect).epsilon(1e-12));

  // rows sharing a study, all components zero: independent standard normals
  std::string two =
      "y,v,study,cluster\n0,1,s1,c1\n0,1,s1,c1\n0,1,s2,c2\n0,1,s3,c2\n";
  CheckedInput b2 = validate(parse_csv_text(two), m3);
  NaturalParams z;
  z.beta_loc = Eigen::VectorXd::Zero(1);
  double want = 4.0 * log_normal_pdf(0.0, 0.0, 1.0);
  CHECK(ll_multilevel3(b2, z, Method::ml) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("multivariate block-diagonal factorization") {
  std::string csv =
      "y,v,study,outcome\n0.1,0.01,s1,a\n0.2,0.02,s1,b\n0.3,0.01,s2,a\n"
      "0.4,0.02,s2,b\n0.2,0.01,s3,a\n0.1,0.02,s3,b\n";
  EffectTable t = parse_csv_text(csv);
  ModelSpec mv;
  mv.family = Family::multivariate;
  mv.sampling_cor = 0.0;
  CheckedInput bmv = validate(t, mv);

  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Zero(2);
  p.beta_loc << 0.2, 0.25;
  p.T = Eigen::MatrixXd::Zero(2, 2);
  p.T(0, 0) = 0.03;
  p.T(1, 1) = 0.05;  // rho = 0

  double uni = sum_log_normal({0.1, 0.3, 0.2}, 0.2, {0.01, 0.01, 0.01}, 0.03) +
               sum_log_normal({0.2, 0.4, 0.1}, 0.25, {0.02, 0.02, 0.02}, 0.05);
  CHECK(ll_multivariate(bmv, p, Method::ml) == doctest::Approx(uni).epsilon(1e-12));
}

TEST_CASE("multivariate subsetting drops missing outcomes") {
  std::string csv =
      "y,v,study,outcome\n0.1,0.01,s1,a\n0.2,0.02,s1,b\n0.3,0.01,s2,a\n"
      "0.2,0.01,s3,a\n0.1,0.02,s3,b\n0.4,0.01,s4,a\n0.3,0.02,s4,b\n";
  EffectTable t = parse_csv_text(csv);
  ModelSpec mv;
  mv.family = Family::multivariate;
  mv.sampling_cor = 0.3;
  CheckedInput b = validate(t, mv);

  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Zero(2);
  p.beta_loc << 0.2, 0.25;
  // T from tau1=0.2, tau2=0.3, rho=0.5: off-diagonal 0.03
  p.T = Eigen::MatrixXd(2, 2);
  p.T << 0.04, 0.03, 0.03, 0.09;

  // study s2 has only outcome a: contributes a univariate term
  double ll = ll_multivariate(b, p, Method::ml);
  std::string csv_wo =
      "y,v,study,outcome\n0.1,0.01,s1,a\n0.2,0.02,s1,b\n"
      "0.2,0.01,s3,a\n0.1,0.02,s3,b\n0.4,0.01,s4,a\n0.3,0.02,s4,b\n";
  CheckedInput bwo = validate(parse_csv_text(csv_wo), mv);
  double ll_wo = ll_multivariate(bwo, p, Method::ml);
  double solo = log_normal_pdf(0.3, 0.2, 0.01 + 0.04);
  CHECK(ll == doctest::Approx(ll_wo + solo).epsilon(1e-12));
}

TEST_CASE("glmm binomial degenerate integral at tau2 = 0") {
  std::string csv = "study,events,trials\ns1,5,10\n";
  ModelSpec spec;
  spec.family = Family::glmm_binomial;
  CheckedInput b = validate(parse_csv_text(csv), spec);
  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Zero(1);
  p.tau2 = 0.0;
  double want = std::log(252.0) + 10.0 * std::log(0.5);  // C(10,5) p^5 q^5
  CHECK(ll_glmm(b, p) == doctest::Approx(want).epsilon(1e-10));

  // beta = 0 maximizes the pooled likelihood for 5/10 + 5/10
  std::string csv2 = "study,events,trials\ns1,5,10\ns2,5,10\n";
  CheckedInput b2 = validate(parse_csv_text(csv2), spec);
  double at0 = ll_glmm(b2, p);
  for (double beta : {-0.2, 0.2}) {
    NaturalParams q = p;
    q.beta_loc[0] = beta;
    CHECK(ll_glmm(b2, q) < at0);
  }
}

TEST_CASE("glmm poisson pooled rate and exposure invariance") {
  ModelSpec spec;
  spec.family = Family::glmm_poisson;
  std::string csv = "study,count,exposure\ns1,3,1\ns2,7,1\n";
  CheckedInput b = validate(parse_csv_text(csv), spec);
  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Constant(1, std::log(5.0));
  p.tau2 = 0.0;
  double at_hat = ll_glmm(b, p);
  for (double beta : {std::log(4.0), std::log(6.0)}) {
    NaturalParams q = p;
    q.beta_loc[0] = beta;
    CHECK(ll_glmm(b, q) < at_hat);
  }

  // doubling counts and exposures leaves the rate argmax in place
  std::string csv2 = "study,count,exposure\ns1,6,2\ns2,14,2\n";
  CheckedInput b2 = validate(parse_csv_text(csv2), spec);
  double at_hat2 = ll_glmm(b2, p);
  for (double beta : {std::log(4.5), std::log(5.5)}) {
    NaturalParams q = p;
    q.beta_loc[0] = beta;
    CHECK(ll_glmm(b2, q) < at_hat2);
  }
}

TEST_CASE("glmm adaptive quadrature matches 201-node brute force") {
  std::mt19937 gen(13);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> t2(0.05, 0.3);
  for (int rep = 0; rep < 6; ++rep) {
    SimScenario s;
    s.family = (rep % 2 == 0) ? Family::glmm_binomial : Family::glmm_poisson;
    s.truth.beta_loc = Eigen::VectorXd::Constant(1, u(gen));
    s.truth.tau2 = t2(gen);
    s.k = 8;
    s.n_per_study = 1;
    s.trials = 20;
    s.exposure = 3.0;
    s.seed = 1000 + rep;
    EffectTable t = simulate_table(s);
    ModelSpec spec;
    spec.family = s.family;
    CheckedInput b = validate(t, spec);
    NaturalParams p;
    p.beta_loc = Eigen::VectorXd::Constant(1, u(gen));
    p.tau2 = t2(gen);
    double adaptive = ll_glmm(b, p, true, 21);
    double brute = ll_glmm(b, p, false, 201);
    CHECK(std::abs(adaptive - brute) <= 1e-6 * std::abs(brute));
  }
}

TEST_CASE("collapsed mixture equals a single normal RE") {
  std::string csv = "y,v\n0.1,0.01\n0.5,0.03\n0.3,0.02\n0.25,0.04\n0.4,0.02\n";
  EffectTable t = parse_csv_text(csv);
  ModelSpec mix;
  mix.family = Family::robust_mixture;
  mix.mixture_g = 2;
  CheckedInput bmix = validate(t, mix);
  ModelSpec re;
  re.family = Family::normal_re;
  CheckedInput bre = validate(t, re);

  NaturalParams p;
  p.mixture = {{0.5, 0.3, 0.04}, {0.5, 0.3, 0.04}};
  NaturalParams q;
  q.beta_loc = Eigen::VectorXd::Constant(1, 0.3);
  q.tau2 = 0.04;
  CHECK(std::abs(ll_robust(bmix, p) - ll_normal(bre, q, Method::ml)) < 1e-12);
}

TEST_CASE("t random effects approach the normal as nu grows") {
  std::string csv = "y,v\n0.472,0.01\n0.128,0.01\n0.472,0.02\n0.128,0.02\n";
  EffectTable t = parse_csv_text(csv);
  ModelSpec rt;
  rt.family = Family::robust_t;
  CheckedInput bt = validate(t, rt);
  ModelSpec re;
  re.family = Family::normal_re;
  CheckedInput bre = validate(t, re);

  NaturalParams q;
  q.beta_loc = Eigen::VectorXd::Constant(1, 0.3);
  q.tau2 = 0.04;
  double normal_ll = ll_normal(bre, q, Method::ml);

  NaturalParams p = q;
  double prev_gap = 1e9;
  for (double nu : {10.0, 100.0, 1000.0}) {
    p.nu = nu;
    double gap = std::abs(ll_robust(bt, p) - normal_ll);
    CHECK(gap < prev_gap);  // monotone approach
    prev_gap = gap;
  }
  CHECK(prev_gap < 1e-4);
}

TEST_CASE("skew t reduces to t at gamma = 1") {
  for (double x : {-1.5, -0.2, 0.0, 0.7, 2.0}) {
    CHECK(log_skew_t_pdf(x, 0.1, 0.8, 5.0, 1.0) ==
          doctest::Approx(log_t_pdf(x, 0.1, 0.8, 5.0)).epsilon(1e-12));
  }
  // skew-t integrates to one
  double s = 0.0;
  int m = 4000;
  double lo = -40.0, hi = 40.0, h = (hi - lo) / m;
  for (int i = 0; i < m; ++i) {
    double x = lo + (i + 0.5) * h;
    s += std::exp(log_skew_t_pdf(x, 0.0, 1.0, 4.0, 1.7)) * h;
  }
  CHECK(s == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("beta random effects shape mapping and guards") {
  std::string csv = "y,v\n0.4,0.01\n0.5,0.02\n0.6,0.01\n0.45,0.02\n0.55,0.01\n";
  EffectTable t = parse_csv_text(csv);
  ModelSpec rb;
  rb.family = Family::robust_beta;
  CheckedInput b = validate(t, rb);

  // mu=0.5, tau2=0.05 maps to Beta(2,2); check against a direct integral
  NaturalParams p;
  p.beta_mu = 0.5;
  p.beta_tau2 = 0.05;
  double direct = 0.0;
  for (size_t i = 0; i < t.y.size(); ++i) {
    double s = 0.0;
    int m = 20000;
    for (int j = 0; j < m; ++j) {
      double u = (j + 0.5) / m;
      double dens = 6.0 * u * (1.0 - u);  // Beta(2,2)
      s += dens * std::exp(log_normal_pdf(t.y[i], u, t.v[i])) / m;
    }
    direct += std::log(s);
  }
  CHECK(ll_robust(b, p) == doctest::Approx(direct).epsilon(1e-6));

  NaturalParams bad = p;
  bad.beta_tau2 = 0.3;  // >= mu(1-mu)
  CHECK_THROWS_WITH_AS(ll_robust(b, bad), doctest::Contains("shape"),
                       LikelihoodError);
}

TEST_CASE("robust t invalid nu rejected") {
  std::string csv = "y,v\n0.4,0.01\n0.5,0.02\n0.6,0.01\n";
  ModelSpec rt;
  rt.family = Family::robust_t;
  CheckedInput b = validate(parse_csv_text(csv), rt);
  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Constant(1, 0.5);
  p.tau2 = 0.02;
  p.nu = 2.0;
  CHECK_THROWS_AS(ll_robust(b, p), LikelihoodError);
}

TEST_CASE("quadrature node sensitivity is below 1e-6 relative") {
  // location_scale with scale RE, glmm, and t REs on standard scenarios
  struct Case { Family fam; };
  for (Family fam : {Family::glmm_binomial, Family::glmm_poisson,
                     Family::robust_t, Family::location_scale}) {
    SimScenario s;
    s.family = fam;
    s.k = 12;
    s.n_per_study = 2;
    s.seed = 99;
    if (fam == Family::location_scale) {
      s.truth.beta_loc = Eigen::VectorXd::Constant(1, 0.3);
      s.truth.beta_scale = Eigen::VectorXd::Zero(2);
      s.truth.beta_scale << std::log(0.03), 0.0;
    } else {
      s.truth.beta_loc = Eigen::VectorXd::Constant(1, 0.2);
      s.truth.tau2 = 0.2;
    }
    EffectTable t = simulate_table(s);
    ModelSpec spec;
    spec.family = fam;
    NaturalParams p;
    if (fam == Family::location_scale) {
      spec.scale_formula = parse_formula("1 + se");
      spec.scale_random_effect = true;
      p.beta_loc = Eigen::VectorXd::Constant(1, 0.3);
      p.beta_scale = Eigen::VectorXd::Zero(2);
      p.beta_scale << std::log(0.03), 0.2;
      p.tau2_scale_re = 0.15;
    } else {
      p.beta_loc = Eigen::VectorXd::Constant(1, 0.2);
      p.tau2 = 0.2;
      p.nu = 5.0;
    }
    spec.quad_nodes = 21;
    CheckedInput b21 = validate(t, spec);
    spec.quad_nodes = 41;
    CheckedInput b41 = validate(t, spec);
    double l21 = loglik(b21, p);
    double l41 = loglik(b41, p);
    CHECK(std::abs(l21 - l41) <= 1e-6 * std::abs(l41));
  }
}

TEST_CASE("gls profile matches direct weighted least squares") {
  std::string csv =
      "y,v,study,x\n0.1,0.02,s1,0.0\n0.5,0.03,s2,1.0\n0.3,0.01,s3,2.0\n"
      "0.7,0.04,s4,3.0\n0.4,0.02,s5,1.5\n";
  ModelSpec spec;
  spec.family = Family::normal_metareg;
  spec.loc_formula = parse_formula("1 + x");
  CheckedInput b = validate(parse_csv_text(csv), spec);
  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Zero(2);
  p.tau2 = 0.05;
  GlsProfile g = gls_beta(b, p);

  Eigen::MatrixXd X = b.X_loc.X;
  Eigen::VectorXd y(5), w(5);
  y << 0.1, 0.5, 0.3, 0.7, 0.4;
  Eigen::VectorXd v(5);
  v << 0.02, 0.03, 0.01, 0.04, 0.02;
  Eigen::MatrixXd W = (v.array() + 0.05).inverse().matrix().asDiagonal();
  Eigen::MatrixXd XtWX = X.transpose() * W * X;
  Eigen::VectorXd beta = XtWX.ldlt().solve(X.transpose() * W * y);
  CHECK((g.beta - beta).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((g.cov - Eigen::MatrixXd(XtWX.inverse())).cwiseAbs().maxCoeff() < 1e-10);
}
