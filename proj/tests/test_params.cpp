#include <cmath>
#include <doctest.h>
#include <random>

#include "distma/params.hpp"

using namespace distma;

namespace {

CheckedInput make_bundle(Family fam, int mixture_g = 2, Method method = Method::ml) {
  std::string csv;
  if (fam == Family::glmm_binomial) {
    csv = "study,events,trials\ns1,5,10\ns2,3,12\ns3,7,20\ns4,2,9\ns5,6,11\ns6,4,10\n";
  } else if (fam == Family::glmm_poisson) {
    csv = "study,count,exposure\ns1,3,1\ns2,5,2\ns3,2,1\ns4,7,3\ns5,4,2\ns6,6,2\n";
  } else if (fam == Family::multivariate) {
    csv =
        "y,v,study,outcome\n0.1,0.01,s1,a\n0.2,0.02,s1,b\n0.3,0.01,s2,a\n"
        "0.4,0.02,s2,b\n0.2,0.01,s3,a\n0.1,0.02,s3,b\n0.3,0.01,s4,a\n"
        "0.2,0.02,s4,b\n0.1,0.01,s5,a\n0.4,0.02,s5,b\n";
  } else if (fam == Family::multilevel3) {
    csv =
        "y,v,study,cluster\n0.1,0.01,s1,c1\n0.2,0.02,s1,c1\n0.3,0.01,s2,c1\n"
        "0.4,0.02,s3,c2\n0.2,0.01,s3,c2\n0.1,0.02,s4,c2\n0.3,0.01,s5,c3\n"
        "0.2,0.02,s6,c3\n";
  } else if (fam == Family::robust_beta) {
    csv = "y,v\n0.4,0.01\n0.5,0.02\n0.6,0.01\n0.45,0.02\n0.55,0.01\n0.5,0.02\n0.35,0.01\n0.65,0.02\n";
  } else {
    csv = "y,v\n0.1,0.01\n0.2,0.02\n0.3,0.01\n0.4,0.02\n0.2,0.01\n0.1,0.02\n0.3,0.01\n0.2,0.02\n";
  }
  EffectTable t = parse_csv_text(csv);
  ModelSpec spec;
  spec.family = fam;
  spec.method = method;
  spec.mixture_g = mixture_g;
  if (fam == Family::location_scale) spec.scale_formula = parse_formula("1 + se");
  return validate(t, spec);
}

NaturalParams random_params(const ParamLayout& layout, std::mt19937& gen) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::uniform_real_distribution<double> pos(0.01, 2.0);
  std::uniform_real_distribution<double> unit(0.1, 0.9);
  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::NullaryExpr(std::max(layout.p_loc, 1),
                                            [&](int) { return u(gen); });
  p.beta_scale = Eigen::VectorXd::NullaryExpr(std::max(layout.p_scale, 1),
                                              [&](int) { return u(gen); });
  p.tau2 = pos(gen);
  p.tau2_scale_re = pos(gen);
  p.tau2_u = pos(gen);
  p.tau2_v = pos(gen);
  p.tau2_w = pos(gen);
  p.nu = 2.0 + pos(gen) * 10.0;
  p.skew_gamma = pos(gen);
  p.beta_mu = unit(gen);
  p.beta_tau2 = 0.5 * unit(gen) * p.beta_mu * (1.0 - p.beta_mu);
  if (layout.n_outcomes > 0) {
    int l = layout.n_outcomes;
    Eigen::MatrixXd M(l, l);
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < l; ++j) M(i, j) = u(gen);
    p.T = M * M.transpose() + 0.05 * Eigen::MatrixXd::Identity(l, l);
  }
  if (layout.mixture_g > 0) {
    p.mixture.clear();
    double rem = 1.0;
    for (int g = 0; g < layout.mixture_g; ++g) {
      MixtureComponent c;
      c.w = (g + 1 == layout.mixture_g) ? rem : rem * unit(gen);
      rem -= c.w;
      c.mu = u(gen);
      c.tau2 = pos(gen);
      p.mixture.push_back(c);
    }
  }
  return p;
}

double roundtrip_err(const ParamVector& x, const ParamVector& y) {
  return (x.values - y.values).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("simple transform anchors") {
  CheckedInput b = make_bundle(Family::normal_re);
  ParamLayout layout = make_layout(b);
  NaturalParams p;
  p.beta_loc = Eigen::VectorXd::Zero(1);
  p.tau2 = 1.0;
  ParamVector x = transform(p, layout);
  // tau2 = 1 maps to log 1 = 0
  bool found = false;
  for (int i = 0; i < layout.dim(); ++i) {
    if (layout.entries[i].kind == EntryKind::log_variance) {
      CHECK(x.values[i] == doctest::Approx(0.0).epsilon(1e-14));
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("layout shape per family") {
  // ML normal_re: mu + log tau2
  CHECK(make_layout(make_bundle(Family::normal_re)).dim() == 2);
  // REML drops the profiled location coefficient
  ParamLayout r = make_layout(make_bundle(Family::normal_re, 2, Method::reml));
  CHECK(r.profiled_beta);
  CHECK(r.dim() == 1);
  // location_scale with 1+se scale: 1 loc + 2 scale
  CHECK(make_layout(make_bundle(Family::location_scale)).dim() == 3);
  // multilevel3: mu + three variance components
  CHECK(make_layout(make_bundle(Family::multilevel3)).dim() == 4);
  // bivariate: 2 beta + 3 log-Cholesky entries of T
  CHECK(make_layout(make_bundle(Family::multivariate)).dim() == 5);
  // t random effects: mu, log tau2, log(nu-2)
  CHECK(make_layout(make_bundle(Family::robust_t)).dim() == 3);
  // skew t adds log gamma
  CHECK(make_layout(make_bundle(Family::robust_skew_t)).dim() == 4);
  // beta RE: logit mu + logit variance fraction
  CHECK(make_layout(make_bundle(Family::robust_beta)).dim() == 2);
  // G=2 mixture: 1 stick + 2 means + 2 log variances
  CHECK(make_layout(make_bundle(Family::robust_mixture, 2)).dim() == 5);
  CHECK(make_layout(make_bundle(Family::robust_mixture, 3)).dim() == 8);
}

TEST_CASE("transform round trip over random draws") {
  std::mt19937 gen(7);
  const Family fams[] = {Family::normal_re,      Family::location_scale,
                         Family::multilevel3,    Family::multivariate,
                         Family::glmm_binomial,  Family::glmm_poisson,
                         Family::robust_t,       Family::robust_skew_t,
                         Family::robust_beta,    Family::robust_mixture};
  for (Family fam : fams) {
    CheckedInput b = make_bundle(fam, 3);
    ParamLayout layout = make_layout(b);
    for (int rep = 0; rep < 100; ++rep) {
      NaturalParams p = random_params(layout, gen);
      ParamVector x = transform(p, layout);
      NaturalParams q = untransform(x);
      ParamVector x2 = transform(q, layout);
      CHECK(roundtrip_err(x, x2) <= 1e-12);
    }
  }
}

TEST_CASE("untransform produces valid naturals from arbitrary coordinates") {
  std::mt19937 gen(11);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  const Family fams[] = {Family::robust_mixture, Family::robust_beta,
                         Family::robust_skew_t, Family::multivariate};
  for (Family fam : fams) {
    CheckedInput b = make_bundle(fam, 3);
    ParamLayout layout = make_layout(b);
    for (int rep = 0; rep < 200; ++rep) {
      ParamVector x;
      x.layout = layout;
      x.values = Eigen::VectorXd::NullaryExpr(layout.dim(),
                                              [&](int) { return u(gen); });
      NaturalParams p = untransform(x);
      if (fam == Family::robust_mixture) {
        double wsum = 0.0;
        for (const auto& c : p.mixture) {
          CHECK(c.w > 0.0);
          CHECK(c.tau2 >= 0.0);
          wsum += c.w;
        }
        CHECK(std::abs(wsum - 1.0) <= 1e-12);
      }
      if (fam == Family::robust_beta) {
        CHECK(p.beta_mu > 0.0);
        CHECK(p.beta_mu < 1.0);
        CHECK(p.beta_tau2 > 0.0);
        CHECK(p.beta_tau2 < p.beta_mu * (1.0 - p.beta_mu));
      }
      if (fam == Family::robust_skew_t) {
        CHECK(p.nu > 2.0);
        CHECK(p.skew_gamma > 0.0);
      }
      if (fam == Family::multivariate) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p.T);
        CHECK(es.eigenvalues().minCoeff() > 0.0);
      }
    }
  }
}
