#pragma once

#include "distma/data.hpp"
#include "distma/params.hpp"

namespace distma {

struct LikelihoodError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Diagnostics accumulated across evaluations of one fit.
struct LLDiag {
  bool exp_clamped = false;     // log-variance linear predictor hit the cap
  bool quad_fallback = false;   // adaptive rule fell back to non-adaptive
};

// Marginal (or restricted) log-likelihood for the bundle's family.
// REML profiles the location coefficients out; the beta entries of `p`
// are then ignored.
double loglik(const CheckedInput& bundle, const NaturalParams& p,
              LLDiag* diag = nullptr);

// Family kernels, exposed for targeted tests.
double ll_normal(const CheckedInput& bundle, const NaturalParams& p,
                 Method method);
double ll_location_scale(const CheckedInput& bundle, const NaturalParams& p,
                         LLDiag* diag = nullptr);
double ll_multilevel3(const CheckedInput& bundle, const NaturalParams& p,
                      Method method);
double ll_multivariate(const CheckedInput& bundle, const NaturalParams& p,
                       Method method);
double ll_glmm(const CheckedInput& bundle, const NaturalParams& p,
               bool adaptive = true, int nodes_override = 0,
               LLDiag* diag = nullptr);
double ll_robust(const CheckedInput& bundle, const NaturalParams& p,
                 int nodes_override = 0, LLDiag* diag = nullptr);

// GLS profile of the location coefficients for the normal families
// (normal_re/metareg, multilevel3, multivariate) at fixed variance
// parameters. Returns beta-hat and its covariance (XtWX)^-1.
struct GlsProfile {
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;
};
GlsProfile gls_beta(const CheckedInput& bundle, const NaturalParams& p);

// Two-piece (Fernandez-Steel) skewed-t log density; gamma = 1 recovers the
// symmetric t.
double log_skew_t_pdf(double x, double loc, double scale, double nu,
                      double gamma);
double log_t_pdf(double x, double loc, double scale, double nu);

}  // namespace distma
