#pragma once

#include <optional>

#include "distma/data.hpp"
#include "distma/likelihood.hpp"
#include "distma/numerics.hpp"
#include "distma/params.hpp"

namespace distma {

struct FitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CoefRow {
  std::string name;
  double estimate = 0.0;  // natural scale
  double se = 0.0;        // natural for identity rows, transformed otherwise
  double z = 0.0;
  double p = 1.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  bool identity = true;  // z/p meaningful; se on the natural scale
  bool se_valid = true;
};

struct FitResult {
  ModelSpec spec;
  NaturalParams estimates;
  std::vector<CoefRow> coef_table;
  double loglik = 0.0;
  double aic = 0.0;
  double bic = 0.0;
  bool converged = false;
  int iterations = 0;
  double gradient_norm = 0.0;  // scaled sup norm at the optimum
  bool hessian_pd = false;
  std::vector<std::string> warnings;
  int n_obs = 0;
  int q_params = 0;  // parameters counted in the criteria
  ParamVector x_opt;

  const CoefRow* find_coef(const std::string& name) const;
};

struct FitOptions {
  std::optional<NaturalParams> start;
  int max_iter = 2000;
  double rel_tol = 1e-10;
};

// Starting values: WLS location coefficients, method-of-moments tau2,
// shape defaults (nu = 10, gamma = 1, equal mixture weights at data
// quantiles).
NaturalParams default_start(const CheckedInput& bundle);

// Nelder-Mead on the transformed coordinates with a BFGS polish; standard
// errors from the negated inverse finite-difference Hessian.
FitResult fit(const CheckedInput& bundle, const FitOptions& options = {});

// Likelihood-ratio test; both fits must be ML on the same data.
struct LrtResult {
  double statistic = 0.0;
  int df = 0;
  double p = 1.0;
};
LrtResult lrt(const FitResult& full, const FitResult& reduced);

// Cochran's Q and I^2 (one effect per row).
struct QResult {
  double Q = 0.0;
  int df = 0;
  double p = 1.0;
  double i2 = 0.0;  // percent
};
QResult q_statistic(const EffectTable& table);

// Shared minimizer, exposed for tests: minimizes f from x0.
struct MinimizeResult {
  Eigen::VectorXd x;
  double fmin = 0.0;
  int iterations = 0;
  bool hit_max_iter = false;
};
MinimizeResult nelder_mead_bfgs(const ObjectiveFn& f, const Eigen::VectorXd& x0,
                                int max_iter, double rel_tol);

}  // namespace distma
