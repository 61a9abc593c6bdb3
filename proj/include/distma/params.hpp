#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "distma/data.hpp"

namespace distma {

struct MixtureComponent {
  double w = 0.5;
  double mu = 0.0;
  double tau2 = 0.1;
};

// Natural-scale parameters for every family; unused fields are ignored.
struct NaturalParams {
  Eigen::VectorXd beta_loc;
  Eigen::VectorXd beta_scale;  // log-variance regression (location_scale)
  double tau2 = 0.0;           // single between-study variance
  double tau2_scale_re = 0.0;  // random-effect variance on the log-scale part
  double tau2_u = 0.0;         // cluster level
  double tau2_v = 0.0;         // study level
  double tau2_w = 0.0;         // effect level
  Eigen::MatrixXd T;           // between-study covariance (multivariate)
  double nu = 10.0;            // t / skew-t degrees of freedom (> 2)
  double skew_gamma = 1.0;     // two-piece skewness (> 0)
  double beta_mu = 0.5;        // beta random effects mean, in (0,1)
  double beta_tau2 = 0.05;     // beta random effects variance
  std::vector<MixtureComponent> mixture;
};

// Transform applied to one coordinate of the unconstrained vector.
enum class EntryKind {
  identity,      // location / scale-regression coefficient
  log_variance,  // exp(x) is a variance
  log_nu,        // 2 + exp(x) is a t degrees-of-freedom
  log_gamma,     // exp(x) is a skewness factor
  logit_mu,      // inv_logit(x) is the beta-RE mean
  logit_frac,    // inv_logit(x) is a fraction of a mu-dependent cap
  stick,         // stick-breaking logit of a mixture weight
  chol_diag,     // log of a T Cholesky diagonal
  chol_off,      // raw T Cholesky off-diagonal
};

struct ParamEntry {
  std::string name;
  EntryKind kind = EntryKind::identity;

  bool identity() const { return kind == EntryKind::identity; }
};

struct ParamLayout {
  Family family;
  int p_loc = 0;    // location coefficients per row (0 when profiled out)
  int p_scale = 0;  // scale coefficients
  bool scale_re = false;
  int n_outcomes = 0;
  int mixture_g = 0;
  bool profiled_beta = false;  // REML: beta excluded from the vector
  std::vector<ParamEntry> entries;

  int dim() const { return static_cast<int>(entries.size()); }
};

struct ParamVector {
  Eigen::VectorXd values;
  ParamLayout layout;
};

ParamLayout make_layout(const CheckedInput& bundle);

// Unconstrained <-> natural maps. Variances go through log (floored at
// 1e-10), correlations through atanh, nu through log(nu-2), skewness
// through log, mixture weights through stick-breaking logits, T through
// log-Cholesky, beta_mu through logit, beta_tau2 through
// logit(tau2 / (mu (1 - mu))).
ParamVector transform(const NaturalParams& p, const ParamLayout& layout);
NaturalParams untransform(const ParamVector& x);

}  // namespace distma
