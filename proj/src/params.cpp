#include "distma/params.hpp"

#include <cmath>
#include <sstream>

#include "distma/numerics.hpp"

namespace distma {

namespace {

constexpr double kVarFloor = 1e-10;

double log_var(double v) { return std::log(std::max(v, kVarFloor)); }

double logit(double p) { return std::log(p / (1.0 - p)); }
double inv_logit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

ParamLayout make_layout(const CheckedInput& b) {
  ParamLayout lay;
  lay.family = b.spec.family;
  lay.p_loc = static_cast<int>(b.X_loc.X.cols());
  lay.p_scale = b.X_scale.X.size() ? static_cast<int>(b.X_scale.X.cols()) : 0;
  lay.scale_re = b.spec.scale_random_effect;
  lay.n_outcomes = b.n_outcomes();
  lay.mixture_g = b.spec.family == Family::robust_mixture ? b.spec.mixture_g : 0;
  lay.profiled_beta = b.spec.method == Method::reml;

  auto beta_entries = [&](const std::vector<std::string>& names,
                          const std::string& prefix) {
    for (const auto& nm : names)
      lay.entries.push_back({prefix + nm, EntryKind::identity});
  };

  switch (b.spec.family) {
    case Family::normal_re:
    case Family::normal_metareg:
      if (!lay.profiled_beta) beta_entries(b.X_loc.column_names, "");
      lay.entries.push_back({"tau2", EntryKind::log_variance});
      break;
    case Family::location_scale:
      beta_entries(b.X_loc.column_names, "");
      beta_entries(b.X_scale.column_names, "scale:");
      if (lay.scale_re) lay.entries.push_back({"tau2_scale_re", EntryKind::log_variance});
      break;
    case Family::multilevel3:
      if (!lay.profiled_beta) beta_entries(b.X_loc.column_names, "");
      lay.entries.push_back({"tau2_cluster", EntryKind::log_variance});
      lay.entries.push_back({"tau2_study", EntryKind::log_variance});
      lay.entries.push_back({"tau2_effect", EntryKind::log_variance});
      break;
    case Family::multivariate: {
      if (!lay.profiled_beta)
        for (int o = 0; o < lay.n_outcomes; ++o)
          for (const auto& nm : b.X_loc.column_names)
            lay.entries.push_back({b.outcome_levels[o] + ":" + nm, EntryKind::identity});
      for (int i = 0; i < lay.n_outcomes; ++i)
        for (int j = 0; j <= i; ++j) {
          std::ostringstream nm;
          nm << "T[" << i + 1 << "," << j + 1 << "]";
          lay.entries.push_back({nm.str(), i == j ? EntryKind::chol_diag : EntryKind::chol_off});
        }
      break;
    }
    case Family::glmm_binomial:
    case Family::glmm_poisson:
      beta_entries(b.X_loc.column_names, "");
      lay.entries.push_back({"tau2", EntryKind::log_variance});
      break;
    case Family::robust_t:
      lay.entries.push_back({"mu", EntryKind::identity});
      lay.entries.push_back({"tau2", EntryKind::log_variance});
      lay.entries.push_back({"nu", EntryKind::log_nu});
      break;
    case Family::robust_skew_t:
      lay.entries.push_back({"xi", EntryKind::identity});
      lay.entries.push_back({"tau2", EntryKind::log_variance});
      lay.entries.push_back({"nu", EntryKind::log_nu});
      lay.entries.push_back({"gamma", EntryKind::log_gamma});
      break;
    case Family::robust_beta:
      lay.entries.push_back({"beta_mu", EntryKind::logit_mu});
      lay.entries.push_back({"beta_tau2", EntryKind::logit_frac});
      break;
    case Family::robust_mixture: {
      const int g = lay.mixture_g;
      for (int i = 0; i < g - 1; ++i)
        lay.entries.push_back({"w" + std::to_string(i + 1), EntryKind::stick});
      for (int i = 0; i < g; ++i)
        lay.entries.push_back({"mu" + std::to_string(i + 1), EntryKind::identity});
      for (int i = 0; i < g; ++i)
        lay.entries.push_back({"tau2_" + std::to_string(i + 1), EntryKind::log_variance});
      break;
    }
  }
  return lay;
}

ParamVector transform(const NaturalParams& p, const ParamLayout& lay) {
  ParamVector out;
  out.layout = lay;
  out.values.resize(lay.dim());
  int at = 0;
  auto put = [&](double v) { out.values[at++] = v; };

  const bool with_beta = !lay.profiled_beta;
  switch (lay.family) {
    case Family::normal_re:
    case Family::normal_metareg:
      if (with_beta)
        for (int i = 0; i < lay.p_loc; ++i) put(p.beta_loc[i]);
      put(log_var(p.tau2));
      break;
    case Family::location_scale:
      for (int i = 0; i < lay.p_loc; ++i) put(p.beta_loc[i]);
      for (int i = 0; i < lay.p_scale; ++i) put(p.beta_scale[i]);
      if (lay.scale_re) put(log_var(p.tau2_scale_re));
      break;
    case Family::multilevel3:
      if (with_beta)
        for (int i = 0; i < lay.p_loc; ++i) put(p.beta_loc[i]);
      put(log_var(p.tau2_u));
      put(log_var(p.tau2_v));
      put(log_var(p.tau2_w));
      break;
    case Family::multivariate: {
      if (with_beta)
        for (int i = 0; i < lay.n_outcomes * lay.p_loc; ++i) put(p.beta_loc[i]);
      // log-Cholesky: log diagonal, raw strict lower triangle
      Eigen::MatrixXd Treg = p.T;
      for (int i = 0; i < Treg.rows(); ++i)
        Treg(i, i) = std::max(Treg(i, i), kVarFloor);
      const Eigen::MatrixXd L = cholesky(Treg).L;
      for (int i = 0; i < lay.n_outcomes; ++i)
        for (int j = 0; j <= i; ++j)
          put(i == j ? std::log(L(i, i)) : L(i, j));
      break;
    }
    case Family::glmm_binomial:
    case Family::glmm_poisson:
      for (int i = 0; i < lay.p_loc; ++i) put(p.beta_loc[i]);
      put(log_var(p.tau2));
      break;
    case Family::robust_t:
      put(p.beta_loc[0]);
      put(log_var(p.tau2));
      put(std::log(p.nu - 2.0));
      break;
    case Family::robust_skew_t:
      put(p.beta_loc[0]);
      put(log_var(p.tau2));
      put(std::log(p.nu - 2.0));
      put(std::log(p.skew_gamma));
      break;
    case Family::robust_beta: {
      put(logit(p.beta_mu));
      const double cap = p.beta_mu * (1.0 - p.beta_mu);
      put(logit(p.beta_tau2 / cap));
      break;
    }
    case Family::robust_mixture: {
      const int g = lay.mixture_g;
      // stick-breaking logits
      double remaining = 1.0;
      for (int i = 0; i < g - 1; ++i) {
        const double frac = p.mixture[i].w / remaining;
        put(logit(frac));
        remaining -= p.mixture[i].w;
      }
      for (int i = 0; i < g; ++i) put(p.mixture[i].mu);
      for (int i = 0; i < g; ++i) put(log_var(p.mixture[i].tau2));
      break;
    }
  }
  return out;
}

NaturalParams untransform(const ParamVector& x) {
  const ParamLayout& lay = x.layout;
  NaturalParams p;
  int at = 0;
  auto get = [&]() { return x.values[at++]; };

  const bool with_beta = !lay.profiled_beta;
  switch (lay.family) {
    case Family::normal_re:
    case Family::normal_metareg:
      p.beta_loc.setZero(lay.p_loc);
      if (with_beta)
        for (int i = 0; i < lay.p_loc; ++i) p.beta_loc[i] = get();
      p.tau2 = std::exp(get());
      break;
    case Family::location_scale:
      p.beta_loc.resize(lay.p_loc);
      for (int i = 0; i < lay.p_loc; ++i) p.beta_loc[i] = get();
      p.beta_scale.resize(lay.p_scale);
      for (int i = 0; i < lay.p_scale; ++i) p.beta_scale[i] = get();
      if (lay.scale_re) p.tau2_scale_re = std::exp(get());
      break;
    case Family::multilevel3:
      p.beta_loc.setZero(lay.p_loc);
      if (with_beta)
        for (int i = 0; i < lay.p_loc; ++i) p.beta_loc[i] = get();
      p.tau2_u = std::exp(get());
      p.tau2_v = std::exp(get());
      p.tau2_w = std::exp(get());
      break;
    case Family::multivariate: {
      const int l = lay.n_outcomes;
      p.beta_loc.setZero(l * lay.p_loc);
      if (with_beta)
        for (int i = 0; i < l * lay.p_loc; ++i) p.beta_loc[i] = get();
      Eigen::MatrixXd L = Eigen::MatrixXd::Zero(l, l);
      for (int i = 0; i < l; ++i)
        for (int j = 0; j <= i; ++j) {
          const double v = get();
          L(i, j) = (i == j) ? std::exp(v) : v;
        }
      p.T = L * L.transpose();
      break;
    }
    case Family::glmm_binomial:
    case Family::glmm_poisson:
      p.beta_loc.resize(lay.p_loc);
      for (int i = 0; i < lay.p_loc; ++i) p.beta_loc[i] = get();
      p.tau2 = std::exp(get());
      break;
    case Family::robust_t:
      p.beta_loc.resize(1);
      p.beta_loc[0] = get();
      p.tau2 = std::exp(get());
      p.nu = 2.0 + std::exp(get());
      break;
    case Family::robust_skew_t:
      p.beta_loc.resize(1);
      p.beta_loc[0] = get();
      p.tau2 = std::exp(get());
      p.nu = 2.0 + std::exp(get());
      p.skew_gamma = std::exp(get());
      break;
    case Family::robust_beta: {
      p.beta_loc.resize(0);
      p.beta_mu = inv_logit(get());
      const double cap = p.beta_mu * (1.0 - p.beta_mu);
      p.beta_tau2 = cap * inv_logit(get());
      break;
    }
    case Family::robust_mixture: {
      const int g = lay.mixture_g;
      p.mixture.resize(g);
      double remaining = 1.0;
      for (int i = 0; i < g - 1; ++i) {
        const double frac = inv_logit(get());
        p.mixture[i].w = frac * remaining;
        remaining -= p.mixture[i].w;
      }
      p.mixture[g - 1].w = remaining;
      for (int i = 0; i < g; ++i) p.mixture[i].mu = get();
      for (int i = 0; i < g; ++i) p.mixture[i].tau2 = std::exp(get());
      break;
    }
  }
  return p;
}

}  // namespace distma
