#include "distma/report.hpp"

#include <cmath>

namespace distma {

using nlohmann::ordered_json;

namespace {

ordered_json num_or_null(double x) {
  if (std::isnan(x)) return nullptr;
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  return x;
}

ordered_json coef_json(const CoefRow& r) {
  ordered_json j;
  j["name"] = r.name;
  j["estimate"] = num_or_null(r.estimate);
  j["se"] = r.se_valid ? num_or_null(r.se) : ordered_json(nullptr);
  j["z"] = num_or_null(r.z);
  j["p"] = num_or_null(r.p);
  j["ci_lower"] = num_or_null(r.ci_lo);
  j["ci_upper"] = num_or_null(r.ci_hi);
  return j;
}

}  // namespace

ordered_json fit_report(const FitResult& f, double seconds) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  ordered_json inv;
  inv["family"] = family_name(f.spec.family);
  inv["method"] = f.spec.method == Method::ml ? "ml" : "reml";
  inv["loc_formula"] = format_formula(f.spec.loc_formula);
  if (f.spec.scale_formula)
    inv["scale_formula"] = format_formula(*f.spec.scale_formula);
  inv["quad_nodes"] = f.spec.effective_quad_nodes();
  if (f.spec.family == Family::multivariate)
    inv["sampling_cor"] = f.spec.sampling_cor;
  if (f.spec.family == Family::robust_mixture)
    inv["mixture_g"] = f.spec.mixture_g;
  j["invocation"] = inv;

  ordered_json fit;
  fit["coefficients"] = ordered_json::array();
  for (const auto& r : f.coef_table) fit["coefficients"].push_back(coef_json(r));
  fit["loglik"] = f.loglik;
  fit["aic"] = f.aic;
  fit["bic"] = f.bic;
  fit["n_obs"] = f.n_obs;
  fit["n_params"] = f.q_params;
  ordered_json conv;
  conv["converged"] = f.converged;
  conv["iterations"] = f.iterations;
  conv["gradient_norm"] = f.gradient_norm;
  conv["hessian_pd"] = f.hessian_pd;
  fit["convergence"] = conv;
  fit["warnings"] = f.warnings;
  j["fit"] = fit;
  j["timing_seconds"] = seconds;
  return j;
}

ordered_json egger_report(const EggerResult& e) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["k"] = e.k;
  j["intercept"] = e.intercept;
  j["slope"] = e.slope;
  j["slope_se"] = e.slope_se;
  j["t"] = num_or_null(e.t_stat);
  j["df"] = e.df;
  j["p"] = num_or_null(e.p);
  return j;
}

ordered_json small_study_report(const SmallStudyResult& r) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["alpha"] = r.alpha;
  j["egger"] = egger_report(r.egger);
  auto slope = [](const SlopeTest& s) {
    ordered_json o;
    o["estimate"] = num_or_null(s.estimate);
    o["se"] = num_or_null(s.se);
    o["z"] = num_or_null(s.z);
    o["p"] = num_or_null(s.p);
    return o;
  };
  j["location_slope"] = slope(r.loc_slope);
  j["scale_slope"] = slope(r.scale_slope);
  j["loc_significant_positive"] = r.loc_significant_positive;
  j["scale_significant_positive"] = r.scale_significant_positive;
  j["converged"] = r.converged;
  if (r.ls_fit) j["ls_fit"] = fit_report(*r.ls_fit, 0.0);
  return j;
}

ordered_json batch_report(const BatchSummary& s) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["alpha"] = s.alpha;
  j["min_k"] = s.min_k;
  j["n_total"] = s.n_total;
  j["n_analyzed"] = s.n_analyzed;
  j["n_skipped"] = s.n_skipped;
  auto metric = [&](int count) {
    ordered_json m;
    m["count"] = count;
    m["percent"] = s.percent(count);
    return m;
  };
  j["egger_positive"] = metric(s.egger_positive);
  j["ls_loc_positive"] = metric(s.ls_loc_positive);
  j["ls_scale_positive"] = metric(s.ls_scale_positive);
  j["non_converged"] = s.non_converged;
  j["per_meta"] = ordered_json::array();
  for (const auto& r : s.per_meta) {
    ordered_json m;
    m["file"] = r.file;
    m["k"] = r.k;
    m["skipped"] = r.skipped;
    if (r.skipped) {
      m["skip_reason"] = r.skip_reason;
    } else {
      m["egger_p"] = num_or_null(r.egger_p);
      m["loc_beta"] = num_or_null(r.loc_beta);
      m["loc_p"] = num_or_null(r.loc_p);
      m["scale_gamma"] = num_or_null(r.scale_gamma);
      m["scale_p"] = num_or_null(r.scale_p);
      m["converged"] = r.converged;
    }
    j["per_meta"].push_back(m);
  }
  return j;
}

}  // namespace distma
