// distma: distributional-regression meta-analysis CLI.
#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "distma/data.hpp"
#include "distma/fit.hpp"
#include "distma/report.hpp"
#include "distma/simulate.hpp"
#include "distma/small_study.hpp"

using namespace distma;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitWarnings = 2;

void emit(const nlohmann::ordered_json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write " + out_path);
    out << j.dump(2) << "\n";
  }
}

int worker_cap(int requested) {
  if (const char* env = std::getenv("DISTMA_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) return std::min(requested, cap);
  }
  return requested;
}

struct FitArgs {
  std::string data, loc = "1", scale, method = "ml", out;
  std::string family = "normal_re";
  double sampling_cor = 0.5;
  int quad_nodes = 0;
  int mixture_g = 2;
  bool scale_re = false;
};

int run_fit(const FitArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const EffectTable table = load_csv(a.data);
  ModelSpec spec;
  spec.family = family_from_name(a.family);
  spec.loc_formula = parse_formula(a.loc);
  if (!a.scale.empty()) spec.scale_formula = parse_formula(a.scale);
  if (spec.family == Family::location_scale && !spec.scale_formula)
    spec.scale_formula = parse_formula("1");
  if (a.method == "ml") spec.method = Method::ml;
  else if (a.method == "reml") spec.method = Method::reml;
  else throw DataError("method must be ml or reml");
  spec.sampling_cor = a.sampling_cor;
  spec.quad_nodes = a.quad_nodes;
  spec.mixture_g = a.mixture_g;
  spec.scale_random_effect = a.scale_re;

  const CheckedInput bundle = validate(table, spec);
  const FitResult res = fit(bundle);
  const double secs = std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
  emit(fit_report(res, secs), a.out);
  return res.converged ? kExitOk : kExitWarnings;
}

struct SimArgs {
  std::string family = "normal_re", out;
  int k = 10, n_per_study = 1, studies_per_cluster = 2;
  uint64_t seed = 1;
  double mu = 0.0, tau2 = 0.1;
  double beta1 = 0.0;  // location slope on se
  double gamma0 = -3.0, gamma1 = 0.0, tau2_scale_re = 0.0;
  double tau2_u = 0.0, tau2_v = 0.0, tau2_w = 0.1;
  double nu = 5.0, skew = 1.0;
  double beta_mu = 0.5, beta_tau2 = 0.03;
  std::vector<double> weights, means, vars;
  std::vector<double> mv_mu, mv_tau2;
  double mv_rho = 0.5, within_cor = 0.3;
  double trials = 50.0, exposure = 10.0;
  double v_lo = 0.01, v_hi = 0.1;
  bool draw_se = false;
};

int run_simulate(const SimArgs& a) {
  if (a.k <= 0) throw DataError("--k must be positive");
  SimScenario s;
  s.family = family_from_name(a.family);
  s.k = a.k;
  s.n_per_study = a.n_per_study;
  s.studies_per_cluster = a.studies_per_cluster;
  s.seed = a.seed;
  s.v_lo = a.v_lo;
  s.v_hi = a.v_hi;
  s.draw_se = a.draw_se;
  s.trials = a.trials;
  s.exposure = a.exposure;
  s.within_cor = a.within_cor;

  NaturalParams& p = s.truth;
  p.tau2 = a.tau2;
  switch (s.family) {
    case Family::location_scale:
      p.beta_loc.resize(2);
      p.beta_loc << a.mu, a.beta1;
      p.beta_scale.resize(2);
      p.beta_scale << a.gamma0, a.gamma1;
      p.tau2_scale_re = a.tau2_scale_re;
      break;
    case Family::multilevel3:
      p.beta_loc = Eigen::VectorXd::Constant(1, a.mu);
      p.tau2_u = a.tau2_u;
      p.tau2_v = a.tau2_v;
      p.tau2_w = a.tau2_w;
      break;
    case Family::multivariate: {
      const std::vector<double> mus = a.mv_mu.empty()
                                          ? std::vector<double>{0.2, 0.4}
                                          : a.mv_mu;
      const std::vector<double> t2 = a.mv_tau2.empty()
                                         ? std::vector<double>(mus.size(), 0.04)
                                         : a.mv_tau2;
      const int l = static_cast<int>(mus.size());
      p.beta_loc = Eigen::Map<const Eigen::VectorXd>(mus.data(), l);
      p.T.resize(l, l);
      for (int i = 0; i < l; ++i)
        for (int j = 0; j < l; ++j)
          p.T(i, j) = (i == j ? t2[i]
                              : a.mv_rho * std::sqrt(t2[i] * t2[j]));
      break;
    }
    case Family::robust_mixture: {
      std::vector<double> w = a.weights.empty() ? std::vector<double>{0.5, 0.5}
                                                : a.weights;
      std::vector<double> m = a.means.empty() ? std::vector<double>{0.0, 0.5}
                                              : a.means;
      std::vector<double> v = a.vars.empty()
                                  ? std::vector<double>(w.size(), 0.02)
                                  : a.vars;
      if (w.size() != m.size() || w.size() != v.size())
        throw DataError("--weights/--means/--vars lengths differ");
      p.mixture.resize(w.size());
      for (size_t i = 0; i < w.size(); ++i)
        p.mixture[i] = {w[i], m[i], v[i]};
      break;
    }
    case Family::robust_beta:
      p.beta_mu = a.beta_mu;
      p.beta_tau2 = a.beta_tau2;
      break;
    default:
      p.beta_loc = Eigen::VectorXd::Constant(1, a.mu);
      p.nu = a.nu;
      p.skew_gamma = a.skew;
      break;
  }
  const EffectTable t = simulate_table(s);
  if (a.out.empty())
    std::cout << format_csv(t);
  else
    write_csv(t, a.out);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distributional-regression meta-analysis engine"};
  app.require_subcommand(1);

  FitArgs fa;
  auto* cmd_fit = app.add_subcommand("fit", "fit a model to a CSV dataset");
  cmd_fit->add_option("--data", fa.data, "input CSV")->required();
  cmd_fit->add_option("--family", fa.family, "model family");
  cmd_fit->add_option("--loc", fa.loc, "location formula, e.g. \"1 + se\"");
  cmd_fit->add_option("--scale", fa.scale, "scale formula (location_scale)");
  cmd_fit->add_option("--method", fa.method, "ml or reml");
  cmd_fit->add_option("--sampling-cor", fa.sampling_cor,
                      "imputed sampling correlation (multivariate)");
  cmd_fit->add_option("--quad-nodes", fa.quad_nodes, "quadrature node count");
  cmd_fit->add_option("--mixture-g", fa.mixture_g, "mixture component count");
  cmd_fit->add_flag("--scale-random-effect", fa.scale_re,
                    "scale random effect (location_scale)");
  cmd_fit->add_option("--out", fa.out, "report JSON path (default stdout)");

  std::string eg_data, eg_out;
  auto* cmd_egger = app.add_subcommand("egger", "classic Egger regression");
  cmd_egger->add_option("--data", eg_data, "input CSV")->required();
  cmd_egger->add_option("--out", eg_out, "report JSON path");

  std::string ss_data, ss_out;
  double ss_alpha = 0.05;
  auto* cmd_ss = app.add_subcommand("small-study",
                                    "joint location-scale small-study test");
  cmd_ss->add_option("--data", ss_data, "input CSV")->required();
  cmd_ss->add_option("--alpha", ss_alpha, "significance level");
  cmd_ss->add_option("--out", ss_out, "report JSON path");

  std::string b_dir, b_prefix = "batch";
  double b_alpha = 0.05;
  int b_min_k = 5, b_workers = 1;
  auto* cmd_batch = app.add_subcommand("batch",
                                       "run the pipeline over a directory");
  cmd_batch->add_option("--dir", b_dir, "directory of CSVs")->required();
  cmd_batch->add_option("--alpha", b_alpha, "significance level");
  cmd_batch->add_option("--min-k", b_min_k, "minimum studies per meta");
  cmd_batch->add_option("--out-prefix", b_prefix, "output file prefix");
  cmd_batch->add_option("--workers", b_workers, "worker threads");

  SimArgs sa;
  auto* cmd_sim = app.add_subcommand("simulate", "generate a dataset");
  cmd_sim->add_option("--family", sa.family, "model family");
  cmd_sim->add_option("--k", sa.k, "number of studies");
  cmd_sim->add_option("--seed", sa.seed, "RNG seed");
  cmd_sim->add_option("--n-per-study", sa.n_per_study, "rows per study");
  cmd_sim->add_option("--studies-per-cluster", sa.studies_per_cluster,
                      "multilevel cluster size");
  cmd_sim->add_option("--mu", sa.mu, "true mean / location");
  cmd_sim->add_option("--tau2", sa.tau2, "true between-study variance");
  cmd_sim->add_option("--beta1", sa.beta1, "location slope on se");
  cmd_sim->add_option("--gamma0", sa.gamma0, "scale intercept (log tau2)");
  cmd_sim->add_option("--gamma1", sa.gamma1, "scale slope on se");
  cmd_sim->add_option("--tau2-scale-re", sa.tau2_scale_re,
                      "scale random-effect variance");
  cmd_sim->add_option("--tau2-u", sa.tau2_u, "cluster-level variance");
  cmd_sim->add_option("--tau2-v", sa.tau2_v, "study-level variance");
  cmd_sim->add_option("--tau2-w", sa.tau2_w, "effect-level variance");
  cmd_sim->add_option("--nu", sa.nu, "t degrees of freedom");
  cmd_sim->add_option("--skew", sa.skew, "two-piece skewness");
  cmd_sim->add_option("--beta-mu", sa.beta_mu, "beta RE mean");
  cmd_sim->add_option("--beta-tau2", sa.beta_tau2, "beta RE variance");
  cmd_sim->add_option("--weights", sa.weights, "mixture weights");
  cmd_sim->add_option("--means", sa.means, "mixture means");
  cmd_sim->add_option("--vars", sa.vars, "mixture variances");
  cmd_sim->add_option("--mv-mu", sa.mv_mu, "multivariate outcome means");
  cmd_sim->add_option("--mv-tau2", sa.mv_tau2, "multivariate variances");
  cmd_sim->add_option("--mv-rho", sa.mv_rho, "between-study correlation");
  cmd_sim->add_option("--within-cor", sa.within_cor,
                      "true within-study sampling correlation");
  cmd_sim->add_option("--trials", sa.trials, "binomial trials");
  cmd_sim->add_option("--exposure", sa.exposure, "poisson exposure");
  cmd_sim->add_option("--v-lo", sa.v_lo, "sampling-variance lower bound");
  cmd_sim->add_option("--v-hi", sa.v_hi, "sampling-variance upper bound");
  cmd_sim->add_flag("--draw-se", sa.draw_se,
                    "interpret --v-lo/--v-hi as se bounds");
  cmd_sim->add_option("--out", sa.out, "output CSV path (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_fit->parsed()) return run_fit(fa);
    if (cmd_egger->parsed()) {
      const EffectTable t = load_csv(eg_data);
      emit(egger_report(egger_test(t)), eg_out);
      return kExitOk;
    }
    if (cmd_ss->parsed()) {
      const EffectTable t = load_csv(ss_data);
      const SmallStudyResult r = small_study_analysis(t, ss_alpha);
      emit(small_study_report(r), ss_out);
      return r.converged ? kExitOk : kExitWarnings;
    }
    if (cmd_batch->parsed()) {
      const BatchSummary s =
          batch_run(b_dir, b_alpha, b_min_k, worker_cap(b_workers));
      {
        std::ofstream out(b_prefix + "_summary.csv");
        out << batch_summary_csv(s);
      }
      {
        std::ofstream out(b_prefix + "_per_meta.csv");
        out << batch_per_meta_csv(s);
      }
      {
        std::ofstream out(b_prefix + "_summary.json");
        out << batch_report(s).dump(2) << "\n";
      }
      return kExitOk;
    }
    if (cmd_sim->parsed()) return run_simulate(sa);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
