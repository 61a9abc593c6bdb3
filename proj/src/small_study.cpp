#include "distma/small_study.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <thread>

#include "distma/numerics.hpp"

namespace distma {

EggerResult egger_test(const EffectTable& t) {
  const int k = t.n();
  if (t.k() != k) throw DataError("egger_test requires one effect per study");
  const int kk = k;
  if (kk < 3) throw DataError("egger_test requires k >= 3");

  const std::vector<double> se = t.se();
  const double se_min = *std::min_element(se.begin(), se.end());
  const double se_max = *std::max_element(se.begin(), se.end());
  if (se_max - se_min < 1e-14 * std::max(1.0, se_max))
    throw DataError("no precision spread: all standard errors are equal");

  Eigen::MatrixXd X(kk, 2);
  Eigen::VectorXd y(kk), w(kk);
  for (int i = 0; i < kk; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = se[i];
    y[i] = t.y[i];
    w[i] = 1.0 / t.v[i];
  }
  const Eigen::MatrixXd A = X.transpose() * w.asDiagonal() * X;
  const Eigen::LLT<Eigen::MatrixXd> llt(A);
  const Eigen::VectorXd beta = llt.solve(X.transpose() * (w.asDiagonal() * y));
  const Eigen::VectorXd r = y - X * beta;
  double wrss = 0.0;
  for (int i = 0; i < kk; ++i) wrss += w[i] * r[i] * r[i];
  const double s2 = wrss / (kk - 2);
  const Eigen::MatrixXd Ainv =
      llt.solve(Eigen::MatrixXd::Identity(2, 2));

  EggerResult e;
  e.k = kk;
  e.df = kk - 2;
  e.intercept = beta[0];
  e.slope = beta[1];
  e.slope_se = std::sqrt(std::max(s2 * Ainv(1, 1), 0.0));

  // Degenerate zero-residual fits: an exact nonzero slope is reported as
  // p = 0, an exactly flat line as p = 1.
  const double yscale = std::max(1.0, y.cwiseAbs().maxCoeff());
  if (s2 <= 1e-28 * yscale * yscale) {
    if (std::abs(e.slope) <= 1e-12 * yscale) {
      e.t_stat = 0.0;
      e.p = 1.0;
    } else {
      e.t_stat = e.slope > 0 ? std::numeric_limits<double>::infinity()
                             : -std::numeric_limits<double>::infinity();
      e.p = 0.0;
    }
    return e;
  }
  e.t_stat = e.slope / e.slope_se;
  e.p = two_sided_p_t(e.t_stat, e.df);
  return e;
}

SmallStudyResult small_study_analysis(const EffectTable& table, double alpha) {
  SmallStudyResult r;
  r.alpha = alpha;
  const int k = table.n();
  if (table.k() != k)
    throw DataError("small_study_analysis requires one effect per study");
  if (k < 5) throw DataError("small_study_analysis requires k >= 5");

  r.egger = egger_test(table);

  ModelSpec spec;
  spec.family = Family::location_scale;
  spec.method = Method::ml;
  spec.loc_formula = parse_formula("1 + se");
  spec.scale_formula = parse_formula("1 + se");
  const CheckedInput bundle = validate(table, spec);
  try {
    FitResult f = fit(bundle);
    r.converged = f.converged;
    const CoefRow* loc = f.find_coef("se");
    const CoefRow* sc = f.find_coef("scale:se");
    // Wald z with a t reference on the residual df (k minus the four model
    // parameters); the asymptotic normal reference is too liberal at the
    // small k this pipeline routinely sees.
    const int t_df = std::max(1, k - 4);
    auto slope_test = [&](const CoefRow* row) {
      SlopeTest s{row->estimate, row->se, row->z, row->p};
      if (row->se_valid) s.p = two_sided_p_t(row->z, t_df);
      return s;
    };
    if (loc) r.loc_slope = slope_test(loc);
    if (sc) r.scale_slope = slope_test(sc);
    if (f.converged) {
      r.loc_significant_positive =
          r.loc_slope.p < alpha && r.loc_slope.estimate > 0.0;
      r.scale_significant_positive =
          r.scale_slope.p < alpha && r.scale_slope.estimate > 0.0;
    }
    r.ls_fit = std::move(f);
  } catch (const std::exception&) {
    r.converged = false;  // counted, never significant
  }
  return r;
}

double BatchSummary::percent(int count) const {
  if (n_analyzed == 0) return 0.0;
  return std::round(1000.0 * count / n_analyzed) / 10.0;
}

BatchSummary batch_run(const std::string& dir, double alpha, int min_k,
                       int workers) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& ent : fs::directory_iterator(dir))
    if (ent.is_regular_file() && ent.path().extension() == ".csv")
      files.push_back(ent.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no CSV files in directory: " + dir);

  BatchSummary out;
  out.alpha = alpha;
  out.min_k = min_k;
  out.n_total = static_cast<int>(files.size());
  out.per_meta.resize(files.size());

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= files.size()) return;
      PerMetaRow row;
      row.file = fs::path(files[i]).filename().string();
      try {
        const EffectTable t = load_csv(files[i]);
        row.k = t.n();
        if (t.k() != t.n())
          throw DataError("multiple effects per study");
        if (row.k < min_k) {
          row.skipped = true;
          row.skip_reason =
              "k < " + std::to_string(min_k);
        } else {
          const SmallStudyResult r = small_study_analysis(t, alpha);
          row.egger_p = r.egger.p;
          row.egger_positive = r.egger.p < alpha && r.egger.slope > 0.0;
          row.loc_beta = r.loc_slope.estimate;
          row.loc_p = r.loc_slope.p;
          row.scale_gamma = r.scale_slope.estimate;
          row.scale_p = r.scale_slope.p;
          row.loc_positive = r.loc_significant_positive;
          row.scale_positive = r.scale_significant_positive;
          row.converged = r.converged;
        }
      } catch (const std::exception& e) {
        row.skipped = true;
        row.skip_reason = e.what();
      }
      out.per_meta[i] = std::move(row);
    }
  };
  workers = std::max(1, workers);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  for (const auto& row : out.per_meta) {
    if (row.skipped) {
      ++out.n_skipped;
      continue;
    }
    ++out.n_analyzed;
    if (row.egger_positive) ++out.egger_positive;
    if (row.loc_positive) ++out.ls_loc_positive;
    if (row.scale_positive) ++out.ls_scale_positive;
    if (!row.converged) ++out.non_converged;
  }
  return out;
}

namespace {

std::string pct_str(double pct) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", pct);
  return buf;
}

std::string num_or_na(double x) {
  if (std::isnan(x)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", x);
  return buf;
}

}  // namespace

std::string batch_summary_csv(const BatchSummary& s) {
  std::ostringstream out;
  out << "metric,count,percent\n";
  out << "total," << s.n_total << ",\n";
  out << "analyzed," << s.n_analyzed << ",\n";
  out << "skipped," << s.n_skipped << ",\n";
  out << "egger_positive," << s.egger_positive << ","
      << pct_str(s.percent(s.egger_positive)) << "\n";
  out << "ls_loc_positive," << s.ls_loc_positive << ","
      << pct_str(s.percent(s.ls_loc_positive)) << "\n";
  out << "ls_scale_positive," << s.ls_scale_positive << ","
      << pct_str(s.percent(s.ls_scale_positive)) << "\n";
  out << "non_converged," << s.non_converged << ",\n";
  return out.str();
}

std::string batch_per_meta_csv(const BatchSummary& s) {
  std::ostringstream out;
  out << "file,k,egger_p,loc_beta,loc_p,scale_gamma,scale_p,converged,"
         "skipped_reason\n";
  for (const auto& r : s.per_meta) {
    out << r.file << "," << r.k << "," << num_or_na(r.egger_p) << ","
        << num_or_na(r.loc_beta) << "," << num_or_na(r.loc_p) << ","
        << num_or_na(r.scale_gamma) << "," << num_or_na(r.scale_p) << ","
        << (r.skipped ? "" : (r.converged ? "true" : "false")) << ","
        << r.skip_reason << "\n";
  }
  return out.str();
}

}  // namespace distma
