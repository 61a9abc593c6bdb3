#pragma once

#include <optional>

#include "distma/data.hpp"
#include "distma/fit.hpp"

namespace distma {

// Classic Egger regression: WLS of the effect on its standard error,
// weights 1/v, slope tested on t with k-2 degrees of freedom.
struct EggerResult {
  double intercept = 0.0;
  double slope = 0.0;
  double slope_se = 0.0;
  double t_stat = 0.0;
  int df = 0;
  double p = 1.0;
  int k = 0;
};

EggerResult egger_test(const EffectTable& table);

struct SlopeTest {
  double estimate = 0.0;
  double se = 0.0;
  double z = 0.0;
  double p = 1.0;
};

// Joint small-study analysis: location-scale model with se as the sole
// moderator of both the mean and the log heterogeneity.
struct SmallStudyResult {
  EggerResult egger;
  std::optional<FitResult> ls_fit;
  SlopeTest loc_slope;
  SlopeTest scale_slope;
  bool loc_significant_positive = false;
  bool scale_significant_positive = false;
  bool converged = false;
  double alpha = 0.05;
};

SmallStudyResult small_study_analysis(const EffectTable& table,
                                      double alpha = 0.05);

struct PerMetaRow {
  std::string file;
  int k = 0;
  bool skipped = false;
  std::string skip_reason;
  double egger_p = std::numeric_limits<double>::quiet_NaN();
  bool egger_positive = false;
  double loc_beta = std::numeric_limits<double>::quiet_NaN();
  double loc_p = std::numeric_limits<double>::quiet_NaN();
  double scale_gamma = std::numeric_limits<double>::quiet_NaN();
  double scale_p = std::numeric_limits<double>::quiet_NaN();
  bool loc_positive = false;
  bool scale_positive = false;
  bool converged = false;
};

struct BatchSummary {
  int n_total = 0;
  int n_analyzed = 0;
  int n_skipped = 0;
  int egger_positive = 0;
  int ls_loc_positive = 0;
  int ls_scale_positive = 0;
  int non_converged = 0;
  double alpha = 0.05;
  int min_k = 5;
  std::vector<PerMetaRow> per_meta;  // ordered by filename

  double percent(int count) const;  // 100*count/n_analyzed, 1 decimal
};

// Runs the pipeline over every *.csv in dir; parse failures and
// too-small tables become skips with reasons. Deterministic in the
// worker count.
BatchSummary batch_run(const std::string& dir, double alpha = 0.05,
                       int min_k = 5, int workers = 1);

std::string batch_summary_csv(const BatchSummary& s);
std::string batch_per_meta_csv(const BatchSummary& s);

}  // namespace distma
