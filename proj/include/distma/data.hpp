#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace distma {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Family {
  normal_re,
  normal_metareg,
  location_scale,
  multilevel3,
  multivariate,
  glmm_binomial,
  glmm_poisson,
  robust_t,
  robust_skew_t,
  robust_beta,
  robust_mixture,
};

enum class Method { ml, reml };

std::string family_name(Family f);
Family family_from_name(const std::string& name);
std::vector<std::string> family_names();

// A moderator column: numeric, or categorical with a sorted level list.
struct ModeratorColumn {
  std::string name;
  bool numeric = true;
  std::vector<double> num;
  std::vector<std::string> cat;
  std::vector<std::string> levels;  // sorted distinct values (categorical)
};

// Rectangular effect-size dataset. Optional columns are empty when absent.
// se is converted to v at load; internal code works in variances.
struct EffectTable {
  std::vector<double> y;
  std::vector<double> v;
  std::vector<std::string> study;
  std::vector<std::string> cluster;
  std::vector<std::string> outcome;
  std::vector<double> events, trials, count, exposure;
  std::vector<ModeratorColumn> moderators;

  int n() const { return static_cast<int>(study.size()); }
  int k() const;  // number of distinct study ids
  std::vector<double> se() const;
  const ModeratorColumn* find_moderator(const std::string& name) const;
};

// Bare term list: intercept flag + moderator names. Categorical terms are
// dummy-expanded against the lexicographically first level.
struct Formula {
  bool intercept = true;
  std::vector<std::string> terms;
};

// Parses "1 + a + b" / "-1 + a" / "a + b" (implicit intercept).
Formula parse_formula(const std::string& text);
std::string format_formula(const Formula& f);

struct ModelSpec {
  Family family = Family::normal_re;
  Formula loc_formula;                   // intercept-only by default
  std::optional<Formula> scale_formula;  // location_scale only
  Method method = Method::ml;
  bool scale_random_effect = false;  // location_scale only
  double sampling_cor = 0.5;         // multivariate imputation constant
  int quad_nodes = 0;                // 0 = family default (21; 35 robust)
  int mixture_g = 2;                 // robust_mixture component count

  int effective_quad_nodes() const;
};

struct DesignMatrix {
  Eigen::MatrixXd X;
  std::vector<std::string> column_names;
};

// CSV ingestion. Recognized roles (case-sensitive header names unless
// overridden): y, v, se, study, cluster, outcome, events, trials, count,
// exposure; every other column is a moderator.
EffectTable load_csv(const std::string& path,
                     const std::map<std::string, std::string>& overrides = {});
EffectTable parse_csv_text(const std::string& text,
                           const std::map<std::string, std::string>& overrides = {});
void write_csv(const EffectTable& table, const std::string& path);
std::string format_csv(const EffectTable& table);

// Builds the design for a formula. The term name "se" resolves to sqrt(v)
// when no moderator of that name exists. Throws on rank deficiency,
// naming the collinear columns.
DesignMatrix build_design(const EffectTable& table, const Formula& formula);

// Frozen model input: table + spec + designs + grouping indices.
struct CheckedInput {
  EffectTable table;
  ModelSpec spec;
  DesignMatrix X_loc;    // per-row location design
  DesignMatrix X_scale;  // location_scale only

  std::vector<std::string> study_levels;       // first-appearance order
  std::vector<int> study_index;                // per row
  std::vector<std::vector<int>> study_rows;    // rows per study
  std::vector<std::string> cluster_levels;     // multilevel3
  std::vector<std::vector<int>> cluster_rows;
  std::vector<int> cluster_of_row;
  std::vector<std::string> outcome_levels;     // multivariate, sorted
  std::vector<int> outcome_index;              // per row

  int n_outcomes() const { return static_cast<int>(outcome_levels.size()); }
};

// Family-specific checks and the minimum-rows rule
// (rows >= fixed coefficients + variance/shape parameters).
CheckedInput validate(const EffectTable& table, const ModelSpec& spec);

// Free-parameter count for the family (ML counting; REML criteria count
// only the variance/shape block).
int free_param_count(const CheckedInput& bundle);
int variance_param_count(const CheckedInput& bundle);

}  // namespace distma
