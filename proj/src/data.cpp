#include "distma/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace distma {

namespace {

const std::vector<std::pair<std::string, Family>>& family_table() {
  static const std::vector<std::pair<std::string, Family>> t = {
      {"normal_re", Family::normal_re},
      {"normal_metareg", Family::normal_metareg},
      {"location_scale", Family::location_scale},
      {"multilevel3", Family::multilevel3},
      {"multivariate", Family::multivariate},
      {"glmm_binomial", Family::glmm_binomial},
      {"glmm_poisson", Family::glmm_poisson},
      {"robust_t", Family::robust_t},
      {"robust_skew_t", Family::robust_skew_t},
      {"robust_beta", Family::robust_beta},
      {"robust_mixture", Family::robust_mixture},
  };
  return t;
}

}  // namespace

std::string family_name(Family f) {
  for (const auto& [name, fam] : family_table())
    if (fam == f) return name;
  return "?";
}

Family family_from_name(const std::string& name) {
  for (const auto& [n, fam] : family_table())
    if (n == name) return fam;
  std::ostringstream msg;
  msg << "unknown family '" << name << "'; valid families:";
  for (const auto& [n, fam] : family_table()) msg << " " << n;
  throw DataError(msg.str());
}

std::vector<std::string> family_names() {
  std::vector<std::string> out;
  for (const auto& [n, fam] : family_table()) out.push_back(n);
  return out;
}

int EffectTable::k() const {
  std::set<std::string> ids(study.begin(), study.end());
  return static_cast<int>(ids.size());
}

std::vector<double> EffectTable::se() const {
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = std::sqrt(v[i]);
  return out;
}

const ModeratorColumn* EffectTable::find_moderator(const std::string& name) const {
  for (const auto& m : moderators)
    if (m.name == name) return &m;
  return nullptr;
}

int ModelSpec::effective_quad_nodes() const {
  if (quad_nodes > 0) return quad_nodes;
  switch (family) {
    case Family::robust_t:
    case Family::robust_skew_t:
    case Family::robust_beta:
    case Family::robust_mixture:
      return 35;
    default:
      return 21;
  }
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

bool parse_double(const std::string& s, double* out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size()) return false;
  *out = v;
  return true;
}

}  // namespace

Formula parse_formula(const std::string& text) {
  Formula f;
  f.intercept = true;
  for (auto& piece : split(text, '+')) {
    const std::string t = trim(piece);
    if (t.empty()) continue;
    if (t == "1") {
      f.intercept = true;
    } else if (t == "-1") {
      f.intercept = false;
    } else {
      f.terms.push_back(t);
    }
  }
  return f;
}

std::string format_formula(const Formula& f) {
  std::string out = f.intercept ? "1" : "-1";
  for (const auto& t : f.terms) out += " + " + t;
  return out;
}

EffectTable parse_csv_text(const std::string& text,
                           const std::map<std::string, std::string>& overrides) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty CSV input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header = split(line, ',');
  for (auto& h : header) h = trim(h);

  static const std::vector<std::string> roles = {
      "y", "v", "se", "study", "cluster", "outcome",
      "events", "trials", "count", "exposure"};
  // role -> column index
  std::unordered_map<std::string, int> role_col;
  std::unordered_map<std::string, std::string> header_for_role;
  for (const auto& r : roles) header_for_role[r] = r;
  for (const auto& [role, name] : overrides) {
    if (std::find(roles.begin(), roles.end(), role) == roles.end())
      throw DataError("unknown column role override '" + role + "'");
    header_for_role[role] = name;
  }
  std::unordered_set<int> claimed;
  for (const auto& r : roles) {
    auto it = std::find(header.begin(), header.end(), header_for_role[r]);
    if (it != header.end()) {
      const int idx = static_cast<int>(it - header.begin());
      role_col[r] = idx;
      claimed.insert(idx);
    }
  }
  const bool has_y = role_col.count("y");
  const bool has_v = role_col.count("v");
  const bool has_se = role_col.count("se");
  const bool has_binomial = role_col.count("events") && role_col.count("trials");
  const bool has_poisson = role_col.count("count") && role_col.count("exposure");
  if (has_v && has_se)
    throw DataError("exactly one of {v, se} may be supplied, found both");
  if (!(has_y && (has_v || has_se)) && !has_binomial && !has_poisson)
    throw DataError(
        "missing required columns: need y with v or se (or events/trials, "
        "or count/exposure)");

  // Collect raw cells.
  std::vector<std::vector<std::string>> cells;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto row = split(line, ',');
    if (row.size() != header.size()) {
      std::ostringstream msg;
      msg << "line " << lineno << ": expected " << header.size()
          << " fields, got " << row.size();
      throw DataError(msg.str());
    }
    cells.push_back(std::move(row));
  }
  if (cells.empty()) throw DataError("CSV has no data rows");
  const int n = static_cast<int>(cells.size());

  EffectTable t;
  auto numeric_col = [&](const std::string& role, bool required_positive,
                         bool allow_zero) {
    std::vector<double> out(n);
    const int c = role_col.at(role);
    for (int i = 0; i < n; ++i) {
      double val;
      if (!parse_double(cells[i][c], &val))
        throw DataError("non-numeric value '" + trim(cells[i][c]) +
                        "' in column '" + header[c] + "'");
      if (required_positive && (val < 0.0 || (!allow_zero && val <= 0.0)))
        throw DataError("nonpositive sampling error in column '" + header[c] +
                        "'");
      out[i] = val;
    }
    return out;
  };

  if (has_y) t.y = numeric_col("y", false, true);
  if (has_v) t.v = numeric_col("v", true, false);
  if (has_se) {
    t.v = numeric_col("se", true, false);
    for (auto& x : t.v) x = x * x;
  }
  if (role_col.count("events")) t.events = numeric_col("events", false, true);
  if (role_col.count("trials")) t.trials = numeric_col("trials", false, true);
  if (role_col.count("count")) t.count = numeric_col("count", false, true);
  if (role_col.count("exposure")) t.exposure = numeric_col("exposure", false, true);
  if (!t.events.empty() && !t.trials.empty()) {
    for (int i = 0; i < n; ++i) {
      if (t.events[i] < 0 || t.trials[i] <= 0)
        throw DataError("events must be >= 0 and trials > 0");
      if (t.events[i] > t.trials[i])
        throw DataError("events > trials at data row " + std::to_string(i + 1));
    }
  }

  auto string_col = [&](const std::string& role) {
    std::vector<std::string> out(n);
    const int c = role_col.at(role);
    for (int i = 0; i < n; ++i) out[i] = trim(cells[i][c]);
    return out;
  };
  if (role_col.count("study")) {
    t.study = string_col("study");
  } else {
    t.study.resize(n);
    for (int i = 0; i < n; ++i) t.study[i] = "s" + std::to_string(i + 1);
  }
  if (role_col.count("cluster")) t.cluster = string_col("cluster");
  if (role_col.count("outcome")) t.outcome = string_col("outcome");

  // Remaining columns are moderators; categorical when any cell is
  // non-numeric. Missing cells are an error.
  for (size_t c = 0; c < header.size(); ++c) {
    if (claimed.count(static_cast<int>(c))) continue;
    ModeratorColumn m;
    m.name = header[c];
    m.numeric = true;
    std::vector<double> nums(n);
    for (int i = 0; i < n; ++i) {
      const std::string cell = trim(cells[i][c]);
      if (cell.empty())
        throw DataError("missing value for moderator '" + m.name +
                        "' at data row " + std::to_string(i + 1));
      if (!parse_double(cell, &nums[i])) {
        m.numeric = false;
        break;
      }
    }
    if (m.numeric) {
      m.num = std::move(nums);
    } else {
      m.cat.resize(n);
      std::set<std::string> levels;
      for (int i = 0; i < n; ++i) {
        m.cat[i] = trim(cells[i][c]);
        if (m.cat[i].empty())
          throw DataError("missing value for moderator '" + m.name +
                          "' at data row " + std::to_string(i + 1));
        levels.insert(m.cat[i]);
      }
      m.levels.assign(levels.begin(), levels.end());
    }
    t.moderators.push_back(std::move(m));
  }
  return t;
}

EffectTable load_csv(const std::string& path,
                     const std::map<std::string, std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv_text(ss.str(), overrides);
}

namespace {

std::string num_str(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

std::string format_csv(const EffectTable& t) {
  const int n = t.n();
  std::ostringstream out;
  std::vector<std::string> cols;
  if (!t.y.empty()) cols.push_back("y");
  if (!t.v.empty()) cols.push_back("v");
  cols.push_back("study");
  if (!t.cluster.empty()) cols.push_back("cluster");
  if (!t.outcome.empty()) cols.push_back("outcome");
  if (!t.events.empty()) cols.push_back("events");
  if (!t.trials.empty()) cols.push_back("trials");
  if (!t.count.empty()) cols.push_back("count");
  if (!t.exposure.empty()) cols.push_back("exposure");
  for (const auto& m : t.moderators) cols.push_back(m.name);
  for (size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << cols[c];
  out << "\n";
  for (int i = 0; i < n; ++i) {
    bool first = true;
    auto emit = [&](const std::string& s) {
      out << (first ? "" : ",") << s;
      first = false;
    };
    if (!t.y.empty()) emit(num_str(t.y[i]));
    if (!t.v.empty()) emit(num_str(t.v[i]));
    emit(t.study[i]);
    if (!t.cluster.empty()) emit(t.cluster[i]);
    if (!t.outcome.empty()) emit(t.outcome[i]);
    if (!t.events.empty()) emit(num_str(t.events[i]));
    if (!t.trials.empty()) emit(num_str(t.trials[i]));
    if (!t.count.empty()) emit(num_str(t.count[i]));
    if (!t.exposure.empty()) emit(num_str(t.exposure[i]));
    for (const auto& m : t.moderators)
      emit(m.numeric ? num_str(m.num[i]) : m.cat[i]);
    out << "\n";
  }
  return out.str();
}

void write_csv(const EffectTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << format_csv(table);
}

DesignMatrix build_design(const EffectTable& table, const Formula& formula) {
  const int n = table.n();
  std::vector<std::string> names;
  std::vector<Eigen::VectorXd> cols;
  if (formula.intercept) {
    names.push_back("(Intercept)");
    cols.push_back(Eigen::VectorXd::Ones(n));
  }
  for (const auto& term : formula.terms) {
    const ModeratorColumn* m = table.find_moderator(term);
    if (m == nullptr && term == "se" && !table.v.empty()) {
      Eigen::VectorXd c(n);
      for (int i = 0; i < n; ++i) c[i] = std::sqrt(table.v[i]);
      names.push_back("se");
      cols.push_back(std::move(c));
      continue;
    }
    if (m == nullptr)
      throw DataError("formula term '" + term + "' is not a moderator column");
    if (m->numeric) {
      names.push_back(term);
      cols.push_back(Eigen::Map<const Eigen::VectorXd>(m->num.data(), n));
    } else {
      // Dummy coding: reference = first level in sorted order.
      for (size_t l = 1; l < m->levels.size(); ++l) {
        Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
        for (int i = 0; i < n; ++i)
          if (m->cat[i] == m->levels[l]) c[i] = 1.0;
        names.push_back(term + "=" + m->levels[l]);
        cols.push_back(std::move(c));
      }
    }
  }
  if (cols.empty()) throw DataError("empty design (no intercept and no terms)");
  DesignMatrix d;
  d.column_names = names;
  d.X.resize(n, static_cast<long>(cols.size()));
  for (size_t c = 0; c < cols.size(); ++c) d.X.col(static_cast<long>(c)) = cols[c];

  // Rank via pivoted QR, relative pivot tolerance 1e-10.
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(d.X);
  qr.setThreshold(1e-10);
  if (qr.rank() < d.X.cols()) {
    const auto perm = qr.colsPermutation().indices();
    std::ostringstream msg;
    msg << "design matrix is rank deficient (rank " << qr.rank() << " of "
        << d.X.cols() << "); collinear columns involve:";
    for (long i = qr.rank(); i < d.X.cols(); ++i)
      msg << " '" << names[perm[i]] << "'";
    throw DataError(msg.str());
  }
  return d;
}

namespace {

void index_groups(const std::vector<std::string>& ids,
                  std::vector<std::string>* levels, std::vector<int>* index,
                  std::vector<std::vector<int>>* rows) {
  std::unordered_map<std::string, int> pos;
  levels->clear();
  index->resize(ids.size());
  rows->clear();
  for (size_t i = 0; i < ids.size(); ++i) {
    auto it = pos.find(ids[i]);
    int g;
    if (it == pos.end()) {
      g = static_cast<int>(levels->size());
      pos.emplace(ids[i], g);
      levels->push_back(ids[i]);
      rows->emplace_back();
    } else {
      g = it->second;
    }
    (*index)[i] = g;
    (*rows)[g].push_back(static_cast<int>(i));
  }
}

}  // namespace

int variance_param_count(const CheckedInput& b) {
  switch (b.spec.family) {
    case Family::normal_re:
    case Family::normal_metareg:
    case Family::glmm_binomial:
    case Family::glmm_poisson:
      return 1;
    case Family::location_scale: {
      int q = static_cast<int>(b.X_scale.X.cols());
      if (b.spec.scale_random_effect) ++q;
      return q;
    }
    case Family::multilevel3:
      return 3;
    case Family::multivariate: {
      const int l = b.n_outcomes();
      return l * (l + 1) / 2;
    }
    case Family::robust_t:
      return 2;  // tau2, nu
    case Family::robust_skew_t:
      return 3;  // tau2, nu, gamma
    case Family::robust_beta:
      return 1;  // beta_tau2 (beta_mu is the location)
    case Family::robust_mixture: {
      const int g = b.spec.mixture_g;
      return (g - 1) + g;  // weights + component variances
    }
  }
  return 0;
}

int free_param_count(const CheckedInput& b) {
  switch (b.spec.family) {
    case Family::multivariate:
      return b.n_outcomes() * static_cast<int>(b.X_loc.X.cols()) +
             variance_param_count(b);
    case Family::robust_beta:
      return 2;
    case Family::robust_mixture:
      return 3 * b.spec.mixture_g - 1;
    default:
      return static_cast<int>(b.X_loc.X.cols()) + variance_param_count(b);
  }
}

CheckedInput validate(const EffectTable& table, const ModelSpec& spec) {
  CheckedInput b;
  b.table = table;
  b.spec = spec;
  const int n = table.n();
  if (n < 1) throw DataError("empty table");

  const bool normal_y = spec.family != Family::glmm_binomial &&
                        spec.family != Family::glmm_poisson;
  if (normal_y) {
    if (table.y.empty() || table.v.empty())
      throw DataError("family " + family_name(spec.family) +
                      " requires y and v (or se) columns");
    for (int i = 0; i < n; ++i)
      if (!(table.v[i] > 0.0))
        throw DataError("sampling variance must be positive for family " +
                        family_name(spec.family));
  }
  if (spec.family == Family::glmm_binomial &&
      (table.events.empty() || table.trials.empty()))
    throw DataError("glmm_binomial requires events and trials columns");
  if (spec.family == Family::glmm_poisson &&
      (table.count.empty() || table.exposure.empty()))
    throw DataError("glmm_poisson requires count and exposure columns");
  if (spec.family == Family::glmm_poisson)
    for (int i = 0; i < n; ++i)
      if (!(table.exposure[i] > 0.0))
        throw DataError("exposure must be positive");
  if (spec.family == Family::multilevel3 && table.cluster.empty())
    throw DataError("multilevel3 requires a cluster column");
  if (spec.family == Family::multivariate && table.outcome.empty())
    throw DataError("multivariate requires an outcome column");
  if (spec.family == Family::location_scale && !spec.scale_formula)
    throw DataError("location_scale requires a scale formula");
  if (spec.scale_formula && spec.family != Family::location_scale)
    throw DataError("scale formula is only valid for location_scale");
  if (spec.method == Method::reml) {
    const bool ok = spec.family == Family::normal_re ||
                    spec.family == Family::normal_metareg ||
                    spec.family == Family::multilevel3 ||
                    spec.family == Family::multivariate;
    if (!ok)
      throw DataError("reml is only valid for normal marginal families "
                      "(normal_re, normal_metareg, multilevel3, multivariate)");
  }
  if (spec.family == Family::robust_mixture && spec.mixture_g < 2)
    throw DataError("mixture needs G >= 2 components");
  if (!(spec.sampling_cor > -1.0 && spec.sampling_cor < 1.0))
    throw DataError("sampling correlation must lie in (-1, 1)");

  switch (spec.family) {
    case Family::robust_t:
    case Family::robust_skew_t:
    case Family::robust_beta:
    case Family::robust_mixture:
      if (!spec.loc_formula.terms.empty())
        throw DataError("robust families support an intercept-only location "
                        "formula");
      if (table.k() != n)
        throw DataError("robust families require one effect per study");
      break;
    default:
      break;
  }

  b.X_loc = build_design(table, spec.loc_formula);
  if (spec.family == Family::location_scale)
    b.X_scale = build_design(table, *spec.scale_formula);

  index_groups(table.study, &b.study_levels, &b.study_index, &b.study_rows);
  if (!table.cluster.empty()) {
    std::vector<int> idx;
    index_groups(table.cluster, &b.cluster_levels, &idx, &b.cluster_rows);
    b.cluster_of_row = idx;
  }
  if (spec.family == Family::multivariate) {
    std::set<std::string> levels(table.outcome.begin(), table.outcome.end());
    b.outcome_levels.assign(levels.begin(), levels.end());
    b.outcome_index.resize(n);
    for (int i = 0; i < n; ++i) {
      auto it = std::lower_bound(b.outcome_levels.begin(),
                                 b.outcome_levels.end(), table.outcome[i]);
      b.outcome_index[i] = static_cast<int>(it - b.outcome_levels.begin());
    }
    // outcome_id values within a study must be distinct
    for (size_t s = 0; s < b.study_rows.size(); ++s) {
      std::set<int> seen;
      for (int r : b.study_rows[s]) {
        if (!seen.insert(b.outcome_index[r]).second)
          throw DataError("study '" + b.study_levels[s] +
                          "' has a duplicated outcome_id");
      }
    }
  }

  // glmm rows aggregate many trials/units, so a single row can identify the
  // fixed part; tau2 then lands on the boundary with a warning rather than
  // being rejected up front.
  const bool glmm = spec.family == Family::glmm_binomial ||
                    spec.family == Family::glmm_poisson;
  const int q = glmm ? static_cast<int>(b.X_loc.X.cols()) : free_param_count(b);
  if (n < q) {
    std::ostringstream msg;
    msg << "insufficient rows: n = " << n << " < " << q
        << " free parameters for family " << family_name(spec.family);
    throw DataError(msg.str());
  }
  return b;
}

}  // namespace distma
