#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "jmbma/basis.hpp"
#include "jmbma/errors.hpp"
#include "jmbma/text.hpp"

namespace jmbma {

// ---------------------------------------------------------------------------
// Core data records
// ---------------------------------------------------------------------------

struct Subject {
    std::string id;
    Eigen::VectorXd w;           // encoded baseline covariates
    std::vector<double> times;   // measurement times, strictly increasing, <= T
    std::vector<double> y;       // biomarker values on the stored (transformed) scale
    double T = 0.0;              // observed event or censoring time
    int delta = 0;               // 1 = event, 0 = censored
};

// Encoding record for one categorical covariate: which columns of w hold its
// dummy indicators (reference level omitted).
struct FactorEncoding {
    std::string column;
    std::vector<std::string> levels;  // sorted unique levels
    int reference = 0;                // index into levels
    std::vector<int> dummy_cols;      // w columns for non-reference levels, level order
};

struct Dataset {
    std::vector<Subject> subjects;
    std::vector<std::string> covariate_names;  // names of w columns
    std::vector<FactorEncoding> factors;
    std::string transform = "identity";  // scale of stored y values

    double max_event_time() const {
        double m = 0.0;
        for (const auto& s : subjects) m = std::max(m, s.T);
        return m;
    }
    int n_events() const {
        int n = 0;
        for (const auto& s : subjects) n += s.delta;
        return n;
    }
    int covariate_index(const std::string& name) const {
        for (size_t i = 0; i < covariate_names.size(); ++i)
            if (covariate_names[i] == name) return static_cast<int>(i);
        throw ConfigError("unknown covariate column '" + name + "'");
    }
    const FactorEncoding* factor(const std::string& column) const {
        for (const auto& f : factors)
            if (f.column == column) return &f;
        return nullptr;
    }
};

struct ValidationReport {
    int n_subjects = 0;
    int n_measurements = 0;
    int n_events = 0;
    int n_censored = 0;
    std::vector<std::string> violations;
    std::vector<std::string> warnings;
    bool ok() const { return violations.empty(); }
};

inline ValidationReport validate(const Dataset& ds) {
    ValidationReport r;
    r.n_subjects = static_cast<int>(ds.subjects.size());
    if (ds.subjects.empty()) r.warnings.push_back("dataset is empty");
    std::set<std::string> seen;
    for (const auto& s : ds.subjects) {
        if (!seen.insert(s.id).second)
            r.violations.push_back("duplicate subject id '" + s.id + "'");
        r.n_measurements += static_cast<int>(s.times.size());
        if (s.delta == 1)
            ++r.n_events;
        else if (s.delta == 0)
            ++r.n_censored;
        else
            r.violations.push_back("subject '" + s.id + "': event indicator not in {0,1}");
        if (s.times.empty() || s.times.size() != s.y.size())
            r.violations.push_back("subject '" + s.id + "': measurement lists empty or mismatched");
        for (size_t l = 0; l < s.times.size(); ++l) {
            if (l > 0 && !(s.times[l] > s.times[l - 1]))
                r.violations.push_back("subject '" + s.id + "': times not strictly increasing");
            if (s.times[l] > s.T)
                r.violations.push_back("subject '" + s.id + "': measurement after event time");
        }
        if (s.w.size() != static_cast<Eigen::Index>(ds.covariate_names.size()))
            r.violations.push_back("subject '" + s.id + "': covariate dimension mismatch");
        for (Eigen::Index k = 0; k < s.w.size(); ++k)
            if (!std::isfinite(s.w[k])) {
                r.violations.push_back("subject '" + s.id + "': non-finite covariate");
                break;
            }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Model specification
// ---------------------------------------------------------------------------

enum class Association { value, value_slope, cumulative, weighted_cumulative, random_effects };
enum class BaselineKind { bspline_log_hazard, weibull };
enum class WeightKind { normal, student_t, logistic };
enum class TimeBasis { none, linear, natural_cubic };

inline std::string to_string(Association a) {
    switch (a) {
        case Association::value: return "value";
        case Association::value_slope: return "value_slope";
        case Association::cumulative: return "cumulative";
        case Association::weighted_cumulative: return "weighted_cumulative";
        case Association::random_effects: return "random_effects";
    }
    return "?";
}

inline Association association_from_string(const std::string& s) {
    if (s == "value") return Association::value;
    if (s == "value_slope") return Association::value_slope;
    if (s == "cumulative") return Association::cumulative;
    if (s == "weighted_cumulative") return Association::weighted_cumulative;
    if (s == "random_effects") return Association::random_effects;
    throw ConfigError("unknown association '" + s + "'");
}

struct PriorSpec {
    double beta_sd = 100.0;
    double gamma_sd = 100.0;
    double gamma_h0_sd = 10.0;
    double alpha_sd = 100.0;
    double sigma2_shape = 0.01;
    double sigma2_rate = 0.01;
    double wishart_df = 0.0;          // 0 = dim(b) + 2
    double wishart_scale_diag = 1.0;  // scale matrix = diag * I

    void validate() const {
        if (beta_sd <= 0 || gamma_sd <= 0 || gamma_h0_sd <= 0 || alpha_sd <= 0)
            throw ConfigError("prior sds must be positive");
        if (sigma2_shape <= 0 || sigma2_rate <= 0)
            throw ConfigError("sigma2 prior shape/rate must be positive");
        if (wishart_scale_diag <= 0) throw ConfigError("wishart scale must be positive");
    }
};

struct WeightFnSpec {
    WeightKind kind = WeightKind::normal;
    double scale = 1.0;
    double df = 4.0;  // student_t only
};

struct LongitudinalDesign {
    TimeBasis time_basis = TimeBasis::natural_cubic;
    std::vector<double> internal_knots;
    std::optional<std::pair<double, double>> boundary;  // default [0, max T]
    std::string group;                                  // optional categorical column
    std::vector<std::string> extra_covariates;
    int random_time_columns = -1;  // -1 = all time-basis columns
};

struct SurvivalDesignSpec {
    std::vector<std::string> covariates;  // names in the data (pre-encoding)
};

struct BaselineSpec {
    BaselineKind kind = BaselineKind::bspline_log_hazard;
    int degree = 3;
    int n_internal = -1;  // -1 = events-based rule of thumb
    std::vector<double> internal_knots;  // explicit placement overrides n_internal
};

struct JointModelSpec {
    std::string transform = "identity";
    LongitudinalDesign longitudinal;
    SurvivalDesignSpec survival;
    Association assoc = Association::value;
    std::optional<WeightFnSpec> weight_fn;
    BaselineSpec baseline;
    std::map<std::string, std::string> categorical;  // column -> reference level
    PriorSpec priors;

    void validate() const {
        priors.validate();
        if (transform != "identity" && transform != "sqrt")
            throw ConfigError("unknown transform '" + transform + "'");
        if (assoc == Association::weighted_cumulative && !weight_fn)
            throw ConfigError("weighted_cumulative association requires weight_fn");
        if (baseline.degree < 0) throw ConfigError("baseline degree must be >= 0");
        if (weight_fn) {
            if (weight_fn->scale <= 0) throw ConfigError("weight_fn scale must be positive");
            if (weight_fn->kind == WeightKind::student_t && weight_fn->df <= 0)
                throw ConfigError("weight_fn df must be positive");
        }
    }
};

// ---------------------------------------------------------------------------
// Model config JSON (strict: unknown keys rejected)
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

}  // namespace detail

inline JointModelSpec parse_model_config(const nlohmann::json& j) {
    using nlohmann::json;
    JointModelSpec spec;
    detail::check_keys(j,
                       {"transform", "longitudinal", "survival", "association", "weight_fn",
                        "baseline", "categorical", "priors"},
                       "config");
    spec.transform = j.value("transform", std::string("identity"));
    if (j.contains("longitudinal")) {
        const json& jl = j.at("longitudinal");
        detail::check_keys(jl,
                           {"time_basis", "internal_knots", "boundary", "group",
                            "extra_covariates", "random_time_columns"},
                           "longitudinal");
        const std::string tb = jl.value("time_basis", std::string("natural_cubic"));
        if (tb == "none")
            spec.longitudinal.time_basis = TimeBasis::none;
        else if (tb == "linear")
            spec.longitudinal.time_basis = TimeBasis::linear;
        else if (tb == "natural_cubic")
            spec.longitudinal.time_basis = TimeBasis::natural_cubic;
        else
            throw ConfigError("unknown time_basis '" + tb + "'");
        if (jl.contains("internal_knots"))
            spec.longitudinal.internal_knots = jl.at("internal_knots").get<std::vector<double>>();
        if (jl.contains("boundary")) {
            const auto b = jl.at("boundary").get<std::vector<double>>();
            if (b.size() != 2) throw ConfigError("boundary must have two entries");
            spec.longitudinal.boundary = {b[0], b[1]};
        }
        spec.longitudinal.group = jl.value("group", std::string());
        if (jl.contains("extra_covariates"))
            spec.longitudinal.extra_covariates =
                jl.at("extra_covariates").get<std::vector<std::string>>();
        spec.longitudinal.random_time_columns = jl.value("random_time_columns", -1);
    }
    if (j.contains("survival")) {
        const json& js = j.at("survival");
        detail::check_keys(js, {"covariates"}, "survival");
        if (js.contains("covariates"))
            spec.survival.covariates = js.at("covariates").get<std::vector<std::string>>();
    }
    if (j.contains("association"))
        spec.assoc = association_from_string(j.at("association").get<std::string>());
    if (j.contains("weight_fn")) {
        const json& jw = j.at("weight_fn");
        detail::check_keys(jw, {"kind", "scale", "df"}, "weight_fn");
        WeightFnSpec w;
        const std::string k = jw.value("kind", std::string("normal"));
        if (k == "normal")
            w.kind = WeightKind::normal;
        else if (k == "student_t")
            w.kind = WeightKind::student_t;
        else if (k == "logistic")
            w.kind = WeightKind::logistic;
        else
            throw ConfigError("unknown weight_fn kind '" + k + "'");
        w.scale = jw.value("scale", 1.0);
        w.df = jw.value("df", 4.0);
        spec.weight_fn = w;
    }
    if (j.contains("baseline")) {
        const json& jb = j.at("baseline");
        detail::check_keys(jb, {"kind", "degree", "n_internal", "internal_knots"}, "baseline");
        const std::string k = jb.value("kind", std::string("bspline_log_hazard"));
        if (k == "bspline_log_hazard")
            spec.baseline.kind = BaselineKind::bspline_log_hazard;
        else if (k == "weibull")
            spec.baseline.kind = BaselineKind::weibull;
        else
            throw ConfigError("unknown baseline kind '" + k + "'");
        spec.baseline.degree = jb.value("degree", 3);
        spec.baseline.n_internal = jb.value("n_internal", -1);
        if (jb.contains("internal_knots"))
            spec.baseline.internal_knots = jb.at("internal_knots").get<std::vector<double>>();
    }
    if (j.contains("categorical")) {
        const json& jc = j.at("categorical");
        if (!jc.is_object()) throw ConfigError("categorical: expected object of column->reference");
        for (auto it = jc.begin(); it != jc.end(); ++it)
            spec.categorical[it.key()] = it.value().get<std::string>();
    }
    if (j.contains("priors")) {
        const json& jp = j.at("priors");
        detail::check_keys(jp,
                           {"beta_sd", "gamma_sd", "gamma_h0_sd", "alpha_sd", "sigma2_shape",
                            "sigma2_rate", "wishart_df", "wishart_scale_diag"},
                           "priors");
        spec.priors.beta_sd = jp.value("beta_sd", spec.priors.beta_sd);
        spec.priors.gamma_sd = jp.value("gamma_sd", spec.priors.gamma_sd);
        spec.priors.gamma_h0_sd = jp.value("gamma_h0_sd", spec.priors.gamma_h0_sd);
        spec.priors.alpha_sd = jp.value("alpha_sd", spec.priors.alpha_sd);
        spec.priors.sigma2_shape = jp.value("sigma2_shape", spec.priors.sigma2_shape);
        spec.priors.sigma2_rate = jp.value("sigma2_rate", spec.priors.sigma2_rate);
        spec.priors.wishart_df = jp.value("wishart_df", spec.priors.wishart_df);
        spec.priors.wishart_scale_diag =
            jp.value("wishart_scale_diag", spec.priors.wishart_scale_diag);
    }
    spec.validate();
    return spec;
}

inline JointModelSpec load_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open model config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("invalid JSON in '" + path + "': " + e.what());
    }
    return parse_model_config(j);
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

struct LongRow {
    std::string id;
    double time = 0.0;
    double value = 0.0;
    std::vector<std::string> covs;
    size_t row = 0;  // 1-based file line
};

struct LongTable {
    std::vector<std::string> cov_names;
    std::vector<LongRow> rows;
};

struct SurvRow {
    std::string id;
    double event_time = 0.0;
    int delta = 0;
    std::vector<std::string> covs;
    size_t row = 0;
};

struct SurvTable {
    std::vector<std::string> cov_names;
    std::vector<SurvRow> rows;
};

namespace detail {

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open '" + path + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

inline int required_column(const std::vector<std::string>& header, const std::string& name,
                           const std::string& path) {
    for (size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    throw IngestError(path + ": missing required column '" + name + "'");
}

inline double numeric_cell(const std::string& cell, const std::string& what, size_t row,
                           const std::string& path) {
    double v;
    if (!parse_double(cell, v) || !std::isfinite(v))
        throw IngestError(path + ": row " + std::to_string(row) + ": non-numeric " + what + " '" +
                          cell + "'");
    return v;
}

}  // namespace detail

inline LongTable load_longitudinal_csv(const std::string& path) {
    const auto lines = detail::read_lines(path);
    if (lines.empty()) throw IngestError(path + ": empty file");
    const auto header = split_csv_line(lines[0]);
    const int c_id = detail::required_column(header, "id", path);
    const int c_time = detail::required_column(header, "time", path);
    const int c_value = detail::required_column(header, "value", path);
    LongTable table;
    std::vector<int> cov_idx;
    for (size_t i = 0; i < header.size(); ++i)
        if (static_cast<int>(i) != c_id && static_cast<int>(i) != c_time &&
            static_cast<int>(i) != c_value) {
            table.cov_names.push_back(header[i]);
            cov_idx.push_back(static_cast<int>(i));
        }
    std::set<std::pair<std::string, double>> seen;
    for (size_t r = 1; r < lines.size(); ++r) {
        if (lines[r].empty() || lines[r] == "\r") continue;
        const auto cells = split_csv_line(lines[r]);
        if (cells.size() != header.size())
            throw IngestError(path + ": row " + std::to_string(r + 1) + ": expected " +
                              std::to_string(header.size()) + " fields, got " +
                              std::to_string(cells.size()));
        LongRow row;
        row.row = r + 1;
        row.id = cells[c_id];
        if (row.id.empty())
            throw IngestError(path + ": row " + std::to_string(r + 1) + ": empty id");
        row.time = detail::numeric_cell(cells[c_time], "time", r + 1, path);
        row.value = detail::numeric_cell(cells[c_value], "value", r + 1, path);
        if (!seen.insert({row.id, row.time}).second)
            throw IngestError(path + ": row " + std::to_string(r + 1) + ": duplicate (id,time) (" +
                              row.id + "," + to_g17(row.time) + ")");
        for (int ci : cov_idx) row.covs.push_back(cells[ci]);
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline SurvTable load_survival_csv(const std::string& path) {
    const auto lines = detail::read_lines(path);
    if (lines.empty()) throw IngestError(path + ": empty file");
    const auto header = split_csv_line(lines[0]);
    const int c_id = detail::required_column(header, "id", path);
    const int c_t = detail::required_column(header, "event_time", path);
    const int c_d = detail::required_column(header, "event_indicator", path);
    SurvTable table;
    std::vector<int> cov_idx;
    for (size_t i = 0; i < header.size(); ++i)
        if (static_cast<int>(i) != c_id && static_cast<int>(i) != c_t &&
            static_cast<int>(i) != c_d) {
            table.cov_names.push_back(header[i]);
            cov_idx.push_back(static_cast<int>(i));
        }
    std::set<std::string> seen;
    for (size_t r = 1; r < lines.size(); ++r) {
        if (lines[r].empty() || lines[r] == "\r") continue;
        const auto cells = split_csv_line(lines[r]);
        if (cells.size() != header.size())
            throw IngestError(path + ": row " + std::to_string(r + 1) + ": expected " +
                              std::to_string(header.size()) + " fields, got " +
                              std::to_string(cells.size()));
        SurvRow row;
        row.row = r + 1;
        row.id = cells[c_id];
        if (!seen.insert(row.id).second)
            throw IngestError(path + ": row " + std::to_string(r + 1) + ": duplicate id '" +
                              row.id + "'");
        row.event_time = detail::numeric_cell(cells[c_t], "event_time", r + 1, path);
        if (!(row.event_time > 0.0))
            throw IngestError(path + ": row " + std::to_string(r + 1) +
                              ": event_time must be positive");
        const double d = detail::numeric_cell(cells[c_d], "event_indicator", r + 1, path);
        if (d != 0.0 && d != 1.0)
            throw IngestError(path + ": row " + std::to_string(r + 1) +
                              ": event_indicator must be 0 or 1");
        row.delta = static_cast<int>(d);
        for (int ci : cov_idx) row.covs.push_back(cells[ci]);
        table.rows.push_back(std::move(row));
    }
    return table;
}

// Merge the two tables into an encoded, transformed Dataset. Covariate
// columns come from the survival file first, then longitudinal-only extras;
// categorical columns (per spec.categorical) become reference-dropped dummy
// indicators with levels discovered from the data.
inline Dataset merge_dataset(const LongTable& lt, const SurvTable& st,
                             const JointModelSpec& spec) {
    Dataset ds;
    ds.transform = spec.transform;

    // join check
    std::set<std::string> long_ids, surv_ids;
    for (const auto& r : lt.rows) long_ids.insert(r.id);
    for (const auto& r : st.rows) surv_ids.insert(r.id);
    std::vector<std::string> missing;
    for (const auto& id : long_ids)
        if (!surv_ids.count(id)) missing.push_back(id);
    if (!missing.empty()) {
        std::string msg = "ids in longitudinal file but not survival file:";
        for (const auto& id : missing) msg += " " + id;
        throw IngestError(msg);
    }
    for (const auto& id : surv_ids)
        if (!long_ids.count(id)) missing.push_back(id);
    if (!missing.empty()) {
        std::string msg = "ids in survival file but not longitudinal file:";
        for (const auto& id : missing) msg += " " + id;
        throw IngestError(msg);
    }

    // covariate column order: survival file order, then longitudinal extras
    struct RawCol {
        std::string name;
        bool from_surv;
        int index;
    };
    std::vector<RawCol> raw_cols;
    for (size_t i = 0; i < st.cov_names.size(); ++i)
        raw_cols.push_back({st.cov_names[i], true, static_cast<int>(i)});
    for (size_t i = 0; i < lt.cov_names.size(); ++i) {
        bool dup = false;
        for (const auto& rc : raw_cols) dup = dup || rc.name == lt.cov_names[i];
        if (!dup) raw_cols.push_back({lt.cov_names[i], false, static_cast<int>(i)});
    }
    for (const auto& [col, ref] : spec.categorical) {
        bool found = false;
        for (const auto& rc : raw_cols) found = found || rc.name == col;
        if (!found) throw ConfigError("categorical column '" + col + "' not found in data");
    }

    // per-subject raw covariate values (constant within subject)
    std::map<std::string, std::vector<std::string>> raw_by_id;
    for (const auto& r : st.rows) {
        auto& vals = raw_by_id[r.id];
        vals.assign(raw_cols.size(), "");
        for (size_t c = 0; c < raw_cols.size(); ++c)
            if (raw_cols[c].from_surv) vals[c] = r.covs[raw_cols[c].index];
    }
    for (const auto& r : lt.rows) {
        auto& vals = raw_by_id[r.id];
        for (size_t c = 0; c < raw_cols.size(); ++c) {
            if (raw_cols[c].from_surv) continue;
            const std::string& cell = r.covs[raw_cols[c].index];
            if (vals[c].empty())
                vals[c] = cell;
            else if (vals[c] != cell)
                throw IngestError("subject '" + r.id + "': covariate '" + raw_cols[c].name +
                                  "' varies across longitudinal rows");
        }
    }

    // discover factor levels
    std::map<std::string, std::set<std::string>> level_sets;
    for (size_t c = 0; c < raw_cols.size(); ++c) {
        if (!spec.categorical.count(raw_cols[c].name)) continue;
        auto& ls = level_sets[raw_cols[c].name];
        for (const auto& [id, vals] : raw_by_id) ls.insert(vals[c]);
    }

    // encoded layout
    std::vector<int> numeric_col_of(raw_cols.size(), -1);
    for (size_t c = 0; c < raw_cols.size(); ++c) {
        const std::string& name = raw_cols[c].name;
        auto cat = spec.categorical.find(name);
        if (cat == spec.categorical.end()) {
            numeric_col_of[c] = static_cast<int>(ds.covariate_names.size());
            ds.covariate_names.push_back(name);
            continue;
        }
        FactorEncoding fe;
        fe.column = name;
        fe.levels.assign(level_sets[name].begin(), level_sets[name].end());
        fe.reference = -1;
        for (size_t l = 0; l < fe.levels.size(); ++l)
            if (fe.levels[l] == cat->second) fe.reference = static_cast<int>(l);
        if (fe.reference < 0)
            throw ConfigError("reference level '" + cat->second + "' for column '" + name +
                              "' not present in data");
        for (size_t l = 0; l < fe.levels.size(); ++l) {
            if (static_cast<int>(l) == fe.reference) continue;
            fe.dummy_cols.push_back(static_cast<int>(ds.covariate_names.size()));
            ds.covariate_names.push_back(name + "." + fe.levels[l]);
        }
        ds.factors.push_back(std::move(fe));
    }

    // group longitudinal rows per id
    std::map<std::string, std::vector<const LongRow*>> rows_by_id;
    for (const auto& r : lt.rows) rows_by_id[r.id].push_back(&r);

    for (const auto& sr : st.rows) {
        Subject s;
        s.id = sr.id;
        s.T = sr.event_time;
        s.delta = sr.delta;
        auto rows = rows_by_id.at(sr.id);
        std::sort(rows.begin(), rows.end(),
                  [](const LongRow* a, const LongRow* b) { return a->time < b->time; });
        for (const LongRow* r : rows) {
            if (r->time > s.T)
                throw IngestError("subject '" + s.id + "': measurement at t=" + to_g17(r->time) +
                                  " exceeds event time " + to_g17(s.T));
            if (r->time < 0.0)
                throw IngestError("subject '" + s.id + "': negative measurement time");
            s.times.push_back(r->time);
            s.y.push_back(spec.transform == "sqrt" ? std::sqrt(r->value) : r->value);
            if (spec.transform == "sqrt" && r->value < 0.0)
                throw IngestError("subject '" + s.id +
                                  "': negative value under square-root transform");
        }
        // encode covariates
        s.w = Eigen::VectorXd::Zero(ds.covariate_names.size());
        const auto& vals = raw_by_id.at(sr.id);
        size_t fe_idx = 0;
        for (size_t c = 0; c < raw_cols.size(); ++c) {
            if (numeric_col_of[c] >= 0) {
                double v;
                if (!parse_double(vals[c], v) || !std::isfinite(v))
                    throw IngestError("subject '" + s.id + "': non-numeric covariate '" +
                                      raw_cols[c].name + "' value '" + vals[c] + "'");
                s.w[numeric_col_of[c]] = v;
            } else {
                const FactorEncoding& fe = ds.factors[fe_idx++];
                int dummy = 0;
                for (size_t l = 0; l < fe.levels.size(); ++l) {
                    if (static_cast<int>(l) == fe.reference) continue;
                    if (vals[c] == fe.levels[l]) s.w[fe.dummy_cols[dummy]] = 1.0;
                    ++dummy;
                }
            }
        }
        ds.subjects.push_back(std::move(s));
    }
    const auto report = validate(ds);
    if (!report.ok()) {
        std::string msg = "merged dataset invalid:";
        for (const auto& v : report.violations) msg += "\n  " + v;
        throw IngestError(msg);
    }
    return ds;
}

inline Dataset load_dataset(const std::string& long_path, const std::string& surv_path,
                            const JointModelSpec& spec) {
    return merge_dataset(load_longitudinal_csv(long_path), load_survival_csv(surv_path), spec);
}

// Writers emit the stored (already transformed, already encoded) values, so a
// reload with transform=identity and no categorical map reproduces the
// Dataset exactly.
inline void write_longitudinal_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write '" + path + "'");
    out << "id,time,value";
    for (const auto& n : ds.covariate_names) out << "," << n;
    out << "\n";
    for (const auto& s : ds.subjects)
        for (size_t l = 0; l < s.times.size(); ++l) {
            out << s.id << "," << to_g17(s.times[l]) << "," << to_g17(s.y[l]);
            for (Eigen::Index k = 0; k < s.w.size(); ++k) out << "," << to_g17(s.w[k]);
            out << "\n";
        }
}

inline void write_survival_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write '" + path + "'");
    out << "id,event_time,event_indicator";
    for (const auto& n : ds.covariate_names) out << "," << n;
    out << "\n";
    for (const auto& s : ds.subjects) {
        out << s.id << "," << to_g17(s.T) << "," << s.delta;
        for (Eigen::Index k = 0; k < s.w.size(); ++k) out << "," << to_g17(s.w[k]);
        out << "\n";
    }
}

}  // namespace jmbma
