#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "jmbma/basis.hpp"
#include "jmbma/data.hpp"
#include "jmbma/errors.hpp"
#include "jmbma/quadrature.hpp"

namespace jmbma {

// Density of the lag-weight function used by the weighted cumulative
// association, evaluated at lag u >= 0.
inline double weight_density(const WeightFnSpec& wf, double u) {
    const double z = u / wf.scale;
    switch (wf.kind) {
        case WeightKind::normal:
            return std::exp(-0.5 * z * z) / (wf.scale * std::sqrt(2.0 * M_PI));
        case WeightKind::student_t: {
            const double v = wf.df;
            const double lognorm = std::lgamma(0.5 * (v + 1.0)) - std::lgamma(0.5 * v) -
                                   0.5 * std::log(v * M_PI);
            return std::exp(lognorm - 0.5 * (v + 1.0) * std::log1p(z * z / v)) / wf.scale;
        }
        case WeightKind::logistic: {
            const double e = std::exp(-std::abs(z));
            return e / ((1.0 + e) * (1.0 + e)) / wf.scale;
        }
    }
    return 0.0;
}

// Map a covariate name from a model config to encoded w column indices:
// a numeric column maps to itself, a categorical column to all of its dummy
// columns, and an encoded dummy name ("col.level") to that single column.
inline std::vector<int> resolve_covariate_columns(const Dataset& ds, const std::string& name) {
    if (const FactorEncoding* fe = ds.factor(name)) return fe->dummy_cols;
    return {ds.covariate_index(name)};
}

// Fixed/random design construction and subject trajectory evaluation for the
// linear mixed submodel. The trajectory is
//   m(t) = x(t,w)' beta + z(t)' b
// with x built from an intercept (or group cell means), a time basis, basis
// by group interactions, and additive extra covariates; z is an intercept
// plus the leading time-basis columns.
class LongitudinalModel {
public:
    LongitudinalModel(const Dataset& ds, const JointModelSpec& spec) {
        const LongitudinalDesign& ld = spec.longitudinal;
        lo_ = 0.0;
        hi_ = ds.max_event_time();
        if (ld.boundary) {
            lo_ = ld.boundary->first;
            hi_ = ld.boundary->second;
        }
        if (!(hi_ > lo_)) throw ConfigError("time basis boundary is degenerate");
        tb_ = ld.time_basis;
        if (tb_ == TimeBasis::natural_cubic) {
            ns_.emplace(lo_, hi_, ld.internal_knots);
            n_basis_ = ns_->size();
            split_knots_ = ld.internal_knots;
        } else if (tb_ == TimeBasis::linear) {
            n_basis_ = 1;
        } else {
            n_basis_ = 0;
        }
        const int k = ld.random_time_columns < 0 ? n_basis_ : ld.random_time_columns;
        if (k > n_basis_)
            throw ConfigError("random_time_columns exceeds the number of time-basis columns");
        n_re_ = 1 + k;

        if (!ld.group.empty()) {
            const FactorEncoding* fe = ds.factor(ld.group);
            if (!fe)
                throw ConfigError("longitudinal group '" + ld.group +
                                  "' is not a declared categorical column");
            group_ = *fe;
        }
        for (const auto& name : ld.extra_covariates)
            for (int c : resolve_covariate_columns(ds, name)) {
                extra_cols_.push_back(c);
                extra_names_.push_back(ds.covariate_names[c]);
            }

        if (group_) {
            const int g = static_cast<int>(group_->levels.size());
            for (int j = 0; j < g; ++j)
                names_.push_back(group_->column + "." + group_->levels[j]);
            for (int q = 1; q <= n_basis_; ++q)
                for (int j = 0; j < g; ++j)
                    names_.push_back(basis_name(q) + ":" + group_->column + "." +
                                     group_->levels[j]);
        } else {
            names_.push_back("(Intercept)");
            for (int q = 1; q <= n_basis_; ++q) names_.push_back(basis_name(q));
        }
        for (const auto& n : extra_names_) names_.push_back(n);
    }

    int n_beta() const { return static_cast<int>(names_.size()); }
    int n_re() const { return n_re_; }
    TimeBasis time_basis() const { return tb_; }
    double boundary_low() const { return lo_; }
    double boundary_high() const { return hi_; }
    const std::vector<std::string>& beta_names() const { return names_; }

    Eigen::VectorXd basis_row(double t) const {
        switch (tb_) {
            case TimeBasis::natural_cubic: return ns_->eval_all(t);
            case TimeBasis::linear: return Eigen::VectorXd::Constant(1, t);
            case TimeBasis::none: return Eigen::VectorXd(0);
        }
        return Eigen::VectorXd(0);
    }

    Eigen::VectorXd basis_row_deriv(double t) const {
        switch (tb_) {
            case TimeBasis::natural_cubic: return ns_->eval_all_derivative(t, 1);
            case TimeBasis::linear: return Eigen::VectorXd::Constant(1, 1.0);
            case TimeBasis::none: return Eigen::VectorXd(0);
        }
        return Eigen::VectorXd(0);
    }

    // x(t, w) assembled from basis values `bv`, with `const_part` standing in
    // for the value of the constant function (1 for evaluation, 0 for time
    // derivatives, t for running integrals).
    Eigen::VectorXd assemble_x(const Eigen::VectorXd& bv, double const_part,
                               const Eigen::VectorXd& w) const {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(n_beta());
        int pos = 0;
        if (group_) {
            const Eigen::VectorXd ind = group_indicators(w);
            const int g = static_cast<int>(group_->levels.size());
            for (int j = 0; j < g; ++j) x[pos++] = const_part * ind[j];
            for (int q = 0; q < n_basis_; ++q)
                for (int j = 0; j < g; ++j) x[pos++] = bv[q] * ind[j];
        } else {
            x[pos++] = const_part;
            for (int q = 0; q < n_basis_; ++q) x[pos++] = bv[q];
        }
        for (int c : extra_cols_) x[pos++] = const_part * w[c];
        return x;
    }

    Eigen::VectorXd assemble_z(const Eigen::VectorXd& bv, double const_part) const {
        Eigen::VectorXd z(n_re_);
        z[0] = const_part;
        for (int q = 1; q < n_re_; ++q) z[q] = bv[q - 1];
        return z;
    }

    Eigen::VectorXd design_x(double t, const Eigen::VectorXd& w) const {
        return assemble_x(basis_row(t), 1.0, w);
    }
    Eigen::VectorXd design_x_deriv(double t, const Eigen::VectorXd& w) const {
        return assemble_x(basis_row_deriv(t), 0.0, w);
    }
    Eigen::VectorXd design_z(double t) const { return assemble_z(basis_row(t), 1.0); }
    Eigen::VectorXd design_z_deriv(double t) const { return assemble_z(basis_row_deriv(t), 0.0); }

    // Running integrals over [0, t] of each design column, computed segment
    // by segment between internal knots so piecewise-polynomial bases
    // integrate exactly.
    Eigen::VectorXd design_x_integral(double t, const Eigen::VectorXd& w) const {
        return assemble_x(basis_integral(t), t, w);
    }
    Eigen::VectorXd design_z_integral(double t) const {
        return assemble_z(basis_integral(t), t);
    }

    // Weighted running integrals: column-wise \int_0^t omega(t_outer - s) col(s) ds.
    Eigen::VectorXd design_x_weighted_integral(double t, const Eigen::VectorXd& w,
                                               const WeightFnSpec& wf) const {
        auto [bv, c] = weighted_basis_integral(t, wf);
        return assemble_x(bv, c, w);
    }
    Eigen::VectorXd design_z_weighted_integral(double t, const WeightFnSpec& wf) const {
        auto [bv, c] = weighted_basis_integral(t, wf);
        return assemble_z(bv, c);
    }

    double m(double t, const Eigen::VectorXd& w, const Eigen::VectorXd& beta,
             const Eigen::VectorXd& b) const {
        check_dims(beta, b);
        return design_x(t, w).dot(beta) + design_z(t).dot(b);
    }
    double m_deriv(double t, const Eigen::VectorXd& w, const Eigen::VectorXd& beta,
                   const Eigen::VectorXd& b) const {
        check_dims(beta, b);
        return design_x_deriv(t, w).dot(beta) + design_z_deriv(t).dot(b);
    }
    double m_integral(double t, const Eigen::VectorXd& w, const Eigen::VectorXd& beta,
                      const Eigen::VectorXd& b) const {
        check_dims(beta, b);
        return design_x_integral(t, w).dot(beta) + design_z_integral(t).dot(b);
    }

    // Segment boundaries of [0, t] split at internal knots, for callers that
    // integrate hazards containing this trajectory.
    std::vector<double> segments(double t) const {
        std::vector<double> cuts{0.0};
        for (double k : split_knots_)
            if (k > 0.0 && k < t) cuts.push_back(k);
        cuts.push_back(t);
        return cuts;
    }

private:
    std::string basis_name(int q) const {
        return tb_ == TimeBasis::linear ? "time" : "time" + std::to_string(q);
    }

    void check_dims(const Eigen::VectorXd& beta, const Eigen::VectorXd& b) const {
        if (beta.size() != n_beta())
            throw SpecError("beta has dimension " + std::to_string(beta.size()) + ", design has " +
                            std::to_string(n_beta()));
        if (b.size() != n_re_)
            throw SpecError("b has dimension " + std::to_string(b.size()) + ", design has " +
                            std::to_string(n_re_));
    }

    Eigen::VectorXd group_indicators(const Eigen::VectorXd& w) const {
        const int g = static_cast<int>(group_->levels.size());
        Eigen::VectorXd ind = Eigen::VectorXd::Zero(g);
        double sum = 0.0;
        int dummy = 0;
        for (int j = 0; j < g; ++j) {
            if (j == group_->reference) continue;
            ind[j] = w[group_->dummy_cols[dummy++]];
            sum += ind[j];
        }
        ind[group_->reference] = 1.0 - sum;
        return ind;
    }

    Eigen::VectorXd basis_integral(double t) const {
        if (n_basis_ == 0) return Eigen::VectorXd(0);
        if (tb_ == TimeBasis::linear) return Eigen::VectorXd::Constant(1, 0.5 * t * t);
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(n_basis_);
        const auto cuts = segments(t);
        const auto& rule = QuadratureRule::gk15();
        for (size_t s = 0; s + 1 < cuts.size(); ++s) {
            const double mid = 0.5 * (cuts[s] + cuts[s + 1]);
            const double half = 0.5 * (cuts[s + 1] - cuts[s]);
            for (int k = 0; k < 15; ++k)
                acc += half * rule.weights[k] * ns_->eval_all(mid + half * rule.nodes[k]);
        }
        return acc;
    }

    // Returns the weighted integral of each basis column and of the constant
    // column over [0, t] with weight omega(t - s).
    std::pair<Eigen::VectorXd, double> weighted_basis_integral(double t,
                                                               const WeightFnSpec& wf) const {
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(n_basis_);
        double cacc = 0.0;
        const auto cuts = segments(t);
        const auto& rule = QuadratureRule::gk15();
        for (size_t s = 0; s + 1 < cuts.size(); ++s) {
            const double mid = 0.5 * (cuts[s] + cuts[s + 1]);
            const double half = 0.5 * (cuts[s + 1] - cuts[s]);
            for (int k = 0; k < 15; ++k) {
                const double u = mid + half * rule.nodes[k];
                const double wgt = half * rule.weights[k] * weight_density(wf, t - u);
                cacc += wgt;
                if (n_basis_ > 0 && tb_ == TimeBasis::natural_cubic)
                    acc += wgt * ns_->eval_all(u);
                else if (tb_ == TimeBasis::linear)
                    acc[0] += wgt * u;
            }
        }
        return {acc, cacc};
    }

    TimeBasis tb_ = TimeBasis::natural_cubic;
    std::optional<NaturalCubicBasis> ns_;
    std::vector<double> split_knots_;
    double lo_ = 0.0, hi_ = 1.0;
    int n_basis_ = 0;
    int n_re_ = 1;
    std::optional<FactorEncoding> group_;
    std::vector<int> extra_cols_;
    std::vector<std::string> extra_names_;
    std::vector<std::string> names_;
};

}  // namespace jmbma
