#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "jmbma/basis.hpp"
#include "jmbma/data.hpp"
#include "jmbma/errors.hpp"
#include "jmbma/longitudinal.hpp"
#include "jmbma/quadrature.hpp"
#include "jmbma/text.hpp"

namespace jmbma {

struct SurvParams {
    Eigen::VectorXd gamma;     // coefficients of the encoded baseline covariates
    Eigen::VectorXd gamma_h0;  // [intercept, spline coefficients] of log h0 (spline baseline)
    Eigen::VectorXd alpha;     // association coefficients
    double weibull_shape = 1.0;
};

inline int alpha_length(Association a, int n_re) {
    switch (a) {
        case Association::value: return 1;
        case Association::value_slope: return 2;
        case Association::cumulative: return 1;
        case Association::weighted_cumulative: return 1;
        case Association::random_effects: return n_re;
    }
    return 1;
}

// The relative-risk submodel joined to a longitudinal design. The
// association term is linear in (beta, b) for every structure:
//   f(t) = AX(t) beta + AZ(t) b
// with structure-specific design rows AX (n_alpha x p) and AZ (n_alpha x q),
// which downstream code caches at fixed quadrature nodes.
class JointModel {
public:
    JointModel(const Dataset& ds, const JointModelSpec& spec)
        : spec_(spec), lm_(ds, spec), assoc_(spec.assoc) {
        for (const auto& name : spec.survival.covariates)
            for (int c : resolve_covariate_columns(ds, name)) {
                gamma_cols_.push_back(c);
                gamma_names_.push_back(ds.covariate_names[c]);
            }
        if (spec.baseline.kind == BaselineKind::bspline_log_hazard) {
            KnotVector kv;
            kv.degree = spec.baseline.degree;
            kv.boundary_low = 0.0;
            kv.boundary_high = ds.max_event_time();
            if (!(kv.boundary_high > 0.0)) kv.boundary_high = 1.0;
            if (!spec.baseline.internal_knots.empty()) {
                kv.internal = spec.baseline.internal_knots;
            } else {
                kv.internal = baseline_percentile_knots(ds, kv);
            }
            baseline_.emplace(kv);
            for (double k : kv.internal) baseline_knots_.push_back(k);
        }
        if (spec.assoc == Association::weighted_cumulative) wf_ = *spec.weight_fn;
    }

    const LongitudinalModel& longitudinal() const { return lm_; }
    const JointModelSpec& spec() const { return spec_; }
    Association assoc() const { return assoc_; }
    BaselineKind baseline_kind() const { return spec_.baseline.kind; }
    int n_beta() const { return lm_.n_beta(); }
    int n_re() const { return lm_.n_re(); }
    int n_alpha() const { return alpha_length(assoc_, lm_.n_re()); }
    int n_gamma() const { return static_cast<int>(gamma_cols_.size()); }
    // scalar parameters of the baseline hazard (spline coefficients + intercept,
    // or the weibull shape)
    int n_baseline() const {
        return baseline_ ? 1 + baseline_->size() : 1;
    }
    const std::vector<int>& gamma_cols() const { return gamma_cols_; }
    const std::vector<std::string>& gamma_names() const { return gamma_names_; }
    const BSplineBasis* baseline_basis() const { return baseline_ ? &*baseline_ : nullptr; }

    void check_params(const SurvParams& sp) const {
        if (sp.gamma.size() != n_gamma())
            throw SpecError("gamma has dimension " + std::to_string(sp.gamma.size()) +
                            ", design has " + std::to_string(n_gamma()));
        if (sp.alpha.size() != n_alpha())
            throw SpecError("alpha has dimension " + std::to_string(sp.alpha.size()) +
                            ", association needs " + std::to_string(n_alpha()));
        if (baseline_ && sp.gamma_h0.size() != 1 + baseline_->size())
            throw SpecError("gamma_h0 has dimension " + std::to_string(sp.gamma_h0.size()) +
                            ", baseline needs " + std::to_string(1 + baseline_->size()));
        if (!baseline_ && !(sp.weibull_shape > 0.0))
            throw SpecError("weibull shape must be positive");
    }

    // Row [1, B_1(t), ..., B_Q(t)] multiplying gamma_h0; empty for weibull.
    Eigen::VectorXd baseline_row(double t) const {
        if (!baseline_) return Eigen::VectorXd(0);
        Eigen::VectorXd r(1 + baseline_->size());
        r[0] = 1.0;
        r.tail(baseline_->size()) = baseline_->eval_all(std::min(t, cap_time()));
        return r;
    }

    double log_baseline_hazard(double t, const SurvParams& sp) const {
        if (baseline_) return baseline_row(t).dot(sp.gamma_h0);
        const double s = sp.weibull_shape;
        if (t == 0.0 && s < 1.0)
            throw NumericError("weibull baseline hazard is singular at t=0 for shape < 1");
        if (t == 0.0) return s > 1.0 ? neg_inf_local() : std::log(s);
        return std::log(s) + (s - 1.0) * std::log(t);
    }

    // Structure-specific design rows of the association term at time t.
    void assoc_design(double t, const Eigen::VectorXd& w, Eigen::MatrixXd& AX,
                      Eigen::MatrixXd& AZ) const {
        const int p = lm_.n_beta();
        const int q = lm_.n_re();
        switch (assoc_) {
            case Association::value:
                AX.resize(1, p);
                AZ.resize(1, q);
                AX.row(0) = lm_.design_x(t, w).transpose();
                AZ.row(0) = lm_.design_z(t).transpose();
                return;
            case Association::value_slope:
                AX.resize(2, p);
                AZ.resize(2, q);
                AX.row(0) = lm_.design_x(t, w).transpose();
                AZ.row(0) = lm_.design_z(t).transpose();
                AX.row(1) = lm_.design_x_deriv(t, w).transpose();
                AZ.row(1) = lm_.design_z_deriv(t).transpose();
                return;
            case Association::cumulative:
                AX.resize(1, p);
                AZ.resize(1, q);
                AX.row(0) = lm_.design_x_integral(t, w).transpose();
                AZ.row(0) = lm_.design_z_integral(t).transpose();
                return;
            case Association::weighted_cumulative:
                AX.resize(1, p);
                AZ.resize(1, q);
                AX.row(0) = lm_.design_x_weighted_integral(t, w, wf_).transpose();
                AZ.row(0) = lm_.design_z_weighted_integral(t, wf_).transpose();
                return;
            case Association::random_effects:
                AX = Eigen::MatrixXd::Zero(q, p);
                AZ = Eigen::MatrixXd::Identity(q, q);
                return;
        }
    }

    double assoc_term(double t, const Eigen::VectorXd& w, const Eigen::VectorXd& beta,
                      const Eigen::VectorXd& b, const SurvParams& sp) const {
        check_params(sp);
        Eigen::MatrixXd AX, AZ;
        assoc_design(t, w, AX, AZ);
        return sp.alpha.dot(AX * beta + AZ * b);
    }

    double gamma_term(const Eigen::VectorXd& w, const SurvParams& sp) const {
        double v = 0.0;
        for (size_t k = 0; k < gamma_cols_.size(); ++k) v += sp.gamma[k] * w[gamma_cols_[k]];
        return v;
    }

    double log_hazard(double t, const Eigen::VectorXd& w, const Eigen::VectorXd& beta,
                      const Eigen::VectorXd& b, const SurvParams& sp) const {
        return log_baseline_hazard(t, sp) + gamma_term(w, sp) + assoc_term(t, w, beta, b, sp);
    }

    double hazard(double t, const Eigen::VectorXd& w, const Eigen::VectorXd& beta,
                  const Eigen::VectorXd& b, const SurvParams& sp) const {
        const double eta = log_hazard(t, w, beta, b, sp);
        if (eta > 700.0)
            throw NumericError("hazard overflow: linear predictor " + to_g17(eta));
        return std::exp(eta);
    }

    bool closed_form_survival() const {
        return assoc_ == Association::random_effects && !baseline_;
    }

    double cumulative_hazard(double t, const Eigen::VectorXd& w, const Eigen::VectorXd& beta,
                             const Eigen::VectorXd& b, const SurvParams& sp) const {
        check_params(sp);
        if (t == 0.0) return 0.0;
        if (closed_form_survival()) {
            const double eta = gamma_term(w, sp) + sp.alpha.dot(b);
            return std::pow(t, sp.weibull_shape) * std::exp(eta);
        }
        const auto cuts = integration_cuts(t);
        const auto& rule = QuadratureRule::gk15();
        double acc = 0.0;
        for (size_t s = 0; s + 1 < cuts.size(); ++s) {
            const double mid = 0.5 * (cuts[s] + cuts[s + 1]);
            const double half = 0.5 * (cuts[s + 1] - cuts[s]);
            for (int k = 0; k < 15; ++k) {
                const double u = mid + half * rule.nodes[k];
                acc += half * rule.weights[k] * hazard(u, w, beta, b, sp);
            }
        }
        if (!std::isfinite(acc)) throw NumericError("non-finite cumulative hazard");
        return acc;
    }

    double survival_fn(double t, const Eigen::VectorXd& w, const Eigen::VectorXd& beta,
                       const Eigen::VectorXd& b, const SurvParams& sp) const {
        if (!(t >= 0.0)) throw RangeError("survival_fn: t must be >= 0");
        if (t == 0.0) return 1.0;
        return std::exp(-cumulative_hazard(t, w, beta, b, sp));
    }

    // Segment boundaries for integrating the hazard over [0, t]: split at the
    // longitudinal basis knots and the baseline spline knots so piecewise
    // structure never straddles a panel.
    std::vector<double> integration_cuts(double t) const {
        std::vector<double> cuts = lm_.segments(t);
        for (double k : baseline_knots_)
            if (k > 0.0 && k < t) cuts.push_back(k);
        // the weibull integrand t^(shape-1) is not polynomial; grade the
        // panels dyadically toward 0 so fixed-rule panels converge to
        // near-machine accuracy
        if (!baseline_)
            for (int k = 1; k <= 30; ++k) {
                const double c = t * std::ldexp(1.0, -k);
                if (c > 0.0 && c < t) cuts.push_back(c);
            }
        std::sort(cuts.begin(), cuts.end());
        cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
        return cuts;
    }

    // Evaluation cap for the baseline spline: event times define its support,
    // and prediction horizons beyond the last event time reuse the boundary
    // value rather than extrapolating.
    double cap_time() const {
        return baseline_ ? baseline_->knot_vector().boundary_high
                         : std::numeric_limits<double>::infinity();
    }

private:
    static double neg_inf_local() { return -std::numeric_limits<double>::infinity(); }

    static std::vector<double> baseline_percentile_knots(const Dataset& ds, const KnotVector& kv) {
        std::vector<double> event_times;
        for (const auto& s : ds.subjects)
            if (s.delta == 1) event_times.push_back(s.T);
        if (event_times.empty())
            for (const auto& s : ds.subjects) event_times.push_back(s.T);
        // rule of thumb: total spline parameters about one fifteenth of the
        // number of events, within sane bounds
        const int n_events = static_cast<int>(event_times.size());
        int target = static_cast<int>(std::lround(n_events / 15.0));
        target = std::max(kv.degree + 3, std::min(target, 15));
        const int n_internal = std::max(1, target - kv.degree - 2);
        return percentile_knots(event_times, n_internal, kv.boundary_low, kv.boundary_high);
    }

    JointModelSpec spec_;
    LongitudinalModel lm_;
    Association assoc_;
    std::vector<int> gamma_cols_;
    std::vector<std::string> gamma_names_;
    std::optional<BSplineBasis> baseline_;
    std::vector<double> baseline_knots_;
    WeightFnSpec wf_;
};

}  // namespace jmbma
