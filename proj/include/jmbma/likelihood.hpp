#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "jmbma/data.hpp"
#include "jmbma/distributions.hpp"
#include "jmbma/errors.hpp"
#include "jmbma/survival.hpp"

namespace jmbma {

// Full parameter state: longitudinal fixed effects and error variance,
// survival coefficients, and the random-effects covariance.
struct ThetaFull {
    Eigen::VectorXd beta;
    double sigma2 = 1.0;
    SurvParams surv;
    Eigen::MatrixXd D;
};

// Conditional log likelihood of one subject given its random effects:
// Gaussian measurement term, event term, and minus the cumulative hazard.
// The random-effects density is added separately via logdens_re.
inline double loglik_subject(const JointModel& model, const Subject& subj,
                             const Eigen::VectorXd& b, const ThetaFull& theta,
                             double longitudinal_weight = 1.0) {
    const LongitudinalModel& lm = model.longitudinal();
    double gauss = 0.0;
    for (size_t l = 0; l < subj.times.size(); ++l) {
        const double mean = lm.m(subj.times[l], subj.w, theta.beta, b);
        gauss += logdens_normal(subj.y[l], mean, std::sqrt(theta.sigma2));
    }
    if (!std::isfinite(gauss)) throw NumericError("non-finite longitudinal likelihood term");
    double event = 0.0;
    if (subj.delta == 1) {
        event = model.log_hazard(subj.T, subj.w, theta.beta, b, theta.surv);
        if (!std::isfinite(event)) throw NumericError("non-finite event hazard term");
    }
    const double cumhaz = model.cumulative_hazard(subj.T, subj.w, theta.beta, b, theta.surv);
    if (!std::isfinite(cumhaz)) throw NumericError("non-finite cumulative hazard term");
    return longitudinal_weight * gauss + event - cumhaz;
}

inline double effective_wishart_df(const PriorSpec& priors, int q) {
    return priors.wishart_df > 0.0 ? priors.wishart_df : q + 2.0;
}

// Log prior density on the natural scale.
inline double logprior(const ThetaFull& theta, const PriorSpec& priors, bool weibull_baseline) {
    if (!(theta.sigma2 > 0.0)) return neg_inf;
    double lp = 0.0;
    for (Eigen::Index i = 0; i < theta.beta.size(); ++i)
        lp += logdens_normal(theta.beta[i], 0.0, priors.beta_sd);
    for (Eigen::Index i = 0; i < theta.surv.gamma.size(); ++i)
        lp += logdens_normal(theta.surv.gamma[i], 0.0, priors.gamma_sd);
    for (Eigen::Index i = 0; i < theta.surv.gamma_h0.size(); ++i)
        lp += logdens_normal(theta.surv.gamma_h0[i], 0.0, priors.gamma_h0_sd);
    if (weibull_baseline) {
        // log-normal prior on the positive shape parameter
        if (!(theta.surv.weibull_shape > 0.0)) return neg_inf;
        const double ls = std::log(theta.surv.weibull_shape);
        lp += logdens_normal(ls, 0.0, priors.gamma_h0_sd) - ls;
    }
    for (Eigen::Index i = 0; i < theta.surv.alpha.size(); ++i)
        lp += logdens_normal(theta.surv.alpha[i], 0.0, priors.alpha_sd);
    lp += logdens_invgamma(theta.sigma2, priors.sigma2_shape, priors.sigma2_rate);
    const int q = static_cast<int>(theta.D.rows());
    Eigen::LLT<Eigen::MatrixXd> llt(theta.D);
    if (llt.info() != Eigen::Success) return neg_inf;
    lp += logdens_invwishart(
        theta.D, effective_wishart_df(priors, q),
        Eigen::MatrixXd::Identity(q, q) * priors.wishart_scale_diag);
    return lp;
}

// ---------------------------------------------------------------------------
// Cached evaluation
// ---------------------------------------------------------------------------

// Per-subject design caches. Because every association structure is linear
// in (beta, b), the hazard's linear predictor at a fixed time u is
//   eta(u) = base(u) . gamma_h0 + gamma . w + alpha . (AX(u) beta + AZ(u) b),
// so all time-dependent design pieces can be evaluated once per subject and
// reused for every parameter value.
struct SubjectCache {
    Eigen::MatrixXd X;   // longitudinal fixed design at measurement times
    Eigen::MatrixXd Z;   // longitudinal random design at measurement times
    Eigen::VectorXd y;
    Eigen::VectorXd wg;  // survival covariate values (gamma order)

    Eigen::VectorXd node_w;     // quadrature weights x half-widths, [0, T]
    Eigen::VectorXd node_logt;  // log of node times (weibull baseline)
    Eigen::MatrixXd B_nodes;    // baseline spline rows at nodes (K x nb)
    Eigen::MatrixXd AXn;        // stacked assoc design rows at nodes (K*na x p)
    Eigen::MatrixXd AZn;        // (K*na x q)

    double logT = 0.0;
    Eigen::VectorXd B_T;   // baseline row at T
    Eigen::MatrixXd AX_T;  // assoc design at T (na x p)
    Eigen::MatrixXd AZ_T;

    int n_nodes() const { return static_cast<int>(node_w.size()); }
};

class CachedLikelihood {
public:
    CachedLikelihood(const JointModel& model, const Dataset& ds) : model_(model), ds_(ds) {
        const LongitudinalModel& lm = model.longitudinal();
        const int p = model.n_beta();
        const int q = model.n_re();
        const int na = model.n_alpha();
        const auto& rule = QuadratureRule::gk15();
        caches_.resize(ds.subjects.size());
        for (size_t i = 0; i < ds.subjects.size(); ++i) {
            const Subject& s = ds.subjects[i];
            SubjectCache& c = caches_[i];
            const int n = static_cast<int>(s.times.size());
            c.X.resize(n, p);
            c.Z.resize(n, q);
            c.y.resize(n);
            for (int l = 0; l < n; ++l) {
                c.X.row(l) = lm.design_x(s.times[l], s.w).transpose();
                c.Z.row(l) = lm.design_z(s.times[l]).transpose();
                c.y[l] = s.y[l];
            }
            c.wg.resize(model.n_gamma());
            for (int k = 0; k < model.n_gamma(); ++k) c.wg[k] = s.w[model.gamma_cols()[k]];

            const auto cuts = model.integration_cuts(s.T);
            const int n_seg = static_cast<int>(cuts.size()) - 1;
            const int K = 15 * n_seg;
            c.node_w.resize(K);
            c.node_logt.resize(K);
            if (model.baseline_basis()) c.B_nodes.resize(K, 1 + model.baseline_basis()->size());
            c.AXn.resize(K * na, p);
            c.AZn.resize(K * na, q);
            Eigen::MatrixXd AX, AZ;
            int k = 0;
            for (int seg = 0; seg < n_seg; ++seg) {
                const double mid = 0.5 * (cuts[seg] + cuts[seg + 1]);
                const double half = 0.5 * (cuts[seg + 1] - cuts[seg]);
                for (int j = 0; j < 15; ++j, ++k) {
                    const double u = mid + half * rule.nodes[j];
                    c.node_w[k] = half * rule.weights[j];
                    c.node_logt[k] = std::log(u);
                    if (model.baseline_basis()) c.B_nodes.row(k) = model.baseline_row(u);
                    model.assoc_design(u, s.w, AX, AZ);
                    c.AXn.middleRows(k * na, na) = AX;
                    c.AZn.middleRows(k * na, na) = AZ;
                }
            }
            c.logT = std::log(s.T);
            c.B_T = model.baseline_row(s.T);
            model.assoc_design(s.T, s.w, c.AX_T, c.AZ_T);
        }
    }

    const JointModel& model() const { return model_; }
    const Dataset& dataset() const { return ds_; }
    int n_subjects() const { return static_cast<int>(caches_.size()); }
    const SubjectCache& cache(int i) const { return caches_[i]; }

    double residual_ss(int i, const Eigen::VectorXd& beta, const Eigen::VectorXd& b) const {
        const SubjectCache& c = caches_[i];
        return (c.y - c.X * beta - c.Z * b).squaredNorm();
    }

    static double gaussian_from_ss(double ss, double n, double sigma2) {
        return -0.5 * n * std::log(2.0 * M_PI * sigma2) - 0.5 * ss / sigma2;
    }

    double gaussian_term(int i, const Eigen::VectorXd& beta, const Eigen::VectorXd& b,
                         double sigma2) const {
        return gaussian_from_ss(residual_ss(i, beta, b), static_cast<double>(caches_[i].y.size()),
                                sigma2);
    }

    // Association values f at the quadrature nodes (stacked, K*na) and at the
    // event time (na); both are linear in (beta, b).
    void assoc_values(int i, const Eigen::VectorXd& beta, const Eigen::VectorXd& b,
                      Eigen::VectorXd& fx, Eigen::VectorXd& fxT) const {
        const SubjectCache& c = caches_[i];
        if (model_.closed_form_survival()) {
            fx.resize(0);
        } else {
            fx.noalias() = c.AXn * beta;
            fx.noalias() += c.AZn * b;
        }
        fxT.noalias() = c.AX_T * beta;
        fxT.noalias() += c.AZ_T * b;
    }

    // delta * log h(T) - Lambda(T) for subject i, given cached association
    // values.
    double survival_term_from_assoc(int i, const Eigen::VectorXd& fx, const Eigen::VectorXd& fxT,
                                    const SurvParams& sp) const {
        const SubjectCache& c = caches_[i];
        const Subject& s = ds_.subjects[i];
        const double gw = sp.gamma.size() > 0 ? sp.gamma.dot(c.wg) : 0.0;
        const int na = model_.n_alpha();
        const bool spline = model_.baseline_basis() != nullptr;

        double lambda;
        double eta_T;
        if (model_.closed_form_survival()) {
            const double ab = sp.alpha.dot(fxT);
            lambda = std::exp(sp.weibull_shape * c.logT + gw + ab);
            eta_T = std::log(sp.weibull_shape) + (sp.weibull_shape - 1.0) * c.logT + gw + ab;
        } else {
            const int K = c.n_nodes();
            lambda = 0.0;
            const double logsh = spline ? 0.0 : std::log(sp.weibull_shape);
            for (int k = 0; k < K; ++k) {
                double eta = gw;
                if (spline)
                    eta += c.B_nodes.row(k).dot(sp.gamma_h0);
                else
                    eta += logsh + (sp.weibull_shape - 1.0) * c.node_logt[k];
                for (int a = 0; a < na; ++a) eta += sp.alpha[a] * fx[k * na + a];
                if (eta > 700.0)
                    throw NumericError("hazard overflow: linear predictor " + to_g17(eta));
                lambda += c.node_w[k] * std::exp(eta);
            }
            eta_T = gw + sp.alpha.dot(fxT);
            if (spline)
                eta_T += c.B_T.dot(sp.gamma_h0);
            else
                eta_T += logsh + (sp.weibull_shape - 1.0) * c.logT;
        }
        if (!std::isfinite(lambda)) throw NumericError("non-finite cumulative hazard term");
        const double out = (s.delta == 1 ? eta_T : 0.0) - lambda;
        if (!std::isfinite(out)) throw NumericError("non-finite event hazard term");
        return out;
    }

    double survival_term(int i, const Eigen::VectorXd& beta, const Eigen::VectorXd& b,
                         const SurvParams& sp) const {
        Eigen::VectorXd fx, fxT;
        assoc_values(i, beta, b, fx, fxT);
        return survival_term_from_assoc(i, fx, fxT, sp);
    }

    double loglik_subject(int i, const Eigen::VectorXd& b, const ThetaFull& theta,
                          double longitudinal_weight = 1.0) const {
        return longitudinal_weight * gaussian_term(i, theta.beta, b, theta.sigma2) +
               survival_term(i, theta.beta, b, theta.surv);
    }

    // Gradient and Hessian in b of log { p(y|b) p(T,delta|b) p(b) } at fixed
    // theta, used by Laplace approximations. Exact for every association
    // structure because the linear predictor is linear in b.
    void grad_hess_b(int i, const Eigen::VectorXd& b, const ThetaFull& theta,
                     Eigen::VectorXd& grad, Eigen::MatrixXd& hess) const {
        const SubjectCache& c = caches_[i];
        const Subject& s = ds_.subjects[i];
        const SurvParams& sp = theta.surv;
        const int q = model_.n_re();
        const int na = model_.n_alpha();
        const bool spline = model_.baseline_basis() != nullptr;
        const double gw = sp.gamma.size() > 0 ? sp.gamma.dot(c.wg) : 0.0;

        // Gaussian part
        const Eigen::VectorXd resid = c.y - c.X * theta.beta - c.Z * b;
        grad = c.Z.transpose() * resid / theta.sigma2;
        hess = -(c.Z.transpose() * c.Z) / theta.sigma2;

        if (model_.closed_form_survival()) {
            const double lambda = std::exp(sp.weibull_shape * c.logT + gw + sp.alpha.dot(b));
            grad -= lambda * sp.alpha;
            hess -= lambda * (sp.alpha * sp.alpha.transpose());
            if (s.delta == 1) grad += sp.alpha;
        } else {
            // survival part: d eta/d b at node k is AZ_k' alpha
            const Eigen::VectorXd fx = c.AXn * theta.beta + c.AZn * b;
            const int K = c.n_nodes();
            for (int k = 0; k < K; ++k) {
                double eta = gw;
                if (spline)
                    eta += c.B_nodes.row(k).dot(sp.gamma_h0);
                else
                    eta += std::log(sp.weibull_shape) +
                           (sp.weibull_shape - 1.0) * c.node_logt[k];
                Eigen::VectorXd deta = Eigen::VectorXd::Zero(q);
                for (int a = 0; a < na; ++a) {
                    eta += sp.alpha[a] * fx[k * na + a];
                    deta += sp.alpha[a] * c.AZn.row(k * na + a).transpose();
                }
                if (eta > 700.0)
                    throw NumericError("hazard overflow: linear predictor " + to_g17(eta));
                const double h = c.node_w[k] * std::exp(eta);
                grad -= h * deta;
                hess -= h * (deta * deta.transpose());
            }
            if (s.delta == 1) {
                Eigen::VectorXd detaT = Eigen::VectorXd::Zero(q);
                for (int a = 0; a < na; ++a) detaT += sp.alpha[a] * c.AZ_T.row(a).transpose();
                grad += detaT;
            }
        }

        // prior part
        Eigen::LLT<Eigen::MatrixXd> llt(theta.D);
        if (llt.info() != Eigen::Success)
            throw NumericError("random-effects covariance is not positive definite");
        grad -= llt.solve(b);
        hess -= llt.solve(Eigen::MatrixXd::Identity(q, q));
    }

private:
    const JointModel& model_;
    const Dataset& ds_;
    std::vector<SubjectCache> caches_;
};

// ---------------------------------------------------------------------------
// Flat parameter layout (natural scale) for reporting and draw storage
// ---------------------------------------------------------------------------

class ParamLayout {
public:
    explicit ParamLayout(const JointModel& model)
        : p_(model.n_beta()),
          ng_(model.n_gamma()),
          nb_(model.n_baseline()),
          na_(model.n_alpha()),
          q_(model.n_re()),
          weibull_(model.baseline_basis() == nullptr) {
        for (const auto& n : model.longitudinal().beta_names()) names_.push_back("beta." + n);
        for (const auto& n : model.gamma_names()) names_.push_back("gamma." + n);
        if (weibull_) {
            names_.push_back("weibull_shape");
        } else {
            for (int i = 0; i < nb_; ++i) names_.push_back("gamma_h0." + std::to_string(i));
        }
        for (int i = 0; i < na_; ++i) names_.push_back("alpha." + std::to_string(i + 1));
        names_.push_back("sigma2");
        for (int r = 0; r < q_; ++r)
            for (int c = 0; c <= r; ++c)
                names_.push_back("D." + std::to_string(r + 1) + "." + std::to_string(c + 1));
    }

    const std::vector<std::string>& names() const { return names_; }
    int size() const { return static_cast<int>(names_.size()); }

    Eigen::VectorXd pack(const ThetaFull& t) const {
        Eigen::VectorXd v(size());
        int k = 0;
        for (int i = 0; i < p_; ++i) v[k++] = t.beta[i];
        for (int i = 0; i < ng_; ++i) v[k++] = t.surv.gamma[i];
        if (weibull_) {
            v[k++] = t.surv.weibull_shape;
        } else {
            for (int i = 0; i < nb_; ++i) v[k++] = t.surv.gamma_h0[i];
        }
        for (int i = 0; i < na_; ++i) v[k++] = t.surv.alpha[i];
        v[k++] = t.sigma2;
        for (int r = 0; r < q_; ++r)
            for (int c = 0; c <= r; ++c) v[k++] = t.D(r, c);
        return v;
    }

    ThetaFull unpack(const Eigen::VectorXd& v) const {
        ThetaFull t;
        t.beta.resize(p_);
        t.surv.gamma.resize(ng_);
        t.surv.alpha.resize(na_);
        t.D.resize(q_, q_);
        int k = 0;
        for (int i = 0; i < p_; ++i) t.beta[i] = v[k++];
        for (int i = 0; i < ng_; ++i) t.surv.gamma[i] = v[k++];
        if (weibull_) {
            t.surv.weibull_shape = v[k++];
            t.surv.gamma_h0.resize(0);
        } else {
            t.surv.gamma_h0.resize(nb_);
            for (int i = 0; i < nb_; ++i) t.surv.gamma_h0[i] = v[k++];
        }
        for (int i = 0; i < na_; ++i) t.surv.alpha[i] = v[k++];
        t.sigma2 = v[k++];
        for (int r = 0; r < q_; ++r)
            for (int c = 0; c <= r; ++c) {
                t.D(r, c) = v[k];
                t.D(c, r) = v[k];
                ++k;
            }
        return t;
    }

    // Unconstrained transform: log sigma2 (and log weibull shape), random
    // effects covariance as Cholesky factor with logged diagonal. Returns the
    // log absolute Jacobian determinant of the map unconstrained -> natural.
    Eigen::VectorXd to_unconstrained(const Eigen::VectorXd& natural) const {
        Eigen::VectorXd u = natural;
        const int is2 = sigma2_index();
        u[is2] = std::log(natural[is2]);
        if (weibull_) u[shape_index()] = std::log(natural[shape_index()]);
        ThetaFull t = unpack(natural);
        Eigen::LLT<Eigen::MatrixXd> llt(t.D);
        if (llt.info() != Eigen::Success)
            throw NumericError("covariance not positive definite in transform");
        Eigen::MatrixXd L = llt.matrixL();
        int k = d_start();
        for (int r = 0; r < q_; ++r)
            for (int c = 0; c <= r; ++c) u[k++] = (r == c) ? std::log(L(r, r)) : L(r, c);
        return u;
    }

    Eigen::VectorXd to_natural(const Eigen::VectorXd& u, double* log_jacobian = nullptr) const {
        Eigen::VectorXd v = u;
        double lj = 0.0;
        const int is2 = sigma2_index();
        v[is2] = std::exp(u[is2]);
        lj += u[is2];
        if (weibull_) {
            v[shape_index()] = std::exp(u[shape_index()]);
            lj += u[shape_index()];
        }
        Eigen::MatrixXd L = Eigen::MatrixXd::Zero(q_, q_);
        int k = d_start();
        for (int r = 0; r < q_; ++r)
            for (int c = 0; c <= r; ++c) {
                L(r, c) = (r == c) ? std::exp(u[k]) : u[k];
                ++k;
            }
        const Eigen::MatrixXd D = L * L.transpose();
        k = d_start();
        for (int r = 0; r < q_; ++r)
            for (int c = 0; c <= r; ++c) {
                v[k++] = D(r, c);
            }
        // |J| of (L lower, log-diag) -> D (lower triangle): 2^q prod l_jj^(q-j+2)
        lj += q_ * std::log(2.0);
        for (int j = 0; j < q_; ++j) {
            const int diag_idx = d_start() + (j + 1) * (j + 2) / 2 - 1;
            lj += (q_ - j + 1) * u[diag_idx];
        }
        if (log_jacobian) *log_jacobian = lj;
        return v;
    }

    int sigma2_index() const { return p_ + ng_ + nb_ + na_; }
    int shape_index() const { return p_ + ng_; }
    int d_start() const { return sigma2_index() + 1; }
    int q() const { return q_; }

private:
    int p_, ng_, nb_, na_, q_;
    bool weibull_;
    std::vector<std::string> names_;
};

}  // namespace jmbma
