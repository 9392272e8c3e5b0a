#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "jmbma/data.hpp"
#include "jmbma/errors.hpp"
#include "jmbma/likelihood.hpp"
#include "jmbma/mcmc.hpp"
#include "jmbma/prediction.hpp"

namespace jmbma {

// Marginal likelihoods of one candidate model: for the training data as a
// whole and for the target subject's history at the current origin.
struct ModelEvidence {
    double log_marg_data = 0.0;
    double log_marg_subject = 0.0;
    int model_id = 0;
};

// Posterior model probabilities for one subject at one origin time.
struct BmaWeights {
    std::vector<double> weights;
    std::string subject_id;
    double origin_time = 0.0;
};

// ---------------------------------------------------------------------------
// Dataset fingerprint
// ---------------------------------------------------------------------------

namespace detail {

struct Fnv1a {
    std::uint64_t h = 1469598103934665603ull;

    void bytes(const void* p, std::size_t n) {
        const unsigned char* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 1099511628211ull;
        }
    }
    void add(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        bytes(&bits, sizeof bits);
    }
    void add(std::uint64_t v) { bytes(&v, sizeof v); }
    void add(const std::string& s) {
        add(static_cast<std::uint64_t>(s.size()));
        bytes(s.data(), s.size());
    }
};

}  // namespace detail

// Content hash used to check that candidate models were fitted on the same
// data. Order-sensitive: the same subjects in a different order are a
// different dataset.
inline std::uint64_t dataset_fingerprint(const Dataset& ds) {
    detail::Fnv1a f;
    f.add(ds.transform);
    f.add(static_cast<std::uint64_t>(ds.covariate_names.size()));
    for (const auto& n : ds.covariate_names) f.add(n);
    f.add(static_cast<std::uint64_t>(ds.subjects.size()));
    for (const auto& s : ds.subjects) {
        f.add(s.id);
        f.add(s.T);
        f.add(static_cast<std::uint64_t>(s.delta));
        f.add(static_cast<std::uint64_t>(s.w.size()));
        for (Eigen::Index k = 0; k < s.w.size(); ++k) f.add(s.w[k]);
        f.add(static_cast<std::uint64_t>(s.times.size()));
        for (std::size_t l = 0; l < s.times.size(); ++l) {
            f.add(s.times[l]);
            f.add(s.y[l]);
        }
    }
    return f.h;
}

// ---------------------------------------------------------------------------
// Laplace building blocks
// ---------------------------------------------------------------------------

namespace detail {

// log of the integral over b of exp{loglik(b) + log N(b; 0, D)} for one
// subject. The mode comes from damped Newton steps on the exact gradient and
// Hessian (tolerance 1e-8, at most 50 iterations); the same exact Hessian at
// the stopping point supplies the Laplace determinant. b carries the warm
// start across calls and holds the mode on return.
inline double laplace_over_b(const CachedLikelihood& like, int i, const ThetaFull& theta,
                             Eigen::VectorXd& b, const std::string& label) {
    const int q = static_cast<int>(b.size());
    Eigen::VectorXd grad(q);
    Eigen::MatrixXd hess(q, q);

    auto value = [&](const Eigen::VectorXd& x) -> double {
        try {
            return like.loglik_subject(i, x, theta) + logdens_re(x, theta.D);
        } catch (const NumericError&) {
            return neg_inf;
        }
    };

    double f0 = value(b);
    if (!std::isfinite(f0)) {
        b.setZero();
        f0 = value(b);
    }
    for (int it = 0; it < 50; ++it) {
        like.grad_hess_b(i, b, theta, grad, hess);
        if (grad.norm() < 1e-8) break;
        Eigen::LLT<Eigen::MatrixXd> llt(Eigen::MatrixXd(-hess));
        const Eigen::VectorXd step =
            llt.info() == Eigen::Success ? Eigen::VectorXd(llt.solve(grad)) : grad;
        double scale = 1.0;
        bool improved = false;
        for (int half = 0; half < 12; ++half) {
            const double f1 = value(b + scale * step);
            if (f1 > f0) {
                b += scale * step;
                f0 = f1;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if (!improved || scale * step.norm() < 1e-12) break;
    }

    const double f = f0;
    like.grad_hess_b(i, b, theta, grad, hess);

    Eigen::LLT<Eigen::MatrixXd> llt(Eigen::MatrixXd(-hess));
    if (llt.info() != Eigen::Success)
        throw EvidenceError(
            "random-effects integration (step 1): curvature is not positive definite at the "
            "conditional mode of subject '" +
            label + "'");
    double half_logdet = 0.0;
    const Eigen::MatrixXd L = llt.matrixL();
    for (int j = 0; j < q; ++j) half_logdet += std::log(L(j, j));
    return f + 0.5 * q * std::log(2.0 * M_PI) - half_logdet;
}

template <class F>
Eigen::VectorXd fd_gradient(const F& f, const Eigen::VectorXd& x, double rel) {
    const int d = static_cast<int>(x.size());
    Eigen::VectorXd g(d), xp = x;
    for (int j = 0; j < d; ++j) {
        const double h = rel * (1.0 + std::abs(x[j]));
        xp[j] = x[j] + h;
        const double fp = f(xp);
        xp[j] = x[j] - h;
        const double fm = f(xp);
        xp[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Hessian as central differences of the finite-difference gradient,
// symmetrized.
template <class F>
Eigen::MatrixXd fd_hessian(const F& f, const Eigen::VectorXd& x, double rel_outer,
                           double rel_inner) {
    const int d = static_cast<int>(x.size());
    Eigen::MatrixXd H(d, d);
    Eigen::VectorXd xp = x;
    for (int j = 0; j < d; ++j) {
        const double h = rel_outer * (1.0 + std::abs(x[j]));
        xp[j] = x[j] + h;
        const Eigen::VectorXd gp = fd_gradient(f, xp, rel_inner);
        xp[j] = x[j] - h;
        const Eigen::VectorXd gm = fd_gradient(f, xp, rel_inner);
        xp[j] = x[j];
        H.col(j) = (gp - gm) / (2.0 * h);
    }
    return 0.5 * (H + H.transpose());
}

template <class F>
double value_or_neg_inf(const F& f, const Eigen::VectorXd& x) {
    try {
        const double v = f(x);
        return std::isfinite(v) ? v : neg_inf;
    } catch (const NumericError&) {
        return neg_inf;
    } catch (const EvidenceError&) {
        return neg_inf;
    }
}

// Damped Newton ascent with finite-difference derivatives; falls back to a
// ridged solve or plain gradient steps when the curvature is not usable.
// The curvature is expensive (two gradient sweeps per coordinate), so it is
// cached between iterations and refreshed only when the line search fails;
// a failure with a stale matrix retries once with fresh curvature before
// giving up. The ascent also stops after three consecutive accepted steps
// with negligible gain. When the exit happens right after a fresh curvature
// evaluation at the final point, that matrix is handed back through
// curv_at_exit so the caller can skip recomputing it.
template <class F>
Eigen::VectorXd maximize(const F& f, Eigen::VectorXd x, const char* step_name,
                         Eigen::MatrixXd* curv_at_exit = nullptr) {
    if (curv_at_exit) curv_at_exit->resize(0, 0);
    double fx = value_or_neg_inf(f, x);
    if (!std::isfinite(fx))
        throw EvidenceError(std::string(step_name) +
                            ": objective is not finite at the starting point");
    Eigen::MatrixXd A;
    bool have_curvature = false;
    bool refresh_curvature = true;
    int stalled = 0;
    for (int it = 0; it < 100; ++it) {
        Eigen::VectorXd g;
        try {
            g = fd_gradient(f, x, 1e-5);
        } catch (const Error&) {
            break;
        }
        if (!g.allFinite() || g.lpNorm<Eigen::Infinity>() < 1e-6) break;

        bool fresh = false;
        if (refresh_curvature) {
            try {
                A = -fd_hessian(f, x, 1e-4, 1e-5);
            } catch (const Error&) {
                break;
            }
            have_curvature = true;
            refresh_curvature = false;
            fresh = true;
        }
        Eigen::VectorXd step = g;
        if (have_curvature && A.allFinite()) {
            Eigen::LLT<Eigen::MatrixXd> llt(A);
            double ridge = 0.0;
            const double unit = 1e-6 * (1.0 + A.diagonal().cwiseAbs().maxCoeff());
            while (llt.info() != Eigen::Success && ridge < 1e12 * unit) {
                ridge = ridge == 0.0 ? unit : 10.0 * ridge;
                llt.compute(A + ridge * Eigen::MatrixXd::Identity(A.rows(), A.cols()));
            }
            if (llt.info() == Eigen::Success) step = llt.solve(g);
        }

        double scale = 1.0;
        bool improved = false;
        const double f_prev = fx;
        for (int half = 0; half < 25; ++half) {
            const double f1 = value_or_neg_inf(f, x + scale * step);
            if (f1 > fx) {
                x += scale * step;
                fx = f1;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if (!improved) {
            if (fresh) {
                if (curv_at_exit) *curv_at_exit = A;
                break;
            }
            refresh_curvature = true;
            continue;
        }
        if (fx - f_prev < 1e-6 * (1.0 + std::abs(fx))) {
            if (++stalled >= 3) break;
        } else {
            stalled = 0;
        }
        if (scale * step.norm() < 1e-9 * (1.0 + x.norm())) break;
    }
    return x;
}

// Final Laplace value at a located mode: f(mode) + d/2 log(2 pi)
// - 1/2 log det(-H), where H is the finite-difference curvature. A caller
// that already holds -H evaluated at the mode can pass it to skip the
// recomputation.
template <class F>
double laplace_at_mode(const F& f, const Eigen::VectorXd& mode, const char* step_name,
                       const Eigen::MatrixXd* neg_curv = nullptr) {
    const int d = static_cast<int>(mode.size());
    Eigen::MatrixXd A;
    if (neg_curv && neg_curv->rows() == d && neg_curv->cols() == d) {
        A = *neg_curv;
    } else {
        A = -fd_hessian(f, mode, 1e-4, 1e-5);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success)
        throw EvidenceError(std::string(step_name) +
                            ": curvature is not positive definite at the located mode");
    double half_logdet = 0.0;
    const Eigen::MatrixXd L = llt.matrixL();
    for (int j = 0; j < d; ++j) half_logdet += std::log(L(j, j));
    return f(mode) + 0.5 * d * std::log(2.0 * M_PI) - half_logdet;
}

inline void check_draws(const PosteriorDraws& draws, const ParamLayout& layout) {
    if (draws.n_draws() == 0) throw SpecError("evidence needs a nonempty draw set");
    if (static_cast<int>(draws.names.size()) != layout.size())
        throw ConsistencyError("draw layout does not match the model specification");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Marginal likelihood of the training data
// ---------------------------------------------------------------------------

// log p(D | M) by nested Laplace approximation: the random effects of each
// subject are integrated out at their conditional mode first, then the
// parameters are integrated on the unconstrained scale at the posterior mode
// of the resulting integrated log posterior. The ascent starts from the
// retained draw with the highest joint log posterior.
inline double log_marginal_dataset(const Dataset& ds, const JointModelSpec& spec,
                                   const PosteriorDraws& draws) {
    spec.validate();
    const JointModel model(ds, spec);
    const ParamLayout layout(model);
    detail::check_draws(draws, layout);
    const CachedLikelihood like(model, ds);
    const bool weibull = model.baseline_basis() == nullptr;
    const int n = like.n_subjects();
    if (draws.n_subjects != n || draws.n_re != model.n_re() ||
        draws.b.rows() != draws.theta.rows() ||
        draws.b.cols() != static_cast<Eigen::Index>(n) * model.n_re())
        throw ConsistencyError("draw set does not carry random-effects draws for this dataset");

    std::vector<Eigen::VectorXd> b_warm(n, Eigen::VectorXd::Zero(model.n_re()));
    auto objective = [&](const Eigen::VectorXd& u) -> double {
        double lj = 0.0;
        const ThetaFull theta = layout.unpack(layout.to_natural(u, &lj));
        const double lp = logprior(theta, spec.priors, weibull);
        if (!std::isfinite(lp)) return neg_inf;
        double s = lp + lj;
        for (int i = 0; i < n; ++i)
            s += detail::laplace_over_b(like, i, theta, b_warm[i], ds.subjects[i].id);
        return s;
    };

    // starting point: retained draw maximizing the joint log posterior (with
    // the random effects at their sampled values)
    int best = -1;
    double best_lp = neg_inf;
    for (int l = 0; l < draws.n_draws(); ++l) {
        try {
            const Eigen::VectorXd row = draws.theta.row(l).transpose();
            const ThetaFull theta = layout.unpack(row);
            double v = logprior(theta, spec.priors, weibull);
            if (!std::isfinite(v)) continue;
            double lj = 0.0;
            layout.to_natural(layout.to_unconstrained(row), &lj);
            v += lj;
            for (int i = 0; i < n; ++i) {
                const Eigen::VectorXd bi = draws.b_draw(l, i);
                v += like.loglik_subject(i, bi, theta) + logdens_re(bi, theta.D);
            }
            if (v > best_lp) {
                best_lp = v;
                best = l;
            }
        } catch (const NumericError&) {
        }
    }
    if (best < 0)
        throw EvidenceError(
            "parameter integration (step 2): no retained draw has a finite joint log posterior");

    Eigen::VectorXd u = layout.to_unconstrained(draws.theta.row(best).transpose());
    Eigen::MatrixXd curv;
    u = detail::maximize(objective, std::move(u), "parameter integration (step 2)", &curv);
    return detail::laplace_at_mode(objective, u, "parameter integration (step 2)", &curv);
}

// ---------------------------------------------------------------------------
// Marginal likelihood of one subject's history
// ---------------------------------------------------------------------------

// log p(D_j(t) | M): the target's measurements and event-free survival up to
// the origin, integrated over the subject's random effects (Laplace at the
// conditional mode) and over the parameters against p(theta | D) approximated
// by a normal matched to the posterior draw moments on the unconstrained
// scale. The training data enter only through the draws; a target that also
// appears in the training set is not removed from it.
inline double log_marginal_subject(const Dataset& ds, const JointModelSpec& spec,
                                   const PosteriorDraws& draws, const TargetSubject& target) {
    spec.validate();
    const JointModel model(ds, spec);
    const ParamLayout layout(model);
    detail::check_draws(draws, layout);
    target.validate();
    if (target.w.size() != static_cast<Eigen::Index>(ds.covariate_names.size()))
        throw SpecError("target has " + std::to_string(target.w.size()) +
                        " covariates, the fitted model uses " +
                        std::to_string(ds.covariate_names.size()));

    const Dataset pseudo = detail::prediction_dataset(target, {});
    const CachedLikelihood like(model, pseudo);
    const int d = layout.size();
    const int n_draws = draws.n_draws();

    // moment-matched normal approximation of the parameter posterior
    Eigen::MatrixXd U(n_draws, d);
    for (int l = 0; l < n_draws; ++l)
        U.row(l) = layout.to_unconstrained(draws.theta.row(l).transpose()).transpose();
    const Eigen::VectorXd m = U.colwise().mean().transpose();
    Eigen::MatrixXd V = Eigen::MatrixXd::Zero(d, d);
    if (n_draws > 1) {
        const Eigen::MatrixXd C = U.rowwise() - m.transpose();
        V = C.transpose() * C / static_cast<double>(n_draws - 1);
    }
    V.diagonal().array() += 1e-10 * (1.0 + V.trace() / d);
    Eigen::LLT<Eigen::MatrixXd> lltV(V);
    if (lltV.info() != Eigen::Success)
        throw NumericError("posterior draw covariance is not positive definite");
    const Eigen::MatrixXd LV = lltV.matrixL();
    double logdet_lv = 0.0;
    for (int j = 0; j < d; ++j) logdet_lv += std::log(LV(j, j));

    Eigen::VectorXd b_warm = Eigen::VectorXd::Zero(model.n_re());
    auto objective = [&](const Eigen::VectorXd& u) -> double {
        const ThetaFull theta = layout.unpack(layout.to_natural(u));
        const double f = detail::laplace_over_b(like, 0, theta, b_warm, target.id);
        const Eigen::VectorXd z = LV.triangularView<Eigen::Lower>().solve(u - m);
        return f - 0.5 * d * std::log(2.0 * M_PI) - logdet_lv - 0.5 * z.squaredNorm();
    };

    Eigen::MatrixXd curv;
    const Eigen::VectorXd u =
        detail::maximize(objective, m, "parameter integration (step 2)", &curv);
    return detail::laplace_at_mode(objective, u, "parameter integration (step 2)", &curv);
}

// ---------------------------------------------------------------------------
// Model weights
// ---------------------------------------------------------------------------

// Softmax of log p(D_j(t)|M_k) + log p(D|M_k) + log prior_k, computed with
// max-subtraction. prior_probs empty means equal prior probability per model.
inline BmaWeights bma_weights(const std::vector<ModelEvidence>& evidence,
                              const std::vector<double>& prior_probs = {},
                              const std::string& subject_id = "", double origin_time = 0.0) {
    const int K = static_cast<int>(evidence.size());
    if (K == 0) throw SpecError("model averaging needs at least one candidate model");
    std::vector<double> prior = prior_probs;
    if (prior.empty()) prior.assign(K, 1.0 / K);
    if (static_cast<int>(prior.size()) != K)
        throw ConfigError("got " + std::to_string(prior.size()) + " prior probabilities for " +
                          std::to_string(K) + " models");
    double psum = 0.0;
    for (double p : prior) {
        if (!(p >= 0.0) || !std::isfinite(p))
            throw ConfigError("prior model probabilities must be nonnegative");
        psum += p;
    }
    if (std::abs(psum - 1.0) > 1e-8)
        throw ConfigError("prior model probabilities sum to " + to_g17(psum) + ", expected 1");

    std::vector<double> lw(K);
    double mx = neg_inf;
    for (int k = 0; k < K; ++k) {
        if (!std::isfinite(evidence[k].log_marg_data) ||
            !std::isfinite(evidence[k].log_marg_subject))
            throw NumericError("model evidence must be finite (model index " +
                               std::to_string(k) + ")");
        lw[k] = evidence[k].log_marg_subject + evidence[k].log_marg_data + std::log(prior[k]);
        mx = std::max(mx, lw[k]);
    }
    if (!std::isfinite(mx))
        throw NumericError("all candidate models have zero prior probability");

    BmaWeights out;
    out.subject_id = subject_id;
    out.origin_time = origin_time;
    out.weights.resize(K);
    double sum = 0.0;
    for (int k = 0; k < K; ++k) {
        out.weights[k] = std::exp(lw[k] - mx);
        sum += out.weights[k];
    }
    for (int k = 0; k < K; ++k) out.weights[k] /= sum;
    return out;
}

// ---------------------------------------------------------------------------
// Candidate bundles and averaged predictions
// ---------------------------------------------------------------------------

struct FittedModel {
    JointModelSpec spec;
    PosteriorDraws draws;
    std::string label;
    std::uint64_t data_fingerprint = 0;
    // log p(D | M), filled on first use
    double log_marg_data = std::numeric_limits<double>::quiet_NaN();
};

inline FittedModel make_fitted_model(const Dataset& ds, const JointModelSpec& spec,
                                     const PosteriorDraws& draws, std::string label = "") {
    FittedModel fm;
    fm.spec = spec;
    fm.draws = draws;
    fm.label = std::move(label);
    fm.data_fingerprint = dataset_fingerprint(ds);
    return fm;
}

// Averages dynamic predictions over candidate models with subject- and
// time-dependent weights. The dataset evidence of each model is computed once
// and cached; subject evidence and weights are recomputed at every origin.
class ModelAverager {
public:
    ModelAverager(const Dataset& ds, std::vector<FittedModel> models)
        : ds_(ds), models_(std::move(models)) {
        if (models_.empty()) throw SpecError("model averaging needs at least one candidate model");
        const std::uint64_t fp = dataset_fingerprint(ds_);
        for (std::size_t k = 0; k < models_.size(); ++k) {
            if (models_[k].label.empty()) models_[k].label = "M" + std::to_string(k + 1);
            if (models_[k].data_fingerprint != fp)
                throw ConsistencyError("model '" + models_[k].label +
                                       "' was fitted on a different dataset (fingerprint "
                                       "mismatch)");
        }
    }

    int n_models() const { return static_cast<int>(models_.size()); }
    const FittedModel& model(int k) const { return models_[k]; }

    double dataset_evidence(int k) {
        FittedModel& fm = models_.at(k);
        if (std::isnan(fm.log_marg_data))
            fm.log_marg_data = log_marginal_dataset(ds_, fm.spec, fm.draws);
        return fm.log_marg_data;
    }

    // Evidence pair per model at this origin. Weights are a pure function of
    // the target history, so nothing here is cached across origins.
    std::vector<ModelEvidence> evidence_at(const TargetSubject& target) {
        std::vector<ModelEvidence> ev(models_.size());
        for (std::size_t k = 0; k < models_.size(); ++k) {
            ev[k].model_id = static_cast<int>(k);
            ev[k].log_marg_data = dataset_evidence(static_cast<int>(k));
            ev[k].log_marg_subject =
                log_marginal_subject(ds_, models_[k].spec, models_[k].draws, target);
        }
        return ev;
    }

    BmaWeights weights_at(const TargetSubject& target,
                          const std::vector<double>& prior_probs = {}) {
        return bma_weights(evidence_at(target), prior_probs, target.id, target.t);
    }

    // Weighted mixture of the per-model conditional survival curves: the
    // point estimate is the weight-averaged per-model mean, the band comes
    // from pooling the per-model Monte Carlo draws in proportion to the
    // weights.
    DynamicPrediction predict_survival(const TargetSubject& target,
                                       const std::vector<double>& horizons,
                                       const PredictOptions& opts = {},
                                       const std::vector<double>& prior_probs = {}) {
        const BmaWeights w = weights_at(target, prior_probs);
        const int K = n_models();
        const int H = static_cast<int>(horizons.size());

        std::vector<Eigen::MatrixXd> draws_k(K);
        int max_rows = 0;
        for (int k = 0; k < K; ++k) {
            const DynamicPredictor pred(ds_, models_[k].spec, models_[k].draws);
            draws_k[k] = pred.survival_draws(target, horizons, opts);
            max_rows = std::max(max_rows, static_cast<int>(draws_k[k].rows()));
        }

        DynamicPrediction out;
        out.origin = target.t;
        out.horizons = horizons;
        out.kind = PredictionKind::survival;

        out.point.assign(H, 0.0);
        for (int k = 0; k < K; ++k)
            for (int h = 0; h < H; ++h) out.point[h] += w.weights[k] * draws_k[k].col(h).mean();

        // pool draws across models in proportion to the weights (largest
        // remainder apportionment, systematic thinning within each model with
        // a per-model phase, so equal-weight copies of the same model
        // reassemble the full draw set)
        const std::vector<int> take = apportion(w.weights, max_rows);
        Eigen::MatrixXd pooled(max_rows, H);
        int r = 0;
        for (int k = 0; k < K; ++k) {
            const long long rows_k = draws_k[k].rows();
            for (int l = 0; l < take[k]; ++l, ++r)
                pooled.row(r) = draws_k[k].row(static_cast<int>(
                    ((static_cast<long long>(K) * l + k) * rows_k) /
                    (static_cast<long long>(K) * take[k])));
        }
        out.n_mc = r;

        out.lower.resize(H);
        out.upper.resize(H);
        for (int h = 0; h < H; ++h) {
            std::vector<double> v(pooled.col(h).data(), pooled.col(h).data() + r);
            out.lower[h] = std::min(quantile_type7(v, opts.ci_lower), out.point[h]);
            out.upper[h] = std::max(quantile_type7(v, opts.ci_upper), out.point[h]);
        }

        for (int h = 1; h < H; ++h)
            if (out.point[h] > out.point[h - 1] + 1e-12)
                throw NumericError("averaged survival curve is not nonincreasing");
        return out;
    }

private:
    // Split `total` slots across models proportional to the weights; floors
    // first, then the largest fractional remainders (ties to the lower index).
    static std::vector<int> apportion(const std::vector<double>& w, int total) {
        const int K = static_cast<int>(w.size());
        std::vector<int> n(K);
        std::vector<std::pair<double, int>> rem(K);
        int used = 0;
        for (int k = 0; k < K; ++k) {
            const double exact = w[k] * total;
            n[k] = static_cast<int>(std::floor(exact));
            rem[k] = {exact - n[k], k};
            used += n[k];
        }
        std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first > b.first : a.second < b.second;
        });
        for (int j = 0; used < total; ++j, ++used) ++n[rem[j % K].second];
        return n;
    }

    const Dataset& ds_;
    std::vector<FittedModel> models_;
};

// ---------------------------------------------------------------------------
// Weight report
// ---------------------------------------------------------------------------

struct WeightReportRow {
    std::string subject;
    double origin_time = 0.0;
    double last_value = 0.0;  // most recent biomarker value at the origin
    std::vector<double> weights;
};

namespace detail {

inline std::string format_weight(double w) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", w < 1e-6 ? 0.0 : w);
    return buf;
}

inline std::string format_short(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

}  // namespace detail

// CSV with one row per (subject, origin): subject, origin_time, last_value,
// then one weight column per model, two decimals, values below 1e-6 shown as
// 0.00.
inline void write_weight_report(std::ostream& os, const std::vector<WeightReportRow>& rows) {
    if (rows.empty()) throw SpecError("weight report needs at least one row");
    const std::size_t K = rows.front().weights.size();
    os << "subject,origin_time,last_value";
    for (std::size_t k = 1; k <= K; ++k) os << ",w" << k;
    os << "\n";
    for (const auto& row : rows) {
        if (row.weights.size() != K)
            throw ConsistencyError("weight report row for subject '" + row.subject +
                                   "' has " + std::to_string(row.weights.size()) +
                                   " weights, expected " + std::to_string(K));
        os << row.subject << "," << detail::format_short(row.origin_time) << ","
           << detail::format_short(row.last_value);
        for (double w : row.weights) os << "," << detail::format_weight(w);
        os << "\n";
    }
}

}  // namespace jmbma
