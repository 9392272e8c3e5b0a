#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "jmbma/data.hpp"
#include "jmbma/errors.hpp"
#include "jmbma/likelihood.hpp"
#include "jmbma/mcmc.hpp"
#include "jmbma/rng.hpp"
#include "jmbma/survival.hpp"
#include "jmbma/text.hpp"

namespace jmbma {

// A subject whose event has not happened by the origin time t, with the
// longitudinal measurements collected up to t.
struct TargetSubject {
    std::string id = "target";
    Eigen::VectorXd w;
    std::vector<double> times;
    std::vector<double> y;
    double t = 0.0;  // prediction origin: event-free up to here

    void validate() const {
        if (y.empty()) throw SpecError("prediction target needs at least one measurement");
        if (times.size() != y.size())
            throw SpecError("prediction target has " + std::to_string(times.size()) +
                            " times but " + std::to_string(y.size()) + " values");
        if (!(t >= 0.0) || !std::isfinite(t))
            throw RangeError("prediction origin must be a finite nonnegative time");
        double prev = -1.0;
        for (size_t l = 0; l < times.size(); ++l) {
            if (!std::isfinite(times[l]) || !std::isfinite(y[l]))
                throw SpecError("prediction target has non-finite measurements");
            if (times[l] < 0.0 || times[l] > t)
                throw RangeError("measurement time " + to_g17(times[l]) +
                                 " outside [0, origin]");
            if (times[l] <= prev)
                throw SpecError("measurement times must be strictly increasing");
            prev = times[l];
        }
    }
};

// New measurement arrives at time s > t: the prediction origin moves to s
// and the history grows. The input is left untouched.
inline TargetSubject update(const TargetSubject& target, double s, double y) {
    if (!(s > target.t))
        throw RangeError("new measurement time " + to_g17(s) +
                         " must be later than the current origin " + to_g17(target.t));
    TargetSubject out = target;
    out.times.push_back(s);
    out.y.push_back(y);
    out.t = s;
    out.validate();
    return out;
}

enum class PredictionKind { survival, longitudinal };

namespace detail {

// One pseudo subject per requested time: index 0 carries T = origin (the
// conditioning history and the denominator), indices 1..H carry T = u_h.
// All are censored, so the survival term of each is -Lambda(T).
inline Dataset prediction_dataset(const TargetSubject& target,
                                  const std::vector<double>& horizons) {
    Dataset pseudo;
    Subject base;
    base.id = target.id;
    base.w = target.w;
    base.times = target.times;
    base.y = target.y;
    base.delta = 0;
    base.T = std::max(target.t, 1e-12);  // t = 0 still needs a valid interval
    pseudo.subjects.push_back(base);
    for (double u : horizons) {
        Subject s = base;
        s.T = u;
        pseudo.subjects.push_back(s);
    }
    return pseudo;
}

}  // namespace detail

struct DynamicPrediction {
    double origin = 0.0;
    std::vector<double> horizons;
    std::vector<double> point;
    std::vector<double> lower;
    std::vector<double> upper;
    PredictionKind kind = PredictionKind::survival;
    int n_mc = 0;
};

struct PredictOptions {
    int n_inner = 25;        // Metropolis steps refreshing b per theta draw
    int n_max_draws = 2000;  // equally thinned cap; 0 uses every retained draw
    double ci_lower = 0.025;
    double ci_upper = 0.975;
    bool include_noise = false;  // add measurement error to trajectory bands
    std::uint64_t seed = 0;      // 0: derive from the draw seed
};

// Posterior-predictive machinery for one fitted model. Reconstructs the
// model from the training data (so spline knots match the fit), then for a
// new subject alternates over retained theta draws, refreshing the subject's
// random effects with a short Metropolis run targeting
//   log p(y_target | b) - Lambda(t | b) + log p(b | D),
// and averages the survival ratio S(u|b)/S(t|b) or the expected trajectory.
class DynamicPredictor {
public:
    DynamicPredictor(const Dataset& ds, const JointModelSpec& spec, const PosteriorDraws& draws)
        : model_(ds, spec),
          layout_(model_),
          draws_(draws),
          n_covariates_(static_cast<Eigen::Index>(ds.covariate_names.size())) {
        if (draws_.n_draws() == 0) throw SpecError("prediction needs a nonempty draw set");
        if (static_cast<int>(draws_.names.size()) != layout_.size())
            throw ConsistencyError("draw layout does not match the model specification");
    }

    const JointModel& model() const { return model_; }

    // Raw Monte Carlo survival ratios S(u|b)/S(t|b): one row per posterior
    // draw used, one column per horizon. survival() averages these; model
    // averaging pools them across candidate models.
    Eigen::MatrixXd survival_draws(const TargetSubject& target,
                                   const std::vector<double>& horizons,
                                   const PredictOptions& opts = {}) const {
        check_inputs(target, horizons);
        Dataset pseudo = detail::prediction_dataset(target, horizons);
        const CachedLikelihood pc(model_, pseudo);
        const int H = static_cast<int>(horizons.size());

        const std::vector<int> use = draw_indices(opts);
        const int L = static_cast<int>(use.size());
        Eigen::MatrixXd ratios(L, H);

        BSampler bs = make_b_sampler(pc, opts);
        for (int l = 0; l < L; ++l) {
            const ThetaFull theta = theta_at(use[l]);
            bs.refresh(theta, opts.n_inner);
            const double log_s_t = bs.surv_value(0, theta);  // -Lambda(t)
            if (std::exp(log_s_t) == 0.0)
                throw NumericError("survival at the origin underflows to zero at draw " +
                                   std::to_string(use[l]));
            for (int h = 0; h < H; ++h) {
                const double log_s_u = bs.surv_value(h + 1, theta);
                ratios(l, h) = std::min(std::exp(log_s_u - log_s_t), 1.0);
            }
        }
        return ratios;
    }

    DynamicPrediction survival(const TargetSubject& target, const std::vector<double>& horizons,
                               const PredictOptions& opts = {}) const {
        const Eigen::MatrixXd ratios = survival_draws(target, horizons, opts);

        DynamicPrediction out;
        out.origin = target.t;
        out.horizons = horizons;
        out.kind = PredictionKind::survival;
        out.n_mc = static_cast<int>(ratios.rows());
        aggregate(ratios, opts, out);
        return out;
    }

    DynamicPrediction longitudinal(const TargetSubject& target,
                                   const std::vector<double>& horizons,
                                   const PredictOptions& opts = {}) const {
        check_inputs(target, horizons);
        Dataset pseudo = detail::prediction_dataset(target, {});
        const CachedLikelihood pc(model_, pseudo);
        const int H = static_cast<int>(horizons.size());
        const LongitudinalModel& lm = model_.longitudinal();

        // fixed/random design rows at the horizons, independent of theta
        std::vector<Eigen::VectorXd> xs(H), zs(H);
        for (int h = 0; h < H; ++h) {
            xs[h] = lm.design_x(horizons[h], target.w);
            zs[h] = lm.design_z(horizons[h]);
        }

        const std::vector<int> use = draw_indices(opts);
        const int L = static_cast<int>(use.size());
        Eigen::MatrixXd values(L, H);

        BSampler bs = make_b_sampler(pc, opts);
        for (int l = 0; l < L; ++l) {
            const ThetaFull theta = theta_at(use[l]);
            bs.refresh(theta, opts.n_inner);
            for (int h = 0; h < H; ++h) {
                values(l, h) = xs[h].dot(theta.beta) + zs[h].dot(bs.current());
                if (opts.include_noise)
                    values(l, h) += std::sqrt(theta.sigma2) * bs.noise_normal();
            }
        }

        DynamicPrediction out;
        out.origin = target.t;
        out.horizons = horizons;
        out.kind = PredictionKind::longitudinal;
        out.n_mc = L;
        aggregate(values, opts, out);
        return out;
    }

private:
    // Independence Metropolis chain for b given theta. Each refresh rebuilds
    // the Laplace approximation of the conditional density (mode by damped
    // Newton, warm-started from the previous mode) and uses it as the
    // proposal; the last state is carried across theta draws.
    class BSampler {
    public:
        BSampler(const CachedLikelihood& pc, const Eigen::VectorXd& b0, Rng rng)
            : pc_(pc), b_(b0), mode_(b0), rng_(rng) {}

        void refresh(const ThetaFull& theta, int n_inner) {
            const int q = static_cast<int>(b_.size());
            laplace(theta);
            double cur_lp = target(theta, b_);
            double cur_lq = proposal_logdens(b_);
            for (int s = 0; s < n_inner; ++s) {
                const Eigen::VectorXd z = rng_.normal_vector(q);
                const double lu = std::log(rng_.uniform());
                // mode + L^{-T} z has covariance (-H)^{-1}
                const Eigen::VectorXd prop =
                    mode_ + hess_chol_.transpose()
                                .template triangularView<Eigen::Upper>()
                                .solve(z);
                const double lq = -0.5 * z.squaredNorm() + logdet_;
                double lp = neg_inf;
                try {
                    lp = target(theta, prop);
                } catch (const NumericError&) {
                }
                if (std::isfinite(lp) && lu < (lp - lq) - (cur_lp - cur_lq)) {
                    b_ = prop;
                    cur_lp = lp;
                    cur_lq = lq;
                }
            }
        }

        const Eigen::VectorXd& current() const { return b_; }

        // delta log h - Lambda for pseudo subject i at the current b; with
        // delta = 0 this is log S.
        double surv_value(int i, const ThetaFull& theta) const {
            return pc_.survival_term(i, theta.beta, b_, theta.surv);
        }

        double noise_normal() { return rng_.normal(); }

    private:
        void laplace(const ThetaFull& theta) {
            const int q = static_cast<int>(mode_.size());
            Eigen::VectorXd grad(q);
            Eigen::MatrixXd hess(q, q);
            for (int it = 0; it < 30; ++it) {
                pc_.grad_hess_b(0, mode_, theta, grad, hess);
                if (grad.norm() < 1e-9) break;
                const Eigen::VectorXd step = (-hess).llt().solve(grad);
                double scale = 1.0;
                const double f0 = value_or_neg_inf(theta, mode_);
                for (int half = 0; half < 8; ++half) {
                    if (value_or_neg_inf(theta, mode_ + scale * step) > f0) break;
                    scale *= 0.5;
                }
                mode_ += scale * step;
                if (scale * step.norm() < 1e-10) break;
            }
            pc_.grad_hess_b(0, mode_, theta, grad, hess);
            Eigen::LLT<Eigen::MatrixXd> llt(Eigen::MatrixXd(-hess));
            if (llt.info() != Eigen::Success)
                throw NumericError("conditional curvature is not positive definite");
            hess_chol_ = llt.matrixL();
            logdet_ = hess_chol_.diagonal().array().log().sum();
        }

        double proposal_logdens(const Eigen::VectorXd& x) const {
            const Eigen::VectorXd d = hess_chol_.transpose() * (x - mode_);
            return -0.5 * d.squaredNorm() + logdet_;
        }

        double value_or_neg_inf(const ThetaFull& theta, const Eigen::VectorXd& b) const {
            try {
                return target(theta, b);
            } catch (const NumericError&) {
                return neg_inf;
            }
        }

        double target(const ThetaFull& theta, const Eigen::VectorXd& b) const {
            return pc_.gaussian_term(0, theta.beta, b, theta.sigma2) +
                   pc_.survival_term(0, theta.beta, b, theta.surv) + logdens_re(b, theta.D);
        }

        const CachedLikelihood& pc_;
        Eigen::VectorXd b_;
        Eigen::VectorXd mode_;
        Eigen::MatrixXd hess_chol_;  // chol of -H at the mode
        double logdet_ = 0.0;
        Rng rng_;
    };

    void check_inputs(const TargetSubject& target, const std::vector<double>& horizons) const {
        target.validate();
        if (target.w.size() != n_covariates_)
            throw SpecError("target has " + std::to_string(target.w.size()) +
                            " covariates, the fitted model uses " +
                            std::to_string(n_covariates_));
        if (horizons.empty()) throw RangeError("no prediction horizons given");
        for (size_t h = 0; h < horizons.size(); ++h) {
            const double u = horizons[h];
            if (!std::isfinite(u) || u <= target.t)
                throw RangeError("prediction horizon " + to_g17(u) +
                                 " is not beyond the origin " + to_g17(target.t));
            if (h > 0 && u <= horizons[h - 1])
                throw RangeError("prediction horizons must be strictly increasing");
        }
        const LongitudinalModel& lm = model_.longitudinal();
        if (lm.time_basis() == TimeBasis::natural_cubic) {
            for (double u : horizons)
                if (u > lm.boundary_high())
                    throw RangeError("prediction horizon " + to_g17(u) +
                                     " exceeds the time-basis boundary " +
                                     to_g17(lm.boundary_high()));
        }
    }

    std::vector<int> draw_indices(const PredictOptions& opts) const {
        const int total = draws_.n_draws();
        const int L = (opts.n_max_draws > 0 && opts.n_max_draws < total) ? opts.n_max_draws
                                                                         : total;
        std::vector<int> idx(L);
        for (int l = 0; l < L; ++l)
            idx[l] = static_cast<int>((static_cast<long long>(l) * total) / L);
        return idx;
    }

    ThetaFull theta_at(int l) const {
        const Eigen::VectorXd row = draws_.theta.row(l).transpose();
        return layout_.unpack(row);
    }

    BSampler make_b_sampler(const CachedLikelihood& pc, const PredictOptions& opts) const {
        const std::uint64_t seed = opts.seed != 0 ? opts.seed : draws_.seed;
        return BSampler(pc, Eigen::VectorXd::Zero(model_.n_re()), Rng::stream(seed, 0x9d7ull));
    }

    void aggregate(const Eigen::MatrixXd& values, const PredictOptions& opts,
                   DynamicPrediction& out) const {
        const int H = static_cast<int>(values.cols());
        out.point.resize(H);
        out.lower.resize(H);
        out.upper.resize(H);
        for (int h = 0; h < H; ++h) {
            out.point[h] = values.col(h).mean();
            std::vector<double> v(values.col(h).data(), values.col(h).data() + values.rows());
            // quantiles of a degenerate sample can differ from the running
            // mean by rounding; keep the band bracketing the point
            out.lower[h] = std::min(quantile_type7(v, opts.ci_lower), out.point[h]);
            out.upper[h] = std::max(quantile_type7(v, opts.ci_upper), out.point[h]);
        }
    }

    JointModel model_;
    ParamLayout layout_;
    const PosteriorDraws& draws_;
    Eigen::Index n_covariates_;
};

}  // namespace jmbma
