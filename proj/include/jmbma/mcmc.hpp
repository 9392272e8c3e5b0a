#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jmbma/data.hpp"
#include "jmbma/distributions.hpp"
#include "jmbma/errors.hpp"
#include "jmbma/likelihood.hpp"
#include "jmbma/parallel.hpp"
#include "jmbma/rng.hpp"
#include "jmbma/survival.hpp"

namespace jmbma {

struct ChainConfig {
    int n_iter = 20000;
    int n_burnin = 5000;
    int thin = 1;
    std::uint64_t seed = 20140909;
    int adapt_until = -1;  // negative: adapt through the burn-in
    int n_chains = 1;
    int n_threads = 1;
    bool noncentered = false;
    double longitudinal_weight = 1.0;

    void validate() const {
        if (n_iter <= 0) throw ConfigError("n_iter must be positive");
        if (n_burnin < 0) throw ConfigError("n_burnin must be nonnegative");
        if (n_burnin >= n_iter)
            throw ConfigError("n_burnin (" + std::to_string(n_burnin) +
                              ") must be smaller than n_iter (" + std::to_string(n_iter) + ")");
        if (thin <= 0) throw ConfigError("thin must be positive");
        if (n_chains <= 0) throw ConfigError("n_chains must be positive");
        if (n_threads <= 0) throw ConfigError("n_threads must be positive");
        if (!(longitudinal_weight >= 0.0) || !std::isfinite(longitudinal_weight))
            throw ConfigError("longitudinal_weight must be a finite nonnegative number");
        if (retained_per_chain() < 100)
            throw ConfigError("retained draws per chain = " +
                              std::to_string(retained_per_chain()) +
                              ", need at least 100; increase n_iter or reduce thin");
    }

    int retained_per_chain() const { return (n_iter - n_burnin) / thin; }
    int adapt_end() const { return adapt_until < 0 ? n_burnin : adapt_until; }
};

struct PosteriorDraws {
    std::vector<std::string> names;  // scalar parameter names, natural scale
    Eigen::MatrixXd theta;           // n_draws x n_params
    Eigen::MatrixXd b;               // n_draws x (n_subjects * n_re), subject-major
    int n_subjects = 0;
    int n_re = 0;
    int n_chains = 1;
    std::uint64_t seed = 0;
    std::vector<double> logpost_trace;  // every iteration, chains concatenated
    std::map<std::string, double> accept_rates;

    int n_draws() const { return static_cast<int>(theta.rows()); }

    Eigen::VectorXd b_draw(int draw, int subject) const {
        return b.row(draw).segment(subject * n_re, n_re).transpose();
    }
};

namespace detail {

// Random-walk proposal with Robbins-Monro scale tuning and a running
// empirical covariance (Haario-style). Adaptation stops when record() is
// called with adapting=false, so the kernel is fixed after the adaptation
// window.
class AdaptiveProposal {
public:
    AdaptiveProposal() = default;

    AdaptiveProposal(int dim, double init_scale)
        : d_(dim),
          target_(dim == 1 ? 0.44 : 0.234),
          mean_(Eigen::VectorXd::Zero(dim)),
          m2_(Eigen::MatrixXd::Zero(dim, dim)),
          chol_(Eigen::MatrixXd::Identity(dim, dim) * init_scale) {}

    Eigen::VectorXd propose(const Eigen::VectorXd& x, Rng& rng) {
        return x + std::exp(ls_) * (chol_ * rng.normal_vector(d_));
    }

    void record(const Eigen::VectorXd& x, bool accepted, bool adapting) {
        ++n_total_;
        if (accepted) ++n_accept_;
        if (!adapting) return;
        ++t_;
        const double step = std::min(0.1, 1.0 / std::sqrt(static_cast<double>(t_)));
        ls_ = std::clamp(ls_ + step * ((accepted ? 1.0 : 0.0) - target_), -12.0, 8.0);
        const Eigen::VectorXd delta = x - mean_;
        mean_ += delta / static_cast<double>(t_);
        m2_.noalias() += delta * (x - mean_).transpose();
        if (t_ >= 2 * d_ + 10 && t_ % 25 == 0) refresh_chol();
    }

    double rate() const {
        return n_total_ > 0 ? static_cast<double>(n_accept_) / static_cast<double>(n_total_)
                            : 0.0;
    }

private:
    void refresh_chol() {
        Eigen::MatrixXd cov = m2_ / static_cast<double>(t_ - 1);
        const double ridge = 1e-10 + 1e-8 * cov.trace() / d_;
        cov.diagonal().array() += ridge;
        cov *= 2.38 * 2.38 / d_;
        Eigen::LLT<Eigen::MatrixXd> llt(cov);
        if (llt.info() == Eigen::Success) chol_ = llt.matrixL();
    }

    int d_ = 0;
    double target_ = 0.234;
    double ls_ = 0.0;
    long t_ = 0;
    long n_total_ = 0;
    long n_accept_ = 0;
    Eigen::VectorXd mean_;
    Eigen::MatrixXd m2_;
    Eigen::MatrixXd chol_;
};

// Lower-triangular Cholesky factor with logged diagonal, packed row-major
// over the lower triangle. Matches the covariance coordinates of
// ParamLayout::to_natural.
inline Eigen::MatrixXd chol_from_coords(const Eigen::VectorXd& v, int q) {
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(q, q);
    int k = 0;
    for (int r = 0; r < q; ++r)
        for (int c = 0; c <= r; ++c) {
            L(r, c) = (r == c) ? std::exp(v[k]) : v[k];
            ++k;
        }
    return L;
}

inline Eigen::VectorXd coords_from_chol(const Eigen::MatrixXd& L) {
    const int q = static_cast<int>(L.rows());
    Eigen::VectorXd v(q * (q + 1) / 2);
    int k = 0;
    for (int r = 0; r < q; ++r)
        for (int c = 0; c <= r; ++c) {
            v[k] = (r == c) ? std::log(L(r, r)) : L(r, c);
            ++k;
        }
    return v;
}

// log |J| of the map (coords -> D lower triangle): 2^q prod l_jj^(q-j+2)
inline double chol_coords_log_jacobian(const Eigen::VectorXd& v, int q) {
    double lj = q * std::log(2.0);
    for (int j = 0; j < q; ++j) lj += (q - j + 1) * v[(j + 1) * (j + 2) / 2 - 1];
    return lj;
}

}  // namespace detail

// Adaptive random-walk Metropolis-within-Gibbs over the blocks
// (beta), (gamma, gamma_h0, alpha), (sigma2), (D), and each (b_i).
// sigma2, the weibull shape, and the covariance diagonal are sampled on the
// log scale with the matching Jacobian terms in the acceptance ratio.
class Sampler {
public:
    Sampler(const CachedLikelihood& cl, const ChainConfig& cfg)
        : cl_(cl),
          model_(cl.model()),
          cfg_(cfg),
          layout_(cl.model()),
          pool_(static_cast<unsigned>(std::max(1, cfg.n_threads))),
          weibull_(cl.model().baseline_basis() == nullptr) {
        cfg_.validate();
        if (cl_.n_subjects() == 0) throw ConfigError("cannot sample with an empty dataset");
    }

    PosteriorDraws run() {
        const int R = cfg_.retained_per_chain();
        const int n = cl_.n_subjects();
        const int q = model_.n_re();
        PosteriorDraws out;
        out.names = layout_.names();
        out.theta.resize(static_cast<Eigen::Index>(R) * cfg_.n_chains, layout_.size());
        out.b.resize(static_cast<Eigen::Index>(R) * cfg_.n_chains,
                     static_cast<Eigen::Index>(n) * q);
        out.n_subjects = n;
        out.n_re = q;
        out.n_chains = cfg_.n_chains;
        out.seed = cfg_.seed;
        out.logpost_trace.assign(static_cast<size_t>(cfg_.n_iter) * cfg_.n_chains, 0.0);
        std::map<std::string, double> rate_sums;
        for (int c = 0; c < cfg_.n_chains; ++c) {
            run_chain(c, out);
            for (const auto& [k, v] : chain_rates_) rate_sums[k] += v;
        }
        for (auto& [k, v] : rate_sums) out.accept_rates[k] = v / cfg_.n_chains;
        return out;
    }

private:
    // ---- state of the current chain -------------------------------------
    struct State {
        ThetaFull theta;
        Eigen::VectorXd surv_coords;  // [gamma, gamma_h0 | log shape, alpha]
        double log_sigma2 = 0.0;
        Eigen::VectorXd d_coords;  // Cholesky coordinates of D
        Eigen::MatrixXd L;         // Cholesky factor of D
        double logdetL = 0.0;
        std::vector<Eigen::VectorXd> b;
        std::vector<Eigen::VectorXd> u;  // L^{-1} b (used when noncentered)

        Eigen::VectorXd ss;    // per-subject residual sum of squares
        Eigen::VectorXd surv;  // per-subject delta*log h(T) - Lambda(T)
        Eigen::VectorXd re;    // per-subject log N(b_i; 0, D)
        std::vector<Eigen::VectorXd> fx;   // association values at nodes
        std::vector<Eigen::VectorXd> fxT;  // association values at T
        double lp_prior = 0.0;
    };

    double re_density(const State& st, const Eigen::VectorXd& b_i) const {
        const int q = model_.n_re();
        Eigen::VectorXd t = st.L.template triangularView<Eigen::Lower>().solve(b_i);
        return -0.5 * q * std::log(2.0 * M_PI) - st.logdetL - 0.5 * t.squaredNorm();
    }

    double gauss_total(const State& st, double sigma2) const {
        if (cfg_.longitudinal_weight == 0.0) return 0.0;
        return cfg_.longitudinal_weight *
               CachedLikelihood::gaussian_from_ss(st.ss.sum(), n_obs_total_, sigma2);
    }

    double gauss_one(const State& st, int i, double ss_value) const {
        if (cfg_.longitudinal_weight == 0.0) return 0.0;
        return cfg_.longitudinal_weight *
               CachedLikelihood::gaussian_from_ss(ss_value, n_obs_[i], st.theta.sigma2);
    }

    SurvParams surv_from_coords(const Eigen::VectorXd& s) const {
        SurvParams sp;
        const int ng = model_.n_gamma();
        const int na = model_.n_alpha();
        sp.gamma = s.head(ng);
        if (weibull_) {
            sp.weibull_shape = std::exp(s[ng]);
            sp.gamma_h0.resize(0);
            sp.alpha = s.segment(ng + 1, na);
        } else {
            sp.gamma_h0 = s.segment(ng, model_.n_baseline());
            sp.alpha = s.segment(ng + model_.n_baseline(), na);
        }
        return sp;
    }

    Eigen::VectorXd coords_from_surv(const SurvParams& sp) const {
        const int ng = model_.n_gamma();
        const int na = model_.n_alpha();
        const int nb = weibull_ ? 1 : model_.n_baseline();
        Eigen::VectorXd s(ng + nb + na);
        s.head(ng) = sp.gamma;
        if (weibull_)
            s[ng] = std::log(sp.weibull_shape);
        else
            s.segment(ng, nb) = sp.gamma_h0;
        s.segment(ng + nb, na) = sp.alpha;
        return s;
    }

    // Jacobian of the sampling coordinates for the survival block: only the
    // log-shape coordinate contributes.
    double surv_log_jacobian(const Eigen::VectorXd& s) const {
        return weibull_ ? s[model_.n_gamma()] : 0.0;
    }

    void initialize(State& st) {
        const int n = cl_.n_subjects();
        const int p = model_.n_beta();
        const int q = model_.n_re();

        // pooled least squares for beta / sigma2
        Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(p, p);
        Eigen::VectorXd xty = Eigen::VectorXd::Zero(p);
        n_obs_.resize(n);
        n_obs_total_ = 0.0;
        for (int i = 0; i < n; ++i) {
            const SubjectCache& c = cl_.cache(i);
            xtx.noalias() += c.X.transpose() * c.X;
            xty.noalias() += c.X.transpose() * c.y;
            n_obs_[i] = static_cast<double>(c.y.size());
            n_obs_total_ += n_obs_[i];
        }
        xtx.diagonal().array() += 1e-8;
        st.theta.beta = xtx.ldlt().solve(xty);
        double rss = 0.0;
        for (int i = 0; i < n; ++i) {
            const SubjectCache& c = cl_.cache(i);
            rss += (c.y - c.X * st.theta.beta).squaredNorm();
        }
        st.theta.sigma2 = std::max(rss / std::max(n_obs_total_ - p, 1.0), 1e-6);
        st.log_sigma2 = std::log(st.theta.sigma2);

        // survival coefficients: crude constant-hazard start
        double total_time = 0.0;
        double events = 0.0;
        for (const auto& s : cl_.dataset().subjects) {
            total_time += s.T;
            events += s.delta;
        }
        const double log_rate =
            std::log(std::max(events, 0.5) / std::max(total_time, 1e-12));
        st.theta.surv.gamma = Eigen::VectorXd::Zero(model_.n_gamma());
        st.theta.surv.alpha = Eigen::VectorXd::Zero(model_.n_alpha());
        if (weibull_) {
            st.theta.surv.weibull_shape = 1.0;
            st.theta.surv.gamma_h0.resize(0);
        } else {
            st.theta.surv.gamma_h0 = Eigen::VectorXd::Zero(model_.n_baseline());
            st.theta.surv.gamma_h0[0] = log_rate;
        }
        st.surv_coords = coords_from_surv(st.theta.surv);

        st.theta.D = Eigen::MatrixXd::Identity(q, q);
        st.L = Eigen::MatrixXd::Identity(q, q);
        st.logdetL = 0.0;
        st.d_coords = detail::coords_from_chol(st.L);
        st.b.assign(n, Eigen::VectorXd::Zero(q));
        st.u.assign(n, Eigen::VectorXd::Zero(q));

        st.ss.resize(n);
        st.surv.resize(n);
        st.re.resize(n);
        st.fx.resize(n);
        st.fxT.resize(n);
        fx_prop_.resize(n);
        fxT_prop_.resize(n);
        ss_prop_.resize(n);
        surv_prop_.resize(n);
        re_prop_.resize(n);
        for (int i = 0; i < n; ++i) {
            st.ss[i] = cl_.residual_ss(i, st.theta.beta, st.b[i]);
            cl_.assoc_values(i, st.theta.beta, st.b[i], st.fx[i], st.fxT[i]);
            st.surv[i] = cl_.survival_term_from_assoc(i, st.fx[i], st.fxT[i], st.theta.surv);
            st.re[i] = re_density(st, st.b[i]);
        }
        st.lp_prior = logprior(st.theta, model_.spec().priors, weibull_);

        if (!std::isfinite(logpost(st)))
            throw NumericError("initial log posterior is not finite");
    }

    double logpost(const State& st) const {
        return gauss_total(st, st.theta.sigma2) + st.surv.sum() + st.re.sum() + st.lp_prior;
    }

    void update_beta(State& st, Rng& rng, bool adapting) {
        const int n = cl_.n_subjects();
        const Eigen::VectorXd prop = prop_beta_.propose(st.theta.beta, rng);
        const double lu = std::log(rng.uniform());
        double lp_new = neg_inf;
        double prior_new = neg_inf;
        bool ok = true;
        try {
            ThetaFull cand = st.theta;
            cand.beta = prop;
            prior_new = logprior(cand, model_.spec().priors, weibull_);
            if (prior_new == neg_inf) {
                ok = false;
            } else {
                pool_.parallel_for(n, [&](size_t i) {
                    ss_prop_[i] = cl_.residual_ss(static_cast<int>(i), prop, st.b[i]);
                    cl_.assoc_values(static_cast<int>(i), prop, st.b[i], fx_prop_[i],
                                     fxT_prop_[i]);
                    surv_prop_[i] = cl_.survival_term_from_assoc(
                        static_cast<int>(i), fx_prop_[i], fxT_prop_[i], st.theta.surv);
                });
                double ssum = 0.0, survsum = 0.0;
                for (int i = 0; i < n; ++i) {
                    ssum += ss_prop_[i];
                    survsum += surv_prop_[i];
                }
                double gnew = 0.0;
                if (cfg_.longitudinal_weight != 0.0)
                    gnew = cfg_.longitudinal_weight *
                           CachedLikelihood::gaussian_from_ss(ssum, n_obs_total_,
                                                              st.theta.sigma2);
                lp_new = gnew + survsum + prior_new;
            }
        } catch (const NumericError&) {
            ok = false;
        }
        const double lp_old = gauss_total(st, st.theta.sigma2) + st.surv.sum() + st.lp_prior;
        const bool accept = ok && std::isfinite(lp_new) && (lu < lp_new - lp_old);
        if (accept) {
            st.theta.beta = prop;
            for (int i = 0; i < n; ++i) {
                st.ss[i] = ss_prop_[i];
                st.surv[i] = surv_prop_[i];
                std::swap(st.fx[i], fx_prop_[i]);
                std::swap(st.fxT[i], fxT_prop_[i]);
            }
            st.lp_prior = prior_new;
        }
        prop_beta_.record(st.theta.beta, accept, adapting);
    }

    void update_surv(State& st, Rng& rng, bool adapting) {
        const int n = cl_.n_subjects();
        const Eigen::VectorXd prop = prop_surv_.propose(st.surv_coords, rng);
        const double lu = std::log(rng.uniform());
        double lp_new = neg_inf;
        double prior_new = neg_inf;
        SurvParams sp;
        bool ok = true;
        try {
            sp = surv_from_coords(prop);
            ThetaFull cand = st.theta;
            cand.surv = sp;
            prior_new = logprior(cand, model_.spec().priors, weibull_);
            if (prior_new == neg_inf) {
                ok = false;
            } else {
                pool_.parallel_for(n, [&](size_t i) {
                    surv_prop_[i] = cl_.survival_term_from_assoc(static_cast<int>(i), st.fx[i],
                                                                 st.fxT[i], sp);
                });
                double survsum = 0.0;
                for (int i = 0; i < n; ++i) survsum += surv_prop_[i];
                lp_new = survsum + prior_new + surv_log_jacobian(prop);
            }
        } catch (const NumericError&) {
            ok = false;
        }
        const double lp_old =
            st.surv.sum() + st.lp_prior + surv_log_jacobian(st.surv_coords);
        const bool accept = ok && std::isfinite(lp_new) && (lu < lp_new - lp_old);
        if (accept) {
            st.surv_coords = prop;
            st.theta.surv = sp;
            for (int i = 0; i < n; ++i) st.surv[i] = surv_prop_[i];
            st.lp_prior = prior_new;
        }
        prop_surv_.record(st.surv_coords, accept, adapting);
    }

    void update_sigma2(State& st, Rng& rng, bool adapting) {
        Eigen::VectorXd cur(1);
        cur[0] = st.log_sigma2;
        const Eigen::VectorXd prop = prop_sigma2_.propose(cur, rng);
        const double lu = std::log(rng.uniform());
        const double s2_new = std::exp(prop[0]);
        ThetaFull cand = st.theta;
        cand.sigma2 = s2_new;
        const double prior_new = logprior(cand, model_.spec().priors, weibull_);
        double lp_new = neg_inf;
        if (prior_new != neg_inf && std::isfinite(s2_new) && s2_new > 0.0)
            lp_new = gauss_total(st, s2_new) + prior_new + prop[0];
        const double lp_old =
            gauss_total(st, st.theta.sigma2) + st.lp_prior + st.log_sigma2;
        const bool accept = std::isfinite(lp_new) && (lu < lp_new - lp_old);
        if (accept) {
            st.theta.sigma2 = s2_new;
            st.log_sigma2 = prop[0];
            st.lp_prior = prior_new;
        }
        cur[0] = st.log_sigma2;
        prop_sigma2_.record(cur, accept, adapting);
    }

    void update_d(State& st, Rng& rng, bool adapting) {
        const int n = cl_.n_subjects();
        const int q = model_.n_re();
        const Eigen::VectorXd prop = prop_d_.propose(st.d_coords, rng);
        const double lu = std::log(rng.uniform());
        const Eigen::MatrixXd L_new = detail::chol_from_coords(prop, q);
        const double logdet_new = L_new.diagonal().array().log().sum();
        ThetaFull cand = st.theta;
        cand.D = L_new * L_new.transpose();
        const double prior_new = logprior(cand, model_.spec().priors, weibull_);
        const double jac_new = detail::chol_coords_log_jacobian(prop, q);
        const double jac_old = detail::chol_coords_log_jacobian(st.d_coords, q);
        bool ok = prior_new != neg_inf && std::isfinite(logdet_new);

        double lp_new = neg_inf;
        double lp_old;
        if (cfg_.noncentered) {
            // b_i = L u_i changes with L, so the data terms move too; the
            // standard-normal density of u is constant and cancels.
            lp_old = gauss_total(st, st.theta.sigma2) + st.surv.sum() + st.lp_prior + jac_old;
            if (ok) {
                try {
                    pool_.parallel_for(n, [&](size_t i) {
                        const Eigen::VectorXd b_new = L_new * st.u[i];
                        ss_prop_[i] =
                            cl_.residual_ss(static_cast<int>(i), st.theta.beta, b_new);
                        cl_.assoc_values(static_cast<int>(i), st.theta.beta, b_new,
                                         fx_prop_[i], fxT_prop_[i]);
                        surv_prop_[i] = cl_.survival_term_from_assoc(
                            static_cast<int>(i), fx_prop_[i], fxT_prop_[i], st.theta.surv);
                    });
                    double ssum = 0.0, survsum = 0.0;
                    for (int i = 0; i < n; ++i) {
                        ssum += ss_prop_[i];
                        survsum += surv_prop_[i];
                    }
                    double gnew = 0.0;
                    if (cfg_.longitudinal_weight != 0.0)
                        gnew = cfg_.longitudinal_weight *
                               CachedLikelihood::gaussian_from_ss(ssum, n_obs_total_,
                                                                  st.theta.sigma2);
                    lp_new = gnew + survsum + prior_new + jac_new;
                } catch (const NumericError&) {
                    ok = false;
                }
            }
        } else {
            lp_old = st.re.sum() + st.lp_prior + jac_old;
            if (ok) {
                double resum = 0.0;
                for (int i = 0; i < n; ++i) {
                    Eigen::VectorXd t =
                        L_new.template triangularView<Eigen::Lower>().solve(st.b[i]);
                    re_prop_[i] = -0.5 * q * std::log(2.0 * M_PI) - logdet_new -
                                  0.5 * t.squaredNorm();
                    resum += re_prop_[i];
                }
                lp_new = resum + prior_new + jac_new;
            }
        }

        const bool accept = ok && std::isfinite(lp_new) && (lu < lp_new - lp_old);
        if (accept) {
            st.d_coords = prop;
            st.L = L_new;
            st.logdetL = logdet_new;
            st.theta.D = cand.D;
            st.lp_prior = prior_new;
            if (cfg_.noncentered) {
                for (int i = 0; i < n; ++i) {
                    st.b[i] = st.L * st.u[i];
                    st.ss[i] = ss_prop_[i];
                    st.surv[i] = surv_prop_[i];
                    std::swap(st.fx[i], fx_prop_[i]);
                    std::swap(st.fxT[i], fxT_prop_[i]);
                    st.re[i] = re_density(st, st.b[i]);
                }
            } else {
                for (int i = 0; i < n; ++i) st.re[i] = re_prop_[i];
            }
        }
        prop_d_.record(st.d_coords, accept, adapting);
    }

    // Per-subject update; safe to run concurrently across subjects. Returns
    // whether the proposal was accepted.
    bool update_b_one(State& st, int i, Rng& rng) {
        Eigen::VectorXd cur = cfg_.noncentered ? st.u[i] : st.b[i];
        const Eigen::VectorXd prop = prop_b_[i].propose(cur, rng);
        const double lu = std::log(rng.uniform());
        bool ok = true;
        double lp_new = neg_inf;
        double re_new = 0.0;
        Eigen::VectorXd b_new;
        try {
            b_new = cfg_.noncentered ? Eigen::VectorXd(st.L * prop) : prop;
            ss_prop_[i] = cl_.residual_ss(i, st.theta.beta, b_new);
            cl_.assoc_values(i, st.theta.beta, b_new, fx_prop_[i], fxT_prop_[i]);
            surv_prop_[i] =
                cl_.survival_term_from_assoc(i, fx_prop_[i], fxT_prop_[i], st.theta.surv);
            re_new = re_density(st, b_new);
            lp_new = gauss_one(st, i, ss_prop_[i]) + surv_prop_[i] + re_new;
        } catch (const NumericError&) {
            ok = false;
        }
        // The noncentered target has N(u; 0, I) in place of N(b; 0, D); the
        // two differ by logdetL, which is the same on both sides of the
        // ratio, so the stored natural-scale density works for both.
        const double lp_old = gauss_one(st, i, st.ss[i]) + st.surv[i] + st.re[i];
        const bool accept = ok && std::isfinite(lp_new) && (lu < lp_new - lp_old);
        if (accept) {
            st.b[i] = b_new;
            if (cfg_.noncentered) st.u[i] = prop;
            st.ss[i] = ss_prop_[i];
            st.surv[i] = surv_prop_[i];
            std::swap(st.fx[i], fx_prop_[i]);
            std::swap(st.fxT[i], fxT_prop_[i]);
            st.re[i] = re_new;
        }
        return accept;
    }

    void run_chain(int chain, PosteriorDraws& out) {
        const int n = cl_.n_subjects();
        const int q = model_.n_re();
        const int p = model_.n_beta();
        const int d_surv =
            model_.n_gamma() + (weibull_ ? 1 : model_.n_baseline()) + model_.n_alpha();
        const int d_cov = q * (q + 1) / 2;

        State st;
        initialize(st);

        prop_beta_ = detail::AdaptiveProposal(p, 0.05);
        prop_surv_ = detail::AdaptiveProposal(d_surv, 0.05);
        prop_sigma2_ = detail::AdaptiveProposal(1, 0.3);
        prop_d_ = detail::AdaptiveProposal(d_cov, 0.05);
        prop_b_.assign(n, detail::AdaptiveProposal(q, 0.25));

        const std::uint64_t chain_base = static_cast<std::uint64_t>(chain) * 1000003ULL;
        Rng rng_beta = Rng::stream(cfg_.seed, chain_base + 1);
        Rng rng_surv = Rng::stream(cfg_.seed, chain_base + 2);
        Rng rng_sigma2 = Rng::stream(cfg_.seed, chain_base + 3);
        Rng rng_d = Rng::stream(cfg_.seed, chain_base + 4);
        rng_b_.clear();
        rng_b_.reserve(n);
        for (int i = 0; i < n; ++i)
            rng_b_.push_back(Rng::stream(cfg_.seed, chain_base + 100 + i));
        std::vector<long> b_accepts(n, 0);

        const int R = cfg_.retained_per_chain();
        int stored = 0;
        for (int it = 1; it <= cfg_.n_iter; ++it) {
            const bool adapting = it <= cfg_.adapt_end();
            update_beta(st, rng_beta, adapting);
            update_surv(st, rng_surv, adapting);
            update_sigma2(st, rng_sigma2, adapting);
            update_d(st, rng_d, adapting);
            pool_.parallel_for(n, [&](size_t i) {
                const bool acc = update_b_one(st, static_cast<int>(i), rng_b_[i]);
                if (acc) ++b_accepts[i];
                prop_b_[i].record(cfg_.noncentered ? st.u[i] : st.b[i], acc, adapting);
            });

            out.logpost_trace[static_cast<size_t>(chain) * cfg_.n_iter + it - 1] = logpost(st);

            if (it > cfg_.n_burnin && (it - cfg_.n_burnin) % cfg_.thin == 0 && stored < R) {
                const Eigen::Index row = static_cast<Eigen::Index>(chain) * R + stored;
                out.theta.row(row) = layout_.pack(st.theta).transpose();
                for (int i = 0; i < n; ++i)
                    out.b.row(row).segment(static_cast<Eigen::Index>(i) * q, q) =
                        st.b[i].transpose();
                ++stored;
            }
        }

        chain_rates_.clear();
        chain_rates_["beta"] = prop_beta_.rate();
        chain_rates_["survival"] = prop_surv_.rate();
        chain_rates_["sigma2"] = prop_sigma2_.rate();
        chain_rates_["D"] = prop_d_.rate();
        double b_rate = 0.0;
        for (int i = 0; i < n; ++i)
            b_rate += static_cast<double>(b_accepts[i]) / cfg_.n_iter;
        chain_rates_["b"] = b_rate / n;
    }

    const CachedLikelihood& cl_;
    const JointModel& model_;
    ChainConfig cfg_;
    ParamLayout layout_;
    ThreadPool pool_;
    bool weibull_ = false;

    std::vector<double> n_obs_;
    double n_obs_total_ = 0.0;

    detail::AdaptiveProposal prop_beta_, prop_surv_, prop_sigma2_, prop_d_;
    std::vector<detail::AdaptiveProposal> prop_b_;
    std::vector<Rng> rng_b_;
    std::map<std::string, double> chain_rates_;

    // proposal scratch, one slot per subject
    std::vector<Eigen::VectorXd> fx_prop_, fxT_prop_;
    std::vector<double> ss_prop_, surv_prop_, re_prop_;
};

inline PosteriorDraws fit(const Dataset& ds, const JointModelSpec& spec,
                          const ChainConfig& cfg) {
    spec.validate();
    JointModel model(ds, spec);
    CachedLikelihood cl(model, ds);
    Sampler sampler(cl, cfg);
    return sampler.run();
}

// ---------------------------------------------------------------------------
// Posterior summaries
// ---------------------------------------------------------------------------

struct SummaryRow {
    std::string name;
    double mean = 0.0;
    double sd = 0.0;
    double q025 = 0.0;
    double q500 = 0.0;
    double q975 = 0.0;
    double ess = 0.0;
    double lag1 = 0.0;
};

// Linear-interpolation sample quantile (R type 7).
inline double quantile_type7(std::vector<double> x, double p) {
    if (x.empty()) throw RangeError("quantile of an empty sample");
    std::sort(x.begin(), x.end());
    const double h = (static_cast<double>(x.size()) - 1.0) * p;
    const size_t lo = static_cast<size_t>(std::floor(h));
    const size_t hi = std::min(lo + 1, x.size() - 1);
    const double frac = h - static_cast<double>(lo);
    return x[lo] + frac * (x[hi] - x[lo]);
}

// Pearson correlation of consecutive pairs; an exactly alternating trace
// gives -1.
inline double lag1_autocorr(const Eigen::VectorXd& x) {
    const Eigen::Index n = x.size();
    if (n < 2) return 0.0;
    const Eigen::VectorXd a = x.head(n - 1);
    const Eigen::VectorXd b = x.tail(n - 1);
    const Eigen::VectorXd da = a.array() - a.mean();
    const Eigen::VectorXd db = b.array() - b.mean();
    const double den = std::sqrt(da.squaredNorm()) * std::sqrt(db.squaredNorm());
    if (den == 0.0) return 0.0;
    return da.dot(db) / den;
}

// Effective sample size by Geyer's initial monotone positive sequence,
// capped at the number of draws.
inline double effective_sample_size(const Eigen::VectorXd& x) {
    const Eigen::Index n = x.size();
    if (n < 4) return static_cast<double>(n);
    const Eigen::VectorXd d = x.array() - x.mean();
    const double g0 = d.squaredNorm() / n;
    if (g0 == 0.0) return static_cast<double>(n);
    auto gamma_at = [&](Eigen::Index k) {
        return d.head(n - k).dot(d.tail(n - k)) / n;
    };
    double tau = 1.0;  // rho_0
    double prev_pair = neg_inf;
    for (Eigen::Index m = 0; 2 * m + 1 < n; ++m) {
        if (m == 0) {
            double pair = 1.0 + gamma_at(1) / g0;
            if (pair <= 0.0) break;
            prev_pair = pair;
            tau = 2.0 * pair - 1.0;
            continue;
        }
        double pair = (gamma_at(2 * m) + gamma_at(2 * m + 1)) / g0;
        if (pair <= 0.0) break;
        pair = std::min(pair, prev_pair);
        prev_pair = pair;
        tau += 2.0 * pair;
    }
    tau = std::max(tau, 1e-12);
    return std::min(static_cast<double>(n), n / tau);
}

inline std::vector<SummaryRow> summarize(const PosteriorDraws& draws) {
    if (draws.n_draws() == 0) throw RangeError("summarize needs at least one draw");
    const int n = draws.n_draws();
    std::vector<SummaryRow> rows;
    rows.reserve(draws.names.size());
    for (size_t j = 0; j < draws.names.size(); ++j) {
        const Eigen::VectorXd col = draws.theta.col(static_cast<Eigen::Index>(j));
        SummaryRow r;
        r.name = draws.names[j];
        r.mean = col.mean();
        if (n > 1) {
            r.sd = std::sqrt((col.array() - r.mean).square().sum() / (n - 1));
        }
        std::vector<double> v(col.data(), col.data() + col.size());
        r.q025 = quantile_type7(v, 0.025);
        r.q500 = quantile_type7(v, 0.5);
        r.q975 = quantile_type7(v, 0.975);
        r.ess = effective_sample_size(col);
        r.lag1 = lag1_autocorr(col);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace jmbma
