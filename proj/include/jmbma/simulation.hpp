#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "jmbma/bma.hpp"
#include "jmbma/data.hpp"
#include "jmbma/errors.hpp"
#include "jmbma/likelihood.hpp"
#include "jmbma/mcmc.hpp"
#include "jmbma/prediction.hpp"
#include "jmbma/rng.hpp"
#include "jmbma/survival.hpp"
#include "jmbma/text.hpp"

namespace jmbma {

enum class Scenario { I, II, III, IV };

inline std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::I: return "I";
        case Scenario::II: return "II";
        case Scenario::III: return "III";
        case Scenario::IV: return "IV";
    }
    throw ConfigError("unknown scenario");
}

inline Scenario parse_scenario(const std::string& text) {
    if (text == "I" || text == "1") return Scenario::I;
    if (text == "II" || text == "2") return Scenario::II;
    if (text == "III" || text == "3") return Scenario::III;
    if (text == "IV" || text == "4") return Scenario::IV;
    throw ConfigError("scenario must be one of I, II, III, IV");
}

// Each scenario generates events from one association structure; fits use
// the full candidate menu below.
inline Association scenario_association(Scenario s) {
    switch (s) {
        case Scenario::I: return Association::value;
        case Scenario::II: return Association::value_slope;
        case Scenario::III: return Association::cumulative;
        case Scenario::IV: return Association::random_effects;
    }
    throw ConfigError("unknown scenario");
}

inline std::vector<Association> candidate_associations() {
    return {Association::value, Association::value_slope, Association::cumulative,
            Association::weighted_cumulative, Association::random_effects};
}

inline std::vector<std::string> candidate_labels() {
    return {"value", "value_slope", "cumulative", "weighted_cumulative", "random_effects"};
}

inline int true_model_index(Scenario s) {
    switch (s) {
        case Scenario::I: return 0;
        case Scenario::II: return 1;
        case Scenario::III: return 2;
        case Scenario::IV: return 4;
    }
    throw ConfigError("unknown scenario");
}

struct ScenarioConfig {
    Scenario scenario = Scenario::I;
    int n_subjects = 300;
    double followup = 19.0;
    int n_meas = 10;  // baseline plus n_meas-1 random follow-up times
    double weibull_shape = 1.2;
    ThetaFull true_params;
    double censoring_target = 0.45;
    int n_datasets = 200;
    std::uint64_t seed = 20140909ull;
    double t_max = 0.0;  // positive value skips censoring calibration

    void validate() const {
        if (n_subjects < 1) throw ConfigError("n_subjects must be positive");
        if (!(followup > 0.0) || !std::isfinite(followup))
            throw ConfigError("followup must be positive and finite");
        if (n_meas < 2) throw ConfigError("n_meas must be at least 2");
        if (!(weibull_shape > 0.0)) throw ConfigError("weibull_shape must be positive");
        if (!(censoring_target > 0.0 && censoring_target < 1.0))
            throw ConfigError("censoring_target must lie in (0,1)");
        if (n_datasets < 1) throw ConfigError("n_datasets must be positive");
        if (t_max < 0.0 || !std::isfinite(t_max))
            throw ConfigError("t_max must be finite and nonnegative");
    }
};

// Baseline covariate frame shared by every simulated subject: a constant
// column carrying the log baseline scale and a two-arm treatment factor.
inline Dataset scenario_frame() {
    Dataset ds;
    ds.covariate_names = {"one", "treat.g1"};
    FactorEncoding treat;
    treat.column = "treat";
    treat.levels = {"g0", "g1"};
    treat.reference = 0;
    treat.dummy_cols = {1};
    ds.factors.push_back(treat);
    return ds;
}

// Candidate model on the simulation frame: treatment-specific natural cubic
// trajectories with internal knots at 2.1 and 5.5 years, Weibull baseline.
inline JointModelSpec scenario_model_spec(Association assoc, double followup = 19.0) {
    JointModelSpec spec;
    spec.longitudinal.time_basis = TimeBasis::natural_cubic;
    spec.longitudinal.internal_knots = {2.1, 5.5};
    spec.longitudinal.boundary = std::make_pair(0.0, followup);
    spec.longitudinal.group = "treat";
    spec.assoc = assoc;
    spec.baseline.kind = BaselineKind::weibull;
    spec.survival.covariates = {"one", "treat"};
    if (assoc == Association::weighted_cumulative) spec.weight_fn = WeightFnSpec{};
    return spec;
}

// Frozen truth for the four scenarios; configs/scenarios.json mirrors these
// values for the command line front end.
inline ScenarioConfig default_scenario(Scenario s) {
    ScenarioConfig cfg;
    cfg.scenario = s;
    cfg.weibull_shape = 1.2;
    ThetaFull& th = cfg.true_params;
    th.beta.resize(8);
    th.beta << 4.0, 4.5, 2.2, 3.0, 3.5, 4.5, 1.5, 2.2;
    th.sigma2 = 0.36;
    th.D = Eigen::Vector4d(0.81, 0.49, 0.49, 0.25).asDiagonal();
    th.surv.gamma = Eigen::Vector2d(-4.7, -0.3);
    th.surv.gamma_h0.resize(0);
    th.surv.weibull_shape = cfg.weibull_shape;
    switch (s) {
        case Scenario::I:
            th.surv.alpha = Eigen::VectorXd::Constant(1, 0.25);
            break;
        case Scenario::II:
            th.surv.alpha.resize(2);
            th.surv.alpha << 0.2, 0.9;
            th.surv.gamma(0) = -4.5;
            break;
        case Scenario::III:
            th.surv.alpha = Eigen::VectorXd::Constant(1, 0.035);
            th.surv.gamma(0) = -5.9;
            break;
        case Scenario::IV:
            th.surv.alpha.resize(4);
            th.surv.alpha << 0.5, 0.35, 0.35, 0.25;
            th.surv.gamma(0) = -3.2;
            break;
    }
    return cfg;
}

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Monotone bracketed inversion of the cumulative hazard: the t solving
// cum(t) = c, or +infinity when the hazard cannot accumulate c within a
// horizon of 128 follow-up lengths. A hazard overflow at a trial point
// counts as an unbounded accumulated hazard there, which keeps the bracket
// valid; a model that is not evaluable past its support simply places the
// event beyond the horizon.
template <class F>
double solve_event_time(const F& cum, double c, double followup) {
    auto g = [&](double t) -> double {
        try {
            return cum(t) - c;
        } catch (const NumericError&) {
            return std::numeric_limits<double>::max();
        }
    };
    double a = 0.0, fa = -c;
    double b = followup, fb = g(b);
    for (int grow = 0; fb < 0.0 && grow < 7; ++grow) {
        a = b;
        fa = fb;
        b *= 2.0;
        try {
            fb = g(b);
        } catch (const RangeError&) {
            return std::numeric_limits<double>::infinity();
        }
    }
    if (fb < 0.0) return std::numeric_limits<double>::infinity();
    if (fb == 0.0) return b;
    int side = 0;
    for (int it = 0; it < 300; ++it) {
        double t = (fa * b - fb * a) / (fa - fb);
        if (!std::isfinite(t) || t <= a || t >= b) t = 0.5 * (a + b);
        const double ft = g(t);
        if (std::abs(ft) <= 1e-9 * (1.0 + std::abs(c)) || b - a <= 1e-13 * (1.0 + t)) return t;
        if (ft > 0.0) {
            b = t;
            fb = ft;
            if (side == 1) fa *= 0.5;
            side = 1;
        } else {
            a = t;
            fa = ft;
            if (side == -1) fb *= 0.5;
            side = -1;
        }
    }
    throw NumericError("event time inversion did not converge");
}

// True-model machinery a scenario shares between simulation, calibration
// and gold-standard evaluation.
struct ScenarioEngine {
    JointModelSpec spec;
    JointModel model;
    ThetaFull theta;
    Eigen::MatrixXd chol_d;

    explicit ScenarioEngine(const ScenarioConfig& cfg)
        : spec(scenario_model_spec(scenario_association(cfg.scenario), cfg.followup)),
          model(scenario_frame(), spec),
          theta(cfg.true_params) {
        theta.surv.weibull_shape = cfg.weibull_shape;
        if (theta.beta.size() != model.n_beta())
            throw ConfigError("true_params.beta needs " + std::to_string(model.n_beta()) +
                              " entries, got " + std::to_string(theta.beta.size()));
        if (theta.D.rows() != model.n_re() || theta.D.cols() != model.n_re())
            throw ConfigError("true_params.D must be " + std::to_string(model.n_re()) + "x" +
                              std::to_string(model.n_re()));
        if (!(theta.sigma2 > 0.0)) throw ConfigError("true_params.sigma2 must be positive");
        model.check_params(theta.surv);
        Eigen::LLT<Eigen::MatrixXd> llt(theta.D);
        if (llt.info() != Eigen::Success)
            throw ConfigError("true_params.D must be positive definite");
        chol_d = llt.matrixL();
    }

    struct SubjectDraw {
        Subject subject;
        Eigen::VectorXd b;
        double t_star = 0.0;
    };

    // One subject on its own substream: treatment arm, random effects, the
    // latent event time via inverse transform, uniform censoring on
    // (0, t_max), then the truncated noisy measurement schedule.
    SubjectDraw draw_subject(std::uint64_t seed, std::uint64_t stream_id, int n_meas,
                             double followup, double t_max) const {
        Rng rng = Rng::stream(seed, stream_id);
        SubjectDraw out;
        Subject& s = out.subject;
        const bool treated = rng.uniform() < 0.5;
        s.w = Eigen::Vector2d(1.0, treated ? 1.0 : 0.0);
        out.b = chol_d * rng.normal_vector(model.n_re());
        const double u = rng.uniform();
        auto cum = [&](double t) {
            return model.cumulative_hazard(t, s.w, theta.beta, out.b, theta.surv);
        };
        out.t_star = solve_event_time(cum, -std::log(u), followup);
        if (std::isfinite(out.t_star) && std::abs(std::exp(-cum(out.t_star)) - u) > 1e-8)
            throw NumericError("simulated event time fails the survival inversion check");
        const double censor = rng.uniform(0.0, t_max);
        double T = std::min(censor, followup);
        int delta = 0;
        if (out.t_star <= censor && out.t_star <= followup) {
            T = out.t_star;
            delta = 1;
        }
        s.T = T;
        s.delta = delta;
        std::vector<double> sched;
        sched.reserve(n_meas);
        sched.push_back(0.0);
        for (int l = 1; l < n_meas; ++l) sched.push_back(rng.uniform(0.0, followup));
        std::sort(sched.begin() + 1, sched.end());
        for (double t : sched) {
            if (t > T) break;
            if (!s.times.empty() && t <= s.times.back()) continue;
            s.times.push_back(t);
            s.y.push_back(model.longitudinal().m(t, s.w, theta.beta, out.b) +
                          std::sqrt(theta.sigma2) * rng.normal());
        }
        return out;
    }
};

}  // namespace detail

// Uniform censoring bound reproducing the configured censoring fraction.
// Draws a pilot sample of latent event times once, then bisects the exact
// expected censored fraction under C ~ Uniform(0, t_max), which is smooth
// and strictly decreasing in t_max.
inline double calibrate_censoring(const ScenarioConfig& cfg) {
    cfg.validate();
    const detail::ScenarioEngine engine(cfg);
    const int n_pilot = 4000;
    const std::uint64_t pilot_seed = cfg.seed ^ 0x9e3779b97f4a7c15ull;
    std::vector<double> t_star(n_pilot);
    for (int j = 0; j < n_pilot; ++j)
        t_star[j] = engine
                        .draw_subject(pilot_seed, static_cast<std::uint64_t>(j) + 1, 2,
                                      cfg.followup, cfg.followup)
                        .t_star;

    auto expected_censoring = [&](double tm) {
        double acc = 0.0;
        for (double t : t_star) {
            if (!(t <= cfg.followup))
                acc += 1.0;  // event beyond the horizon is censored regardless of C
            else
                acc += std::min(t, tm) / tm;
        }
        return acc / static_cast<double>(n_pilot);
    };

    double lo = cfg.followup * 1e-9;
    double hi = cfg.followup;
    while (expected_censoring(hi) > cfg.censoring_target && hi < cfg.followup * 1048576.0)
        hi *= 2.0;
    if (expected_censoring(hi) > cfg.censoring_target) {
        double beyond = 0.0;
        for (double t : t_star)
            if (!(t <= cfg.followup)) beyond += 1.0;
        beyond /= static_cast<double>(n_pilot);
        throw CalibrationError("censoring target " + to_g17(cfg.censoring_target) +
                               " is unreachable: at least " + to_g17(beyond) +
                               " of events fall beyond the follow-up horizon");
    }
    for (int it = 0; it < 200 && hi - lo > 1e-9 * (1.0 + hi); ++it) {
        const double mid = 0.5 * (lo + hi);
        if (expected_censoring(mid) > cfg.censoring_target)
            lo = mid;
        else
            hi = mid;
    }
    const double root = 0.5 * (lo + hi);
    if (std::abs(expected_censoring(root) - cfg.censoring_target) > 0.02)
        throw CalibrationError("censoring calibration did not reach the target");
    return root;
}

struct SimulatedDataset {
    Dataset data;
    std::vector<Eigen::VectorXd> b;          // true random effects, per subject
    std::vector<double> true_event_time;     // +infinity when no event accrues
    double t_max = 0.0;
};

inline SimulatedDataset simulate_dataset(const ScenarioConfig& cfg) {
    cfg.validate();
    const detail::ScenarioEngine engine(cfg);
    SimulatedDataset out;
    out.t_max = cfg.t_max > 0.0 ? cfg.t_max : calibrate_censoring(cfg);
    out.data = scenario_frame();
    out.data.subjects.reserve(cfg.n_subjects);
    out.b.reserve(cfg.n_subjects);
    out.true_event_time.reserve(cfg.n_subjects);
    for (int i = 0; i < cfg.n_subjects; ++i) {
        auto drawn = engine.draw_subject(cfg.seed, static_cast<std::uint64_t>(i) + 1,
                                         cfg.n_meas, cfg.followup, out.t_max);
        drawn.subject.id = "S" + std::to_string(i + 1);
        out.data.subjects.push_back(std::move(drawn.subject));
        out.b.push_back(std::move(drawn.b));
        out.true_event_time.push_back(drawn.t_star);
    }
    return out;
}

// Conditional survival ratio at the true parameters and true random effects.
inline double gold_standard(const JointModel& model, const ThetaFull& theta,
                            const Eigen::VectorXd& w, const Eigen::VectorXd& b, double u,
                            double t) {
    if (!(t >= 0.0) || !(u >= t)) throw RangeError("gold standard needs u >= t >= 0");
    if (u == t) return 1.0;
    const double num = model.cumulative_hazard(u, w, theta.beta, b, theta.surv);
    const double den = model.cumulative_hazard(t, w, theta.beta, b, theta.surv);
    return std::exp(den - num);
}

struct StudyConfig {
    int n_holdout = 10;
    int n_horizons = 10;
    int n_workers = 1;  // replicates are independent jobs
    PredictOptions predict;
    std::vector<Association> candidates;  // empty: the standard five-model menu

    void validate() const {
        if (n_holdout < 1) throw ConfigError("n_holdout must be positive");
        if (n_horizons < 1) throw ConfigError("n_horizons must be positive");
        if (n_workers < 1) throw ConfigError("n_workers must be positive");
    }
};

// Per held-out subject: RMSE of each prediction method against the gold
// standard over the horizon grid.
struct EvalResult {
    int replicate = 0;
    std::string subject;
    double rmse_true_model = 0.0;
    double rmse_bma_with_true = 0.0;
    double rmse_bma_without_true = 0.0;
};

struct StudyResult {
    std::vector<EvalResult> results;
    std::vector<std::string> labels;
    int true_model_index = 0;
    double t_max = 0.0;
    int regenerated = 0;  // replicates redrawn for lack of censored subjects
};

inline StudyResult run_study(const ScenarioConfig& cfg, const ChainConfig& fit_cfg,
                             const StudyConfig& study = StudyConfig{}) {
    cfg.validate();
    fit_cfg.validate();
    study.validate();
    if (study.n_holdout >= cfg.n_subjects)
        throw ConfigError("n_holdout must be smaller than n_subjects");

    StudyResult out;
    const std::vector<Association> assocs =
        study.candidates.empty() ? candidate_associations() : study.candidates;
    if (assocs.size() < 2)
        throw ConfigError("the study needs at least two candidate models");
    if (study.candidates.empty()) {
        out.labels = candidate_labels();
        out.true_model_index = true_model_index(cfg.scenario);
    } else {
        out.true_model_index = -1;
        for (std::size_t k = 0; k < assocs.size(); ++k) {
            out.labels.push_back("M" + std::to_string(k + 1));
            if (out.true_model_index < 0 && assocs[k] == scenario_association(cfg.scenario))
                out.true_model_index = static_cast<int>(k);
        }
        if (out.true_model_index < 0)
            throw ConfigError("the candidate menu must include the scenario's structure");
    }
    out.t_max = cfg.t_max > 0.0 ? cfg.t_max : calibrate_censoring(cfg);
    const detail::ScenarioEngine engine(cfg);
    std::atomic<int> regenerated{0};

    auto run_replicate = [&](int r) {
        std::uint64_t rep_seed = detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(r));
        SimulatedDataset sim;
        std::vector<int> holdout;
        for (int attempt = 0;; ++attempt) {
            ScenarioConfig one = cfg;
            one.n_datasets = 1;
            one.seed = rep_seed;
            one.t_max = out.t_max;
            sim = simulate_dataset(one);
            holdout.clear();
            for (int i = 0; i < static_cast<int>(sim.data.subjects.size()); ++i)
                if (sim.data.subjects[i].delta == 0) holdout.push_back(i);
            if (static_cast<int>(holdout.size()) >= study.n_holdout) break;
            if (attempt >= 200)
                throw CalibrationError("no replicate with " + std::to_string(study.n_holdout) +
                                       " censored subjects after 200 attempts");
            rep_seed = detail::mix_seed(rep_seed, 0x5edull);
            ++regenerated;
        }
        Rng pick = Rng::stream(rep_seed, 0);
        for (int i = static_cast<int>(holdout.size()) - 1; i > 0; --i) {
            const int j = std::min(static_cast<int>(pick.uniform() * (i + 1)), i);
            std::swap(holdout[i], holdout[j]);
        }
        holdout.resize(study.n_holdout);
        std::sort(holdout.begin(), holdout.end());
        std::vector<char> held(sim.data.subjects.size(), 0);
        for (int i : holdout) held[i] = 1;

        Dataset train = scenario_frame();
        train.subjects.reserve(sim.data.subjects.size() - holdout.size());
        for (int i = 0; i < static_cast<int>(sim.data.subjects.size()); ++i)
            if (!held[i]) train.subjects.push_back(sim.data.subjects[i]);

        std::vector<FittedModel> fitted;
        fitted.reserve(assocs.size());
        for (std::size_t k = 0; k < assocs.size(); ++k) {
            const JointModelSpec spec_k = scenario_model_spec(assocs[k], cfg.followup);
            ChainConfig ck = fit_cfg;
            ck.seed = detail::mix_seed(rep_seed, 100 + k);
            FittedModel fm =
                make_fitted_model(train, spec_k, fit(train, spec_k, ck), out.labels[k]);
            fm.log_marg_data = log_marginal_dataset(train, spec_k, fm.draws);
            fitted.push_back(std::move(fm));
        }
        std::vector<FittedModel> without;
        without.reserve(fitted.size() - 1);
        for (int k = 0; k < static_cast<int>(fitted.size()); ++k)
            if (k != out.true_model_index) without.push_back(fitted[k]);
        ModelAverager avg_with(train, fitted);
        ModelAverager avg_without(train, std::move(without));
        const DynamicPredictor true_pred(train, fitted[out.true_model_index].spec,
                                         fitted[out.true_model_index].draws);

        std::vector<EvalResult> rows;
        rows.reserve(holdout.size());
        for (int i : holdout) {
            const Subject& s = sim.data.subjects[i];
            TargetSubject target;
            target.id = s.id;
            target.w = s.w;
            target.times = s.times;
            target.y = s.y;
            target.t = s.times.back();
            const double step = (cfg.followup - target.t) / study.n_horizons;
            if (!(step > 0.0)) continue;
            std::vector<double> horizons(study.n_horizons);
            for (int h = 0; h < study.n_horizons; ++h) horizons[h] = target.t + (h + 1) * step;
            std::vector<double> gold(study.n_horizons);
            for (int h = 0; h < study.n_horizons; ++h)
                gold[h] =
                    gold_standard(engine.model, engine.theta, s.w, sim.b[i], horizons[h], target.t);
            const DynamicPrediction p_true = true_pred.survival(target, horizons, study.predict);
            const DynamicPrediction p_with =
                avg_with.predict_survival(target, horizons, study.predict);
            const DynamicPrediction p_without =
                avg_without.predict_survival(target, horizons, study.predict);
            auto rmse = [&](const std::vector<double>& point) {
                double acc = 0.0;
                for (int h = 0; h < study.n_horizons; ++h) {
                    const double d = point[h] - gold[h];
                    acc += d * d;
                }
                return std::sqrt(acc / study.n_horizons);
            };
            EvalResult row;
            row.replicate = r;
            row.subject = s.id;
            row.rmse_true_model = rmse(p_true.point);
            row.rmse_bma_with_true = rmse(p_with.point);
            row.rmse_bma_without_true = rmse(p_without.point);
            rows.push_back(std::move(row));
        }
        return rows;
    };

    std::vector<std::vector<EvalResult>> per(cfg.n_datasets);
    const int n_workers = std::min(study.n_workers, cfg.n_datasets);
    if (n_workers <= 1) {
        for (int r = 0; r < cfg.n_datasets; ++r) per[r] = run_replicate(r);
    } else {
        std::atomic<int> next{0};
        std::mutex err_guard;
        std::exception_ptr err;
        std::vector<std::thread> pool;
        pool.reserve(n_workers);
        for (int wk = 0; wk < n_workers; ++wk)
            pool.emplace_back([&] {
                for (;;) {
                    const int r = next.fetch_add(1);
                    if (r >= cfg.n_datasets) return;
                    try {
                        per[r] = run_replicate(r);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(err_guard);
                        if (!err) err = std::current_exception();
                        return;
                    }
                }
            });
        for (auto& th : pool) th.join();
        if (err) std::rethrow_exception(err);
    }
    for (auto& rows : per)
        for (auto& row : rows) out.results.push_back(std::move(row));
    out.regenerated = regenerated.load();
    return out;
}

// One row per (replicate, subject, method).
inline void write_study_csv(std::ostream& os, const StudyResult& res) {
    os << "replicate,subject,method,rmse\n";
    for (const auto& row : res.results) {
        os << row.replicate << ',' << row.subject << ",true_model,"
           << to_g17(row.rmse_true_model) << '\n';
        os << row.replicate << ',' << row.subject << ",bma_with_true,"
           << to_g17(row.rmse_bma_with_true) << '\n';
        os << row.replicate << ',' << row.subject << ",bma_without_true,"
           << to_g17(row.rmse_bma_without_true) << '\n';
    }
}

}  // namespace jmbma
