#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "jmbma/bma.hpp"

using namespace jmbma;

namespace {

// Five subjects with a random intercept around 1 and no covariates. Event
// times sit past the last measurement so the fixture is valid for any origin
// up to 0.9.
Dataset oracle_dataset() {
    Dataset ds;
    Rng rng(99001);
    const double T[5] = {1.3, 1.0, 1.7, 1.1, 1.5};
    const int delta[5] = {1, 0, 1, 0, 1};
    for (int i = 0; i < 5; ++i) {
        Subject s;
        s.id = "S" + std::to_string(i);
        s.w = Eigen::VectorXd(0);
        s.times = {0.0, 0.4, 0.9};
        const double b = 0.7 * rng.normal();
        for (std::size_t l = 0; l < s.times.size(); ++l)
            s.y.push_back(1.0 + b + 0.5 * rng.normal());
        s.T = T[i];
        s.delta = delta[i];
        ds.subjects.push_back(s);
    }
    return ds;
}

// Random intercept only, current-value association, Weibull baseline. Tight
// priors pin the shape at 1, the association at 0, and the intercept variance
// at 0.5, so the only free parameters are the mean and the noise variance and
// the cumulative hazard is exactly T.
JointModelSpec oracle_spec() {
    JointModelSpec spec;
    spec.longitudinal.time_basis = TimeBasis::none;
    spec.assoc = Association::value;
    spec.baseline.kind = BaselineKind::weibull;
    spec.priors.beta_sd = 2.0;
    spec.priors.sigma2_shape = 3.0;
    spec.priors.sigma2_rate = 1.0;
    spec.priors.alpha_sd = 1e-6;
    spec.priors.gamma_h0_sd = 1e-6;
    spec.priors.wishart_df = 1e6;
    spec.priors.wishart_scale_diag = 0.5e6;
    return spec;
}

// Same fixture with the survival side left free, for tests where the models
// must actually disagree.
JointModelSpec averaging_spec(Association assoc) {
    JointModelSpec spec;
    spec.longitudinal.time_basis = TimeBasis::none;
    spec.assoc = assoc;
    spec.baseline.kind = BaselineKind::weibull;
    spec.priors.beta_sd = 2.0;
    spec.priors.sigma2_shape = 3.0;
    spec.priors.sigma2_rate = 1.0;
    spec.priors.alpha_sd = 1.0;
    spec.priors.gamma_h0_sd = 1.0;
    return spec;
}

PosteriorDraws manual_draws(const JointModel& model, int n_subjects, int n,
                            const std::function<ThetaFull(Rng&)>& gen, std::uint64_t seed) {
    const ParamLayout layout(model);
    PosteriorDraws d;
    d.names = layout.names();
    d.theta.resize(n, layout.size());
    d.b = Eigen::MatrixXd::Zero(n, n_subjects * model.n_re());
    d.n_re = model.n_re();
    d.n_subjects = n_subjects;
    d.seed = seed;
    Rng rng(seed);
    for (int l = 0; l < n; ++l) d.theta.row(l) = layout.pack(gen(rng)).transpose();
    return d;
}

ChainConfig short_chain(std::uint64_t seed) {
    ChainConfig cfg;
    cfg.n_iter = 3000;
    cfg.n_burnin = 1000;
    cfg.thin = 2;
    cfg.seed = seed;
    return cfg;
}

// ---------------------------------------------------------------------------
// Brute-force oracle pieces
// ---------------------------------------------------------------------------

// Gauss-Hermite rule from the Golub-Welsch eigendecomposition of the Jacobi
// matrix, physicists' convention: integral of exp(-x^2) f(x) ~ sum w_j f(x_j).
struct GaussHermite {
    std::vector<double> x, lw;  // nodes and log weights
    explicit GaussHermite(int n) {
        Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
        for (int k = 1; k < n; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(k / 2.0);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
        x.resize(n);
        lw.resize(n);
        for (int j = 0; j < n; ++j) {
            x[j] = es.eigenvalues()[j];
            const double v0 = es.eigenvectors()(0, j);
            lw[j] = std::log(std::sqrt(M_PI) * v0 * v0);
        }
    }
};

double logsumexp(const std::vector<double>& v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double t : v) mx = std::max(mx, t);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double t : v) s += std::exp(t - mx);
    return mx + std::log(s);
}

double log_normal_pdf(double y, double m, double s2) {
    return -0.5 * std::log(2.0 * M_PI * s2) - (y - m) * (y - m) / (2.0 * s2);
}

double log_invgamma_pdf(double x, double shape, double rate) {
    return shape * std::log(rate) - std::lgamma(shape) - (shape + 1.0) * std::log(x) -
           rate / x;
}

// log integral over b of prod_l N(y_l; mu + b, s2) N(b; 0, d) db
double gh_intercept_loglik(const GaussHermite& gh, const std::vector<double>& y, double mu,
                           double s2, double d) {
    const int n = static_cast<int>(y.size());
    double sy = 0.0, syy = 0.0;
    for (double yl : y) {
        sy += yl;
        syy += yl * yl;
    }
    const double c = std::sqrt(2.0 * d);
    const double base = -0.5 * std::log(M_PI) - 0.5 * n * std::log(2.0 * M_PI * s2);
    std::vector<double> terms(gh.x.size());
    for (std::size_t j = 0; j < gh.x.size(); ++j) {
        const double m = mu + c * gh.x[j];
        const double ss = syy - 2.0 * m * sy + n * m * m;
        terms[j] = gh.lw[j] + base - ss / (2.0 * s2);
    }
    return logsumexp(terms);
}

// The same integral in closed form: y ~ N(mu 1, s2 I + d 1 1^T).
double closed_form_intercept_loglik(const std::vector<double>& y, double mu, double s2,
                                    double d) {
    const int n = static_cast<int>(y.size());
    double sy = 0.0, ss = 0.0;
    for (double yl : y) {
        sy += yl - mu;
        ss += (yl - mu) * (yl - mu);
    }
    const double logdet = n * std::log(s2) + std::log1p(n * d / s2);
    const double quad = ss / s2 - (d / (s2 * (s2 + n * d))) * sy * sy;
    return -0.5 * (n * std::log(2.0 * M_PI) + logdet + quad);
}

// Brute-force log marginal likelihood of the pinned fixture: Gauss-Hermite
// over each random intercept nested in a trapezoid grid over (beta, sigma2).
// Shape 1, association 0, and d = 0.5 are what the near-delta priors pin;
// those prior factors integrate to one and drop out here, and the survival
// part of every subject reduces to -T (censored) plus log h = 0 (events).
double oracle_log_evidence(const Dataset& ds, double d, double beta_sd, double sig_shape,
                           double sig_rate, int nb, int ns) {
    const GaussHermite gh(50);
    double tot = 0.0;
    int cnt = 0;
    for (const auto& s : ds.subjects)
        for (double yl : s.y) {
            tot += yl;
            ++cnt;
        }
    const double ybar = tot / cnt;
    const double blo = ybar - 2.0, bhi = ybar + 2.0;
    const double slo = 0.02, shi = 2.5;
    const double hb = (bhi - blo) / (nb - 1), hs = (shi - slo) / (ns - 1);

    std::vector<double> terms;
    terms.reserve(static_cast<std::size_t>(nb) * ns);
    for (int ib = 0; ib < nb; ++ib) {
        const double mu = blo + ib * hb;
        const double lp_mu = log_normal_pdf(mu, 0.0, beta_sd * beta_sd);
        for (int is = 0; is < ns; ++is) {
            const double s2 = slo + is * hs;
            double v = lp_mu + log_invgamma_pdf(s2, sig_shape, sig_rate);
            for (const auto& s : ds.subjects) v += gh_intercept_loglik(gh, s.y, mu, s2, d) - s.T;
            const double wt = ((ib == 0 || ib == nb - 1) ? 0.5 : 1.0) *
                              ((is == 0 || is == ns - 1) ? 0.5 : 1.0);
            terms.push_back(v + std::log(wt * hb * hs));
        }
    }
    return logsumexp(terms);
}

}  // namespace

// ---------------------------------------------------------------------------
// Weight algebra
// ---------------------------------------------------------------------------

TEST_CASE("bma weights: softmax of the evidence") {
    SECTION("single model gets weight one") {
        const BmaWeights w = bma_weights({{-31.7, -4.2, 0}});
        REQUIRE(w.weights.size() == 1);
        REQUIRE(w.weights[0] == 1.0);
    }

    SECTION("equal evidence splits evenly") {
        const BmaWeights w = bma_weights({{-20.0, -3.0, 0}, {-20.0, -3.0, 1}});
        REQUIRE(std::abs(w.weights[0] - 0.5) < 1e-15);
        REQUIRE(std::abs(w.weights[1] - 0.5) < 1e-15);
    }

    SECTION("log 3 gap in subject evidence gives 1:3 odds") {
        const BmaWeights w =
            bma_weights({{-20.0, -3.0, 0}, {-20.0, -3.0 + std::log(3.0), 1}});
        REQUIRE(std::abs(w.weights[0] - 0.25) < 1e-14);
        REQUIRE(std::abs(w.weights[1] - 0.75) < 1e-14);
    }

    SECTION("weights are invariant to a common shift and sum to one") {
        std::vector<ModelEvidence> ev = {
            {-412.8, -6.31, 0}, {-409.2, -8.77, 1}, {-415.0, -2.04, 2}};
        const BmaWeights w1 = bma_weights(ev);
        for (auto& e : ev) e.log_marg_data += 137.25;
        const BmaWeights w2 = bma_weights(ev);
        double sum = 0.0;
        for (int k = 0; k < 3; ++k) {
            REQUIRE(std::abs(w1.weights[k] - w2.weights[k]) < 1e-12);
            sum += w1.weights[k];
        }
        REQUIRE(std::abs(sum - 1.0) < 1e-12);
    }

    SECTION("subject and origin are passed through") {
        const BmaWeights w = bma_weights({{-1.0, -1.0, 0}}, {}, "20", 2.9);
        REQUIRE(w.subject_id == "20");
        REQUIRE(w.origin_time == 2.9);
    }

    SECTION("a zero prior removes a model exactly") {
        const BmaWeights w = bma_weights({{-20.0, -3.0, 0}, {-19.0, -2.0, 1}}, {1.0, 0.0});
        REQUIRE(w.weights[0] == 1.0);
        REQUIRE(w.weights[1] == 0.0);
    }

    SECTION("input validation") {
        REQUIRE_THROWS_AS(bma_weights({}), SpecError);
        REQUIRE_THROWS_AS(bma_weights({{-1, -1, 0}, {-1, -1, 1}}, {0.2, 0.3, 0.5}),
                          ConfigError);
        REQUIRE_THROWS_AS(bma_weights({{-1, -1, 0}, {-1, -1, 1}}, {1.2, -0.2}), ConfigError);
        REQUIRE_THROWS_AS(bma_weights({{-1, -1, 0}, {-1, -1, 1}}, {0.3, 0.3}), ConfigError);
        const double inf = std::numeric_limits<double>::infinity();
        REQUIRE_THROWS_AS(bma_weights({{-inf, -1, 0}}), NumericError);
        REQUIRE_THROWS_AS(bma_weights({{-1, inf, 0}}), NumericError);
    }
}

// ---------------------------------------------------------------------------
// Dataset fingerprint
// ---------------------------------------------------------------------------

TEST_CASE("dataset fingerprint is content addressed") {
    const Dataset a = oracle_dataset();
    Dataset b = oracle_dataset();
    REQUIRE(dataset_fingerprint(a) == dataset_fingerprint(b));

    b.subjects[2].y[1] += 1e-9;
    REQUIRE(dataset_fingerprint(a) != dataset_fingerprint(b));

    Dataset c = oracle_dataset();
    c.subjects[0].id = "S9";
    REQUIRE(dataset_fingerprint(a) != dataset_fingerprint(c));

    Dataset d = oracle_dataset();
    std::swap(d.subjects[0], d.subjects[1]);
    REQUIRE(dataset_fingerprint(a) != dataset_fingerprint(d));
}

// ---------------------------------------------------------------------------
// Marginal likelihood of the data
// ---------------------------------------------------------------------------

TEST_CASE("quadrature oracle agrees with its closed form") {
    // the likelihood factor narrows the integrand well below the Hermite
    // weight, so 50 nodes resolve this case to about 1e-7
    const GaussHermite gh(50);
    const std::vector<double> y = {1.4, 0.7, 1.9};
    const double a = gh_intercept_loglik(gh, y, 0.8, 0.3, 0.5);
    const double b = closed_form_intercept_loglik(y, 0.8, 0.3, 0.5);
    REQUIRE(std::abs(a - b) < 1e-6);
}

TEST_CASE("dataset evidence matches brute-force integration") {
    const Dataset ds = oracle_dataset();
    const JointModelSpec spec = oracle_spec();
    const PosteriorDraws draws = fit(ds, spec, short_chain(771144));

    const double fine = oracle_log_evidence(ds, 0.5, 2.0, 3.0, 1.0, 161, 241);
    const double coarse = oracle_log_evidence(ds, 0.5, 2.0, 3.0, 1.0, 81, 121);
    REQUIRE(std::abs(fine - coarse) < 0.01);

    const double lap = log_marginal_dataset(ds, spec, draws);
    REQUIRE(std::isfinite(lap));
    REQUIRE(std::abs(lap - fine) < 0.1);

    // same draws, same answer, bit for bit
    REQUIRE(log_marginal_dataset(ds, spec, draws) == lap);
}

TEST_CASE("evidence of a fully pinned model with flat likelihood is one") {
    // One subject, one measurement y = 0 at t = 0, and an event window so
    // short the survival factor is 1. Every parameter is pinned: beta at 0,
    // sigma2 at 1/(2 pi) so the measurement density is exactly 1, the
    // intercept variance at 1e-10. The marginal likelihood is then the
    // integral of the prior, which is 1.
    Dataset ds;
    Subject s;
    s.id = "only";
    s.w = Eigen::VectorXd(0);
    s.times = {0.0};
    s.y = {0.0};
    s.T = 1e-9;
    s.delta = 0;
    ds.subjects.push_back(s);

    JointModelSpec spec = oracle_spec();
    spec.priors.beta_sd = 1e-6;
    spec.priors.sigma2_shape = 1e6;
    spec.priors.sigma2_rate = 1e6 / (2.0 * M_PI);
    spec.priors.wishart_scale_diag = 1e-4;  // mode 1e-10 with df 1e6

    const JointModel model(ds, spec);
    const PosteriorDraws draws = manual_draws(
        model, 1, 150,
        [&](Rng&) {
            ThetaFull t;
            t.beta = Eigen::VectorXd::Zero(1);
            t.sigma2 = 1.0 / (2.0 * M_PI);
            t.surv.gamma = Eigen::VectorXd(0);
            t.surv.gamma_h0 = Eigen::VectorXd(0);
            t.surv.alpha = Eigen::VectorXd::Zero(1);
            t.surv.weibull_shape = 1.0;
            t.D = Eigen::MatrixXd::Constant(1, 1, 1e-10);
            return t;
        },
        31);

    const double lm = log_marginal_dataset(ds, spec, draws);
    REQUIRE(std::abs(lm) < 1e-3);
}

TEST_CASE("doubling the data more than doubles the information") {
    const JointModelSpec spec = oracle_spec();
    const Dataset ds = oracle_dataset();
    Dataset doubled = ds;
    for (const auto& s : ds.subjects) {
        Subject copy = s;
        copy.id += "b";
        doubled.subjects.push_back(copy);
    }

    const PosteriorDraws d1 = fit(ds, spec, short_chain(4004));
    const PosteriorDraws d2 = fit(doubled, spec, short_chain(4005));
    const double lm1 = log_marginal_dataset(ds, spec, d1);
    const double lm2 = log_marginal_dataset(doubled, spec, d2);

    // E[L^2] >= (E[L])^2: the evidence of the duplicated data exceeds the
    // squared evidence of the original.
    REQUIRE(lm2 > 2.0 * lm1);
}

// ---------------------------------------------------------------------------
// Marginal likelihood of a subject history
// ---------------------------------------------------------------------------

TEST_CASE("subject evidence matches brute-force integration") {
    const Dataset ds = oracle_dataset();
    const JointModelSpec spec = oracle_spec();
    const JointModel model(ds, spec);

    // Spread in (beta, log sigma2) only; everything else held at its pinned
    // value so the oracle can integrate a two-dimensional posterior.
    const int L = 400;
    std::vector<double> bs(L), ls(L);
    Rng rng(5150);
    for (int l = 0; l < L; ++l) {
        bs[l] = 1.0 + 0.15 * rng.normal();
        ls[l] = std::log(0.25) + 0.2 * rng.normal();
    }
    int idx = 0;
    const PosteriorDraws draws = manual_draws(
        model, 5, L,
        [&](Rng&) {
            ThetaFull t;
            t.beta = Eigen::VectorXd::Constant(1, bs[idx]);
            t.sigma2 = std::exp(ls[idx]);
            ++idx;
            t.surv.gamma = Eigen::VectorXd(0);
            t.surv.gamma_h0 = Eigen::VectorXd(0);
            t.surv.alpha = Eigen::VectorXd::Zero(1);
            t.surv.weibull_shape = 1.0;
            t.D = Eigen::MatrixXd::Constant(1, 1, 0.5);
            return t;
        },
        77);

    TargetSubject target;
    target.id = "T1";
    target.w = Eigen::VectorXd(0);
    target.times = {0.0, 0.5};
    target.y = {1.3, 0.9};
    target.t = 0.8;

    const double got = log_marginal_subject(ds, spec, draws, target);

    // sample moments of the free block
    double m1 = 0.0, m2 = 0.0;
    for (int l = 0; l < L; ++l) {
        m1 += bs[l];
        m2 += ls[l];
    }
    m1 /= L;
    m2 /= L;
    double v11 = 0.0, v12 = 0.0, v22 = 0.0;
    for (int l = 0; l < L; ++l) {
        v11 += (bs[l] - m1) * (bs[l] - m1);
        v12 += (bs[l] - m1) * (ls[l] - m2);
        v22 += (ls[l] - m2) * (ls[l] - m2);
    }
    v11 /= L - 1;
    v12 /= L - 1;
    v22 /= L - 1;
    const double det = v11 * v22 - v12 * v12;

    const GaussHermite gh(50);
    auto oracle = [&](int n1, int n2) {
        const double s1 = std::sqrt(v11), s2 = std::sqrt(v22);
        const double lo1 = m1 - 8.0 * s1, hi1 = m1 + 8.0 * s1;
        const double lo2 = m2 - 8.0 * s2, hi2 = m2 + 8.0 * s2;
        const double h1 = (hi1 - lo1) / (n1 - 1), h2 = (hi2 - lo2) / (n2 - 1);
        std::vector<double> terms;
        terms.reserve(static_cast<std::size_t>(n1) * n2);
        for (int i = 0; i < n1; ++i) {
            const double mu = lo1 + i * h1;
            for (int j = 0; j < n2; ++j) {
                const double u2 = lo2 + j * h2;
                const double r1 = mu - m1, r2 = u2 - m2;
                const double quad = (v22 * r1 * r1 - 2.0 * v12 * r1 * r2 + v11 * r2 * r2) / det;
                const double lpost =
                    -std::log(2.0 * M_PI) - 0.5 * std::log(det) - 0.5 * quad;
                double v = lpost - target.t +
                           gh_intercept_loglik(gh, target.y, mu, std::exp(u2), 0.5);
                const double wt = ((i == 0 || i == n1 - 1) ? 0.5 : 1.0) *
                                  ((j == 0 || j == n2 - 1) ? 0.5 : 1.0);
                terms.push_back(v + std::log(wt * h1 * h2));
            }
        }
        return logsumexp(terms);
    };
    const double fine = oracle(321, 321);
    REQUIRE(std::abs(fine - oracle(161, 161)) < 0.01);
    REQUIRE(std::abs(got - fine) < 0.1);
}

TEST_CASE("subject evidence reduces to the conjugate density for one measurement") {
    const Dataset ds = oracle_dataset();
    const JointModelSpec spec = oracle_spec();
    const JointModel model(ds, spec);

    const PosteriorDraws draws = manual_draws(
        model, 5, 200,
        [&](Rng&) {
            ThetaFull t;
            t.beta = Eigen::VectorXd::Constant(1, 1.0);
            t.sigma2 = 0.36;
            t.surv.gamma = Eigen::VectorXd(0);
            t.surv.gamma_h0 = Eigen::VectorXd(0);
            t.surv.alpha = Eigen::VectorXd::Zero(1);
            t.surv.weibull_shape = 1.0;
            t.D = Eigen::MatrixXd::Constant(1, 1, 0.49);
            return t;
        },
        99);

    TargetSubject target;
    target.id = "T2";
    target.w = Eigen::VectorXd(0);
    target.times = {0.0};
    target.y = {1.7};
    target.t = 0.0;

    // origin 0 means no survival exposure, so p(D_j) is the marginal density
    // of the single measurement: N(1.7; 1, 0.36 + 0.49)
    const double got = log_marginal_subject(ds, spec, draws, target);
    const double expected = log_normal_pdf(1.7, 1.0, 0.85);
    REQUIRE(std::abs(got - expected) < 1e-4);
    REQUIRE(log_marginal_subject(ds, spec, draws, target) == got);
}

// ---------------------------------------------------------------------------
// Model averaging
// ---------------------------------------------------------------------------

namespace {

TargetSubject averaging_target() {
    TargetSubject target;
    target.id = "T1";
    target.w = Eigen::VectorXd(0);
    target.times = {0.0, 0.4};
    target.y = {1.1, 1.4};
    target.t = 0.8;
    return target;
}

}  // namespace

TEST_CASE("identical candidates average to the single model") {
    const Dataset ds = oracle_dataset();
    const JointModelSpec spec = averaging_spec(Association::value);
    const PosteriorDraws draws = fit(ds, spec, short_chain(2211));

    ModelAverager avg(ds, {make_fitted_model(ds, spec, draws),
                           make_fitted_model(ds, spec, draws)});
    REQUIRE(avg.n_models() == 2);
    REQUIRE(avg.model(0).label == "M1");
    REQUIRE(avg.model(1).label == "M2");
    REQUIRE(avg.dataset_evidence(0) == avg.dataset_evidence(1));

    const TargetSubject target = averaging_target();
    const BmaWeights w = avg.weights_at(target);
    REQUIRE(std::abs(w.weights[0] - 0.5) < 1e-12);
    REQUIRE(std::abs(w.weights[1] - 0.5) < 1e-12);

    const std::vector<double> horizons = {1.2, 1.6, 2.2};
    const PredictOptions opts;
    const DynamicPrediction single = DynamicPredictor(ds, spec, draws)
                                         .survival(target, horizons, opts);
    const DynamicPrediction mixed = avg.predict_survival(target, horizons, opts);
    REQUIRE(mixed.n_mc == single.n_mc);
    for (std::size_t h = 0; h < horizons.size(); ++h) {
        REQUIRE(std::abs(mixed.point[h] - single.point[h]) < 1e-12);
        REQUIRE(std::abs(mixed.lower[h] - single.lower[h]) < 0.005);
        REQUIRE(std::abs(mixed.upper[h] - single.upper[h]) < 0.005);
        REQUIRE(mixed.lower[h] <= mixed.point[h]);
        REQUIRE(mixed.point[h] <= mixed.upper[h]);
        REQUIRE(mixed.lower[h] >= 0.0);
        REQUIRE(mixed.upper[h] <= 1.0);
    }
    for (std::size_t h = 1; h < horizons.size(); ++h)
        REQUIRE(mixed.point[h] <= mixed.point[h - 1]);
}

TEST_CASE("averaging two different models") {
    const Dataset ds = oracle_dataset();
    const JointModelSpec spec_a = averaging_spec(Association::value);
    const JointModelSpec spec_b = averaging_spec(Association::random_effects);
    const PosteriorDraws draws_a = fit(ds, spec_a, short_chain(6161));
    const PosteriorDraws draws_b = fit(ds, spec_b, short_chain(6262));

    ModelAverager avg(ds, {make_fitted_model(ds, spec_a, draws_a, "value"),
                           make_fitted_model(ds, spec_b, draws_b, "raneff")});
    const TargetSubject target = averaging_target();
    const std::vector<double> horizons = {1.2, 1.6, 2.2};

    SECTION("weights are a pure function of the history") {
        const BmaWeights w1 = avg.weights_at(target);
        const BmaWeights w2 = avg.weights_at(target);
        REQUIRE(w1.weights[0] == w2.weights[0]);
        REQUIRE(w1.weights[1] == w2.weights[1]);
        REQUIRE(std::abs(w1.weights[0] + w1.weights[1] - 1.0) < 1e-12);
    }

    SECTION("weights respond when the history grows") {
        const std::vector<ModelEvidence> ev1 = avg.evidence_at(target);
        const BmaWeights w1 = avg.weights_at(target);

        const TargetSubject later = update(target, 1.3, 3.5);
        const std::vector<ModelEvidence> ev2 = avg.evidence_at(later);
        const BmaWeights w2 = avg.weights_at(later);

        REQUIRE(w2.origin_time == 1.3);
        for (int k = 0; k < 2; ++k) {
            REQUIRE(ev1[k].log_marg_data == ev2[k].log_marg_data);
            REQUIRE(std::abs(ev1[k].log_marg_subject - ev2[k].log_marg_subject) > 0.01);
        }
        REQUIRE(std::abs(w1.weights[0] - w2.weights[0]) > 1e-9);
        REQUIRE(std::abs(w1.weights[0] + w1.weights[1] - 1.0) < 1e-12);
        REQUIRE(std::abs(w2.weights[0] + w2.weights[1] - 1.0) < 1e-12);
    }

    SECTION("a degenerate prior reproduces the chosen model exactly") {
        const PredictOptions opts;
        const DynamicPrediction only_a = DynamicPredictor(ds, spec_a, draws_a)
                                             .survival(target, horizons, opts);
        const DynamicPrediction mixed =
            avg.predict_survival(target, horizons, opts, {1.0, 0.0});
        for (std::size_t h = 0; h < horizons.size(); ++h) {
            REQUIRE(mixed.point[h] == only_a.point[h]);
            REQUIRE(mixed.lower[h] == only_a.lower[h]);
            REQUIRE(mixed.upper[h] == only_a.upper[h]);
        }
    }

    SECTION("averaged point stays between the per-model points") {
        const PredictOptions opts;
        const DynamicPrediction pa = DynamicPredictor(ds, spec_a, draws_a)
                                         .survival(target, horizons, opts);
        const DynamicPrediction pb = DynamicPredictor(ds, spec_b, draws_b)
                                         .survival(target, horizons, opts);
        const DynamicPrediction mixed = avg.predict_survival(target, horizons, opts);
        for (std::size_t h = 0; h < horizons.size(); ++h) {
            const double lo = std::min(pa.point[h], pb.point[h]) - 1e-12;
            const double hi = std::max(pa.point[h], pb.point[h]) + 1e-12;
            REQUIRE(mixed.point[h] >= lo);
            REQUIRE(mixed.point[h] <= hi);
        }
    }
}

TEST_CASE("averager rejects inconsistent inputs") {
    const Dataset ds = oracle_dataset();
    const JointModelSpec spec = oracle_spec();
    const JointModel model(ds, spec);
    auto gen = [&](Rng& rng) {
        ThetaFull t;
        t.beta = Eigen::VectorXd::Constant(1, 1.0 + 0.1 * rng.normal());
        t.sigma2 = 0.25;
        t.surv.gamma = Eigen::VectorXd(0);
        t.surv.gamma_h0 = Eigen::VectorXd(0);
        t.surv.alpha = Eigen::VectorXd::Zero(1);
        t.surv.weibull_shape = 1.0;
        t.D = Eigen::MatrixXd::Constant(1, 1, 0.5);
        return t;
    };
    const PosteriorDraws draws = manual_draws(model, 5, 120, gen, 404);

    SECTION("no models") {
        REQUIRE_THROWS_AS(ModelAverager(ds, {}), SpecError);
    }

    SECTION("fingerprint mismatch") {
        Dataset other = oracle_dataset();
        other.subjects[0].y[0] += 0.5;
        REQUIRE_THROWS_AS(ModelAverager(other, {make_fitted_model(ds, spec, draws)}),
                          ConsistencyError);
    }

    SECTION("empty draw set") {
        PosteriorDraws none = draws;
        none.theta.resize(0, draws.theta.cols());
        none.b.resize(0, draws.b.cols());
        REQUIRE_THROWS_AS(log_marginal_dataset(ds, spec, none), SpecError);
    }

    SECTION("draw layout mismatch") {
        PosteriorDraws off = draws;
        off.names.pop_back();
        REQUIRE_THROWS_AS(log_marginal_dataset(ds, spec, off), ConsistencyError);
    }

    SECTION("draws without matching random effects") {
        PosteriorDraws no_b = draws;
        no_b.n_subjects = 0;
        no_b.b.resize(draws.theta.rows(), 0);
        REQUIRE_THROWS_AS(log_marginal_dataset(ds, spec, no_b), ConsistencyError);
    }

    SECTION("target covariates must match the fitted model") {
        TargetSubject target = averaging_target();
        target.w = Eigen::VectorXd::Constant(1, 1.0);
        REQUIRE_THROWS_AS(log_marginal_subject(ds, spec, draws, target), SpecError);
    }
}

// ---------------------------------------------------------------------------
// Weight report
// ---------------------------------------------------------------------------

TEST_CASE("weight report matches the published layout") {
    const std::vector<WeightReportRow> rows = {
        {"20", 2.9, 4.0, {2e-7, 0.4256, 0.5744, 1e-8, 0.0}},
        {"20", 3.9, 3.6, {0.0, 0.999, 0.001, 0.0, 0.0}},
        {"20", 4.9, 0.0, {0.0, 0.0248, 0.9752, 0.0, 0.0}},
        {"20", 7.0, 2.6, {0.0, 0.0003, 0.9997, 0.0, 0.0}},
        {"20", 8.4, 3.7, {0.0, 0.9851, 0.0149, 0.0, 0.0}},
        {"20", 10.3, 4.0, {0.0, 0.002, 0.998, 0.0, 0.0}},
        {"20", 12.1, 4.6, {0.0, 0.5651, 0.4349, 0.0, 0.0}},
        {"20", 14.2, 3.6, {0.0, 0.877, 0.123, 0.0, 0.0}},
    };
    std::ostringstream os;
    write_weight_report(os, rows);

    std::ifstream in(std::string(JMBMA_TEST_DIR) + "/golden/weight_report.csv");
    REQUIRE(in.good());
    std::stringstream golden;
    golden << in.rdbuf();
    REQUIRE(os.str() == golden.str());
}

TEST_CASE("weight report formatting and validation") {
    SECTION("tiny weights render as a hard zero") {
        std::ostringstream os;
        write_weight_report(os, {{"X", 1.0, 2.0, {1e-7, 0.006}}});
        REQUIRE(os.str() == "subject,origin_time,last_value,w1,w2\nX,1,2,0.00,0.01\n");
    }

    SECTION("rows must agree on the number of models") {
        std::ostringstream os;
        REQUIRE_THROWS_AS(
            write_weight_report(os, {{"A", 1.0, 2.0, {0.5, 0.5}}, {"B", 1.0, 2.0, {1.0}}}),
            ConsistencyError);
    }

    SECTION("empty report is rejected") {
        std::ostringstream os;
        REQUIRE_THROWS_AS(write_weight_report(os, {}), SpecError);
    }
}
