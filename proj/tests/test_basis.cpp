#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "jmbma/basis.hpp"

using jmbma::BSplineBasis;
using jmbma::KnotVector;
using jmbma::NaturalCubicBasis;

namespace {

// Independent straight-line Cox-de Boor recursion, used as the oracle for
// the bottom-up implementation in the library.
double cdb_oracle(int i, int p, double t, const std::vector<double>& kn) {
    if (p == 0) {
        const double last = kn.back();
        if (kn[i] <= t && t < kn[i + 1]) return 1.0;
        if (t == last && kn[i + 1] == last && kn[i] < kn[i + 1]) return 1.0;
        return 0.0;
    }
    double v = 0.0;
    const double d1 = kn[i + p] - kn[i];
    if (d1 > 0.0) v += (t - kn[i]) / d1 * cdb_oracle(i, p - 1, t, kn);
    const double d2 = kn[i + p + 1] - kn[i + 1];
    if (d2 > 0.0) v += (kn[i + p + 1] - t) / d2 * cdb_oracle(i + 1, p - 1, t, kn);
    return v;
}

// Truncated-power construction of the natural cubic spline space (oracle
// basis including the constant): {1, x, d_0 - d_{K-2}, ..., d_{K-3} - d_{K-2}}
// with d_k(x) = [(x - xi_k)_+^3 - (x - xi_{K-1})_+^3] / (xi_{K-1} - xi_k).
Eigen::MatrixXd tp_natural(const std::vector<double>& x, const std::vector<double>& xi) {
    const int K = static_cast<int>(xi.size());
    auto pos3 = [](double v) { return v > 0.0 ? v * v * v : 0.0; };
    auto dk = [&](int k, double t) {
        return (pos3(t - xi[k]) - pos3(t - xi[K - 1])) / (xi[K - 1] - xi[k]);
    };
    Eigen::MatrixXd m(x.size(), K);
    for (size_t r = 0; r < x.size(); ++r) {
        m(r, 0) = 1.0;
        m(r, 1) = x[r];
        for (int k = 0; k <= K - 3; ++k) m(r, 2 + k) = dk(k, x[r]) - dk(K - 2, x[r]);
    }
    return m;
}

}  // namespace

TEST_CASE("cubic values at t=1.7 match the straight-line recursion and frozen oracle") {
    KnotVector kv{0.0, 4.0, {1.0, 2.0, 3.0}, 3};
    BSplineBasis bs(kv);
    REQUIRE(bs.size() == 7);
    const auto kn = kv.expand();
    const Eigen::VectorXd got = bs.eval_all(1.7);
    for (int i = 0; i < 7; ++i)
        REQUIRE(std::abs(got[i] - cdb_oracle(i, 3, 1.7, kn)) < 1e-14);
    const double frozen[7] = {0.0,
                              0.0067500000000000025,
                              0.34591666666666665,
                              0.59016666666666662,
                              0.05716666666666665,
                              0.0,
                              0.0};
    for (int i = 0; i < 7; ++i) REQUIRE(std::abs(got[i] - frozen[i]) < 1e-15);
}

TEST_CASE("degree 0 with knots {0,1} is the unit indicator") {
    BSplineBasis bs(KnotVector{0.0, 1.0, {}, 0});
    REQUIRE(bs.size() == 1);
    REQUIRE(bs.eval_all(0.5)[0] == 1.0);
    REQUIRE(bs.eval_all(1.0)[0] == 1.0);
}

TEST_CASE("partition of unity, including both boundaries") {
    BSplineBasis bs(KnotVector{0.0, 19.0, {2.1, 5.5}, 3});
    for (double t : {0.0, 0.3, 2.1, 3.0, 5.5, 11.7, 18.999, 19.0}) {
        REQUIRE(std::abs(bs.eval_all(t).sum() - 1.0) < 1e-14);
    }
    // clamped ends: single active basis function
    REQUIRE(bs.eval_all(0.0)[0] == 1.0);
    REQUIRE(bs.eval_all(19.0)[bs.size() - 1] == 1.0);
}

TEST_CASE("derivative rows sum to zero and match finite differences") {
    BSplineBasis bs(KnotVector{0.0, 19.0, {2.1, 5.5}, 3});
    const double h = 1e-6;
    for (double t : {0.7, 2.1, 4.4, 9.0, 15.3}) {
        const Eigen::VectorXd d1 = bs.eval_all_derivative(t, 1);
        REQUIRE(std::abs(d1.sum()) < 1e-12);
        const Eigen::VectorXd fd = (bs.eval_all(t + h) - bs.eval_all(t - h)) / (2.0 * h);
        for (int i = 0; i < bs.size(); ++i) REQUIRE(std::abs(d1[i] - fd[i]) < 1e-5);
        const Eigen::VectorXd d2 = bs.eval_all_derivative(t, 2);
        const Eigen::VectorXd fd2 =
            (bs.eval_all(t + h) - 2.0 * bs.eval_all(t) + bs.eval_all(t - h)) / (h * h);
        for (int i = 0; i < bs.size(); ++i) REQUIRE(std::abs(d2[i] - fd2[i]) < 1e-3);
    }
    // order beyond the degree vanishes
    REQUIRE(bs.eval_all_derivative(4.0, 4).norm() == 0.0);
}

TEST_CASE("range and knot validation errors") {
    KnotVector kv{0.0, 2.0, {0.7, 1.3}, 3};
    BSplineBasis bs(kv);
    REQUIRE_THROWS_AS(bs.eval_all(-0.01), jmbma::RangeError);
    REQUIRE_THROWS_AS(bs.eval_all(2.01), jmbma::RangeError);
    REQUIRE_THROWS_AS((KnotVector{0.0, 1.0, {}, 3}.validate()), jmbma::SpecError);
    REQUIRE_THROWS_AS((KnotVector{0.0, 1.0, {0.5, 0.5, 0.6}, 3}.validate()), jmbma::SpecError);
    REQUIRE_THROWS_AS((KnotVector{0.0, 1.0, {1.5}, 0}.validate()), jmbma::SpecError);
    REQUIRE_THROWS_AS((KnotVector{1.0, 0.0, {}, 0}.validate()), jmbma::SpecError);
}

TEST_CASE("natural cubic basis has dimension internal+1 and natural boundaries") {
    NaturalCubicBasis ns(0.0, 19.0, {2.1, 5.5});
    REQUIRE(ns.size() == 3);
    for (double t : {0.0, 19.0}) {
        const Eigen::VectorXd d2 = ns.eval_all_derivative(t, 2);
        for (int i = 0; i < ns.size(); ++i) REQUIRE(std::abs(d2[i]) < 1e-8);
    }
    // finite-difference confirmation: one-sided 4-point stencil for f''(0)
    // and f''(19), exact for cubic pieces
    const double h = 1e-3;
    const Eigen::VectorXd lo2 = (2.0 * ns.eval_all(0.0) - 5.0 * ns.eval_all(h) +
                                 4.0 * ns.eval_all(2.0 * h) - ns.eval_all(3.0 * h)) /
                                (h * h);
    const Eigen::VectorXd hi2 = (2.0 * ns.eval_all(19.0) - 5.0 * ns.eval_all(19.0 - h) +
                                 4.0 * ns.eval_all(19.0 - 2.0 * h) - ns.eval_all(19.0 - 3.0 * h)) /
                                (h * h);
    for (int i = 0; i < ns.size(); ++i) {
        REQUIRE(std::abs(lo2[i]) < 1e-6);
        REQUIRE(std::abs(hi2[i]) < 1e-6);
    }
    // every basis function vanishes at the lower boundary
    REQUIRE(ns.eval_all(0.0).norm() < 1e-14);
}

TEST_CASE("natural cubic span matches the truncated-power oracle") {
    const std::vector<double> xi = {0.0, 2.1, 5.5, 19.0};
    NaturalCubicBasis ns(0.0, 19.0, {2.1, 5.5});
    const std::vector<double> tfit = {1.0, 4.0, 9.0, 16.0};
    Eigen::MatrixXd tp_fit = tp_natural(tfit, xi);

    // augment the library basis with a constant column so both bases span
    // the same 4-dimensional natural cubic space
    auto lib_aug = [&](const std::vector<double>& ts) {
        Eigen::MatrixXd m(ts.size(), 4);
        for (size_t r = 0; r < ts.size(); ++r) {
            m(r, 0) = 1.0;
            m.row(r).tail(3) = ns.eval_all(ts[r]).transpose();
        }
        return m;
    };

    Eigen::MatrixXd coef = tp_fit.partialPivLu().solve(lib_aug(tfit));
    Eigen::MatrixXd coef_rev = lib_aug(tfit).partialPivLu().solve(tp_fit);

    std::vector<double> grid;
    for (int i = 0; i <= 22; ++i) grid.push_back(19.0 * i / 22.0);
    const Eigen::MatrixXd tp_g = tp_natural(grid, xi);
    const Eigen::MatrixXd lib_g = lib_aug(grid);
    REQUIRE((tp_g * coef - lib_g).cwiseAbs().maxCoeff() < 1e-10);
    REQUIRE((lib_g * coef_rev - tp_g).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("natural cubic derivative matches finite differences") {
    NaturalCubicBasis ns(0.0, 19.0, {2.1, 5.5});
    const double h = 1e-6;
    for (double t : {1.0, 3.3, 7.3, 14.0}) {
        const Eigen::VectorXd d1 = ns.eval_all_derivative(t, 1);
        const Eigen::VectorXd fd = (ns.eval_all(t + h) - ns.eval_all(t - h)) / (2.0 * h);
        for (int i = 0; i < ns.size(); ++i) REQUIRE(std::abs(d1[i] - fd[i]) < 1e-5);
    }
}

TEST_CASE("percentile knots are interior, ordered, and hit simple quantiles") {
    std::vector<double> v;
    for (int i = 0; i <= 100; ++i) v.push_back(static_cast<double>(i));
    const auto k = jmbma::percentile_knots(v, 3, 0.0, 100.0);
    REQUIRE(k.size() == 3);
    REQUIRE(std::abs(k[0] - 25.0) < 1e-12);
    REQUIRE(std::abs(k[1] - 50.0) < 1e-12);
    REQUIRE(std::abs(k[2] - 75.0) < 1e-12);
    // heavy ties at the ends stay strictly interior and increasing
    std::vector<double> ties(50, 0.0);
    ties.resize(100, 10.0);
    const auto k2 = jmbma::percentile_knots(ties, 4, 0.0, 10.0);
    for (size_t i = 0; i < k2.size(); ++i) {
        REQUIRE(k2[i] > 0.0);
        REQUIRE(k2[i] < 10.0);
        if (i > 0) REQUIRE(k2[i] > k2[i - 1]);
    }
}

TEST_CASE("design matrices stack row evaluations") {
    BSplineBasis bs(KnotVector{0.0, 4.0, {1.0, 2.0, 3.0}, 3});
    const std::vector<double> ts = {0.5, 1.7, 3.9};
    const Eigen::MatrixXd m = bs.design(ts);
    REQUIRE(m.rows() == 3);
    REQUIRE(m.cols() == bs.size());
    for (int r = 0; r < 3; ++r)
        REQUIRE((m.row(r).transpose() - bs.eval_all(ts[r])).norm() == 0.0);
}
