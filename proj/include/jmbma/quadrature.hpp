#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>

#include "jmbma/errors.hpp"

namespace jmbma {

// Fixed 15-point Gauss-Kronrod rule on [-1,1]. Exact for polynomials of
// degree <= 22. Constants are the published QUADPACK values.
struct QuadratureRule {
    std::array<double, 15> nodes;
    std::array<double, 15> weights;

    static const QuadratureRule& gk15() {
        static const QuadratureRule rule = make_gk15();
        return rule;
    }

private:
    static QuadratureRule make_gk15() {
        constexpr std::array<double, 8> x = {
            0.9914553711208126, 0.9491079123427585, 0.8648644233597691,
            0.7415311855993944, 0.5860872354676911, 0.4058451513773972,
            0.2077849550078985, 0.0};
        constexpr std::array<double, 8> w = {
            0.02293532201052922, 0.06309209262997855, 0.1047900103222502,
            0.1406532597155259,  0.1690047266392679,  0.1903505780647854,
            0.2044329400752989,  0.2094821410847278};
        QuadratureRule r{};
        for (int i = 0; i < 7; ++i) {
            r.nodes[i] = -x[i];
            r.nodes[14 - i] = x[i];
            r.weights[i] = w[i];
            r.weights[14 - i] = w[i];
        }
        r.nodes[7] = 0.0;
        r.weights[7] = w[7];
        return r;
    }
};

// Integral of f over [a,b] with the 15-point rule rescaled from [-1,1].
template <typename F>
double integrate(F&& f, double a, double b) {
    if (!(a <= b)) throw RangeError("integrate: a > b");
    if (a == b) return 0.0;
    const auto& rule = QuadratureRule::gk15();
    const double mid = 0.5 * (a + b);
    const double half = 0.5 * (b - a);
    double sum = 0.0;
    for (int k = 0; k < 15; ++k) {
        const double t = mid + half * rule.nodes[k];
        const double v = f(t);
        if (!std::isfinite(v))
            throw NumericError("integrate: non-finite integrand at t=" + std::to_string(t));
        sum += rule.weights[k] * v;
    }
    return half * sum;
}

// Iterated integral: outer rule over [a,b], whose integrand at outer node t
// is the inner 15-point integral of g(t, .) over [0, t].
template <typename G>
double integrate_nested(G&& g, double a, double b) {
    return integrate(
        [&](double t) { return integrate([&](double s) { return g(t, s); }, 0.0, t); }, a, b);
}

}  // namespace jmbma
