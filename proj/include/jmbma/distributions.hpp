#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "jmbma/errors.hpp"

namespace jmbma {

constexpr double neg_inf = -std::numeric_limits<double>::infinity();

inline double logdens_normal(double x, double mean, double sd) {
    const double z = (x - mean) / sd;
    return -0.5 * std::log(2.0 * M_PI) - std::log(sd) - 0.5 * z * z;
}

// Full multivariate normal log density N(0, D) at b, including the
// normalizing constant.
inline double logdens_re(const Eigen::VectorXd& b, const Eigen::MatrixXd& D) {
    const Eigen::Index q = b.size();
    Eigen::LLT<Eigen::MatrixXd> llt(D);
    if (llt.info() != Eigen::Success)
        throw NumericError("random-effects covariance is not positive definite");
    const Eigen::MatrixXd L = llt.matrixL();
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < q; ++i) logdet += std::log(L(i, i));
    const Eigen::VectorXd u = L.triangularView<Eigen::Lower>().solve(b);
    return -0.5 * q * std::log(2.0 * M_PI) - logdet - 0.5 * u.squaredNorm();
}

// Inverse-gamma with shape a and rate (inverse scale) r; -inf outside the
// support, as used for rejected MCMC states.
inline double logdens_invgamma(double x, double shape, double rate) {
    if (!(x > 0.0)) return neg_inf;
    return shape * std::log(rate) - std::lgamma(shape) - (shape + 1.0) * std::log(x) - rate / x;
}

inline double log_multigamma(int q, double a) {
    double v = 0.25 * q * (q - 1) * std::log(M_PI);
    for (int j = 1; j <= q; ++j) v += std::lgamma(a + 0.5 * (1.0 - j));
    return v;
}

// Inverse-Wishart(df, S) log density at D; -inf for non-positive-definite D.
inline double logdens_invwishart(const Eigen::MatrixXd& D, double df, const Eigen::MatrixXd& S) {
    const int q = static_cast<int>(D.rows());
    Eigen::LLT<Eigen::MatrixXd> lltD(D);
    if (lltD.info() != Eigen::Success) return neg_inf;
    Eigen::LLT<Eigen::MatrixXd> lltS(S);
    if (lltS.info() != Eigen::Success)
        throw NumericError("inverse-Wishart scale is not positive definite");
    double logdetD = 0.0, logdetS = 0.0;
    for (int i = 0; i < q; ++i) {
        logdetD += 2.0 * std::log(Eigen::MatrixXd(lltD.matrixL())(i, i));
        logdetS += 2.0 * std::log(Eigen::MatrixXd(lltS.matrixL())(i, i));
    }
    const double tr = lltD.solve(S).trace();
    return 0.5 * df * logdetS - 0.5 * df * q * std::log(2.0) - log_multigamma(q, 0.5 * df) -
           0.5 * (df + q + 1.0) * logdetD - 0.5 * tr;
}

}  // namespace jmbma
