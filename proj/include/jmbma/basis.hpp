#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "jmbma/errors.hpp"

namespace jmbma {

// Knot configuration for a B-spline basis on the closed interval
// [boundary_low, boundary_high]. The full knot sequence repeats each
// boundary knot degree+1 times (a clamped basis).
struct KnotVector {
    double boundary_low = 0.0;
    double boundary_high = 1.0;
    std::vector<double> internal;
    int degree = 3;

    void validate() const {
        if (degree < 0) throw SpecError("KnotVector: degree must be >= 0");
        if (!(boundary_low < boundary_high))
            throw SpecError("KnotVector: boundary_low must be < boundary_high");
        if (static_cast<int>(internal.size()) + 2 < degree + 1)
            throw SpecError("KnotVector: need at least degree+1 total knots, got " +
                            std::to_string(internal.size() + 2));
        double prev = boundary_low;
        for (double k : internal) {
            if (!(k > boundary_low && k < boundary_high))
                throw SpecError("KnotVector: internal knot " + std::to_string(k) +
                                " outside open boundary interval");
            if (!(k > prev))
                throw SpecError("KnotVector: internal knots must be strictly increasing");
            prev = k;
        }
    }

    // Number of B-spline basis functions.
    int size() const { return static_cast<int>(internal.size()) + degree + 1; }

    // Full clamped knot sequence.
    std::vector<double> expand() const {
        validate();
        std::vector<double> t;
        t.reserve(internal.size() + 2 * (degree + 1));
        for (int i = 0; i <= degree; ++i) t.push_back(boundary_low);
        for (double k : internal) t.push_back(k);
        for (int i = 0; i <= degree; ++i) t.push_back(boundary_high);
        return t;
    }
};

namespace detail {

// Index of the knot span containing x: largest i with t[i] <= x < t[i+1],
// clamped so the last span is closed on the right.
inline int find_span(const std::vector<double>& t, int degree, double x) {
    const int n_basis = static_cast<int>(t.size()) - degree - 1;
    if (x >= t[n_basis]) return n_basis - 1;
    int lo = degree, hi = n_basis;
    while (hi - lo > 1) {
        const int mid = (lo + hi) / 2;
        if (x < t[mid])
            hi = mid;
        else
            lo = mid;
    }
    return lo;
}

}  // namespace detail

// Clamped B-spline basis. Rows of eval_all / derivative matrices follow the
// conventional ordering of the basis functions along the knot sequence.
class BSplineBasis {
public:
    explicit BSplineBasis(KnotVector kv) : kv_(std::move(kv)), knots_(kv_.expand()) {}

    const KnotVector& knot_vector() const { return kv_; }
    int size() const { return kv_.size(); }

    // All basis function values at x. Throws RangeError outside the closed
    // boundary interval.
    Eigen::VectorXd eval_all(double x) const { return eval_all_impl(x, kv_.degree); }

    // All basis function derivatives of the given order at x.
    Eigen::VectorXd eval_all_derivative(double x, int order) const {
        check_range(x);
        if (order < 0) throw SpecError("BSplineBasis: derivative order must be >= 0");
        if (order == 0) return eval_all(x);
        if (order > kv_.degree) return Eigen::VectorXd::Zero(size());
        // Values of the degree-reduced basis, then apply the derivative
        // recursion 'order' times.
        const int p = kv_.degree;
        Eigen::VectorXd cur = eval_all_impl(x, p - order);
        for (int d = p - order + 1; d <= p; ++d) {
            const int n_low = static_cast<int>(knots_.size()) - d;  // basis count at degree d-1
            Eigen::VectorXd next = Eigen::VectorXd::Zero(n_low - 1);
            for (int i = 0; i < n_low - 1; ++i) {
                double v = 0.0;
                const double den1 = knots_[i + d] - knots_[i];
                if (den1 > 0.0) v += d / den1 * cur[i];
                const double den2 = knots_[i + d + 1] - knots_[i + 1];
                if (den2 > 0.0) v -= d / den2 * cur[i + 1];
                next[i] = v;
            }
            cur = std::move(next);
        }
        return cur;
    }

    // Design matrix: row i holds eval_all(x[i]).
    Eigen::MatrixXd design(const std::vector<double>& x) const {
        Eigen::MatrixXd m(x.size(), size());
        for (size_t i = 0; i < x.size(); ++i) m.row(i) = eval_all(x[i]).transpose();
        return m;
    }

private:
    void check_range(double x) const {
        if (!(x >= kv_.boundary_low && x <= kv_.boundary_high))
            throw RangeError("BSplineBasis: x=" + std::to_string(x) +
                             " outside [" + std::to_string(kv_.boundary_low) + ", " +
                             std::to_string(kv_.boundary_high) + "]");
    }

    // Values of all basis functions of the given degree built on the same
    // knot sequence (used directly for degree == kv_.degree, and as the
    // starting point of the derivative recursion otherwise).
    Eigen::VectorXd eval_all_impl(double x, int degree) const {
        check_range(x);
        const int n_basis = static_cast<int>(knots_.size()) - degree - 1;
        Eigen::VectorXd out = Eigen::VectorXd::Zero(n_basis);
        // Degree-0 seed: indicator of the containing span, right-closed at
        // the final span.
        const int span = detail::find_span(knots_, kv_.degree, x);
        std::vector<double> col(knots_.size() - 1, 0.0);
        col[span] = 1.0;
        // Bottom-up triangle of the Cox-de Boor recursion.
        for (int d = 1; d <= degree; ++d) {
            const int cnt = static_cast<int>(knots_.size()) - d - 1;
            for (int i = 0; i < cnt; ++i) {
                double v = 0.0;
                const double den1 = knots_[i + d] - knots_[i];
                if (den1 > 0.0) v += (x - knots_[i]) / den1 * col[i];
                const double den2 = knots_[i + d + 1] - knots_[i + 1];
                if (den2 > 0.0) v += (knots_[i + d + 1] - x) / den2 * col[i + 1];
                col[i] = v;
            }
        }
        for (int i = 0; i < n_basis; ++i) out[i] = col[i];
        return out;
    }

    KnotVector kv_;
    std::vector<double> knots_;
};

// Natural cubic spline basis: cubic B-splines with the leading column
// dropped, projected onto the null space of the boundary second-derivative
// constraints. Dimension equals number of internal knots + 1; every basis
// function vanishes at boundary_low and has zero second derivative at both
// boundaries.
class NaturalCubicBasis {
public:
    NaturalCubicBasis(double boundary_low, double boundary_high, std::vector<double> internal)
        : bs_(KnotVector{boundary_low, boundary_high, std::move(internal), 3}) {
        const int m = bs_.size();  // full cubic B-spline count
        // Constraint rows: second derivatives at both boundaries, columns
        // 1..m-1 of the full basis (first column dropped).
        Eigen::MatrixXd con(2, m - 1);
        con.row(0) = bs_.eval_all_derivative(boundary_low, 2).tail(m - 1).transpose();
        con.row(1) = bs_.eval_all_derivative(boundary_high, 2).tail(m - 1).transpose();
        // Null-space basis via full QR of the transposed constraints.
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(con.transpose());
        Eigen::MatrixXd q = qr.householderQ();
        proj_ = q.rightCols(m - 1 - 2);
    }

    int size() const { return static_cast<int>(proj_.cols()); }
    double boundary_low() const { return bs_.knot_vector().boundary_low; }
    double boundary_high() const { return bs_.knot_vector().boundary_high; }

    Eigen::VectorXd eval_all(double x) const {
        const int m = bs_.size();
        return proj_.transpose() * bs_.eval_all(x).tail(m - 1);
    }

    Eigen::VectorXd eval_all_derivative(double x, int order) const {
        const int m = bs_.size();
        return proj_.transpose() * bs_.eval_all_derivative(x, order).tail(m - 1);
    }

    Eigen::MatrixXd design(const std::vector<double>& x) const {
        Eigen::MatrixXd m(x.size(), size());
        for (size_t i = 0; i < x.size(); ++i) m.row(i) = eval_all(x[i]).transpose();
        return m;
    }

private:
    BSplineBasis bs_;
    Eigen::MatrixXd proj_;
};

// Internal knots at equally spaced percentiles of the sample (type-7
// quantiles). Ties with the boundaries are nudged inward by a relative
// epsilon so the result is a valid interior knot set.
inline std::vector<double> percentile_knots(std::vector<double> values, int n_internal,
                                            double boundary_low, double boundary_high) {
    if (n_internal < 0) throw SpecError("percentile_knots: n_internal must be >= 0");
    if (values.empty()) throw SpecError("percentile_knots: empty sample");
    std::sort(values.begin(), values.end());
    const double span = boundary_high - boundary_low;
    const double eps = 1e-8 * span;
    std::vector<double> knots(n_internal);
    const size_t n = values.size();
    for (int j = 1; j <= n_internal; ++j) {
        const double p = static_cast<double>(j) / (n_internal + 1);
        const double h = p * (n - 1);
        const size_t lo = static_cast<size_t>(std::floor(h));
        const size_t hi = std::min(lo + 1, n - 1);
        double q = values[lo] + (h - lo) * (values[hi] - values[lo]);
        q = std::min(std::max(q, boundary_low + eps), boundary_high - eps);
        knots[j - 1] = q;
    }
    for (size_t j = 1; j < knots.size(); ++j)
        knots[j] = std::max(knots[j], knots[j - 1] + eps);
    for (size_t j = knots.size(); j-- > 0;) {
        const double cap = (j + 1 == knots.size()) ? boundary_high - eps : knots[j + 1] - eps;
        knots[j] = std::min(knots[j], cap);
    }
    return knots;
}

}  // namespace jmbma
