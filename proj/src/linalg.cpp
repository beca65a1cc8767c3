#include "ilab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

namespace ilab {

SymMatrix::SymMatrix(Matrix entries, double sym_tol) : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols()) {
        throw std::invalid_argument("SymMatrix: matrix must be square, got " +
                                    std::to_string(entries_.rows()) + "x" +
                                    std::to_string(entries_.cols()));
    }
    if (!entries_.allFinite()) {
        throw numerical_error("SymMatrix: non-finite entries");
    }
    const double asym = max_asymmetry(entries_);
    if (asym > sym_tol) {
        std::ostringstream msg;
        msg << "SymMatrix: input not symmetric, max relative asymmetry " << asym;
        throw std::invalid_argument(msg.str());
    }
}

SymMatrix SymMatrix::from_symmetrized(const Matrix& m) {
    return SymMatrix(((m + m.transpose()) / 2.0).eval());
}

double SymMatrix::max_asymmetry(const Matrix& m) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < m.cols(); ++j) {
            const double rel = std::abs(m(i, j) - m(j, i)) / (1.0 + std::abs(m(i, j)));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

namespace {

double off_diagonal_frobenius(const Matrix& a) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            if (i != j) sum += a(i, j) * a(i, j);
        }
    }
    return std::sqrt(sum);
}

// Fix each eigenvector's sign so its largest-magnitude coordinate is positive.
// Makes the decomposition deterministic for report byte-identity.
void normalize_row_signs(Matrix& basis) {
    for (Eigen::Index i = 0; i < basis.rows(); ++i) {
        Eigen::Index k;
        basis.row(i).cwiseAbs().maxCoeff(&k);
        if (basis(i, k) < 0.0) basis.row(i) = -basis.row(i);
    }
}

}  // namespace

EigenSystem sym_eigen(const SymMatrix& m, const JacobiOptions& options) {
    const int n = m.dim();
    Matrix a = m.entries();
    Matrix v = Matrix::Identity(n, n);  // columns accumulate the rotations

    bool converged = false;
    for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
        const double off = off_diagonal_frobenius(a);
        const double diag = a.diagonal().norm();
        if (off <= options.rel_off_tol * diag || off == 0.0) {
            converged = true;
            break;
        }
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
                // smaller-magnitude root of t^2 + 2*tau*t - 1 = 0
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;

                const double app = a(p, p);
                const double aqq = a(q, q);
                a(p, p) = app - t * apq;
                a(q, q) = aqq + t * apq;
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (int k = 0; k < n; ++k) {
                    if (k == p || k == q) continue;
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(p, k) = a(k, p);
                    a(k, q) = s * akp + c * akq;
                    a(q, k) = a(k, q);
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    if (!converged) {
        // the loop above breaks before rotating on the final check, so re-check
        const double off = off_diagonal_frobenius(a);
        const double diag = a.diagonal().norm();
        if (off > options.rel_off_tol * diag && off != 0.0) {
            std::ostringstream msg;
            msg << "sym_eigen: no convergence after " << options.max_sweeps
                << " sweeps, off-diagonal residual " << off;
            throw numerical_error(msg.str());
        }
    }

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return a(i, i) > a(j, j); });

    EigenSystem es;
    es.eigenvalues.resize(n);
    es.basis.resize(n, n);
    for (int i = 0; i < n; ++i) {
        es.eigenvalues(i) = a(order[i], order[i]);
        es.basis.row(i) = v.col(order[i]).transpose();
    }
    normalize_row_signs(es.basis);
    return es;
}

SpdInverse spd_invert(const SymMatrix& m, double min_eig_floor) {
    if (min_eig_floor <= 0.0) {
        throw std::invalid_argument("spd_invert: min_eig_floor must be positive");
    }
    EigenSystem es = sym_eigen(m);
    const double lambda_min = es.eigenvalues.minCoeff();
    const double damping =
        lambda_min <= min_eig_floor ? (min_eig_floor - lambda_min) + min_eig_floor : 0.0;

    Vector damped = es.eigenvalues.array() + damping;
    Vector inverse_vals = damped.array().inverse();
    Matrix inv = es.basis.transpose() * inverse_vals.asDiagonal() * es.basis;

    return SpdInverse{SymMatrix::from_symmetrized(inv), damping, std::move(es),
                      std::move(damped), std::move(inverse_vals)};
}

Vector solve_spd(const SymMatrix& m, const Vector& rhs) {
    if (rhs.size() != m.dim()) {
        throw std::invalid_argument("solve_spd: rhs length " + std::to_string(rhs.size()) +
                                    " does not match dim " + std::to_string(m.dim()));
    }
    Eigen::LLT<Matrix> llt(m.entries());
    if (llt.info() != Eigen::Success) {
        throw numerical_error("solve_spd: matrix is not positive definite");
    }
    return llt.solve(rhs);
}

}  // namespace ilab
