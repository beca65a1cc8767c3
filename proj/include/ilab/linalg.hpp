#pragma once

#include <Eigen/Dense>

#include "ilab/errors.hpp"

namespace ilab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Dense symmetric matrix. Construction validates the symmetry invariant
/// |a_ij - a_ji| <= tol * (1 + |a_ij|) and rejects anything worse.
class SymMatrix {
public:
    explicit SymMatrix(Matrix entries, double sym_tol = 1e-10);

    // Symmetrizes (m + m^T)/2 first; for matrices assembled from finite
    // differences where roundoff asymmetry is expected.
    static SymMatrix from_symmetrized(const Matrix& m);

    int dim() const { return static_cast<int>(entries_.rows()); }
    const Matrix& entries() const { return entries_; }
    double operator()(int i, int j) const { return entries_(i, j); }

    // max over i,j of |a_ij - a_ji| / (1 + |a_ij|)
    static double max_asymmetry(const Matrix& m);

private:
    Matrix entries_;
};

/// Eigen decomposition of a SymMatrix: rows of `basis` are eigenvectors,
/// eigenvalues sorted descending, source = basis^T * diag(eigenvalues) * basis.
struct EigenSystem {
    Vector eigenvalues;
    Matrix basis;

    Matrix reconstruct() const {
        return basis.transpose() * eigenvalues.asDiagonal() * basis;
    }
};

struct JacobiOptions {
    int max_sweeps = 100;
    // converged when off-diagonal Frobenius <= rel_off_tol * diagonal Frobenius
    double rel_off_tol = 1e-12;
};

// Cyclic Jacobi rotations. Throws numerical_error carrying the off-diagonal
// residual if the sweep cap is hit before convergence.
EigenSystem sym_eigen(const SymMatrix& m, const JacobiOptions& options = {});

/// Inverse of a symmetric matrix forced positive definite by ridge damping.
/// The eigen system of the undamped source is kept: the damped source shares
/// its basis, with eigenvalues shifted by `damping_applied`.
struct SpdInverse {
    SymMatrix matrix;            // inverse of source + damping_applied * I
    double damping_applied = 0;  // ridge added to the diagonal, 0 when none
    EigenSystem source_eigen;
    Vector damped_eigenvalues;   // eigenvalues of the damped source, desc order
    Vector inverse_eigenvalues;  // reciprocals, aligned with source_eigen rows

    bool damped() const { return damping_applied > 0.0; }
};

// If lambda_min(m) <= min_eig_floor, a ridge of (2*min_eig_floor - lambda_min)
// is added before inversion so the smallest damped eigenvalue is 2*min_eig_floor.
SpdInverse spd_invert(const SymMatrix& m, double min_eig_floor);

// Cholesky solve; m must be positive definite as given (damp first if needed).
Vector solve_spd(const SymMatrix& m, const Vector& rhs);

}  // namespace ilab
