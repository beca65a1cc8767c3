#pragma once

#include "ilab/trainer.hpp"

namespace ilab {

/// A full-parameter gradient split at the classifier/featurizer boundary.
struct GradientSplit {
    Vector classifier;
    Vector featurizer;

    static GradientSplit split(const Vector& full_grad, int mu_c);
    Vector concat() const;
};

// -H^{-1} * grad; serves both the full and the classifier-block variant.
Vector influence_up(const SpdInverse& h_inv, const Vector& grad);

// -grad_t^T * H^{-1} * grad_p
double influence_loss(const Vector& grad_t, const SpdInverse& h_inv, const Vector& grad_p);

/// First-order predictions for removing one training point from a set of n.
struct PredictedChanges {
    Vector param_delta;   // (1/n) * H^{-1} * grad_p
    double loss_delta;    // -(1/n) * i_loss
};

PredictedChanges predicted_changes(const SpdInverse& h_inv, const Vector& grad_p,
                                   double i_loss_value, int n);

struct InfluenceRecord {
    int test_index = 0;
    int train_index = 0;
    double i_loss = 0;
    double i_loss_c = 0;
    double predicted_loss_change = 0;  // -(1/n) * i_loss, exact
    int sign = 0;                      // sign of i_loss, 0 when |i_loss| <= 1e-12
};

InfluenceRecord make_influence_record(int test_index, int train_index, double i_loss,
                                      double i_loss_c, int n);

/// How eigenpairs are assigned to the classifier block of the partition.
enum class EigenPartition {
    // rank eigenvectors by the norm of their classifier coordinates, take the
    // top mu_c (ties broken by larger eigenvalue)
    kClassifierMass,
    // plain descending-eigenvalue order
    kDescendingEigenvalue,
};

/// Once-per-Hessian data reused across (test, train) pairs: the partitioned
/// eigenbasis of the full Hessian, the derived inverse blocks, and both
/// inverse reconstruction residuals.
struct Theorem1Context {
    int mu_c = 0;
    EigenPartition partition = EigenPartition::kClassifierMass;

    Matrix basis_cc;  // classifier-assigned eigenvectors, classifier coordinates
    Matrix basis_cf;  // classifier-assigned eigenvectors, featurizer coordinates
    Matrix basis_fc;  // featurizer-assigned eigenvectors, classifier coordinates
    Matrix basis_ff;
    Vector lambda_c;  // eigenvalues assigned to the classifier block
    Vector lambda_f;

    Matrix classifier_correction;  // basis_fc^T diag(lambda_f) basis_fc
    Matrix inv_cc_correction;      // basis_fc^T diag(1/lambda_f) basis_fc
    Matrix inv_cf;                 // classifier/featurizer block of the inverse
    Matrix inv_ff;

    SpdInverse full_inverse;        // of the (already PD) full Hessian
    SpdInverse classifier_inverse;  // of its leading block
    Matrix reconstructed_classifier_inverse;  // (basis_cc^T diag(lambda_c) basis_cc + corr)^-1

    double coupling_norm_cf = 0;  // Frobenius norms of the off-blocks
    double coupling_norm_fc = 0;
    double coupling_norm_ff = 0;

    // assembled block expression vs the directly inverted full Hessian
    double inverse_block_error = 0;
    // reconstructed classifier-block inverse vs the directly inverted block
    double classifier_inverse_error = 0;
};

// Throws numerical_error if the full Hessian is not positive definite; damp
// it first.
Theorem1Context make_theorem1_context(const BlockHessian& bh,
                                      EigenPartition partition = EigenPartition::kClassifierMass);

/// Per-pair ratio diagnostics: the classifier-to-full influence ratio computed
/// directly from the two influence values, and reconstructed from the
/// partitioned eigen blocks. The two agree to roundoff whenever both
/// denominators are defined.
struct Theorem1Diagnostics {
    double i_loss_full = 0;
    double i_loss_classifier = 0;
    double cross_term = 0;  // featurizer-coupled part of the full bilinear form
    double ratio_direct = 0;
    double ratio_reconstructed = 0;
    bool ratio_defined = false;  // false when |i_loss_full| <= 1e-12
};

Theorem1Diagnostics theorem1_pair(const Theorem1Context& ctx, const GradientSplit& test_grad,
                                  const GradientSplit& train_grad);

// Convenience wrapper building a fresh context for a single pair.
Theorem1Diagnostics theorem1_diagnostics(const BlockHessian& bh, const GradientSplit& test_grad,
                                         const GradientSplit& train_grad,
                                         EigenPartition partition = EigenPartition::kClassifierMass);

}  // namespace ilab
