#include "ilab/influence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace ilab {

namespace {
constexpr double kSignZeroTol = 1e-12;
// floor that never triggers damping on a genuinely PD matrix
const double kNoDampingFloor = std::numeric_limits<double>::min();
}  // namespace

GradientSplit GradientSplit::split(const Vector& full_grad, int mu_c) {
    if (mu_c < 0 || mu_c > full_grad.size()) {
        throw std::invalid_argument("GradientSplit: mu_c out of range");
    }
    return {full_grad.head(mu_c), full_grad.tail(full_grad.size() - mu_c)};
}

Vector GradientSplit::concat() const {
    Vector out(classifier.size() + featurizer.size());
    out.head(classifier.size()) = classifier;
    out.tail(featurizer.size()) = featurizer;
    return out;
}

Vector influence_up(const SpdInverse& h_inv, const Vector& grad) {
    if (grad.size() != h_inv.matrix.dim()) {
        throw std::invalid_argument("influence_up: gradient length does not match Hessian dim");
    }
    return -(h_inv.matrix.entries() * grad);
}

double influence_loss(const Vector& grad_t, const SpdInverse& h_inv, const Vector& grad_p) {
    if (grad_t.size() != h_inv.matrix.dim() || grad_p.size() != h_inv.matrix.dim()) {
        throw std::invalid_argument("influence_loss: gradient length does not match Hessian dim");
    }
    return -grad_t.dot(h_inv.matrix.entries() * grad_p);
}

PredictedChanges predicted_changes(const SpdInverse& h_inv, const Vector& grad_p,
                                   double i_loss_value, int n) {
    if (n < 1) throw std::invalid_argument("predicted_changes: n must be at least 1");
    const double inv_n = 1.0 / static_cast<double>(n);
    return {inv_n * (h_inv.matrix.entries() * grad_p), -inv_n * i_loss_value};
}

InfluenceRecord make_influence_record(int test_index, int train_index, double i_loss,
                                      double i_loss_c, int n) {
    InfluenceRecord rec;
    rec.test_index = test_index;
    rec.train_index = train_index;
    rec.i_loss = i_loss;
    rec.i_loss_c = i_loss_c;
    rec.predicted_loss_change = -(1.0 / static_cast<double>(n)) * i_loss;
    rec.sign = std::abs(i_loss) <= kSignZeroTol ? 0 : (i_loss > 0 ? 1 : -1);
    return rec;
}

namespace {

// Returns row indices of the eigenbasis assigned to the classifier block,
// followed by the rest; each group ordered by descending eigenvalue.
std::vector<int> partition_order(const EigenSystem& es, int mu_c, EigenPartition mode) {
    const int dim = static_cast<int>(es.eigenvalues.size());
    std::vector<int> idx(dim);
    std::iota(idx.begin(), idx.end(), 0);
    if (mode == EigenPartition::kDescendingEigenvalue) {
        return idx;  // already sorted by descending eigenvalue
    }
    std::vector<double> mass(dim);
    for (int i = 0; i < dim; ++i) {
        mass[i] = es.basis.row(i).head(mu_c).norm();
    }
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (mass[a] != mass[b]) return mass[a] > mass[b];
        return es.eigenvalues(a) > es.eigenvalues(b);
    });
    std::sort(idx.begin(), idx.begin() + mu_c,
              [&](int a, int b) { return es.eigenvalues(a) > es.eigenvalues(b); });
    std::sort(idx.begin() + mu_c, idx.end(),
              [&](int a, int b) { return es.eigenvalues(a) > es.eigenvalues(b); });
    return idx;
}

double relative_frobenius_gap(const Matrix& a, const Matrix& reference) {
    const double norm = reference.norm();
    return norm > 0.0 ? (a - reference).norm() / norm : (a - reference).norm();
}

}  // namespace

Theorem1Context make_theorem1_context(const BlockHessian& bh, EigenPartition partition) {
    Theorem1Context ctx;
    ctx.mu_c = bh.mu_c();
    ctx.partition = partition;

    ctx.full_inverse = spd_invert(bh.full, kNoDampingFloor);
    if (ctx.full_inverse.damped() ||
        ctx.full_inverse.source_eigen.eigenvalues.minCoeff() <= 0.0) {
        throw numerical_error(
            "make_theorem1_context: full Hessian is not positive definite; damp it first");
    }
    ctx.classifier_inverse = spd_invert(bh.h_c, kNoDampingFloor);

    const EigenSystem& es = ctx.full_inverse.source_eigen;
    const int dim = static_cast<int>(es.eigenvalues.size());
    const int mu_c = ctx.mu_c;
    const int mu_f = dim - mu_c;
    const std::vector<int> order = partition_order(es, mu_c, partition);

    Matrix basis(dim, dim);
    Vector lambda(dim);
    for (int i = 0; i < dim; ++i) {
        basis.row(i) = es.basis.row(order[i]);
        lambda(i) = es.eigenvalues(order[i]);
    }
    ctx.basis_cc = basis.topLeftCorner(mu_c, mu_c);
    ctx.basis_cf = basis.topRightCorner(mu_c, mu_f);
    ctx.basis_fc = basis.bottomLeftCorner(mu_f, mu_c);
    ctx.basis_ff = basis.bottomRightCorner(mu_f, mu_f);
    ctx.lambda_c = lambda.head(mu_c);
    ctx.lambda_f = lambda.tail(mu_f);

    const auto lam_c_inv = ctx.lambda_c.array().inverse().matrix().asDiagonal();
    const auto lam_f = ctx.lambda_f.asDiagonal();
    const auto lam_f_inv = ctx.lambda_f.array().inverse().matrix().asDiagonal();

    ctx.classifier_correction = ctx.basis_fc.transpose() * lam_f * ctx.basis_fc;
    ctx.inv_cc_correction = ctx.basis_fc.transpose() * lam_f_inv * ctx.basis_fc;
    ctx.inv_cf = ctx.basis_cc.transpose() * lam_c_inv * ctx.basis_cf +
                 ctx.basis_fc.transpose() * lam_f_inv * ctx.basis_ff;
    ctx.inv_ff = ctx.basis_cf.transpose() * lam_c_inv * ctx.basis_cf +
                 ctx.basis_ff.transpose() * lam_f_inv * ctx.basis_ff;

    ctx.coupling_norm_cf = ctx.basis_cf.norm();
    ctx.coupling_norm_fc = ctx.basis_fc.norm();
    ctx.coupling_norm_ff = ctx.basis_ff.norm();

    // block assembly of the inverse vs the directly inverted full Hessian
    Matrix assembled(dim, dim);
    assembled.topLeftCorner(mu_c, mu_c) =
        ctx.basis_cc.transpose() * lam_c_inv * ctx.basis_cc + ctx.inv_cc_correction;
    assembled.topRightCorner(mu_c, mu_f) = ctx.inv_cf;
    assembled.bottomLeftCorner(mu_f, mu_c) = ctx.inv_cf.transpose();
    assembled.bottomRightCorner(mu_f, mu_f) = ctx.inv_ff;
    ctx.inverse_block_error =
        relative_frobenius_gap(assembled, ctx.full_inverse.matrix.entries());

    // classifier block of the Hessian reconstructed from the partition, then
    // inverted and compared against the direct block inverse
    Matrix reconstructed_block =
        ctx.basis_cc.transpose() * ctx.lambda_c.asDiagonal() * ctx.basis_cc +
        ctx.classifier_correction;
    Eigen::LLT<Matrix> llt(reconstructed_block);
    if (llt.info() != Eigen::Success) {
        throw numerical_error("make_theorem1_context: reconstructed classifier block not PD");
    }
    ctx.reconstructed_classifier_inverse = llt.solve(Matrix::Identity(mu_c, mu_c));
    ctx.classifier_inverse_error = relative_frobenius_gap(
        ctx.reconstructed_classifier_inverse, ctx.classifier_inverse.matrix.entries());

    return ctx;
}

Theorem1Diagnostics theorem1_pair(const Theorem1Context& ctx, const GradientSplit& test_grad,
                                  const GradientSplit& train_grad) {
    Theorem1Diagnostics diag;
    diag.i_loss_full =
        influence_loss(test_grad.concat(), ctx.full_inverse, train_grad.concat());
    diag.i_loss_classifier =
        influence_loss(test_grad.classifier, ctx.classifier_inverse, train_grad.classifier);

    const Vector& g_t = test_grad.classifier;
    const Vector& g_p = train_grad.classifier;
    const Vector& f_t = test_grad.featurizer;
    const Vector& f_p = train_grad.featurizer;

    diag.cross_term = g_t.dot(ctx.inv_cc_correction * g_p) + g_t.dot(ctx.inv_cf * f_p) +
                      f_t.dot(ctx.inv_cf.transpose() * g_p) + f_t.dot(ctx.inv_ff * f_p);

    const Vector rotated_t = ctx.basis_cc * g_t;
    const Vector rotated_p = ctx.basis_cc * g_p;
    const double denominator =
        (rotated_t.array() * rotated_p.array() / ctx.lambda_c.array()).sum() + diag.cross_term;
    const double numerator = g_t.dot(ctx.reconstructed_classifier_inverse * g_p);

    diag.ratio_defined = std::abs(diag.i_loss_full) > kSignZeroTol;
    if (diag.ratio_defined) {
        diag.ratio_direct = diag.i_loss_classifier / diag.i_loss_full;
        diag.ratio_reconstructed = numerator / denominator;
    }
    return diag;
}

Theorem1Diagnostics theorem1_diagnostics(const BlockHessian& bh, const GradientSplit& test_grad,
                                         const GradientSplit& train_grad,
                                         EigenPartition partition) {
    return theorem1_pair(make_theorem1_context(bh, partition), test_grad, train_grad);
}

}  // namespace ilab
