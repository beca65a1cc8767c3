#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "ilab/linalg.hpp"
#include "ilab/model.hpp"

namespace ilab {

/// A gradient re-expressed in the eigenbasis of the Hessian.
struct EigenCoords {
    Vector coords;
};

EigenCoords eigen_coords(const Vector& gradient, const EigenSystem& es);

// L1 norm of H^{-1} * gradient in eigenbasis coordinates: the sum of the
// inverse-Hessian eigenvalues weighted by |coords|. All inverse eigenvalues
// must be positive.
double memorization_norm(const EigenCoords& chi, const Vector& inverse_eigenvalues);

/// Per-training-point threshold functions for one test point, their minima
/// over the training set, and the assembled memorization thresholds. A
/// threshold <= 0 makes the corresponding bound vacuous and is flagged.
struct ThresholdReport {
    Vector t_plus;   // per-point sums of the sign-agreeing coordinate products
    Vector t_minus;  // per-point sums (negated) of the sign-opposing products
    double cal_t_plus = 0;   // minimum of t_plus over the training set
    double cal_t_minus = 0;
    double lambda_min_inv = 0;  // smallest inverse-Hessian eigenvalue
    double max_abs_psi = 0;     // largest |test coordinate|
    double d_plus = 0;          // cal_t_plus * lambda_min_inv / max_abs_psi
    double d_minus = 0;
    bool plus_vacuous = false;   // cal_t_plus <= 0
    bool minus_vacuous = false;
};

ThresholdReport thresholds(const Vector& test_grad, const std::vector<Vector>& train_grads,
                           const EigenSystem& es, const Vector& inverse_eigenvalues);

struct MemorizationVerdict {
    int point_index = 0;
    double norm_value = 0;
    double threshold_used = 0;
    bool is_memorizable = false;  // norm_value > threshold_used (strict)
};

MemorizationVerdict classify_point(int point_index, double norm_value, double d_threshold);

/// Entrywise near-nonnegativity of an inverse classifier Hessian, with the
/// tolerance validated against the gradient products it would enter: the
/// permitted negative mass times the squared largest gradient component must
/// be negligible next to the smallest positive-entry bilinear mass over all
/// gradient pairs.
struct AlmostPositiveReport {
    bool ok = false;
    double min_entry = 0;
    int negative_entries = 0;
    double tol = 0;
    double max_abs_gradient = 0;
    double min_pair_positive_mass = 0;
    bool calibration_ok = false;  // tol * max_abs_gradient^2 <= 1e-6 * min positive mass
};

AlmostPositiveReport almost_positive_check(const SpdInverse& h_c_inv,
                                           const std::vector<Vector>& gradient_set, double tol);

struct SignLabelRecord {
    int test_index = 0;
    int train_index = 0;
    int y_t = 0;
    int y_p = 0;
    int predicted_sign = 0;  // +1 when labels differ, -1 when they agree
    int observed_sign = 0;   // sign of the classifier-block influence
    bool almost_positive_ok = false;
    bool agree = false;
};

// Predicted-vs-observed influence signs for every (test, train) pair. When
// the almost-positive hypothesis is unmet the records are still produced but
// marked, so callers exclude them from the agreement guarantee.
std::vector<SignLabelRecord> sign_label_predict_and_verify(const FeaturizedDataset& train,
                                                           const FeaturizedDataset& tests,
                                                           const Vector& classifier_params,
                                                           const SpdInverse& h_c_inv,
                                                           const AlmostPositiveReport& ap);

struct PruneSummary {
    std::vector<int> kept_indices;
    int memorizable_kept = 0;
    int generalizable_kept = 0;
    int dropped = 0;
    int positives_before = 0;
    int negatives_before = 0;
    int positives_after = 0;
    int negatives_after = 0;
};

// Keeps every memorizable point, a seeded uniform sample of the generalizable
// ones (round-half-even count), and the original point order.
std::pair<Dataset, PruneSummary> prune(const Dataset& data,
                                       const std::vector<MemorizationVerdict>& verdicts,
                                       double keep_fraction, std::uint64_t seed);

struct EvalMetrics {
    std::optional<double> auc;  // empty when the eval set is single-class
    double mean_bce = 0;
};

EvalMetrics eval_metrics(const Dataset& eval_data, const ParamVector& params);

// Rank-based AUC with ties averaged; returns nothing for single-class labels.
std::optional<double> auc_rank(const std::vector<double>& scores, const std::vector<int>& labels);

// Spearman rank correlation with average ranks on ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace ilab
