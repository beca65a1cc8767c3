#pragma once

#include <optional>
#include <span>

#include "ilab/model.hpp"

namespace ilab {

struct TrainConfig {
    std::uint64_t seed = 0;
    int max_iters = 200000;
    double step_size = 1.0;
    double grad_tol = 1e-8;
    double damping_floor = 1e-6;
    bool freeze_featurizer = false;
};

/// Result of a training run. `risk` is the mean loss of the objective's
/// averaged term (the deleted-point set for LOO deletion runs, the full
/// training set otherwise) at the returned parameters.
struct TrainedModel {
    ParamVector params;
    double final_grad_norm = 0;
    double risk = 0;
    bool converged = false;
    int iterations = 0;
};

/// Extra weight epsilon on the loss term of one training point; epsilon of
/// -1/n reproduces leave-one-out.
struct Upweight {
    int point_index = 0;
    double epsilon = 0;
};

double empirical_risk(const Dataset& data, const ParamVector& params);
double empirical_risk(const FeaturizedDataset& fdata, const Vector& classifier_params);

// Full-batch gradient descent with Armijo backtracking on the objective
// mean loss + epsilon * loss(z_p). Deterministic given config (the seed fixes
// the parameter initialization when no warm start is supplied). With
// freeze_featurizer only the classifier block moves; features are computed
// once from the (seeded or warm-start) featurizer parameters.
TrainedModel minimize_weighted(const Dataset& data, const ParamLayout& layout,
                               const TrainConfig& cfg, std::optional<Upweight> upweight = {},
                               const ParamVector* warm_start = nullptr);

enum class LooFormulation {
    kDeleted,  // mean loss over the n-1 remaining points
    kEpsilon,  // mean loss over all n with epsilon = -1/n on point p
};

// The two formulations agree within optimizer tolerance; kDeleted is the
// default oracle path.
TrainedModel loo_retrain(const Dataset& data, const ParamLayout& layout, const TrainConfig& cfg,
                         int point_index, const ParamVector& warm_start,
                         LooFormulation formulation = LooFormulation::kDeleted);

/// Finite-difference Hessian plus the relative Frobenius asymmetry measured
/// before symmetrization.
struct FdHessian {
    SymMatrix matrix;
    double rel_asymmetry = 0;
};

// Central finite differences of the analytic gradient of the mean loss over
// `indices`, step 1e-5 * (1 + |theta_k|) per coordinate. With classifier_only
// the differentiation runs over the classifier block at frozen features,
// yielding the leading mu_c x mu_c block directly.
FdHessian fd_hessian_mean_loss(const Dataset& data, std::span<const int> indices,
                               const ParamVector& params, bool classifier_only = false);

// Hessian of the empirical risk over the whole dataset.
FdHessian full_hessian(const Dataset& data, const ParamVector& params,
                       bool classifier_only = false);

// Mean of the analytic per-point classifier Hessians.
SymMatrix classifier_hessian(const FeaturizedDataset& fdata, const Vector& classifier_params);

/// The featurizer-classifier block split of a full Hessian:
/// [ h_c       coupling ]
/// [ coupling^T featurizer_block ]
struct BlockHessian {
    SymMatrix full;
    SymMatrix h_c;
    Matrix coupling;           // mu_c x (mu - mu_c)
    SymMatrix featurizer_block;

    int mu_c() const { return h_c.dim(); }
};

BlockHessian split_blocks(const SymMatrix& full, int mu_c);

}  // namespace ilab
