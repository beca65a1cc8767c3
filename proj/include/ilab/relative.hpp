#pragma once

#include <cstdint>
#include <vector>

#include "ilab/trainer.hpp"

namespace ilab {

/// A subset of training-set indices, strictly increasing and distinct.
struct SubsetSpec {
    std::vector<int> indices;

    int m() const { return static_cast<int>(indices.size()); }
    static SubsetSpec full(int n);
    void validate(int n) const;
};

// Mean per-point Hessian over the subset only, evaluated at the full-data
// optimum. Shares the finite-difference path with full_hessian, so the full
// subset reproduces it bit for bit.
SymMatrix relative_hessian(const Dataset& data, const SubsetSpec& subset,
                           const ParamVector& params, bool classifier_only = false);

struct RelativeInfluence {
    Vector i_up_m;
    double i_loss_m = 0;
};

// Same bilinear forms as the influence module with the subset-Hessian inverse
// substituted.
RelativeInfluence relative_influence(const Vector& grad_t, const SpdInverse& h_m_inv,
                                     const Vector& grad_p);

/// Per-training-point ratios full-influence / subset-influence for one fixed
/// test point. Entries with |subset influence| <= 1e-12 are masked undefined.
struct RatioSet {
    Vector ratios;
    std::vector<bool> undefined_mask;

    int defined_count() const;
};

RatioSet ratio_set(const Vector& grad_t, const std::vector<Vector>& train_grads,
                   const SpdInverse& h_inv, const SpdInverse& h_m_inv);

struct LEPReport {
    double rho = 0;      // median of the defined ratios
    double spread = 0;   // max |r_p / rho - 1| over defined entries
    bool is_lep = false; // spread <= tau
    double tau = 0;
    SubsetSpec subset;
    int defined_count = 0;
};

LEPReport lep_check(const RatioSet& rs, double tau, SubsetSpec subset = {});

struct LepSearchConfig {
    int m = 0;
    int trials = 2;
    double tau = 0.05;
    std::uint64_t seed = 0;
    double damping_floor = 1e-6;
    bool classifier_only = false;
    bool stratified_by_label = false;
};

/// Result of sampling `trials` subsets: one LEP report each, sorted by spread
/// ascending, plus the relative gap between the central ratios of the two
/// best subsets.
struct LepSearchResult {
    std::vector<LEPReport> reports;
    double best_pair_rho_gap = 0;
};

LepSearchResult lep_sample_search(const Dataset& data, const ParamVector& params,
                                  const Vector& grad_t, const std::vector<Vector>& train_grads,
                                  const SpdInverse& h_inv, const LepSearchConfig& cfg);

/// Materialized uniformity diagnostics for one (test, train) pair and a given
/// ratio r: the replicated-gradient matrix G, the mismatch matrix that must
/// vanish for exact uniformity, and the row sums of the conjugated product
/// whose common value the ratio should equal.
struct Theorem2Diagnostics {
    double delta = 0;
    Matrix g_matrix;
    double mismatch_norm = 0;          // Frobenius norm of the mismatch matrix
    Vector row_sums;                   // row sums of G * H_m * H^{-1} * G^{-1}
    double max_row_sum_deviation = 0;  // max |row_sum - r|
    double dot_product = 0;            // grad_t . grad_p
};

// h_inv and h_m_inv are the inverse matrices of the full and subset Hessians;
// passing them explicitly lets exact-scaling cases cancel exactly.
Theorem2Diagnostics theorem2_diagnostics(const Vector& grad_t, const Vector& grad_p, double delta,
                                         const SymMatrix& h_m, const Matrix& h_inv,
                                         const Matrix& h_m_inv, double r);

// Uniform (optionally per-label stratified) sample of m indices without
// replacement, deterministic under the seed.
SubsetSpec sample_subset(const Dataset& data, int m, std::uint64_t seed, bool stratified_by_label);

}  // namespace ilab
