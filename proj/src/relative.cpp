#include "ilab/relative.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ilab {

namespace {
constexpr double kUndefinedTol = 1e-12;
}

SubsetSpec SubsetSpec::full(int n) {
    SubsetSpec s;
    s.indices.resize(n);
    std::iota(s.indices.begin(), s.indices.end(), 0);
    return s;
}

void SubsetSpec::validate(int n) const {
    if (indices.empty()) throw std::invalid_argument("SubsetSpec: empty subset");
    for (size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || indices[i] >= n) {
            throw std::invalid_argument("SubsetSpec: index out of range");
        }
        if (i > 0 && indices[i] <= indices[i - 1]) {
            throw std::invalid_argument("SubsetSpec: indices must be strictly increasing");
        }
    }
}

SymMatrix relative_hessian(const Dataset& data, const SubsetSpec& subset,
                           const ParamVector& params, bool classifier_only) {
    subset.validate(data.size());
    return fd_hessian_mean_loss(data, subset.indices, params, classifier_only).matrix;
}

RelativeInfluence relative_influence(const Vector& grad_t, const SpdInverse& h_m_inv,
                                     const Vector& grad_p) {
    return {-(h_m_inv.matrix.entries() * grad_p),
            -grad_t.dot(h_m_inv.matrix.entries() * grad_p)};
}

int RatioSet::defined_count() const {
    int count = 0;
    for (bool undefined : undefined_mask) {
        if (!undefined) ++count;
    }
    return count;
}

RatioSet ratio_set(const Vector& grad_t, const std::vector<Vector>& train_grads,
                   const SpdInverse& h_inv, const SpdInverse& h_m_inv) {
    const int n = static_cast<int>(train_grads.size());
    RatioSet rs;
    rs.ratios = Vector::Zero(n);
    rs.undefined_mask.assign(n, false);
    for (int p = 0; p < n; ++p) {
        const double i_loss = -grad_t.dot(h_inv.matrix.entries() * train_grads[p]);
        const double i_loss_m = -grad_t.dot(h_m_inv.matrix.entries() * train_grads[p]);
        if (std::abs(i_loss_m) <= kUndefinedTol) {
            rs.undefined_mask[p] = true;
        } else {
            rs.ratios(p) = i_loss / i_loss_m;
        }
    }
    return rs;
}

LEPReport lep_check(const RatioSet& rs, double tau, SubsetSpec subset) {
    if (tau <= 0.0) throw std::invalid_argument("lep_check: tau must be positive");
    std::vector<double> defined;
    for (int p = 0; p < rs.ratios.size(); ++p) {
        if (!rs.undefined_mask[p]) defined.push_back(rs.ratios(p));
    }
    if (defined.empty()) throw numerical_error("lep_check: all ratios undefined");

    std::sort(defined.begin(), defined.end());
    const size_t n = defined.size();
    const double rho =
        n % 2 == 1 ? defined[n / 2] : 0.5 * (defined[n / 2 - 1] + defined[n / 2]);

    double spread = 0.0;
    if (rho != 0.0) {
        for (double r : defined) {
            spread = std::max(spread, std::abs(r / rho - 1.0));
        }
    } else {
        spread = std::numeric_limits<double>::infinity();
    }

    LEPReport report;
    report.rho = rho;
    report.spread = spread;
    report.is_lep = spread <= tau;
    report.tau = tau;
    report.subset = std::move(subset);
    report.defined_count = static_cast<int>(n);
    return report;
}

SubsetSpec sample_subset(const Dataset& data, int m, std::uint64_t seed,
                         bool stratified_by_label) {
    const int n = data.size();
    if (m < 1 || m > n) {
        throw std::invalid_argument("sample_subset: m must be in [1, n]");
    }
    std::mt19937_64 rng(seed);
    std::vector<int> chosen;
    if (!stratified_by_label) {
        std::vector<int> pool(n);
        std::iota(pool.begin(), pool.end(), 0);
        std::shuffle(pool.begin(), pool.end(), rng);
        chosen.assign(pool.begin(), pool.begin() + m);
    } else {
        // per-label quotas proportional to the class sizes, remainder to the
        // larger class
        std::vector<int> pos, neg;
        for (int i = 0; i < n; ++i) {
            (data.points[i].label == 1 ? pos : neg).push_back(i);
        }
        int m_pos = static_cast<int>(std::floor(static_cast<double>(m) * pos.size() / n));
        m_pos = std::min(m_pos, static_cast<int>(pos.size()));
        int m_neg = m - m_pos;
        if (m_neg > static_cast<int>(neg.size())) {
            m_pos += m_neg - static_cast<int>(neg.size());
            m_neg = static_cast<int>(neg.size());
        }
        std::shuffle(pos.begin(), pos.end(), rng);
        std::shuffle(neg.begin(), neg.end(), rng);
        chosen.assign(pos.begin(), pos.begin() + m_pos);
        chosen.insert(chosen.end(), neg.begin(), neg.begin() + m_neg);
    }
    std::sort(chosen.begin(), chosen.end());
    SubsetSpec subset{std::move(chosen)};
    subset.validate(n);
    return subset;
}

LepSearchResult lep_sample_search(const Dataset& data, const ParamVector& params,
                                  const Vector& grad_t, const std::vector<Vector>& train_grads,
                                  const SpdInverse& h_inv, const LepSearchConfig& cfg) {
    if (cfg.trials < 2) throw std::invalid_argument("lep_sample_search: trials must be >= 2");
    if (cfg.m > data.size()) throw std::invalid_argument("lep_sample_search: m exceeds n");

    std::mt19937_64 seeder(cfg.seed);
    LepSearchResult result;
    result.reports.reserve(cfg.trials);
    for (int trial = 0; trial < cfg.trials; ++trial) {
        const std::uint64_t trial_seed = seeder();
        SubsetSpec subset = sample_subset(data, cfg.m, trial_seed, cfg.stratified_by_label);
        const SymMatrix h_m = relative_hessian(data, subset, params, cfg.classifier_only);
        const SpdInverse h_m_inv = spd_invert(h_m, cfg.damping_floor);
        const RatioSet rs = ratio_set(grad_t, train_grads, h_inv, h_m_inv);
        result.reports.push_back(lep_check(rs, cfg.tau, std::move(subset)));
    }
    std::stable_sort(result.reports.begin(), result.reports.end(),
                     [](const LEPReport& a, const LEPReport& b) { return a.spread < b.spread; });

    const double rho0 = result.reports[0].rho;
    const double rho1 = result.reports[1].rho;
    result.best_pair_rho_gap =
        rho1 != 0.0 ? std::abs(rho0 / rho1 - 1.0) : std::numeric_limits<double>::infinity();
    return result;
}

Theorem2Diagnostics theorem2_diagnostics(const Vector& grad_t, const Vector& grad_p, double delta,
                                         const SymMatrix& h_m, const Matrix& h_inv,
                                         const Matrix& h_m_inv, double r) {
    if (delta == 0.0) throw std::invalid_argument("theorem2_diagnostics: delta must be nonzero");
    const int dim = static_cast<int>(grad_t.size());
    if (h_m.dim() != dim || h_inv.rows() != dim || h_m_inv.rows() != dim ||
        grad_p.size() != dim) {
        throw std::invalid_argument("theorem2_diagnostics: dimension mismatch");
    }

    Theorem2Diagnostics diag;
    diag.delta = delta;
    diag.g_matrix = Matrix::Zero(dim, dim);
    diag.g_matrix.rowwise() += grad_t.transpose();
    diag.g_matrix.diagonal().array() += delta;

    Eigen::FullPivLU<Matrix> lu(diag.g_matrix);
    if (!lu.isInvertible()) {
        // cannot happen for delta != 0 unless delta + sum(grad_t) == 0
        throw numerical_error("theorem2_diagnostics: replicated-gradient matrix is singular");
    }
    const Matrix g_inverse = lu.inverse();

    const Matrix difference = h_inv - r * h_m_inv;
    diag.mismatch_norm = (delta * (h_m.entries() * (g_inverse * difference))).norm();

    const Matrix conjugated = diag.g_matrix * h_m.entries() * h_inv * g_inverse;
    diag.row_sums = conjugated.rowwise().sum();
    diag.max_row_sum_deviation = (diag.row_sums.array() - r).abs().maxCoeff();
    diag.dot_product = grad_t.dot(grad_p);
    return diag;
}

}  // namespace ilab
