#include "ilab/memgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ilab {

namespace {
constexpr double kSignZeroTol = 1e-12;
}

EigenCoords eigen_coords(const Vector& gradient, const EigenSystem& es) {
    if (gradient.size() != es.basis.rows()) {
        throw std::invalid_argument("eigen_coords: gradient length does not match basis dim");
    }
    return {es.basis * gradient};
}

double memorization_norm(const EigenCoords& chi, const Vector& inverse_eigenvalues) {
    if (chi.coords.size() != inverse_eigenvalues.size()) {
        throw std::invalid_argument("memorization_norm: dimension mismatch");
    }
    if ((inverse_eigenvalues.array() <= 0.0).any()) {
        throw numerical_error(
            "memorization_norm: inverse eigenvalues must be positive (damping missing?)");
    }
    return (inverse_eigenvalues.array() * chi.coords.array().abs()).sum();
}

ThresholdReport thresholds(const Vector& test_grad, const std::vector<Vector>& train_grads,
                           const EigenSystem& es, const Vector& inverse_eigenvalues) {
    if (test_grad.norm() == 0.0) {
        throw std::invalid_argument("thresholds: test gradient is zero");
    }
    if (train_grads.empty()) {
        throw std::invalid_argument("thresholds: no training gradients");
    }
    if ((inverse_eigenvalues.array() <= 0.0).any()) {
        throw numerical_error("thresholds: inverse eigenvalues must be positive");
    }

    const Vector psi = es.basis * test_grad;
    const int n = static_cast<int>(train_grads.size());

    ThresholdReport report;
    report.t_plus.resize(n);
    report.t_minus.resize(n);
    for (int p = 0; p < n; ++p) {
        const Vector chi = es.basis * train_grads[p];
        double plus = 0.0;
        double minus = 0.0;
        for (int i = 0; i < chi.size(); ++i) {
            const double product = chi(i) * psi(i);
            if (product >= 0.0) {
                plus += product;
            } else {
                minus -= product;
            }
        }
        report.t_plus(p) = plus;
        report.t_minus(p) = minus;
    }
    report.cal_t_plus = report.t_plus.minCoeff();
    report.cal_t_minus = report.t_minus.minCoeff();
    report.lambda_min_inv = inverse_eigenvalues.minCoeff();
    report.max_abs_psi = psi.cwiseAbs().maxCoeff();
    report.d_plus = report.cal_t_plus * report.lambda_min_inv / report.max_abs_psi;
    report.d_minus = report.cal_t_minus * report.lambda_min_inv / report.max_abs_psi;
    report.plus_vacuous = report.cal_t_plus <= 0.0;
    report.minus_vacuous = report.cal_t_minus <= 0.0;
    return report;
}

MemorizationVerdict classify_point(int point_index, double norm_value, double d_threshold) {
    return {point_index, norm_value, d_threshold, norm_value > d_threshold};
}

AlmostPositiveReport almost_positive_check(const SpdInverse& h_c_inv,
                                           const std::vector<Vector>& gradient_set, double tol) {
    if (gradient_set.empty()) {
        throw std::invalid_argument("almost_positive_check: empty gradient set");
    }
    if (tol < 0.0) {
        throw std::invalid_argument("almost_positive_check: tol must be nonnegative");
    }
    const Matrix& h = h_c_inv.matrix.entries();

    AlmostPositiveReport report;
    report.tol = tol;
    report.min_entry = h.minCoeff();
    report.negative_entries = static_cast<int>((h.array() < 0.0).count());

    double max_abs = 0.0;
    for (const auto& g : gradient_set) {
        max_abs = std::max(max_abs, g.cwiseAbs().maxCoeff());
    }
    report.max_abs_gradient = max_abs;

    // smallest positive-entry bilinear mass |sum_{ij: h_ij > 0} g_i h_ij g_j|
    // over all gradient pairs
    const Matrix positive_part = h.cwiseMax(0.0);
    double min_mass = std::numeric_limits<double>::infinity();
    for (const auto& gt : gradient_set) {
        const Vector partial = positive_part * gt;
        for (const auto& gp : gradient_set) {
            min_mass = std::min(min_mass, std::abs(partial.dot(gp)));
        }
    }
    report.min_pair_positive_mass = min_mass;
    report.calibration_ok = tol * max_abs * max_abs <= 1e-6 * min_mass;
    report.ok = report.min_entry >= -tol && report.calibration_ok;
    return report;
}

std::vector<SignLabelRecord> sign_label_predict_and_verify(const FeaturizedDataset& train,
                                                           const FeaturizedDataset& tests,
                                                           const Vector& classifier_params,
                                                           const SpdInverse& h_c_inv,
                                                           const AlmostPositiveReport& ap) {
    for (const auto& pt : train.points) {
        if ((pt.v.array() < 0.0).any()) {
            throw std::invalid_argument("sign_label_predict_and_verify: negative train feature");
        }
    }
    for (const auto& pt : tests.points) {
        if ((pt.v.array() < 0.0).any()) {
            throw std::invalid_argument("sign_label_predict_and_verify: negative test feature");
        }
    }

    std::vector<Vector> train_grads;
    train_grads.reserve(train.points.size());
    for (const auto& pt : train.points) {
        train_grads.push_back(classifier_gradient(pt, classifier_params));
    }

    std::vector<SignLabelRecord> records;
    records.reserve(tests.points.size() * train.points.size());
    for (int t = 0; t < tests.size(); ++t) {
        const Vector grad_t = classifier_gradient(tests.points[t], classifier_params);
        const Vector transformed = h_c_inv.matrix.entries() * grad_t;
        for (int p = 0; p < train.size(); ++p) {
            const double i_loss_c = -transformed.dot(train_grads[p]);
            SignLabelRecord rec;
            rec.test_index = t;
            rec.train_index = p;
            rec.y_t = tests.points[t].label;
            rec.y_p = train.points[p].label;
            rec.predicted_sign = rec.y_t != rec.y_p ? 1 : -1;
            rec.observed_sign =
                std::abs(i_loss_c) <= kSignZeroTol ? 0 : (i_loss_c > 0 ? 1 : -1);
            rec.almost_positive_ok = ap.ok;
            rec.agree = rec.predicted_sign == rec.observed_sign;
            records.push_back(rec);
        }
    }
    return records;
}

namespace {

// round-half-even to an integer count
int round_half_even(double x) {
    const double floor_x = std::floor(x);
    const double frac = x - floor_x;
    if (frac > 0.5) return static_cast<int>(floor_x) + 1;
    if (frac < 0.5) return static_cast<int>(floor_x);
    const int low = static_cast<int>(floor_x);
    return low % 2 == 0 ? low : low + 1;
}

}  // namespace

std::pair<Dataset, PruneSummary> prune(const Dataset& data,
                                       const std::vector<MemorizationVerdict>& verdicts,
                                       double keep_fraction, std::uint64_t seed) {
    if (verdicts.size() != data.points.size()) {
        throw std::invalid_argument("prune: verdicts must cover every point");
    }
    if (keep_fraction <= 0.0 || keep_fraction > 1.0) {
        throw std::invalid_argument("prune: keep_fraction must be in (0, 1]");
    }

    std::vector<int> memorizable, generalizable;
    for (int i = 0; i < data.size(); ++i) {
        (verdicts[i].is_memorizable ? memorizable : generalizable).push_back(i);
    }

    const int keep_gen = round_half_even(keep_fraction * generalizable.size());
    std::vector<int> sampled = generalizable;
    std::mt19937_64 rng(seed);
    std::shuffle(sampled.begin(), sampled.end(), rng);
    sampled.resize(keep_gen);

    std::vector<int> kept = memorizable;
    kept.insert(kept.end(), sampled.begin(), sampled.end());
    std::sort(kept.begin(), kept.end());
    if (kept.empty()) throw data_error("prune: result set is empty");

    Dataset pruned;
    pruned.d_in = data.d_in;
    PruneSummary summary;
    summary.kept_indices = kept;
    summary.memorizable_kept = static_cast<int>(memorizable.size());
    summary.generalizable_kept = keep_gen;
    summary.dropped = data.size() - static_cast<int>(kept.size());
    for (const auto& z : data.points) {
        (z.label == 1 ? summary.positives_before : summary.negatives_before) += 1;
    }
    for (int i : kept) {
        pruned.points.push_back(data.points[i]);
        (data.points[i].label == 1 ? summary.positives_after : summary.negatives_after) += 1;
    }
    return {std::move(pruned), std::move(summary)};
}

namespace {

// ranks with ties averaged, 1-based
std::vector<double> average_ranks(const std::vector<double>& values) {
    const size_t n = values.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

std::optional<double> auc_rank(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("auc_rank: scores and labels must have equal length");
    }
    const auto positives = std::count(labels.begin(), labels.end(), 1);
    const auto negatives = static_cast<long>(labels.size()) - positives;
    if (positives == 0 || negatives == 0) return std::nullopt;

    const std::vector<double> ranks = average_ranks(scores);
    double positive_rank_sum = 0.0;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) positive_rank_sum += ranks[i];
    }
    const double n_pos = static_cast<double>(positives);
    const double n_neg = static_cast<double>(negatives);
    return (positive_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

EvalMetrics eval_metrics(const Dataset& eval_data, const ParamVector& params) {
    if (eval_data.points.empty()) throw data_error("eval_metrics: empty eval set");
    std::vector<double> scores;
    std::vector<int> labels;
    double loss_sum = 0.0;
    const Vector cls = params.classifier_block();
    for (const auto& z : eval_data.points) {
        FeaturizedPoint pt{featurize(z.x, params), z.label};
        const auto out = classifier_forward(pt.v, cls);
        scores.push_back(out.prediction);
        labels.push_back(z.label);
        loss_sum += bce_loss_from_pre(out.pre_activation, z.label);
    }
    return {auc_rank(scores, labels), loss_sum / static_cast<double>(eval_data.size())};
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw std::invalid_argument("spearman: need two equal-length series of length >= 2");
    }
    const std::vector<double> ra = average_ranks(a);
    const std::vector<double> rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double mean = (n + 1.0) / 2.0;
    double cov = 0.0, var_a = 0.0, var_b = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - mean) * (rb[i] - mean);
        var_a += (ra[i] - mean) * (ra[i] - mean);
        var_b += (rb[i] - mean) * (rb[i] - mean);
    }
    if (var_a == 0.0 || var_b == 0.0) {
        throw numerical_error("spearman: a series is constant, correlation undefined");
    }
    return cov / std::sqrt(var_a * var_b);
}

}  // namespace ilab
