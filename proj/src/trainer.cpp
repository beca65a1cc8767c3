#include "ilab/trainer.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <vector>

namespace ilab {

double empirical_risk(const Dataset& data, const ParamVector& params) {
    if (data.points.empty()) {
        throw data_error("empirical_risk: empty dataset");
    }
    double sum = 0.0;
    for (const auto& z : data.points) {
        sum += point_loss(z, params);
    }
    return sum / static_cast<double>(data.points.size());
}

double empirical_risk(const FeaturizedDataset& fdata, const Vector& classifier_params) {
    if (fdata.points.empty()) {
        throw data_error("empirical_risk: empty dataset");
    }
    double sum = 0.0;
    for (const auto& pt : fdata.points) {
        sum += bce_loss(pt, classifier_params);
    }
    return sum / static_cast<double>(fdata.points.size());
}

namespace {

// Objective over the active parameter block: the full flat vector, or the
// classifier block alone when the featurizer is frozen (features cached once).
class TrainObjective {
public:
    TrainObjective(const Dataset& data, const ParamLayout& layout, bool freeze,
                   std::optional<Upweight> upweight, std::optional<int> deleted_index,
                   const ParamVector& reference)
        : data_(data), layout_(layout), freeze_(freeze), upweight_(upweight),
          reference_(reference) {
        for (int i = 0; i < data.size(); ++i) {
            if (deleted_index && i == *deleted_index) continue;
            mean_indices_.push_back(i);
        }
        if (mean_indices_.empty()) {
            throw data_error("training objective has no points");
        }
        if (freeze_) {
            features_.reserve(data.points.size());
            for (const auto& z : data.points) {
                features_.push_back({featurize(z.x, reference), z.label});
            }
        }
    }

    int active_dim() const { return freeze_ ? layout_.classifier_count() : layout_.total(); }

    Vector active_of(const ParamVector& full) const {
        return freeze_ ? Vector(full.classifier_block()) : full.values();
    }

    ParamVector full_of(const Vector& active) const {
        if (!freeze_) return ParamVector(layout_, active);
        Vector values = reference_.values();
        values.head(layout_.classifier_count()) = active;
        return ParamVector(layout_, std::move(values));
    }

    double value(const Vector& active) const {
        const auto loss = point_loss_fn(active);
        double sum = 0.0;
        for (int i : mean_indices_) sum += loss(i);
        double v = sum / static_cast<double>(mean_indices_.size());
        if (upweight_) v += upweight_->epsilon * loss(upweight_->point_index);
        return v;
    }

    Vector gradient(const Vector& active) const {
        Vector sum = Vector::Zero(active_dim());
        if (freeze_) {
            for (int i : mean_indices_) sum += classifier_gradient(features_[i], active);
            sum /= static_cast<double>(mean_indices_.size());
            if (upweight_) {
                sum += upweight_->epsilon *
                       classifier_gradient(features_[upweight_->point_index], active);
            }
        } else {
            const ParamVector params = full_of(active);
            for (int i : mean_indices_) sum += full_gradient(data_.points[i], params);
            sum /= static_cast<double>(mean_indices_.size());
            if (upweight_) {
                sum += upweight_->epsilon *
                       full_gradient(data_.points[upweight_->point_index], params);
            }
        }
        return sum;
    }

    // mean loss of the averaged term only (no epsilon contribution)
    double mean_risk(const Vector& active) const {
        const auto loss = point_loss_fn(active);
        double sum = 0.0;
        for (int i : mean_indices_) sum += loss(i);
        return sum / static_cast<double>(mean_indices_.size());
    }

private:
    std::function<double(int)> point_loss_fn(const Vector& active) const {
        if (freeze_) {
            return [this, &active](int i) { return bce_loss(features_[i], active); };
        }
        auto params = std::make_shared<ParamVector>(full_of(active));
        return [this, params](int i) { return point_loss(data_.points[i], *params); };
    }

    const Dataset& data_;
    ParamLayout layout_;
    bool freeze_;
    std::optional<Upweight> upweight_;
    const ParamVector& reference_;
    std::vector<int> mean_indices_;
    std::vector<FeaturizedPoint> features_;
};

TrainedModel descend(const TrainObjective& obj, const ParamVector& start, const TrainConfig& cfg) {
    Vector theta = obj.active_of(start);
    double value = obj.value(theta);
    if (!std::isfinite(value)) {
        throw numerical_error("minimize_weighted: objective non-finite at start");
    }
    Vector grad = obj.gradient(theta);
    double grad_norm = grad.norm();
    int iter = 0;

    while (iter < cfg.max_iters && grad_norm > cfg.grad_tol) {
        const double g2 = grad.squaredNorm();
        double step = cfg.step_size;
        bool accepted = false;
        for (int halving = 0; halving < 60; ++halving) {
            Vector candidate = theta - step * grad;
            const double candidate_value = obj.value(candidate);
            if (std::isfinite(candidate_value) && candidate_value <= value - 1e-4 * step * g2) {
                theta = std::move(candidate);
                value = candidate_value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // gradient at numerical floor, no decrease possible
        if (!std::isfinite(value)) {
            std::ostringstream msg;
            msg << "minimize_weighted: objective diverged at iteration " << iter
                << " (grad norm " << grad_norm << ")";
            throw numerical_error(msg.str());
        }
        grad = obj.gradient(theta);
        grad_norm = grad.norm();
        ++iter;
    }

    TrainedModel result{obj.full_of(theta), grad_norm, obj.mean_risk(theta),
                        grad_norm <= cfg.grad_tol, iter};
    return result;
}

void validate_config(const Dataset& data, const TrainConfig& cfg) {
    if (data.points.empty()) throw data_error("minimize_weighted: empty dataset");
    if (cfg.grad_tol <= 0.0) throw config_error("grad_tol must be positive");
    if (cfg.max_iters < 1) throw config_error("max_iters must be at least 1");
    if (cfg.step_size <= 0.0) throw config_error("step_size must be positive");
}

}  // namespace

TrainedModel minimize_weighted(const Dataset& data, const ParamLayout& layout,
                               const TrainConfig& cfg, std::optional<Upweight> upweight,
                               const ParamVector* warm_start) {
    validate_config(data, cfg);
    if (upweight) {
        if (upweight->point_index < 0 || upweight->point_index >= data.size()) {
            throw std::invalid_argument("minimize_weighted: upweight index out of range");
        }
        if (upweight->epsilon == 0.0) upweight.reset();  // reduces to plain minimization
    }
    const ParamVector start = warm_start ? *warm_start : init_params(layout, cfg.seed);
    TrainObjective obj(data, layout, cfg.freeze_featurizer, upweight, std::nullopt, start);
    return descend(obj, start, cfg);
}

TrainedModel loo_retrain(const Dataset& data, const ParamLayout& layout, const TrainConfig& cfg,
                         int point_index, const ParamVector& warm_start,
                         LooFormulation formulation) {
    if (data.size() < 2) throw data_error("loo_retrain: needs at least 2 points");
    if (point_index < 0 || point_index >= data.size()) {
        throw std::invalid_argument("loo_retrain: point index out of range");
    }
    if (formulation == LooFormulation::kEpsilon) {
        return minimize_weighted(data, layout, cfg,
                                 Upweight{point_index, -1.0 / data.size()}, &warm_start);
    }
    validate_config(data, cfg);
    TrainObjective obj(data, layout, cfg.freeze_featurizer, std::nullopt, point_index, warm_start);
    return descend(obj, warm_start, cfg);
}

FdHessian fd_hessian_mean_loss(const Dataset& data, std::span<const int> indices,
                               const ParamVector& params, bool classifier_only) {
    if (indices.empty()) throw data_error("fd_hessian_mean_loss: empty index set");
    for (int i : indices) {
        if (i < 0 || i >= data.size()) {
            throw std::invalid_argument("fd_hessian_mean_loss: index out of range");
        }
    }
    const auto& layout = params.layout();
    const double inv_count = 1.0 / static_cast<double>(indices.size());

    std::function<Vector(const Vector&)> mean_gradient;
    Vector theta0;
    if (classifier_only) {
        auto features = std::make_shared<std::vector<FeaturizedPoint>>();
        features->reserve(indices.size());
        for (int i : indices) {
            features->push_back({featurize(data.points[i].x, params), data.points[i].label});
        }
        theta0 = params.classifier_block();
        mean_gradient = [features, inv_count](const Vector& cls) {
            Vector sum = Vector::Zero(cls.size());
            for (const auto& pt : *features) sum += classifier_gradient(pt, cls);
            return Vector(sum * inv_count);
        };
    } else {
        theta0 = params.values();
        std::vector<int> idx(indices.begin(), indices.end());
        mean_gradient = [&data, layout, idx, inv_count](const Vector& values) {
            const ParamVector p(layout, values);
            Vector sum = Vector::Zero(values.size());
            for (int i : idx) sum += full_gradient(data.points[i], p);
            return Vector(sum * inv_count);
        };
    }

    const int dim = static_cast<int>(theta0.size());
    Matrix h(dim, dim);
    Vector perturbed = theta0;
    for (int k = 0; k < dim; ++k) {
        const double step = 1e-5 * (1.0 + std::abs(theta0(k)));
        perturbed(k) = theta0(k) + step;
        const Vector plus = mean_gradient(perturbed);
        perturbed(k) = theta0(k) - step;
        const Vector minus = mean_gradient(perturbed);
        perturbed(k) = theta0(k);
        h.col(k) = (plus - minus) / (2.0 * step);
    }
    if (!h.allFinite()) {
        throw numerical_error("fd_hessian_mean_loss: non-finite entries");
    }

    const double norm = h.norm();
    const double asym = norm > 0.0 ? (h - h.transpose()).norm() / norm : 0.0;
    return {SymMatrix::from_symmetrized(h), asym};
}

FdHessian full_hessian(const Dataset& data, const ParamVector& params, bool classifier_only) {
    std::vector<int> all(data.points.size());
    std::iota(all.begin(), all.end(), 0);
    return fd_hessian_mean_loss(data, all, params, classifier_only);
}

SymMatrix classifier_hessian(const FeaturizedDataset& fdata, const Vector& classifier_params) {
    if (fdata.points.empty()) throw data_error("classifier_hessian: empty dataset");
    const int dim = static_cast<int>(classifier_params.size());
    Matrix sum = Matrix::Zero(dim, dim);
    for (const auto& pt : fdata.points) {
        sum += classifier_derivatives(pt, classifier_params).point_hessian.entries();
    }
    return SymMatrix(Matrix(sum / static_cast<double>(fdata.points.size())));
}

BlockHessian split_blocks(const SymMatrix& full, int mu_c) {
    const int dim = full.dim();
    if (mu_c < 1 || mu_c > dim) {
        throw std::invalid_argument("split_blocks: mu_c " + std::to_string(mu_c) +
                                    " out of range for dim " + std::to_string(dim));
    }
    const Matrix& m = full.entries();
    const int rest = dim - mu_c;
    return BlockHessian{full, SymMatrix(Matrix(m.topLeftCorner(mu_c, mu_c))),
                        m.topRightCorner(mu_c, rest),
                        SymMatrix(Matrix(m.bottomRightCorner(rest, rest)))};
}

}  // namespace ilab
