#include "ilab/model.hpp"

#include <cmath>
#include <random>

namespace ilab {

namespace {

double softplus(double t) {
    // max(t,0) + log1p(exp(-|t|)) never overflows and never hits ln(0)
    return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t)));
}

double sigmoid(double t) {
    if (t >= 0.0) {
        return 1.0 / (1.0 + std::exp(-t));
    }
    const double e = std::exp(t);
    return e / (1.0 + e);
}

void check_label(int label) {
    if (label != 0 && label != 1) {
        throw std::invalid_argument("label must be 0 or 1, got " + std::to_string(label));
    }
}

}  // namespace

ParamVector::ParamVector(ParamLayout layout, Vector values)
    : layout_(layout), values_(std::move(values)) {
    if (values_.size() != layout_.total()) {
        throw std::invalid_argument("ParamVector: expected " + std::to_string(layout_.total()) +
                                    " values, got " + std::to_string(values_.size()));
    }
    if (!values_.allFinite()) {
        throw numerical_error("ParamVector: non-finite parameter values");
    }
}

Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
ParamVector::featurizer_weights() const {
    return {values_.data() + layout_.classifier_count(), layout_.feature_dim, layout_.d_in};
}

ParamVector init_params(const ParamLayout& layout, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector values = Vector::Zero(layout.total());
    const double weight_scale = 1.0 / std::sqrt(std::max(1, layout.d_in));
    const int fw = layout.classifier_count();
    for (int i = 0; i < layout.feature_dim * layout.d_in; ++i) {
        values(fw + i) = weight_scale * normal(rng);
    }
    for (int i = 0; i < layout.feature_dim; ++i) {
        values(fw + layout.feature_dim * layout.d_in + i) = 0.1 * normal(rng);
    }
    return ParamVector(layout, std::move(values));
}

Vector featurize(const Vector& x, const ParamVector& params) {
    const auto& layout = params.layout();
    if (x.size() != layout.d_in) {
        throw std::invalid_argument("featurize: input length " + std::to_string(x.size()) +
                                    " does not match d_in " + std::to_string(layout.d_in));
    }
    Vector pre = params.featurizer_weights() * x + params.featurizer_biases();
    Vector out(layout.feature_dim);
    for (int k = 0; k < layout.feature_dim; ++k) {
        out(k) = softplus(pre(k));
    }
    return out;
}

FeaturizedDataset featurize_dataset(const Dataset& data, const ParamVector& params) {
    FeaturizedDataset out;
    out.feature_dim = params.layout().feature_dim;
    out.points.reserve(data.points.size());
    for (const auto& z : data.points) {
        out.points.push_back({featurize(z.x, params), z.label});
    }
    return out;
}

ClassifierOutput classifier_forward(const Vector& v, const Vector& classifier_params) {
    if (v.size() + 1 != classifier_params.size()) {
        throw std::invalid_argument("classifier_forward: feature length " +
                                    std::to_string(v.size()) + " needs " +
                                    std::to_string(v.size() + 1) + " classifier parameters, got " +
                                    std::to_string(classifier_params.size()));
    }
    const double f = classifier_params.head(v.size()).dot(v) + classifier_params(v.size());
    return {f, sigmoid(f)};
}

double bce_loss_from_pre(double pre_activation, int label) {
    check_label(label);
    const double f = pre_activation;
    return std::max(f, 0.0) - f * label + std::log1p(std::exp(-std::abs(f)));
}

double bce_loss(const FeaturizedPoint& pt, const Vector& classifier_params) {
    return bce_loss_from_pre(classifier_forward(pt.v, classifier_params).pre_activation, pt.label);
}

ClassifierDerivatives classifier_derivatives(const FeaturizedPoint& pt,
                                             const Vector& classifier_params) {
    check_label(pt.label);
    const auto out = classifier_forward(pt.v, classifier_params);
    const int d = static_cast<int>(pt.v.size());
    const double dloss = out.prediction - pt.label;
    const double d2loss = out.prediction * (1.0 - out.prediction);

    Vector augmented(d + 1);  // (u, 1): bias as a fixed input coordinate
    augmented.head(d) = pt.v;
    augmented(d) = 1.0;

    Vector grad = dloss * augmented;
    Matrix hess = d2loss * (augmented * augmented.transpose());
    return {std::move(grad), SymMatrix(std::move(hess)), dloss, d2loss};
}

Vector classifier_gradient(const FeaturizedPoint& pt, const Vector& classifier_params) {
    check_label(pt.label);
    const auto out = classifier_forward(pt.v, classifier_params);
    const int d = static_cast<int>(pt.v.size());
    const double dloss = out.prediction - pt.label;
    Vector grad(d + 1);
    grad.head(d) = dloss * pt.v;
    grad(d) = dloss;
    return grad;
}

double point_loss(const RawPoint& z, const ParamVector& params) {
    FeaturizedPoint pt{featurize(z.x, params), z.label};
    return bce_loss(pt, Vector(params.classifier_block()));
}

Vector full_gradient(const RawPoint& z, const ParamVector& params) {
    const auto& layout = params.layout();
    check_label(z.label);

    Vector pre = params.featurizer_weights() * z.x + params.featurizer_biases();
    Vector v(layout.feature_dim);
    for (int k = 0; k < layout.feature_dim; ++k) {
        v(k) = softplus(pre(k));
    }
    const Vector cls = params.classifier_block();
    const double f = cls.head(layout.feature_dim).dot(v) + cls(layout.feature_dim);
    const double dloss = sigmoid(f) - z.label;

    Vector grad = Vector::Zero(layout.total());
    grad.head(layout.feature_dim) = dloss * v;
    grad(layout.feature_dim) = dloss;

    // d loss / d pre_k = dloss * w_k * sigmoid(pre_k)  (softplus' = sigmoid)
    const int fw = layout.classifier_count();
    for (int k = 0; k < layout.feature_dim; ++k) {
        const double dpre = dloss * cls(k) * sigmoid(pre(k));
        grad.segment(fw + k * layout.d_in, layout.d_in) = dpre * z.x;
        grad(fw + layout.feature_dim * layout.d_in + k) = dpre;
    }
    return grad;
}

GradientSignReport gradient_sign(const FeaturizedPoint& pt, const Vector& classifier_params) {
    for (int i = 0; i < pt.v.size(); ++i) {
        if (pt.v(i) < 0.0) {
            throw std::invalid_argument("gradient_sign: input coordinate " + std::to_string(i) +
                                        " is negative; nonnegative inputs required");
        }
    }
    const Vector grad = classifier_gradient(pt, classifier_params);
    GradientSignReport report;
    report.predicted_sign = pt.label == 0 ? 1 : -1;
    report.signs.resize(grad.size());
    for (int i = 0; i < grad.size(); ++i) {
        report.signs[i] = grad(i) >= 0.0 ? 1 : -1;
        if (report.signs[i] != report.predicted_sign) {
            report.violations.push_back(i);
        }
    }
    return report;
}

}  // namespace ilab
