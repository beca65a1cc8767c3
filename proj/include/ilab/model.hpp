#pragma once

#include <cstdint>
#include <vector>

#include "ilab/linalg.hpp"

namespace ilab {

/// One training or test point in input space: feature vector + binary label.
struct RawPoint {
    Vector x;
    int label = 0;  // 0 or 1
};

struct Dataset {
    int d_in = 0;
    std::vector<RawPoint> points;

    int size() const { return static_cast<int>(points.size()); }
};

/// A point after the featurizer: nonnegative feature vector + label.
struct FeaturizedPoint {
    Vector v;
    int label = 0;
};

struct FeaturizedDataset {
    int feature_dim = 0;
    std::vector<FeaturizedPoint> points;

    int size() const { return static_cast<int>(points.size()); }
};

/// Shape of the flat parameter vector. Classifier parameters come first:
/// (w_0..w_{D-1}, b), then the featurizer weight matrix row-major, then its
/// biases.
struct ParamLayout {
    int d_in = 0;
    int feature_dim = 0;  // D

    int classifier_count() const { return feature_dim + 1; }
    int featurizer_count() const { return feature_dim * d_in + feature_dim; }
    int total() const { return classifier_count() + featurizer_count(); }

    bool operator==(const ParamLayout&) const = default;
};

class ParamVector {
public:
    ParamVector(ParamLayout layout, Vector values);

    const ParamLayout& layout() const { return layout_; }
    const Vector& values() const { return values_; }
    Vector& values() { return values_; }

    Eigen::VectorBlock<const Vector> classifier_block() const {
        return values_.head(layout_.classifier_count());
    }
    // D x d_in featurizer weight matrix (row-major slice of the flat vector)
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
    featurizer_weights() const;
    Eigen::VectorBlock<const Vector> featurizer_biases() const {
        return values_.segment(layout_.classifier_count() + layout_.feature_dim * layout_.d_in,
                               layout_.feature_dim);
    }

private:
    ParamLayout layout_;
    Vector values_;
};

// Deterministic seeded initialization: random featurizer, zero classifier.
ParamVector init_params(const ParamLayout& layout, std::uint64_t seed);

// softplus(W x + c) elementwise; outputs are strictly positive.
Vector featurize(const Vector& x, const ParamVector& params);

FeaturizedDataset featurize_dataset(const Dataset& data, const ParamVector& params);

struct ClassifierOutput {
    double pre_activation = 0;  // f = w.v + b
    double prediction = 0;      // sigmoid(f), in (0,1)
};

ClassifierOutput classifier_forward(const Vector& v, const Vector& classifier_params);

// Numerically stable binary cross entropy from the pre-activation.
double bce_loss_from_pre(double pre_activation, int label);
double bce_loss(const FeaturizedPoint& pt, const Vector& classifier_params);

/// Analytic first and second derivatives of the BCE loss with respect to the
/// classifier parameters; the bias is handled as an extra input coordinate
/// fixed at 1, so grad and point_hessian have size D+1.
struct ClassifierDerivatives {
    Vector grad;
    SymMatrix point_hessian;
    double dloss_dpre = 0;    // sigmoid(f) - y
    double d2loss_dpre2 = 0;  // sigmoid(f) * (1 - sigmoid(f))
};

ClassifierDerivatives classifier_derivatives(const FeaturizedPoint& pt,
                                             const Vector& classifier_params);

// Gradient only (skips the rank-one Hessian assembly).
Vector classifier_gradient(const FeaturizedPoint& pt, const Vector& classifier_params);

// Loss of a raw point through featurizer + classifier.
double point_loss(const RawPoint& z, const ParamVector& params);

// Gradient of the loss with respect to the full flat parameter vector;
// classifier block matches classifier_derivatives on the featurized point,
// featurizer block is backpropagated through the softplus layer.
Vector full_gradient(const RawPoint& z, const ParamVector& params);

/// All classifier-gradient components of a nonnegative-input point share one
/// sign, determined by the label alone. `signs` carries the computed signs
/// (sign(0) counts as +1), `violations` any coordinate that disagrees with
/// the label prediction.
struct GradientSignReport {
    std::vector<int> signs;
    std::vector<int> violations;
    int predicted_sign = 0;  // +1 when label 0, -1 when label 1

    bool all_match() const { return violations.empty(); }
};

// Precondition: every coordinate of pt.v nonnegative (throws otherwise).
GradientSignReport gradient_sign(const FeaturizedPoint& pt, const Vector& classifier_params);

}  // namespace ilab
