#ifndef TOPOFUSE_EVALUATE_HPP
#define TOPOFUSE_EVALUATE_HPP

#include "topofuse/dataio.hpp"
#include "topofuse/types.hpp"

#include <string>
#include <vector>

namespace topofuse {

/** Adjusted Rand index from the contingency table. Returns 0 when both partitions are trivial. */
double ari(const Labels& a, const Labels& b);

/**
 * Mean relative rank error between a high- and a low-dimensional representation.
 *
 * For every point, sums `|r - r'| / r` over its `k` nearest neighbors in the high space,
 * where `r` and `r'` are neighbor ranks (self excluded, starting at 1, distance ties to the
 * lower index) in the high and low spaces. The total is divided by `M * |M - 2k| / k`.
 * With `bidirectional`, the low-to-high sum is computed the same way and the two are averaged.
 */
double mrre(const Matrix& x_high, const Matrix& x_low, int k, bool bidirectional = false);

struct SvcOptions {
    double c = 1.0;
    int epochs = 200;
    std::uint64_t seed = 42;
};

/** One-vs-rest linear SVM over standardized features. */
struct LinearSvc {
    std::vector<int> classes;
    /** One row per class. */
    Matrix weights;
    Vector bias;
    /** Standardization applied before the linear map. */
    Vector feature_means;
    Vector feature_stds;

    Matrix standardize(const Matrix& x) const;
    /** Decision values, spots in rows, classes in columns. Expects standardized input. */
    Matrix decision(const Matrix& x_std) const;
    Labels predict(const Matrix& x) const;
};

/** Hinge loss plus L2 penalty, minimized by seeded SGD. */
LinearSvc train_linear_svc(const Matrix& x, const Labels& labels, const SvcOptions& options);

/** Linear Shapley values `w_j * (x_j - mu_j)` for every row of `x`. */
Matrix linear_shap(const Vector& weights, const Matrix& x, const Vector& mu);

struct ModalityContribution {
    std::vector<std::string> modalities;
    /** Per spot, per modality: largest absolute Shapley value among that modality's features. */
    Matrix per_spot;
    /** Unmerged Shapley values for the predicted class of each spot. */
    Matrix attributions;
    Labels predicted;
    std::vector<ContributionSummary> summaries;
    double train_accuracy = 0;
};

/**
 * Trains a linear SVM on the column-concatenated modalities and attributes each spot's
 * predicted-class score to features, then merges the attributions per modality with `max |phi|`.
 */
ModalityContribution modality_contribution(const std::vector<Matrix>& features_by_modality,
                                           const std::vector<std::string>& names, const Labels& labels,
                                           const SvcOptions& options = {});

/** Linear-interpolation quantile, matching the common "linear" definition. */
double quantile(std::vector<double> values, double q);

}

#endif
