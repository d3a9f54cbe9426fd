#ifndef TOPOFUSE_DOWNSTREAM_HPP
#define TOPOFUSE_DOWNSTREAM_HPP

#include "topofuse/dataio.hpp"
#include "topofuse/network.hpp"
#include "topofuse/preprocess.hpp"

#include <vector>

/**
 * @file downstream.hpp
 *
 * @brief Analyses over the fused embedding.
 */

namespace topofuse {

inline constexpr double gmm_variance_floor = 1e-6;

struct GmmOptions {
    int max_iter = 500;
    /** Stop once an iteration improves the log-likelihood by less than this fraction of its magnitude. */
    double rel_tol = 1e-10;
};

/** Diagonal-covariance Gaussian mixture. */
struct ClusterModel {
    int k = 0;
    Matrix means;
    /** Per-component diagonal variances, one row per component. */
    Matrix variances;
    Vector weights;
    Labels labels;
    /** Log-likelihood after every EM iteration of the chosen restart. */
    std::vector<double> loglik;
    /** One history per attempted restart; empty for discarded restarts. */
    std::vector<std::vector<double>> restart_logliks;
    int discarded_restarts = 0;
};

/**
 * EM with k-means++ seeding, repeated `restarts` times; the restart with the highest final
 * log-likelihood wins. Variances are floored at `gmm_variance_floor`. A restart in which some
 * component's responsibility mass drops below one spot is discarded.
 */
ClusterModel gmm_cluster(const Matrix& z, int k, int restarts, Rng& rng, const GmmOptions& options = {});

/** Log-likelihood of `z` under a fitted mixture. */
double gmm_loglik(const Matrix& z, const Matrix& means, const Matrix& variances, const Vector& weights);

/** Replaces every label by the most frequent label among itself and its `k_ref` spatial neighbors. */
Labels refine_labels(const Labels& labels, const Matrix& coords, int k_ref);

struct VisualizationOptions {
    int epochs = 300;
    double lr = 0.001;
    /** Positives per spot from the kNN graph on `z`. */
    int k = 7;
    int n_neg = 5;
    double nu_high = 0.05;
    double nu_low = 1.0;
};

struct VisualizationResult {
    Matrix coords;
    std::vector<double> loss_history;
    ModelParams params;
};

/** Trains a fresh `d -> d -> 2` MLP so that 2-D similarities follow those of `z`. */
VisualizationResult fit_visualization(const Matrix& z, const VisualizationOptions& options, Rng& rng);

/** Applies a trained visualization MLP. */
Matrix visualization_forward(const Matrix& z, const ModelParams& params);

struct LassoResult {
    Vector w;
    double kkt_residual = 0;
    int sweeps = 0;
    bool converged = false;
};

/** `sign(x) * max(|x| - t, 0)`. */
double soft_threshold(double x, double t);

/**
 * Minimizes `|y - B w|^2 + l1 |w|_1` by cyclic coordinate descent until the KKT residual
 * drops below `tol` or `max_sweeps` passes have run.
 */
LassoResult lasso(const Matrix& b, const Vector& y, double l1, double tol = 1e-6, int max_sweeps = 1000);

/** Largest violation of the Lasso optimality conditions at `w`. */
double lasso_kkt_residual(const Matrix& b, const Vector& y, const Vector& w, double l1);

struct DeconvolutionResult {
    /** Distinct labels in ascending order; column `j` of `weights` belongs to `classes[j]`. */
    std::vector<int> classes;
    /** Cluster means as columns. */
    Matrix dictionary;
    Matrix weights;
    /** Population standard deviation of each weight row. */
    std::vector<double> impurity;
    /** Spots whose solve stopped at the sweep limit. */
    int non_converged = 0;
};

DeconvolutionResult deconvolve(const Matrix& z, const Labels& labels, double l1);

struct GeneImportance {
    std::vector<int> classes;
    /** One row per class, one column per selected gene. */
    Matrix importance;
};

/**
 * Mean shift of the embedding of each cluster's spots when one standardized gene column is zeroed.
 */
GeneImportance marker_importance(const FusionNetwork& network, const PreprocessedData& data, const Labels& labels);

/** Top `top_n` genes of `cluster`, ties to the lower gene index. */
std::vector<MarkerEntry> rank_markers(const GeneImportance& importance, const PreprocessedData& data, int cluster,
                                      int top_n);

struct PagaGraph {
    std::vector<int> classes;
    Matrix connectivity;
    /** Undirected kNN edges after symmetrization. */
    Index total_edges = 0;

    std::vector<PagaEdge> edges() const;
};

PagaGraph paga_connectivity(const Matrix& z, const Labels& labels, int k);

/** Decoder output of a dropout-free pass; columns follow `data.selected_gene_ids`. */
Matrix denoise(const FusionNetwork& network, const PreprocessedData& data);

/** Fourth root of the mean row sum over each spot's cluster. */
std::vector<double> region_statistic(const Matrix& x_tr, const Labels& labels);

}

#endif
