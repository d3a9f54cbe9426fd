#ifndef TOPOFUSE_PREPROCESS_HPP
#define TOPOFUSE_PREPROCESS_HPP

#include "topofuse/dataio.hpp"
#include "topofuse/types.hpp"

#include <optional>
#include <string>
#include <vector>

/**
 * @file preprocess.hpp
 *
 * @brief Turns raw counts and morphology features into model inputs.
 *
 * The expression pipeline runs gene filtering, library-size normalization with a log transform,
 * selection of highly variable genes, and per-gene standardization, in that order.
 * Morphology features are reduced with PCA.
 * All variances use the population (1/N) convention.
 */

namespace topofuse {

struct FilterResult {
    Matrix matrix;
    std::vector<Index> kept;
};

/** Keeps the genes that are nonzero in at least `tau` spots, preserving column order. */
FilterResult filter_genes(const Matrix& tra, int tau);

/** `ln(1 + target_sum * x / rowsum)` for every entry. */
Matrix lognorm(const Matrix& tra, double target_sum);

/** Indices of the `n_top` columns with the largest variance; ties go to the lower index. Returned in ranking order. */
std::vector<Index> select_hvg(const Matrix& tra_lognorm, int n_top);

struct Standardized {
    Matrix matrix;
    Vector means;
    Vector stds;
};

/** Columns with standard deviation below 1e-12 become all-zero. */
Standardized standardize(const Matrix& m);

struct PcaResult {
    /** Centered data projected on the basis. */
    Matrix scores;
    /** Orthonormal columns, descending eigenvalue. */
    Matrix basis;
    Vector eigenvalues;
    Vector means;
};

/**
 * Principal components of the column-centered matrix.
 * Each basis column is signed so that its largest-magnitude entry is positive.
 */
PcaResult pca(const Matrix& m, int n_components);

struct PreprocessedData {
    /** Standardized log-normalized expression over the selected genes. */
    Matrix tra;
    /** Log-normalized expression over the selected genes, before standardization. */
    Matrix tra_lognorm;
    std::optional<Matrix> mor;
    std::vector<std::string> selected_gene_ids;
    /** Column of each selected gene in the raw expression matrix. */
    std::vector<Index> selected_columns;
    Vector gene_means;
    Vector gene_stds;
    std::optional<Matrix> pca_basis;
};

/** Runs the full pipeline with the settings in `cfg` (tau, target_sum, n_hvg, n_pcs_mor). */
PreprocessedData preprocess(const SpotDataset& data, const RunConfig& cfg);

}

#endif
