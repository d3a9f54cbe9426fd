#include "topofuse/preprocess.hpp"
#include "topofuse/error.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace topofuse {

FilterResult filter_genes(const Matrix& tra, int tau) {
    require(tau >= 0, ErrorCode::OutOfRange, "tau must be nonnegative");
    FilterResult out;
    for (Index g = 0; g < tra.cols(); ++g) {
        Index nonzero = 0;
        for (Index i = 0; i < tra.rows(); ++i) {
            nonzero += (tra(i, g) != 0);
        }
        if (nonzero >= tau) {
            out.kept.push_back(g);
        }
    }
    if (out.kept.empty()) {
        throw Error(ErrorCode::AllGenesFiltered, "no gene is expressed in at least " + std::to_string(tau) + " spots");
    }
    out.matrix.resize(tra.rows(), static_cast<Index>(out.kept.size()));
    for (std::size_t j = 0; j < out.kept.size(); ++j) {
        out.matrix.col(static_cast<Index>(j)) = tra.col(out.kept[j]);
    }
    return out;
}

Matrix lognorm(const Matrix& tra, double target_sum) {
    require(target_sum > 0, ErrorCode::OutOfRange, "target_sum must be positive");
    require((tra.array() >= 0).all(), ErrorCode::InvalidArgument, "expression values must be nonnegative");
    Matrix out(tra.rows(), tra.cols());
    for (Index i = 0; i < tra.rows(); ++i) {
        const double total = tra.row(i).sum();
        if (!(total > 0)) {
            throw Error(ErrorCode::ZeroLibrary, "spot row " + std::to_string(i) + " has zero total expression");
        }
        const double factor = target_sum / total;
        for (Index g = 0; g < tra.cols(); ++g) {
            out(i, g) = std::log1p(factor * tra(i, g));
        }
    }
    return out;
}

namespace {

double column_variance(const Matrix& m, Index c) {
    const double n = static_cast<double>(m.rows());
    const double mean = m.col(c).sum() / n;
    double ss = 0;
    for (Index i = 0; i < m.rows(); ++i) {
        const double d = m(i, c) - mean;
        ss += d * d;
    }
    return ss / n;
}

}

std::vector<Index> select_hvg(const Matrix& tra_lognorm, int n_top) {
    require(n_top >= 1, ErrorCode::OutOfRange, "n_top must be at least 1");
    const Index ngenes = tra_lognorm.cols();
    std::vector<double> variances(static_cast<std::size_t>(ngenes));
    for (Index g = 0; g < ngenes; ++g) {
        variances[static_cast<std::size_t>(g)] = column_variance(tra_lognorm, g);
    }
    std::vector<Index> order(static_cast<std::size_t>(ngenes));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return variances[static_cast<std::size_t>(a)] > variances[static_cast<std::size_t>(b)];
    });
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(n_top)));
    return order;
}

Standardized standardize(const Matrix& m) {
    Standardized out;
    out.matrix.resize(m.rows(), m.cols());
    out.means.resize(m.cols());
    out.stds.resize(m.cols());
    const double n = static_cast<double>(m.rows());
    for (Index c = 0; c < m.cols(); ++c) {
        const double mean = m.col(c).sum() / n;
        const double sd = std::sqrt(column_variance(m, c));
        out.means(c) = mean;
        out.stds(c) = sd;
        if (sd < 1e-12) {
            out.matrix.col(c).setZero();
        } else {
            out.matrix.col(c) = (m.col(c).array() - mean) / sd;
        }
    }
    return out;
}

namespace {

int covariance_rank(const Matrix& m) {
    const Matrix centered = m.rowwise() - m.colwise().mean();
    const Matrix covariance = (centered.transpose() * centered) / static_cast<double>(m.rows());
    Eigen::SelfAdjointEigenSolver<Matrix> solver(covariance, Eigen::EigenvaluesOnly);
    return static_cast<int>((solver.eigenvalues().array() >= 1e-12).count());
}

}

PcaResult pca(const Matrix& m, int n_components) {
    require(n_components >= 1, ErrorCode::OutOfRange, "n_components must be at least 1");
    require(n_components <= m.cols() && n_components <= m.rows() - 1, ErrorCode::OutOfRange,
            "n_components must not exceed min(N-1, #columns)");

    PcaResult out;
    const double n = static_cast<double>(m.rows());
    out.means = m.colwise().sum().transpose() / n;
    const Matrix centered = m.rowwise() - out.means.transpose();
    const Matrix covariance = (centered.transpose() * centered) / n;

    Eigen::SelfAdjointEigenSolver<Matrix> solver(covariance);
    if (solver.info() != Eigen::Success) {
        throw Error(ErrorCode::Internal, "eigendecomposition failed");
    }
    // Eigen returns ascending eigenvalues.
    const Index p = covariance.rows();
    out.basis.resize(p, n_components);
    out.eigenvalues.resize(n_components);
    for (int k = 0; k < n_components; ++k) {
        const Index src = p - 1 - k;
        const double value = solver.eigenvalues()(src);
        if (value < 1e-12) {
            throw Error(ErrorCode::RankDeficient, "component " + std::to_string(k + 1) + " has eigenvalue " +
                                                      std::to_string(value));
        }
        Vector column = solver.eigenvectors().col(src);
        Index largest = 0;
        column.cwiseAbs().maxCoeff(&largest);
        if (column(largest) < 0) {
            column = -column;
        }
        out.basis.col(k) = column;
        out.eigenvalues(k) = value;
    }
    out.scores = centered * out.basis;
    return out;
}

PreprocessedData preprocess(const SpotDataset& data, const RunConfig& cfg) {
    PreprocessedData out;

    auto filtered = filter_genes(data.tra, cfg.tau);
    const Matrix normalized = lognorm(filtered.matrix, cfg.target_sum);
    const auto hvg = select_hvg(normalized, cfg.n_hvg);

    // Keep the selected genes in their original column order.
    std::vector<Index> chosen = hvg;
    std::sort(chosen.begin(), chosen.end());

    out.tra_lognorm.resize(normalized.rows(), static_cast<Index>(chosen.size()));
    for (std::size_t j = 0; j < chosen.size(); ++j) {
        out.tra_lognorm.col(static_cast<Index>(j)) = normalized.col(chosen[j]);
        const Index raw = filtered.kept[static_cast<std::size_t>(chosen[j])];
        out.selected_columns.push_back(raw);
        out.selected_gene_ids.push_back(data.gene_ids[static_cast<std::size_t>(raw)]);
    }

    auto standardized = standardize(out.tra_lognorm);
    out.tra = std::move(standardized.matrix);
    out.gene_means = std::move(standardized.means);
    out.gene_stds = std::move(standardized.stds);

    if (data.mor) {
        const Index limit = std::min<Index>(data.mor->cols(), data.mor->rows() - 1);
        int components = static_cast<int>(std::min<Index>(cfg.n_pcs_mor, limit));
        // Flat morphology directions are dropped rather than rejected.
        components = std::min(components, covariance_rank(*data.mor));
        if (components < 1) {
            throw Error(ErrorCode::RankDeficient, "morphology features have no variance");
        }
        auto reduced = pca(*data.mor, components);
        out.mor = std::move(reduced.scores);
        out.pca_basis = std::move(reduced.basis);
    }
    return out;
}

}
