#include "topofuse/downstream.hpp"
#include "topofuse/error.hpp"
#include "topofuse/objective.hpp"
#include "topofuse/parallel.hpp"
#include "topofuse/topology.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace topofuse {

namespace {

constexpr double log_2pi = 1.8378770664093453;

std::vector<int> sorted_classes(const Labels& labels) {
    std::vector<int> classes(labels.begin(), labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    return classes;
}

std::vector<int> class_index(const Labels& labels, const std::vector<int>& classes) {
    std::vector<int> out;
    out.reserve(labels.size());
    for (int l : labels) {
        out.push_back(static_cast<int>(std::lower_bound(classes.begin(), classes.end(), l) - classes.begin()));
    }
    return out;
}

/** Per-spot log of weight times component density, spots in rows. */
Matrix log_joint(const Matrix& z, const Matrix& means, const Matrix& variances, const Vector& weights) {
    const Index n = z.rows(), d = z.cols(), k = means.rows();
    Matrix out(n, k);
    for (Index c = 0; c < k; ++c) {
        const double log_det = variances.row(c).array().log().sum();
        const double constant = std::log(weights(c)) - 0.5 * (static_cast<double>(d) * log_2pi + log_det);
        const Eigen::RowVectorXd inv = variances.row(c).cwiseInverse();
        for (Index i = 0; i < n; ++i) {
            const double q = ((z.row(i) - means.row(c)).array().square() * inv.array()).sum();
            out(i, c) = constant - 0.5 * q;
        }
    }
    return out;
}

double row_logsumexp(const Matrix& m, Index i) {
    const double top = m.row(i).maxCoeff();
    return top + std::log((m.row(i).array() - top).exp().sum());
}

struct RestartFit {
    Matrix means;
    Matrix variances;
    Vector weights;
    Labels labels;
    std::vector<double> loglik;
};

std::vector<Index> kmeans_pp(const Matrix& z, int k, Rng& rng) {
    const Index n = z.rows();
    std::vector<Index> centers{static_cast<Index>(uniform_index(rng, static_cast<std::size_t>(n)))};
    Vector d2 = (z.rowwise() - z.row(centers[0])).rowwise().squaredNorm();
    while (static_cast<int>(centers.size()) < k) {
        const double total = d2.sum();
        Index pick = n - 1;
        if (total <= 0) {
            pick = static_cast<Index>(uniform_index(rng, static_cast<std::size_t>(n)));
        } else {
            const double target = uniform01(rng) * total;
            double acc = 0;
            for (Index i = 0; i < n; ++i) {
                acc += d2(i);
                if (acc > target) {
                    pick = i;
                    break;
                }
            }
        }
        centers.push_back(pick);
        d2 = d2.cwiseMin((z.rowwise() - z.row(pick)).rowwise().squaredNorm());
    }
    return centers;
}

RestartFit em_restart(const Matrix& z, int k, Rng& rng, const GmmOptions& options) {
    const Index n = z.rows(), d = z.cols();
    const double nd = static_cast<double>(n);
    RestartFit fit;
    const auto centers = kmeans_pp(z, k, rng);
    fit.means.resize(k, d);
    for (int c = 0; c < k; ++c) {
        fit.means.row(c) = z.row(centers[static_cast<std::size_t>(c)]);
    }
    const Eigen::RowVectorXd mean = z.colwise().mean();
    const Eigen::RowVectorXd global_var =
        ((z.rowwise() - mean).array().square().colwise().sum() / nd).cwiseMax(gmm_variance_floor).matrix();
    fit.variances = global_var.replicate(k, 1);
    fit.weights = Vector::Constant(k, 1.0 / k);

    Matrix resp(n, k);
    for (int iter = 0; iter < options.max_iter; ++iter) {
        const Matrix lj = log_joint(z, fit.means, fit.variances, fit.weights);
        double ll = 0;
        for (Index i = 0; i < n; ++i) {
            const double lse = row_logsumexp(lj, i);
            ll += lse;
            resp.row(i) = (lj.row(i).array() - lse).exp().matrix();
        }
        const bool converged = !fit.loglik.empty() && ll - fit.loglik.back() < options.rel_tol * std::abs(ll);
        fit.loglik.push_back(ll);
        if (converged || iter + 1 == options.max_iter) {
            break;
        }

        const Vector mass = resp.colwise().sum().transpose();
        if (mass.minCoeff() < 1.0) {
            throw Error(ErrorCode::DegenerateComponent, "a mixture component lost all of its spots");
        }
        for (int c = 0; c < k; ++c) {
            const Vector r = resp.col(c);
            fit.means.row(c) = (r.transpose() * z) / mass(c);
            const Matrix centered = z.rowwise() - fit.means.row(c);
            fit.variances.row(c) = ((r.transpose() * centered.array().square().matrix()) / mass(c))
                                       .cwiseMax(gmm_variance_floor);
        }
        fit.weights = mass / nd;
    }

    fit.labels.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        Index best = 0;
        resp.row(i).maxCoeff(&best);
        fit.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return fit;
}

}

double gmm_loglik(const Matrix& z, const Matrix& means, const Matrix& variances, const Vector& weights) {
    const Matrix lj = log_joint(z, means, variances, weights);
    double ll = 0;
    for (Index i = 0; i < z.rows(); ++i) {
        ll += row_logsumexp(lj, i);
    }
    return ll;
}

ClusterModel gmm_cluster(const Matrix& z, int k, int restarts, Rng& rng, const GmmOptions& options) {
    require(k >= 1, ErrorCode::OutOfRange, "k must be >= 1");
    require(z.rows() >= k, ErrorCode::OutOfRange, "need at least k spots");
    require(restarts >= 1, ErrorCode::OutOfRange, "restarts must be >= 1");
    require(options.max_iter >= 1, ErrorCode::OutOfRange, "max_iter must be >= 1");
    require(z.allFinite(), ErrorCode::InvalidArgument, "embedding contains non-finite values");

    ClusterModel model;
    model.k = k;
    std::optional<RestartFit> best;
    for (int r = 0; r < restarts; ++r) {
        try {
            RestartFit fit = em_restart(z, k, rng, options);
            model.restart_logliks.push_back(fit.loglik);
            if (!best || fit.loglik.back() > best->loglik.back()) {
                best = std::move(fit);
            }
        } catch (const Error& e) {
            if (e.code() != ErrorCode::DegenerateComponent) {
                throw;
            }
            model.restart_logliks.emplace_back();
            ++model.discarded_restarts;
        }
    }
    if (!best) {
        throw Error(ErrorCode::DegenerateComponent, "every restart collapsed a component");
    }
    model.means = std::move(best->means);
    model.variances = std::move(best->variances);
    model.weights = std::move(best->weights);
    model.labels = std::move(best->labels);
    model.loglik = std::move(best->loglik);
    return model;
}

Labels refine_labels(const Labels& labels, const Matrix& coords, int k_ref) {
    require(k_ref >= 1, ErrorCode::OutOfRange, "k_ref must be >= 1");
    if (static_cast<Index>(labels.size()) != coords.rows()) {
        throw Error(ErrorCode::LengthMismatch, "one label per spot is required");
    }
    const Index n = coords.rows();
    if (n < 2) {
        return labels;
    }
    const auto graph = knn_graph(coords, std::min<int>(k_ref, static_cast<int>(n - 1)));
    Labels out(labels.size());
    for (Index i = 0; i < n; ++i) {
        const int own = labels[static_cast<std::size_t>(i)];
        std::map<int, int> votes{{own, 1}};
        for (Index j : graph.neighbors[static_cast<std::size_t>(i)]) {
            ++votes[labels[static_cast<std::size_t>(j)]];
        }
        int top = 0, winner = own;
        bool tied = false;
        for (const auto& [label, count] : votes) {
            if (count > top) {
                top = count;
                winner = label;
                tied = false;
            } else if (count == top) {
                tied = true;
            }
        }
        out[static_cast<std::size_t>(i)] = (tied || votes[own] == top) ? own : winner;
    }
    return out;
}

/*************************************
 ***** Visualization *****************
 *************************************/

Matrix visualization_forward(const Matrix& z, const ModelParams& params) { return mlp_forward(z, params.fusion); }

VisualizationResult fit_visualization(const Matrix& z, const VisualizationOptions& options, Rng& rng) {
    const Index n = z.rows(), d = z.cols();
    require(n >= 2, ErrorCode::OutOfRange, "visualization needs at least two spots");
    require(options.epochs >= 1 && options.lr > 0 && options.k >= 1 && options.n_neg >= 0, ErrorCode::OutOfRange,
            "invalid visualization options");
    require(z.allFinite(), ErrorCode::InvalidArgument, "embedding contains non-finite values");

    ModelParams params;
    for (auto [in, out] : {std::pair<Index, Index>{d, d}, std::pair<Index, Index>{d, 2}}) {
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        Layer layer{Matrix(in, out), Matrix::Zero(1, out)};
        for (Index c = 0; c < out; ++c) {
            for (Index r = 0; r < in; ++r) {
                layer.weight(r, c) = uniform(rng, -limit, limit);
            }
        }
        params.fusion.push_back(std::move(layer));
    }
    Adam optimizer(params, options.lr);
    const auto graph = knn_graph(z, std::min<int>(options.k, static_cast<int>(n - 1)));
    const double eps = KernelConfig{}.clamp_eps;
    const double p_low = (options.nu_low + 1.0) / options.nu_low;

    VisualizationResult result;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        std::vector<std::pair<Index, Index>> pairs;
        for (Index i = 0; i < n; ++i) {
            for (Index j : graph.neighbors[static_cast<std::size_t>(i)]) {
                pairs.emplace_back(i, j);
            }
            for (int s = 0; s < options.n_neg; ++s) {
                Index j = static_cast<Index>(uniform_index(rng, static_cast<std::size_t>(n - 1)));
                if (j >= i) {
                    ++j;
                }
                pairs.emplace_back(i, j);
            }
        }

        StackCache cache;
        const Matrix out = mlp_forward(z, params.fusion, &cache);
        Matrix grad_out = Matrix::Zero(n, 2);
        double loss = 0;
        for (const auto& [i, j] : pairs) {
            const double t = kappa_sq((z.row(i) - z.row(j)).squaredNorm(), options.nu_high);
            const Eigen::RowVector2d diff = out.row(i) - out.row(j);
            const double d2 = diff.squaredNorm();
            const double raw = kappa_sq(d2, options.nu_low);
            const double s = std::clamp(raw, eps, 1.0 - eps);
            loss -= t * std::log(s) + (1.0 - t) * std::log1p(-s);
            if (raw > eps && raw < 1.0 - eps) {
                const double dl_ds = -t / s + (1.0 - t) / (1.0 - s);
                const double ds_dd2 = -(p_low / options.nu_low) * raw / (1.0 + d2 / options.nu_low);
                const Eigen::RowVector2d g = 2.0 * dl_ds * ds_dd2 * diff;
                grad_out.row(i) += g;
                grad_out.row(j) -= g;
            }
        }
        if (!std::isfinite(loss)) {
            throw Error(ErrorCode::NonFiniteLoss, "visualization loss is not finite at epoch " + std::to_string(epoch + 1));
        }
        result.loss_history.push_back(loss);
        ModelParams grads = params.zeros_like();
        stack_backward(cache, nullptr, params.fusion, grad_out, grads.fusion);
        optimizer.step(params, grads);
    }
    result.coords = visualization_forward(z, params);
    if (!result.coords.allFinite()) {
        throw Error(ErrorCode::NonFiniteLoss, "visualization produced non-finite coordinates");
    }
    result.params = std::move(params);
    return result;
}

/*************************************
 ***** Lasso deconvolution ***********
 *************************************/

double soft_threshold(double x, double t) {
    if (x > t) {
        return x - t;
    }
    if (x < -t) {
        return x + t;
    }
    return 0.0;
}

namespace {

double kkt_from_gram(const Matrix& gram, const Vector& c, const Vector& w, double l1) {
    const Vector g = -2.0 * (c - gram * w);
    double worst = 0;
    for (Index j = 0; j < w.size(); ++j) {
        const double v = w(j) != 0 ? std::abs(g(j) + l1 * (w(j) > 0 ? 1.0 : -1.0)) : std::max(0.0, std::abs(g(j)) - l1);
        worst = std::max(worst, v);
    }
    return worst;
}

LassoResult lasso_gram(const Matrix& gram, const Vector& c, double l1, double tol, int max_sweeps) {
    const Index k = gram.rows();
    LassoResult out;
    out.w = Vector::Zero(k);
    out.kkt_residual = kkt_from_gram(gram, c, out.w, l1);
    if (out.kkt_residual < tol) {
        out.converged = true;
        return out;
    }
    for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
        for (Index j = 0; j < k; ++j) {
            if (gram(j, j) <= 0) {
                out.w(j) = 0;
                continue;
            }
            const double rho = c(j) - gram.row(j).dot(out.w) + gram(j, j) * out.w(j);
            out.w(j) = soft_threshold(rho, 0.5 * l1) / gram(j, j);
        }
        out.sweeps = sweep;
        out.kkt_residual = kkt_from_gram(gram, c, out.w, l1);
        if (out.kkt_residual < tol) {
            out.converged = true;
            break;
        }
    }
    return out;
}

}

double lasso_kkt_residual(const Matrix& b, const Vector& y, const Vector& w, double l1) {
    require(b.rows() == y.size() && b.cols() == w.size(), ErrorCode::ShapeMismatch, "lasso shapes disagree");
    return kkt_from_gram(b.transpose() * b, b.transpose() * y, w, l1);
}

LassoResult lasso(const Matrix& b, const Vector& y, double l1, double tol, int max_sweeps) {
    require(b.rows() == y.size(), ErrorCode::ShapeMismatch, "design rows must match the target length");
    require(l1 >= 0, ErrorCode::OutOfRange, "l1 must be >= 0");
    require(tol > 0 && max_sweeps >= 1, ErrorCode::OutOfRange, "invalid lasso stopping rule");
    return lasso_gram(b.transpose() * b, b.transpose() * y, l1, tol, max_sweeps);
}

DeconvolutionResult deconvolve(const Matrix& z, const Labels& labels, double l1) {
    if (static_cast<Index>(labels.size()) != z.rows()) {
        throw Error(ErrorCode::LengthMismatch, "one label per spot is required");
    }
    require(l1 >= 0, ErrorCode::OutOfRange, "l1 must be >= 0");
    require(z.rows() >= 1, ErrorCode::OutOfRange, "no spots to deconvolve");

    DeconvolutionResult out;
    out.classes = sorted_classes(labels);
    const auto idx = class_index(labels, out.classes);
    const Index k = static_cast<Index>(out.classes.size());
    out.dictionary = Matrix::Zero(z.cols(), k);
    Vector counts = Vector::Zero(k);
    for (Index i = 0; i < z.rows(); ++i) {
        out.dictionary.col(idx[static_cast<std::size_t>(i)]) += z.row(i).transpose();
        counts(idx[static_cast<std::size_t>(i)]) += 1;
    }
    for (Index c = 0; c < k; ++c) {
        out.dictionary.col(c) /= counts(c);
    }

    const Matrix gram = out.dictionary.transpose() * out.dictionary;
    out.weights.resize(z.rows(), k);
    out.impurity.resize(static_cast<std::size_t>(z.rows()));
    std::vector<char> converged(static_cast<std::size_t>(z.rows()), 1);
    parallel_for(static_cast<std::size_t>(z.rows()), [&](std::size_t i) {
        const Index row = static_cast<Index>(i);
        const Vector c = out.dictionary.transpose() * z.row(row).transpose();
        const auto fit = lasso_gram(gram, c, l1, 1e-6, 1000);
        out.weights.row(row) = fit.w.transpose();
        const double mean = fit.w.mean();
        out.impurity[i] = std::sqrt((fit.w.array() - mean).square().mean());
        converged[i] = fit.converged;
    });
    out.non_converged = static_cast<int>(std::count(converged.begin(), converged.end(), 0));
    return out;
}

/*************************************
 ***** Markers, PAGA, denoising ******
 *************************************/

GeneImportance marker_importance(const FusionNetwork& network, const PreprocessedData& data, const Labels& labels) {
    const Index n = data.tra.rows(), g = data.tra.cols();
    if (static_cast<Index>(labels.size()) != n) {
        throw Error(ErrorCode::LengthMismatch, "one label per spot is required");
    }
    const Matrix* mor = data.mor ? &*data.mor : nullptr;
    const Matrix z = network.embed({&data.tra, mor}).z;

    GeneImportance out;
    out.classes = sorted_classes(labels);
    const auto idx = class_index(labels, out.classes);
    const Index k = static_cast<Index>(out.classes.size());
    Vector counts = Vector::Zero(k);
    for (int c : idx) {
        counts(c) += 1;
    }
    out.importance = Matrix::Zero(k, g);
    parallel_for(static_cast<std::size_t>(g), [&](std::size_t gene) {
        const Index col = static_cast<Index>(gene);
        if (data.tra.col(col).isZero(0.0)) {
            return;
        }
        Matrix perturbed = data.tra;
        perturbed.col(col).setZero();
        const Matrix shifted = network.embed({&perturbed, mor}).z;
        const Vector dist = (shifted - z).rowwise().norm();
        for (Index i = 0; i < n; ++i) {
            out.importance(idx[static_cast<std::size_t>(i)], col) += dist(i);
        }
        for (Index c = 0; c < k; ++c) {
            out.importance(c, col) /= counts(c);
        }
    });
    return out;
}

std::vector<MarkerEntry> rank_markers(const GeneImportance& importance, const PreprocessedData& data, int cluster,
                                      int top_n) {
    require(top_n >= 1, ErrorCode::OutOfRange, "top_n must be >= 1");
    const auto it = std::find(importance.classes.begin(), importance.classes.end(), cluster);
    require(it != importance.classes.end(), ErrorCode::OutOfRange, "cluster " + std::to_string(cluster) + " is empty");
    const Index row = static_cast<Index>(it - importance.classes.begin());
    std::vector<Index> order(static_cast<std::size_t>(importance.importance.cols()));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return importance.importance(row, a) > importance.importance(row, b);
    });
    std::vector<MarkerEntry> out;
    for (std::size_t r = 0; r < order.size() && static_cast<int>(r) < top_n; ++r) {
        const Index gene = order[r];
        out.push_back({cluster, static_cast<int>(r + 1), data.selected_gene_ids[static_cast<std::size_t>(gene)],
                       importance.importance(row, gene)});
    }
    return out;
}

std::vector<PagaEdge> PagaGraph::edges() const {
    std::vector<PagaEdge> out;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        for (std::size_t d = c + 1; d < classes.size(); ++d) {
            out.push_back({classes[c], classes[d], connectivity(static_cast<Index>(c), static_cast<Index>(d))});
        }
    }
    return out;
}

PagaGraph paga_connectivity(const Matrix& z, const Labels& labels, int k) {
    if (static_cast<Index>(labels.size()) != z.rows()) {
        throw Error(ErrorCode::LengthMismatch, "one label per spot is required");
    }
    require(k >= 1, ErrorCode::OutOfRange, "k must be >= 1");
    PagaGraph out;
    out.classes = sorted_classes(labels);
    require(out.classes.size() >= 2, ErrorCode::OutOfRange, "trajectory connectivity needs at least two clusters");
    const Index n = z.rows();
    const auto graph = knn_graph(z, std::min<int>(k, static_cast<int>(n - 1)));
    const auto idx = class_index(labels, out.classes);
    const Index nc = static_cast<Index>(out.classes.size());

    Matrix observed = Matrix::Zero(nc, nc);
    Vector sizes = Vector::Zero(nc);
    for (int c : idx) {
        sizes(c) += 1;
    }
    for (Index i = 0; i < n; ++i) {
        for (Index j : graph.neighbors[static_cast<std::size_t>(i)]) {
            const auto& back = graph.neighbors[static_cast<std::size_t>(j)];
            const bool mutual = std::binary_search(back.begin(), back.end(), i);
            // Count each undirected edge once: mutual pairs from the lower index only.
            if (mutual && j < i) {
                continue;
            }
            ++out.total_edges;
            const int a = idx[static_cast<std::size_t>(i)], b = idx[static_cast<std::size_t>(j)];
            if (a != b) {
                observed(a, b) += 1;
                observed(b, a) += 1;
            }
        }
    }
    const double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
    out.connectivity = Matrix::Zero(nc, nc);
    for (Index a = 0; a < nc; ++a) {
        for (Index b = 0; b < nc; ++b) {
            if (a == b) {
                continue;
            }
            const double expected = static_cast<double>(out.total_edges) * sizes(a) * sizes(b) / pairs;
            out.connectivity(a, b) = expected > 0 ? std::min(1.0, observed(a, b) / expected) : 0.0;
        }
    }
    return out;
}

Matrix denoise(const FusionNetwork& network, const PreprocessedData& data) {
    const Matrix* mor = data.mor ? &*data.mor : nullptr;
    return network.embed({&data.tra, mor}).x_hat;
}

std::vector<double> region_statistic(const Matrix& x_tr, const Labels& labels) {
    if (static_cast<Index>(labels.size()) != x_tr.rows()) {
        throw Error(ErrorCode::LengthMismatch, "one label per spot is required");
    }
    const auto classes = sorted_classes(labels);
    const auto idx = class_index(labels, classes);
    const Vector sums = x_tr.rowwise().sum();
    Vector total = Vector::Zero(static_cast<Index>(classes.size()));
    Vector counts = Vector::Zero(static_cast<Index>(classes.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        total(idx[i]) += sums(static_cast<Index>(i));
        counts(idx[i]) += 1;
    }
    std::vector<double> out(labels.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const double mean = total(idx[i]) / counts(idx[i]);
        if (mean < 0) {
            throw Error(ErrorCode::NegativeSum, "cluster " + std::to_string(labels[i]) + " has a negative mean row sum");
        }
        out[i] = std::pow(mean, 0.25);
    }
    return out;
}

}
