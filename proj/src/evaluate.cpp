#include "topofuse/evaluate.hpp"
#include "topofuse/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace topofuse {

namespace {

std::vector<int> compact(const Labels& labels, int& n_levels) {
    std::map<int, int> levels;
    for (int l : labels) {
        levels.emplace(l, 0);
    }
    int next = 0;
    for (auto& [value, index] : levels) {
        index = next++;
    }
    n_levels = next;
    std::vector<int> out;
    out.reserve(labels.size());
    for (int l : labels) {
        out.push_back(levels[l]);
    }
    return out;
}

double choose2(double n) { return n * (n - 1.0) / 2.0; }

}

double ari(const Labels& a, const Labels& b) {
    if (a.size() != b.size()) {
        throw Error(ErrorCode::LengthMismatch, "label lists differ in length");
    }
    require(a.size() >= 2, ErrorCode::InvalidArgument, "need at least two labels");

    int na = 0, nb = 0;
    const auto ca = compact(a, na);
    const auto cb = compact(b, nb);
    std::vector<double> table(static_cast<std::size_t>(na) * static_cast<std::size_t>(nb), 0.0);
    std::vector<double> rows(static_cast<std::size_t>(na), 0.0), cols(static_cast<std::size_t>(nb), 0.0);
    for (std::size_t i = 0; i < ca.size(); ++i) {
        table[static_cast<std::size_t>(ca[i]) * static_cast<std::size_t>(nb) + static_cast<std::size_t>(cb[i])] += 1;
        rows[static_cast<std::size_t>(ca[i])] += 1;
        cols[static_cast<std::size_t>(cb[i])] += 1;
    }

    double index = 0, sum_a = 0, sum_b = 0;
    for (double v : table) {
        index += choose2(v);
    }
    for (double v : rows) {
        sum_a += choose2(v);
    }
    for (double v : cols) {
        sum_b += choose2(v);
    }
    const double expected = sum_a * sum_b / choose2(static_cast<double>(a.size()));
    const double maximum = 0.5 * (sum_a + sum_b);
    const double denominator = maximum - expected;
    if (denominator == 0) {
        return 0.0;
    }
    return (index - expected) / denominator;
}

namespace {

/** ranks[i][j] = rank of j among the neighbors of i (self excluded, starting at 1); order[i] lists neighbors by rank. */
struct RankTable {
    std::vector<std::vector<int>> ranks;
    std::vector<std::vector<Index>> order;
};

RankTable rank_table(const Matrix& x) {
    const Index m = x.rows();
    RankTable table;
    table.ranks.assign(static_cast<std::size_t>(m), std::vector<int>(static_cast<std::size_t>(m), 0));
    table.order.resize(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i) {
        std::vector<std::pair<double, Index>> d;
        d.reserve(static_cast<std::size_t>(m - 1));
        for (Index j = 0; j < m; ++j) {
            if (j != i) {
                d.emplace_back((x.row(i) - x.row(j)).squaredNorm(), j);
            }
        }
        std::sort(d.begin(), d.end());
        auto& order = table.order[static_cast<std::size_t>(i)];
        for (std::size_t r = 0; r < d.size(); ++r) {
            order.push_back(d[r].second);
            table.ranks[static_cast<std::size_t>(i)][static_cast<std::size_t>(d[r].second)] = static_cast<int>(r + 1);
        }
    }
    return table;
}

double one_direction(const RankTable& from, const RankTable& to, int k) {
    double total = 0;
    for (std::size_t i = 0; i < from.order.size(); ++i) {
        for (int r = 0; r < k; ++r) {
            const Index j = from.order[i][static_cast<std::size_t>(r)];
            const double rank_from = from.ranks[i][static_cast<std::size_t>(j)];
            const double rank_to = to.ranks[i][static_cast<std::size_t>(j)];
            total += std::abs(rank_from - rank_to) / rank_from;
        }
    }
    return total;
}

}

double mrre(const Matrix& x_high, const Matrix& x_low, int k, bool bidirectional) {
    if (x_high.rows() != x_low.rows()) {
        throw Error(ErrorCode::LengthMismatch, "representations differ in the number of points");
    }
    const Index m = x_high.rows();
    require(k >= 1 && m >= k + 2 && 2 * static_cast<Index>(k) < m, ErrorCode::OutOfRange,
            "mrre needs 1 <= k < M/2 and M >= k+2");
    const auto high = rank_table(x_high);
    const auto low = rank_table(x_low);
    const double md = static_cast<double>(m);
    const double normalizer = md * std::abs(md - 2.0 * k) / k;
    double total = one_direction(high, low, k);
    if (bidirectional) {
        total = 0.5 * (total + one_direction(low, high, k));
    }
    return total / normalizer;
}

double quantile(std::vector<double> values, double q) {
    require(!values.empty(), ErrorCode::InvalidArgument, "quantile of an empty list");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

/*************************************
 ***** Linear SVM + Shapley **********
 *************************************/

Matrix LinearSvc::standardize(const Matrix& x) const {
    require(x.cols() == feature_means.size(), ErrorCode::ShapeMismatch, "feature count differs from the model");
    Matrix out(x.rows(), x.cols());
    for (Index c = 0; c < x.cols(); ++c) {
        if (feature_stds(c) < 1e-12) {
            out.col(c).setZero();
        } else {
            out.col(c) = (x.col(c).array() - feature_means(c)) / feature_stds(c);
        }
    }
    return out;
}

Matrix LinearSvc::decision(const Matrix& x_std) const {
    Matrix scores = x_std * weights.transpose();
    scores.rowwise() += bias.transpose();
    return scores;
}

Labels LinearSvc::predict(const Matrix& x) const {
    const Matrix scores = decision(standardize(x));
    Labels out(static_cast<std::size_t>(x.rows()));
    for (Index i = 0; i < x.rows(); ++i) {
        Index best = 0;
        scores.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = classes[static_cast<std::size_t>(best)];
    }
    return out;
}

LinearSvc train_linear_svc(const Matrix& x, const Labels& labels, const SvcOptions& options) {
    const Index n = x.rows();
    if (static_cast<Index>(labels.size()) != n) {
        throw Error(ErrorCode::LengthMismatch, "one label per spot is required");
    }
    require(options.c > 0 && options.epochs >= 1, ErrorCode::OutOfRange, "invalid SVM options");

    LinearSvc model;
    std::vector<int> classes(labels.begin(), labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (classes.size() < 2) {
        throw Error(ErrorCode::SingleClass, "modality contributions need at least two classes");
    }
    model.classes = classes;

    const double nd = static_cast<double>(n);
    model.feature_means = x.colwise().sum().transpose() / nd;
    model.feature_stds.resize(x.cols());
    for (Index c = 0; c < x.cols(); ++c) {
        model.feature_stds(c) = std::sqrt((x.col(c).array() - model.feature_means(c)).square().sum() / nd);
    }
    const Matrix xs = model.standardize(x);

    const std::size_t n_classes = classes.size();
    model.weights = Matrix::Zero(static_cast<Index>(n_classes), x.cols());
    model.bias = Vector::Zero(static_cast<Index>(n_classes));

    // Objective: lambda/2 |w|^2 + mean hinge, lambda = 1 / (C N); step 1 / (lambda (t + N)).
    const double lambda = 1.0 / (options.c * nd);
    for (std::size_t k = 0; k < n_classes; ++k) {
        Rng rng(options.seed + 7919ULL * k);
        std::vector<Index> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), Index{0});
        Vector w = Vector::Zero(x.cols());
        double b = 0;
        double t = 0;
        for (int epoch = 0; epoch < options.epochs; ++epoch) {
            for (std::size_t i = order.size(); i > 1; --i) {
                std::swap(order[i - 1], order[uniform_index(rng, i)]);
            }
            for (Index i : order) {
                t += 1;
                const double eta = 1.0 / (lambda * (t + nd));
                const double y = labels[static_cast<std::size_t>(i)] == classes[k] ? 1.0 : -1.0;
                const double margin = y * (xs.row(i).dot(w) + b);
                w *= (1.0 - eta * lambda);
                if (margin < 1.0) {
                    w += eta * y * xs.row(i).transpose();
                    b += eta * y;
                }
            }
        }
        model.weights.row(static_cast<Index>(k)) = w.transpose();
        model.bias(static_cast<Index>(k)) = b;
    }
    return model;
}

Matrix linear_shap(const Vector& weights, const Matrix& x, const Vector& mu) {
    require(weights.size() == x.cols() && mu.size() == x.cols(), ErrorCode::ShapeMismatch,
            "weights, features and means disagree in length");
    Matrix phi = x.rowwise() - mu.transpose();
    phi.array().rowwise() *= weights.transpose().array();
    return phi;
}

ModalityContribution modality_contribution(const std::vector<Matrix>& features_by_modality,
                                           const std::vector<std::string>& names, const Labels& labels,
                                           const SvcOptions& options) {
    require(!features_by_modality.empty() && names.size() == features_by_modality.size(), ErrorCode::InvalidArgument,
            "one name per modality is required");
    const Index n = features_by_modality.front().rows();
    Index total_cols = 0;
    for (const auto& m : features_by_modality) {
        require(m.rows() == n, ErrorCode::ShapeMismatch, "every modality needs N rows");
        total_cols += m.cols();
    }
    if (static_cast<Index>(labels.size()) != n) {
        throw Error(ErrorCode::LengthMismatch, "one label per spot is required");
    }

    Matrix joined(n, total_cols);
    std::vector<std::pair<Index, Index>> spans;
    Index offset = 0;
    for (const auto& m : features_by_modality) {
        joined.middleCols(offset, m.cols()) = m;
        spans.emplace_back(offset, m.cols());
        offset += m.cols();
    }

    const auto model = train_linear_svc(joined, labels, options);
    const Matrix xs = model.standardize(joined);
    const Matrix scores = model.decision(xs);
    const Vector mu = xs.colwise().sum().transpose() / static_cast<double>(n);

    ModalityContribution out;
    out.modalities = names;
    out.per_spot.resize(n, static_cast<Index>(spans.size()));
    out.attributions.resize(n, total_cols);
    out.predicted.resize(static_cast<std::size_t>(n));
    Index correct = 0;
    for (Index i = 0; i < n; ++i) {
        Index best = 0;
        scores.row(i).maxCoeff(&best);
        out.predicted[static_cast<std::size_t>(i)] = model.classes[static_cast<std::size_t>(best)];
        correct += out.predicted[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)];
        const Matrix phi = linear_shap(model.weights.row(best).transpose(), xs.row(i), mu);
        out.attributions.row(i) = phi.row(0);
        for (std::size_t m = 0; m < spans.size(); ++m) {
            const auto [start, width] = spans[m];
            out.per_spot(i, static_cast<Index>(m)) = width > 0 ? phi.row(0).segment(start, width).cwiseAbs().maxCoeff() : 0.0;
        }
    }
    out.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);

    for (std::size_t m = 0; m < spans.size(); ++m) {
        std::vector<double> values(out.per_spot.col(static_cast<Index>(m)).data(),
                                   out.per_spot.col(static_cast<Index>(m)).data() + n);
        ContributionSummary s;
        s.modality = names[m];
        s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
        s.median = quantile(values, 0.5);
        s.q1 = quantile(values, 0.25);
        s.q3 = quantile(values, 0.75);
        out.summaries.push_back(s);
    }
    return out;
}

}
