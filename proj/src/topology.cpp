#include "topofuse/topology.hpp"
#include "topofuse/error.hpp"
#include "topofuse/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace topofuse {

Index NeighborGraph::count_isolated() const {
    Index count = 0;
    for (const auto& nb : neighbors) {
        count += nb.empty();
    }
    return count;
}

Index NeighborGraph::count_edges() const {
    Index count = 0;
    for (const auto& nb : neighbors) {
        count += static_cast<Index>(nb.size());
    }
    return count;
}

bool NeighborGraph::is_symmetric() const {
    for (Index i = 0; i < n; ++i) {
        for (Index j : neighbors[static_cast<std::size_t>(i)]) {
            const auto& back = neighbors[static_cast<std::size_t>(j)];
            if (!std::binary_search(back.begin(), back.end(), i)) {
                return false;
            }
        }
    }
    return true;
}

namespace {

double squared_distance(const Matrix& x, Index a, Index b) {
    double total = 0;
    for (Index c = 0; c < x.cols(); ++c) {
        const double d = x(a, c) - x(b, c);
        total += d * d;
    }
    return total;
}

}

NeighborGraph build_spatial_graph(const Matrix& coords, double eps) {
    require(eps > 0, ErrorCode::OutOfRange, "epsilon must be positive");
    require(coords.cols() == 2, ErrorCode::ShapeMismatch, "coordinates must have two columns");
    NeighborGraph graph;
    graph.n = coords.rows();
    graph.kind = GraphKind::spatial_eps;
    graph.neighbors.resize(static_cast<std::size_t>(graph.n));
    const double eps2 = eps * eps;
    parallel_for(static_cast<std::size_t>(graph.n), [&](std::size_t i) {
        auto& nb = graph.neighbors[i];
        for (Index j = 0; j < graph.n; ++j) {
            if (j == static_cast<Index>(i)) {
                continue;
            }
            const double d2 = squared_distance(coords, static_cast<Index>(i), j);
            if (d2 > 0 && d2 <= eps2) {
                nb.push_back(j);
            }
        }
    });
    return graph;
}

double auto_epsilon(const Matrix& coords) {
    require(coords.rows() >= 2, ErrorCode::InvalidArgument, "need at least two spots");
    const Index n = coords.rows();
    std::vector<double> fourth(static_cast<std::size_t>(n), 0.0);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        std::vector<double> d;
        d.reserve(static_cast<std::size_t>(n));
        for (Index j = 0; j < n; ++j) {
            const double d2 = squared_distance(coords, static_cast<Index>(i), j);
            if (d2 > 0) {
                d.push_back(std::sqrt(d2));
            }
        }
        if (d.empty()) {
            return;
        }
        std::sort(d.begin(), d.end());
        fourth[i] = d[std::min<std::size_t>(3, d.size() - 1)];
    });
    std::sort(fourth.begin(), fourth.end());
    const double eps = fourth[static_cast<std::size_t>((n - 1) / 2)];
    require(eps > 0, ErrorCode::InvalidArgument, "all spots share the same coordinates");
    return eps;
}

NeighborGraph knn_graph(const Matrix& x, int k) {
    const Index n = x.rows();
    require(k >= 1 && k <= n - 1, ErrorCode::OutOfRange,
            "k must lie in [1, N-1], got k=" + std::to_string(k) + " with N=" + std::to_string(n));
    NeighborGraph graph;
    graph.n = n;
    graph.kind = GraphKind::knn;
    graph.neighbors.resize(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        std::vector<std::pair<double, Index>> candidates;
        candidates.reserve(static_cast<std::size_t>(n - 1));
        for (Index j = 0; j < n; ++j) {
            if (j != static_cast<Index>(i)) {
                candidates.emplace_back(squared_distance(x, static_cast<Index>(i), j), j);
            }
        }
        std::partial_sort(candidates.begin(), candidates.begin() + k, candidates.end());
        auto& nb = graph.neighbors[i];
        for (int r = 0; r < k; ++r) {
            nb.push_back(candidates[static_cast<std::size_t>(r)].second);
        }
        std::sort(nb.begin(), nb.end());
    });
    return graph;
}

Vector mix(const Eigen::Ref<const Vector>& x_i, const Eigen::Ref<const Vector>& x_hop, double r_u) {
    require(x_i.size() == x_hop.size(), ErrorCode::ShapeMismatch, "mixed rows differ in length");
    return (1.0 - r_u) * x_i + r_u * x_hop;
}

AugmentResult augment(const Matrix& features, Index node, const NeighborGraph& graph, double p_u, Rng& rng) {
    require(p_u > 0 && p_u <= 1, ErrorCode::OutOfRange, "p_u must lie in (0,1]");
    require(node >= 0 && node < graph.n && graph.n == features.rows(), ErrorCode::ShapeMismatch,
            "node index or feature rows do not match the graph");
    AugmentResult out;
    const auto& nb = graph.neighbors[static_cast<std::size_t>(node)];
    if (nb.empty()) {
        out.row = features.row(node).transpose();
        out.fallback = true;
        return out;
    }
    const Index hop = nb[uniform_index(rng, nb.size())];
    out.r_u = uniform(rng, 0.0, p_u);
    out.row = mix(features.row(node).transpose(), features.row(hop).transpose(), out.r_u);
    return out;
}

PairBatch sample_pairs(Index n, const NeighborGraph& graph, const Matrix& features, int n_neg, double p_u, Rng& rng) {
    require(n_neg >= 1, ErrorCode::OutOfRange, "n_neg must be at least 1");
    require(n >= 2 && graph.n == n && features.rows() == n, ErrorCode::ShapeMismatch,
            "graph, features and n disagree on the number of spots");
    PairBatch batch;
    const std::size_t total = static_cast<std::size_t>(n) * static_cast<std::size_t>(1 + n_neg);
    batch.anchors.reserve(total);
    batch.partners.reserve(total);
    batch.h.reserve(total);
    batch.aug_payload.resize(n, features.cols());
    batch.r_u.resize(static_cast<std::size_t>(n));

    for (Index i = 0; i < n; ++i) {
        auto aug = augment(features, i, graph, p_u, rng);
        batch.aug_payload.row(i) = aug.row.transpose();
        batch.r_u[static_cast<std::size_t>(i)] = aug.r_u;
        batch.fallbacks += aug.fallback;
        batch.anchors.push_back(i);
        batch.partners.push_back(i);
        batch.h.push_back(1);

        for (int r = 0; r < n_neg; ++r) {
            Index j = static_cast<Index>(uniform_index(rng, static_cast<std::size_t>(n - 1)));
            if (j >= i) {
                ++j;
            }
            batch.anchors.push_back(i);
            batch.partners.push_back(j);
            batch.h.push_back(0);
        }
    }
    return batch;
}

}
