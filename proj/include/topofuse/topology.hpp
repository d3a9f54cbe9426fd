#ifndef TOPOFUSE_TOPOLOGY_HPP
#define TOPOFUSE_TOPOLOGY_HPP

#include "topofuse/types.hpp"

#include <cstdint>
#include <vector>

namespace topofuse {

enum class GraphKind { spatial_eps, knn };

/**
 * Directed adjacency lists.
 * Neighbor lists are sorted by index and never contain the node itself.
 */
struct NeighborGraph {
    Index n = 0;
    std::vector<std::vector<Index>> neighbors;
    GraphKind kind = GraphKind::knn;

    Index count_isolated() const;
    Index count_edges() const;
    bool is_symmetric() const;
};

/** Connects every pair of distinct spots at Euclidean distance in (0, eps]. */
NeighborGraph build_spatial_graph(const Matrix& coords, double eps);

/**
 * Smallest radius at which at least half of the spots have 4 or more spatial neighbors.
 * Spots with fewer than 4 other spots at positive distance use their farthest one.
 */
double auto_epsilon(const Matrix& coords);

/** Each row's `k` nearest other rows by Euclidean distance, ties to the lower index. */
NeighborGraph knn_graph(const Matrix& x, int k);

/** `(1 - r_u) * x_i + r_u * x_hop`. */
Vector mix(const Eigen::Ref<const Vector>& x_i, const Eigen::Ref<const Vector>& x_hop, double r_u);

struct AugmentResult {
    Vector row;
    double r_u = 0;
    /** True when the node had no neighbor and `row` is the original. */
    bool fallback = false;
};

/**
 * Mixes row `node` of `features` with a uniformly chosen 1-hop neighbor,
 * using a mixing weight drawn from U(0, p_u).
 */
AugmentResult augment(const Matrix& features, Index node, const NeighborGraph& graph, double p_u, Rng& rng);

/**
 * Training pairs for one modality.
 * For every anchor the batch holds one augmented partner (`h = 1`) followed by `n_neg`
 * dataset partners (`h = 0`). Augmented partners index rows of `aug_payload`, and
 * row `i` of `aug_payload` is the augmentation of anchor `i`.
 */
struct PairBatch {
    std::vector<Index> anchors;
    std::vector<Index> partners;
    std::vector<std::uint8_t> h;
    Matrix aug_payload;
    std::vector<double> r_u;
    Index fallbacks = 0;

    std::size_t size() const { return anchors.size(); }
};

PairBatch sample_pairs(Index n, const NeighborGraph& graph, const Matrix& features, int n_neg, double p_u, Rng& rng);

}

#endif
