#ifndef TOPOFUSE_NETWORK_HPP
#define TOPOFUSE_NETWORK_HPP

#include "topofuse/dataio.hpp"
#include "topofuse/topology.hpp"
#include "topofuse/types.hpp"

#include <Eigen/SparseCore>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

/**
 * @file network.hpp
 *
 * @brief Forward and reverse passes of the fusion network.
 *
 * Two graph-convolution encoders map the expression and morphology inputs to per-modality
 * embeddings over the spatial graph. A fusion MLP maps their combination to the shared
 * embedding `z`, and a linear decoder reconstructs the expression input from `z`.
 */

namespace topofuse {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/** Affine map `x * weight + bias`, with `bias` stored as a 1 x out row. */
struct Layer {
    Matrix weight;
    Matrix bias;
};

struct ModelParams {
    std::vector<Layer> gnn_tra;
    std::vector<Layer> gnn_mor;
    std::vector<Layer> fusion;
    std::vector<Layer> decoder;

    /** Visits every tensor with a stable name such as `gnn_tra.0.weight`. */
    void for_each(const std::function<void(const std::string&, Matrix&)>& fn);
    void for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const;

    /** Same layer structure, every tensor zero. */
    ModelParams zeros_like() const;
    Index parameter_count() const;
    bool all_finite() const;
};

struct NetworkShape {
    Index n_genes = 0;
    /** Zero when there is no morphology modality. */
    Index n_mor = 0;
    int d_emb = 72;
    int n_mlp = 1;
    int gcn_depth = 2;
    FusionMode fusion_mode = FusionMode::sum;
};

/** Glorot-uniform weights and zero biases. */
ModelParams init_params(const NetworkShape& shape, Rng& rng);

/** `D^{-1/2} (A + I) D^{-1/2}` with D the row sums of `A + I`. */
SparseMatrix normalized_adjacency(const NeighborGraph& graph);

/** Per-layer inputs and pre-activations kept for the reverse pass. */
struct StackCache {
    std::vector<Matrix> inputs;
    std::vector<Matrix> preacts;
};

/**
 * Graph convolution stack. Each layer computes `Â x W + b`, with ReLU between layers
 * and a linear final layer.
 */
Matrix gcn_forward(const Matrix& x, const SparseMatrix& a_hat, const std::vector<Layer>& layers,
                   StackCache* cache = nullptr);
Matrix gcn_forward(const Matrix& x, const NeighborGraph& graph, const std::vector<Layer>& layers,
                   StackCache* cache = nullptr);

/** Dense stack with ReLU between layers and a linear final layer. */
Matrix mlp_forward(const Matrix& x, const std::vector<Layer>& layers, StackCache* cache = nullptr);

/**
 * Accumulates parameter gradients of a stack into `grads` and returns the gradient with respect to
 * the stack input. Pass a null `a_hat` for dense stacks.
 */
Matrix stack_backward(const StackCache& cache, const SparseMatrix* a_hat, const std::vector<Layer>& layers,
                      const Matrix& grad_output, std::vector<Layer>& grads);

/** Combines the modality embeddings before the fusion MLP. */
Matrix combine_modalities(const Matrix& y_tra, const Matrix* y_mor, double theta, FusionMode mode);

struct FuseResult {
    Matrix combined;
    Matrix z;
};

FuseResult fuse_forward(const Matrix& y_tra, const Matrix* y_mor, double theta, FusionMode mode,
                        const std::vector<Layer>& fusion, StackCache* cache = nullptr);

Matrix decode_forward(const Matrix& z, const std::vector<Layer>& decoder, StackCache* cache = nullptr);

struct NetworkInputs {
    const Matrix* tra = nullptr;
    const Matrix* mor = nullptr;
};

struct ForwardOptions {
    /** Inverted dropout on the encoder inputs with this probability; 0 disables it. */
    double dropout = 0.0;
    Rng* rng = nullptr;
};

/** Everything the reverse pass needs, tagged with the parameter version it was computed from. */
struct ForwardPass {
    std::uint64_t version = 0;
    StackCache enc_tra;
    StackCache enc_mor;
    StackCache fusion;
    StackCache decoder;
    Matrix y_tra;
    std::optional<Matrix> y_mor;
    Matrix combined;
    Matrix z;
    Matrix x_hat;
};

/** Loss gradients flowing into a forward pass. Empty matrices mean "no gradient". */
struct Upstream {
    Matrix z;
    Matrix x_hat;
    Matrix y_tra;
    Matrix y_mor;
};

struct EmbeddingSet {
    Matrix y_tra;
    std::optional<Matrix> y_mor;
    Matrix z;
    Matrix x_hat;
};

/**
 * @brief Owner of the parameters, their gradients, and the spatial operator.
 *
 * Every mutation through `mutable_params()` bumps a version counter, and `backward()`
 * refuses caches produced under an older version.
 */
class FusionNetwork {
public:
    FusionNetwork(const NetworkShape& shape, double theta, const NeighborGraph& spatial, Rng& init_rng);
    FusionNetwork(const NetworkShape& shape, double theta, const NeighborGraph& spatial, ModelParams params);

    ForwardPass forward(const NetworkInputs& inputs, const ForwardOptions& options = {}) const;

    /** Adds this pass's parameter gradients to `grads()`. */
    void backward(const ForwardPass& pass, const Upstream& upstream);

    void zero_grad();

    const ModelParams& params() const { return params_; }
    ModelParams& mutable_params() {
        ++version_;
        return params_;
    }
    const ModelParams& grads() const { return grads_; }
    ModelParams& mutable_grads() { return grads_; }

    const NetworkShape& shape() const { return shape_; }
    double theta() const { return theta_; }
    const SparseMatrix& a_hat() const { return a_hat_; }
    std::uint64_t version() const { return version_; }

    /** Dropout-free pass. */
    EmbeddingSet embed(const NetworkInputs& inputs) const;

private:
    NetworkShape shape_;
    double theta_;
    SparseMatrix a_hat_;
    ModelParams params_;
    ModelParams grads_;
    std::uint64_t version_ = 1;
};

inline constexpr const char* checkpoint_format = "topofuse-ckpt-v1";

void save_checkpoint(const std::filesystem::path& path, const NetworkShape& shape, double theta,
                     const ModelParams& params);

struct Checkpoint {
    NetworkShape shape;
    double theta = 0;
    ModelParams params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}

#endif
