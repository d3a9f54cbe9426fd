#ifndef TOPOFUSE_OBJECTIVE_HPP
#define TOPOFUSE_OBJECTIVE_HPP

#include "topofuse/dataio.hpp"
#include "topofuse/network.hpp"
#include "topofuse/preprocess.hpp"
#include "topofuse/topology.hpp"

#include <optional>
#include <vector>

/**
 * @file objective.hpp
 *
 * @brief Similarity kernel, topological prior, losses and the training loop.
 */

namespace topofuse {

struct KernelConfig {
    double nu = 0.05;
    double clamp_eps = 1e-7;

    void validate() const;
};

/** `(1 + d2 / nu)^(-(nu + 1) / nu)` for a squared distance `d2`. */
double kappa_sq(double d2, double nu);

double kappa(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, double nu);

/**
 * Prior similarity between two modality embeddings.
 * Augmented pairs (`h = 1`) are boosted by `e^alpha` and capped at 1.
 */
double topo_prior(const Eigen::Ref<const Vector>& y_i, const Eigen::Ref<const Vector>& y_j, bool h, double alpha,
                  double nu);

/** `-(t ln t + (1 - t) ln(1 - t))`, zero at the endpoints. */
double binary_entropy(double t);

/**
 * Embeddings seen by one modality's pair batch.
 * Dataset partners (`h = 0`) are looked up in `z` / `y`, augmented partners in `z_aug` / `y_aug`.
 */
struct PairView {
    const Matrix* z = nullptr;
    const Matrix* z_aug = nullptr;
    const Matrix* y = nullptr;
    const Matrix* y_aug = nullptr;
};

struct TopoLoss {
    double value = 0;
    /** Sum over pairs of the binary entropy of the (clamped) prior, the minimum `value` can reach. */
    double entropy_floor = 0;
    Matrix grad_z;
    Matrix grad_z_aug;
};

/**
 * Negated topology log-likelihood summed over the batch:
 * `-sum [T ln S + (1 - T) ln(1 - S)]` with `S = kappa(z_i, z_j)` clamped to `[eps, 1 - eps]`
 * and `T` the prior computed on the modality embeddings. `T` is a constant target, so the
 * modality embeddings receive no gradient from this term.
 */
TopoLoss topo_loss(const PairBatch& batch, const PairView& view, const KernelConfig& cfg, double alpha);

struct ReconLoss {
    double value = 0;
    Matrix grad;
};

/** Mean over spots of the squared row error. */
ReconLoss recon_loss(const Matrix& x, const Matrix& x_hat);

/** Adam with bias correction. */
class Adam {
public:
    Adam(const ModelParams& like, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step(ModelParams& params, const ModelParams& grads);
    long long steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long long t_ = 0;
    ModelParams m_;
    ModelParams v_;
};

/** Augmented-pair batches for one epoch; `mor` is empty without morphology. */
struct EpochBatches {
    PairBatch tra;
    std::optional<PairBatch> mor;
};

struct StepLoss {
    double topo_tra = 0;
    double topo_mor = 0;
    double recon = 0;
    double total = 0;
};

/**
 * Evaluates the full objective for one set of batches and, if `accumulate` is set,
 * adds the parameter gradients to the network's gradient buffers.
 * Dropout is applied when `dropout_rng` is given and the configured rate is positive.
 */
StepLoss objective_step(FusionNetwork& network, const PreprocessedData& data, const EpochBatches& batches,
                        const RunConfig& cfg, Rng* dropout_rng, bool accumulate);

struct TrainState {
    FusionNetwork network;
    Adam optimizer;
    int epoch = 0;
    std::vector<LossRecord> history;
    Rng rng;
    NeighborGraph graph_tra;
    std::optional<NeighborGraph> graph_mor;
    long long augment_fallbacks = 0;
};

struct TrainOutcome {
    TrainState state;
    EmbeddingSet embeddings;
};

/** Network shape implied by the preprocessed inputs and the configuration. */
NetworkShape network_shape(const PreprocessedData& data, const RunConfig& cfg);

/**
 * Full-batch training. Pair batches come from kNN graphs on the modality embeddings,
 * rebuilt every `cfg.graph_refresh` epochs (initially on the preprocessed inputs).
 */
TrainOutcome train(const PreprocessedData& data, const NeighborGraph& spatial, const RunConfig& cfg);

}

#endif
