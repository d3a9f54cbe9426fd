#ifndef TOPOFUSE_PIPELINE_HPP
#define TOPOFUSE_PIPELINE_HPP

#include "topofuse/downstream.hpp"
#include "topofuse/evaluate.hpp"
#include "topofuse/objective.hpp"

#include <optional>

namespace topofuse {

/** Independent generator for one stage of a run, derived from the run seed. */
Rng stage_rng(std::uint64_t seed, std::uint64_t stage);

enum Stage : std::uint64_t { stage_cluster = 1, stage_visualize = 2, stage_contribution = 3 };

/** Configured radius, or the automatic one when unset. */
double resolve_epsilon(const Matrix& coords, const RunConfig& cfg);

struct FittedModel {
    PreprocessedData data;
    double epsilon = 0;
    NeighborGraph spatial;
    TrainOutcome trained;
};

FittedModel fit_model(const SpotDataset& dataset, const RunConfig& cfg);

struct Clustering {
    ClusterModel model;
    Labels labels;
};

/** GMM labels on `z`, refined spatially when `cfg.refine` is set. */
Clustering cluster_embedding(const Matrix& z, const Matrix& coords, const RunConfig& cfg);

VisualizationOptions visualization_options(const RunConfig& cfg);

/**
 * Modality contributions over input features ("input") or single-modality embeddings ("embedding").
 * Returns nothing when the labels hold a single class.
 */
std::optional<ContributionBlock> contribution_block(const std::string& source, const std::vector<Matrix>& features,
                                                    const std::vector<std::string>& names, const Labels& labels,
                                                    const RunConfig& cfg);

struct PipelineResult {
    FittedModel model;
    Clustering clustering;
    AnalysisReport report;
};

/**
 * preprocess -> train -> cluster (+refine) -> visualize -> deconvolve -> markers -> trajectory -> evaluate.
 * Ground-truth labels in `dataset.labels`, when present, are used for the ARI and for the contribution classifier.
 */
PipelineResult run_pipeline(const SpotDataset& dataset, const RunConfig& cfg);

}

#endif
