#include "topofuse/pipeline.hpp"
#include "topofuse/error.hpp"

namespace topofuse {

Rng stage_rng(std::uint64_t seed, std::uint64_t stage) { return Rng(seed + 0x9E3779B97F4A7C15ULL * stage); }

double resolve_epsilon(const Matrix& coords, const RunConfig& cfg) {
    return cfg.epsilon_radius ? *cfg.epsilon_radius : auto_epsilon(coords);
}

FittedModel fit_model(const SpotDataset& dataset, const RunConfig& cfg) {
    cfg.validate();
    dataset.validate();
    PreprocessedData data = preprocess(dataset, cfg);
    const double epsilon = resolve_epsilon(dataset.coords, cfg);
    NeighborGraph spatial = build_spatial_graph(dataset.coords, epsilon);
    TrainOutcome trained = train(data, spatial, cfg);
    return FittedModel{std::move(data), epsilon, std::move(spatial), std::move(trained)};
}

Clustering cluster_embedding(const Matrix& z, const Matrix& coords, const RunConfig& cfg) {
    Rng rng = stage_rng(cfg.seed, stage_cluster);
    Clustering out;
    out.model = gmm_cluster(z, cfg.n_clusters, cfg.gmm_restarts, rng);
    out.labels = cfg.refine ? refine_labels(out.model.labels, coords, cfg.refine_k) : out.model.labels;
    return out;
}

VisualizationOptions visualization_options(const RunConfig& cfg) {
    VisualizationOptions opt;
    opt.epochs = cfg.vis_epochs;
    opt.lr = cfg.vis_lr;
    opt.k = cfg.k_tr;
    opt.n_neg = cfg.n_neg;
    opt.nu_high = cfg.nu;
    return opt;
}

std::optional<ContributionBlock> contribution_block(const std::string& source, const std::vector<Matrix>& features,
                                                    const std::vector<std::string>& names, const Labels& labels,
                                                    const RunConfig& cfg) {
    if (count_distinct(labels) < 2) {
        return std::nullopt;
    }
    SvcOptions svc;
    svc.epochs = cfg.svc_epochs;
    svc.seed = cfg.seed + stage_contribution;
    const auto mc = modality_contribution(features, names, labels, svc);
    return ContributionBlock{source, mc.train_accuracy, mc.summaries, mc.per_spot};
}

PipelineResult run_pipeline(const SpotDataset& dataset, const RunConfig& cfg) {
    PipelineResult out{fit_model(dataset, cfg), {}, {}};
    const auto& data = out.model.data;
    const auto& network = out.model.trained.state.network;
    const auto& emb = out.model.trained.embeddings;
    const Matrix& z = emb.z;
    auto& report = out.report;

    report.spot_ids = dataset.spot_ids;
    report.coords = dataset.coords;
    report.embedding = z;
    report.loss_history = out.model.trained.state.history;
    report.plot_spatial = true;
    report.plot_visualization = true;
    if (const Index isolated = out.model.spatial.count_isolated(); isolated > 0) {
        report.warnings["isolated_spots"] = isolated;
    }
    if (out.model.trained.state.augment_fallbacks > 0) {
        report.warnings["augment_fallbacks"] = out.model.trained.state.augment_fallbacks;
    }

    out.clustering = cluster_embedding(z, dataset.coords, cfg);
    report.labels = out.clustering.labels;
    if (out.clustering.model.discarded_restarts > 0) {
        report.warnings["gmm_discarded_restarts"] = out.clustering.model.discarded_restarts;
    }

    Rng vis_rng = stage_rng(cfg.seed, stage_visualize);
    report.visualization = fit_visualization(z, visualization_options(cfg), vis_rng).coords;

    const auto deconv = deconvolve(z, report.labels, cfg.lasso_l1);
    report.deconvolution_weights = deconv.weights;
    report.weight_dispersion = deconv.impurity;
    if (deconv.non_converged > 0) {
        report.warnings["deconvolution_non_converged"] = deconv.non_converged;
    }

    const auto importance = marker_importance(network, data, report.labels);
    for (int cluster : importance.classes) {
        const auto ranked = rank_markers(importance, data, cluster, cfg.marker_top_n);
        report.markers.insert(report.markers.end(), ranked.begin(), ranked.end());
    }

    if (count_distinct(report.labels) >= 2) {
        report.paga_edges = paga_connectivity(z, report.labels, cfg.paga_k).edges();
    }

    report.denoised = emb.x_hat;
    report.denoised_gene_ids = data.selected_gene_ids;

    report.metrics["final_loss"] = report.loss_history.empty() ? 0.0 : report.loss_history.back().total;
    report.metrics["epsilon"] = out.model.epsilon;
    report.metrics["n_clusters_found"] = count_distinct(report.labels);
    if (dataset.labels) {
        report.metrics["ari"] = ari(*dataset.labels, report.labels);
        if (cfg.refine) {
            report.metrics["ari_unrefined"] = ari(*dataset.labels, out.clustering.model.labels);
        }
    }
    if (z.rows() > 2 * static_cast<Index>(cfg.mrre_k)) {
        report.metrics["mrre"] = mrre(data.tra, z, cfg.mrre_k, cfg.mrre_bidirectional);
    } else {
        report.warnings["mrre_skipped"] = 1;
    }

    const Labels& reference = dataset.labels ? *dataset.labels : report.labels;
    std::vector<Matrix> inputs{data.tra};
    std::vector<Matrix> embeddings{emb.y_tra};
    std::vector<std::string> names{"tra"};
    if (data.mor) {
        inputs.push_back(*data.mor);
        embeddings.push_back(*emb.y_mor);
        names.push_back("mor");
    }
    for (auto& [source, features] : {std::pair{std::string("input"), &inputs}, std::pair{std::string("embedding"), &embeddings}}) {
        if (auto block = contribution_block(source, *features, names, reference, cfg)) {
            report.contributions.push_back(std::move(*block));
        } else {
            report.warnings["contributions_single_class"] = 1;
        }
    }
    return out;
}

}
