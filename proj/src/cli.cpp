#include "topofuse/cli.hpp"
#include "topofuse/error.hpp"
#include "topofuse/parallel.hpp"
#include "topofuse/pipeline.hpp"
#include "topofuse/synth.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <iostream>

namespace topofuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOptions {
    std::string data;
    std::string config;
    std::string manifest;
    std::string out;
    std::string labels;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool needs_data) {
    auto* data = cmd->add_option("--data", o.data, "Input directory");
    if (needs_data) {
        data->required()->check(CLI::ExistingDirectory);
    }
    cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--manifest", o.manifest, "Reuse the configuration recorded in a manifest.json")
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", o.out, "Output directory")->required();
    cmd->add_option("--seed", o.seed, "Random seed, overrides the configuration");
    cmd->add_option("--threads", o.threads, "Maximum worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--set", o.overrides, "Configuration override key=value (repeatable)")->allow_extra_args(false);
}

RunConfig resolve_config(const CommonOptions& o, const std::optional<RunConfig>& fallback = std::nullopt) {
    RunConfig cfg = fallback.value_or(RunConfig{});
    if (!o.manifest.empty()) {
        const json doc = read_json(o.manifest);
        if (!doc.contains("config")) {
            throw Error(ErrorCode::InvalidArgument, o.manifest + " has no \"config\" entry");
        }
        cfg = config_from_json(doc.at("config"));
    } else if (!o.config.empty()) {
        cfg = load_config(o.config);
    }
    for (const auto& assignment : o.overrides) {
        apply_override(cfg, assignment);
    }
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    cfg.validate();
    return cfg;
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw Error(ErrorCode::IoFailure, "cannot create output directory " + dir.string());
    }
}

void write_manifest(const fs::path& dir, const std::string& subcommand, const RunConfig& cfg, const CommonOptions& o) {
    json doc = {{"tool", "topofuse"},
                {"version", version},
                {"subcommand", subcommand},
                {"seed", cfg.seed},
                {"threads", o.threads},
                {"data", o.data},
                {"config", config_to_json(cfg)}};
    write_json(dir / "manifest.json", doc);
}

void write_coords(const fs::path& path, const std::vector<std::string>& ids, const Matrix& coords) {
    write_matrix_csv(path, NamedMatrix{"spot_id", ids, {"x", "y"}, coords});
}

void write_inputs(const fs::path& dir, const std::vector<std::string>& ids, const PreprocessedData& data) {
    write_matrix_csv(dir / "model_input_tra.csv", NamedMatrix{"spot_id", ids, data.selected_gene_ids, data.tra});
    if (data.mor) {
        write_matrix_csv(dir / "model_input_mor.csv", ids, *data.mor, "pc");
    }
}

/*************************************
 ***** Training directory ************
 *************************************/

struct TrainedRun {
    std::vector<std::string> spot_ids;
    Matrix coords;
    PreprocessedData data;
    Checkpoint checkpoint;
    double epsilon = 0;
    std::optional<Labels> truth;
    RunConfig cfg;
};

void save_trained(const fs::path& dir, const SpotDataset& dataset, const FittedModel& model, const RunConfig& cfg,
                  const CommonOptions& o) {
    make_dir(dir);
    const auto& ids = dataset.spot_ids;
    const auto& network = model.trained.state.network;
    const auto& emb = model.trained.embeddings;
    save_checkpoint(dir / "checkpoint.json", network.shape(), network.theta(), network.params());
    write_matrix_csv(dir / "embedding.csv", ids, emb.z, "z");
    write_matrix_csv(dir / "y_tra.csv", ids, emb.y_tra, "y");
    if (emb.y_mor) {
        write_matrix_csv(dir / "y_mor.csv", ids, *emb.y_mor, "y");
    }
    write_coords(dir / "coords.csv", ids, dataset.coords);
    write_inputs(dir, ids, model.data);
    if (dataset.labels) {
        write_labels_csv(dir / "truth_labels.csv", ids, *dataset.labels);
    }
    AnalysisReport history;
    history.loss_history = model.trained.state.history;
    json doc = {{"epsilon", model.epsilon}, {"loss_history", report_to_json(history).at("loss_history")}};
    write_json(dir / "training.json", doc);
    write_manifest(dir, "train", cfg, o);
}

Labels labels_for(const std::map<std::string, int>& table, const std::vector<std::string>& ids, const fs::path& path) {
    Labels out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        const auto it = table.find(id);
        if (it == table.end()) {
            throw Error(ErrorCode::RowCountMismatch, path.string() + " has no label for spot " + id);
        }
        out.push_back(it->second);
    }
    return out;
}

TrainedRun load_trained(const fs::path& dir) {
    for (const char* name : {"checkpoint.json", "embedding.csv", "coords.csv", "model_input_tra.csv", "training.json"}) {
        if (!fs::exists(dir / name)) {
            throw Error(ErrorCode::MissingFile, (dir / name).string() + " not found; run `topofuse train` first");
        }
    }
    TrainedRun run;
    const auto tra = read_matrix_csv(dir / "model_input_tra.csv");
    run.spot_ids = tra.row_ids;
    run.data.tra = tra.values;
    run.data.selected_gene_ids = tra.col_ids;
    if (fs::exists(dir / "model_input_mor.csv")) {
        const auto mor = read_matrix_csv(dir / "model_input_mor.csv");
        require(mor.row_ids == run.spot_ids, ErrorCode::RowCountMismatch, "model_input_mor.csv rows differ from model_input_tra.csv");
        run.data.mor = mor.values;
    }
    const auto coords = read_matrix_csv(dir / "coords.csv");
    require(coords.row_ids == run.spot_ids && coords.values.cols() == 2, ErrorCode::RowCountMismatch,
            "coords.csv does not match model_input_tra.csv");
    run.coords = coords.values;
    run.checkpoint = load_checkpoint(dir / "checkpoint.json");
    run.epsilon = read_json(dir / "training.json").at("epsilon").get<double>();
    if (fs::exists(dir / "truth_labels.csv")) {
        run.truth = labels_for(read_labels_csv(dir / "truth_labels.csv"), run.spot_ids, dir / "truth_labels.csv");
    }
    if (fs::exists(dir / "manifest.json")) {
        run.cfg = config_from_json(read_json(dir / "manifest.json").at("config"));
    }
    return run;
}

FusionNetwork rebuild_network(const TrainedRun& run) {
    const auto spatial = build_spatial_graph(run.coords, run.epsilon);
    return FusionNetwork(run.checkpoint.shape, run.checkpoint.theta, spatial, run.checkpoint.params);
}

Labels resolve_labels(const CommonOptions& o, const TrainedRun& run, const Matrix& z, const RunConfig& cfg) {
    if (!o.labels.empty()) {
        return labels_for(read_labels_csv(o.labels), run.spot_ids, o.labels);
    }
    return cluster_embedding(z, run.coords, cfg).labels;
}

/*************************************
 ***** Subcommands *******************
 *************************************/

void cmd_synth(const CommonOptions& o, const SynthSpec& spec) {
    const auto result = generate(spec);
    const fs::path dir = o.out;
    write_dataset_dir(result.data, dir);
    write_matrix_csv(dir / "truth_tra.csv", NamedMatrix{"spot_id", result.data.spot_ids, result.data.gene_ids, result.truth_tra});
    if (result.truth_mor) {
        write_matrix_csv(dir / "truth_mor.csv", NamedMatrix{"spot_id", result.data.spot_ids, result.data.mor_ids, *result.truth_mor});
    }
    json doc = {{"tool", "topofuse"},
                {"version", version},
                {"subcommand", "synth"},
                {"seed", spec.seed},
                {"spec",
                 {{"n_domains", spec.n_domains},
                  {"spots_per_domain", spec.spots_per_domain},
                  {"grid_rows", spec.grid_rows},
                  {"jitter", spec.jitter},
                  {"genes", spec.genes},
                  {"mor_dims", spec.mor_dims},
                  {"signal_tra", spec.signal_tra},
                  {"signal_mor", spec.signal_mor},
                  {"noise_std", spec.noise_std},
                  {"baseline", spec.baseline}}}};
    write_json(dir / "manifest.json", doc);
}

void cmd_preprocess(const CommonOptions& o) {
    const RunConfig cfg = resolve_config(o);
    const auto dataset = load_dataset_dir(o.data);
    const auto data = preprocess(dataset, cfg);
    make_dir(o.out);
    write_inputs(o.out, dataset.spot_ids, data);
    write_manifest(o.out, "preprocess", cfg, o);
}

void cmd_train(const CommonOptions& o) {
    const RunConfig cfg = resolve_config(o);
    const auto dataset = load_dataset_dir(o.data);
    const auto model = fit_model(dataset, cfg);
    save_trained(o.out, dataset, model, cfg, o);
}

void cmd_cluster(const CommonOptions& o) {
    const auto run = load_trained(o.data);
    const RunConfig cfg = resolve_config(o, run.cfg);
    const Matrix z = read_matrix_csv(fs::path(o.data) / "embedding.csv").values;
    const auto clustering = cluster_embedding(z, run.coords, cfg);
    make_dir(o.out);
    write_labels_csv(fs::path(o.out) / "labels.csv", run.spot_ids, clustering.labels);
    plot_scatter(run.coords, clustering.labels, fs::path(o.out) / "spatial_domains.svg");
    json doc = {{"loglik", clustering.model.loglik.empty() ? 0.0 : clustering.model.loglik.back()},
                {"discarded_restarts", clustering.model.discarded_restarts}};
    if (run.truth) {
        doc["ari"] = ari(*run.truth, clustering.labels);
    }
    write_json(fs::path(o.out) / "cluster.json", doc);
    write_manifest(o.out, "cluster", cfg, o);
}

void cmd_visualize(const CommonOptions& o) {
    const auto run = load_trained(o.data);
    const RunConfig cfg = resolve_config(o, run.cfg);
    const Matrix z = read_matrix_csv(fs::path(o.data) / "embedding.csv").values;
    const Labels labels = resolve_labels(o, run, z, cfg);
    Rng rng = stage_rng(cfg.seed, stage_visualize);
    const auto vis = fit_visualization(z, visualization_options(cfg), rng);
    make_dir(o.out);
    write_matrix_csv(fs::path(o.out) / "visualization.csv", run.spot_ids, vis.coords, "v");
    plot_scatter(vis.coords, labels, fs::path(o.out) / "visualization.svg");
    write_manifest(o.out, "visualize", cfg, o);
}

void cmd_deconvolve(const CommonOptions& o) {
    const auto run = load_trained(o.data);
    const RunConfig cfg = resolve_config(o, run.cfg);
    const Matrix z = read_matrix_csv(fs::path(o.data) / "embedding.csv").values;
    const Labels labels = resolve_labels(o, run, z, cfg);
    const auto result = deconvolve(z, labels, cfg.lasso_l1);
    make_dir(o.out);
    NamedMatrix table{"spot_id", run.spot_ids, {}, Matrix(result.weights.rows(), result.weights.cols() + 1)};
    for (int c : result.classes) {
        table.col_ids.push_back("cluster" + std::to_string(c));
    }
    table.col_ids.push_back("weight_dispersion");
    table.values.leftCols(result.weights.cols()) = result.weights;
    for (Index i = 0; i < result.weights.rows(); ++i) {
        table.values(i, result.weights.cols()) = result.impurity[static_cast<std::size_t>(i)];
    }
    write_matrix_csv(fs::path(o.out) / "deconvolution.csv", table);
    write_json(fs::path(o.out) / "deconvolution.json", {{"non_converged", result.non_converged}});
    write_manifest(o.out, "deconvolve", cfg, o);
}

void cmd_markers(const CommonOptions& o) {
    const auto run = load_trained(o.data);
    const RunConfig cfg = resolve_config(o, run.cfg);
    const auto network = rebuild_network(run);
    const Matrix z = network.embed({&run.data.tra, run.data.mor ? &*run.data.mor : nullptr}).z;
    const Labels labels = resolve_labels(o, run, z, cfg);
    const auto importance = marker_importance(network, run.data, labels);
    AnalysisReport report;
    for (int cluster : importance.classes) {
        const auto ranked = rank_markers(importance, run.data, cluster, cfg.marker_top_n);
        report.markers.insert(report.markers.end(), ranked.begin(), ranked.end());
    }
    make_dir(o.out);
    std::ofstream out(fs::path(o.out) / "markers.csv");
    out << "cluster,rank,gene_id,importance\n";
    for (const auto& m : report.markers) {
        out << m.cluster << ',' << m.rank << ',' << m.gene_id << ',' << format_real(m.importance) << '\n';
    }
    if (!out) {
        throw Error(ErrorCode::IoFailure, "failed writing markers.csv");
    }
    write_manifest(o.out, "markers", cfg, o);
}

void cmd_trajectory(const CommonOptions& o) {
    const auto run = load_trained(o.data);
    const RunConfig cfg = resolve_config(o, run.cfg);
    const Matrix z = read_matrix_csv(fs::path(o.data) / "embedding.csv").values;
    const Labels labels = resolve_labels(o, run, z, cfg);
    AnalysisReport report;
    report.paga_edges = paga_connectivity(z, labels, cfg.paga_k).edges();
    make_dir(o.out);
    write_json(fs::path(o.out) / "trajectory.json", {{"paga_edges", report_to_json(report).at("paga_edges")}});
    write_manifest(o.out, "trajectory", cfg, o);
}

void cmd_evaluate(const CommonOptions& o) {
    const auto run = load_trained(o.data);
    const RunConfig cfg = resolve_config(o, run.cfg);
    const fs::path dir = o.data;
    const Matrix z = read_matrix_csv(dir / "embedding.csv").values;
    const Labels labels = resolve_labels(o, run, z, cfg);

    AnalysisReport report;
    if (run.truth) {
        report.metrics["ari"] = ari(*run.truth, labels);
    }
    if (z.rows() > 2 * static_cast<Index>(cfg.mrre_k)) {
        report.metrics["mrre"] = mrre(run.data.tra, z, cfg.mrre_k, cfg.mrre_bidirectional);
    }
    const Labels& reference = run.truth ? *run.truth : labels;
    std::vector<Matrix> inputs{run.data.tra};
    std::vector<Matrix> embeddings{read_matrix_csv(dir / "y_tra.csv").values};
    std::vector<std::string> names{"tra"};
    if (run.data.mor) {
        inputs.push_back(*run.data.mor);
        embeddings.push_back(read_matrix_csv(dir / "y_mor.csv").values);
        names.push_back("mor");
    }
    if (auto block = contribution_block("input", inputs, names, reference, cfg)) {
        report.contributions.push_back(std::move(*block));
    }
    if (auto block = contribution_block("embedding", embeddings, names, reference, cfg)) {
        report.contributions.push_back(std::move(*block));
    }
    make_dir(o.out);
    const json full = report_to_json(report);
    write_json(fs::path(o.out) / "metrics.json",
               {{"metrics", full.at("metrics")}, {"modality_contributions", full.at("modality_contributions")}});
    for (const auto& block : report.contributions) {
        write_matrix_csv(fs::path(o.out) / ("contributions_" + block.source + ".csv"),
                         NamedMatrix{"spot_id", run.spot_ids, names, block.per_spot});
    }
    write_manifest(o.out, "evaluate", cfg, o);
}

void cmd_report(const CommonOptions& o) {
    const RunConfig cfg = resolve_config(o);
    const auto dataset = load_dataset_dir(o.data);
    const auto result = run_pipeline(dataset, cfg);
    write_report(result.report, o.out);
    const auto& network = result.model.trained.state.network;
    save_checkpoint(fs::path(o.out) / "checkpoint.json", network.shape(), network.theta(), network.params());
    write_manifest(o.out, "report", cfg, o);
}

int exit_for(const Error& e) {
    switch (e.code()) {
    case ErrorCode::Internal:
    case ErrorCode::StaleCache:
        return exit_internal_error;
    default:
        return exit_user_error;
    }
}

}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-modal spatial transcriptomics embedding with topology-preserving fusion", "topofuse"};
    app.set_version_flag("--version", version);
    app.require_subcommand(1);

    CommonOptions o;
    SynthSpec spec;
    std::string subcommand;
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"preprocess", "Filter, normalize and reduce a dataset"},
        {"train", "Preprocess and train the fusion network"},
        {"cluster", "Cluster a trained embedding"},
        {"visualize", "Fit a 2-D visualization of a trained embedding"},
        {"deconvolve", "Decompose spots onto cluster mean vectors"},
        {"markers", "Rank marker genes per cluster"},
        {"trajectory", "Cluster connectivity graph"},
        {"evaluate", "ARI, MRRE and modality contributions"},
        {"report", "Run the whole analysis on a dataset"},
    };

    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth->add_option("--out", o.out, "Output directory")->required();
    synth->add_option("--seed", spec.seed, "Random seed");
    synth->add_option("--domains", spec.n_domains, "Number of spatial domains");
    synth->add_option("--spots-per-domain", spec.spots_per_domain, "Spots in each domain");
    synth->add_option("--grid-rows", spec.grid_rows, "Rows of the spot grid");
    synth->add_option("--genes", spec.genes, "Number of genes");
    synth->add_option("--mor-dims", spec.mor_dims, "Morphology features (0 disables morphology)");
    synth->add_option("--signal-tra", spec.signal_tra, "Expression separation in noise units");
    synth->add_option("--signal-mor", spec.signal_mor, "Morphology separation in noise units");
    synth->add_option("--noise", spec.noise_std, "Noise standard deviation");
    synth->callback([&] { subcommand = "synth"; });

    for (const auto& [name, help] : commands) {
        auto* cmd = app.add_subcommand(name, help);
        const bool dataset_input = name == "preprocess" || name == "train" || name == "report";
        add_common(cmd, o, true);
        if (!dataset_input) {
            cmd->add_option("--labels", o.labels, "spot_id,label CSV used instead of clustering")->check(CLI::ExistingFile);
        }
        cmd->callback([&subcommand, name = name] { subcommand = name; });
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(std::move(reversed));
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::CallForVersion&) {
        out << version << '\n';
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return exit_user_error;
    }

    try {
        set_max_threads(o.threads);
        if (subcommand == "synth") {
            cmd_synth(o, spec);
        } else if (subcommand == "preprocess") {
            cmd_preprocess(o);
        } else if (subcommand == "train") {
            cmd_train(o);
        } else if (subcommand == "cluster") {
            cmd_cluster(o);
        } else if (subcommand == "visualize") {
            cmd_visualize(o);
        } else if (subcommand == "deconvolve") {
            cmd_deconvolve(o);
        } else if (subcommand == "markers") {
            cmd_markers(o);
        } else if (subcommand == "trajectory") {
            cmd_trajectory(o);
        } else if (subcommand == "evaluate") {
            cmd_evaluate(o);
        } else if (subcommand == "report") {
            cmd_report(o);
        } else {
            throw Error(ErrorCode::Internal, "no handler for subcommand " + subcommand);
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_for(e);
    } catch (const nlohmann::json::exception& e) {
        err << "error: malformed JSON: " << e.what() << '\n';
        return exit_user_error;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return exit_internal_error;
    }
    return exit_ok;
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run(args, std::cout, std::cerr);
}

}
