#ifndef TOPOFUSE_DATAIO_HPP
#define TOPOFUSE_DATAIO_HPP

#include "topofuse/types.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

/**
 * @file dataio.hpp
 *
 * @brief Dataset and configuration loading, report writing and SVG plotting.
 */

namespace topofuse {

/**
 * @brief Per-spot matrices for every modality plus spatial coordinates.
 *
 * Row `i` of every matrix refers to the spot `spot_ids[i]`.
 */
struct SpotDataset {
    /** Expression values, spots in rows, genes in columns. */
    Matrix tra;
    /** Morphology features, if available. */
    std::optional<Matrix> mor;
    /** Spatial positions, one row of (x, y) per spot. */
    Matrix coords;
    std::vector<std::string> spot_ids;
    std::vector<std::string> gene_ids;
    std::vector<std::string> mor_ids;
    /** Ground-truth domains, if available. */
    std::optional<Labels> labels;

    Index n_spots() const { return tra.rows(); }

    /** Throws if any of the documented invariants does not hold. */
    void validate() const;
};

enum class FusionMode { sum, concat };

/**
 * @brief Resolved run configuration.
 *
 * The defaults reproduce the coronal mouse brain hyperparameters, with the
 * additional settings that the model needs but the published table omits.
 */
struct RunConfig {
    int k_tr = 7;
    int k_mo = 7;
    double r_u_tr = 0.1;
    double r_u_mo = 0.1;
    double nu = 0.05;
    int d_emb = 72;
    double theta = 0.9;
    double lambda_ = 0.01;
    double alpha = 2.0;
    int tau = 50;
    int n_mlp = 1;
    double lr = 0.001;
    int epochs = 600;
    std::uint64_t seed = 42;
    /** Empty means "auto". */
    std::optional<double> epsilon_radius;
    int n_clusters = 7;
    bool refine = false;

    FusionMode fusion_mode = FusionMode::sum;
    int n_neg = 5;
    double dropout = 0.1;
    int graph_refresh = 10;
    int n_hvg = 3000;
    int n_pcs_mor = 50;
    double target_sum = 1e4;
    int refine_k = 6;
    int gmm_restarts = 5;
    int vis_epochs = 300;
    double vis_lr = 0.001;
    double lasso_l1 = 0.01;
    int marker_top_n = 10;
    int paga_k = 10;
    int mrre_k = 10;
    bool mrre_bidirectional = false;
    int svc_epochs = 200;

    /** Throws `OutOfRange` if any field is outside its documented range. */
    void validate() const;
};

/** Every key accepted by `load_config`, in serialization order. */
const std::vector<std::string>& config_keys();

RunConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const RunConfig& cfg);

/** Applies a single `key=value` override, parsing the value as JSON when possible. */
void apply_override(RunConfig& cfg, const std::string& assignment);

RunConfig load_config(const std::filesystem::path& path);

/**
 * Reads the spot tables.
 * Rows of the coordinate, morphology and label files are matched to expression rows by spot id,
 * so those files may contain extra spots or a different order.
 */
SpotDataset load_dataset(const std::filesystem::path& tra_path,
                         const std::filesystem::path& coords_path,
                         const std::optional<std::filesystem::path>& mor_path = std::nullopt,
                         const std::optional<std::filesystem::path>& labels_path = std::nullopt);

/** Loads `tra.csv`, `coords.csv` and, when present, `mor.csv` and `labels.csv` from a directory. */
SpotDataset load_dataset_dir(const std::filesystem::path& dir);

/** Writes the dataset in the layout understood by `load_dataset_dir`. */
void write_dataset_dir(const SpotDataset& data, const std::filesystem::path& dir);

/**
 * A dense table with row and column names.
 * The header row holds `index_name` followed by the column names.
 */
struct NamedMatrix {
    std::string index_name = "id";
    std::vector<std::string> row_ids;
    std::vector<std::string> col_ids;
    Matrix values;
};

NamedMatrix read_matrix_csv(const std::filesystem::path& path);
void write_matrix_csv(const std::filesystem::path& path, const NamedMatrix& table);
void write_matrix_csv(const std::filesystem::path& path, const std::vector<std::string>& row_ids,
                      const Matrix& values, const std::string& column_prefix,
                      const std::string& index_name = "spot_id");

/** Reads a two-column `spot_id,label` file. */
std::map<std::string, int> read_labels_csv(const std::filesystem::path& path);
void write_labels_csv(const std::filesystem::path& path, const std::vector<std::string>& spot_ids,
                      const Labels& labels);

/** Shortest decimal representation that parses back to the same double. */
std::string format_real(double value);

struct LossRecord {
    int epoch = 0;
    double l_topo_tra = 0;
    double l_topo_mor = 0;
    double l_recon = 0;
    double total = 0;
};

struct PagaEdge {
    int c = 0;
    int d = 0;
    double connectivity = 0;
};

struct MarkerEntry {
    int cluster = 0;
    int rank = 0;
    std::string gene_id;
    double importance = 0;
};

struct ContributionSummary {
    std::string modality;
    double mean = 0;
    double median = 0;
    double q1 = 0;
    double q3 = 0;
};

struct ContributionBlock {
    /** "input" or "embedding". */
    std::string source;
    double train_accuracy = 0;
    std::vector<ContributionSummary> summaries;
    /** Spots in rows, modalities in columns. */
    Matrix per_spot;
};

/**
 * @brief Everything a `report` run produces.
 *
 * Optional parts are only written when present.
 */
struct AnalysisReport {
    std::vector<std::string> spot_ids;
    Matrix embedding;
    Labels labels;
    std::optional<Matrix> visualization;
    std::optional<Matrix> denoised;
    std::vector<std::string> denoised_gene_ids;
    std::optional<Matrix> deconvolution_weights;
    std::vector<double> weight_dispersion;
    std::map<std::string, double> metrics;
    std::vector<LossRecord> loss_history;
    std::vector<PagaEdge> paga_edges;
    std::vector<MarkerEntry> markers;
    std::vector<ContributionBlock> contributions;
    std::map<std::string, long long> warnings;
    bool plot_spatial = false;
    bool plot_visualization = false;
    Matrix coords;
};

nlohmann::json report_to_json(const AnalysisReport& report);

/** Writes embedding.csv, labels.csv, report.json and the optional tables/plots. Returns the written paths. */
std::vector<std::filesystem::path> write_report(const AnalysisReport& report, const std::filesystem::path& out_dir);

/**
 * Renders a labelled scatter plot as SVG, one circle per point.
 * Colors are assigned by label value from a fixed palette.
 */
std::filesystem::path plot_scatter(const Matrix& points, const Labels& labels, const std::filesystem::path& path);

/** Writes a JSON document with two-space indentation and a trailing newline. */
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

}

#endif
