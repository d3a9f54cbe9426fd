#include "topofuse/dataio.hpp"
#include "topofuse/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace topofuse {

namespace fs = std::filesystem;
using nlohmann::json;

/*************************************
 ***** CSV reading and writing *******
 *************************************/

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string current;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    current += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                current += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(current));
            current.clear();
        } else if (c != '\r') {
            current += c;
        }
    }
    fields.push_back(std::move(current));
    return fields;
}

std::string quote_if_needed(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) {
        return field;
    }
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    out += '"';
    return out;
}

double parse_real(const std::string& cell, const fs::path& path, std::size_t row, std::size_t col) {
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    while (begin < end && *begin == ' ') {
        ++begin;
    }
    while (end > begin && *(end - 1) == ' ') {
        --end;
    }
    if (begin < end && *begin == '+') {
        ++begin;
    }
    double value = 0;
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end || begin == end) {
        throw Error(ErrorCode::NonNumericCell, path.string() + ": row " + std::to_string(row) + ", column " +
                                                   std::to_string(col) + " holds '" + cell + "'");
    }
    if (!std::isfinite(value)) {
        throw Error(ErrorCode::NonNumericCell, path.string() + ": row " + std::to_string(row) + ", column " +
                                                   std::to_string(col) + " is not finite");
    }
    return value;
}

std::ifstream open_input(const fs::path& path) {
    if (!fs::exists(path)) {
        throw Error(ErrorCode::MissingFile, path.string());
    }
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
    }
    return in;
}

std::ofstream open_output(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    }
    return out;
}

}

std::string format_real(double value) {
    char buffer[64];
    auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
    if (ec != std::errc()) {
        throw Error(ErrorCode::Internal, "number formatting failed");
    }
    return std::string(buffer, ptr);
}

NamedMatrix read_matrix_csv(const fs::path& path) {
    auto in = open_input(path);
    NamedMatrix table;
    std::string line;
    if (!std::getline(in, line)) {
        throw Error(ErrorCode::InvalidArgument, path.string() + " is empty");
    }
    auto header = split_csv_line(line);
    table.index_name = header.front();
    table.col_ids.assign(header.begin() + 1, header.end());
    const std::size_t ncol = table.col_ids.size();

    std::vector<double> values;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") {
            continue;
        }
        ++row;
        auto fields = split_csv_line(line);
        if (fields.size() != ncol + 1) {
            throw Error(ErrorCode::InvalidArgument, path.string() + ": row " + std::to_string(row) + " has " +
                                                        std::to_string(fields.size()) + " fields, expected " +
                                                        std::to_string(ncol + 1));
        }
        table.row_ids.push_back(fields[0]);
        for (std::size_t c = 0; c < ncol; ++c) {
            values.push_back(parse_real(fields[c + 1], path, row, c + 1));
        }
    }

    const Index nrow = static_cast<Index>(table.row_ids.size());
    table.values.resize(nrow, static_cast<Index>(ncol));
    for (Index r = 0; r < nrow; ++r) {
        for (std::size_t c = 0; c < ncol; ++c) {
            table.values(r, static_cast<Index>(c)) = values[static_cast<std::size_t>(r) * ncol + c];
        }
    }
    return table;
}

void write_matrix_csv(const fs::path& path, const NamedMatrix& table) {
    if (static_cast<Index>(table.row_ids.size()) != table.values.rows() ||
        static_cast<Index>(table.col_ids.size()) != table.values.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "row/column names do not match matrix shape for " + path.string());
    }
    auto out = open_output(path);
    out << quote_if_needed(table.index_name);
    for (const auto& c : table.col_ids) {
        out << ',' << quote_if_needed(c);
    }
    out << '\n';
    for (Index r = 0; r < table.values.rows(); ++r) {
        out << quote_if_needed(table.row_ids[static_cast<std::size_t>(r)]);
        for (Index c = 0; c < table.values.cols(); ++c) {
            out << ',' << format_real(table.values(r, c));
        }
        out << '\n';
    }
    if (!out) {
        throw Error(ErrorCode::IoFailure, "failed writing " + path.string());
    }
}

void write_matrix_csv(const fs::path& path, const std::vector<std::string>& row_ids, const Matrix& values,
                      const std::string& column_prefix, const std::string& index_name) {
    NamedMatrix table;
    table.index_name = index_name;
    table.row_ids = row_ids;
    for (Index c = 0; c < values.cols(); ++c) {
        table.col_ids.push_back(column_prefix + std::to_string(c));
    }
    table.values = values;
    write_matrix_csv(path, table);
}

std::map<std::string, int> read_labels_csv(const fs::path& path) {
    auto table = read_matrix_csv(path);
    if (table.values.cols() != 1) {
        throw Error(ErrorCode::InvalidArgument, path.string() + " must have exactly one label column");
    }
    std::map<std::string, int> out;
    for (std::size_t r = 0; r < table.row_ids.size(); ++r) {
        const double v = table.values(static_cast<Index>(r), 0);
        if (v != std::floor(v)) {
            throw Error(ErrorCode::NonNumericCell, path.string() + ": label on row " + std::to_string(r + 1) +
                                                       " is not an integer");
        }
        if (!out.emplace(table.row_ids[r], static_cast<int>(v)).second) {
            throw Error(ErrorCode::DuplicateSpotId, path.string() + ": " + table.row_ids[r]);
        }
    }
    return out;
}

void write_labels_csv(const fs::path& path, const std::vector<std::string>& spot_ids, const Labels& labels) {
    if (spot_ids.size() != labels.size()) {
        throw Error(ErrorCode::ShapeMismatch, "labels and spot ids differ in length");
    }
    auto out = open_output(path);
    out << "spot_id,label\n";
    for (std::size_t i = 0; i < labels.size(); ++i) {
        out << quote_if_needed(spot_ids[i]) << ',' << labels[i] << '\n';
    }
    if (!out) {
        throw Error(ErrorCode::IoFailure, "failed writing " + path.string());
    }
}

/*************************************
 ***** Dataset loading ***************
 *************************************/

void SpotDataset::validate() const {
    const Index n = tra.rows();
    require(n >= 2, ErrorCode::InvalidArgument, "need at least 2 spots, got " + std::to_string(n));
    require(tra.cols() >= 1, ErrorCode::InvalidArgument, "need at least one gene");
    require(coords.rows() == n && coords.cols() == 2, ErrorCode::RowCountMismatch,
            "coordinates must be an N x 2 matrix");
    require(static_cast<Index>(spot_ids.size()) == n, ErrorCode::RowCountMismatch, "spot id count differs from N");
    require(static_cast<Index>(gene_ids.size()) == tra.cols(), ErrorCode::RowCountMismatch,
            "gene id count differs from the number of expression columns");
    require(tra.allFinite() && coords.allFinite(), ErrorCode::NonNumericCell, "non-finite value in dataset");
    if (mor) {
        require(mor->rows() == n, ErrorCode::RowCountMismatch, "morphology rows differ from N");
        require(mor->allFinite(), ErrorCode::NonNumericCell, "non-finite morphology value");
    }
    if (labels) {
        require(static_cast<Index>(labels->size()) == n, ErrorCode::RowCountMismatch, "label count differs from N");
    }
    std::unordered_set<std::string> seen;
    for (const auto& id : spot_ids) {
        require(seen.insert(id).second, ErrorCode::DuplicateSpotId, id);
    }
}

namespace {

std::unordered_map<std::string, Index> index_rows(const NamedMatrix& table, const fs::path& path) {
    std::unordered_map<std::string, Index> index;
    for (std::size_t r = 0; r < table.row_ids.size(); ++r) {
        if (!index.emplace(table.row_ids[r], static_cast<Index>(r)).second) {
            throw Error(ErrorCode::DuplicateSpotId, path.string() + ": " + table.row_ids[r]);
        }
    }
    return index;
}

Matrix align_rows(const NamedMatrix& table, const fs::path& path, const std::vector<std::string>& order) {
    auto index = index_rows(table, path);
    Matrix out(static_cast<Index>(order.size()), table.values.cols());
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto it = index.find(order[i]);
        if (it == index.end()) {
            throw Error(ErrorCode::RowCountMismatch, path.string() + " has no row for spot '" + order[i] + "'");
        }
        out.row(static_cast<Index>(i)) = table.values.row(it->second);
    }
    return out;
}

}

SpotDataset load_dataset(const fs::path& tra_path, const fs::path& coords_path,
                         const std::optional<fs::path>& mor_path, const std::optional<fs::path>& labels_path) {
    SpotDataset data;
    auto tra = read_matrix_csv(tra_path);
    index_rows(tra, tra_path);
    data.spot_ids = tra.row_ids;
    data.gene_ids = tra.col_ids;
    data.tra = std::move(tra.values);

    auto coords = read_matrix_csv(coords_path);
    if (coords.values.cols() != 2) {
        throw Error(ErrorCode::InvalidArgument, coords_path.string() + " must have exactly two coordinate columns");
    }
    data.coords = align_rows(coords, coords_path, data.spot_ids);

    if (mor_path) {
        auto mor = read_matrix_csv(*mor_path);
        data.mor_ids = mor.col_ids;
        data.mor = align_rows(mor, *mor_path, data.spot_ids);
    }

    if (labels_path) {
        auto labels = read_labels_csv(*labels_path);
        Labels aligned;
        aligned.reserve(data.spot_ids.size());
        for (const auto& id : data.spot_ids) {
            auto it = labels.find(id);
            if (it == labels.end()) {
                throw Error(ErrorCode::RowCountMismatch, labels_path->string() + " has no label for spot '" + id + "'");
            }
            aligned.push_back(it->second);
        }
        data.labels = std::move(aligned);
    }

    data.validate();
    return data;
}

SpotDataset load_dataset_dir(const fs::path& dir) {
    std::optional<fs::path> mor, labels;
    if (fs::exists(dir / "mor.csv")) {
        mor = dir / "mor.csv";
    }
    if (fs::exists(dir / "labels.csv")) {
        labels = dir / "labels.csv";
    }
    return load_dataset(dir / "tra.csv", dir / "coords.csv", mor, labels);
}

void write_dataset_dir(const SpotDataset& data, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw Error(ErrorCode::IoFailure, "cannot create " + dir.string());
    }
    write_matrix_csv(dir / "tra.csv", NamedMatrix{"spot_id", data.spot_ids, data.gene_ids, data.tra});
    write_matrix_csv(dir / "coords.csv", NamedMatrix{"spot_id", data.spot_ids, {"x", "y"}, data.coords});
    if (data.mor) {
        auto ids = data.mor_ids;
        if (static_cast<Index>(ids.size()) != data.mor->cols()) {
            ids.clear();
            for (Index c = 0; c < data.mor->cols(); ++c) {
                ids.push_back("mor_" + std::to_string(c));
            }
        }
        write_matrix_csv(dir / "mor.csv", NamedMatrix{"spot_id", data.spot_ids, ids, *data.mor});
    }
    if (data.labels) {
        write_labels_csv(dir / "labels.csv", data.spot_ids, *data.labels);
    }
}

/*************************************
 ***** Configuration *****************
 *************************************/

namespace {

struct ConfigField {
    std::string name;
    std::function<void(RunConfig&, const json&)> set;
    std::function<json(const RunConfig&)> get;
};

[[noreturn]] void out_of_range(const std::string& key, const std::string& what) {
    throw Error(ErrorCode::OutOfRange, key + " " + what);
}

double as_real(const std::string& key, const json& v) {
    if (!v.is_number()) {
        out_of_range(key, "must be a number");
    }
    return v.get<double>();
}

long long as_integer(const std::string& key, const json& v) {
    if (v.is_number_integer() || v.is_number_unsigned()) {
        return v.get<long long>();
    }
    if (v.is_number_float()) {
        const double d = v.get<double>();
        if (d == std::floor(d) && std::abs(d) < 9e15) {
            return static_cast<long long>(d);
        }
    }
    out_of_range(key, "must be an integer");
}

int as_int(const std::string& key, const json& v) {
    const long long value = as_integer(key, v);
    if (value < INT32_MIN || value > INT32_MAX) {
        out_of_range(key, "does not fit in a 32-bit integer");
    }
    return static_cast<int>(value);
}

bool as_bool(const std::string& key, const json& v) {
    if (!v.is_boolean()) {
        out_of_range(key, "must be true or false");
    }
    return v.get<bool>();
}

#define TOPOFUSE_INT_FIELD(field) \
    ConfigField{#field, [](RunConfig& c, const json& v) { c.field = as_int(#field, v); }, \
                [](const RunConfig& c) { return json(c.field); }}
#define TOPOFUSE_REAL_FIELD(field) \
    ConfigField{#field, [](RunConfig& c, const json& v) { c.field = as_real(#field, v); }, \
                [](const RunConfig& c) { return json(c.field); }}
#define TOPOFUSE_BOOL_FIELD(field) \
    ConfigField{#field, [](RunConfig& c, const json& v) { c.field = as_bool(#field, v); }, \
                [](const RunConfig& c) { return json(c.field); }}

const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        TOPOFUSE_INT_FIELD(k_tr),
        TOPOFUSE_INT_FIELD(k_mo),
        TOPOFUSE_REAL_FIELD(r_u_tr),
        TOPOFUSE_REAL_FIELD(r_u_mo),
        TOPOFUSE_REAL_FIELD(nu),
        TOPOFUSE_INT_FIELD(d_emb),
        TOPOFUSE_REAL_FIELD(theta),
        TOPOFUSE_REAL_FIELD(lambda_),
        TOPOFUSE_REAL_FIELD(alpha),
        TOPOFUSE_INT_FIELD(tau),
        TOPOFUSE_INT_FIELD(n_mlp),
        TOPOFUSE_REAL_FIELD(lr),
        TOPOFUSE_INT_FIELD(epochs),
        ConfigField{"seed",
                    [](RunConfig& c, const json& v) {
                        if (!(v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0))) {
                            out_of_range("seed", "must be a nonnegative integer");
                        }
                        c.seed = v.get<std::uint64_t>();
                    },
                    [](const RunConfig& c) { return json(c.seed); }},
        ConfigField{"epsilon_radius",
                    [](RunConfig& c, const json& v) {
                        if (v.is_string() && v.get<std::string>() == "auto") {
                            c.epsilon_radius.reset();
                        } else {
                            c.epsilon_radius = as_real("epsilon_radius", v);
                        }
                    },
                    [](const RunConfig& c) { return c.epsilon_radius ? json(*c.epsilon_radius) : json("auto"); }},
        TOPOFUSE_INT_FIELD(n_clusters),
        TOPOFUSE_BOOL_FIELD(refine),
        ConfigField{"fusion_mode",
                    [](RunConfig& c, const json& v) {
                        const std::string mode = v.is_string() ? v.get<std::string>() : "";
                        if (mode == "sum") {
                            c.fusion_mode = FusionMode::sum;
                        } else if (mode == "concat") {
                            c.fusion_mode = FusionMode::concat;
                        } else {
                            out_of_range("fusion_mode", "must be \"sum\" or \"concat\"");
                        }
                    },
                    [](const RunConfig& c) { return json(c.fusion_mode == FusionMode::sum ? "sum" : "concat"); }},
        TOPOFUSE_INT_FIELD(n_neg),
        TOPOFUSE_REAL_FIELD(dropout),
        TOPOFUSE_INT_FIELD(graph_refresh),
        TOPOFUSE_INT_FIELD(n_hvg),
        TOPOFUSE_INT_FIELD(n_pcs_mor),
        TOPOFUSE_REAL_FIELD(target_sum),
        TOPOFUSE_INT_FIELD(refine_k),
        TOPOFUSE_INT_FIELD(gmm_restarts),
        TOPOFUSE_INT_FIELD(vis_epochs),
        TOPOFUSE_REAL_FIELD(vis_lr),
        TOPOFUSE_REAL_FIELD(lasso_l1),
        TOPOFUSE_INT_FIELD(marker_top_n),
        TOPOFUSE_INT_FIELD(paga_k),
        TOPOFUSE_INT_FIELD(mrre_k),
        TOPOFUSE_BOOL_FIELD(mrre_bidirectional),
        TOPOFUSE_INT_FIELD(svc_epochs),
    };
    return fields;
}

#undef TOPOFUSE_INT_FIELD
#undef TOPOFUSE_REAL_FIELD
#undef TOPOFUSE_BOOL_FIELD

const ConfigField* find_field(const std::string& key) {
    for (const auto& f : config_fields()) {
        if (f.name == key) {
            return &f;
        }
    }
    return nullptr;
}

}

void RunConfig::validate() const {
    auto positive_int = [](const char* key, int v) {
        if (v < 1) out_of_range(key, "must be a positive integer, got " + std::to_string(v));
    };
    auto positive_real = [](const char* key, double v) {
        if (!(v > 0) || !std::isfinite(v)) out_of_range(key, "must be a positive real, got " + format_real(v));
    };
    auto nonnegative_real = [](const char* key, double v) {
        if (!(v >= 0) || !std::isfinite(v)) out_of_range(key, "must be a nonnegative real, got " + format_real(v));
    };
    auto unit_interval = [](const char* key, double v, bool open_left) {
        const bool ok = open_left ? (v > 0 && v <= 1) : (v >= 0 && v <= 1);
        if (!ok) out_of_range(key, std::string("must lie in ") + (open_left ? "(0,1]" : "[0,1]") + ", got " + format_real(v));
    };

    positive_int("k_tr", k_tr);
    positive_int("k_mo", k_mo);
    unit_interval("r_u_tr", r_u_tr, true);
    unit_interval("r_u_mo", r_u_mo, true);
    positive_real("nu", nu);
    positive_int("d_emb", d_emb);
    unit_interval("theta", theta, false);
    nonnegative_real("lambda_", lambda_);
    nonnegative_real("alpha", alpha);
    if (tau < 0) out_of_range("tau", "must be nonnegative");
    positive_int("n_mlp", n_mlp);
    positive_real("lr", lr);
    positive_int("epochs", epochs);
    if (epsilon_radius) positive_real("epsilon_radius", *epsilon_radius);
    positive_int("n_clusters", n_clusters);
    positive_int("n_neg", n_neg);
    if (!(dropout >= 0 && dropout < 1)) out_of_range("dropout", "must lie in [0,1)");
    positive_int("graph_refresh", graph_refresh);
    positive_int("n_hvg", n_hvg);
    positive_int("n_pcs_mor", n_pcs_mor);
    positive_real("target_sum", target_sum);
    positive_int("refine_k", refine_k);
    positive_int("gmm_restarts", gmm_restarts);
    positive_int("vis_epochs", vis_epochs);
    positive_real("vis_lr", vis_lr);
    nonnegative_real("lasso_l1", lasso_l1);
    positive_int("marker_top_n", marker_top_n);
    positive_int("paga_k", paga_k);
    positive_int("mrre_k", mrre_k);
    positive_int("svc_epochs", svc_epochs);
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> out;
        for (const auto& f : config_fields()) {
            out.push_back(f.name);
        }
        return out;
    }();
    return keys;
}

RunConfig config_from_json(const json& doc) {
    if (!doc.is_object()) {
        throw Error(ErrorCode::InvalidArgument, "configuration must be a JSON object");
    }
    RunConfig cfg;
    for (const auto& [key, value] : doc.items()) {
        const auto* field = find_field(key);
        if (!field) {
            throw Error(ErrorCode::UnknownKey, key);
        }
        field->set(cfg, value);
    }
    cfg.validate();
    return cfg;
}

json config_to_json(const RunConfig& cfg) {
    json out = json::object();
    for (const auto& f : config_fields()) {
        out[f.name] = f.get(cfg);
    }
    return out;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw Error(ErrorCode::InvalidArgument, "override '" + assignment + "' is not of the form key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    const auto* field = find_field(key);
    if (!field) {
        throw Error(ErrorCode::UnknownKey, key);
    }
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) {
        value = raw;
    }
    field->set(cfg, value);
    cfg.validate();
}

RunConfig load_config(const fs::path& path) {
    return config_from_json(read_json(path));
}

json read_json(const fs::path& path) {
    auto in = open_input(path);
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) {
        throw Error(ErrorCode::InvalidArgument, path.string() + " is not valid JSON");
    }
    return doc;
}

void write_json(const fs::path& path, const json& doc) {
    auto out = open_output(path);
    out << doc.dump(2) << '\n';
    if (!out) {
        throw Error(ErrorCode::IoFailure, "failed writing " + path.string());
    }
}

/*************************************
 ***** Reports and plots *************
 *************************************/

json report_to_json(const AnalysisReport& report) {
    json doc = json::object();
    doc["n_spots"] = report.spot_ids.size();
    doc["d_emb"] = report.embedding.cols();

    json metrics = json::object();
    for (const auto& [k, v] : report.metrics) {
        metrics[k] = v;
    }
    doc["metrics"] = metrics;

    json history = json::array();
    for (const auto& r : report.loss_history) {
        history.push_back({{"epoch", r.epoch},
                           {"l_topo_tra", r.l_topo_tra},
                           {"l_topo_mor", r.l_topo_mor},
                           {"l_recon", r.l_recon},
                           {"total", r.total}});
    }
    doc["loss_history"] = history;

    json paga = json::array();
    for (const auto& e : report.paga_edges) {
        paga.push_back({{"c", e.c}, {"d", e.d}, {"connectivity", e.connectivity}});
    }
    doc["paga_edges"] = paga;

    json markers = json::array();
    for (const auto& m : report.markers) {
        markers.push_back({{"cluster", m.cluster}, {"rank", m.rank}, {"gene_id", m.gene_id}, {"importance", m.importance}});
    }
    doc["markers"] = markers;

    json contributions = json::array();
    for (const auto& block : report.contributions) {
        json summaries = json::array();
        for (const auto& s : block.summaries) {
            summaries.push_back(
                {{"modality", s.modality}, {"mean", s.mean}, {"median", s.median}, {"q1", s.q1}, {"q3", s.q3}});
        }
        contributions.push_back(
            {{"source", block.source}, {"train_accuracy", block.train_accuracy}, {"modalities", summaries}});
    }
    doc["modality_contributions"] = contributions;

    if (!report.weight_dispersion.empty()) {
        const auto& w = report.weight_dispersion;
        double mean = 0;
        for (double v : w) {
            mean += v;
        }
        doc["deconvolution"] = {{"mean_weight_dispersion", mean / static_cast<double>(w.size())}};
    }

    json warnings = json::object();
    for (const auto& [k, v] : report.warnings) {
        warnings[k] = v;
    }
    doc["warnings"] = warnings;
    return doc;
}

std::vector<fs::path> write_report(const AnalysisReport& report, const fs::path& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) {
        throw Error(ErrorCode::IoFailure, "cannot create output directory " + out_dir.string());
    }

    std::vector<fs::path> written;
    const auto& ids = report.spot_ids;

    write_matrix_csv(out_dir / "embedding.csv", ids, report.embedding, "z");
    written.push_back(out_dir / "embedding.csv");

    if (!report.labels.empty()) {
        write_labels_csv(out_dir / "labels.csv", ids, report.labels);
        written.push_back(out_dir / "labels.csv");
    }

    if (report.visualization) {
        write_matrix_csv(out_dir / "visualization.csv", NamedMatrix{"spot_id", ids, {"vis_0", "vis_1"}, *report.visualization});
        written.push_back(out_dir / "visualization.csv");
    }

    if (report.denoised) {
        write_matrix_csv(out_dir / "denoised.csv", NamedMatrix{"spot_id", ids, report.denoised_gene_ids, *report.denoised});
        written.push_back(out_dir / "denoised.csv");
    }

    if (report.deconvolution_weights) {
        const Matrix& w = *report.deconvolution_weights;
        Matrix table(w.rows(), w.cols() + 1);
        table.leftCols(w.cols()) = w;
        for (Index i = 0; i < w.rows(); ++i) {
            table(i, w.cols()) = report.weight_dispersion[static_cast<std::size_t>(i)];
        }
        std::vector<std::string> cols;
        for (Index c = 0; c < w.cols(); ++c) {
            cols.push_back("cluster_" + std::to_string(c));
        }
        cols.push_back("weight_dispersion");
        write_matrix_csv(out_dir / "deconvolution.csv", NamedMatrix{"spot_id", ids, cols, table});
        written.push_back(out_dir / "deconvolution.csv");
    }

    if (!report.markers.empty()) {
        auto out = open_output(out_dir / "markers.csv");
        out << "cluster,rank,gene_id,importance\n";
        for (const auto& m : report.markers) {
            out << m.cluster << ',' << m.rank << ',' << quote_if_needed(m.gene_id) << ',' << format_real(m.importance)
                << '\n';
        }
        written.push_back(out_dir / "markers.csv");
    }

    for (const auto& block : report.contributions) {
        std::vector<std::string> cols;
        for (const auto& s : block.summaries) {
            cols.push_back(s.modality);
        }
        const auto path = out_dir / ("contributions_" + block.source + ".csv");
        write_matrix_csv(path, NamedMatrix{"spot_id", ids, cols, block.per_spot});
        written.push_back(path);
    }

    write_json(out_dir / "report.json", report_to_json(report));
    written.push_back(out_dir / "report.json");

    if (report.plot_spatial && !report.labels.empty()) {
        written.push_back(plot_scatter(report.coords, report.labels, out_dir / "spatial_domains.svg"));
    }
    if (report.plot_visualization && report.visualization && !report.labels.empty()) {
        written.push_back(plot_scatter(*report.visualization, report.labels, out_dir / "visualization.svg"));
    }
    return written;
}

namespace {

std::string label_color(int label) {
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
                                    "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39",
                                    "#7b4173", "#3182bd", "#e6550d", "#31a354", "#756bb1", "#636363"};
    constexpr int n_palette = sizeof(palette) / sizeof(palette[0]);
    if (label < n_palette) {
        return palette[label];
    }
    // Multiplying by an odd constant is a bijection modulo 2^24.
    const unsigned value = (static_cast<unsigned>(label - n_palette) * 2654435761u) & 0xFFFFFFu;
    char buffer[16];
    std::snprintf(buffer, sizeof(buffer), "#%06x", value);
    return buffer;
}

}

fs::path plot_scatter(const Matrix& points, const Labels& labels, const fs::path& path) {
    require(points.rows() >= 1, ErrorCode::InvalidArgument, "scatter plot needs at least one point");
    require(points.cols() == 2, ErrorCode::ShapeMismatch, "scatter plot needs two columns");
    require(static_cast<Index>(labels.size()) == points.rows(), ErrorCode::LengthMismatch,
            "scatter plot needs one label per point");
    for (int l : labels) {
        require(l >= 0, ErrorCode::InvalidArgument, "labels must be nonnegative");
    }

    constexpr double size = 600.0;
    constexpr double margin = 20.0;
    const double xmin = points.col(0).minCoeff(), xmax = points.col(0).maxCoeff();
    const double ymin = points.col(1).minCoeff(), ymax = points.col(1).maxCoeff();
    const double span = std::max({xmax - xmin, ymax - ymin, 1e-12});
    const double scale = (size - 2 * margin) / span;
    const double radius = std::clamp(200.0 / std::sqrt(static_cast<double>(points.rows())), 1.5, 8.0);

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
        << "\" viewBox=\"0 0 " << size << ' ' << size << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    char buffer[160];
    for (Index i = 0; i < points.rows(); ++i) {
        const double cx = margin + (points(i, 0) - xmin) * scale;
        const double cy = size - margin - (points(i, 1) - ymin) * scale;
        std::snprintf(buffer, sizeof(buffer), "<circle cx=\"%.3f\" cy=\"%.3f\" r=\"%.2f\" fill=\"%s\"/>\n", cx, cy,
                      radius, label_color(labels[static_cast<std::size_t>(i)]).c_str());
        svg << buffer;
    }
    svg << "</svg>\n";

    auto out = open_output(path);
    out << svg.str();
    if (!out) {
        throw Error(ErrorCode::IoFailure, "failed writing " + path.string());
    }
    return path;
}

}
