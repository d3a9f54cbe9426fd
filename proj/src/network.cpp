#include "topofuse/network.hpp"
#include "topofuse/error.hpp"

#include <cmath>
#include <map>

namespace topofuse {

using nlohmann::json;

namespace {

void visit_layers(std::vector<Layer>& layers, const std::string& prefix,
                  const std::function<void(const std::string&, Matrix&)>& fn) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        fn(prefix + "." + std::to_string(l) + ".weight", layers[l].weight);
        fn(prefix + "." + std::to_string(l) + ".bias", layers[l].bias);
    }
}

Layer glorot_layer(Index fan_in, Index fan_out, Rng& rng) {
    Layer layer;
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    layer.weight.resize(fan_in, fan_out);
    for (Index c = 0; c < fan_out; ++c) {
        for (Index r = 0; r < fan_in; ++r) {
            layer.weight(r, c) = uniform(rng, -limit, limit);
        }
    }
    layer.bias = Matrix::Zero(1, fan_out);
    return layer;
}

std::vector<Layer> zero_layers(const std::vector<Layer>& layers) {
    std::vector<Layer> out;
    out.reserve(layers.size());
    for (const auto& l : layers) {
        out.push_back(Layer{Matrix::Zero(l.weight.rows(), l.weight.cols()), Matrix::Zero(1, l.bias.cols())});
    }
    return out;
}

Matrix stack_forward(const Matrix& x, const SparseMatrix* a_hat, const std::vector<Layer>& layers, StackCache* cache) {
    if (cache) {
        cache->inputs.clear();
        cache->preacts.clear();
    }
    Matrix h = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        if (h.cols() != layer.weight.rows()) {
            throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(l) + " expects " +
                                                      std::to_string(layer.weight.rows()) + " inputs, got " +
                                                      std::to_string(h.cols()));
        }
        Matrix pre;
        if (a_hat) {
            if (a_hat->rows() != h.rows()) {
                throw Error(ErrorCode::ShapeMismatch, "graph has " + std::to_string(a_hat->rows()) +
                                                          " nodes but features have " + std::to_string(h.rows()) +
                                                          " rows");
            }
            const Matrix projected = h * layer.weight;
            pre = (*a_hat) * projected;
        } else {
            pre = h * layer.weight;
        }
        pre.rowwise() += layer.bias.row(0);
        if (cache) {
            cache->inputs.push_back(h);
            cache->preacts.push_back(pre);
        }
        h = (l + 1 < layers.size()) ? Matrix(pre.cwiseMax(0.0)) : pre;
    }
    return h;
}

}

void ModelParams::for_each(const std::function<void(const std::string&, Matrix&)>& fn) {
    visit_layers(gnn_tra, "gnn_tra", fn);
    visit_layers(gnn_mor, "gnn_mor", fn);
    visit_layers(fusion, "fusion", fn);
    visit_layers(decoder, "decoder", fn);
}

void ModelParams::for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const {
    auto& self = const_cast<ModelParams&>(*this);
    self.for_each([&fn](const std::string& name, Matrix& m) { fn(name, m); });
}

ModelParams ModelParams::zeros_like() const {
    return ModelParams{zero_layers(gnn_tra), zero_layers(gnn_mor), zero_layers(fusion), zero_layers(decoder)};
}

Index ModelParams::parameter_count() const {
    Index total = 0;
    for_each([&total](const std::string&, const Matrix& m) { total += m.size(); });
    return total;
}

bool ModelParams::all_finite() const {
    bool ok = true;
    for_each([&ok](const std::string&, const Matrix& m) { ok = ok && m.allFinite(); });
    return ok;
}

ModelParams init_params(const NetworkShape& shape, Rng& rng) {
    require(shape.n_genes >= 1 && shape.d_emb >= 1 && shape.n_mlp >= 1 && shape.gcn_depth >= 1,
            ErrorCode::OutOfRange, "network dimensions must be positive");
    const Index d = shape.d_emb;
    ModelParams params;
    auto encoder = [&](Index in) {
        std::vector<Layer> layers;
        for (int l = 0; l < shape.gcn_depth; ++l) {
            layers.push_back(glorot_layer(l == 0 ? in : d, d, rng));
        }
        return layers;
    };
    params.gnn_tra = encoder(shape.n_genes);
    if (shape.n_mor > 0) {
        params.gnn_mor = encoder(shape.n_mor);
    }
    const Index fused_in = (shape.n_mor > 0 && shape.fusion_mode == FusionMode::concat) ? 2 * d : d;
    for (int l = 0; l < shape.n_mlp; ++l) {
        params.fusion.push_back(glorot_layer(l == 0 ? fused_in : d, d, rng));
    }
    params.decoder.push_back(glorot_layer(d, shape.n_genes, rng));
    return params;
}

SparseMatrix normalized_adjacency(const NeighborGraph& graph) {
    const Index n = graph.n;
    std::vector<double> degree(static_cast<std::size_t>(n), 1.0);
    for (Index i = 0; i < n; ++i) {
        degree[static_cast<std::size_t>(i)] += static_cast<double>(graph.neighbors[static_cast<std::size_t>(i)].size());
    }
    std::vector<Eigen::Triplet<double>> entries;
    entries.reserve(static_cast<std::size_t>(n + graph.count_edges()));
    for (Index i = 0; i < n; ++i) {
        const double di = degree[static_cast<std::size_t>(i)];
        entries.emplace_back(i, i, 1.0 / di);
        for (Index j : graph.neighbors[static_cast<std::size_t>(i)]) {
            entries.emplace_back(i, j, 1.0 / std::sqrt(di * degree[static_cast<std::size_t>(j)]));
        }
    }
    SparseMatrix a_hat(n, n);
    a_hat.setFromTriplets(entries.begin(), entries.end());
    return a_hat;
}

Matrix gcn_forward(const Matrix& x, const SparseMatrix& a_hat, const std::vector<Layer>& layers, StackCache* cache) {
    return stack_forward(x, &a_hat, layers, cache);
}

Matrix gcn_forward(const Matrix& x, const NeighborGraph& graph, const std::vector<Layer>& layers, StackCache* cache) {
    require(graph.n == x.rows(), ErrorCode::ShapeMismatch, "graph node count differs from feature rows");
    const SparseMatrix a_hat = normalized_adjacency(graph);
    return stack_forward(x, &a_hat, layers, cache);
}

Matrix mlp_forward(const Matrix& x, const std::vector<Layer>& layers, StackCache* cache) {
    return stack_forward(x, nullptr, layers, cache);
}

Matrix stack_backward(const StackCache& cache, const SparseMatrix* a_hat, const std::vector<Layer>& layers,
                      const Matrix& grad_output, std::vector<Layer>& grads) {
    if (cache.inputs.size() != layers.size() || grads.size() != layers.size()) {
        throw Error(ErrorCode::StaleCache, "cache does not match the layer stack");
    }
    Matrix g = grad_output;
    for (std::size_t step = layers.size(); step-- > 0;) {
        const auto& pre = cache.preacts[step];
        if (g.rows() != pre.rows() || g.cols() != pre.cols()) {
            throw Error(ErrorCode::ShapeMismatch, "upstream gradient shape differs from layer output");
        }
        if (step + 1 < layers.size()) {
            g = g.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
        }
        grads[step].bias.row(0) += g.colwise().sum();
        Matrix g_projected = a_hat ? Matrix(a_hat->transpose() * g) : g;
        grads[step].weight.noalias() += cache.inputs[step].transpose() * g_projected;
        g = g_projected * layers[step].weight.transpose();
    }
    return g;
}

Matrix combine_modalities(const Matrix& y_tra, const Matrix* y_mor, double theta, FusionMode mode) {
    if (!y_mor) {
        return y_tra;
    }
    if (y_mor->rows() != y_tra.rows() || y_mor->cols() != y_tra.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "modality embeddings differ in shape");
    }
    if (mode == FusionMode::sum) {
        return theta * y_tra + (1.0 - theta) * (*y_mor);
    }
    Matrix out(y_tra.rows(), y_tra.cols() * 2);
    out << y_tra, *y_mor;
    return out;
}

FuseResult fuse_forward(const Matrix& y_tra, const Matrix* y_mor, double theta, FusionMode mode,
                        const std::vector<Layer>& fusion, StackCache* cache) {
    FuseResult out;
    out.combined = combine_modalities(y_tra, y_mor, theta, mode);
    out.z = mlp_forward(out.combined, fusion, cache);
    return out;
}

Matrix decode_forward(const Matrix& z, const std::vector<Layer>& decoder, StackCache* cache) {
    return mlp_forward(z, decoder, cache);
}

/*************************************
 ***** FusionNetwork *****************
 *************************************/

FusionNetwork::FusionNetwork(const NetworkShape& shape, double theta, const NeighborGraph& spatial, Rng& init_rng)
    : FusionNetwork(shape, theta, spatial, init_params(shape, init_rng)) {}

FusionNetwork::FusionNetwork(const NetworkShape& shape, double theta, const NeighborGraph& spatial, ModelParams params)
    : shape_(shape), theta_(theta), a_hat_(normalized_adjacency(spatial)), params_(std::move(params)) {
    require(theta >= 0 && theta <= 1, ErrorCode::OutOfRange, "theta must lie in [0,1]");
    require((shape.n_mor > 0) == !params_.gnn_mor.empty(), ErrorCode::ShapeMismatch,
            "morphology encoder presence does not match the network shape");
    grads_ = params_.zeros_like();
}

namespace {

Matrix apply_dropout(const Matrix& x, double p, Rng& rng) {
    Matrix out(x.rows(), x.cols());
    const double keep_scale = 1.0 / (1.0 - p);
    for (Index c = 0; c < x.cols(); ++c) {
        for (Index r = 0; r < x.rows(); ++r) {
            out(r, c) = uniform01(rng) < p ? 0.0 : x(r, c) * keep_scale;
        }
    }
    return out;
}

}

ForwardPass FusionNetwork::forward(const NetworkInputs& inputs, const ForwardOptions& options) const {
    require(inputs.tra != nullptr, ErrorCode::InvalidArgument, "expression input is required");
    require((inputs.mor != nullptr) == (shape_.n_mor > 0), ErrorCode::ShapeMismatch,
            "morphology input presence does not match the network shape");
    const bool drop = options.dropout > 0.0;
    require(!drop || options.rng != nullptr, ErrorCode::InvalidArgument, "dropout needs a random generator");

    ForwardPass pass;
    pass.version = version_;

    const Matrix tra_in = drop ? apply_dropout(*inputs.tra, options.dropout, *options.rng) : *inputs.tra;
    pass.y_tra = gcn_forward(tra_in, a_hat_, params_.gnn_tra, &pass.enc_tra);
    if (inputs.mor) {
        const Matrix mor_in = drop ? apply_dropout(*inputs.mor, options.dropout, *options.rng) : *inputs.mor;
        pass.y_mor = gcn_forward(mor_in, a_hat_, params_.gnn_mor, &pass.enc_mor);
    }

    auto fused = fuse_forward(pass.y_tra, pass.y_mor ? &*pass.y_mor : nullptr, theta_, shape_.fusion_mode,
                              params_.fusion, &pass.fusion);
    pass.combined = std::move(fused.combined);
    pass.z = std::move(fused.z);
    pass.x_hat = decode_forward(pass.z, params_.decoder, &pass.decoder);
    return pass;
}

void FusionNetwork::backward(const ForwardPass& pass, const Upstream& upstream) {
    if (pass.version != version_) {
        throw Error(ErrorCode::StaleCache, "parameters changed since this forward pass");
    }
    const Index n = pass.z.rows();
    const Index d = pass.z.cols();

    Matrix grad_z = upstream.z.size() ? upstream.z : Matrix::Zero(n, d);
    if (grad_z.rows() != n || grad_z.cols() != d) {
        throw Error(ErrorCode::ShapeMismatch, "gradient with respect to z has the wrong shape");
    }
    if (upstream.x_hat.size()) {
        grad_z += stack_backward(pass.decoder, nullptr, params_.decoder, upstream.x_hat, grads_.decoder);
    }

    const Matrix grad_combined = stack_backward(pass.fusion, nullptr, params_.fusion, grad_z, grads_.fusion);

    Matrix grad_y_tra;
    Matrix grad_y_mor;
    if (!pass.y_mor) {
        grad_y_tra = grad_combined;
    } else if (shape_.fusion_mode == FusionMode::sum) {
        grad_y_tra = theta_ * grad_combined;
        grad_y_mor = (1.0 - theta_) * grad_combined;
    } else {
        grad_y_tra = grad_combined.leftCols(pass.y_tra.cols());
        grad_y_mor = grad_combined.rightCols(pass.y_mor->cols());
    }
    if (upstream.y_tra.size()) {
        grad_y_tra += upstream.y_tra;
    }
    stack_backward(pass.enc_tra, &a_hat_, params_.gnn_tra, grad_y_tra, grads_.gnn_tra);

    if (pass.y_mor) {
        if (upstream.y_mor.size()) {
            grad_y_mor += upstream.y_mor;
        }
        stack_backward(pass.enc_mor, &a_hat_, params_.gnn_mor, grad_y_mor, grads_.gnn_mor);
    }
}

void FusionNetwork::zero_grad() {
    grads_.for_each([](const std::string&, Matrix& m) { m.setZero(); });
}

EmbeddingSet FusionNetwork::embed(const NetworkInputs& inputs) const {
    auto pass = forward(inputs);
    EmbeddingSet out;
    out.y_tra = std::move(pass.y_tra);
    out.y_mor = std::move(pass.y_mor);
    out.z = std::move(pass.z);
    out.x_hat = std::move(pass.x_hat);
    return out;
}

/*************************************
 ***** Checkpoints *******************
 *************************************/

void save_checkpoint(const std::filesystem::path& path, const NetworkShape& shape, double theta,
                     const ModelParams& params) {
    json doc;
    doc["format"] = checkpoint_format;
    doc["shape"] = {{"n_genes", shape.n_genes},
                    {"n_mor", shape.n_mor},
                    {"d_emb", shape.d_emb},
                    {"n_mlp", shape.n_mlp},
                    {"gcn_depth", shape.gcn_depth},
                    {"fusion_mode", shape.fusion_mode == FusionMode::sum ? "sum" : "concat"}};
    doc["theta"] = theta;
    json tensors = json::array();
    params.for_each([&tensors](const std::string& name, const Matrix& m) {
        std::vector<double> data;
        data.reserve(static_cast<std::size_t>(m.size()));
        for (Index r = 0; r < m.rows(); ++r) {
            for (Index c = 0; c < m.cols(); ++c) {
                data.push_back(m(r, c));
            }
        }
        tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"data", data}});
    });
    doc["tensors"] = tensors;
    write_json(path, doc);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const json doc = read_json(path);
    if (!doc.is_object() || doc.value("format", "") != checkpoint_format) {
        throw Error(ErrorCode::InvalidArgument, path.string() + " is not a " + checkpoint_format + " checkpoint");
    }
    Checkpoint ckpt;
    const auto& s = doc.at("shape");
    ckpt.shape.n_genes = s.at("n_genes").get<Index>();
    ckpt.shape.n_mor = s.at("n_mor").get<Index>();
    ckpt.shape.d_emb = s.at("d_emb").get<int>();
    ckpt.shape.n_mlp = s.at("n_mlp").get<int>();
    ckpt.shape.gcn_depth = s.at("gcn_depth").get<int>();
    ckpt.shape.fusion_mode = s.at("fusion_mode").get<std::string>() == "concat" ? FusionMode::concat : FusionMode::sum;
    ckpt.theta = doc.at("theta").get<double>();

    Rng unused(0);
    ckpt.params = init_params(ckpt.shape, unused);
    std::map<std::string, const json*> by_name;
    for (const auto& t : doc.at("tensors")) {
        by_name[t.at("name").get<std::string>()] = &t;
    }
    ckpt.params.for_each([&](const std::string& name, Matrix& m) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw Error(ErrorCode::InvalidArgument, "checkpoint lacks tensor " + name);
        }
        const json& t = *it->second;
        const auto shape = t.at("shape").get<std::vector<Index>>();
        const auto data = t.at("data").get<std::vector<double>>();
        if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols() ||
            static_cast<Index>(data.size()) != m.size()) {
            throw Error(ErrorCode::ShapeMismatch, "checkpoint tensor " + name + " has the wrong shape");
        }
        for (Index r = 0; r < m.rows(); ++r) {
            for (Index c = 0; c < m.cols(); ++c) {
                m(r, c) = data[static_cast<std::size_t>(r * m.cols() + c)];
            }
        }
    });
    return ckpt;
}

}
