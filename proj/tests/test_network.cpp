#include "doctest.h"

#include "test_util.hpp"
#include "topofuse/network.hpp"

#include <cmath>

using namespace topofuse;
using testutil::code_of;

namespace {

NeighborGraph graph_from_edges(Index n, const std::vector<std::pair<Index, Index>>& edges) {
    NeighborGraph g;
    g.n = n;
    g.kind = GraphKind::spatial_eps;
    g.neighbors.assign(static_cast<std::size_t>(n), {});
    for (auto [a, b] : edges) {
        g.neighbors[static_cast<std::size_t>(a)].push_back(b);
        g.neighbors[static_cast<std::size_t>(b)].push_back(a);
    }
    for (auto& n_list : g.neighbors) {
        std::sort(n_list.begin(), n_list.end());
    }
    return g;
}

Layer identity_layer(Index d) {
    return Layer{Matrix::Identity(d, d), Matrix::Zero(1, d)};
}

double linear_functional(const ForwardPass& pass, const Upstream& up) {
    double out = (pass.z.array() * up.z.array()).sum() + (pass.x_hat.array() * up.x_hat.array()).sum();
    out += (pass.y_tra.array() * up.y_tra.array()).sum();
    if (pass.y_mor) {
        out += (pass.y_mor->array() * up.y_mor.array()).sum();
    }
    return out;
}

}

TEST_CASE("normalized adjacency of a three-node path") {
    const auto g = graph_from_edges(3, {{0, 1}, {1, 2}});
    const Matrix a_hat = Matrix(normalized_adjacency(g));
    // Degrees with self loops: 2, 3, 2.
    Matrix expected(3, 3);
    const double e = 1.0 / std::sqrt(6.0);
    expected << 0.5, e, 0, e, 1.0 / 3.0, e, 0, e, 0.5;
    CHECK((a_hat - expected).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("normalized adjacency is symmetric and has unit row sums on regular graphs") {
    Rng rng(4);
    std::vector<std::pair<Index, Index>> edges;
    for (Index i = 0; i < 20; ++i) {
        for (Index j = i + 1; j < 20; ++j) {
            if (uniform01(rng) < 0.2) {
                edges.emplace_back(i, j);
            }
        }
    }
    const Matrix a = Matrix(normalized_adjacency(graph_from_edges(20, edges)));
    CHECK((a - a.transpose()).cwiseAbs().maxCoeff() < 1e-15);

    std::vector<std::pair<Index, Index>> ring;
    for (Index i = 0; i < 8; ++i) {
        ring.emplace_back(i, (i + 1) % 8);
    }
    const Matrix r = Matrix(normalized_adjacency(graph_from_edges(8, ring)));
    CHECK((r.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-15);
}

TEST_CASE("gcn examples") {
    Rng rng(8);
    const Matrix x = testutil::random_matrix(5, 3, rng);
    const auto edgeless = graph_from_edges(5, {});
    CHECK(gcn_forward(x, edgeless, {identity_layer(3)}) == x);

    Matrix twins(2, 3);
    twins << 1, -2, 3, 1, -2, 3;
    const auto pair = graph_from_edges(2, {{0, 1}});
    const std::vector<Layer> layers{Layer{testutil::random_matrix(3, 4, rng), testutil::random_matrix(1, 4, rng)},
                                    Layer{testutil::random_matrix(4, 2, rng), testutil::random_matrix(1, 2, rng)}};
    const Matrix out = gcn_forward(twins, pair, layers);
    CHECK(out.row(0) == out.row(1));

    CHECK(code_of([&] { gcn_forward(x, pair, layers); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("fusion examples") {
    Rng rng(12);
    const Matrix y_tra = testutil::random_matrix(4, 3, rng);
    const Matrix y_mor = testutil::random_matrix(4, 3, rng);
    const Matrix other_mor = testutil::random_matrix(4, 3, rng);
    const std::vector<Layer> mlp{Layer{testutil::random_matrix(3, 3, rng), testutil::random_matrix(1, 3, rng)}};

    CHECK(fuse_forward(y_tra, &y_mor, 1.0, FusionMode::sum, mlp).z ==
          fuse_forward(y_tra, &other_mor, 1.0, FusionMode::sum, mlp).z);

    const Matrix mean = fuse_forward(y_tra, &y_mor, 0.5, FusionMode::sum, {identity_layer(3)}).z;
    CHECK((mean - 0.5 * (y_tra + y_mor)).cwiseAbs().maxCoeff() < 1e-15);

    Matrix a(1, 2), b(1, 2);
    a << 1, 2;
    b << 3, -1;
    Matrix w(2, 2);
    w << 1, 0, 2, 1;
    // combined = 0.9 a + 0.1 b = (1.2, 1.7); z = combined W + 1.
    const Matrix z = fuse_forward(a, &b, 0.9, FusionMode::sum, {Layer{w, Matrix::Ones(1, 2)}}).z;
    CHECK(z(0, 0) == doctest::Approx(1.2 + 2 * 1.7 + 1));
    CHECK(z(0, 1) == doctest::Approx(1.7 + 1));

    const auto concat = combine_modalities(y_tra, &y_mor, 0.3, FusionMode::concat);
    CHECK(concat.cols() == 6);
    CHECK(concat.leftCols(3) == y_tra);
    CHECK(combine_modalities(y_tra, nullptr, 0.3, FusionMode::sum) == y_tra);
    const Matrix short_mor = testutil::random_matrix(3, 3, rng);
    CHECK(code_of([&] { combine_modalities(y_tra, &short_mor, 0.5, FusionMode::sum); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("decoder examples") {
    Rng rng(13);
    const Matrix z = testutil::random_matrix(3, 2, rng);
    CHECK(decode_forward(z, {Layer{Matrix::Zero(2, 5), Matrix::Zero(1, 5)}}).isZero());
    CHECK(decode_forward(z, {identity_layer(2)}) == z);

    Matrix one(1, 2);
    one << 1, 2;
    Matrix w(2, 3);
    w << 1, 0, -1, 2, 1, 0;
    const Matrix out = decode_forward(one, {Layer{w, Matrix::Zero(1, 3)}});
    CHECK(out(0, 0) == 5.0);
    CHECK(out(0, 1) == 2.0);
    CHECK(out(0, 2) == -1.0);
}

namespace {

struct Fixture {
    NetworkShape shape;
    NeighborGraph spatial;
    Matrix tra;
    Matrix mor;

    Fixture() {
        shape.n_genes = 4;
        shape.n_mor = 3;
        shape.d_emb = 5;
        shape.n_mlp = 2;
        spatial = graph_from_edges(6, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 5}, {1, 4}});
        Rng rng(21);
        tra = testutil::random_matrix(6, 4, rng);
        mor = testutil::random_matrix(6, 3, rng);
    }
};

}

TEST_CASE("backward is linear in the upstream gradient") {
    Fixture f;
    Rng rng(3);
    FusionNetwork net(f.shape, 0.7, f.spatial, rng);
    const auto pass = net.forward({&f.tra, &f.mor});

    net.backward(pass, Upstream{});
    bool all_zero = true;
    net.grads().for_each([&](const std::string&, const Matrix& m) { all_zero = all_zero && m.isZero(); });
    CHECK(all_zero);

    Upstream up{testutil::random_matrix(6, 5, rng), testutil::random_matrix(6, 4, rng), {}, {}};
    net.zero_grad();
    net.backward(pass, up);
    const ModelParams once = net.grads();
    net.zero_grad();
    up.z *= 2.0;
    up.x_hat *= 2.0;
    net.backward(pass, up);
    std::vector<const Matrix*> a, b;
    once.for_each([&](const std::string&, const Matrix& m) { a.push_back(&m); });
    net.grads().for_each([&](const std::string&, const Matrix& m) { b.push_back(&m); });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK((2.0 * *a[i] - *b[i]).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("backward rejects caches from older parameters") {
    Fixture f;
    Rng rng(3);
    FusionNetwork net(f.shape, 0.7, f.spatial, rng);
    const auto pass = net.forward({&f.tra, &f.mor});
    net.mutable_params().decoder[0].bias(0, 0) += 1.0;
    CHECK(code_of([&] { net.backward(pass, Upstream{}); }) == ErrorCode::StaleCache);
    CHECK(code_of([&] { net.forward({&f.tra, nullptr}); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("network gradients match central differences") {
    for (FusionMode mode : {FusionMode::sum, FusionMode::concat}) {
        Fixture f;
        f.shape.fusion_mode = mode;
        Rng rng(5);
        FusionNetwork net(f.shape, 0.6, f.spatial, rng);
        const Upstream up{testutil::random_matrix(6, 5, rng), testutil::random_matrix(6, 4, rng),
                          testutil::random_matrix(6, 5, rng), testutil::random_matrix(6, 5, rng)};
        net.backward(net.forward({&f.tra, &f.mor}), up);
        const ModelParams analytic = net.grads();

        std::vector<const Matrix*> grads;
        analytic.for_each([&](const std::string&, const Matrix& m) { grads.push_back(&m); });
        std::vector<std::string> names;
        net.params().for_each([&](const std::string& name, const Matrix&) { names.push_back(name); });

        const double h = 1e-5;
        double worst = 0;
        for (std::size_t t = 0; t < names.size(); ++t) {
            const Matrix& g = *grads[t];
            for (Index r = 0; r < g.rows(); ++r) {
                for (Index c = 0; c < g.cols(); ++c) {
                    auto nudge = [&](double delta) {
                        std::size_t k = 0;
                        net.mutable_params().for_each([&](const std::string&, Matrix& m) {
                            if (k++ == t) {
                                m(r, c) += delta;
                            }
                        });
                    };
                    nudge(h);
                    const double plus = linear_functional(net.forward({&f.tra, &f.mor}), up);
                    nudge(-2 * h);
                    const double minus = linear_functional(net.forward({&f.tra, &f.mor}), up);
                    nudge(h);
                    const double fd = (plus - minus) / (2 * h);
                    const double scale = std::max({std::abs(fd), std::abs(g(r, c)), 1e-6});
                    worst = std::max(worst, std::abs(fd - g(r, c)) / scale);
                }
            }
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("checkpoint round trip is exact") {
    Fixture f;
    Rng rng(9);
    FusionNetwork net(f.shape, 0.9, f.spatial, rng);
    testutil::TempDir dir("ckpt");
    save_checkpoint(dir / "model.json", net.shape(), net.theta(), net.params());
    const auto ckpt = load_checkpoint(dir / "model.json");
    CHECK(ckpt.theta == 0.9);
    CHECK(ckpt.shape.n_mlp == 2);
    CHECK(ckpt.shape.n_mor == 3);
    std::vector<const Matrix*> a, b;
    net.params().for_each([&](const std::string&, const Matrix& m) { a.push_back(&m); });
    ckpt.params.for_each([&](const std::string&, const Matrix& m) { b.push_back(&m); });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(*a[i] == *b[i]);
    }

    testutil::write_text(dir / "bad.json", "{\"format\": \"other\"}");
    CHECK(code_of([&] { load_checkpoint(dir / "bad.json"); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("init_params uses the Glorot bound and zero biases") {
    NetworkShape shape;
    shape.n_genes = 30;
    shape.d_emb = 10;
    Rng rng(1);
    const auto p = init_params(shape, rng);
    const double bound = std::sqrt(6.0 / 40.0);
    CHECK(p.gnn_tra[0].weight.cwiseAbs().maxCoeff() <= bound);
    CHECK(p.gnn_tra[0].bias.isZero());
    CHECK(p.gnn_mor.empty());
    CHECK(p.decoder[0].weight.rows() == 10);
    CHECK(p.decoder[0].weight.cols() == 30);
    CHECK(p.parameter_count() == (30 * 10 + 10) + (10 * 10 + 10) + (10 * 10 + 10) + (10 * 30 + 30));
}
