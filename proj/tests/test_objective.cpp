#include "doctest.h"

#include "test_util.hpp"
#include "topofuse/objective.hpp"
#include "topofuse/synth.hpp"

#include <cmath>

using namespace topofuse;
using testutil::code_of;

namespace {

PairBatch single_pair(Index a, Index b, bool h, const Matrix& payload) {
    PairBatch batch;
    batch.anchors = {a};
    batch.partners = {b};
    batch.h = {static_cast<std::uint8_t>(h)};
    batch.aug_payload = payload;
    batch.r_u = {0.0};
    return batch;
}

std::vector<Matrix*> tensors(ModelParams& p) {
    std::vector<Matrix*> out;
    p.for_each([&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
}

std::vector<const Matrix*> tensors(const ModelParams& p) {
    std::vector<const Matrix*> out;
    p.for_each([&](const std::string&, const Matrix& m) { out.push_back(&m); });
    return out;
}

PreprocessedData small_synth(int domains, int per_domain, bool with_mor) {
    SynthSpec spec;
    spec.n_domains = domains;
    spec.spots_per_domain = per_domain;
    spec.grid_rows = 5;
    spec.genes = 24;
    spec.mor_dims = 6;
    const auto data = generate(spec).data;
    RunConfig cfg;
    cfg.tau = 1;
    cfg.n_pcs_mor = 4;
    auto pre = preprocess(data, cfg);
    if (!with_mor) {
        pre.mor.reset();
    }
    return pre;
}

}

TEST_CASE("kernel examples") {
    Vector a(3);
    a << 0.3, -1, 2;
    CHECK(kappa(a, a, 0.05) == 1.0);
    CHECK(kappa_sq(1.0, 1.0) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(kappa_sq(0.05, 0.05) == doctest::Approx(std::pow(2.0, -21)).epsilon(1e-12));

    double prev = 1.0;
    for (int i = 1; i <= 50; ++i) {
        const double k = kappa_sq(0.1 * i, 0.7);
        CHECK(k < prev);
        CHECK(k > 0.0);
        prev = k;
    }
    Vector b(2);
    CHECK(code_of([&] { kappa(a, b, 1.0); }) == ErrorCode::ShapeMismatch);
    CHECK(code_of([&] { kappa(a, a, 0.0); }) == ErrorCode::OutOfRange);
}

TEST_CASE("prior examples") {
    Vector y(1), far(1);
    y << 0;
    far << 1;
    CHECK(topo_prior(y, y, true, 2.0, 1.0) == 1.0);
    CHECK(topo_prior(y, far, false, 2.0, 1.0) == doctest::Approx(0.25));
    // e^2 * 0.25 exceeds 1.
    CHECK(topo_prior(y, far, true, 2.0, 1.0) == 1.0);
    far << 2;
    const double k = 1.0 / 25.0;
    CHECK(topo_prior(y, far, true, 1.0, 1.0) == doctest::Approx(std::exp(1.0) * k));
    CHECK(topo_prior(y, far, true, 0.0, 1.0) == doctest::Approx(k));
    CHECK(code_of([&] { topo_prior(y, far, true, -1.0, 1.0); }) == ErrorCode::OutOfRange);

    CHECK(binary_entropy(0.0) == 0.0);
    CHECK(binary_entropy(1.0) == 0.0);
    CHECK(binary_entropy(0.5) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("topology loss examples") {
    const KernelConfig cfg{1.0};
    SUBCASE("target one, similarity one half") {
        Matrix z(2, 1), y = Matrix::Zero(2, 1);
        z << 0, std::sqrt(std::sqrt(2.0) - 1.0);
        const auto loss = topo_loss(single_pair(0, 1, false, z), {&z, &z, &y, &y}, cfg, 2.0);
        CHECK(loss.value == doctest::Approx(-std::log(0.5)).epsilon(1e-12));
        CHECK(loss.entropy_floor == 0.0);
    }
    SUBCASE("matching similarity and target reaches the entropy floor") {
        Rng rng(2);
        const Matrix z = testutil::random_matrix(5, 3, rng);
        PairBatch batch;
        for (Index a = 0; a < 5; ++a) {
            for (Index b = 0; b < 5; ++b) {
                if (a != b) {
                    batch.anchors.push_back(a);
                    batch.partners.push_back(b);
                    batch.h.push_back(0);
                }
            }
        }
        batch.aug_payload = z;
        const auto loss = topo_loss(batch, {&z, &z, &z, &z}, cfg, 2.0);
        CHECK(loss.value == doctest::Approx(loss.entropy_floor).epsilon(1e-12));
        CHECK(loss.grad_z.cwiseAbs().maxCoeff() < 1e-12);

        const Matrix other = testutil::random_matrix(5, 3, rng);
        CHECK(topo_loss(batch, {&other, &other, &z, &z}, cfg, 2.0).value > loss.entropy_floor);
    }
    SUBCASE("clamped similarity passes no gradient") {
        Matrix z(2, 2);
        z << 0, 0, 0, 0;
        const Matrix y = z;
        const auto loss = topo_loss(single_pair(0, 1, false, z), {&z, &z, &y, &y}, cfg, 2.0);
        CHECK(loss.grad_z.isZero());
        CHECK(loss.value == doctest::Approx(-std::log(1.0 - 1e-7)));

        Matrix far(2, 1), y1 = Matrix::Zero(2, 1);
        far << 0, 1e4;
        const auto low = topo_loss(single_pair(0, 1, false, far), {&far, &far, &y1, &y1}, cfg, 2.0);
        CHECK(low.value == doctest::Approx(-std::log(1e-7)));
        CHECK(low.grad_z.isZero());
    }
    SUBCASE("incomplete view and bad indices") {
        Matrix z = Matrix::Zero(2, 1);
        CHECK(code_of([&] { topo_loss(single_pair(0, 1, false, z), {&z, nullptr, &z, &z}, cfg, 2.0); }) ==
              ErrorCode::InvalidArgument);
        CHECK(code_of([&] { topo_loss(single_pair(0, 5, false, z), {&z, &z, &z, &z}, cfg, 2.0); }) ==
              ErrorCode::ShapeMismatch);
    }
}

TEST_CASE("topology loss gradient matches central differences") {
    Rng rng(6);
    const Matrix y = testutil::random_matrix(6, 3, rng);
    const Matrix y_aug = testutil::random_matrix(6, 3, rng);
    Matrix z = testutil::random_matrix(6, 4, rng, 0.6);
    Matrix z_aug = testutil::random_matrix(6, 4, rng, 0.6);
    const auto graph = knn_graph(y, 2);
    const auto batch = sample_pairs(6, graph, y, 3, 0.2, rng);
    const KernelConfig cfg{1.5};

    const auto loss = topo_loss(batch, {&z, &z_aug, &y, &y_aug}, cfg, 2.0);
    const double h = 1e-5;
    double worst = 0;
    for (Matrix* target : {&z, &z_aug}) {
        const Matrix& grad = target == &z ? loss.grad_z : loss.grad_z_aug;
        for (Index r = 0; r < target->rows(); ++r) {
            for (Index c = 0; c < target->cols(); ++c) {
                (*target)(r, c) += h;
                const double plus = topo_loss(batch, {&z, &z_aug, &y, &y_aug}, cfg, 2.0).value;
                (*target)(r, c) -= 2 * h;
                const double minus = topo_loss(batch, {&z, &z_aug, &y, &y_aug}, cfg, 2.0).value;
                (*target)(r, c) += h;
                const double fd = (plus - minus) / (2 * h);
                worst = std::max(worst, std::abs(fd - grad(r, c)) / std::max({std::abs(fd), std::abs(grad(r, c)), 1e-6}));
            }
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("reconstruction loss examples") {
    Matrix x(1, 2), x_hat(1, 2);
    x << 1, 2;
    x_hat << 3, 2;
    const auto r = recon_loss(x, x_hat);
    CHECK(r.value == 4.0);
    CHECK(r.grad(0, 0) == 4.0);
    CHECK(r.grad(0, 1) == 0.0);

    Rng rng(7);
    const Matrix a = testutil::random_matrix(5, 3, rng);
    const Matrix b = testutil::random_matrix(5, 3, rng);
    CHECK(recon_loss(3.0 * a, 3.0 * b).value == doctest::Approx(9.0 * recon_loss(a, b).value));
    CHECK(recon_loss(a, a).value == 0.0);
    CHECK(code_of([&] { recon_loss(a, Matrix(5, 2)); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("adam first step moves each parameter by the learning rate") {
    ModelParams params;
    params.decoder.push_back(Layer{Matrix::Constant(2, 2, 1.0), Matrix::Zero(1, 2)});
    ModelParams grads = params.zeros_like();
    grads.decoder[0].weight << 3, -0.5, 1e-3, 0;
    Adam adam(params, 0.01);
    adam.step(params, grads);
    CHECK(params.decoder[0].weight(0, 0) == doctest::Approx(0.99).epsilon(1e-9));
    CHECK(params.decoder[0].weight(0, 1) == doctest::Approx(1.01).epsilon(1e-9));
    CHECK(params.decoder[0].weight(1, 0) == doctest::Approx(0.99).epsilon(1e-6));
    CHECK(params.decoder[0].weight(1, 1) == 1.0);
    CHECK(adam.steps() == 1);
    CHECK(code_of([&] { Adam(params, -1.0); }) == ErrorCode::OutOfRange);
}

TEST_CASE("full objective gradient matches central differences on every parameter") {
    Rng rng(31);
    PreprocessedData data;
    data.tra = testutil::random_matrix(6, 4, rng);
    data.mor = testutil::random_matrix(6, 3, rng);

    RunConfig cfg;
    cfg.d_emb = 5;
    cfg.n_mlp = 2;
    cfg.nu = 0.5;
    cfg.lambda_ = 0.5;
    cfg.theta = 0.7;

    // A ring has no two nodes with the same closed neighbourhood, so Â has no repeated rows.
    NeighborGraph spatial;
    spatial.n = 6;
    spatial.kind = GraphKind::spatial_eps;
    for (Index i = 0; i < 6; ++i) {
        std::vector<Index> nb{(i + 5) % 6, (i + 1) % 6};
        std::sort(nb.begin(), nb.end());
        spatial.neighbors.push_back(nb);
    }

    FusionNetwork net(network_shape(data, cfg), cfg.theta, spatial, rng);
    // Positive biases keep every hidden unit active on some spots.
    net.mutable_params().for_each([&](const std::string& name, Matrix& m) {
        if (name.find("bias") != std::string::npos) {
            m = testutil::random_matrix(m.rows(), m.cols(), rng, 0.3).array() + 0.5;
        }
    });
    EpochBatches batches{sample_pairs(6, knn_graph(data.tra, 2), data.tra, 2, 0.9, rng),
                         sample_pairs(6, knn_graph(*data.mor, 2), *data.mor, 2, 0.9, rng)};

    net.zero_grad();
    const auto analytic_loss = objective_step(net, data, batches, cfg, nullptr, true);
    const ModelParams analytic = net.grads();

    // Targets are computed once from the unperturbed modality embeddings and held fixed.
    const auto base0 = net.forward({&data.tra, &*data.mor});
    const auto tra0 = net.forward({&batches.tra.aug_payload, &*data.mor});
    const auto mor0 = net.forward({&data.tra, &batches.mor->aug_payload});
    const KernelConfig kernel{cfg.nu};

    auto fixed_target_loss = [&]() {
        const auto base = net.forward({&data.tra, &*data.mor});
        const auto tra = net.forward({&batches.tra.aug_payload, &*data.mor});
        const auto mor = net.forward({&data.tra, &batches.mor->aug_payload});
        const double lt = topo_loss(batches.tra, {&base.z, &tra.z, &base0.y_tra, &tra0.y_tra}, kernel, cfg.alpha).value;
        const double lm =
            topo_loss(*batches.mor, {&base.z, &mor.z, &*base0.y_mor, &*mor0.y_mor}, kernel, cfg.alpha).value;
        return lt + lm + cfg.lambda_ * recon_loss(data.tra, base.x_hat).value;
    };
    CHECK(fixed_target_loss() == doctest::Approx(analytic_loss.total).epsilon(1e-12));

    // No pair may sit at the clamp, otherwise the check would be vacuous there.
    for (const auto* b : {&batches.tra, &*batches.mor}) {
        const Matrix& aug = b == &batches.tra ? tra0.z : mor0.z;
        for (std::size_t p = 0; p < b->size(); ++p) {
            const Matrix& src = b->h[p] ? aug : base0.z;
            const double s = kappa_sq((base0.z.row(b->anchors[p]) - src.row(b->partners[p])).squaredNorm(), cfg.nu);
            CHECK(s > 1e-6);
            CHECK(s < 1 - 1e-6);
        }
    }

    const auto grads = tensors(analytic);
    const double h = 1e-5;
    double worst = 0;
    Index checked = 0;
    for (std::size_t t = 0; t < grads.size(); ++t) {
        for (Index r = 0; r < grads[t]->rows(); ++r) {
            for (Index c = 0; c < grads[t]->cols(); ++c) {
                auto nudge = [&](double delta) { (*tensors(net.mutable_params())[t])(r, c) += delta; };
                nudge(h);
                const double plus = fixed_target_loss();
                nudge(-2 * h);
                const double minus = fixed_target_loss();
                nudge(h);
                const double fd = (plus - minus) / (2 * h);
                const double g = (*grads[t])(r, c);
                worst = std::max(worst, std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6}));
                ++checked;
            }
        }
    }
    CHECK(checked == net.params().parameter_count());
    CHECK(worst < 1e-4);
}

TEST_CASE("zero reconstruction weight leaves the decoder without gradient") {
    const auto data = small_synth(2, 10, true);
    RunConfig cfg;
    cfg.lambda_ = 0.0;
    cfg.d_emb = 8;
    cfg.nu = 2.0;
    Rng rng(3);
    const auto spatial = knn_graph(data.tra, 3);
    FusionNetwork net(network_shape(data, cfg), cfg.theta, spatial, rng);
    EpochBatches batches{sample_pairs(20, knn_graph(data.tra, 3), data.tra, 2, 0.1, rng),
                         sample_pairs(20, knn_graph(*data.mor, 3), *data.mor, 2, 0.1, rng)};
    const auto loss = objective_step(net, data, batches, cfg, nullptr, true);
    CHECK(loss.total == doctest::Approx(loss.topo_tra + loss.topo_mor));
    CHECK(net.grads().decoder[0].weight.isZero());
    CHECK(net.grads().decoder[0].bias.isZero());
    CHECK_FALSE(net.grads().gnn_tra[0].weight.isZero());
}

TEST_CASE("training behaviour") {
    RunConfig cfg;
    cfg.d_emb = 16;
    cfg.k_tr = 5;
    cfg.k_mo = 5;
    const auto data = small_synth(3, 20, true);
    Matrix coords(60, 2);
    for (Index i = 0; i < 60; ++i) {
        coords(i, 0) = static_cast<double>(i / 5);
        coords(i, 1) = static_cast<double>(i % 5);
    }
    const auto spatial = build_spatial_graph(coords, 1.0);

    SUBCASE("zero learning rate keeps the initial parameters") {
        cfg.lr = 0.0;
        cfg.epochs = 3;
        const auto out = train(data, spatial, cfg);
        Rng rng(cfg.seed);
        const auto init = init_params(network_shape(data, cfg), rng);
        const auto a = tensors(init);
        const auto b = tensors(out.state.network.params());
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(*a[i] == *b[i]);
        }
    }
    SUBCASE("loss decreases and the run is bitwise reproducible") {
        cfg.epochs = 200;
        const auto first = train(data, spatial, cfg);
        REQUIRE(first.state.history.size() == 200);
        CHECK(first.state.history.back().total < first.state.history.front().total);
        CHECK(first.state.history.front().epoch == 1);
        CHECK(first.embeddings.z.rows() == 60);
        CHECK(first.embeddings.z.cols() == 16);

        cfg.epochs = 20;
        const auto a = train(data, spatial, cfg);
        const auto b = train(data, spatial, cfg);
        CHECK(a.embeddings.z == b.embeddings.z);
        for (std::size_t e = 0; e < a.state.history.size(); ++e) {
            CHECK(a.state.history[e].total == b.state.history[e].total);
        }
    }
    SUBCASE("expression-only input") {
        cfg.epochs = 5;
        const auto no_mor = small_synth(3, 20, false);
        const auto out = train(no_mor, spatial, cfg);
        CHECK_FALSE(out.embeddings.y_mor.has_value());
        for (const auto& rec : out.state.history) {
            CHECK(rec.l_topo_mor == 0.0);
        }
    }
    SUBCASE("invalid settings") {
        cfg.epochs = 0;
        CHECK(code_of([&] { train(data, spatial, cfg); }) == ErrorCode::OutOfRange);
    }
}
