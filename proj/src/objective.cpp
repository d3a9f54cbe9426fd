#include "topofuse/objective.hpp"
#include "topofuse/error.hpp"

#include <algorithm>
#include <cmath>

namespace topofuse {

void KernelConfig::validate() const {
    require(nu > 0, ErrorCode::OutOfRange, "nu must be positive");
    require(clamp_eps > 0 && clamp_eps < 0.5, ErrorCode::OutOfRange, "clamp_eps must lie in (0, 0.5)");
}

double kappa_sq(double d2, double nu) {
    return std::exp(-((nu + 1.0) / nu) * std::log1p(d2 / nu));
}

double kappa(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, double nu) {
    require(a.size() == b.size(), ErrorCode::ShapeMismatch, "kernel arguments differ in length");
    require(nu > 0, ErrorCode::OutOfRange, "nu must be positive");
    return kappa_sq((a - b).squaredNorm(), nu);
}

namespace {

double prior_from_kernel(double k, bool h, double alpha) {
    return h ? std::min(1.0, std::exp(alpha) * k) : k;
}

}

double topo_prior(const Eigen::Ref<const Vector>& y_i, const Eigen::Ref<const Vector>& y_j, bool h, double alpha,
                  double nu) {
    require(alpha >= 0, ErrorCode::OutOfRange, "alpha must be nonnegative");
    return prior_from_kernel(kappa(y_i, y_j, nu), h, alpha);
}

double binary_entropy(double t) {
    double out = 0;
    if (t > 0) {
        out -= t * std::log(t);
    }
    if (t < 1) {
        out -= (1 - t) * std::log1p(-t);
    }
    return out;
}

TopoLoss topo_loss(const PairBatch& batch, const PairView& view, const KernelConfig& cfg, double alpha) {
    cfg.validate();
    require(view.z && view.z_aug && view.y && view.y_aug, ErrorCode::InvalidArgument, "pair view is incomplete");
    const Matrix& z = *view.z;
    const Matrix& z_aug = *view.z_aug;
    const Matrix& y = *view.y;
    const Matrix& y_aug = *view.y_aug;
    require(z.rows() == y.rows() && z_aug.rows() == y_aug.rows() && z.cols() == z_aug.cols() &&
                y.cols() == y_aug.cols(),
            ErrorCode::ShapeMismatch, "pair view matrices disagree in shape");

    TopoLoss out;
    out.grad_z = Matrix::Zero(z.rows(), z.cols());
    out.grad_z_aug = Matrix::Zero(z_aug.rows(), z_aug.cols());

    const double nu = cfg.nu;
    const double exponent = (nu + 1.0) / nu;
    const double lo = cfg.clamp_eps;
    const double hi = 1.0 - cfg.clamp_eps;

    for (std::size_t p = 0; p < batch.size(); ++p) {
        const Index a = batch.anchors[p];
        const Index b = batch.partners[p];
        const bool h = batch.h[p] != 0;
        const Matrix& zb_src = h ? z_aug : z;
        const Matrix& yb_src = h ? y_aug : y;
        require(a >= 0 && a < z.rows() && b >= 0 && b < zb_src.rows(), ErrorCode::ShapeMismatch,
                "pair index out of range");

        const double target = prior_from_kernel(kappa_sq((y.row(a) - yb_src.row(b)).squaredNorm(), nu), h, alpha);

        const auto diff = (z.row(a) - zb_src.row(b)).eval();
        const double d2 = diff.squaredNorm();
        const double raw = kappa_sq(d2, nu);
        const double s = std::clamp(raw, lo, hi);

        out.value -= target * std::log(s) + (1.0 - target) * std::log1p(-s);
        out.entropy_floor += binary_entropy(target);

        if (raw > lo && raw < hi) {
            const double dloss_ds = -target / s + (1.0 - target) / (1.0 - s);
            const double ds_dd2 = -(exponent / nu) * raw / (1.0 + d2 / nu);
            const double scale = 2.0 * dloss_ds * ds_dd2;
            out.grad_z.row(a) += scale * diff;
            if (h) {
                out.grad_z_aug.row(b) -= scale * diff;
            } else {
                out.grad_z.row(b) -= scale * diff;
            }
        }
    }
    return out;
}

ReconLoss recon_loss(const Matrix& x, const Matrix& x_hat) {
    require(x.rows() == x_hat.rows() && x.cols() == x_hat.cols(), ErrorCode::ShapeMismatch,
            "reconstruction shape differs from the input");
    require(x.rows() > 0, ErrorCode::InvalidArgument, "no spots to reconstruct");
    const double n = static_cast<double>(x.rows());
    const Matrix residual = x_hat - x;
    ReconLoss out;
    out.value = residual.squaredNorm() / n;
    out.grad = (2.0 / n) * residual;
    return out;
}

/*************************************
 ***** Optimizer *********************
 *************************************/

Adam::Adam(const ModelParams& like, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(like.zeros_like()), v_(like.zeros_like()) {
    require(lr >= 0, ErrorCode::OutOfRange, "learning rate must be nonnegative");
}

void Adam::step(ModelParams& params, const ModelParams& grads) {
    ++t_;
    const double correction1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double correction2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));

    std::vector<Matrix*> p_list, m_list, v_list;
    std::vector<const Matrix*> g_list;
    params.for_each([&](const std::string&, Matrix& m) { p_list.push_back(&m); });
    m_.for_each([&](const std::string&, Matrix& m) { m_list.push_back(&m); });
    v_.for_each([&](const std::string&, Matrix& m) { v_list.push_back(&m); });
    grads.for_each([&](const std::string&, const Matrix& m) { g_list.push_back(&m); });
    require(p_list.size() == g_list.size() && p_list.size() == m_list.size(), ErrorCode::ShapeMismatch,
            "optimizer state does not match the parameters");

    for (std::size_t k = 0; k < p_list.size(); ++k) {
        Matrix& p = *p_list[k];
        Matrix& m = *m_list[k];
        Matrix& v = *v_list[k];
        const Matrix& g = *g_list[k];
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
        p.array() -= lr_ * (m.array() / correction1) / ((v.array() / correction2).sqrt() + eps_);
    }
}

/*************************************
 ***** Training **********************
 *************************************/

StepLoss objective_step(FusionNetwork& network, const PreprocessedData& data, const EpochBatches& batches,
                        const RunConfig& cfg, Rng* dropout_rng, bool accumulate) {
    require(data.mor.has_value() == batches.mor.has_value(), ErrorCode::InvalidArgument,
            "morphology batch presence does not match the data");
    ForwardOptions options;
    if (dropout_rng && cfg.dropout > 0) {
        options.dropout = cfg.dropout;
        options.rng = dropout_rng;
    }
    const Matrix* mor = data.mor ? &*data.mor : nullptr;
    const KernelConfig kernel{cfg.nu};

    auto base = network.forward({&data.tra, mor}, options);
    auto tra_view = network.forward({&batches.tra.aug_payload, mor}, options);
    auto loss_tra = topo_loss(batches.tra, {&base.z, &tra_view.z, &base.y_tra, &tra_view.y_tra}, kernel, cfg.alpha);

    std::optional<ForwardPass> mor_view;
    std::optional<TopoLoss> loss_mor;
    if (mor) {
        mor_view = network.forward({&data.tra, &batches.mor->aug_payload}, options);
        loss_mor = topo_loss(*batches.mor, {&base.z, &mor_view->z, &*base.y_mor, &*mor_view->y_mor}, kernel, cfg.alpha);
    }
    auto recon = recon_loss(data.tra, base.x_hat);

    StepLoss out;
    out.topo_tra = loss_tra.value;
    out.topo_mor = loss_mor ? loss_mor->value : 0.0;
    out.recon = recon.value;
    out.total = out.topo_tra + out.topo_mor + cfg.lambda_ * out.recon;

    if (accumulate) {
        Upstream up;
        up.z = loss_tra.grad_z;
        if (loss_mor) {
            up.z += loss_mor->grad_z;
        }
        up.x_hat = cfg.lambda_ * recon.grad;
        network.backward(base, up);
        network.backward(tra_view, Upstream{loss_tra.grad_z_aug, {}, {}, {}});
        if (mor_view) {
            network.backward(*mor_view, Upstream{loss_mor->grad_z_aug, {}, {}, {}});
        }
    }
    return out;
}

NetworkShape network_shape(const PreprocessedData& data, const RunConfig& cfg) {
    NetworkShape shape;
    shape.n_genes = data.tra.cols();
    shape.n_mor = data.mor ? data.mor->cols() : 0;
    shape.d_emb = cfg.d_emb;
    shape.n_mlp = cfg.n_mlp;
    shape.fusion_mode = cfg.fusion_mode;
    return shape;
}

TrainOutcome train(const PreprocessedData& data, const NeighborGraph& spatial, const RunConfig& cfg) {
    const Index n = data.tra.rows();
    require(n >= 2, ErrorCode::InvalidArgument, "training needs at least two spots");
    require(spatial.n == n, ErrorCode::ShapeMismatch, "spatial graph size differs from the number of spots");
    require(!data.mor || data.mor->rows() == n, ErrorCode::ShapeMismatch, "morphology rows differ from N");
    require(cfg.epochs >= 1 && cfg.lr >= 0 && cfg.graph_refresh >= 1 && cfg.n_neg >= 1 && cfg.k_tr >= 1 &&
                cfg.k_mo >= 1 && cfg.dropout >= 0 && cfg.dropout < 1,
            ErrorCode::OutOfRange, "invalid training configuration");

    Rng rng(cfg.seed);
    FusionNetwork network(network_shape(data, cfg), cfg.theta, spatial, rng);
    Adam optimizer(network.params(), cfg.lr);
    const int k_tr = static_cast<int>(std::min<Index>(cfg.k_tr, n - 1));
    const int k_mo = static_cast<int>(std::min<Index>(cfg.k_mo, n - 1));

    NeighborGraph graph_tra = knn_graph(data.tra, k_tr);
    std::optional<NeighborGraph> graph_mor;
    if (data.mor) {
        graph_mor = knn_graph(*data.mor, k_mo);
    }

    TrainState state{std::move(network), std::move(optimizer), 0, {}, rng, std::move(graph_tra), std::move(graph_mor), 0};
    const Matrix* mor = data.mor ? &*data.mor : nullptr;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0 && epoch % cfg.graph_refresh == 0) {
            auto current = state.network.embed({&data.tra, mor});
            state.graph_tra = knn_graph(current.y_tra, k_tr);
            if (mor) {
                state.graph_mor = knn_graph(*current.y_mor, k_mo);
            }
        }

        EpochBatches batches{sample_pairs(n, state.graph_tra, data.tra, cfg.n_neg, cfg.r_u_tr, state.rng), std::nullopt};
        state.augment_fallbacks += batches.tra.fallbacks;
        if (mor) {
            batches.mor = sample_pairs(n, *state.graph_mor, *mor, cfg.n_neg, cfg.r_u_mo, state.rng);
            state.augment_fallbacks += batches.mor->fallbacks;
        }

        state.network.zero_grad();
        const auto loss = objective_step(state.network, data, batches, cfg, &state.rng, true);
        if (!std::isfinite(loss.total)) {
            throw Error(ErrorCode::NonFiniteLoss, "loss became non-finite at epoch " + std::to_string(epoch + 1));
        }
        state.history.push_back(LossRecord{epoch + 1, loss.topo_tra, loss.topo_mor, loss.recon, loss.total});
        state.optimizer.step(state.network.mutable_params(), state.network.grads());
        state.epoch = epoch + 1;
    }

    auto embeddings = state.network.embed({&data.tra, mor});
    if (!embeddings.z.allFinite()) {
        throw Error(ErrorCode::NonFiniteLoss, "final embedding is not finite");
    }
    return TrainOutcome{std::move(state), std::move(embeddings)};
}

}
