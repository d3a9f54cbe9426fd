#include "topofuse/synth.hpp"
#include "topofuse/error.hpp"

#include <algorithm>
#include <string>

namespace topofuse {

void SynthSpec::validate() const {
    require(n_domains >= 1, ErrorCode::OutOfRange, "n_domains must be >= 1");
    require(spots_per_domain >= 1, ErrorCode::OutOfRange, "spots_per_domain must be >= 1");
    require(grid_rows >= 1, ErrorCode::OutOfRange, "grid_rows must be >= 1");
    require(jitter >= 0 && jitter < 0.5, ErrorCode::OutOfRange, "jitter must lie in [0, 0.5)");
    require(genes >= 1, ErrorCode::OutOfRange, "genes must be >= 1");
    require(mor_dims >= 0, ErrorCode::OutOfRange, "mor_dims must be >= 0");
    require(signal_tra >= 0 && signal_mor >= 0, ErrorCode::OutOfRange, "signals must be nonnegative");
    require(noise_std > 0, ErrorCode::OutOfRange, "noise_std must be positive");
    require(baseline >= 0, ErrorCode::OutOfRange, "baseline must be nonnegative");
}

namespace {

/** Domain profiles: a common baseline plus a per-domain marker block. */
Matrix profiles(int n_domains, int n_features, double baseline, double lift) {
    Matrix p = Matrix::Constant(n_domains, n_features, baseline);
    const int block = std::max(1, n_features / (2 * n_domains));
    for (int d = 0; d < n_domains; ++d) {
        for (int j = d * block; j < std::min(n_features, (d + 1) * block); ++j) {
            p(d, j) += lift;
        }
    }
    return p;
}

}

SynthResult generate(const SynthSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const int n = spec.n_domains * spec.spots_per_domain;

    SynthResult out;
    auto& data = out.data;
    data.coords.resize(n, 2);
    data.labels = Labels(static_cast<std::size_t>(n));
    // Spot s sits at grid cell (s mod rows, s div rows), so each domain is a run of whole columns.
    for (int s = 0; s < n; ++s) {
        data.coords(s, 0) = static_cast<double>(s / spec.grid_rows) + uniform(rng, -spec.jitter, spec.jitter);
        data.coords(s, 1) = static_cast<double>(s % spec.grid_rows) + uniform(rng, -spec.jitter, spec.jitter);
        (*data.labels)[static_cast<std::size_t>(s)] = s / spec.spots_per_domain;
        data.spot_ids.push_back("spot" + std::to_string(s));
    }

    const Matrix p_tra = profiles(spec.n_domains, spec.genes, spec.baseline, spec.signal_tra * spec.noise_std);
    out.truth_tra.resize(n, spec.genes);
    data.tra.resize(n, spec.genes);
    for (int s = 0; s < n; ++s) {
        const int d = (*data.labels)[static_cast<std::size_t>(s)];
        for (int g = 0; g < spec.genes; ++g) {
            out.truth_tra(s, g) = p_tra(d, g);
            data.tra(s, g) = std::max(0.0, p_tra(d, g) + spec.noise_std * standard_normal(rng));
        }
    }
    for (int g = 0; g < spec.genes; ++g) {
        data.gene_ids.push_back("gene" + std::to_string(g));
    }

    if (spec.mor_dims > 0) {
        const Matrix p_mor = profiles(spec.n_domains, spec.mor_dims, 0.0, spec.signal_mor * spec.noise_std);
        Matrix truth(n, spec.mor_dims);
        Matrix mor(n, spec.mor_dims);
        for (int s = 0; s < n; ++s) {
            const int d = (*data.labels)[static_cast<std::size_t>(s)];
            for (int j = 0; j < spec.mor_dims; ++j) {
                truth(s, j) = p_mor(d, j);
                mor(s, j) = p_mor(d, j) + spec.noise_std * standard_normal(rng);
            }
        }
        for (int j = 0; j < spec.mor_dims; ++j) {
            data.mor_ids.push_back("mor" + std::to_string(j));
        }
        data.mor = std::move(mor);
        out.truth_mor = std::move(truth);
    }
    data.validate();
    return out;
}

}
