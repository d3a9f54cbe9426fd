#ifndef TOPOFUSE_SYNTH_HPP
#define TOPOFUSE_SYNTH_HPP

#include "topofuse/dataio.hpp"

namespace topofuse {

/**
 * Synthetic tissue: `n_domains` contiguous blocks of spots on a jittered unit grid.
 * Every domain lifts its own block of marker features by `signal * noise_std`.
 */
struct SynthSpec {
    int n_domains = 4;
    int spots_per_domain = 50;
    /** Grid rows; columns follow from the spot count. */
    int grid_rows = 10;
    double jitter = 0.1;
    int genes = 200;
    /** Zero disables the morphology modality. */
    int mor_dims = 32;
    double signal_tra = 3.0;
    double signal_mor = 2.0;
    double noise_std = 1.0;
    double baseline = 10.0;
    std::uint64_t seed = 42;

    void validate() const;
};

struct SynthResult {
    SpotDataset data;
    /** Noise-free expression, same shape as `data.tra`. */
    Matrix truth_tra;
    std::optional<Matrix> truth_mor;
};

SynthResult generate(const SynthSpec& spec);

}

#endif
