#pragma once

#include "affine_reserve/linalg.hpp"

namespace affine_reserve {

/// First and second moments of the stacked forecast error over a horizon.
struct MomentEstimate {
    VectorXd mean_q;         // expected driver path, N_delta * T
    VectorXd mean_delta;     // E[delta]; zero when produced by estimate_moments
    MatrixXd second_moment;  // E[delta delta'], PSD
    long n_samples = 0;

    Index dim() const { return second_moment.rows(); }

    static MomentEstimate zero(Index dim) {
        MomentEstimate m;
        m.mean_q = VectorXd::Zero(dim);
        m.mean_delta = VectorXd::Zero(dim);
        m.second_moment = MatrixXd::Zero(dim, dim);
        return m;
    }
};

}  // namespace affine_reserve
