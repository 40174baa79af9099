#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>

#include "affine_reserve/errors.hpp"

namespace affine_reserve {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

namespace linalg {

inline MatrixXd kron(const MatrixXd& a, const MatrixXd& b) {
    MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

inline MatrixXd symmetrize(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

/// Eigenvalue test on the symmetric part; the tolerance is relative to the
/// largest eigenvalue magnitude (absolute when the matrix is ~0).
inline bool is_psd(const MatrixXd& m, double rel_tol = 1e-9) {
    if (m.rows() != m.cols()) return false;
    if (m.size() == 0) return true;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m), Eigen::EigenvaluesOnly);
    const VectorXd& ev = es.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    return ev.minCoeff() >= -rel_tol * scale;
}

inline void require_psd(const MatrixXd& m, const std::string& what) {
    if (!is_psd(m)) throw ValidationError("matrix is not symmetric positive semidefinite", what);
}

/// Nearest PSD matrix in Frobenius norm (eigenvalues clamped at zero).
inline MatrixXd project_psd(const MatrixXd& m) {
    if (m.size() == 0) return m;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m));
    VectorXd ev = es.eigenvalues().cwiseMax(0.0);
    MatrixXd out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    return symmetrize(out);
}

/// Factor L with L L' = m for a PSD m (works for singular m).
inline MatrixXd psd_sqrt_factor(const MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m));
    VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal();
}

inline double max_abs(const MatrixXd& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

}  // namespace linalg
}  // namespace affine_reserve
