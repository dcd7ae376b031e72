#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "fcdm/tensor.hpp"

namespace fcdm {

/// Flattened 2x2 average-pooled pixels, one row per sample.
template <class T>
Eigen::MatrixXd pooled_features(const Tensor<T>& x) {
  if (x.ndim() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
    throw ShapeError("toy_fid: expected [N, C, H, W] with even H and W, got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2) / 2, W = x.dim(3) / 2;
  Eigen::MatrixXd f(N, C * H * W);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          f(n, (c * H + i) * W + j) = 0.25 * (double(x.at(n, c, 2 * i, 2 * j)) + x.at(n, c, 2 * i, 2 * j + 1) +
                                              x.at(n, c, 2 * i + 1, 2 * j) + x.at(n, c, 2 * i + 1, 2 * j + 1));
  return f;
}

namespace detail {

constexpr double kFidEigenFloor = 1e-10;

/// Eigendecomposition of a covariance; eigenvalues below the floor are
/// clamped to zero, and clearly negative ones rejected.
inline Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> psd_eigen(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw Error(std::string("toy_fid: eigendecomposition failed for ") + what);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-8 * scale)
    throw Error(std::string("toy_fid: ") + what + " is not positive semidefinite beyond the eigenvalue floor");
  return es;
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  const auto es = psd_eigen(m, what);
  Eigen::VectorXd s = es.eigenvalues();
  for (auto& v : s) v = v > kFidEigenFloor ? std::sqrt(v) : 0.0;
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& f, Eigen::VectorXd& mean) {
  mean = f.colwise().mean().transpose();
  const Eigen::MatrixXd c = f.rowwise() - mean.transpose();
  return (c.transpose() * c) / double(f.rows() - 1);
}

}  // namespace detail

/// Frechet distance between Gaussians fitted to pooled features.
/// Tr((S1 S2)^{1/2}) is evaluated as Tr((S1^{1/2} S2 S1^{1/2})^{1/2}).
inline double frechet_distance(const Eigen::MatrixXd& fa, const Eigen::MatrixXd& fb) {
  if (fa.rows() < 2 || fb.rows() < 2) throw Error("toy_fid: need at least 2 samples per side");
  if (fa.cols() != fb.cols()) throw ShapeError("toy_fid: feature dimensions differ");
  Eigen::VectorXd ma, mb;
  const Eigen::MatrixXd sa = detail::covariance(fa, ma), sb = detail::covariance(fb, mb);
  const Eigen::MatrixXd ra = detail::psd_sqrt(sa, "first covariance");
  detail::psd_eigen(sb, "second covariance");
  Eigen::MatrixXd mid = ra * sb * ra;
  mid = 0.5 * (mid + mid.transpose());
  const auto es = detail::psd_eigen(mid, "covariance product");
  double tr_sqrt = 0;
  for (double v : es.eigenvalues())
    if (v > detail::kFidEigenFloor) tr_sqrt += std::sqrt(v);
  const double d2 = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2 * tr_sqrt;
  return std::max(0.0, d2);
}

template <class T, class U>
double toy_fid(const Tensor<T>& a, const Tensor<U>& b) {
  if (a.ndim() != 4 || b.ndim() != 4 || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
    throw ShapeError("toy_fid: sample shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return frechet_distance(pooled_features(a), pooled_features(b));
}

}  // namespace fcdm
