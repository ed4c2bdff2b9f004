#pragma once

// Numerical checks of the decomposition view of the SVD cost: weighted SVDs
// of discrete densities, the nuclear-norm bound, the half-variance
// factorization of a Gaussian kernel, the identity-function approximation
// built from Gaussian residuals, Nystrom-style singular functions on a grid,
// and the orthonormality of whitened residuals.

#include "kmc/cost_family.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <limits>
#include <vector>

namespace kmc {

/// Two discrete probability masses over a shared support, plus the variance
/// of the Gaussian kernel between support points.
class DiscreteDensityPair {
 public:
  DiscreteDensityPair(Matrix support, Vector p_mass, Vector q_mass, double kernel_variance)
      : support_(std::move(support)), p_(std::move(p_mass)), q_(std::move(q_mass)), kernel_variance_(kernel_variance) {
    detail::require(support_.rows() >= 1 && support_.cols() >= 1, "DiscreteDensityPair: empty support");
    detail::require(p_.size() == support_.rows() && q_.size() == support_.rows(),
                    "DiscreteDensityPair: mass length differs from support size");
    detail::require((p_.array() >= 0.0).all() && (q_.array() >= 0.0).all(),
                    "DiscreteDensityPair: masses must be nonnegative");
    detail::require(std::abs(p_.sum() - 1.0) <= 1e-12 && std::abs(q_.sum() - 1.0) <= 1e-12,
                    "DiscreteDensityPair: masses must sum to one");
    detail::require(kernel_variance_ > 0.0, "DiscreteDensityPair: kernel variance must be positive");
  }

  const Matrix& support() const { return support_; }
  const Vector& p_mass() const { return p_; }
  const Vector& q_mass() const { return q_; }
  double kernel_variance() const { return kernel_variance_; }

  Matrix kernel(ConstantMode mode) const { return gauss_gram(support_, support_, kernel_variance_, mode); }

 private:
  Matrix support_;
  Vector p_;
  Vector q_;
  double kernel_variance_;
};

struct WeightedSvd {
  Vector singular_values;  ///< nonincreasing
  Matrix left;             ///< M x M, orthonormal columns
  Matrix right;            ///< M x M, orthonormal columns
};

namespace detail {

/// Flip singular pairs so the first nonzero entry of each left vector is
/// positive.
inline void normalize_signs(Matrix& left, Matrix& right) {
  for (Index k = 0; k < left.cols(); ++k) {
    for (Index i = 0; i < left.rows(); ++i) {
      if (std::abs(left(i, k)) > 1e-12) {
        if (left(i, k) < 0.0) {
          left.col(k) *= -1.0;
          right.col(k) *= -1.0;
        }
        break;
      }
    }
  }
}

}  // namespace detail

/// SVD of diag(sqrt(p)) K diag(sqrt(q)).
inline WeightedSvd weighted_svd(const DiscreteDensityPair& pair, ConstantMode mode = ConstantMode::ExpOnly) {
  const Vector sp = pair.p_mass().cwiseSqrt();
  const Vector sq = pair.q_mass().cwiseSqrt();
  const Matrix m = sp.asDiagonal() * pair.kernel(mode) * sq.asDiagonal();
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (svd.info() != Eigen::Success) throw NumericalError("weighted_svd: SVD did not converge");
  WeightedSvd out{svd.singularValues(), svd.matrixU(), svd.matrixV()};
  detail::normalize_signs(out.left, out.right);
  return out;
}

/// Divides the singular vectors by sqrt(mass) so that they become
/// orthonormal under the probability measures p and q. Rows with mass
/// below 1e-12 are set to zero.
inline std::pair<Matrix, Matrix> variational_rescale(const WeightedSvd& svd, const DiscreteDensityPair& pair) {
  auto rescale = [](const Matrix& vecs, const Vector& mass) {
    Matrix out = Matrix::Zero(vecs.rows(), vecs.cols());
    for (Index i = 0; i < vecs.rows(); ++i)
      if (mass[i] > 1e-12) out.row(i) = vecs.row(i) / std::sqrt(mass[i]);
    return out;
  };
  return {rescale(svd.left, pair.p_mass()), rescale(svd.right, pair.q_mass())};
}

struct NuclearBoundReport {
  double nuclear_norm = 0.0;
  double bound = 0.0;  ///< K(x, x) in the active constant mode
  bool within_bound = false;
  bool tight = false;  ///< p == q elementwise
};

inline NuclearBoundReport nuclear_bound_check(const DiscreteDensityPair& pair,
                                              ConstantMode mode = ConstantMode::ExpOnly) {
  NuclearBoundReport r;
  r.nuclear_norm = weighted_svd(pair, mode).singular_values.sum();
  r.bound = mode == ConstantMode::ExpOnly ? 1.0 : normal_constant(pair.support().cols(), pair.kernel_variance());
  r.within_bound = r.nuclear_norm <= r.bound + 1e-9;
  r.tight = (pair.p_mass().array() == pair.q_mass().array()).all();
  return r;
}

/// Uniform 1D quadrature grid lo, lo + step, ..., hi.
struct QuadratureGrid {
  double lo = -8.0;
  double hi = 8.0;
  double step = 0.01;

  Index size() const { return static_cast<Index>(std::llround((hi - lo) / step)) + 1; }
  Vector points() const {
    Vector x(size());
    for (Index i = 0; i < x.size(); ++i) x[i] = lo + step * static_cast<double>(i);
    return x;
  }
};

struct HalfVarianceReport {
  double max_abs_err = 0.0;
};

namespace detail {

/// max |K K^T step - K2| without the grid-resolution precondition; used to
/// study convergence at steps coarse enough for the error to be resolvable.
inline double riemann_factorization_error(const QuadratureGrid& grid, double v, const Vector& eval_points) {
  const Matrix x = eval_points;
  const Matrix s = grid.points();
  const Matrix k_half = gauss_gram(x, s, v, ConstantMode::FullPdf);
  const Matrix approx = k_half * k_half.transpose() * grid.step;
  const Matrix exact = gauss_gram(x, x, 2.0 * v, ConstantMode::FullPdf);
  return (approx - exact).cwiseAbs().maxCoeff();
}

}  // namespace detail

/// Checks N(x - x'; 2v) = integral N(x - s; v) N(x' - s; v) ds as the
/// Riemann sum K K^T * step, with K the full-pdf Gram matrix of variance v
/// between the evaluation points and the quadrature grid.
inline HalfVarianceReport half_variance_factorization(const QuadratureGrid& grid, double v, const Vector& eval_points) {
  detail::require(v > 0.0, "half_variance_factorization: variance must be positive");
  detail::require(eval_points.size() >= 1, "half_variance_factorization: no evaluation points");
  detail::require(grid.step > 0.0 && grid.hi > grid.lo, "half_variance_factorization: malformed grid");
  const double sd = std::sqrt(v);
  detail::require(grid.step <= sd / 10.0 * (1.0 + 1e-12), "half_variance_factorization: grid too coarse (step > sqrt(v)/10)");
  detail::require(grid.lo <= eval_points.minCoeff() - 8.0 * sd && grid.hi >= eval_points.maxCoeff() + 8.0 * sd,
                  "half_variance_factorization: grid must extend 8*sqrt(v) beyond the evaluation points");

  return {detail::riemann_factorization_error(grid, v, eval_points)};
}

/// sum_k sigma_k fhat_k(x') ghat_k(x) sampled on a 1D grid: rows index x'
/// (model residuals), columns index x (data residuals).
struct IdentityMap {
  Vector grid;
  Matrix matrix;
  double diagonal_mass_ratio = 0.0;
};

namespace detail {

inline double diagonal_mass_ratio(const Matrix& m) {
  double near = 0.0;
  double total = 0.0;
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) {
      const double a = std::abs(m(i, j));
      total += a;
      if (std::abs(i - j) <= 1) near += a;
    }
  return total > 0.0 ? near / total : 0.0;
}

}  // namespace detail

/// 200 points spanning the data range widened by 3 sqrt(v) on both sides.
inline Vector default_identity_grid(const SampleBatch& data, Index points = 200) {
  const double pad = 3.0 * std::sqrt(data.bandwidth());
  const double lo = data.samples().minCoeff() - pad;
  const double hi = data.samples().maxCoeff() + pad;
  return Vector::LinSpaced(points, lo, hi);
}

inline IdentityMap identity_approximation(const SampleBatch& data, const SampleBatch& model, const Vector& grid) {
  detail::require(data.dim() == 1 && model.dim() == 1, "identity_approximation: batches must be one-dimensional");
  detail::require(grid.size() >= 1, "identity_approximation: empty grid");
  for (Index i = 1; i < grid.size(); ++i)
    detail::require(grid[i] >= grid[i - 1], "identity_approximation: grid must be sorted");

  // Model-by-data cross matrix, decomposed as U S V^T.
  const Matrix p_fg = gauss_gram(model.samples(), data.samples(), data.bandwidth() + model.bandwidth(),
                                 ConstantMode::ExpOnly);
  const detail::ThinSvd svd = detail::thin_svd(p_fg, "identity_approximation");

  const Matrix g = grid;
  const Matrix f_res = gauss_gram(g, model.samples(), model.bandwidth(), ConstantMode::ExpOnly);  // grid x K
  const Matrix g_res = gauss_gram(g, data.samples(), data.bandwidth(), ConstantMode::ExpOnly);    // grid x N
  const Matrix f_hat = f_res * svd.u;
  const Matrix g_hat = g_res * svd.v;

  IdentityMap out;
  out.grid = grid;
  out.matrix = f_hat * svd.s.asDiagonal() * g_hat.transpose();
  out.diagonal_mass_ratio = detail::diagonal_mass_ratio(out.matrix);
  return out;
}

/// Fraction of rows whose largest |entry| sits on the diagonal.
inline double row_argmax_on_diagonal(const IdentityMap& map) {
  Index hits = 0;
  for (Index i = 0; i < map.matrix.rows(); ++i) {
    Index arg = 0;
    map.matrix.row(i).cwiseAbs().maxCoeff(&arg);
    if (arg == i) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(map.matrix.rows());
}

/// Regular 2D evaluation grid; values are stored with y along rows.
struct Grid2d {
  double x_lo = -1.0, x_hi = 1.0;
  double y_lo = -1.0, y_hi = 1.0;
  Index nx = 50, ny = 50;

  Matrix points() const {
    Matrix pts(nx * ny, 2);
    const Vector xs = Vector::LinSpaced(nx, x_lo, x_hi);
    const Vector ys = Vector::LinSpaced(ny, y_lo, y_hi);
    for (Index r = 0; r < ny; ++r)
      for (Index c = 0; c < nx; ++c) pts.row(r * nx + c) << xs[c], ys[r];
    return pts;
  }
};

struct SingularFunctionGrids {
  Vector singular_values;
  std::vector<Matrix> left;   ///< data-side functions, ny x nx each
  std::vector<Matrix> right;  ///< model-side functions, ny x nx each
};

/// Nystrom extension of the leading singular vectors of the data-by-model
/// cross matrix C = U S V^T onto a 2D grid:
///   left_k(x)  = (1/s_k) sum_j K(x, X'_j) V_jk
///   right_k(x) = (1/s_k) sum_n K(x, X_n)  U_nk
/// Singular values at or below 1e-8 are not extended.
inline SingularFunctionGrids singular_function_grid(const SampleBatch& data, const SampleBatch& model,
                                                    const Grid2d& grid, Index top_k) {
  detail::require(data.dim() == 2 && model.dim() == 2, "singular_function_grid: batches must be two-dimensional");
  detail::require(top_k >= 1, "singular_function_grid: top_k must be >= 1");
  detail::require(grid.nx >= 1 && grid.ny >= 1, "singular_function_grid: empty grid");
  const double v_sum = data.bandwidth() + model.bandwidth();
  const Matrix c = gauss_gram(data.samples(), model.samples(), v_sum, ConstantMode::ExpOnly);
  Vector s;
  Matrix u, v;
  const bool hermitian = data.bandwidth() == model.bandwidth() && data.samples() == model.samples();
  if (hermitian) {
    // Same batch on both sides: C is PSD, so its eigenvectors serve as both
    // U and V and the two function families come out bitwise equal.
    Eigen::SelfAdjointEigenSolver<Matrix> es(c);
    if (es.info() != Eigen::Success) throw NumericalError("singular_function_grid: eigensolver did not converge");
    s = es.eigenvalues().reverse();
    u = es.eigenvectors().rowwise().reverse();
  } else {
    Eigen::JacobiSVD<Matrix> svd(c, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) throw NumericalError("singular_function_grid: SVD did not converge");
    s = svd.singularValues();
    u = svd.matrixU();
    v = svd.matrixV();
  }
  Index usable = 0;
  while (usable < s.size() && s[usable] > 1e-8) ++usable;
  detail::require(top_k <= usable, "singular_function_grid: top_k=" + std::to_string(top_k) +
                                       " exceeds the numerical rank " + std::to_string(usable));
  if (hermitian) {
    Matrix scratch = u;
    detail::normalize_signs(u, scratch);
    v = u;
  } else {
    detail::normalize_signs(u, v);
  }

  const Matrix pts = grid.points();
  const Matrix k_model = gauss_gram(pts, model.samples(), v_sum, ConstantMode::ExpOnly);  // G x K
  const Matrix k_data = gauss_gram(pts, data.samples(), v_sum, ConstantMode::ExpOnly);    // G x N
  const Matrix left_all = k_model * v.leftCols(top_k);
  const Matrix right_all = k_data * u.leftCols(top_k);

  SingularFunctionGrids out;
  out.singular_values = s.head(top_k);
  for (Index k = 0; k < top_k; ++k) {
    Matrix l(grid.ny, grid.nx), r(grid.ny, grid.nx);
    for (Index row = 0; row < grid.ny; ++row)
      for (Index col = 0; col < grid.nx; ++col) {
        l(row, col) = left_all(row * grid.nx + col, k) / s[k];
        r(row, col) = right_all(row * grid.nx + col, k) / s[k];
      }
    out.left.push_back(std::move(l));
    out.right.push_back(std::move(r));
  }
  return out;
}

struct OrthonormalityReport {
  double max_dev = 0.0;
};

namespace detail {

inline Matrix inverse_sqrt(const Matrix& spd) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(spd);
  const double floor = std::numeric_limits<double>::epsilon() * static_cast<double>(spd.rows()) *
                       std::max(es.eigenvalues().maxCoeff(), 0.0);
  if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= floor)
    throw NumericalError("inverse_sqrt: matrix is not positive definite after jitter");
  return es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Whitens the cross matrix with the jittered auto Gram matrices,
/// R_F^{-1/2} C^T R_G^{-1/2} = U S V^T, and measures how far
/// U^T R_F^{-1/2} R_F R_F^{-1/2} U and V^T R_G^{-1/2} R_G R_G^{-1/2} V are from
/// the identity.
inline OrthonormalityReport whitened_orthonormality_check(const SampleBatch& data, const SampleBatch& model,
                                                          const RegularizationPolicy& reg = {}) {
  detail::require_batches(data, model, "whitened_orthonormality_check");
  reg.validate();
  const GramBundle b = build_gram_bundle(data, model, ConstantMode::ExpOnly);
  Matrix rf = b.auto_cols;
  Matrix rg = b.auto_rows;
  rf.diagonal().array() += detail::relative_jitter(b.auto_cols, reg.jitter_rel);
  rg.diagonal().array() += detail::relative_jitter(b.auto_rows, reg.jitter_rel);
  const Matrix rf_is = detail::inverse_sqrt(rf);
  const Matrix rg_is = detail::inverse_sqrt(rg);

  Eigen::JacobiSVD<Matrix> svd(rf_is * b.cross.transpose() * rg_is, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericalError("whitened_orthonormality_check: SVD did not converge");
  const Matrix& u = svd.matrixU();
  const Matrix& v = svd.matrixV();
  const Matrix gu = u.transpose() * rf_is * rf * rf_is * u;
  const Matrix gv = v.transpose() * rg_is * rg * rg_is * v;
  const double dev_u = (gu - Matrix::Identity(gu.rows(), gu.cols())).cwiseAbs().maxCoeff();
  const double dev_v = (gv - Matrix::Identity(gv.rows(), gv.cols())).cwiseAbs().maxCoeff();
  return {std::max(dev_u, dev_v)};
}

}  // namespace kmc
