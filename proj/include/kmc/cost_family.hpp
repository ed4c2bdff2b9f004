#pragma once

// The kernelized matrix costs between a data batch and a batch of generated
// centers, with analytic gradients with respect to the centers.
//
// Every cost is built from the exp-only Gram bundle and is *maximized*:
// larger values mean the model mixture is closer to the data. Gradients are
// formed in two stages. Each cost first produces dvalue/dcross (N x K) and
// dvalue/dauto_cols (K x K); center_gradient() then pushes both through the
// Gaussian entries onto the K x d center matrix.

#include "kmc/gaussian_algebra.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <algorithm>
#include <limits>
#include <optional>
#include <string_view>

namespace kmc {

enum class CostKind { Scalar, VectorMatrix, MatrixMatrixTrace, MatrixMatrixLogDet, SvdNuclear };

enum class MatrixCostVariant { Trace, TraceNoRg, LogDet };

inline std::string_view to_string(CostKind kind) {
  switch (kind) {
    case CostKind::Scalar: return "scalar";
    case CostKind::VectorMatrix: return "vector_matrix";
    case CostKind::MatrixMatrixTrace: return "matrix_matrix";
    case CostKind::MatrixMatrixLogDet: return "matrix_matrix_logdet";
    case CostKind::SvdNuclear: return "svd";
  }
  return "unknown";
}

inline CostKind cost_kind_from_string(std::string_view name) {
  for (auto kind : {CostKind::Scalar, CostKind::VectorMatrix, CostKind::MatrixMatrixTrace,
                    CostKind::MatrixMatrixLogDet, CostKind::SvdNuclear})
    if (to_string(kind) == name) return kind;
  throw InvalidArgument("unknown cost kind '" + std::string(name) + "'");
}

/// Jitter added before inverting or factorizing an auto Gram matrix:
/// R <- R + jitter_rel * (trace(R) / size) * I. A jitter_rel of zero turns
/// regularization off, in which case a singular R is reported as an error.
struct RegularizationPolicy {
  double jitter_rel = 1e-6;
  double svd_gap_floor = 1e-8;

  void validate() const {
    detail::require(jitter_rel >= 0.0 && std::isfinite(jitter_rel), "RegularizationPolicy: jitter_rel must be >= 0");
    detail::require(svd_gap_floor > 0.0, "RegularizationPolicy: svd_gap_floor must be positive");
  }
};

struct CostDiagnostics {
  double jitter_used = 0.0;
  std::optional<double> min_singular_gap;
  /// Set by svd_cost when min_singular_gap falls below the policy's floor;
  /// the gradient is then a subgradient.
  bool degenerate_spectrum = false;
};

struct CostReport {
  CostKind kind = CostKind::Scalar;
  double value = 0.0;
  /// True when `value` is the negation of the quantity the cost is usually
  /// written as (the log-det variant), so that every report is maximized.
  bool negated = false;
  Matrix grad_centers;  ///< K x d, dvalue/dcenters
  CostDiagnostics diagnostics;
};

/// Batch estimates of <p,q>, <q,q> and <p,p> with the 1/(NK), 1/K^2, 1/N^2
/// factors (exp-only kernel entries).
struct BatchInnerProducts {
  double pq = 0.0;
  double qq = 0.0;
  double pp = 0.0;
};

inline BatchInnerProducts batch_inner_products(const GramBundle& b) {
  const double n = static_cast<double>(b.cross.rows());
  const double k = static_cast<double>(b.cross.cols());
  return {b.cross.sum() / (n * k), b.auto_cols.sum() / (k * k), b.auto_rows.sum() / (n * n)};
}

namespace detail {

inline void require_batches(const SampleBatch& data, const SampleBatch& model, const char* op) {
  require(data.dim() == model.dim(), std::string(op) + ": data and model dimensions differ");
}

/// Pushes dvalue/dcross and dvalue/dauto_cols onto the model centers.
///   dcross(n,k)/dX'_k = cross(n,k) (X_n - X'_k) / (v_sum d)
///   dauto(k,j)/dX'_k  = auto(k,j) (X'_j - X'_k) / (2 v_q d)
inline Matrix center_gradient(const SampleBatch& data, const SampleBatch& model, const GramBundle& b,
                              const Matrix& g_cross, const Matrix* g_auto) {
  const Matrix& X = data.samples();
  const Matrix& Xp = model.samples();
  const double d = static_cast<double>(X.cols());

  const Matrix a = g_cross.cwiseProduct(b.cross);
  const Vector a_col = a.colwise().sum().transpose();
  Matrix grad = (a.transpose() * X - a_col.asDiagonal() * Xp) / (b.v_sum * d);

  if (g_auto != nullptr) {
    const Matrix sym = (*g_auto + g_auto->transpose()).cwiseProduct(b.auto_cols);
    const Vector s_row = sym.rowwise().sum();
    grad += (sym * Xp - s_row.asDiagonal() * Xp) / (2.0 * model.bandwidth() * d);
  }
  return grad;
}

/// Thin SVD: U, singular values, V.
struct ThinSvd {
  Matrix u;
  Vector s;
  Matrix v;
};

/// Divide-and-conquer SVD with a Jacobi fallback. Eigen's BDCSVD
/// can report success yet return NaNs on matrices dominated by underflowed
/// entries.
inline ThinSvd thin_svd(const Matrix& m, const char* what) {
  Eigen::BDCSVD<Matrix> bdc(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (bdc.info() == Eigen::Success && bdc.singularValues().allFinite() && bdc.matrixU().allFinite() &&
      bdc.matrixV().allFinite())
    return {bdc.matrixU(), bdc.singularValues(), bdc.matrixV()};
  Eigen::JacobiSVD<Matrix> jac(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (jac.info() != Eigen::Success || !jac.singularValues().allFinite())
    throw NumericalError(std::string(what) + ": SVD did not converge");
  return {jac.matrixU(), jac.singularValues(), jac.matrixV()};
}

inline double relative_jitter(const Matrix& r, double jitter_rel) {
  return jitter_rel * r.trace() / static_cast<double>(r.rows());
}

/// Cholesky factor of r + jitter*I. Throws NumericalError when the jittered
/// matrix is not numerically positive definite.
inline Eigen::LLT<Matrix> factorize(const Matrix& r, double jitter, const char* what) {
  Matrix jittered = r;
  jittered.diagonal().array() += jitter;
  Eigen::LLT<Matrix> llt(jittered);
  if (llt.info() != Eigen::Success)
    throw NumericalError(std::string(what) + ": Cholesky factorization failed (matrix not positive definite)");
  const double rcond = llt.rcond();
  if (!(rcond > std::numeric_limits<double>::epsilon()))
    throw NumericalError(std::string(what) + ": matrix is singular to working precision (rcond=" +
                         std::to_string(rcond) + ")");
  return llt;
}

inline double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline void require_finite(const CostReport& r, const char* op) {
  if (!std::isfinite(r.value) || !r.grad_centers.allFinite())
    throw NumericalError(std::string(op) + ": non-finite value or gradient");
}

}  // namespace detail

/// <p,q>^2 / <q,q>, bounded above by <p,p>.
inline CostReport scalar_cost(const SampleBatch& data, const SampleBatch& model) {
  detail::require_batches(data, model, "scalar_cost");
  const GramBundle b = build_gram_bundle(data, model, ConstantMode::ExpOnly);
  const auto ip = batch_inner_products(b);
  const double n = static_cast<double>(data.size());
  const double k = static_cast<double>(model.size());

  CostReport r;
  r.kind = CostKind::Scalar;
  r.value = ip.pq * ip.pq / ip.qq;
  const Matrix g_cross = Matrix::Constant(b.cross.rows(), b.cross.cols(), 2.0 * ip.pq / (ip.qq * n * k));
  const Matrix g_auto = Matrix::Constant(b.auto_cols.rows(), b.auto_cols.cols(), -r.value / (ip.qq * k * k));
  r.grad_centers = detail::center_gradient(data, model, b, g_cross, &g_auto);
  detail::require_finite(r, "scalar_cost");
  return r;
}

/// P^T R^{-1} P with P the data-averaged column of the cross Gram matrix and
/// R the model auto Gram matrix.
inline CostReport vector_matrix_cost(const SampleBatch& data, const SampleBatch& model,
                                     const RegularizationPolicy& reg = {}) {
  detail::require_batches(data, model, "vector_matrix_cost");
  reg.validate();
  const GramBundle b = build_gram_bundle(data, model, ConstantMode::ExpOnly);
  const double n = static_cast<double>(data.size());

  const Vector p = b.cross.colwise().sum().transpose() / n;
  const double jitter = detail::relative_jitter(b.auto_cols, reg.jitter_rel);
  const auto llt = detail::factorize(b.auto_cols, jitter, "vector_matrix_cost");
  const Vector a = llt.solve(p);

  CostReport r;
  r.kind = CostKind::VectorMatrix;
  r.value = p.dot(a);
  r.diagnostics.jitter_used = jitter;
  const Matrix g_cross = (2.0 / n) * Vector::Ones(b.cross.rows()) * a.transpose();
  const Matrix g_auto = -a * a.transpose();
  r.grad_centers = detail::center_gradient(data, model, b, g_cross, &g_auto);
  detail::require_finite(r, "vector_matrix_cost");
  return r;
}

/// Trace of the Schur-complement product Tr(R_G^{-1} C R_F^{-1} C^T), with C
/// the N x K cross Gram matrix, R_F the model and R_G the data auto Gram
/// matrix. TraceNoRg replaces R_G by the identity. LogDet reports
/// -(logdet R_FG - logdet R_F - logdet R_G), where R_FG is assembled from the
/// jittered diagonal blocks.
inline CostReport matrix_matrix_cost(const SampleBatch& data, const SampleBatch& model,
                                     const RegularizationPolicy& reg = {},
                                     MatrixCostVariant variant = MatrixCostVariant::Trace) {
  detail::require_batches(data, model, "matrix_matrix_cost");
  reg.validate();
  const GramBundle b = build_gram_bundle(data, model, ConstantMode::ExpOnly);
  const Matrix& c = b.cross;

  const double jitter_f = detail::relative_jitter(b.auto_cols, reg.jitter_rel);
  const auto llt_f = detail::factorize(b.auto_cols, jitter_f, "matrix_matrix_cost (R_F)");
  const Matrix y = llt_f.solve(c.transpose());  // K x N, R_F^{-1} C^T

  CostReport r;
  r.diagnostics.jitter_used = jitter_f;
  Matrix g_cross;
  Matrix g_auto;

  switch (variant) {
    case MatrixCostVariant::TraceNoRg: {
      r.kind = CostKind::MatrixMatrixTrace;
      r.value = c.cwiseProduct(y.transpose()).sum();
      g_cross = 2.0 * y.transpose();
      g_auto = -y * y.transpose();
      break;
    }
    case MatrixCostVariant::Trace: {
      r.kind = CostKind::MatrixMatrixTrace;
      const double jitter_g = detail::relative_jitter(b.auto_rows, reg.jitter_rel);
      const auto llt_g = detail::factorize(b.auto_rows, jitter_g, "matrix_matrix_cost (R_G)");
      r.diagnostics.jitter_used = std::max(jitter_f, jitter_g);
      const Matrix z = llt_g.solve(c);                      // N x K, R_G^{-1} C
      const Matrix h = llt_f.solve(z.transpose()).transpose();  // R_G^{-1} C R_F^{-1}
      r.value = z.cwiseProduct(y.transpose()).sum();
      g_cross = 2.0 * h;
      g_auto = -y * h;
      break;
    }
    case MatrixCostVariant::LogDet: {
      r.kind = CostKind::MatrixMatrixLogDet;
      r.negated = true;
      const double jitter_g = detail::relative_jitter(b.auto_rows, reg.jitter_rel);
      r.diagnostics.jitter_used = std::max(jitter_f, jitter_g);
      Matrix rg = b.auto_rows;
      rg.diagonal().array() += jitter_g;
      const auto llt_g = detail::factorize(b.auto_rows, jitter_g, "matrix_matrix_cost (R_G)");
      Matrix schur = rg - c * y;
      schur = 0.5 * (schur + schur.transpose()).eval();
      const auto llt_s = detail::factorize(schur, 0.0, "matrix_matrix_cost (Schur complement)");
      r.value = detail::log_det(llt_g) - detail::log_det(llt_s);
      const Matrix s_inv_yt = llt_s.solve(y.transpose());  // N x K
      g_cross = 2.0 * s_inv_yt;
      g_auto = -y * s_inv_yt;
      break;
    }
  }
  r.grad_centers = detail::center_gradient(data, model, b, g_cross, &g_auto);
  detail::require_finite(r, "matrix_matrix_cost");
  return r;
}

/// Nuclear norm of the exp-only cross Gram matrix, with no batch-size
/// normalization, so that coincident batches score exactly N.
inline CostReport svd_cost(const SampleBatch& data, const SampleBatch& model, const RegularizationPolicy& reg = {}) {
  detail::require_batches(data, model, "svd_cost");
  reg.validate();
  const Matrix c = gauss_gram(data.samples(), model.samples(), data.bandwidth() + model.bandwidth(),
                              ConstantMode::ExpOnly);
  const detail::ThinSvd svd = detail::thin_svd(c, "svd_cost");

  const Vector& s = svd.s;
  CostReport r;
  r.kind = CostKind::SvdNuclear;
  r.value = s.sum();
  if (s.size() > 1) {
    double gap = std::numeric_limits<double>::infinity();
    for (Index i = 0; i + 1 < s.size(); ++i) gap = std::min(gap, s[i] - s[i + 1]);
    r.diagnostics.min_singular_gap = gap;
    r.diagnostics.degenerate_spectrum = gap < reg.svd_gap_floor;
  }

  // d||C||_* / dC = U V^T. Only the cross matrix depends on the centers here,
  // so a bundle carrying the cross entries is enough for the chain rule.
  GramBundle b;
  b.cross = c;
  b.v_sum = data.bandwidth() + model.bandwidth();
  const Matrix g_cross = svd.u * svd.v.transpose();
  r.grad_centers = detail::center_gradient(data, model, b, g_cross, nullptr);
  detail::require_finite(r, "svd_cost");
  return r;
}

/// Dispatch on the cost kind. MatrixMatrixTrace uses the full trace variant.
inline CostReport evaluate(CostKind kind, const SampleBatch& data, const SampleBatch& model,
                           const RegularizationPolicy& reg = {}) {
  switch (kind) {
    case CostKind::Scalar: return scalar_cost(data, model);
    case CostKind::VectorMatrix: return vector_matrix_cost(data, model, reg);
    case CostKind::MatrixMatrixTrace: return matrix_matrix_cost(data, model, reg, MatrixCostVariant::Trace);
    case CostKind::MatrixMatrixLogDet: return matrix_matrix_cost(data, model, reg, MatrixCostVariant::LogDet);
    case CostKind::SvdNuclear: return svd_cost(data, model, reg);
  }
  throw InvalidArgument("evaluate: unknown cost kind");
}

}  // namespace kmc
