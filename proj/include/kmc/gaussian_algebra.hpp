#pragma once

// Closed-form algebra of isotropic Gaussians and Gaussian mixtures, and the
// Gaussian Gram matrices that the kernelized costs are built from.
//
// Sample matrices are row-major in meaning: one row per point, one column per
// coordinate.

#include "kmc/types.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace kmc {

/// Whether a Gram entry carries the Gaussian normalization constant.
enum class ConstantMode { FullPdf, ExpOnly };

/// Normalization constant of an isotropic d-dimensional normal with the
/// given per-coordinate variance: (2*pi*variance)^(-d/2).
inline double normal_constant(Index dim, double variance) {
  return std::pow(2.0 * std::numbers::pi * variance, -0.5 * static_cast<double>(dim));
}

/// Isotropic normal density N(diff; variance) with full normalization.
inline double normal_pdf(const Vector& diff, double variance) {
  return normal_constant(diff.size(), variance) * std::exp(-0.5 * diff.squaredNorm() / variance);
}

class GaussianComponent {
 public:
  GaussianComponent(Vector mean, double variance) : mean_(std::move(mean)), variance_(variance) {
    detail::require(mean_.size() >= 1, "GaussianComponent: dimension must be >= 1");
    detail::require(variance_ > 0.0 && std::isfinite(variance_),
                    "GaussianComponent: variance must be positive and finite");
  }

  const Vector& mean() const { return mean_; }
  double variance() const { return variance_; }
  Index dim() const { return mean_.size(); }

 private:
  Vector mean_;
  double variance_;
};

class GaussianMixture {
 public:
  /// Weights are normalized to sum to one.
  GaussianMixture(Vector weights, std::vector<GaussianComponent> components)
      : weights_(std::move(weights)), components_(std::move(components)) {
    detail::require(!components_.empty(), "GaussianMixture: at least one component required");
    detail::require(weights_.size() == static_cast<Index>(components_.size()),
                    "GaussianMixture: weight count differs from component count");
    for (const auto& c : components_)
      detail::require(c.dim() == components_.front().dim(),
                      "GaussianMixture: components must share a dimension");
    detail::require((weights_.array() >= 0.0).all(), "GaussianMixture: weights must be >= 0");
    const double total = weights_.sum();
    detail::require(total > 0.0 && std::isfinite(total), "GaussianMixture: weights must have positive sum");
    weights_ /= total;
  }

  /// Single-component mixture.
  explicit GaussianMixture(GaussianComponent component)
      : GaussianMixture(Vector::Ones(1), {std::move(component)}) {}

  const Vector& weights() const { return weights_; }
  const std::vector<GaussianComponent>& components() const { return components_; }
  Index size() const { return weights_.size(); }
  Index dim() const { return components_.front().dim(); }

 private:
  Vector weights_;
  std::vector<GaussianComponent> components_;
};

/// A batch of points standing in for a density as the uniform mixture
/// (1/N) * sum_n N(x - samples_n; bandwidth).
class SampleBatch {
 public:
  SampleBatch(Matrix samples, double bandwidth) : samples_(std::move(samples)), bandwidth_(bandwidth) {
    detail::require(samples_.rows() >= 1, "SampleBatch: at least one sample required");
    detail::require(samples_.cols() >= 1, "SampleBatch: dimension must be >= 1");
    detail::require(bandwidth_ > 0.0 && std::isfinite(bandwidth_), "SampleBatch: bandwidth must be positive");
  }

  const Matrix& samples() const { return samples_; }
  double bandwidth() const { return bandwidth_; }
  Index size() const { return samples_.rows(); }
  Index dim() const { return samples_.cols(); }

 private:
  Matrix samples_;
  double bandwidth_;
};

/// Cross and auto Gram matrices between a data batch (rows) and a model
/// batch (columns).
struct GramBundle {
  Matrix sq_dist;    ///< N x K, squared distances divided by the dimension
  Matrix cross;      ///< N x K
  Matrix auto_rows;  ///< N x N, data side
  Matrix auto_cols;  ///< K x K, model side
  double v_sum = 0.0;
  ConstantMode constant_mode = ConstantMode::ExpOnly;
};

/// <a, b> = N(a.mean - b.mean; a.variance + b.variance).
inline double gauss_inner(const GaussianComponent& a, const GaussianComponent& b) {
  detail::require(a.dim() == b.dim(), "gauss_inner: dimension mismatch");
  return normal_pdf(a.mean() - b.mean(), a.variance() + b.variance());
}

namespace detail {

// Double sum over raw (not necessarily normalized) weights. Bilinear in both
// weight vectors.
inline double weighted_inner(const Vector& wp, std::span<const GaussianComponent> cp, const Vector& wq,
                             std::span<const GaussianComponent> cq) {
  double total = 0.0;
  for (Index i = 0; i < wp.size(); ++i)
    for (Index j = 0; j < wq.size(); ++j) total += wp[i] * wq[j] * gauss_inner(cp[i], cq[j]);
  return total;
}

}  // namespace detail

inline double mixture_inner(const GaussianMixture& p, const GaussianMixture& q) {
  detail::require(p.dim() == q.dim(), "mixture_inner: dimension mismatch");
  return detail::weighted_inner(p.weights(), p.components(), q.weights(), q.components());
}

/// Squared L2 norm <p, p>.
inline double mixture_norm(const GaussianMixture& p) { return mixture_inner(p, p); }

/// Entry (n, k) = ||X_n - Xp_k||^2 / d.
inline Matrix scaled_sq_dist(const Matrix& X, const Matrix& Xp) {
  detail::require(X.cols() == Xp.cols(),
                  "scaled_sq_dist: dimension mismatch " + detail::shape(X) + " vs " + detail::shape(Xp));
  const Index n = X.rows();
  const Index k = Xp.rows();
  const Index d = X.cols();
  const double inv_d = 1.0 / static_cast<double>(d);
  Matrix out(n, k);
  for (Index c = 0; c < k; ++c) {
    for (Index r = 0; r < n; ++r) {
      double acc = 0.0;
      for (Index j = 0; j < d; ++j) {
        const double diff = X(r, j) - Xp(c, j);
        acc += diff * diff;
      }
      out(r, c) = acc * inv_d;
    }
  }
  return out;
}

/// exp(-scaled_sq_dist / (2 v_sum)), times the d-dimensional normal constant
/// of variance v_sum in FullPdf mode.
inline Matrix gram_from_sq_dist(const Matrix& sq_dist, Index dim, double v_sum, ConstantMode mode) {
  detail::require(v_sum > 0.0 && std::isfinite(v_sum), "gauss_gram: v_sum must be positive");
  const double scale = -0.5 / v_sum;
  Matrix out = (sq_dist.array() * scale).exp().matrix();
  if (mode == ConstantMode::FullPdf) out *= normal_constant(dim, v_sum);
  return out;
}

inline Matrix gauss_gram(const Matrix& X, const Matrix& Xp, double v_sum, ConstantMode mode) {
  detail::require(v_sum > 0.0 && std::isfinite(v_sum), "gauss_gram: v_sum must be positive");
  return gram_from_sq_dist(scaled_sq_dist(X, Xp), X.cols(), v_sum, mode);
}

/// n draws from a mixture, one row per draw. Each draw takes a component by
/// inverse-CDF on the weights, then adds sqrt(variance) * N(0, I).
inline Matrix sample_mixture(const GaussianMixture& mix, Index n, std::mt19937_64& rng) {
  detail::require(n >= 0, "sample_mixture: negative sample count");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal;
  Matrix out(n, mix.dim());
  for (Index i = 0; i < n; ++i) {
    const double u = unit(rng);
    double acc = 0.0;
    Index k = 0;
    for (; k + 1 < mix.size(); ++k) {
      acc += mix.weights()[k];
      if (u < acc) break;
    }
    const auto& c = mix.components()[static_cast<std::size_t>(k)];
    const double sd = std::sqrt(c.variance());
    for (Index d = 0; d < mix.dim(); ++d) out(i, d) = c.mean()[d] + sd * normal(rng);
  }
  return out;
}

inline GramBundle build_gram_bundle(const SampleBatch& data, const SampleBatch& model,
                                    ConstantMode mode = ConstantMode::ExpOnly) {
  detail::require(data.dim() == model.dim(), "build_gram_bundle: dimension mismatch");
  GramBundle b;
  b.v_sum = data.bandwidth() + model.bandwidth();
  b.constant_mode = mode;
  b.sq_dist = scaled_sq_dist(data.samples(), model.samples());
  b.cross = gram_from_sq_dist(b.sq_dist, data.dim(), b.v_sum, mode);
  b.auto_rows = gauss_gram(data.samples(), data.samples(), 2.0 * data.bandwidth(), mode);
  b.auto_cols = gauss_gram(model.samples(), model.samples(), 2.0 * model.bandwidth(), mode);
  return b;
}

}  // namespace kmc
