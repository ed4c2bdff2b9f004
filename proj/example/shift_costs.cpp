// Evaluates the four costs between a sample batch and shifted copies of it,
// then prints the top singular values of the weighted Gram matrix.

#include "kmc/cost_family.hpp"
#include "kmc/spectral_diagnostics.hpp"

#include <cstdio>
#include <random>

int main() {
  using namespace kmc;
  const GaussianMixture p(Vector::Constant(2, 0.5), {GaussianComponent(Vector::Constant(1, -0.3), 0.01),
                                                     GaussianComponent(Vector::Constant(1, 0.4), 0.01)});
  std::mt19937_64 rng(0);
  const Matrix x = sample_mixture(p, 100, rng);
  const double v = 0.01;
  const SampleBatch data(x, v);

  std::printf("%8s %12s %12s %12s %12s\n", "shift", "scalar", "vec_mat", "mat_mat", "svd");
  for (double s : {-0.4, -0.2, -0.1, 0.0, 0.1, 0.2, 0.4}) {
    const SampleBatch model(Matrix(x.array() + s), v);
    std::printf("%8.2f %12.6g %12.6g %12.6g %12.6g\n", s, scalar_cost(data, model).value,
                vector_matrix_cost(data, model).value, matrix_matrix_cost(data, model).value,
                svd_cost(data, model).value);
  }

  // Data and shifted model as two masses on their pooled support.
  const Index n = x.rows();
  Matrix support(2 * n, 1);
  support << x, Matrix(x.array() + 0.1);
  Vector pm = Vector::Zero(2 * n), qm = Vector::Zero(2 * n);
  pm.head(n).setConstant(1.0 / static_cast<double>(n));
  qm.tail(n).setConstant(1.0 / static_cast<double>(n));
  const Vector sv = weighted_svd(DiscreteDensityPair(support, pm, qm, 2.0 * v)).singular_values;
  std::printf("top weighted singular values at shift 0.1:");
  for (Index k = 0; k < 5; ++k) std::printf(" %.4g", sv[k]);
  std::printf("\n");
}
