#include "kmc/mdn_trainer.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <numeric>

namespace {

using kmc::CostKind;
using kmc::Matrix;
using kmc::MdnModel;
using kmc::Vector;

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool same_parameters(const MdnModel& a, const MdnModel& b) {
  if (a.layers().size() != b.layers().size()) return false;
  for (std::size_t i = 0; i < a.layers().size(); ++i)
    if (!bitwise_equal(a.layers()[i].weight, b.layers()[i].weight) ||
        !bitwise_equal(a.layers()[i].bias, b.layers()[i].bias))
      return false;
  return true;
}

/// Flattens parameters so the finite-difference oracle can perturb them.
Matrix flatten(const MdnModel& m) {
  Matrix out(m.parameter_count(), 1);
  Eigen::Index o = 0;
  for (const auto& l : m.layers()) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) out(o++, 0) = l.weight.data()[i];
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) out(o++, 0) = l.bias.data()[i];
  }
  return out;
}

MdnModel unflatten(MdnModel m, const Matrix& flat) {
  Eigen::Index o = 0;
  for (auto& l : m.layers()) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = flat(o++, 0);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = flat(o++, 0);
  }
  return m;
}

Matrix flatten(const std::vector<kmc::LayerGradient>& g) {
  Eigen::Index n = 0;
  for (const auto& l : g) n += l.weight.size() + l.bias.size();
  Matrix out(n, 1);
  Eigen::Index o = 0;
  for (const auto& l : g) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) out(o++, 0) = l.weight.data()[i];
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) out(o++, 0) = l.bias.data()[i];
  }
  return out;
}

kmc::TrainConfig small_config(CostKind cost) {
  kmc::TrainConfig c;
  c.cost = cost;
  c.bandwidth = 0.05;
  c.batch_n = 32;
  c.centers_k = 32;
  c.steps = 30;
  c.seed = 11;
  c.prior.dim = 3;
  c.hidden = {16, 16};
  return c;
}

}  // namespace

TEST(Prior, DeterministicGivenSeed) {
  kmc::PriorSpec spec;
  EXPECT_TRUE(bitwise_equal(kmc::sample_prior(spec, 50, 7), kmc::sample_prior(spec, 50, 7)));
  EXPECT_FALSE(bitwise_equal(kmc::sample_prior(spec, 50, 7), kmc::sample_prior(spec, 50, 8)));
}

TEST(Prior, UniformRange) {
  const Matrix u = kmc::sample_prior({}, 2000, 1);
  EXPECT_EQ(u.cols(), 10);
  EXPECT_GE(u.minCoeff(), 0.0);
  EXPECT_LT(u.maxCoeff(), 1.0);
}

TEST(Prior, GaussianMean) {
  kmc::PriorSpec spec{kmc::PriorKind::Gaussian, 4, -1};
  const Matrix g = kmc::sample_prior(spec, 100000, 2);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(g.col(j).mean(), 0.0, 0.02);
}

TEST(Prior, HybridSplitsDimensions) {
  kmc::PriorSpec spec{kmc::PriorKind::Hybrid, 6, -1};
  EXPECT_EQ(spec.uniform_dims(), 3);
  const Matrix h = kmc::sample_prior(spec, 5000, 3);
  EXPECT_GE(h.leftCols(3).minCoeff(), 0.0);
  EXPECT_LT(h.leftCols(3).maxCoeff(), 1.0);
  EXPECT_LT(h.rightCols(3).minCoeff(), -1.0);
  spec.hybrid_split = 6;
  EXPECT_THROW(spec.validate(), kmc::InvalidArgument);
  EXPECT_THROW(kmc::sample_prior({}, 0, 1), kmc::InvalidArgument);
}

TEST(Forward, IdentityLayerPassesNoiseThrough) {
  MdnModel m({{Matrix::Identity(4, 4), Vector::Zero(4)}});
  const Matrix u = kmc::sample_prior({kmc::PriorKind::Gaussian, 4, -1}, 9, 4);
  EXPECT_TRUE(bitwise_equal(kmc::forward(m, u), u));
}

TEST(Forward, ZeroWeightsGiveBias) {
  Vector b(2);
  b << 0.25, -1.5;
  MdnModel m({{Matrix::Zero(5, 3), Vector::Zero(5)}, {Matrix::Zero(2, 5), b}});
  const Matrix out = kmc::forward(m, kmc::sample_prior({kmc::PriorKind::Uniform, 3, -1}, 6, 5));
  for (int i = 0; i < 6; ++i) EXPECT_EQ(out.row(i), b.transpose());
}

TEST(Forward, ShapeErrors) {
  const MdnModel m = kmc::make_mdn(3, {4}, 2, 1);
  EXPECT_THROW(kmc::forward(m, Matrix::Zero(2, 4)), kmc::InvalidArgument);
  EXPECT_THROW(MdnModel({{Matrix::Zero(4, 3), Vector::Zero(4)}, {Matrix::Zero(2, 5), Vector::Zero(2)}}),
               kmc::InvalidArgument);
  EXPECT_THROW(MdnModel({{Matrix::Zero(4, 3), Vector::Zero(3)}}), kmc::InvalidArgument);
}

TEST(Forward, RowPermutationEquivariance) {
  const MdnModel m = kmc::make_mdn(10, {32, 32}, 2, 6);
  const Matrix u = kmc::sample_prior({}, 20, 6);
  std::vector<int> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(6);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix up(20, 10);
  for (int i = 0; i < 20; ++i) up.row(i) = u.row(perm[i]);
  const Matrix a = kmc::forward(m, u);
  const Matrix b = kmc::forward(m, up);
  for (int i = 0; i < 20; ++i) EXPECT_LE((b.row(i) - a.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 5; ++t) {
    const MdnModel m = kmc::make_mdn(3, {6}, 2, 100 + t);
    const Matrix u = kmc::oracle::uniform_matrix(rng, 7, 3, -1.0, 1.0);
    const Matrix w = kmc::oracle::uniform_matrix(rng, 7, 2, -1.0, 1.0);
    kmc::ForwardCache cache;
    kmc::forward(m, u, &cache);
    const Matrix analytic = flatten(kmc::backward(m, cache, w));
    const Matrix numeric = kmc::oracle::central_difference(
        [&](const Matrix& p) { return kmc::forward(unflatten(m, p), u).cwiseProduct(w).sum(); }, flatten(m));
    EXPECT_LE(kmc::oracle::max_rel_error(analytic, numeric), 1e-5);
  }
}

TEST(Backward, FullPipelineMatchesFiniteDifferences) {
  std::mt19937_64 rng(22);
  for (auto kind : {CostKind::Scalar, CostKind::VectorMatrix, CostKind::MatrixMatrixTrace,
                    CostKind::MatrixMatrixLogDet, CostKind::SvdNuclear}) {
    int checked = 0;
    for (int t = 0; checked < 3 && t < 50; ++t) {
      kmc::TrainConfig cfg;
      cfg.cost = kind;
      cfg.bandwidth = 0.1;
      cfg.prior.dim = 3;
      const MdnModel m = kmc::make_mdn(3, {8, 8}, 2, 200 + t, &cfg.prior);
      const Matrix noise = kmc::sample_prior(cfg.prior, 4, 300 + t);
      const Matrix data = kmc::oracle::uniform_matrix(rng, 4, 2, -1.0, 1.0);
      const auto pg = kmc::pipeline_gradient(m, noise, data, cfg);
      if (kind == CostKind::SvdNuclear && pg.cost.diagnostics.min_singular_gap.value_or(0.0) <= 1e-4) continue;
      const Matrix numeric = kmc::oracle::central_difference(
          [&](const Matrix& p) { return kmc::pipeline_gradient(unflatten(m, p), noise, data, cfg).cost.value; },
          flatten(m));
      EXPECT_LE(kmc::oracle::max_rel_error(flatten(pg.params), numeric), 1e-4) << to_string(kind);
      ++checked;
    }
    EXPECT_EQ(checked, 3) << to_string(kind);
  }
}

TEST(TrainStep, ZeroLearningRateLeavesParameters) {
  for (auto opt : {kmc::OptimizerKind::AdaptiveMoments, kmc::OptimizerKind::SgdMomentum}) {
    auto cfg = small_config(CostKind::SvdNuclear);
    cfg.learning_rate.initial = 0.0;
    cfg.optimizer.kind = opt;
    MdnModel m = kmc::make_mdn(3, cfg.hidden, 2, 1, &cfg.prior);
    const MdnModel before = m;
    kmc::TrainState st(m, cfg.seed);
    kmc::ToyDataset data({});
    for (int s = 0; s < 3; ++s) kmc::train_step(m, data.sample(cfg.batch_n), cfg, st);
    EXPECT_TRUE(same_parameters(m, before));
  }
}

TEST(TrainStep, SmallStepIncreasesCostOnFrozenBatch) {
  for (auto kind : {CostKind::Scalar, CostKind::VectorMatrix, CostKind::MatrixMatrixTrace, CostKind::SvdNuclear}) {
    auto cfg = small_config(kind);
    cfg.optimizer.kind = kmc::OptimizerKind::SgdMomentum;
    cfg.optimizer.momentum = 0.0;
    MdnModel m = kmc::make_mdn(3, cfg.hidden, 2, 2, &cfg.prior);
    kmc::ToyDataset data({});
    const Matrix batch = data.sample(cfg.batch_n);
    kmc::TrainState st(m, cfg.seed);
    kmc::TrainState probe = st;
    const Matrix noise = kmc::sample_prior(cfg.prior, cfg.centers_k, probe.noise_rng);
    const double before = kmc::pipeline_gradient(m, noise, batch, cfg).cost.value;
    const double g = kmc::train_step(m, batch, cfg, st).grad_norm;
    ASSERT_GT(g, 0.0);
    // Plain gradient ascent with a step of 1e-3 / |grad|^2 raises the cost
    // by about 1e-3 to first order.
    cfg.learning_rate.initial = 1e-3 / (g * g);
    m = kmc::make_mdn(3, cfg.hidden, 2, 2, &cfg.prior);
    st = kmc::TrainState(m, cfg.seed);
    kmc::train_step(m, batch, cfg, st);
    const double after = kmc::pipeline_gradient(m, noise, batch, cfg).cost.value;
    EXPECT_GT(after, before) << to_string(kind);
  }
}

TEST(TrainStep, RejectsMismatchedData) {
  auto cfg = small_config(CostKind::Scalar);
  MdnModel m = kmc::make_mdn(3, cfg.hidden, 2, 1);
  kmc::TrainState st(m, 1);
  EXPECT_THROW(kmc::train_step(m, Matrix::Zero(8, 3), cfg, st), kmc::InvalidArgument);
}

TEST(Fit, IdenticalSeedsGiveIdenticalTraces) {
  const auto cfg = small_config(CostKind::MatrixMatrixTrace);
  kmc::ToyDatasetSpec ds;
  ds.seed = 4;
  const auto a = kmc::fit(ds, cfg);
  const auto b = kmc::fit(ds, cfg);
  ASSERT_EQ(a.cost_trace.size(), 30u);
  EXPECT_EQ(0, std::memcmp(a.cost_trace.data(), b.cost_trace.data(), sizeof(double) * a.cost_trace.size()));
  EXPECT_TRUE(same_parameters(a.final_model, b.final_model));
}

TEST(Fit, SvdTraceBoundedByBatchSize) {
  auto cfg = small_config(CostKind::SvdNuclear);
  cfg.steps = 60;
  const auto r = kmc::fit(kmc::ToyDatasetSpec{}, cfg);
  for (double v : r.cost_trace) EXPECT_LE(v, static_cast<double>(cfg.batch_n) + 1e-9);
}

TEST(Fit, SingleGaussianMeanRecovered) {
  kmc::ToyDatasetSpec ds;
  ds.kind = kmc::ToyDatasetKind::SingleGaussian;
  ds.center = Vector(2);
  ds.center << 0.3, -0.2;
  ds.component_std = 0.1;
  ds.seed = 5;
  auto cfg = small_config(CostKind::SvdNuclear);
  cfg.bandwidth = 0.01;
  cfg.batch_n = 64;
  cfg.centers_k = 64;
  cfg.steps = 300;
  cfg.learning_rate.initial = 3e-3;
  const auto r = kmc::fit(ds, cfg);
  const Vector mean = r.final_centers.colwise().mean().transpose();
  EXPECT_LT((mean - ds.center).norm(), 0.1);
  EXPECT_EQ(r.mode_coverage, 1.0);
}

TEST(Fit, DimensionChecks) {
  auto cfg = small_config(CostKind::Scalar);
  EXPECT_THROW(kmc::fit(kmc::make_mdn(3, {4}, 3, 1), kmc::ToyDatasetSpec{}, cfg), kmc::InvalidArgument);
  EXPECT_THROW(kmc::fit(kmc::make_mdn(5, {4}, 2, 1), kmc::ToyDatasetSpec{}, cfg), kmc::InvalidArgument);
  cfg.bandwidth = 0.0;
  EXPECT_THROW(kmc::fit(kmc::ToyDatasetSpec{}, cfg), kmc::InvalidArgument);
}

TEST(Datasets, MixtureMeansRespectPlacement) {
  kmc::ToyDatasetSpec ds;
  ds.seed = 9;
  kmc::ToyDataset d(ds);
  const Matrix& mu = d.component_means();
  ASSERT_EQ(mu.rows(), 10);
  EXPECT_LE(mu.cwiseAbs().maxCoeff(), 1.0);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < i; ++j) EXPECT_GE((mu.row(i) - mu.row(j)).norm(), 0.3);
  const Matrix x = d.sample(500);
  EXPECT_EQ(x.cols(), 2);
  EXPECT_TRUE(bitwise_equal(kmc::ToyDataset(ds).sample(20), kmc::ToyDataset(ds).sample(20)));
}

TEST(Datasets, TwoMoonsAndCustom) {
  kmc::ToyDatasetSpec moons;
  moons.kind = kmc::ToyDatasetKind::TwoMoons;
  kmc::ToyDataset m(moons);
  EXPECT_FALSE(m.has_components());
  const Matrix x = m.sample(400);
  EXPECT_EQ(x.cols(), 2);
  EXPECT_LT(x.cwiseAbs().maxCoeff(), 2.0);

  kmc::ToyDatasetSpec custom;
  custom.kind = kmc::ToyDatasetKind::CustomMixture;
  EXPECT_THROW(kmc::ToyDataset{custom}, kmc::InvalidArgument);
  custom.means = Matrix::Zero(2, 3);
  custom.stds = Vector::Constant(2, 0.1);
  EXPECT_EQ(kmc::ToyDataset(custom).sample(5).cols(), 3);
}

TEST(Datasets, ModeCoverageCounts) {
  Matrix means(3, 2);
  means << 0, 0, 1, 1, -1, 1;
  const Vector stds = Vector::Constant(3, 0.1);
  Matrix centers(2, 2);
  centers << 0.05, 0.05, 1.0, 1.25;
  EXPECT_DOUBLE_EQ(kmc::mode_coverage(centers, means, stds), 1.0 / 3.0);
  centers.row(1) << 1.0, 1.2;
  EXPECT_DOUBLE_EQ(kmc::mode_coverage(centers, means, stds), 2.0 / 3.0);
}

TEST(Schedule, StepDecay) {
  kmc::LearningRateSchedule s{0.1, 0.5, 10};
  EXPECT_DOUBLE_EQ(s.at(0), 0.1);
  EXPECT_DOUBLE_EQ(s.at(9), 0.1);
  EXPECT_DOUBLE_EQ(s.at(10), 0.05);
  EXPECT_DOUBLE_EQ(s.at(25), 0.025);
}

TEST(Checkpoint, RoundTripsBitwise) {
  auto cfg = small_config(CostKind::MatrixMatrixLogDet);
  cfg.optimizer.kind = kmc::OptimizerKind::SgdMomentum;
  cfg.prior.kind = kmc::PriorKind::Hybrid;
  const auto trained = kmc::fit(kmc::ToyDatasetSpec{}, cfg).final_model;
  const std::string text = kmc::checkpoint_to_json(trained, cfg).dump();
  const auto [model, back] = kmc::checkpoint_from_json(nlohmann::json::parse(text));
  EXPECT_TRUE(same_parameters(model, trained));
  EXPECT_EQ(kmc::train_config_to_json(back), kmc::train_config_to_json(cfg));
  EXPECT_EQ(kmc::checkpoint_to_json(model, back).dump(), text);
}

TEST(Checkpoint, RejectsBadInput) {
  auto j = kmc::checkpoint_to_json(kmc::make_mdn(2, {3}, 2, 1), kmc::TrainConfig{});
  auto wrong_version = j;
  wrong_version["version"] = 99;
  EXPECT_THROW(kmc::checkpoint_from_json(wrong_version), kmc::InvalidArgument);
  auto truncated = j;
  truncated["layers"][0]["rows"] = 4;
  EXPECT_THROW(kmc::checkpoint_from_json(truncated), kmc::InvalidArgument);
  auto bad_cost = j;
  bad_cost["config"]["cost"] = "hinge";
  EXPECT_THROW(kmc::checkpoint_from_json(bad_cost), kmc::InvalidArgument);
}
