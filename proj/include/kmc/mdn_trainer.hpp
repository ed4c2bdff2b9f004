#pragma once

// Mixture density network: noise from a prior is mapped by an MLP to K
// centers, and the implicit mixture (1/K) sum_k N(X - X'_k; v) is fitted to
// data by maximizing one of the kernel costs.

#include "kmc/cost_family.hpp"
#include "kmc/fp_env.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace kmc {

// ---------------------------------------------------------------- prior

enum class PriorKind { Uniform, Gaussian, Hybrid };

inline std::string_view to_string(PriorKind k) {
  switch (k) {
    case PriorKind::Uniform: return "uniform";
    case PriorKind::Gaussian: return "gaussian";
    case PriorKind::Hybrid: return "hybrid";
  }
  return "unknown";
}

inline PriorKind prior_kind_from_string(std::string_view s) {
  for (auto k : {PriorKind::Uniform, PriorKind::Gaussian, PriorKind::Hybrid})
    if (to_string(k) == s) return k;
  throw InvalidArgument("unknown prior kind '" + std::string(s) + "'");
}

/// Noise prior. For the hybrid kind the first hybrid_split dimensions are
/// uniform and the rest standard normal; a negative split means dim / 2.
struct PriorSpec {
  PriorKind kind = PriorKind::Uniform;
  Index dim = 10;
  Index hybrid_split = -1;

  Index uniform_dims() const {
    switch (kind) {
      case PriorKind::Uniform: return dim;
      case PriorKind::Gaussian: return 0;
      case PriorKind::Hybrid: return hybrid_split < 0 ? dim / 2 : hybrid_split;
    }
    return dim;
  }

  void validate() const {
    detail::require(dim >= 1, "PriorSpec: dim must be >= 1");
    if (kind == PriorKind::Hybrid)
      detail::require(uniform_dims() < dim, "PriorSpec: hybrid_split must be < dim");
  }
};

namespace detail {

/// 53 random bits scaled into [0, 1).
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace detail

inline Matrix sample_prior(const PriorSpec& spec, Index k, std::mt19937_64& rng) {
  spec.validate();
  detail::require(k >= 1, "sample_prior: k must be >= 1");
  const Index nu = spec.uniform_dims();
  std::normal_distribution<double> normal;
  Matrix u(k, spec.dim);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < spec.dim; ++j) u(i, j) = j < nu ? detail::unit_uniform(rng) : normal(rng);
  return u;
}

inline Matrix sample_prior(const PriorSpec& spec, Index k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_prior(spec, k, rng);
}

// ---------------------------------------------------------------- network

struct AffineLayer {
  Matrix weight;  ///< out x in
  Vector bias;    ///< out
};

struct LayerGradient {
  Matrix weight;
  Vector bias;
};

/// MLP with tanh between affine layers and a linear output.
class MdnModel {
 public:
  MdnModel() = default;
  explicit MdnModel(std::vector<AffineLayer> layers) : layers_(std::move(layers)) { validate(); }

  const std::vector<AffineLayer>& layers() const { return layers_; }
  std::vector<AffineLayer>& layers() { return layers_; }
  Index input_dim() const { return layers_.front().weight.cols(); }
  Index output_dim() const { return layers_.back().weight.rows(); }

  void validate() const {
    detail::require(!layers_.empty(), "MdnModel: no layers");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      detail::require(l.bias.size() == l.weight.rows(), "MdnModel: bias length differs from layer width");
      if (i > 0)
        detail::require(l.weight.cols() == layers_[i - 1].weight.rows(),
                        "MdnModel: layer " + std::to_string(i) + " does not compose with the previous one");
      detail::require(l.weight.allFinite() && l.bias.allFinite(), "MdnModel: non-finite parameters");
    }
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

 private:
  std::vector<AffineLayer> layers_;
};

/// Glorot-uniform weights with the tanh gain 5/3, zero biases. When a prior
/// is given, the first layer is rescaled by its per-dimension std and its
/// bias cancels the prior mean, so hidden units start away from the linear
/// regime of tanh.
inline MdnModel make_mdn(Index input_dim, const std::vector<Index>& hidden, Index output_dim, std::uint64_t seed,
                         const PriorSpec* prior = nullptr) {
  detail::require(input_dim >= 1 && output_dim >= 1, "make_mdn: dimensions must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<Index> widths{input_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(output_dim);
  std::vector<AffineLayer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    detail::require(widths[i + 1] >= 1, "make_mdn: hidden widths must be >= 1");
    const double gain = i + 2 < widths.size() ? 5.0 / 3.0 : 1.0;
    const double a = gain * std::sqrt(6.0 / static_cast<double>(widths[i] + widths[i + 1]));
    AffineLayer l{Matrix(widths[i + 1], widths[i]), Vector::Zero(widths[i + 1])};
    for (Index c = 0; c < l.weight.cols(); ++c)
      for (Index r = 0; r < l.weight.rows(); ++r) l.weight(r, c) = a * (2.0 * detail::unit_uniform(rng) - 1.0);
    layers.push_back(std::move(l));
  }
  if (prior != nullptr) {
    detail::require(prior->dim == input_dim, "make_mdn: prior dimension differs from input_dim");
    Vector mean = Vector::Zero(input_dim);
    Vector scale = Vector::Ones(input_dim);
    for (Index j = 0; j < prior->uniform_dims(); ++j) {
      mean[j] = 0.5;
      scale[j] = std::sqrt(12.0);
    }
    auto& first = layers.front();
    first.weight = first.weight * scale.asDiagonal();
    first.bias = -first.weight * mean;
  }
  return MdnModel(std::move(layers));
}

/// Activations of every layer; activations[0] is the input.
struct ForwardCache {
  std::vector<Matrix> activations;
};

inline Matrix forward(const MdnModel& model, const Matrix& noise, ForwardCache* cache = nullptr) {
  detail::require(noise.cols() == model.input_dim(), "forward: noise has " + std::to_string(noise.cols()) +
                                                         " columns, model expects " +
                                                         std::to_string(model.input_dim()));
  const auto& layers = model.layers();
  Matrix h = noise;
  if (cache) cache->activations.assign(1, noise);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Matrix z = h * layers[i].weight.transpose();
    z.rowwise() += layers[i].bias.transpose();
    h = i + 1 < layers.size() ? Matrix(z.array().tanh()) : std::move(z);
    if (cache) cache->activations.push_back(h);
  }
  return h;
}

/// Gradients of sum(grad_out .* output) with respect to every layer.
inline std::vector<LayerGradient> backward(const MdnModel& model, const ForwardCache& cache, const Matrix& grad_out) {
  const auto& layers = model.layers();
  detail::require(cache.activations.size() == layers.size() + 1, "backward: cache does not match the model");
  std::vector<LayerGradient> grads(layers.size());
  Matrix delta = grad_out;
  for (std::size_t i = layers.size(); i-- > 0;) {
    if (i + 1 < layers.size()) delta.array() *= 1.0 - cache.activations[i + 1].array().square();
    grads[i].weight = delta.transpose() * cache.activations[i];
    grads[i].bias = delta.colwise().sum().transpose();
    if (i > 0) delta = delta * layers[i].weight;
  }
  return grads;
}

// ---------------------------------------------------------------- datasets

enum class ToyDatasetKind { GaussMixture10, TwoMoons, SingleGaussian, CustomMixture };

inline std::string_view to_string(ToyDatasetKind k) {
  switch (k) {
    case ToyDatasetKind::GaussMixture10: return "gauss_mixture_10";
    case ToyDatasetKind::TwoMoons: return "two_moons";
    case ToyDatasetKind::SingleGaussian: return "single_gaussian";
    case ToyDatasetKind::CustomMixture: return "custom_mixture";
  }
  return "unknown";
}

inline ToyDatasetKind toy_dataset_kind_from_string(std::string_view s) {
  for (auto k : {ToyDatasetKind::GaussMixture10, ToyDatasetKind::TwoMoons, ToyDatasetKind::SingleGaussian,
                 ToyDatasetKind::CustomMixture})
    if (to_string(k) == s) return k;
  throw InvalidArgument("unknown dataset kind '" + std::string(s) + "'");
}

/// gauss_mixture_10 draws 10 means uniformly in [-mean_range, mean_range]^2,
/// rejecting candidates closer than min_separation to an accepted mean.
/// single_gaussian is centered at `center` (origin when empty).
/// custom_mixture takes explicit means (rows) and per-component stds.
struct ToyDatasetSpec {
  ToyDatasetKind kind = ToyDatasetKind::GaussMixture10;
  std::uint64_t seed = 0;
  double component_std = 0.05;
  double mean_range = 1.0;
  double min_separation = 0.3;
  double moon_noise = 0.05;
  Vector center;
  Matrix means;
  Vector stds;

  void validate() const {
    detail::require(component_std > 0.0, "ToyDatasetSpec: component_std must be positive");
    detail::require(moon_noise >= 0.0, "ToyDatasetSpec: moon_noise must be >= 0");
    if (kind == ToyDatasetKind::GaussMixture10) {
      detail::require(mean_range > 0.0 && min_separation >= 0.0, "ToyDatasetSpec: bad mean placement");
      detail::require(min_separation * 4.0 <= 2.0 * mean_range, "ToyDatasetSpec: min_separation too large");
    }
    if (kind == ToyDatasetKind::CustomMixture) {
      detail::require(means.rows() >= 1 && means.cols() >= 1, "ToyDatasetSpec: custom mixture needs means");
      detail::require(stds.size() == means.rows(), "ToyDatasetSpec: one std per custom component required");
      detail::require((stds.array() > 0.0).all(), "ToyDatasetSpec: custom stds must be positive");
    }
  }
};

/// Resolved generator. Component means are fixed at construction; sample()
/// draws from a separate stream.
class ToyDataset {
 public:
  explicit ToyDataset(ToyDatasetSpec spec) : spec_(std::move(spec)), rng_(spec_.seed ^ 0x9e3779b97f4a7c15ULL) {
    spec_.validate();
    std::mt19937_64 layout(spec_.seed);
    switch (spec_.kind) {
      case ToyDatasetKind::GaussMixture10: {
        means_.resize(10, 2);
        Index placed = 0;
        while (placed < 10) {
          Vector c(2);
          c << spec_.mean_range * (2.0 * detail::unit_uniform(layout) - 1.0),
              spec_.mean_range * (2.0 * detail::unit_uniform(layout) - 1.0);
          bool ok = true;
          for (Index i = 0; i < placed; ++i) ok = ok && (means_.row(i).transpose() - c).norm() >= spec_.min_separation;
          if (ok) means_.row(placed++) = c.transpose();
        }
        stds_ = Vector::Constant(10, spec_.component_std);
        break;
      }
      case ToyDatasetKind::SingleGaussian:
        means_ = spec_.center.size() > 0 ? Matrix(spec_.center.transpose()) : Matrix::Zero(1, 2);
        stds_ = Vector::Constant(1, spec_.component_std);
        break;
      case ToyDatasetKind::CustomMixture:
        means_ = spec_.means;
        stds_ = spec_.stds;
        break;
      case ToyDatasetKind::TwoMoons: break;
    }
  }

  const ToyDatasetSpec& spec() const { return spec_; }
  Index dim() const { return spec_.kind == ToyDatasetKind::TwoMoons ? 2 : means_.cols(); }
  bool has_components() const { return spec_.kind != ToyDatasetKind::TwoMoons; }
  const Matrix& component_means() const { return means_; }
  const Vector& component_stds() const { return stds_; }

  Matrix sample(Index n) {
    detail::require(n >= 1, "ToyDataset::sample: n must be >= 1");
    std::normal_distribution<double> normal;
    Matrix x(n, dim());
    for (Index i = 0; i < n; ++i) {
      if (spec_.kind == ToyDatasetKind::TwoMoons) {
        const double t = std::numbers::pi * detail::unit_uniform(rng_);
        const bool upper = (rng_() >> 63) == 0;
        const double px = upper ? std::cos(t) : 1.0 - std::cos(t);
        const double py = upper ? std::sin(t) : 0.5 - std::sin(t);
        x(i, 0) = px - 0.5 + spec_.moon_noise * normal(rng_);
        x(i, 1) = py - 0.25 + spec_.moon_noise * normal(rng_);
      } else {
        const auto c = static_cast<Index>(rng_() % static_cast<std::uint64_t>(means_.rows()));
        for (Index j = 0; j < x.cols(); ++j) x(i, j) = means_(c, j) + stds_[c] * normal(rng_);
      }
    }
    return x;
  }

 private:
  ToyDatasetSpec spec_;
  std::mt19937_64 rng_;
  Matrix means_;
  Vector stds_;
};

/// Fraction of components with at least one center within 2 std of the mean.
inline double mode_coverage(const Matrix& centers, const Matrix& means, const Vector& stds) {
  detail::require(centers.cols() == means.cols(), "mode_coverage: dimension mismatch");
  Index hit = 0;
  for (Index c = 0; c < means.rows(); ++c) {
    const double r = 2.0 * stds[c];
    bool found = false;
    for (Index k = 0; k < centers.rows() && !found; ++k) found = (centers.row(k) - means.row(c)).norm() <= r;
    hit += found ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(means.rows());
}

// ---------------------------------------------------------------- training

enum class OptimizerKind { SgdMomentum, AdaptiveMoments };

inline std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::SgdMomentum ? "sgd_momentum" : "adaptive_moments";
}

inline OptimizerKind optimizer_kind_from_string(std::string_view s) {
  if (s == "sgd_momentum") return OptimizerKind::SgdMomentum;
  if (s == "adaptive_moments") return OptimizerKind::AdaptiveMoments;
  throw InvalidArgument("unknown optimizer '" + std::string(s) + "'");
}

/// lr(step) = initial * decay^floor(step / decay_every)
struct LearningRateSchedule {
  double initial = 1e-3;
  double decay = 1.0;
  std::int64_t decay_every = 1000;

  double at(std::int64_t step) const { return initial * std::pow(decay, static_cast<double>(step / decay_every)); }
};

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdaptiveMoments;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;
};

struct TrainConfig {
  CostKind cost = CostKind::SvdNuclear;
  double bandwidth = 0.001;
  Index batch_n = 256;
  Index centers_k = 256;
  std::int64_t steps = 1000;
  LearningRateSchedule learning_rate;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  PriorSpec prior;
  RegularizationPolicy regularization;
  std::vector<Index> hidden{128, 128, 128};

  void validate() const {
    detail::require(bandwidth > 0.0, "TrainConfig: bandwidth must be positive");
    detail::require(batch_n >= 1 && centers_k >= 1 && steps >= 1, "TrainConfig: counts must be >= 1");
    detail::require(learning_rate.initial >= 0.0 && learning_rate.decay > 0.0 && learning_rate.decay_every >= 1,
                    "TrainConfig: bad learning-rate schedule");
    detail::require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 &&
                        optimizer.beta2 < 1.0 && optimizer.epsilon > 0.0,
                    "TrainConfig: bad optimizer hyperparameters");
    prior.validate();
    regularization.validate();
  }
};

/// Optimizer moments plus the noise stream and step counter.
struct TrainState {
  std::int64_t step = 0;
  std::vector<LayerGradient> first;
  std::vector<LayerGradient> second;
  std::mt19937_64 noise_rng;

  TrainState() = default;
  TrainState(const MdnModel& model, std::uint64_t seed) : noise_rng(seed) {
    for (const auto& l : model.layers()) {
      first.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
      second.push_back(first.back());
    }
  }
};

struct StepReport {
  double cost_value = 0.0;
  double grad_norm = 0.0;
};

/// Value and parameter gradient of the cost for fixed noise.
struct PipelineGradient {
  CostReport cost;
  std::vector<LayerGradient> params;
};

inline PipelineGradient pipeline_gradient(const MdnModel& model, const Matrix& noise, const Matrix& data_batch,
                                          const TrainConfig& cfg) {
  ForwardCache cache;
  const Matrix centers = forward(model, noise, &cache);
  CostReport r = evaluate(cfg.cost, SampleBatch(data_batch, cfg.bandwidth), SampleBatch(centers, cfg.bandwidth),
                          cfg.regularization);
  auto params = backward(model, cache, r.grad_centers);
  return {std::move(r), std::move(params)};
}

namespace detail {

template <class P>
void adam_update(P& param, const P& grad, P& m, P& v, double lr, double c1, double c2, const OptimizerConfig& o) {
  m = o.beta1 * m + (1.0 - o.beta1) * grad;
  v = o.beta2 * v + (1.0 - o.beta2) * grad.cwiseProduct(grad);
  param.array() += lr * (m.array() / c1) / ((v.array() / c2).sqrt() + o.epsilon);
}

template <class P>
void momentum_update(P& param, const P& grad, P& m, double lr, const OptimizerConfig& o) {
  m = o.momentum * m + grad;
  param += lr * m;
}

}  // namespace detail

/// One ascent step on a fresh noise draw against the given data batch.
inline StepReport train_step(MdnModel& model, const Matrix& data_batch, const TrainConfig& cfg, TrainState& state) {
  cfg.validate();
  detail::require(data_batch.cols() == model.output_dim(), "train_step: data dimension differs from model output");
  detail::require(state.first.size() == model.layers().size(), "train_step: optimizer state does not match model");
  const Matrix noise = sample_prior(cfg.prior, cfg.centers_k, state.noise_rng);
  const PipelineGradient pg = pipeline_gradient(model, noise, data_batch, cfg);
  if (!std::isfinite(pg.cost.value))
    throw NumericalError("train_step: non-finite cost at step " + std::to_string(state.step));

  double sq = 0.0;
  for (const auto& g : pg.params) sq += g.weight.squaredNorm() + g.bias.squaredNorm();
  const double lr = cfg.learning_rate.at(state.step);
  ++state.step;
  if (lr == 0.0) return {pg.cost.value, std::sqrt(sq)};

  const auto& o = cfg.optimizer;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (o.kind == OptimizerKind::AdaptiveMoments) {
      detail::adam_update(layers[i].weight, pg.params[i].weight, state.first[i].weight, state.second[i].weight, lr, c1,
                          c2, o);
      detail::adam_update(layers[i].bias, pg.params[i].bias, state.first[i].bias, state.second[i].bias, lr, c1, c2, o);
    } else {
      detail::momentum_update(layers[i].weight, pg.params[i].weight, state.first[i].weight, lr, o);
      detail::momentum_update(layers[i].bias, pg.params[i].bias, state.first[i].bias, lr, o);
    }
  }
  return {pg.cost.value, std::sqrt(sq)};
}

struct FitResult {
  MdnModel final_model;
  std::vector<double> cost_trace;
  double mode_coverage = std::numeric_limits<double>::quiet_NaN();  ///< NaN for two_moons
  Matrix final_centers;
};

/// Raised by fit() on a non-finite cost; carries the trace up to the failure.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, std::vector<double> partial)
      : NumericalError(what), partial_trace(std::move(partial)) {}
  std::vector<double> partial_trace;
};

/// Trains `model` for cfg.steps steps, each on a fresh data batch. Coverage
/// is measured on K centers from a noise draw that is independent of the
/// training stream.
inline FitResult fit(MdnModel model, const ToyDatasetSpec& dataset, const TrainConfig& cfg) {
  cfg.validate();
  const ScopedFlushToZero ftz;
  ToyDataset data(dataset);
  detail::require(data.dim() == model.output_dim(), "fit: dataset dimension differs from model output");
  detail::require(cfg.prior.dim == model.input_dim(), "fit: prior dimension differs from model input");
  TrainState state(model, cfg.seed);
  FitResult out;
  out.cost_trace.reserve(static_cast<std::size_t>(cfg.steps));
  for (std::int64_t s = 0; s < cfg.steps; ++s) {
    try {
      out.cost_trace.push_back(train_step(model, data.sample(cfg.batch_n), cfg, state).cost_value);
    } catch (const NumericalError& e) {
      throw TrainingDiverged(std::string("fit: diverged: ") + e.what(), std::move(out.cost_trace));
    }
  }
  out.final_centers = forward(model, sample_prior(cfg.prior, cfg.centers_k, cfg.seed ^ 0xd1b54a32d192ed03ULL));
  if (data.has_components()) out.mode_coverage = mode_coverage(out.final_centers, data.component_means(), data.component_stds());
  out.final_model = std::move(model);
  return out;
}

/// Builds the default network from cfg.seed and trains it.
inline FitResult fit(const ToyDatasetSpec& dataset, const TrainConfig& cfg) {
  cfg.validate();
  const Index d = ToyDataset(dataset).dim();
  return fit(make_mdn(cfg.prior.dim, cfg.hidden, d, cfg.seed, &cfg.prior), dataset, cfg);
}

// ---------------------------------------------------------------- checkpoints

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, Index rows, Index cols) {
  require(j.is_array() && static_cast<Index>(j.size()) == rows, "checkpoint: row count mismatch");
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const auto& r = j[static_cast<std::size_t>(i)];
    require(r.is_array() && static_cast<Index>(r.size()) == cols, "checkpoint: column count mismatch");
    for (Index c = 0; c < cols; ++c) m(i, c) = r[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace detail

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"cost", std::string(to_string(c.cost))},
          {"bandwidth", c.bandwidth},
          {"batch_n", c.batch_n},
          {"centers_k", c.centers_k},
          {"steps", c.steps},
          {"learning_rate",
           {{"initial", c.learning_rate.initial},
            {"decay", c.learning_rate.decay},
            {"decay_every", c.learning_rate.decay_every}}},
          {"seed", c.seed},
          {"optimizer",
           {{"kind", std::string(to_string(c.optimizer.kind))},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"epsilon", c.optimizer.epsilon},
            {"momentum", c.optimizer.momentum}}},
          {"prior",
           {{"kind", std::string(to_string(c.prior.kind))},
            {"dim", c.prior.dim},
            {"hybrid_split", c.prior.hybrid_split}}},
          {"jitter_rel", c.regularization.jitter_rel},
          {"hidden", c.hidden}};
}

/// Missing keys keep their defaults; unknown enum names throw.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("cost")) c.cost = cost_kind_from_string(j.at("cost").get<std::string>());
  c.bandwidth = j.value("bandwidth", c.bandwidth);
  c.batch_n = j.value("batch_n", c.batch_n);
  c.centers_k = j.value("centers_k", c.centers_k);
  c.steps = j.value("steps", c.steps);
  if (j.contains("learning_rate")) {
    const auto& l = j.at("learning_rate");
    c.learning_rate.initial = l.value("initial", c.learning_rate.initial);
    c.learning_rate.decay = l.value("decay", c.learning_rate.decay);
    c.learning_rate.decay_every = l.value("decay_every", c.learning_rate.decay_every);
  }
  c.seed = j.value("seed", c.seed);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    if (o.contains("kind")) c.optimizer.kind = optimizer_kind_from_string(o.at("kind").get<std::string>());
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.epsilon = o.value("epsilon", c.optimizer.epsilon);
    c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
  }
  if (j.contains("prior")) {
    const auto& p = j.at("prior");
    if (p.contains("kind")) c.prior.kind = prior_kind_from_string(p.at("kind").get<std::string>());
    c.prior.dim = p.value("dim", c.prior.dim);
    c.prior.hybrid_split = p.value("hybrid_split", c.prior.hybrid_split);
  }
  c.regularization.jitter_rel = j.value("jitter_rel", c.regularization.jitter_rel);
  if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::vector<Index>>();
  c.validate();
  return c;
}

inline nlohmann::json checkpoint_to_json(const MdnModel& model, const TrainConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.layers())
    layers.push_back({{"rows", l.weight.rows()},
                      {"cols", l.weight.cols()},
                      {"weight", detail::matrix_to_json(l.weight)},
                      {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  return {{"version", kCheckpointVersion}, {"config", train_config_to_json(cfg)}, {"seed", cfg.seed}, {"layers", layers}};
}

inline std::pair<MdnModel, TrainConfig> checkpoint_from_json(const nlohmann::json& j) {
  detail::require(j.value("version", -1) == kCheckpointVersion, "checkpoint: unsupported version");
  std::vector<AffineLayer> layers;
  for (const auto& l : j.at("layers")) {
    const Index rows = l.at("rows").get<Index>();
    const Index cols = l.at("cols").get<Index>();
    const auto bias = l.at("bias").get<std::vector<double>>();
    detail::require(static_cast<Index>(bias.size()) == rows, "checkpoint: bias length mismatch");
    layers.push_back({detail::matrix_from_json(l.at("weight"), rows, cols),
                      Eigen::Map<const Vector>(bias.data(), rows)});
  }
  return {MdnModel(std::move(layers)), train_config_from_json(j.at("config"))};
}

}  // namespace kmc
