#pragma once

// Gaussian-product classifier over image patches. Every patch position t is
// mapped independently through M layers
//   y_m(t) = BN(exp(-||A_m y_{m-1}(t) - W_m(t, u)||^2)),  u = 1..width_m,
// and positions only meet in the final layer
//   s = alpha * A_F exp(-(1/T) sum_t ||y_M(t) - W_F(t, j)||^2) + b_F.
//
// Activations are stored position-major: row t * B + b holds image b at
// position t, so each position is a contiguous block of B rows.

#include "kmc/fp_env.hpp"
#include "kmc/types.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace kmc {

// ---------------------------------------------------------------- images

/// N images of size height x width x channels, one per row of `pixels`,
/// flattened as ((y * width) + x) * channels + c.
struct ImageSet {
  Index height = 0;
  Index width = 0;
  Index channels = 1;
  Matrix pixels;
  std::vector<int> labels;

  Index size() const { return pixels.rows(); }
  Index pixel_count() const { return height * width * channels; }

  void validate() const {
    detail::require(height >= 1 && width >= 1 && channels >= 1, "ImageSet: empty image shape");
    detail::require(pixels.cols() == pixel_count(), "ImageSet: row length differs from height*width*channels");
    detail::require(labels.empty() || static_cast<Index>(labels.size()) == pixels.rows(),
                    "ImageSet: label count differs from image count");
  }

  ImageSet subset(Index first, Index count) const {
    detail::require(first >= 0 && count >= 0 && first + count <= size(), "ImageSet::subset: range out of bounds");
    ImageSet out{height, width, channels, pixels.middleRows(first, count), {}};
    if (!labels.empty()) out.labels.assign(labels.begin() + first, labels.begin() + first + count);
    return out;
  }
};

/// Patches of one image at every pixel (stride 1, zero padding), so T =
/// height * width. Row t = y * width + x holds the patch centered there,
/// flattened as ((dy * patch) + dx) * channels + c.
inline Matrix extract_patches(const double* image, Index height, Index width, Index channels, Index patch) {
  detail::require(patch >= 1 && patch % 2 == 1, "extract_patches: patch size must be odd and >= 1");
  detail::require(patch <= std::min(height, width), "extract_patches: patch larger than the image");
  const Index r = patch / 2;
  Matrix out = Matrix::Zero(height * width, patch * patch * channels);
  for (Index y = 0; y < height; ++y)
    for (Index x = 0; x < width; ++x)
      for (Index dy = 0; dy < patch; ++dy) {
        const Index sy = y + dy - r;
        if (sy < 0 || sy >= height) continue;
        for (Index dx = 0; dx < patch; ++dx) {
          const Index sx = x + dx - r;
          if (sx < 0 || sx >= width) continue;
          for (Index c = 0; c < channels; ++c)
            out(y * width + x, (dy * patch + dx) * channels + c) = image[(sy * width + sx) * channels + c];
        }
      }
  return out;
}

inline Matrix extract_patches(const ImageSet& set, Index index, Index patch) {
  detail::require(index >= 0 && index < set.size(), "extract_patches: image index out of range");
  const Eigen::Matrix<double, 1, Eigen::Dynamic> row = set.pixels.row(index);
  return extract_patches(row.data(), set.height, set.width, set.channels, patch);
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw InvalidArgument(path + ": truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

/// Unsigned-byte IDX file: returns dims and raw bytes.
inline std::pair<std::vector<Index>, std::vector<unsigned char>> read_idx_u8(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument(path + ": cannot open");
  const std::uint32_t magic = read_be32(in, path);
  if ((magic >> 8) != 0x08) throw InvalidArgument(path + ": not an unsigned-byte IDX file");
  const std::uint32_t ndim = magic & 0xff;
  if (ndim < 1 || ndim > 4) throw InvalidArgument(path + ": unsupported IDX rank " + std::to_string(ndim));
  std::vector<Index> dims;
  std::size_t total = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    dims.push_back(read_be32(in, path));
    total *= static_cast<std::size_t>(dims.back());
  }
  std::vector<unsigned char> bytes(total);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(total));
  if (static_cast<std::size_t>(in.gcount()) != total) throw InvalidArgument(path + ": truncated IDX payload");
  return {dims, bytes};
}

}  // namespace detail

/// Reads an IDX image file and its label file; pixels scaled to [0, 1].
/// At most `limit` images are kept when limit >= 0.
inline ImageSet read_idx(const std::string& images_path, const std::string& labels_path, Index limit = -1) {
  auto [idims, ibytes] = detail::read_idx_u8(images_path);
  auto [ldims, lbytes] = detail::read_idx_u8(labels_path);
  if (idims.size() != 3) throw InvalidArgument(images_path + ": expected a rank-3 image file");
  if (ldims.size() != 1 || ldims[0] != idims[0]) throw InvalidArgument(labels_path + ": label count mismatch");
  const Index n = limit >= 0 ? std::min(limit, idims[0]) : idims[0];
  ImageSet set{idims[1], idims[2], 1, Matrix(n, idims[1] * idims[2]), std::vector<int>(static_cast<std::size_t>(n))};
  for (Index i = 0; i < n; ++i) {
    for (Index p = 0; p < set.pixels.cols(); ++p)
      set.pixels(i, p) = ibytes[static_cast<std::size_t>(i * set.pixels.cols() + p)] / 255.0;
    set.labels[static_cast<std::size_t>(i)] = lbytes[static_cast<std::size_t>(i)];
  }
  return set;
}

/// CIFAR-10 binary batch: records of 1 label byte followed by 1024 red,
/// 1024 green and 1024 blue bytes of a 32x32 image.
inline ImageSet read_cifar_binary(const std::string& path, Index limit = -1) {
  constexpr Index side = 32, plane = side * side, record = 1 + 3 * plane;
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw InvalidArgument(path + ": cannot open");
  const auto bytes = static_cast<Index>(in.tellg());
  if (bytes == 0 || bytes % record != 0) throw InvalidArgument(path + ": size is not a multiple of the record size");
  in.seekg(0);
  Index n = bytes / record;
  if (limit >= 0) n = std::min(n, limit);
  ImageSet set{side, side, 3, Matrix(n, 3 * plane), std::vector<int>(static_cast<std::size_t>(n))};
  std::vector<unsigned char> buf(record);
  for (Index i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(buf.data()), record);
    set.labels[static_cast<std::size_t>(i)] = buf[0];
    for (Index c = 0; c < 3; ++c)
      for (Index p = 0; p < plane; ++p) set.pixels(i, p * 3 + c) = buf[static_cast<std::size_t>(1 + c * plane + p)] / 255.0;
  }
  return set;
}

// ---------------------------------------------------------------- network

enum class BnMode { Train, Eval };

/// projection_dim is the width of A_m y; final_anchors is the number of
/// final Gaussians J. Neither is fixed by the model definition.
struct PatchNetConfig {
  Index patch_size = 1;
  std::vector<Index> layer_widths{64, 64, 64};
  Index projection_dim = 16;
  Index final_anchors = 32;
  Index n_classes = 10;
  double alpha = 1.0;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(patch_size >= 1 && patch_size % 2 == 1, "PatchNetConfig: patch_size must be odd and >= 1");
    detail::require(!layer_widths.empty(), "PatchNetConfig: at least one layer required");
    for (Index w : layer_widths) detail::require(w >= 1, "PatchNetConfig: layer widths must be >= 1");
    detail::require(projection_dim >= 1 && final_anchors >= 1 && n_classes >= 2, "PatchNetConfig: bad sizes");
    detail::require(bn_epsilon > 0.0, "PatchNetConfig: bn_epsilon must be positive");
    detail::require(bn_momentum > 0.0 && bn_momentum <= 1.0, "PatchNetConfig: bn_momentum must be in (0, 1]");
  }
};

/// Parameters and running statistics of one Gaussian layer. Per-position
/// quantities are stacked position-major: anchors row t * width + u is
/// W(t, u); gamma, beta and the running moments are T x width.
struct GaussLayer {
  Matrix a;        ///< projection_dim x w_in
  Matrix anchors;  ///< (T * width) x projection_dim
  Matrix gamma;
  Matrix beta;
  Matrix running_mean;
  Matrix running_var;

  Index width() const { return gamma.cols(); }
  Index positions() const { return gamma.rows(); }
};

struct PatchNet {
  PatchNetConfig config;
  Index positions = 0;  ///< T
  Index input_dim = 0;  ///< patch_size^2 * channels
  std::vector<GaussLayer> layers;
  Matrix final_anchors;  ///< (T * J) x width_M, row t * J + j is W_F(t, j)
  Matrix a_f;            ///< n_classes x J
  Vector b_f;            ///< n_classes
  double alpha = 1.0;
};

/// Anchors and projections start at the scale where exponents are O(1).
/// The last BN scale starts at 1 / sqrt(width_M) so that the final mean
/// squared distance is O(1) instead of O(width_M).
inline PatchNet make_patch_net(const PatchNetConfig& cfg, Index height, Index width, Index channels) {
  cfg.validate();
  detail::require(cfg.patch_size <= std::min(height, width), "make_patch_net: patch larger than the image");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal;
  auto gaussian = [&](Index r, Index c, double sd) {
    Matrix m(r, c);
    for (Index j = 0; j < c; ++j)
      for (Index i = 0; i < r; ++i) m(i, j) = sd * normal(rng);
    return m;
  };

  PatchNet net;
  net.config = cfg;
  net.positions = height * width;
  net.input_dim = cfg.patch_size * cfg.patch_size * channels;
  net.alpha = cfg.alpha;
  const auto p = static_cast<double>(cfg.projection_dim);
  Index w_in = net.input_dim;
  for (std::size_t m = 0; m < cfg.layer_widths.size(); ++m) {
    const Index w = cfg.layer_widths[m];
    GaussLayer l;
    l.a = gaussian(cfg.projection_dim, w_in, 1.0 / std::sqrt(2.0 * p * static_cast<double>(w_in)));
    l.anchors = gaussian(net.positions * w, cfg.projection_dim, 1.0 / std::sqrt(2.0 * p));
    const bool last = m + 1 == cfg.layer_widths.size();
    l.gamma = Matrix::Constant(net.positions, w, last ? 1.0 / std::sqrt(static_cast<double>(w)) : 1.0);
    l.beta = Matrix::Zero(net.positions, w);
    l.running_mean = Matrix::Zero(net.positions, w);
    l.running_var = Matrix::Ones(net.positions, w);
    net.layers.push_back(std::move(l));
    w_in = w;
  }
  net.final_anchors = gaussian(net.positions * cfg.final_anchors, w_in, 1.0 / std::sqrt(static_cast<double>(w_in)));
  net.a_f = gaussian(cfg.n_classes, cfg.final_anchors, 1.0 / std::sqrt(static_cast<double>(cfg.final_anchors)));
  net.b_f = Vector::Zero(cfg.n_classes);
  return net;
}

/// Gradient buffers with the same shapes as the trainable parameters.
struct PatchNetGrad {
  struct Layer {
    Matrix a, anchors, gamma, beta;
  };
  std::vector<Layer> layers;
  Matrix final_anchors;
  Matrix a_f;
  Vector b_f;
  double alpha = 0.0;
};

using FlatView = std::pair<double*, Index>;

/// Trainable parameters as flat views, in a fixed order shared with
/// grad_views().
inline std::vector<FlatView> parameter_views(PatchNet& net) {
  std::vector<FlatView> v;
  for (auto& l : net.layers)
    for (Matrix* m : {&l.a, &l.anchors, &l.gamma, &l.beta}) v.emplace_back(m->data(), m->size());
  v.emplace_back(net.final_anchors.data(), net.final_anchors.size());
  v.emplace_back(net.a_f.data(), net.a_f.size());
  v.emplace_back(net.b_f.data(), net.b_f.size());
  v.emplace_back(&net.alpha, 1);
  return v;
}

inline std::vector<FlatView> grad_views(PatchNetGrad& g) {
  std::vector<FlatView> v;
  for (auto& l : g.layers)
    for (Matrix* m : {&l.a, &l.anchors, &l.gamma, &l.beta}) v.emplace_back(m->data(), m->size());
  v.emplace_back(g.final_anchors.data(), g.final_anchors.size());
  v.emplace_back(g.a_f.data(), g.a_f.size());
  v.emplace_back(g.b_f.data(), g.b_f.size());
  v.emplace_back(&g.alpha, 1);
  return v;
}

inline PatchNetGrad zero_grad(const PatchNet& net) {
  PatchNetGrad g;
  for (const auto& l : net.layers)
    g.layers.push_back({Matrix::Zero(l.a.rows(), l.a.cols()), Matrix::Zero(l.anchors.rows(), l.anchors.cols()),
                        Matrix::Zero(l.gamma.rows(), l.gamma.cols()), Matrix::Zero(l.beta.rows(), l.beta.cols())});
  g.final_anchors = Matrix::Zero(net.final_anchors.rows(), net.final_anchors.cols());
  g.a_f = Matrix::Zero(net.a_f.rows(), net.a_f.cols());
  g.b_f = Vector::Zero(net.b_f.size());
  return g;
}

/// Intermediate values of one layer for a position-major batch.
struct LayerCache {
  Matrix input;  ///< (T*B) x w_in
  Matrix z;      ///< (T*B) x p, A y
  Matrix h;      ///< (T*B) x w, pre-BN activations
  Matrix xhat;   ///< normalized activations
  Matrix inv_std;  ///< T x w
};

/// One Gaussian layer on a position-major batch of B images.
inline Matrix layer_forward(GaussLayer& layer, const Matrix& y_prev, Index batch, BnMode mode, double eps,
                            double momentum, LayerCache* cache = nullptr) {
  const Index t_count = layer.positions();
  const Index w = layer.width();
  detail::require(y_prev.rows() == t_count * batch, "layer_forward: expected " + std::to_string(t_count * batch) +
                                                        " rows, got " + std::to_string(y_prev.rows()));
  detail::require(y_prev.cols() == layer.a.cols(), "layer_forward: input width differs from A columns");
  const Matrix z = y_prev * layer.a.transpose();
  Matrix h(t_count * batch, w);
  Matrix xhat(t_count * batch, w);
  Matrix inv_std(t_count, w);
  Matrix out(t_count * batch, w);
  for (Index t = 0; t < t_count; ++t) {
    const auto zt = z.middleRows(t * batch, batch);
    const auto wt = layer.anchors.middleRows(t * w, w);
    const Vector zn = zt.rowwise().squaredNorm();
    const Vector wn = wt.rowwise().squaredNorm();
    Matrix d = -2.0 * zt * wt.transpose();
    d.colwise() += zn;
    d.rowwise() += wn.transpose();
    auto ht = h.middleRows(t * batch, batch);
    ht = (-d.cwiseMax(0.0)).array().exp().matrix();

    Eigen::RowVectorXd mean, var;
    if (mode == BnMode::Train) {
      mean = ht.colwise().mean();
      var = (ht.rowwise() - mean).array().square().colwise().mean().matrix();
      layer.running_mean.row(t) = (1.0 - momentum) * layer.running_mean.row(t) + momentum * mean;
      const double unbias = batch > 1 ? static_cast<double>(batch) / static_cast<double>(batch - 1) : 1.0;
      layer.running_var.row(t) = (1.0 - momentum) * layer.running_var.row(t) + momentum * unbias * var;
    } else {
      mean = layer.running_mean.row(t);
      var = layer.running_var.row(t);
    }
    inv_std.row(t) = (var.array() + eps).rsqrt().matrix();
    auto xt = xhat.middleRows(t * batch, batch);
    xt = ((ht.rowwise() - mean).array().rowwise() * inv_std.row(t).array()).matrix();
    out.middleRows(t * batch, batch) =
        ((xt.array().rowwise() * layer.gamma.row(t).array()).rowwise() + layer.beta.row(t).array()).matrix();
  }
  if (cache) *cache = {y_prev, z, std::move(h), std::move(xhat), std::move(inv_std)};
  return out;
}

/// Backward of layer_forward. Returns the gradient with respect to y_prev
/// and accumulates parameter gradients into `g`.
inline Matrix layer_backward(const GaussLayer& layer, const LayerCache& c, const Matrix& g_out, Index batch,
                             BnMode mode, PatchNetGrad::Layer& g) {
  const Index t_count = layer.positions();
  const Index w = layer.width();
  g.a = Matrix::Zero(layer.a.rows(), layer.a.cols());
  g.anchors = Matrix::Zero(layer.anchors.rows(), layer.anchors.cols());
  g.gamma = Matrix::Zero(t_count, w);
  g.beta = Matrix::Zero(t_count, w);
  Matrix g_z(c.z.rows(), c.z.cols());
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (Index t = 0; t < t_count; ++t) {
    const auto go = g_out.middleRows(t * batch, batch);
    const auto xt = c.xhat.middleRows(t * batch, batch);
    g.gamma.row(t) = go.cwiseProduct(xt).colwise().sum();
    g.beta.row(t) = go.colwise().sum();
    const Matrix g_xhat = (go.array().rowwise() * layer.gamma.row(t).array()).matrix();
    Matrix g_h;
    if (mode == BnMode::Train) {
      const Eigen::RowVectorXd m1 = g_xhat.colwise().sum() * inv_b;
      const Eigen::RowVectorXd m2 = g_xhat.cwiseProduct(xt).colwise().sum() * inv_b;
      g_h = (((g_xhat.rowwise() - m1).array() - xt.array().rowwise() * m2.array()).rowwise() *
             c.inv_std.row(t).array())
                .matrix();
    } else {
      g_h = (g_xhat.array().rowwise() * c.inv_std.row(t).array()).matrix();
    }
    // h = exp(-D), D = ||z - W_u||^2
    const Matrix g_d = -g_h.cwiseProduct(c.h.middleRows(t * batch, batch));
    const auto zt = c.z.middleRows(t * batch, batch);
    const auto wt = layer.anchors.middleRows(t * w, w);
    const Vector row_sum = g_d.rowwise().sum();
    const Eigen::RowVectorXd col_sum = g_d.colwise().sum();
    g_z.middleRows(t * batch, batch) = 2.0 * (row_sum.asDiagonal() * zt - g_d * wt);
    g.anchors.middleRows(t * w, w) = -2.0 * (g_d.transpose() * zt - col_sum.transpose().asDiagonal() * wt);
  }
  g.a = g_z.transpose() * c.input;
  return g_z * layer.a;
}

struct NetCache {
  std::vector<LayerCache> layers;
  Matrix features;  ///< (T*B) x width_M
  Matrix e;         ///< B x J, mean squared distances
  Matrix gauss;     ///< B x J, exp(-e)
};

/// Position-major input batch: rows t * B + b hold the patch of image b at
/// position t.
inline Matrix patch_batch(const ImageSet& set, const std::vector<Index>& indices, Index patch) {
  const Index b = static_cast<Index>(indices.size());
  const Index t_count = set.height * set.width;
  Matrix out(t_count * b, patch * patch * set.channels);
  for (Index i = 0; i < b; ++i) {
    const Matrix p = extract_patches(set, indices[static_cast<std::size_t>(i)], patch);
    for (Index t = 0; t < t_count; ++t) out.row(t * b + i) = p.row(t);
  }
  return out;
}

/// Final-layer Gaussians exp(-(1/T) sum_t ||y(t) - W_F(t, j)||^2), B x J.
inline Matrix final_gaussians(const PatchNet& net, const Matrix& features, Index batch, Matrix* e_out = nullptr) {
  const Index t_count = net.positions;
  const Index j_count = net.config.final_anchors;
  Matrix e = Matrix::Zero(batch, j_count);
  for (Index t = 0; t < t_count; ++t) {
    const auto ft = features.middleRows(t * batch, batch);
    const auto wt = net.final_anchors.middleRows(t * j_count, j_count);
    Matrix d = -2.0 * ft * wt.transpose();
    d.colwise() += ft.rowwise().squaredNorm();
    d.rowwise() += wt.rowwise().squaredNorm().transpose();
    e += d.cwiseMax(0.0);
  }
  e /= static_cast<double>(t_count);
  if (e_out) *e_out = e;
  return (-e).array().exp().matrix();
}

/// Class scores (B x n_classes) for a position-major input batch.
inline Matrix net_forward_batch(PatchNet& net, const Matrix& input, Index batch, BnMode mode,
                                NetCache* cache = nullptr) {
  detail::require(input.cols() == net.input_dim, "net_forward: patch width differs from the network input");
  detail::require(input.rows() == net.positions * batch, "net_forward: row count differs from positions * batch");
  if (cache) cache->layers.resize(net.layers.size());
  Matrix y = input;
  for (std::size_t m = 0; m < net.layers.size(); ++m)
    y = layer_forward(net.layers[m], y, batch, mode, net.config.bn_epsilon, net.config.bn_momentum,
                      cache ? &cache->layers[m] : nullptr);
  Matrix e;
  Matrix gauss = final_gaussians(net, y, batch, &e);
  Matrix scores = net.alpha * gauss * net.a_f.transpose();
  scores.rowwise() += net.b_f.transpose();
  if (cache) {
    cache->features = std::move(y);
    cache->e = std::move(e);
    cache->gauss = std::move(gauss);
  }
  return scores;
}

inline Matrix net_forward(PatchNet& net, const ImageSet& images, const std::vector<Index>& indices, BnMode mode) {
  images.validate();
  detail::require(images.height * images.width == net.positions, "net_forward: image size differs from the network");
  detail::require(images.channels * net.config.patch_size * net.config.patch_size == net.input_dim,
                  "net_forward: channel count differs from the network");
  return net_forward_batch(net, patch_batch(images, indices, net.config.patch_size),
                           static_cast<Index>(indices.size()), mode);
}

/// Gradient of sum(g_scores .* scores) with respect to every parameter.
inline PatchNetGrad net_backward(const PatchNet& net, const NetCache& c, const Matrix& g_scores, Index batch,
                                 BnMode mode) {
  PatchNetGrad g;
  const Index t_count = net.positions;
  const Index j_count = net.config.final_anchors;
  const Matrix lin = c.gauss * net.a_f.transpose();
  g.alpha = g_scores.cwiseProduct(lin).sum();
  g.a_f = net.alpha * g_scores.transpose() * c.gauss;
  g.b_f = g_scores.colwise().sum().transpose();
  const Matrix g_gauss = net.alpha * g_scores * net.a_f;
  const Matrix g_e = -g_gauss.cwiseProduct(c.gauss) / static_cast<double>(t_count);  // includes 1/T

  g.final_anchors = Matrix::Zero(net.final_anchors.rows(), net.final_anchors.cols());
  Matrix g_y(c.features.rows(), c.features.cols());
  const Vector row_sum = g_e.rowwise().sum();
  const Eigen::RowVectorXd col_sum = g_e.colwise().sum();
  for (Index t = 0; t < t_count; ++t) {
    const auto ft = c.features.middleRows(t * batch, batch);
    const auto wt = net.final_anchors.middleRows(t * j_count, j_count);
    g_y.middleRows(t * batch, batch) = 2.0 * (row_sum.asDiagonal() * ft - g_e * wt);
    g.final_anchors.middleRows(t * j_count, j_count) =
        -2.0 * (g_e.transpose() * ft - col_sum.transpose().asDiagonal() * wt);
  }
  g.layers.resize(net.layers.size());
  for (std::size_t m = net.layers.size(); m-- > 0;)
    g_y = layer_backward(net.layers[m], c.layers[m], g_y, batch, mode, g.layers[m]);
  return g;
}

/// Mean softmax cross-entropy and its gradient with respect to the scores.
inline double softmax_cross_entropy(const Matrix& scores, const std::vector<int>& labels, Matrix* grad = nullptr) {
  detail::require(static_cast<Index>(labels.size()) == scores.rows(), "softmax_cross_entropy: label count mismatch");
  const double inv_b = 1.0 / static_cast<double>(scores.rows());
  double loss = 0.0;
  if (grad) grad->resize(scores.rows(), scores.cols());
  for (Index i = 0; i < scores.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    detail::require(y >= 0 && y < scores.cols(), "softmax_cross_entropy: label out of range");
    const double mx = scores.row(i).maxCoeff();
    const Eigen::RowVectorXd ex = (scores.row(i).array() - mx).exp().matrix();
    const double z = ex.sum();
    loss += std::log(z) + mx - scores(i, y);
    if (grad) {
      grad->row(i) = ex / z * inv_b;
      (*grad)(i, y) -= inv_b;
    }
  }
  return loss * inv_b;
}

inline int argmax_row(const Matrix& m, Index row) {
  Index arg = 0;
  m.row(row).maxCoeff(&arg);
  return static_cast<int>(arg);
}

/// Eval-mode accuracy, evaluated in chunks of `chunk` images.
inline double accuracy(PatchNet& net, const ImageSet& set, Index chunk = 100) {
  detail::require(!set.labels.empty(), "accuracy: labels required");
  const ScopedFlushToZero ftz;
  Index correct = 0;
  for (Index first = 0; first < set.size(); first += chunk) {
    const Index n = std::min(chunk, set.size() - first);
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), first);
    const Matrix s = net_forward(net, set, idx, BnMode::Eval);
    for (Index i = 0; i < n; ++i) correct += argmax_row(s, i) == set.labels[static_cast<std::size_t>(first + i)];
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

struct ClassifierTrainConfig {
  Index epochs = 3;
  Index batch_size = 64;
  double learning_rate = 1e-3;
  double lr_decay = 1.0;  ///< multiplied in after every epoch
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t shuffle_seed = 0;
  bool anchors_from_data = true;  ///< start W_F at the features of random training images
  Index bn_recompute_images = 2048;  ///< images for the final exact BN statistics pass, 0 disables

  void validate() const {
    detail::require(bn_recompute_images >= 0, "ClassifierTrainConfig: bn_recompute_images must be >= 0");
    detail::require(epochs >= 0 && batch_size >= 2, "ClassifierTrainConfig: epochs >= 0 and batch_size >= 2 required");
    detail::require(learning_rate >= 0.0 && lr_decay > 0.0, "ClassifierTrainConfig: bad learning rate");
  }
};

struct ClassifierResult {
  PatchNet model;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::vector<double> loss_trace;  ///< mean loss per epoch
};

/// Replaces the running BN moments with exact averages of the batch moments
/// over the first `images` images, in train-mode batches of `batch`. The
/// exponential running average lags far behind on sparse inputs.
inline void recompute_bn_statistics(PatchNet& net, const ImageSet& set, Index batch, Index images) {
  detail::require(batch >= 2, "recompute_bn_statistics: batch must be >= 2");
  const Index n = std::min(images, set.size()) / batch;
  if (n == 0) return;
  const double saved = net.config.bn_momentum;
  for (auto& l : net.layers) {
    l.running_mean.setZero();
    l.running_var.setZero();
  }
  std::vector<Index> idx(static_cast<std::size_t>(batch));
  for (Index k = 0; k < n; ++k) {
    std::iota(idx.begin(), idx.end(), k * batch);
    net.config.bn_momentum = 1.0 / static_cast<double>(k + 1);
    net_forward_batch(net, patch_batch(set, idx, net.config.patch_size), batch, BnMode::Train);
  }
  net.config.bn_momentum = saved;
}

/// Mini-batch training with adaptive moments on the softmax cross-entropy.
/// The last partial batch of an epoch is dropped.
/// Called after every epoch with the epoch index, its mean loss and the
/// current model.
using EpochCallback = std::function<void(Index, double, const PatchNet&)>;

inline ClassifierResult train_classifier(const ImageSet& train, const ImageSet& test, const PatchNetConfig& cfg,
                                         const ClassifierTrainConfig& tc, const EpochCallback& on_epoch = {}) {
  train.validate();
  test.validate();
  tc.validate();
  detail::require(train.size() >= tc.batch_size, "train_classifier: fewer training images than one batch");
  for (int y : train.labels)
    detail::require(y >= 0 && y < cfg.n_classes, "train_classifier: label outside [0, n_classes)");
  const ScopedFlushToZero ftz;
  ClassifierResult out{make_patch_net(cfg, train.height, train.width, train.channels), 0.0, 0.0, {}};
  PatchNet& net = out.model;
  const Index j_count = cfg.final_anchors;
  if (tc.anchors_from_data && train.size() >= j_count && j_count >= 2) {
    // Random anchors all sit at nearly the same averaged distance from
    // every image, which leaves the final Gaussians almost constant.
    std::mt19937_64 pick(tc.shuffle_seed ^ 0x5bd1e995ULL);
    std::vector<Index> all(static_cast<std::size_t>(train.size()));
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), pick);
    all.resize(static_cast<std::size_t>(j_count));
    NetCache c;
    net_forward_batch(net, patch_batch(train, all, cfg.patch_size), j_count, BnMode::Train, &c);
    net.final_anchors = c.features;
  }

  PatchNetGrad m1 = zero_grad(net);
  PatchNetGrad m2 = zero_grad(net);
  const auto params = parameter_views(net);
  const auto v1 = grad_views(m1);
  const auto v2 = grad_views(m2);

  std::mt19937_64 rng(tc.shuffle_seed);
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), 0);
  double lr = tc.learning_rate;
  std::int64_t step = 0;
  for (Index epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    Index batches = 0;
    for (Index first = 0; first + tc.batch_size <= train.size(); first += tc.batch_size) {
      std::vector<Index> idx(order.begin() + first, order.begin() + first + tc.batch_size);
      std::vector<int> y;
      for (Index i : idx) y.push_back(train.labels[static_cast<std::size_t>(i)]);
      NetCache c;
      const Matrix s = net_forward_batch(net, patch_batch(train, idx, cfg.patch_size), tc.batch_size, BnMode::Train, &c);
      Matrix g_s;
      const double loss = softmax_cross_entropy(s, y, &g_s);
      if (!std::isfinite(loss))
        throw NumericalError("train_classifier: non-finite loss in epoch " + std::to_string(epoch));
      loss_sum += loss;
      ++batches;
      PatchNetGrad g = net_backward(net, c, g_s, tc.batch_size, BnMode::Train);

      ++step;
      const double c1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step));
      const auto gv = grad_views(g);
      for (std::size_t k = 0; k < params.size(); ++k) {
        Eigen::Map<Eigen::ArrayXd> p(params[k].first, params[k].second);
        Eigen::Map<Eigen::ArrayXd> gr(gv[k].first, gv[k].second);
        Eigen::Map<Eigen::ArrayXd> a(v1[k].first, v1[k].second);
        Eigen::Map<Eigen::ArrayXd> b(v2[k].first, v2[k].second);
        a = tc.beta1 * a + (1.0 - tc.beta1) * gr;
        b = tc.beta2 * b + (1.0 - tc.beta2) * gr.square();
        p -= lr * (a / c1) / ((b / c2).sqrt() + tc.adam_epsilon);
      }
    }
    out.loss_trace.push_back(batches > 0 ? loss_sum / static_cast<double>(batches) : 0.0);
    lr *= tc.lr_decay;
    if (on_epoch) on_epoch(epoch, out.loss_trace.back(), net);
  }
  if (tc.bn_recompute_images > 0) recompute_bn_statistics(net, train, tc.batch_size, tc.bn_recompute_images);
  out.train_acc = accuracy(net, train);
  out.test_acc = test.size() > 0 ? accuracy(net, test) : 0.0;
  return out;
}

// ------------------------------------------------------------- checkpoints

inline constexpr int kClassifierCheckpointVersion = 1;

namespace detail {

/// Column-major flat storage.
inline nlohmann::json flat_matrix(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix flat_matrix(const nlohmann::json& j, const char* what) {
  const Index r = j.at("rows").get<Index>();
  const Index c = j.at("cols").get<Index>();
  const auto d = j.at("data").get<std::vector<double>>();
  require(r >= 0 && c >= 0 && static_cast<Index>(d.size()) == r * c,
          std::string("classifier checkpoint: bad shape for ") + what);
  return Eigen::Map<const Matrix>(d.data(), r, c);
}

}  // namespace detail

inline nlohmann::json classifier_checkpoint_to_json(const PatchNet& net) {
  const auto& c = net.config;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers)
    layers.push_back({{"a", detail::flat_matrix(l.a)},
                      {"anchors", detail::flat_matrix(l.anchors)},
                      {"gamma", detail::flat_matrix(l.gamma)},
                      {"beta", detail::flat_matrix(l.beta)},
                      {"running_mean", detail::flat_matrix(l.running_mean)},
                      {"running_var", detail::flat_matrix(l.running_var)}});
  return {{"version", kClassifierCheckpointVersion},
          {"config",
           {{"patch_size", c.patch_size},
            {"layer_widths", c.layer_widths},
            {"projection_dim", c.projection_dim},
            {"final_anchors", c.final_anchors},
            {"n_classes", c.n_classes},
            {"alpha", c.alpha},
            {"bn_epsilon", c.bn_epsilon},
            {"bn_momentum", c.bn_momentum},
            {"seed", c.seed}}},
          {"seed", c.seed},
          {"positions", net.positions},
          {"input_dim", net.input_dim},
          {"layers", layers},
          {"final_anchors", detail::flat_matrix(net.final_anchors)},
          {"a_f", detail::flat_matrix(net.a_f)},
          {"b_f", std::vector<double>(net.b_f.data(), net.b_f.data() + net.b_f.size())},
          {"alpha", net.alpha}};
}

inline PatchNet classifier_checkpoint_from_json(const nlohmann::json& j) {
  detail::require(j.value("version", -1) == kClassifierCheckpointVersion, "classifier checkpoint: unsupported version");
  PatchNet net;
  const auto& c = j.at("config");
  net.config.patch_size = c.at("patch_size").get<Index>();
  net.config.layer_widths = c.at("layer_widths").get<std::vector<Index>>();
  net.config.projection_dim = c.at("projection_dim").get<Index>();
  net.config.final_anchors = c.at("final_anchors").get<Index>();
  net.config.n_classes = c.at("n_classes").get<Index>();
  net.config.alpha = c.at("alpha").get<double>();
  net.config.bn_epsilon = c.at("bn_epsilon").get<double>();
  net.config.bn_momentum = c.at("bn_momentum").get<double>();
  net.config.seed = c.at("seed").get<std::uint64_t>();
  net.config.validate();
  net.positions = j.at("positions").get<Index>();
  net.input_dim = j.at("input_dim").get<Index>();
  for (const auto& l : j.at("layers"))
    net.layers.push_back({detail::flat_matrix(l.at("a"), "a"), detail::flat_matrix(l.at("anchors"), "anchors"),
                          detail::flat_matrix(l.at("gamma"), "gamma"), detail::flat_matrix(l.at("beta"), "beta"),
                          detail::flat_matrix(l.at("running_mean"), "running_mean"),
                          detail::flat_matrix(l.at("running_var"), "running_var")});
  net.final_anchors = detail::flat_matrix(j.at("final_anchors"), "final_anchors");
  net.a_f = detail::flat_matrix(j.at("a_f"), "a_f");
  const auto b = j.at("b_f").get<std::vector<double>>();
  net.b_f = Eigen::Map<const Vector>(b.data(), static_cast<Index>(b.size()));
  net.alpha = j.at("alpha").get<double>();

  detail::require(static_cast<Index>(net.layers.size()) == static_cast<Index>(net.config.layer_widths.size()),
                  "classifier checkpoint: layer count differs from config");
  Index w_in = net.input_dim;
  for (std::size_t m = 0; m < net.layers.size(); ++m) {
    const auto& l = net.layers[m];
    const Index w = net.config.layer_widths[m];
    detail::require(l.a.rows() == net.config.projection_dim && l.a.cols() == w_in &&
                        l.anchors.rows() == net.positions * w && l.anchors.cols() == net.config.projection_dim &&
                        l.gamma.rows() == net.positions && l.gamma.cols() == w && l.beta.rows() == net.positions &&
                        l.beta.cols() == w && l.running_mean.rows() == net.positions && l.running_mean.cols() == w &&
                        l.running_var.rows() == net.positions && l.running_var.cols() == w,
                    "classifier checkpoint: layer " + std::to_string(m) + " has inconsistent shapes");
    detail::require(l.running_var.allFinite() && l.running_mean.allFinite(),
                    "classifier checkpoint: non-finite BN statistics");
    w_in = w;
  }
  detail::require(net.final_anchors.rows() == net.positions * net.config.final_anchors &&
                      net.final_anchors.cols() == w_in && net.a_f.rows() == net.config.n_classes &&
                      net.a_f.cols() == net.config.final_anchors && net.b_f.size() == net.config.n_classes,
                  "classifier checkpoint: final layer has inconsistent shapes");
  return net;
}

}  // namespace kmc
