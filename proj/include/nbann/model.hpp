#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "nbann/common.hpp"
#include "nbann/corpus.hpp"
#include "nbann/io.hpp"

namespace nbann {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct ModelConfig {
  std::size_t hidden = 500;
  double dropout = 0.5;
  bool use_tag_vector = false;
  std::size_t tag_width = 0;  // width of the appended binary tag vector
};

/// Learnable arrays of the neighbor-pooling network. W_y has 2h rows for
/// [v_x; v_z], followed by one row per tag-vector entry when that extension
/// is enabled.
struct ModelParams {
  Mat wx, wz, wy;
  Vec bx, bz, by;
  std::uint64_t version = 0;  // bumped on every update; ties caches to params

  std::size_t dim() const { return static_cast<std::size_t>(wx.rows()); }
  std::size_t hidden() const { return static_cast<std::size_t>(wx.cols()); }
  std::size_t num_labels() const { return static_cast<std::size_t>(wy.cols()); }
  std::size_t tag_width() const { return static_cast<std::size_t>(wy.rows()) - 2 * hidden(); }

  static ModelParams zeros(std::size_t d, std::size_t h, std::size_t num_labels, std::size_t tag_width = 0) {
    ModelParams p;
    const auto di = static_cast<Eigen::Index>(d), hi = static_cast<Eigen::Index>(h);
    p.wx = Mat::Zero(di, hi);
    p.wz = Mat::Zero(di, hi);
    p.wy = Mat::Zero(2 * hi + static_cast<Eigen::Index>(tag_width), static_cast<Eigen::Index>(num_labels));
    p.bx = Vec::Zero(hi);
    p.bz = Vec::Zero(hi);
    p.by = Vec::Zero(static_cast<Eigen::Index>(num_labels));
    return p;
  }

  ModelParams zeros_like() const { return zeros(dim(), hidden(), num_labels(), tag_width()); }

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("W_x", std::span<double>(wx.data(), static_cast<std::size_t>(wx.size())), true);
    fn("b_x", std::span<double>(bx.data(), static_cast<std::size_t>(bx.size())), false);
    fn("W_z", std::span<double>(wz.data(), static_cast<std::size_t>(wz.size())), true);
    fn("b_z", std::span<double>(bz.data(), static_cast<std::size_t>(bz.size())), false);
    fn("W_y", std::span<double>(wy.data(), static_cast<std::size_t>(wy.size())), true);
    fn("b_y", std::span<double>(by.data(), static_cast<std::size_t>(by.size())), false);
  }
  template <typename Fn>
  void visit(Fn&& fn) const {
    const_cast<ModelParams*>(this)->visit([&](const char* name, std::span<double> s, bool is_matrix) {
      fn(name, std::span<const double>(s.data(), s.size()), is_matrix);
    });
  }

  void set_zero() {
    visit([](const char*, std::span<double> s, bool) { std::fill(s.begin(), s.end(), 0.0); });
  }
};

/// He-normal weights (std sqrt(2 / fan_in), fan_in = rows of each matrix),
/// zero biases.
inline ModelParams init_params(std::size_t d, std::size_t h, std::size_t num_labels, std::uint64_t seed,
                               std::size_t tag_width = 0) {
  if (d < 1 || h < 1 || num_labels < 1) throw ValidationError("init_params: d, h, L must be >= 1");
  auto p = ModelParams::zeros(d, h, num_labels, tag_width);
  std::mt19937_64 rng(seed);
  const auto fill = [&rng](Mat& w) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(w.rows())));
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = normal(rng);
  };
  fill(p.wx);
  fill(p.wz);
  fill(p.wy);
  return p;
}

/// One image with a neighborhood. Feature spans must outlive the call.
struct ModelInput {
  std::span<const float> image;
  std::vector<std::span<const float>> neighbors;
  std::vector<std::uint32_t> tag_positions;  // active entries of the tag vector
};

struct DropoutMasks {
  Vec x, z;  // 0 or 1/(1-p) per hidden unit
};

struct ForwardOptions {
  bool train = false;
  double dropout = 0.0;
  std::uint64_t dropout_seed = 0;
  const DropoutMasks* masks = nullptr;  // overrides sampling when set
};

struct ForwardCache {
  Vec x;
  Mat z;           // d x m
  Vec pre_x;       // h
  Mat pre_z;       // h x m
  Vec v_x;         // after ReLU, before dropout
  Vec v_z;         // pooled, before dropout
  std::vector<Eigen::Index> argmax;  // neighbor index per hidden unit
  DropoutMasks masks;
  std::vector<std::uint32_t> tag_positions;
  Vec scores;
  bool train = false;
  std::uint64_t version = 0;
  std::size_t d = 0, h = 0, num_labels = 0, tag_width = 0;
};

inline Vec relu(const Vec& v) { return v.cwiseMax(0.0); }

inline void check_finite(std::span<const float> f, const char* what) {
  for (float v : f)
    if (!std::isfinite(v)) throw ValidationError(std::string("forward: non-finite value in ") + what);
}

/// Scores f(x, z) = W_y^T [v_x; v_z (; tags)] + b_y with v_x = ReLU(W_x^T x + b_x)
/// and v_z the elementwise max over neighbors of ReLU(W_z^T z_i + b_z).
/// Train mode applies inverted dropout to v_x and v_z. An empty neighborhood
/// gives v_z = 0.
inline const Vec& forward(const ModelParams& p, const ModelInput& in, ForwardCache& c,
                          const ForwardOptions& opt = {}) {
  const std::size_t d = p.dim(), h = p.hidden();
  const auto hi = static_cast<Eigen::Index>(h);
  if (in.image.size() != d)
    throw ValidationError("forward: image feature width " + std::to_string(in.image.size()) + " != d=" +
                          std::to_string(d));
  check_finite(in.image, "image features");
  const auto m = static_cast<Eigen::Index>(in.neighbors.size());

  c.d = d;
  c.h = h;
  c.num_labels = p.num_labels();
  c.tag_width = p.tag_width();
  c.version = p.version;
  c.train = opt.train;
  c.x = Eigen::Map<const Eigen::VectorXf>(in.image.data(), static_cast<Eigen::Index>(d)).cast<double>();
  c.z.resize(static_cast<Eigen::Index>(d), m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& zi = in.neighbors[static_cast<std::size_t>(i)];
    if (zi.size() != d) throw ValidationError("forward: neighbor feature width mismatch");
    check_finite(zi, "neighbor features");
    c.z.col(i) = Eigen::Map<const Eigen::VectorXf>(zi.data(), static_cast<Eigen::Index>(d)).cast<double>();
  }

  c.pre_x.noalias() = p.wx.transpose() * c.x;
  c.pre_x += p.bx;
  c.v_x = relu(c.pre_x);

  c.v_z = Vec::Zero(hi);
  c.argmax.assign(h, 0);
  if (m > 0) {
    c.pre_z.noalias() = p.wz.transpose() * c.z;
    c.pre_z.colwise() += p.bz;
    for (Eigen::Index j = 0; j < hi; ++j) {
      Eigen::Index best = 0;
      double best_v = std::max(c.pre_z(j, 0), 0.0);
      for (Eigen::Index i = 1; i < m; ++i) {
        const double v = std::max(c.pre_z(j, i), 0.0);
        if (v > best_v) {
          best_v = v;
          best = i;
        }
      }
      c.v_z(j) = best_v;
      c.argmax[static_cast<std::size_t>(j)] = best;
    }
  } else {
    c.pre_z.resize(hi, 0);
  }

  if (opt.train && opt.masks) {
    if (opt.masks->x.size() != hi || opt.masks->z.size() != hi)
      throw ValidationError("forward: dropout mask size mismatch");
    c.masks = *opt.masks;
  } else if (opt.train && opt.dropout > 0) {
    if (opt.dropout >= 1) throw ValidationError("forward: dropout must be < 1");
    std::mt19937_64 rng(opt.dropout_seed);
    std::bernoulli_distribution keep(1.0 - opt.dropout);
    const double scale = 1.0 / (1.0 - opt.dropout);
    c.masks.x.resize(hi);
    c.masks.z.resize(hi);
    for (Eigen::Index j = 0; j < hi; ++j) c.masks.x(j) = keep(rng) ? scale : 0.0;
    for (Eigen::Index j = 0; j < hi; ++j) c.masks.z(j) = keep(rng) ? scale : 0.0;
  } else {
    c.masks.x = Vec::Ones(hi);
    c.masks.z = Vec::Ones(hi);
  }

  c.tag_positions = in.tag_positions;
  for (auto t : c.tag_positions)
    if (t >= c.tag_width) throw ValidationError("forward: tag position out of range");

  c.scores.noalias() = p.wy.topRows(hi).transpose() * c.v_x.cwiseProduct(c.masks.x);
  c.scores.noalias() += p.wy.middleRows(hi, hi).transpose() * c.v_z.cwiseProduct(c.masks.z);
  for (auto t : c.tag_positions) c.scores += p.wy.row(2 * hi + static_cast<Eigen::Index>(t)).transpose();
  c.scores += p.by;
  return c.scores;
}

// ---------------------------------------------------------------------------
// Loss.

inline double softplus(double u) { return std::max(u, 0.0) + std::log1p(std::exp(-std::abs(u))); }

inline double sigmoid(double u) {
  if (u >= 0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

struct LossResult {
  double loss = 0;
  Vec dscores;
};

/// Sum over labels of softplus(-y_c s_c), y_c = +1 for labels in the set.
inline LossResult loss_and_grad_scores(const Vec& scores, std::span<const LabelId> labels) {
  LossResult r;
  r.dscores.resize(scores.size());
  std::vector<char> positive(static_cast<std::size_t>(scores.size()), 0);
  for (LabelId c : labels) {
    if (c >= positive.size()) throw ValidationError("loss: label id out of range");
    positive[c] = 1;
  }
  for (Eigen::Index c = 0; c < scores.size(); ++c) {
    const double s = scores(c);
    if (!std::isfinite(s)) throw RuntimeError("loss: non-finite score");
    const double y = positive[static_cast<std::size_t>(c)] ? 1.0 : -1.0;
    r.loss += softplus(-y * s);
    r.dscores(c) = -y * sigmoid(-y * s);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Backward.

/// Adds the gradient of dscores . scores with respect to every parameter
/// into `grads`. Max-pooling routes each hidden unit to its argmax neighbor.
inline void backward_accumulate(const ModelParams& p, const ForwardCache& c, const Vec& dscores,
                                ModelParams& grads) {
  if (c.version != p.version || c.d != p.dim() || c.h != p.hidden() || c.num_labels != p.num_labels() ||
      c.tag_width != p.tag_width())
    throw RuntimeError("backward: cache does not belong to these parameters");
  if (dscores.size() != static_cast<Eigen::Index>(c.num_labels)) throw ValidationError("backward: dscores size");
  const auto hi = static_cast<Eigen::Index>(c.h);

  const Vec hx = c.v_x.cwiseProduct(c.masks.x);
  const Vec hz = c.v_z.cwiseProduct(c.masks.z);
  grads.wy.topRows(hi).noalias() += hx * dscores.transpose();
  grads.wy.middleRows(hi, hi).noalias() += hz * dscores.transpose();
  for (auto t : c.tag_positions) grads.wy.row(2 * hi + static_cast<Eigen::Index>(t)) += dscores.transpose();
  grads.by += dscores;

  Vec dvx = (p.wy.topRows(hi) * dscores).cwiseProduct(c.masks.x);
  Vec dvz = (p.wy.middleRows(hi, hi) * dscores).cwiseProduct(c.masks.z);

  for (Eigen::Index j = 0; j < hi; ++j)
    if (c.pre_x(j) <= 0) dvx(j) = 0;
  grads.wx.noalias() += c.x * dvx.transpose();
  grads.bx += dvx;

  const Eigen::Index m = c.z.cols();
  if (m == 0) return;
  Mat dpre_z = Mat::Zero(hi, m);
  for (Eigen::Index j = 0; j < hi; ++j) {
    const Eigen::Index i = c.argmax[static_cast<std::size_t>(j)];
    if (c.pre_z(j, i) > 0) dpre_z(j, i) = dvz(j);
  }
  grads.wz.noalias() += c.z * dpre_z.transpose();
  grads.bz += dpre_z.rowwise().sum();
}

inline ModelParams backward(const ModelParams& p, const ForwardCache& c, const Vec& dscores) {
  auto g = p.zeros_like();
  backward_accumulate(p, c, dscores, g);
  return g;
}

/// (lambda/2)(|W_x|^2 + |W_z|^2 + |W_y|^2); biases are not penalized.
inline double l2_penalty(const ModelParams& p, double lambda) {
  return 0.5 * lambda * (p.wx.squaredNorm() + p.wz.squaredNorm() + p.wy.squaredNorm());
}

inline double l2_term(const ModelParams& p, double lambda, ModelParams* grads) {
  if (lambda < 0) throw ValidationError("l2_term: lambda must be >= 0");
  if (grads) {
    grads->wx += lambda * p.wx;
    grads->wz += lambda * p.wz;
    grads->wy += lambda * p.wy;
  }
  return l2_penalty(p, lambda);
}

// ---------------------------------------------------------------------------
// Attribution of scores to the image, the neighborhood, the tag vector and
// the bias through the row blocks of W_y.

struct ScoreAttribution {
  Vec image;
  Vec neighbor;
  Vec tags;  // zero unless the tag-vector extension is active
  Vec bias;
};

inline ScoreAttribution attribute_scores(const ModelParams& p, const ForwardCache& c) {
  if (c.train) throw ValidationError("attribute_scores: needs an evaluation-mode cache");
  if (c.version != p.version || c.h != p.hidden()) throw RuntimeError("attribute_scores: stale cache");
  const auto hi = static_cast<Eigen::Index>(c.h);
  ScoreAttribution a;
  a.image = p.wy.topRows(hi).transpose() * c.v_x;
  a.neighbor = p.wy.middleRows(hi, hi).transpose() * c.v_z;
  a.tags = Vec::Zero(p.wy.cols());
  for (auto t : c.tag_positions) a.tags += p.wy.row(2 * hi + static_cast<Eigen::Index>(t)).transpose();
  a.bias = p.by;
  return a;
}

// ---------------------------------------------------------------------------

/// Builds the forward input for `image` with the given neighborhood.
inline ModelInput make_input(const Corpus& corpus, ImageId image, std::span<const ImageId> neighborhood,
                             std::vector<std::uint32_t> tag_positions = {}) {
  ModelInput in;
  in.image = corpus.at(image).features;
  in.neighbors.reserve(neighborhood.size());
  for (ImageId z : neighborhood) in.neighbors.emplace_back(corpus.at(z).features);
  in.tag_positions = std::move(tag_positions);
  return in;
}

/// Mean evaluation-mode score over the given neighborhoods; an empty list
/// scores through the image pathway alone.
inline Vec score_image(const ModelParams& p, const Corpus& corpus, ImageId image,
                       const std::vector<std::vector<ImageId>>& neighborhoods,
                       const std::vector<std::uint32_t>& tag_positions = {}) {
  ForwardCache cache;
  if (neighborhoods.empty()) return forward(p, make_input(corpus, image, {}, tag_positions), cache);
  Vec sum = Vec::Zero(static_cast<Eigen::Index>(p.num_labels()));
  for (const auto& z : neighborhoods) sum += forward(p, make_input(corpus, image, z, tag_positions), cache);
  return sum / static_cast<double>(neighborhoods.size());
}

// ---------------------------------------------------------------------------
// Checkpoints: "NLPM", u32 version=1, u32 d, u32 h, u32 L, u32 tag width, then
// W_x, b_x, W_z, b_z, W_y, b_y as little-endian f64 (matrices row-major).
// Metadata goes to a JSON sidecar at <path>.json.

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& p,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  auto out = io::open_out(path, true);
  io::write_magic(out, "NLPM");
  io::write_le<std::uint32_t>(out, 1);
  for (std::size_t v : {p.dim(), p.hidden(), p.num_labels(), p.tag_width()})
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  const auto write_mat = [&](const Mat& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) io::write_le(out, m(i, j));
  };
  write_mat(p.wx);
  write_mat(p.bx);
  write_mat(p.wz);
  write_mat(p.bz);
  write_mat(p.wy);
  write_mat(p.by);
  io::open_out(path.string() + ".json") << meta.dump(2) << '\n';
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  auto in = io::open_in(path, true);
  io::expect_magic(in, "NLPM", path.string());
  std::uint32_t version = 0, d = 0, h = 0, num_labels = 0, tw = 0;
  if (!io::read_le(in, version) || !io::read_le(in, d) || !io::read_le(in, h) || !io::read_le(in, num_labels) ||
      !io::read_le(in, tw))
    throw ValidationError(path.string() + ": truncated header");
  if (version != 1) throw ValidationError(path.string() + ": unsupported version");
  auto p = ModelParams::zeros(d, h, num_labels, tw);
  const auto read_mat = [&](auto& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        double v = 0;
        if (!io::read_le(in, v)) throw ValidationError(path.string() + ": truncated parameters");
        m(i, j) = v;
      }
  };
  read_mat(p.wx);
  read_mat(p.bx);
  read_mat(p.wz);
  read_mat(p.bz);
  read_mat(p.wy);
  read_mat(p.by);
  return p;
}

}  // namespace nbann
