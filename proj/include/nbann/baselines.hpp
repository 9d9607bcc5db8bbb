#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "nbann/common.hpp"
#include "nbann/corpus.hpp"
#include "nbann/metrics.hpp"
#include "nbann/model.hpp"
#include "nbann/neighbors.hpp"
#include "nbann/optim.hpp"

namespace nbann {

/// One-vs-all linear scores W^T x + b.
struct LinearModel {
  Mat w;  // f x L
  Vec b;
  std::uint64_t version = 0;

  static LinearModel zeros(std::size_t width, std::size_t num_labels) {
    return {Mat::Zero(static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(num_labels)),
            Vec::Zero(static_cast<Eigen::Index>(num_labels)), 0};
  }
  LinearModel zeros_like() const { return zeros(static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols())); }
  std::size_t width() const { return static_cast<std::size_t>(w.rows()); }
  std::size_t num_labels() const { return static_cast<std::size_t>(w.cols()); }

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("W", std::span<double>(w.data(), static_cast<std::size_t>(w.size())), true);
    fn("b", std::span<double>(b.data(), static_cast<std::size_t>(b.size())), false);
  }
  template <typename Fn>
  void visit(Fn&& fn) const {
    const_cast<LinearModel*>(this)->visit([&](const char* name, std::span<double> s, bool is_matrix) {
      fn(name, std::span<const double>(s.data(), s.size()), is_matrix);
    });
  }
  void set_zero() {
    w.setZero();
    b.setZero();
  }
};

/// Either a dense feature row or the active entries of a binary indicator.
struct LinearInput {
  std::span<const float> dense;
  std::vector<std::uint32_t> active;
  bool sparse = false;
};

using FeatureFn = std::function<LinearInput(ImageId)>;

inline Vec linear_scores(const LinearModel& model, const LinearInput& in) {
  Vec s = model.b;
  if (in.sparse) {
    for (auto i : in.active) {
      if (i >= model.width()) throw ValidationError("linear model: indicator position out of range");
      s += model.w.row(static_cast<Eigen::Index>(i)).transpose();
    }
  } else {
    if (in.dense.size() != model.width()) throw ValidationError("linear model: feature width mismatch");
    const Vec x = Eigen::Map<const Eigen::VectorXf>(in.dense.data(), static_cast<Eigen::Index>(in.dense.size()))
                      .cast<double>();
    s.noalias() += model.w.transpose() * x;
  }
  return s;
}

inline void linear_backward(const LinearInput& in, const Vec& dscores, LinearModel& grads) {
  grads.b += dscores;
  if (in.sparse) {
    for (auto i : in.active) grads.w.row(static_cast<Eigen::Index>(i)) += dscores.transpose();
  } else {
    const Vec x = Eigen::Map<const Eigen::VectorXf>(in.dense.data(), static_cast<Eigen::Index>(in.dense.size()))
                      .cast<double>();
    grads.w.noalias() += x * dscores.transpose();
  }
}

inline ScoreMatrix linear_score_matrix(const LinearModel& model, std::span<const ImageId> ids, const FeatureFn& features,
                                       std::size_t threads = 1) {
  ScoreMatrix out(std::vector<ImageId>(ids.begin(), ids.end()), model.num_labels());
  parallel_for(ids.size(), threads, [&](std::size_t r) {
    const Vec s = linear_scores(model, features(ids[r]));
    for (std::size_t c = 0; c < out.num_labels; ++c) out.at(r, c) = s(static_cast<Eigen::Index>(c));
  });
  return out;
}

/// One-vs-all logistic classifiers trained by the shared loop (RMSProp,
/// softplus loss, L2 on W), starting from zero weights.
inline TrainResult<LinearModel> train_logistic_ova(const Corpus& corpus, std::size_t width, const FeatureFn& features,
                                                   std::span<const ImageId> train_ids,
                                                   std::span<const ImageId> val_ids, const TrainConfig& cfg) {
  auto example = [&](const LinearModel& m, ImageId id, std::size_t, LinearModel& grads) {
    const auto in = features(id);
    const auto lr = loss_and_grad_scores(linear_scores(m, in), corpus.at(id).labels);
    linear_backward(in, lr.dscores, grads);
    return lr.loss;
  };
  const LabelSets val_truth = ground_truth(corpus, val_ids);
  auto validate = [&](const LinearModel& m) -> std::optional<std::pair<double, double>> {
    if (val_ids.empty()) return std::nullopt;
    const auto s = linear_score_matrix(m, val_ids, features, cfg.threads);
    return std::pair{map_per_label(s, val_truth).map, map_per_image(s, val_truth).map};
  };
  return fit(LinearModel::zeros(width, corpus.num_labels()), train_ids, cfg, example, validate);
}

inline FeatureFn visual_features(const Corpus& corpus) {
  return [&corpus](ImageId id) {
    LinearInput in;
    in.dense = corpus.at(id).features;
    return in;
  };
}

inline FeatureFn tag_indicator_features(const Corpus& corpus, const TagVectorizer& tags, MetadataKind kind) {
  return [&corpus, &tags, kind](ImageId id) {
    LinearInput in;
    in.sparse = true;
    in.active = tags.positions(corpus.at(id).terms(kind));
    return in;
  };
}

inline FeatureFn label_indicator_features(const Corpus& corpus) {
  return [&corpus](ImageId id) {
    LinearInput in;
    in.sparse = true;
    const auto& labels = corpus.at(id).labels;
    in.active.assign(labels.begin(), labels.end());
    return in;
  };
}

/// Binary N x L matrix with ones at each image's ground-truth labels.
inline ScoreMatrix upper_bound_features(const Corpus& corpus, std::span<const ImageId> ids) {
  ScoreMatrix out(std::vector<ImageId>(ids.begin(), ids.end()), corpus.num_labels());
  for (std::size_t r = 0; r < ids.size(); ++r)
    for (LabelId c : corpus.at(ids[r]).labels) out.at(r, c) = 1.0;
  return out;
}

/// Label votes from the k training images nearest in feature space (L2, ties
/// by id): score(c) = fraction of those neighbors carrying c.
inline ScoreMatrix knn_vote(const Corpus& corpus, std::span<const ImageId> train_ids,
                            std::span<const ImageId> query_ids, std::size_t k, std::size_t threads = 1) {
  if (k < 1 || k > train_ids.size()) throw ValidationError("knn_vote: need 1 <= k <= number of training images");
  const std::size_t d = corpus.dim;
  std::vector<double> train(train_ids.size() * d);
  for (std::size_t i = 0; i < train_ids.size(); ++i) {
    const auto& f = corpus.at(train_ids[i]).features;
    for (std::size_t j = 0; j < d; ++j) train[i * d + j] = f[j];
  }
  ScoreMatrix out(std::vector<ImageId>(query_ids.begin(), query_ids.end()), corpus.num_labels());
  parallel_for(query_ids.size(), threads, [&](std::size_t r) {
    const auto& q = corpus.at(query_ids[r]).features;
    std::vector<std::pair<double, ImageId>> dist(train_ids.size());
    for (std::size_t i = 0; i < train_ids.size(); ++i) {
      double s = 0;
      const double* t = &train[i * d];
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = t[j] - static_cast<double>(q[j]);
        s += diff * diff;
      }
      dist[i] = {s, train_ids[i]};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    for (std::size_t i = 0; i < k; ++i)
      for (LabelId c : corpus.at(dist[i].second).labels) out.at(r, c) += 1.0 / static_cast<double>(k);
  });
  return out;
}

/// alpha * own + (1 - alpha) * mean of the neighbors' own scores, over the top
/// `max_rank` neighbors of each image. Images without neighbors keep their
/// own scores.
inline ScoreMatrix neighborhood_voting(const ScoreMatrix& own, const NeighborTable& table, double alpha,
                                       std::size_t max_rank) {
  if (alpha < 0 || alpha > 1) throw ValidationError("neighborhood_voting: alpha must be in [0,1]");
  std::unordered_map<ImageId, std::size_t> row_of;
  for (std::size_t r = 0; r < own.rows(); ++r) row_of.emplace(own.ids[r], r);
  ScoreMatrix out = own;
  for (std::size_t r = 0; r < own.rows(); ++r) {
    const auto* list = table.find(own.ids[r]);
    if (!list || list->neighbors.empty()) continue;
    const std::size_t depth = std::min(max_rank, list->size());
    if (depth == 0) continue;
    std::vector<double> mean(own.num_labels, 0.0);
    for (std::size_t k = 0; k < depth; ++k) {
      auto it = row_of.find(list->neighbors[k].id);
      if (it == row_of.end())
        throw ValidationError("neighborhood_voting: neighbor " + std::to_string(list->neighbors[k].id) +
                              " has no visual-only scores");
      for (std::size_t c = 0; c < own.num_labels; ++c) mean[c] += own.at(it->second, c);
    }
    for (std::size_t c = 0; c < own.num_labels; ++c)
      out.at(r, c) = alpha * own.at(r, c) + (1 - alpha) * mean[c] / static_cast<double>(depth);
  }
  return out;
}

struct AlphaSelection {
  double alpha = 1;
  std::vector<std::pair<double, double>> curve;  // (alpha, val mAP_L)
};

/// Picks alpha from {0, 0.1, ..., 1} by validation mAP_L (first best wins).
inline AlphaSelection select_voting_alpha(const ScoreMatrix& own_val, const NeighborTable& val_table,
                                          const LabelSets& val_truth, std::size_t max_rank) {
  AlphaSelection sel;
  double best = -1;
  for (int step = 0; step <= 10; ++step) {
    const double alpha = step / 10.0;
    const double v = map_per_label(neighborhood_voting(own_val, val_table, alpha, max_rank), val_truth).map;
    sel.curve.emplace_back(alpha, v);
    if (v > best) {
      best = v;
      sel.alpha = alpha;
    }
  }
  return sel;
}

}  // namespace nbann
