#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbann/common.hpp"
#include "nbann/corpus.hpp"
#include "nbann/metrics.hpp"
#include "nbann/model.hpp"
#include "nbann/neighbors.hpp"

namespace nbann {

struct TrainConfig {
  double lr = 1e-4;
  double l2 = 3e-3;
  std::size_t hidden = 500;
  std::size_t batch = 50;
  std::size_t epochs = 10;
  double dropout = 0.5;
  double rms_decay = 0.99;
  double rms_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (!(lr > 0) || l2 < 0 || hidden < 1 || batch < 1 || dropout < 0 || dropout >= 1 || !(rms_decay > 0) ||
        rms_decay >= 1 || !(rms_eps > 0))
      throw ValidationError("invalid training configuration");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},           {"l2", c.l2},         {"hidden", c.hidden},       {"batch", c.batch},
          {"epochs", c.epochs},   {"dropout", c.dropout}, {"rms_decay", c.rms_decay}, {"rms_eps", c.rms_eps},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  c.lr = j.value("lr", c.lr);
  c.l2 = j.value("l2", c.l2);
  c.hidden = j.value("hidden", c.hidden);
  c.batch = j.value("batch", c.batch);
  c.epochs = j.value("epochs", c.epochs);
  c.dropout = j.value("dropout", c.dropout);
  c.rms_decay = j.value("rms_decay", c.rms_decay);
  c.rms_eps = j.value("rms_eps", c.rms_eps);
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  return c;
}

struct NeighborhoodSpec {
  std::size_t m = 3;
  std::size_t max_rank = 6;
  std::size_t samples_train = 1;
  std::size_t samples_test = 10;
  std::uint64_t seed = 0;
  bool allow_missing = false;  // score images without a list through the image pathway

  void validate() const {
    if (m < 1 || max_rank < m) throw ValidationError("neighborhood spec needs 0 < m <= M");
    if (samples_train < 1 || samples_test < 1) throw ValidationError("neighborhood spec needs >= 1 sample");
  }
};

// ---------------------------------------------------------------------------
// RMSProp over any parameter bundle exposing visit(name, span, is_matrix).

namespace detail {
template <typename P>
std::vector<std::pair<const char*, std::span<double>>> spans(P& p) {
  std::vector<std::pair<const char*, std::span<double>>> out;
  p.visit([&](const char* name, std::span<double> s, bool) { out.emplace_back(name, s); });
  return out;
}
}  // namespace detail

/// cache <- decay*cache + (1-decay)*g^2;  p <- p - lr*g/(sqrt(cache)+eps).
template <typename P>
void rmsprop_step(P& params, const P& grads, P& cache, double lr, double decay, double eps) {
  auto ps = detail::spans(params);
  auto gs = detail::spans(const_cast<P&>(grads));
  auto cs = detail::spans(cache);
  if (ps.size() != gs.size() || ps.size() != cs.size()) throw ValidationError("rmsprop_step: shape mismatch");
  for (std::size_t a = 0; a < ps.size(); ++a) {
    auto p = ps[a].second;
    auto g = gs[a].second;
    auto c = cs[a].second;
    if (p.size() != g.size() || p.size() != c.size())
      throw ValidationError(std::string("rmsprop_step: shape mismatch in ") + ps[a].first);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw RuntimeError(std::string("rmsprop_step: non-finite gradient in ") + ps[a].first + "[" +
                           std::to_string(i) + "] = " + std::to_string(g[i]));
      c[i] = decay * c[i] + (1 - decay) * g[i] * g[i];
      p[i] -= lr * g[i] / (std::sqrt(c[i]) + eps);
      if (!std::isfinite(p[i]))
        throw RuntimeError(std::string("rmsprop_step: parameter ") + ps[a].first + " became non-finite");
    }
  }
  ++params.version;
}

/// Adds lambda*W to the gradient of every matrix; returns (lambda/2)*sum |W|^2.
template <typename P>
double add_l2(const P& params, double lambda, P& grads) {
  auto ps = detail::spans(const_cast<P&>(params));
  std::vector<bool> is_matrix;
  params.visit([&](const char*, std::span<const double>, bool m) { is_matrix.push_back(m); });
  auto gs = detail::spans(grads);
  double penalty = 0;
  for (std::size_t a = 0; a < ps.size(); ++a) {
    if (!is_matrix[a]) continue;
    for (std::size_t i = 0; i < ps[a].second.size(); ++i) {
      const double w = ps[a].second[i];
      penalty += w * w;
      gs[a].second[i] += lambda * w;
    }
  }
  return 0.5 * lambda * penalty;
}

template <typename P>
void scale(P& p, double factor) {
  p.visit([factor](const char*, std::span<double> s, bool) {
    for (double& v : s) v *= factor;
  });
}

// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;  // mean per-example data loss over the epoch
  double val_map_l = std::numeric_limits<double>::quiet_NaN();
  double val_map_i = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0;
};

template <typename P>
struct TrainResult {
  P best;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0: initial parameters
  double best_val_map_l = std::numeric_limits<double>::quiet_NaN();
};

inline void save_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  auto out = io::open_out(path);
  out << "epoch,train_loss,val_mAP_L,val_mAP_I,wall_seconds\n";
  out.precision(17);
  for (const auto& r : history)
    out << r.epoch << ',' << r.train_loss << ',' << r.val_map_l << ',' << r.val_map_i << ',' << r.wall_seconds
        << '\n';
}

/// The shared minibatch loop: per epoch a seeded shuffle of `train_ids`,
/// minibatches whose mean example gradient plus L2 feeds one RMSProp step,
/// then a validation pass. Returns the epoch snapshot with the best
/// validation mAP_L (the final one when there is no validation set).
///
/// example(params, id, epoch, grads) must add that example's loss gradient
/// to grads and return its loss. validate(params) returns (mAP_L, mAP_I) or
/// nullopt when there is nothing to validate on.
template <typename P, typename ExampleFn, typename ValidateFn>
TrainResult<P> fit(P params, std::span<const ImageId> train_ids, const TrainConfig& cfg, ExampleFn&& example,
                   ValidateFn&& validate) {
  cfg.validate();
  TrainResult<P> result;
  result.best = params;
  if (cfg.epochs == 0) return result;
  if (train_ids.empty()) throw ValidationError("train: empty training split");

  P grads = params.zeros_like();
  P cache = params.zeros_like();
  std::vector<ImageId> order(train_ids.begin(), train_ids.end());
  const auto start = std::chrono::steady_clock::now();
  bool have_best = false;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.seed, epoch, 0x5348u));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    double loss_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t end = std::min(order.size(), b + cfg.batch);
      grads.set_zero();
      for (std::size_t i = b; i < end; ++i) {
        const double loss = example(static_cast<const P&>(params), order[i], epoch, grads);
        if (!std::isfinite(loss)) throw RuntimeError("train: NaN loss at epoch " + std::to_string(epoch));
        loss_sum += loss;
      }
      scale(grads, 1.0 / static_cast<double>(end - b));
      add_l2(params, cfg.l2, grads);
      rmsprop_step(params, grads, cache, cfg.lr, cfg.rms_decay, cfg.rms_eps);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    const std::optional<std::pair<double, double>> val = validate(static_cast<const P&>(params));
    if (val) {
      rec.val_map_l = val->first;
      rec.val_map_i = val->second;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (!val || !have_best || val->first > result.best_val_map_l) {
      result.best = params;
      result.best_epoch = epoch;
      result.best_val_map_l = val ? val->first : std::numeric_limits<double>::quiet_NaN();
      have_best = true;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// The neighbor-pooling model: data plumbing around fit().

/// Maps term ids of the selected tag vocabulary to tag-vector positions.
class TagVectorizer {
 public:
  TagVectorizer() = default;
  explicit TagVectorizer(std::vector<TermId> vocab) : vocab_(std::move(vocab)) {
    std::sort(vocab_.begin(), vocab_.end());
  }
  std::size_t width() const { return vocab_.size(); }
  std::vector<std::uint32_t> positions(std::span<const TermId> terms) const {
    std::vector<std::uint32_t> out;
    for (TermId t : terms) {
      auto it = std::lower_bound(vocab_.begin(), vocab_.end(), t);
      if (it != vocab_.end() && *it == t) out.push_back(static_cast<std::uint32_t>(it - vocab_.begin()));
    }
    return out;
  }

 private:
  std::vector<TermId> vocab_;
};

/// Neighborhoods used to score one image: up to `count` samples from its top-M
/// list, or none (image pathway only) when the list is shorter than m.
inline std::vector<std::vector<ImageId>> neighborhoods_for(ImageId id, const NeighborTable& table,
                                                           const NeighborhoodSpec& spec, std::size_t count,
                                                           std::uint64_t seed) {
  const NeighborList* found = table.find(id);
  if (!found) {
    if (spec.allow_missing) return {};
    throw ValidationError("no neighbor list for image " + std::to_string(id));
  }
  if (found->size() < spec.m) return {};
  NeighborList top{found->query, {}};
  const std::size_t depth = std::min(spec.max_rank, found->size());
  top.neighbors.assign(found->neighbors.begin(), found->neighbors.begin() + static_cast<std::ptrdiff_t>(depth));
  return sample_neighborhoods(top, spec.m, count, seed);
}

/// Images whose list is too short to form a neighborhood.
inline std::size_t count_degenerate(std::span<const ImageId> ids, const NeighborTable& table,
                                    const NeighborhoodSpec& spec) {
  std::size_t n = 0;
  for (ImageId id : ids) {
    const auto* l = table.find(id);
    if (!l || l->size() < spec.m) ++n;
  }
  return n;
}

/// N x L scores averaged over spec.samples_test neighborhoods per image, no
/// dropout. Sampling is seeded per image, so the result does not depend on
/// evaluation order or thread count.
inline ScoreMatrix evaluate_scores(const ModelParams& params, const Corpus& corpus, std::span<const ImageId> ids,
                                   const NeighborTable& table, const NeighborhoodSpec& spec,
                                   const TagVectorizer* tags = nullptr, MetadataKind tag_kind = MetadataKind::kTags,
                                   std::size_t threads = 1) {
  ScoreMatrix out(std::vector<ImageId>(ids.begin(), ids.end()), params.num_labels());
  parallel_for(ids.size(), threads, [&](std::size_t r) {
    const ImageId id = ids[r];
    const auto hoods = neighborhoods_for(id, table, spec, spec.samples_test, derive_seed(spec.seed, id));
    std::vector<std::uint32_t> pos;
    if (tags && params.tag_width() > 0) pos = tags->positions(corpus.at(id).terms(tag_kind));
    const Vec s = score_image(params, corpus, id, hoods, pos);
    for (std::size_t c = 0; c < out.num_labels; ++c) out.at(r, c) = s(static_cast<Eigen::Index>(c));
  });
  return out;
}

struct NeighborTrainInputs {
  const Corpus* corpus = nullptr;
  std::span<const ImageId> train_ids;
  std::span<const ImageId> val_ids;
  const NeighborTable* train_neighbors = nullptr;
  const NeighborTable* val_neighbors = nullptr;
  const TagVectorizer* tags = nullptr;  // set to enable the tag-vector extension
  MetadataKind tag_kind = MetadataKind::kTags;
};

inline TrainResult<ModelParams> train(const NeighborTrainInputs& in, const NeighborhoodSpec& spec,
                                      const TrainConfig& cfg) {
  spec.validate();
  cfg.validate();
  const Corpus& corpus = *in.corpus;
  const std::size_t tag_width = in.tags ? in.tags->width() : 0;
  ModelParams init = init_params(corpus.dim, cfg.hidden, corpus.num_labels(), derive_seed(cfg.seed, 0x1417u),
                                 tag_width);
  for (ImageId id : in.train_ids)
    if (!in.train_neighbors->find(id) && !spec.allow_missing)
      throw ValidationError("train: no neighbor list for training image " + std::to_string(id));

  ForwardCache cache;
  auto example = [&](const ModelParams& p, ImageId id, std::size_t epoch, ModelParams& grads) {
    const auto hoods = neighborhoods_for(id, *in.train_neighbors, spec, spec.samples_train,
                                         derive_seed(cfg.seed, epoch, id));
    std::vector<std::uint32_t> pos;
    if (in.tags) pos = in.tags->positions(corpus.at(id).terms(in.tag_kind));
    ForwardOptions opt;
    opt.train = true;
    opt.dropout = cfg.dropout;
    double loss = 0;
    const std::size_t n = std::max<std::size_t>(1, hoods.size());
    for (std::size_t s = 0; s < n; ++s) {
      opt.dropout_seed = derive_seed(cfg.seed, epoch, id, s + 1);
      const auto input = make_input(corpus, id, hoods.empty() ? std::span<const ImageId>{} : hoods[s], pos);
      const Vec& scores = forward(p, input, cache, opt);
      auto lr = loss_and_grad_scores(scores, corpus.at(id).labels);
      lr.dscores /= static_cast<double>(n);
      backward_accumulate(p, cache, lr.dscores, grads);
      loss += lr.loss / static_cast<double>(n);
    }
    return loss;
  };
  const LabelSets val_truth = ground_truth(corpus, in.val_ids);
  auto validate = [&](const ModelParams& p) -> std::optional<std::pair<double, double>> {
    if (in.val_ids.empty() || !in.val_neighbors) return std::nullopt;
    const auto s = evaluate_scores(p, corpus, in.val_ids, *in.val_neighbors, spec, in.tags, in.tag_kind,
                                   cfg.threads);
    return std::pair{map_per_label(s, val_truth).map, map_per_image(s, val_truth).map};
  };
  return fit(std::move(init), in.train_ids, cfg, example, validate);
}

}  // namespace nbann
