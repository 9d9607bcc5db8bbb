#include <unistd.h>

#include <gtest/gtest.h>

#include "nbann/baselines.hpp"
#include "test_util.hpp"

using namespace nbann;
using namespace nbann::testing;

namespace {

// Two labels decided by the sign of each of the first two feature coordinates.
Corpus separable_corpus() {
  Corpus c;
  c.dim = 2;
  c.label_names = {"east", "north"};
  c.vocab[0] = {"t"};
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0.5f, 2.0f);
  for (ImageId id = 0; id < 80; ++id) {
    ImageRecord im;
    im.id = id;
    const float sx = (id % 2) ? 1.0f : -1.0f, sy = (id % 4 < 2) ? 1.0f : -1.0f;
    im.features = {sx * u(rng), sy * u(rng)};
    if (sx > 0) im.labels.push_back(0);
    if (sy > 0) im.labels.push_back(1);
    im.metadata[0] = {0};
    c.images.push_back(im);
  }
  c.validate();
  return c;
}

}  // namespace

TEST(LogisticOva, SeparableToyReachesNearZeroLoss) {
  const Corpus c = separable_corpus();
  const auto ids = c.ids();
  TrainConfig cfg;
  cfg.lr = 5e-2;
  cfg.epochs = 60;
  cfg.batch = 10;
  cfg.l2 = 0;
  const auto r = train_logistic_ova(c, 2, visual_features(c), ids, {}, cfg);
  EXPECT_LT(r.history.back().train_loss, 0.05);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  const auto s = linear_score_matrix(r.best, ids, visual_features(c));
  EXPECT_DOUBLE_EQ(map_per_label(s, ground_truth(c, ids)).map, 100.0);
}

TEST(LogisticOva, StartsFromZeroAndValidates) {
  const Corpus c = separable_corpus();
  const auto ids = c.ids();
  const std::vector<ImageId> train(ids.begin(), ids.begin() + 60), val(ids.begin() + 60, ids.end());
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto zero = train_logistic_ova(c, 2, visual_features(c), train, val, cfg);
  EXPECT_TRUE(zero.best.w.isZero(0));
  cfg.epochs = 3;
  cfg.lr = 1e-2;
  const auto r = train_logistic_ova(c, 2, visual_features(c), train, val, cfg);
  ASSERT_EQ(r.history.size(), 3u);
  EXPECT_FALSE(std::isnan(r.history[0].val_map_l));
}

TEST(UpperBound, IndicatorRowAndPerfectRanking) {
  Corpus c;
  c.dim = 1;
  c.label_names = {"a", "b", "c", "d"};
  ImageRecord im;
  im.id = 3;
  im.features = {0.0f};
  im.labels = {0, 2};
  c.images.push_back(im);
  c.validate();
  const std::vector<ImageId> ids{3};
  const auto m = upper_bound_features(c, ids);
  EXPECT_EQ(m.scores, (std::vector<double>{1, 0, 1, 0}));

  const Corpus r = random_corpus({}, 3);
  const auto all = r.ids();
  EXPECT_DOUBLE_EQ(map_per_image(upper_bound_features(r, all), ground_truth(r, all)).map, 100.0);
}

TEST(UpperBound, TrainedOnIndicatorsRanksTruthFirst) {
  RandomCorpusOptions o;
  o.images = 300;
  o.labels = 6;
  const Corpus c = random_corpus(o, 8);
  const auto ids = c.ids();
  const std::vector<ImageId> train(ids.begin(), ids.begin() + 200), test(ids.begin() + 200, ids.end());
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 10;
  const auto r = train_logistic_ova(c, 6, label_indicator_features(c), train, {}, cfg);
  const auto s = linear_score_matrix(r.best, test, label_indicator_features(c));
  EXPECT_DOUBLE_EQ(map_per_image(s, ground_truth(c, test)).map, 100.0);
  EXPECT_DOUBLE_EQ(map_per_label(s, ground_truth(c, test)).map, 100.0);
}

TEST(TagOnly, SparseIndicatorsMatchDenseEquivalent) {
  const Corpus c = random_corpus({}, 9);
  const TagVectorizer tags({1, 4, 9, 16, 25});
  LinearModel m = LinearModel::zeros(5, c.num_labels());
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  for (Eigen::Index i = 0; i < m.w.size(); ++i) m.w.data()[i] = normal(rng);
  const auto f = tag_indicator_features(c, tags, MetadataKind::kTags);
  for (ImageId id : c.ids()) {
    Vec dense = m.b;
    for (TermId t : c.at(id).terms(MetadataKind::kTags))
      for (std::size_t k = 0; k < 5; ++k)
        if (std::vector<TermId>{1, 4, 9, 16, 25}[k] == t) dense += m.w.row(static_cast<Eigen::Index>(k)).transpose();
    EXPECT_LT((linear_scores(m, f(id)) - dense).norm(), 1e-12);
  }
}

namespace {

ScoreMatrix brute_knn(const Corpus& c, const std::vector<ImageId>& train, const std::vector<ImageId>& query,
                      std::size_t k) {
  ScoreMatrix out(query, c.num_labels());
  for (std::size_t r = 0; r < query.size(); ++r) {
    std::vector<std::pair<double, ImageId>> d;
    for (ImageId t : train) {
      double s = 0;
      for (std::size_t j = 0; j < c.dim; ++j) {
        const double diff = static_cast<double>(c.at(t).features[j]) - c.at(query[r]).features[j];
        s += diff * diff;
      }
      d.emplace_back(std::sqrt(s), t);
    }
    std::sort(d.begin(), d.end());
    for (std::size_t i = 0; i < k; ++i)
      for (LabelId l : c.at(d[i].second).labels) out.at(r, l) += 1.0 / static_cast<double>(k);
  }
  return out;
}

}  // namespace

TEST(KnnVote, SingleNeighborCopiesItsLabels) {
  const Corpus c = random_corpus({}, 10);
  const auto ids = c.ids();
  const std::vector<ImageId> train(ids.begin(), ids.begin() + 30);
  const auto s = knn_vote(c, train, train, 1);
  for (std::size_t r = 0; r < train.size(); ++r)
    for (std::size_t l = 0; l < c.num_labels(); ++l)
      EXPECT_EQ(s.at(r, l), c.at(train[r]).has_label(static_cast<LabelId>(l)) ? 1.0 : 0.0);
}

TEST(KnnVote, MatchesBruteForce) {
  RandomCorpusOptions o;
  o.images = 200;
  o.dim = 5;
  const Corpus c = random_corpus(o, 11);
  const auto ids = c.ids();
  const std::vector<ImageId> train(ids.begin(), ids.begin() + 150), query(ids.begin() + 150, ids.end());
  for (std::size_t k : {1u, 7u, 50u}) {
    const auto got = knn_vote(c, train, query, k, 2);
    const auto want = brute_knn(c, train, query, k);
    for (std::size_t i = 0; i < got.scores.size(); ++i) EXPECT_NEAR(got.scores[i], want.scores[i], 1e-12);
  }
  EXPECT_THROW(knn_vote(c, train, query, 151), ValidationError);
}

namespace {

struct VotingSetup {
  ScoreMatrix own;
  NeighborTable table;
  VotingSetup() : own({10, 20, 30}, 2) {
    own.scores = {1, 0, 0, 1, 3, 3};
    table = NeighborTable({NeighborList{10, {{20, 0.1}, {30, 0.2}}}, NeighborList{20, {{10, 0.0}, {30, 0.5}}},
                           NeighborList{30, {}}});
  }
};

}  // namespace

TEST(NeighborhoodVoting, AlphaEndpoints) {
  const VotingSetup v;
  EXPECT_EQ(neighborhood_voting(v.own, v.table, 1.0, 6).scores, v.own.scores);
  const auto pure = neighborhood_voting(v.own, v.table, 0.0, 6);
  EXPECT_DOUBLE_EQ(pure.at(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(pure.at(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(pure.at(1, 0), 2.0);
  EXPECT_EQ(pure.at(2, 0), 3.0);  // empty list keeps own scores
  const auto one = neighborhood_voting(v.own, v.table, 0.0, 1);
  EXPECT_DOUBLE_EQ(one.at(0, 0), 0.0);
  const auto mix = neighborhood_voting(v.own, v.table, 0.25, 6);
  EXPECT_DOUBLE_EQ(mix.at(0, 0), 0.25 * 1 + 0.75 * 1.5);
  EXPECT_THROW(neighborhood_voting(v.own, v.table, 1.5, 6), ValidationError);
}

TEST(NeighborhoodVoting, TunedAlphaIsGridArgmax) {
  RandomCorpusOptions o;
  o.images = 150;
  const Corpus c = random_corpus(o, 12);
  const auto ids = c.ids();
  ScoreMatrix own(ids, c.num_labels());
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  for (auto& v : own.scores) v = normal(rng);
  std::vector<TermId> vocab(c.vocab_size(MetadataKind::kTags));
  std::iota(vocab.begin(), vocab.end(), 0u);
  const auto table = compute_neighbors(c, ids, NeighborSource::metadata(MetadataKind::kTags), vocab, 6);
  const auto truth = ground_truth(c, ids);
  const auto sel = select_voting_alpha(own, table, truth, 6);
  ASSERT_EQ(sel.curve.size(), 11u);
  double best = -1, best_alpha = -1;
  for (int i = 0; i <= 10; ++i) {
    const double a = i / 10.0;
    const double v = map_per_label(neighborhood_voting(own, table, a, 6), truth).map;
    EXPECT_DOUBLE_EQ(sel.curve[i].second, v);
    if (v > best) best = v, best_alpha = a;
  }
  EXPECT_EQ(sel.alpha, best_alpha);
}
