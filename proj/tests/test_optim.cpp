#include <unistd.h>

#include <gtest/gtest.h>

#include "model_oracle.hpp"
#include "nbann/optim.hpp"
#include "test_util.hpp"

using namespace nbann;
using namespace nbann::testing;

namespace {

struct OptimSetup {
  Corpus corpus;
  SplitSpec split;
  NeighborTable train_nbrs, val_nbrs;

  OptimSetup() {
    RandomCorpusOptions o;
    o.images = 120;
    o.dim = 7;
    o.labels = 4;
    o.vocab = {20, 5, 5};
    o.max_terms = {5, 1, 1};
    corpus = random_corpus(o, 17);
    split = make_splits(corpus, {0.6, 0.2, 0.2}, 1, 3).at(0);
    std::vector<TermId> vocab(20);
    std::iota(vocab.begin(), vocab.end(), 0u);
    train_nbrs = compute_neighbors(corpus, split.train, NeighborSource::metadata(MetadataKind::kTags), vocab, 6);
    val_nbrs = compute_neighbors(corpus, split.val, NeighborSource::metadata(MetadataKind::kTags), vocab, 6);
  }

  NeighborTrainInputs inputs() const {
    NeighborTrainInputs in;
    in.corpus = &corpus;
    in.train_ids = split.train;
    in.val_ids = split.val;
    in.train_neighbors = &train_nbrs;
    in.val_neighbors = &val_nbrs;
    return in;
  }
};

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.hidden = 8;
  cfg.batch = 10;
  cfg.epochs = 4;
  cfg.lr = 1e-3;
  cfg.seed = 5;
  return cfg;
}

void expect_same_history(const std::vector<EpochRecord>& a, const std::vector<EpochRecord>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].epoch, b[i].epoch);
    EXPECT_EQ(a[i].train_loss, b[i].train_loss);
    EXPECT_EQ(a[i].val_map_l, b[i].val_map_l);
    EXPECT_EQ(a[i].val_map_i, b[i].val_map_i);
  }
}

}  // namespace

TEST(RmsProp, ScalarHandExample) {
  auto p = ModelParams::zeros(1, 1, 1);
  auto g = p.zeros_like(), cache = p.zeros_like();
  g.wx(0, 0) = 1.0;
  rmsprop_step(p, g, cache, 1e-4, 0.99, 1e-8);
  EXPECT_NEAR(p.wx(0, 0), -1e-4 / (std::sqrt(0.01) + 1e-8), 1e-15);
  EXPECT_NEAR(p.wx(0, 0), -1e-3, 1e-9);
  EXPECT_NEAR(cache.wx(0, 0), 0.01, 1e-15);
  EXPECT_EQ(p.version, 1u);
}

TEST(RmsProp, ZeroGradientOnlyDecaysCache) {
  auto p = init_params(3, 2, 2, 1);
  const auto before = p;
  auto g = p.zeros_like(), cache = p.zeros_like();
  cache.wy.setConstant(1.0);
  rmsprop_step(p, g, cache, 1e-2, 0.99, 1e-8);
  EXPECT_EQ(p.wx, before.wx);
  EXPECT_EQ(p.wy, before.wy);
  EXPECT_DOUBLE_EQ(cache.wy(0, 0), 0.99);
}

TEST(RmsProp, NonFiniteGradientAborts) {
  auto p = ModelParams::zeros(1, 1, 1);
  auto g = p.zeros_like(), cache = p.zeros_like();
  g.by(0) = std::numeric_limits<double>::infinity();
  try {
    rmsprop_step(p, g, cache, 1e-4, 0.99, 1e-8);
    FAIL();
  } catch (const RuntimeError& e) {
    EXPECT_NE(std::string(e.what()).find("b_y"), std::string::npos);
  }
}

TEST(Fit, L2AloneShrinksMatricesOnly) {
  auto p = init_params(3, 4, 2, 8);
  p.bx.setConstant(0.7);
  TrainConfig cfg;
  cfg.l2 = 0.5;
  cfg.lr = 1e-2;
  cfg.epochs = 3;
  cfg.batch = 2;
  const std::vector<ImageId> ids{1, 2, 3, 4};
  const auto none = [](const ModelParams&, ImageId, std::size_t, ModelParams&) { return 0.0; };
  const auto no_val = [](const ModelParams&) -> std::optional<std::pair<double, double>> { return std::nullopt; };
  const auto r = fit(p, ids, cfg, none, no_val);
  EXPECT_LT(r.best.wx.squaredNorm(), p.wx.squaredNorm());
  EXPECT_LT(r.best.wy.squaredNorm(), p.wy.squaredNorm());
  EXPECT_EQ(r.best.bx, p.bx);
  EXPECT_EQ(r.best_epoch, 3u);  // no validation: last epoch
}

TEST(Fit, BatchGradientIsMeanOfExamples) {
  // One step with batch 4 and gradients 0..3 on b_y.
  auto p = ModelParams::zeros(1, 1, 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 4;
  cfg.lr = 1e-3;
  std::vector<ImageId> ids{0, 1, 2, 3};
  std::vector<ImageId> seen;
  const auto ex = [&](const ModelParams&, ImageId id, std::size_t, ModelParams& g) {
    seen.push_back(id);
    g.by(0) += static_cast<double>(id);  // mean 1.5
    return 1.0;
  };
  const auto no_val = [](const ModelParams&) -> std::optional<std::pair<double, double>> { return std::nullopt; };
  const auto r = fit(p, ids, cfg, ex, no_val);
  EXPECT_NEAR(r.best.by(0), -1e-3 * 1.5 / (std::sqrt(0.01 * 1.5 * 1.5) + 1e-8), 1e-15);
  EXPECT_EQ(r.history.at(0).train_loss, 1.0);
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, ids);
}

TEST(Train, ZeroEpochsReturnsInitialParams) {
  const OptimSetup s;
  auto cfg = small_config();
  cfg.epochs = 0;
  const auto r = train(s.inputs(), NeighborhoodSpec{}, cfg);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.best_epoch, 0u);
  const auto init = init_params(7, 8, 4, derive_seed(cfg.seed, 0x1417u));
  EXPECT_EQ(r.best.wx, init.wx);
  EXPECT_EQ(r.best.wy, init.wy);
}

TEST(Train, DeterministicHistoryAcrossRunsAndThreads) {
  const OptimSetup s;
  auto cfg = small_config();
  const auto a = train(s.inputs(), NeighborhoodSpec{}, cfg);
  const auto b = train(s.inputs(), NeighborhoodSpec{}, cfg);
  cfg.threads = 3;
  const auto c = train(s.inputs(), NeighborhoodSpec{}, cfg);
  expect_same_history(a.history, b.history);
  expect_same_history(a.history, c.history);
  EXPECT_EQ(a.best.wy, c.best.wy);
  for (std::size_t i = 1; i < a.history.size(); ++i)
    EXPECT_GE(a.history[i].wall_seconds, a.history[i - 1].wall_seconds);
}

TEST(Train, BestSnapshotReproducesItsValidationScore) {
  const OptimSetup s;
  auto cfg = small_config();
  cfg.epochs = 6;
  cfg.lr = 3e-3;
  const NeighborhoodSpec spec;
  const auto r = train(s.inputs(), spec, cfg);
  double best = -1;
  std::size_t best_epoch = 0;
  for (const auto& h : r.history)
    if (h.val_map_l > best) {
      best = h.val_map_l;
      best_epoch = h.epoch;
    }
  EXPECT_EQ(r.best_epoch, best_epoch);
  EXPECT_EQ(r.best_val_map_l, best);
  const auto scores = evaluate_scores(r.best, s.corpus, s.split.val, s.val_nbrs, spec);
  EXPECT_DOUBLE_EQ(map_per_label(scores, ground_truth(s.corpus, s.split.val)).map, best);
}

TEST(Train, LossDecreasesOnLearnableData) {
  const OptimSetup s;
  auto cfg = small_config();
  cfg.epochs = 15;
  cfg.lr = 3e-3;
  cfg.dropout = 0.0;
  const auto r = train(s.inputs(), NeighborhoodSpec{}, cfg);
  EXPECT_LT(r.history.back().train_loss, 0.8 * r.history.front().train_loss);
}

TEST(Train, TagVectorWidensOutputLayer) {
  const OptimSetup s;
  std::vector<TermId> vocab{0, 3, 5, 7};
  const TagVectorizer tags(vocab);
  auto in = s.inputs();
  in.tags = &tags;
  auto cfg = small_config();
  cfg.epochs = 1;
  const auto r = train(in, NeighborhoodSpec{}, cfg);
  EXPECT_EQ(r.best.tag_width(), 4u);
  EXPECT_EQ(r.best.wy.rows(), 2 * 8 + 4);
}

TEST(Train, MissingNeighborListIsAnError) {
  const OptimSetup s;
  auto in = s.inputs();
  in.train_neighbors = &s.val_nbrs;
  EXPECT_THROW(train(in, NeighborhoodSpec{}, small_config()), ValidationError);
  NeighborhoodSpec bad;
  bad.m = 7;
  EXPECT_THROW(train(s.inputs(), bad, small_config()), ValidationError);
}

TEST(TagVectorizer, PositionsFollowSortedVocabulary) {
  const TagVectorizer t({9, 2, 5});
  EXPECT_EQ(t.width(), 3u);
  EXPECT_EQ(t.positions(std::vector<TermId>{2, 3, 9}), (std::vector<std::uint32_t>{0, 2}));
}

TEST(EvaluateScores, ZeroParamsGiveZeroMatrix) {
  const OptimSetup s;
  const auto p = ModelParams::zeros(7, 8, 4);
  const auto m = evaluate_scores(p, s.corpus, s.split.val, s.val_nbrs, NeighborhoodSpec{});
  EXPECT_EQ(m.rows(), s.split.val.size());
  for (double v : m.scores) EXPECT_EQ(v, 0.0);
}

TEST(EvaluateScores, DeterministicOrderFreeAndExactWhenSaturated) {
  const OptimSetup s;
  const auto p = init_params(7, 8, 4, 12);
  NeighborhoodSpec spec;
  spec.seed = 4;
  const auto a = evaluate_scores(p, s.corpus, s.split.val, s.val_nbrs, spec);
  const auto b = evaluate_scores(p, s.corpus, s.split.val, s.val_nbrs, spec, nullptr, MetadataKind::kTags, 4);
  EXPECT_EQ(a.scores, b.scores);

  std::vector<ImageId> reversed(s.split.val.rbegin(), s.split.val.rend());
  const auto r = evaluate_scores(p, s.corpus, reversed, s.val_nbrs, spec);
  for (std::size_t i = 0; i < reversed.size(); ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(r.at(reversed.size() - 1 - i, c), a.at(i, c));

  spec.samples_test = 20;
  const auto full = evaluate_scores(p, s.corpus, s.split.val, s.val_nbrs, spec);
  spec.samples_test = 500;
  spec.seed = 99;
  const auto more = evaluate_scores(p, s.corpus, s.split.val, s.val_nbrs, spec);
  EXPECT_EQ(full.scores, more.scores);
  const ImageId id = s.split.val[0];
  const auto& list = *s.val_nbrs.find(id);
  const Vec exact = score_image(p, s.corpus, id, enumerate_candidates(list, 3));
  const std::size_t row = 0;
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(full.at(row, c), exact(c), 1e-13);
}

TEST(NeighborhoodsFor, ShortAndMissingLists) {
  NeighborTable t({NeighborList{1, {{2, 0.0}, {3, 0.1}}}});
  NeighborhoodSpec spec;
  EXPECT_TRUE(neighborhoods_for(1, t, spec, 10, 0).empty());
  EXPECT_THROW(neighborhoods_for(5, t, spec, 10, 0), ValidationError);
  spec.allow_missing = true;
  EXPECT_TRUE(neighborhoods_for(5, t, spec, 10, 0).empty());
  spec.m = 2;
  EXPECT_EQ(neighborhoods_for(1, t, spec, 10, 0).size(), 1u);
  EXPECT_EQ(count_degenerate(std::vector<ImageId>{1, 5}, t, spec), 1u);
}

TEST(History, CsvLayout) {
  TempDir dir("hist");
  save_history(dir / "h.csv", {{1, 0.5, 40.0, 50.0, 0.1}});
  const auto lines = io::read_lines(dir / "h.csv");
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "epoch,train_loss,val_mAP_L,val_mAP_I,wall_seconds");
  EXPECT_EQ(lines[1].substr(0, 6), "1,0.5,");
}
