#include <unistd.h>

#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>

#include "nbann/harness.hpp"
#include "test_util.hpp"

using namespace nbann;
using namespace nbann::testing;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.synth.images = 600;
  c.synth.topics = 4;
  c.synth.labels = 8;
  c.synth.dim = 16;
  c.synth.seed = 3;
  c.n_splits = 2;
  c.train.hidden = 8;
  c.train.epochs = 2;
  c.train.batch = 20;
  c.train.lr = 1e-3;
  c.train.seed = 2;
  c.knn_k = 10;
  return c;
}

void expect_same_report(const EvalReport& a, const EvalReport& b) {
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

std::string bundle_numbers(const AnnotationBundle& b) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : b.rows) j.push_back(to_json(r));
  j.push_back(b.voting_alpha);
  return j.dump();
}

}  // namespace

TEST(Annotation, SixRowsAcrossSplits) {
  ExperimentContext ctx(small_config());
  const auto b = run_annotation_experiment(ctx);
  ASSERT_EQ(b.rows.size(), 6u);
  const std::vector<std::string> names{"upper_bound", "tag_only", "visual_only", "knn_vote", "neighborhood_voting",
                                       "our_model"};
  for (std::size_t i = 0; i < names.size(); ++i) {
    EXPECT_EQ(b.rows[i].method, names[i]);
    ASSERT_EQ(b.rows[i].splits.size(), 2u);
    for (const auto& r : b.rows[i].splits) {
      EXPECT_GE(r.map_l, 0.0);
      EXPECT_LE(r.map_l, 100.0);
      EXPECT_EQ(r.label_ap.size(), 8u);
    }
  }
  EXPECT_EQ(b.voting_alpha.size(), 2u);
  EXPECT_EQ(b.config_hash, config_hash(ctx.config()));
  EXPECT_EQ(b.ap_deltas.size(), 8u - b.row("our_model").splits[0].labels_excluded);
  EXPECT_THROW(b.row("missing"), RuntimeError);

  const auto& ours = b.row("our_model");
  const auto agg = ours.aggregate();
  EXPECT_DOUBLE_EQ(agg[0].mean, (ours.splits[0].map_l + ours.splits[1].map_l) / 2);
  ASSERT_TRUE(agg[0].std.has_value());
}

TEST(Annotation, BaselineSelectionAndTagVectorRow) {
  auto cfg = small_config();
  cfg.n_splits = 1;
  cfg.baselines = {"knn_vote"};
  cfg.use_tag_vector = true;
  ExperimentContext ctx(cfg);
  const auto b = run_annotation_experiment(ctx);
  ASSERT_EQ(b.rows.size(), 3u);
  EXPECT_EQ(b.rows[0].method, "knn_vote");
  EXPECT_EQ(b.rows[1].method, "our_model");
  EXPECT_EQ(b.rows[2].method, "our_model_tag_vector");
  EXPECT_TRUE(b.voting_alpha.empty());
  EXPECT_TRUE(b.ap_deltas.empty());
}

TEST(Annotation, RerunReproducesEveryNumber) {
  ExperimentContext a(small_config());
  ExperimentContext b(small_config());
  EXPECT_EQ(bundle_numbers(run_annotation_experiment(a)), bundle_numbers(run_annotation_experiment(b)));
}

TEST(Annotation, OutputsAreWritten) {
  auto cfg = small_config();
  cfg.n_splits = 1;
  ExperimentContext ctx(cfg);
  const auto b = run_annotation_experiment(ctx);
  TempDir dir("annot");
  write_annotation_outputs(dir.path(), cfg, b);
  for (const char* f : {"annotation_report.json", "annotation_table.csv", "annotation_table.md", "ap_compare.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const auto j = nlohmann::json::parse(io::read_file(dir / "annotation_report.json"));
  EXPECT_EQ(j.at("rows").size(), 6u);
  EXPECT_EQ(j.at("config_hash").get<std::string>(), b.config_hash);
  const auto row = report_row_from_json(j["rows"][5]);
  EXPECT_EQ(row.method, "our_model");
  expect_same_report(row.splits.at(0), b.rows[5].splits.at(0));
}

TEST(Context, CacheDirReproducesRuns) {
  TempDir cache("cache");
  auto cfg = small_config();
  cfg.n_splits = 1;
  cfg.cache_dir = cache.path();
  ModelRun first;
  {
    ExperimentContext ctx(cfg);
    first = ctx.run_neighbor_model(0, ctx.standard_spec(0));
  }
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(cache.path())) ++files;
  EXPECT_GE(files, 4u);  // three neighbor tables plus a checkpoint and its sidecar
  ExperimentContext again(cfg);
  const auto second = again.run_neighbor_model(0, again.standard_spec(0));
  expect_same_report(first.report, second.report);
  EXPECT_EQ(first.test_scores, second.test_scores);
  EXPECT_EQ(first.trained.best_epoch, second.trained.best_epoch);
}

TEST(Context, ThreadCountDoesNotChangeResults) {
  auto cfg = small_config();
  cfg.n_splits = 1;
  ExperimentContext a(cfg);
  cfg.train.threads = 3;
  ExperimentContext b(cfg);
  const auto ra = a.run_neighbor_model(0, a.standard_spec(0));
  const auto rb = b.run_neighbor_model(0, b.standard_spec(0));
  EXPECT_EQ(ra.test_scores, rb.test_scores);
}

TEST(Context, PoolsAndVocabulary) {
  ExperimentContext ctx(small_config());
  const auto& s = ctx.splits().at(1);
  EXPECT_EQ(ctx.pool(1, Phase::kTrain).size(), s.train.size());
  EXPECT_EQ(ctx.pool(1, Phase::kAll).size(), ctx.corpus().size());
  EXPECT_TRUE(ctx.default_vocab(0, NeighborSource::features()).empty());
  auto cfg = small_config();
  cfg.tau = 7;
  ExperimentContext small(cfg);
  EXPECT_EQ(small.default_vocab(0, NeighborSource::metadata(MetadataKind::kTags)).size(), 7u);
  EXPECT_EQ(small.default_vocab(0, NeighborSource::metadata(MetadataKind::kSets)),
            select_tag_vocabulary(small.corpus(), small.splits()[0].train, MetadataKind::kSets, 7));
}

TEST(Context, ExplicitCorpusAndSplits) {
  const Corpus c = random_corpus({}, 21);
  auto splits = make_splits(c, {0.6, 0.2, 0.2}, 1, 4);
  ExperimentContext ctx(small_config(), c, splits);
  EXPECT_EQ(ctx.corpus().size(), c.size());
  EXPECT_EQ(ctx.splits()[0].test, splits[0].test);
  EXPECT_FALSE(ctx.synth().has_value());
}

TEST(MetadataComparison, RowsAndCrossTableDiagonal) {
  auto cfg = small_config();
  ExperimentContext ctx(cfg);
  const auto rows = run_metadata_comparison(ctx, true);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0].name, "visual_only");
  EXPECT_EQ(rows[1].name, "tags");
  EXPECT_EQ(rows[2].name, "groups");
  EXPECT_EQ(rows[3].name, "sets");
  EXPECT_EQ(rows[4].name, "visual");

  const auto table = run_cross_metadata(ctx);
  for (std::size_t split = 0; split < 2; ++split) {
    EXPECT_EQ(table.visual_only[split], rows[0].splits[split].map_l);
    EXPECT_EQ(table.map_l[0][0][split], rows[1].splits[split].map_l);
    EXPECT_EQ(table.map_l[2][2][split], rows[2].splits[split].map_l);
    EXPECT_EQ(table.map_l[1][1][split], rows[3].splits[split].map_l);
  }
  for (MetadataKind tr : kTableKinds)
    for (MetadataKind te : kTableKinds) EXPECT_EQ(table.map_l[static_cast<int>(tr)][static_cast<int>(te)].size(), 2u);
  const auto csv = format_cross_csv(table);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "train\\test,tags,sets,groups");
}

TEST(CrossMetadata, OffDiagonalCellUsesEachSideVocabulary) {
  auto cfg = small_config();
  cfg.n_splits = 1;
  ExperimentContext ctx(cfg);
  const auto table = run_cross_metadata(ctx);
  auto spec = ctx.standard_spec(0);
  spec.train_source = NeighborSource::metadata(MetadataKind::kGroups);
  spec.train_vocab = ctx.default_vocab(0, spec.train_source);
  spec.test_source = NeighborSource::metadata(MetadataKind::kTags);
  spec.test_vocab = ctx.default_vocab(0, spec.test_source);
  EXPECT_EQ(table.cell(MetadataKind::kGroups, MetadataKind::kTags).mean, ctx.run_neighbor_model(0, spec).report.map_l);
}

TEST(OverlapVocabularies, SharesTheRequestedFraction) {
  std::vector<TermId> standard(40);
  std::iota(standard.begin(), standard.end(), 100u);
  for (double o : {0.0, 0.25, 0.5, 1.0}) {
    const auto [train, test] = overlap_vocabularies(standard, o, 9);
    std::vector<TermId> shared, all;
    std::set_intersection(train.begin(), train.end(), test.begin(), test.end(), std::back_inserter(shared));
    std::set_union(train.begin(), train.end(), test.begin(), test.end(), std::back_inserter(all));
    EXPECT_EQ(all, standard);
    EXPECT_EQ(shared.size(), static_cast<std::size_t>(2 * std::llround(o * 20)));
    EXPECT_EQ(train.size(), 20 + static_cast<std::size_t>(std::llround(o * 20)));
    EXPECT_TRUE(std::is_sorted(train.begin(), train.end()));
  }
  const auto odd = overlap_vocabularies({1, 2, 3}, 0.0, 1);
  EXPECT_EQ(odd.first.size() + odd.second.size(), 3u);
  EXPECT_EQ(overlap_vocabularies(standard, 0.5, 9), overlap_vocabularies(standard, 0.5, 9));
  EXPECT_THROW(overlap_vocabularies({1}, 0.5, 1), ValidationError);
  EXPECT_THROW(overlap_vocabularies(standard, 1.5, 1), ValidationError);
}

TEST(VocabOverlap, FullOverlapIsTheStandardRun) {
  auto cfg = small_config();
  cfg.n_splits = 1;
  ExperimentContext ctx(cfg);
  const auto points = run_vocab_overlap(ctx, {0.0, 1.0});
  ASSERT_EQ(points.size(), 2u);
  EXPECT_EQ(points[0].shared_terms, 0u);
  EXPECT_EQ(points[0].train_terms + points[0].test_terms,
            ctx.default_vocab(0, NeighborSource::metadata(MetadataKind::kTags)).size());
  EXPECT_EQ(points[1].shared_terms, points[1].train_terms);
  auto spec = ctx.standard_spec(0);
  expect_same_report(points[1].splits.at(0), ctx.run_neighbor_model(0, spec).report);
}

TEST(Sweep, GridShapeAndInfeasiblePoints) {
  auto cfg = small_config();
  cfg.n_splits = 1;
  cfg.train.epochs = 1;
  ExperimentContext ctx(cfg);
  SweepGrid grid;
  grid.m = {1, 3, 7};
  grid.max_rank = {2, 6};
  grid.tau = {50, 5000};
  const auto points = run_sweep(ctx, grid);
  ASSERT_EQ(points.size(), 7u);
  EXPECT_EQ(points[0].factor, "m");
  EXPECT_FALSE(points[2].map_l.has_value());  // m=7 > M=6
  EXPECT_FALSE(points[3].map_l.has_value());  // M=2 < m=3
  EXPECT_EQ(points[3].factor, "M");
  EXPECT_TRUE(points[5].map_l.has_value());
  EXPECT_EQ(points[5].tau, 50u);
  // The configured point appears once per factor with identical results.
  ASSERT_TRUE(points[1].map_l && points[4].map_l && points[6].map_l);
  EXPECT_EQ(*points[1].map_l, *points[4].map_l);
  EXPECT_EQ(*points[1].map_l, *points[6].map_l);
  EXPECT_EQ(*points[1].map_l, ctx.run_neighbor_model(0, ctx.standard_spec(0)).report.map_l);
}

TEST(Correlation, CurvesForEveryKindAndCsv) {
  auto cfg = small_config();
  cfg.n_splits = 1;
  ExperimentContext ctx(cfg);
  const auto curves = run_correlation_analysis(ctx, 5);
  ASSERT_EQ(curves.size(), 3u);
  EXPECT_EQ(curves[0].first, MetadataKind::kTags);
  const auto csv = format_correlation_csv(ctx.corpus(), curves[0].first, curves[0].second);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 8 * 5);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "kind,label,name,k,p_shared,base_rate,trials");
  // Tag neighbors carry topic signal on the generator's defaults.
  EXPECT_GT(*curves[0].second.mean_curve(1), 1.3 * curves[0].second.mean_base_rate());
}

TEST(Config, JsonRoundTripAndHash) {
  auto cfg = small_config();
  cfg.test_source = NeighborSource::metadata(MetadataKind::kGroups);
  cfg.upper_bound_train = cfg.train;
  cfg.upper_bound_train->lr = 1e-2;
  cfg.baselines = {"tag_only", "knn_vote"};
  const auto back = experiment_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_EQ(config_hash(back), config_hash(cfg));
  auto other = cfg;
  other.train.lr = 2e-3;
  EXPECT_NE(config_hash(other), config_hash(cfg));
  EXPECT_EQ(config_hash(cfg).size(), 16u);
}

TEST(Config, PartialJsonKeepsDefaultsAndRejectsBadInput) {
  const auto c = experiment_config_from_json(nlohmann::json::parse(R"({"tau": 40, "neighborhood": {"M": 9}})"));
  EXPECT_EQ(c.tau, 40u);
  EXPECT_EQ(c.neighborhood.max_rank, 9u);
  EXPECT_EQ(c.neighborhood.m, 3u);
  EXPECT_EQ(c.train.hidden, 500u);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"baselines": ["oracle"]})")), ValidationError);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"tau": "many"})")), ValidationError);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"train_source": "emails"})")), ValidationError);
}

TEST(History, JsonRoundTripKeepsMissingValidation) {
  const std::vector<EpochRecord> h{{1, 0.5, std::numeric_limits<double>::quiet_NaN(), 10.0, 0.25},
                                   {2, 0.25, 30.0, 40.0, 0.5}};
  const auto j = history_to_json(h);
  EXPECT_TRUE(j[0]["val_mAP_L"].is_null());
  const auto back = history_from_json(j);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_TRUE(std::isnan(back[0].val_map_l));
  EXPECT_EQ(back[1].val_map_l, 30.0);
  EXPECT_EQ(back[1].wall_seconds, 0.5);
}

TEST(Report, MeanStdFormatting) {
  const auto m = mean_std({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(m.mean, 2.0);
  ASSERT_TRUE(m.std.has_value());
  EXPECT_DOUBLE_EQ(*m.std, 1.0);
  EXPECT_EQ(format_mean_std(m), "2.00 ± 1.00");
  const auto one = mean_std({52.781});
  EXPECT_FALSE(one.std.has_value());
  EXPECT_EQ(format_mean_std(one), "52.78");
  EXPECT_EQ(fmt2(100.0), "100.00");
}

TEST(Report, TableAndCsvLayout) {
  EvalReport r;
  r.map_l = 52.78;
  r.map_i = 80.0;
  ReportRow row{"our_model", {r, r}};
  const auto table = format_table({row});
  EXPECT_NE(table.find("our_model"), std::string::npos);
  EXPECT_NE(table.find("52.78 ± 0.00"), std::string::npos);
  const auto csv = format_csv({row});
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  const auto back = report_row_from_json(to_json(row));
  EXPECT_EQ(back.method, "our_model");
  EXPECT_EQ(back.splits.size(), 2u);
}

namespace {

struct CliResult {
  int code;
  std::string err;
};

CliResult run_cli(const std::string& args) {
  TempDir tmp("cli");
  const auto err = tmp / "stderr.txt";
  const std::string cmd = std::string(NBANN_CLI_PATH) + " " + args + " >/dev/null 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, io::read_file(err)};
}

}  // namespace

TEST(Cli, ExitCodesAndJsonErrors) {
  TempDir dir("cli-corpus");
  const auto gen = run_cli("gen-synth --images 200 -o " + dir.path().string());
  ASSERT_EQ(gen.code, 0) << gen.err;
  EXPECT_EQ(run_cli("validate " + dir.path().string()).code, 0);

  {
    auto lines = io::read_lines(dir / "metadata.jsonl");
    lines.push_back(lines.front());
    std::ofstream out(dir / "metadata.jsonl");
    for (const auto& l : lines) out << l << '\n';
  }
  const auto bad = run_cli("validate " + dir.path().string());
  EXPECT_EQ(bad.code, 1);
  const auto j = nlohmann::json::parse(bad.err);
  EXPECT_EQ(j.at("error"), "validation");
  EXPECT_EQ(j.at("exit_code"), 1);

  EXPECT_EQ(run_cli("validate /nonexistent/corpus").code, 1);
  EXPECT_EQ(run_cli("no-such-command").code, 1);
  EXPECT_EQ(run_cli("train --epochs 1 --hidden 4 --m 7 --max-rank 6").code, 1);
}

TEST(Cli, TrainThenEvaluate) {
  TempDir out("cli-out");
  const std::string common = "--synth-images 300 --hidden 8 --epochs 1 --batch 20 --lr 1e-3 -o " + out.path().string();
  const auto tr = run_cli("train " + common);
  ASSERT_EQ(tr.code, 0) << tr.err;
  EXPECT_TRUE(std::filesystem::exists(out / "model.nlpm"));
  EXPECT_TRUE(std::filesystem::exists(out / "history.csv"));
  const auto ev = run_cli("evaluate " + common + " --checkpoint " + (out / "model.nlpm").string());
  EXPECT_EQ(ev.code, 0) << ev.err;
  std::ofstream(out / "junk.nlpm") << "NL";
  const auto junk = run_cli("evaluate --synth-images 300 --checkpoint " + (out / "junk.nlpm").string());
  EXPECT_EQ(junk.code, 1);
  EXPECT_EQ(nlohmann::json::parse(junk.err).at("error"), "validation");
}
