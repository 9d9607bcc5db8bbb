#pragma once

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbann/baselines.hpp"
#include "nbann/common.hpp"
#include "nbann/corpus.hpp"
#include "nbann/metrics.hpp"
#include "nbann/model.hpp"
#include "nbann/neighbors.hpp"
#include "nbann/optim.hpp"
#include "nbann/report.hpp"
#include "nbann/synth.hpp"

namespace nbann {

inline constexpr const char* kAllBaselines[] = {"upper_bound", "tag_only", "visual_only", "knn_vote",
                                                "neighborhood_voting"};

/// Everything an experiment needs; mirrors the JSON config file.
struct ExperimentConfig {
  std::filesystem::path corpus_dir;   // empty: generate from `synth`
  SynthConfig synth;
  bool filter = true;
  std::array<double, 3> fractions{0.6, 0.2, 0.2};
  std::size_t n_splits = 1;
  std::uint64_t split_seed = 1;
  NeighborSource train_source = NeighborSource::metadata(MetadataKind::kTags);
  NeighborSource test_source = NeighborSource::metadata(MetadataKind::kTags);
  std::size_t tau = 5000;
  NeighborhoodSpec neighborhood;
  TrainConfig train;
  std::optional<TrainConfig> upper_bound_train;  // defaults to `train`
  std::vector<std::string> baselines{std::begin(kAllBaselines), std::end(kAllBaselines)};
  std::size_t knn_k = 50;
  std::size_t top_n = 3;
  bool use_tag_vector = false;
  std::filesystem::path output_dir;
  std::filesystem::path cache_dir;    // empty: in-memory caching only
  bool svg = false;
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  if (!c.corpus_dir.empty())
    j["corpus"] = c.corpus_dir.string();
  else
    j["synth"] = to_json(c.synth);
  j["filter"] = c.filter;
  j["split"] = {{"fractions", c.fractions}, {"n_splits", c.n_splits}, {"seed", c.split_seed}};
  j["train_source"] = c.train_source.name();
  j["test_source"] = c.test_source.name();
  j["tau"] = c.tau;
  j["neighborhood"] = {{"m", c.neighborhood.m},
                       {"M", c.neighborhood.max_rank},
                       {"samples_train", c.neighborhood.samples_train},
                       {"samples_test", c.neighborhood.samples_test},
                       {"seed", c.neighborhood.seed}};
  j["train"] = to_json(c.train);
  if (c.upper_bound_train) j["upper_bound_train"] = to_json(*c.upper_bound_train);
  j["baselines"] = c.baselines;
  j["knn_k"] = c.knn_k;
  j["top_n"] = c.top_n;
  j["use_tag_vector"] = c.use_tag_vector;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig c = {}) {
  try {
    if (j.contains("corpus")) c.corpus_dir = j["corpus"].get<std::string>();
    if (j.contains("synth")) c.synth = synth_config_from_json(j["synth"], c.synth);
    c.filter = j.value("filter", c.filter);
    if (j.contains("split")) {
      const auto& s = j["split"];
      if (s.contains("fractions")) c.fractions = s["fractions"].get<std::array<double, 3>>();
      c.n_splits = s.value("n_splits", c.n_splits);
      c.split_seed = s.value("seed", c.split_seed);
    }
    if (j.contains("train_source")) c.train_source = NeighborSource::parse(j["train_source"].get<std::string>());
    if (j.contains("test_source")) c.test_source = NeighborSource::parse(j["test_source"].get<std::string>());
    c.tau = j.value("tau", c.tau);
    if (j.contains("neighborhood")) {
      const auto& n = j["neighborhood"];
      c.neighborhood.m = n.value("m", c.neighborhood.m);
      c.neighborhood.max_rank = n.value("M", c.neighborhood.max_rank);
      c.neighborhood.samples_train = n.value("samples_train", c.neighborhood.samples_train);
      c.neighborhood.samples_test = n.value("samples_test", c.neighborhood.samples_test);
      c.neighborhood.seed = n.value("seed", c.neighborhood.seed);
    }
    if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);
    if (j.contains("upper_bound_train"))
      c.upper_bound_train = train_config_from_json(j["upper_bound_train"], c.upper_bound_train.value_or(c.train));
    if (j.contains("baselines")) c.baselines = j["baselines"].get<std::vector<std::string>>();
    c.knn_k = j.value("knn_k", c.knn_k);
    c.top_n = j.value("top_n", c.top_n);
    c.use_tag_vector = j.value("use_tag_vector", c.use_tag_vector);
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    if (j.contains("cache_dir")) c.cache_dir = j["cache_dir"].get<std::string>();
    c.svg = j.value("svg", c.svg);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  for (const auto& b : c.baselines)
    if (std::find_if(std::begin(kAllBaselines), std::end(kAllBaselines), [&](const char* n) { return b == n; }) ==
        std::end(kAllBaselines))
      throw ValidationError("config: unknown baseline '" + b + "'");
  return c;
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

/// Content hash of a corpus (ids, labels, terms and feature bits).
inline std::uint64_t corpus_fingerprint(const Corpus& corpus) {
  std::uint64_t h = fnv1a("nbann-corpus");
  const auto feed = [&h](const void* p, std::size_t n) {
    h = fnv1a(std::string_view(static_cast<const char*>(p), n), h);
  };
  for (const auto& im : corpus.images) {
    feed(&im.id, sizeof im.id);
    feed(im.features.data(), im.features.size() * sizeof(float));
    feed(im.labels.data(), im.labels.size() * sizeof(LabelId));
    for (const auto& t : im.metadata) {
      const std::size_t n = t.size();
      feed(&n, sizeof n);
      feed(t.data(), t.size() * sizeof(TermId));
    }
  }
  return h;
}

inline std::uint64_t hash_ids(std::span<const std::uint32_t> v, std::uint64_t seed = 0) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(std::uint32_t)),
               mix64(seed));
}

inline nlohmann::json history_to_json(const std::vector<EpochRecord>& history) {
  nlohmann::json out = nlohmann::json::array();
  const auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  for (const auto& r : history)
    out.push_back({{"epoch", r.epoch},
                   {"train_loss", r.train_loss},
                   {"val_mAP_L", num(r.val_map_l)},
                   {"val_mAP_I", num(r.val_map_i)},
                   {"wall_seconds", r.wall_seconds}});
  return out;
}

inline std::vector<EpochRecord> history_from_json(const nlohmann::json& j) {
  std::vector<EpochRecord> out;
  const auto num = [](const nlohmann::json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  for (const auto& r : j) {
    EpochRecord e;
    e.epoch = r.at("epoch").get<std::size_t>();
    e.train_loss = r.at("train_loss").get<double>();
    e.val_map_l = num(r.at("val_mAP_L"));
    e.val_map_i = num(r.at("val_mAP_I"));
    e.wall_seconds = r.at("wall_seconds").get<double>();
    out.push_back(e);
  }
  return out;
}

enum class Phase { kTrain, kVal, kTest, kAll };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kTrain:
      return "train";
    case Phase::kVal:
      return "val";
    case Phase::kTest:
      return "test";
    case Phase::kAll:
      return "all";
  }
  return "?";
}

struct ModelRun {
  TrainResult<ModelParams> trained;
  ScoreMatrix test_scores;
  EvalReport report;
  std::size_t degenerate_test = 0;
};

struct VisualOnlyRun {
  LinearModel model;
  ScoreMatrix val_scores, test_scores;
  EvalReport report;
};

/// Which neighbors (and vocabulary) each phase of a neighbor-model run uses.
/// Validation follows the training side.
struct NeighborRunSpec {
  NeighborSource train_source;
  std::vector<TermId> train_vocab;
  NeighborSource test_source;
  std::vector<TermId> test_vocab;
  NeighborhoodSpec neighborhood;
  TrainConfig train;
  bool use_tag_vector = false;
};

/// Loaded corpus, splits and caches shared by the experiments of one
/// configuration. Neighbor tables are cached per (split, phase, source,
/// vocabulary) and reused for any smaller M.
class ExperimentContext {
 public:
  explicit ExperimentContext(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.corpus_dir.empty()) {
      synth_ = synth_generate(cfg_.synth);
      corpus_ = synth_->corpus;
    } else {
      corpus_ = load_corpus_dir(cfg_.corpus_dir);
    }
    if (cfg_.filter) corpus_ = filter_images(corpus_);
    splits_ = make_splits(corpus_, cfg_.fractions, cfg_.n_splits, cfg_.split_seed);
    fingerprint_ = corpus_fingerprint(corpus_);
  }

  ExperimentContext(ExperimentConfig cfg, Corpus corpus, std::vector<SplitSpec> splits)
      : cfg_(std::move(cfg)), corpus_(std::move(corpus)), splits_(std::move(splits)) {
    corpus_.reindex();
    fingerprint_ = corpus_fingerprint(corpus_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  ExperimentConfig& config() { return cfg_; }
  const Corpus& corpus() const { return corpus_; }
  const std::vector<SplitSpec>& splits() const { return splits_; }
  const std::optional<SynthCorpus>& synth() const { return synth_; }

  std::span<const ImageId> pool(std::size_t split, Phase phase) const {
    const auto& s = splits_.at(split);
    switch (phase) {
      case Phase::kTrain:
        return s.train;
      case Phase::kVal:
        return s.val;
      case Phase::kTest:
        return s.test;
      case Phase::kAll:
        break;
    }
    if (all_ids_.empty()) all_ids_ = corpus_.ids();
    return all_ids_;
  }

  /// Standard vocabulary for a source: the tau most frequent training tags,
  /// or the full vocabulary of other kinds.
  std::vector<TermId> default_vocab(std::size_t split, NeighborSource source) const {
    if (source.visual) return {};
    return select_tag_vocabulary(corpus_, splits_.at(split).train, source.kind, cfg_.tau);
  }

  const NeighborTable& neighbors(std::size_t split, Phase phase, NeighborSource source,
                                 const std::vector<TermId>& vocab, std::size_t max_rank) {
    const auto pool_ids = pool(split, phase);
    const std::string key = std::to_string(split) + "/" + phase_name(phase) + "/" + source.name() + "/" +
                            hex64(hash_ids(vocab));
    auto it = neighbor_cache_.find(key);
    if (it != neighbor_cache_.end() && it->second.max_rank >= max_rank) return *it->second.table;

    std::vector<ImageId> sorted(pool_ids.begin(), pool_ids.end());
    std::sort(sorted.begin(), sorted.end());
    std::uint64_t h = fnv1a(key, fingerprint_);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(sorted.data()), sorted.size() * sizeof(ImageId)), h);
    h = mix64(h ^ max_rank);
    std::filesystem::path file;
    std::shared_ptr<NeighborTable> table;
    if (!cfg_.cache_dir.empty()) {
      file = cfg_.cache_dir / ("nbrs-" + hex64(h) + ".jsonl");
      if (std::filesystem::exists(file)) table = std::make_shared<NeighborTable>(load_neighbors(file));
    }
    if (!table) {
      table = std::make_shared<NeighborTable>(
          compute_neighbors(corpus_, pool_ids, source, vocab, max_rank, cfg_.train.threads));
      if (!file.empty()) save_neighbors(file, *table);
    }
    neighbor_cache_[key] = {max_rank, table};
    return *table;
  }

  /// Trains on train-side neighbors, validates on val-side ones, evaluates on
  /// the test pool with test-side neighbors.
  ModelRun run_neighbor_model(std::size_t split, const NeighborRunSpec& spec) {
    nlohmann::json key_json{{"split", split},
                            {"corpus", hex64(fingerprint_)},
                            {"pools", hex64(pool_hash(split))},
                            {"train_source", spec.train_source.name()},
                            {"train_vocab", hex64(hash_ids(spec.train_vocab))},
                            {"test_source", spec.test_source.name()},
                            {"test_vocab", hex64(hash_ids(spec.test_vocab))},
                            {"m", spec.neighborhood.m},
                            {"M", spec.neighborhood.max_rank},
                            {"samples_train", spec.neighborhood.samples_train},
                            {"samples_test", spec.neighborhood.samples_test},
                            {"nb_seed", spec.neighborhood.seed},
                            {"train", to_json(spec.train)},
                            {"tag_vector", spec.use_tag_vector}};
    key_json["train"].erase("threads");
    const std::string key = hex64(fnv1a(key_json.dump()));
    if (auto it = run_cache_.find(key); it != run_cache_.end()) return it->second;

    const std::size_t depth = spec.neighborhood.max_rank;
    const auto& train_nb = neighbors(split, Phase::kTrain, spec.train_source, spec.train_vocab, depth);
    const auto& val_nb = neighbors(split, Phase::kVal, spec.train_source, spec.train_vocab, depth);
    const auto& test_nb = neighbors(split, Phase::kTest, spec.test_source, spec.test_vocab, depth);
    std::optional<TagVectorizer> tags;
    if (spec.use_tag_vector) tags.emplace(default_vocab(split, NeighborSource::metadata(MetadataKind::kTags)));

    NeighborTrainInputs in;
    in.corpus = &corpus_;
    in.train_ids = pool(split, Phase::kTrain);
    in.val_ids = pool(split, Phase::kVal);
    in.train_neighbors = &train_nb;
    in.val_neighbors = &val_nb;
    in.tags = tags ? &*tags : nullptr;

    ModelRun run;
    const std::filesystem::path ckpt =
        cfg_.cache_dir.empty() ? std::filesystem::path() : cfg_.cache_dir / ("model-" + key + ".nlpm");
    if (!ckpt.empty() && std::filesystem::exists(ckpt) && std::filesystem::exists(ckpt.string() + ".json")) {
      run.trained.best = load_checkpoint(ckpt);
      const auto meta = nlohmann::json::parse(io::read_file(ckpt.string() + ".json"));
      run.trained.best_epoch = meta.at("best_epoch").get<std::size_t>();
      run.trained.history = history_from_json(meta.at("history"));
      if (run.trained.best_epoch > 0) run.trained.best_val_map_l = run.trained.history.at(run.trained.best_epoch - 1).val_map_l;
    } else {
      run.trained = train(in, spec.neighborhood, spec.train);
      if (!ckpt.empty())
        save_checkpoint(ckpt, run.trained.best,
                        {{"key", key_json}, {"best_epoch", run.trained.best_epoch},
                         {"history", history_to_json(run.trained.history)}});
    }
    const auto test_ids = pool(split, Phase::kTest);
    run.test_scores = evaluate_scores(run.trained.best, corpus_, test_ids, test_nb, spec.neighborhood, in.tags,
                                      MetadataKind::kTags, spec.train.threads);
    run.report = evaluate_report(run.test_scores, ground_truth(corpus_, test_ids), cfg_.top_n);
    run.degenerate_test = count_degenerate(test_ids, test_nb, spec.neighborhood);
    run_cache_.emplace(key, run);
    return run;
  }

  NeighborRunSpec standard_spec(std::size_t split) const {
    NeighborRunSpec s;
    s.train_source = cfg_.train_source;
    s.test_source = cfg_.test_source;
    s.train_vocab = default_vocab(split, cfg_.train_source);
    s.test_vocab = default_vocab(split, cfg_.test_source);
    s.neighborhood = cfg_.neighborhood;
    s.train = cfg_.train;
    s.use_tag_vector = cfg_.use_tag_vector;
    return s;
  }

  const VisualOnlyRun& visual_only(std::size_t split) {
    auto it = visual_cache_.find(split);
    if (it != visual_cache_.end()) return it->second;
    VisualOnlyRun run;
    const auto feats = visual_features(corpus_);
    run.model = train_logistic_ova(corpus_, corpus_.dim, feats, pool(split, Phase::kTrain), pool(split, Phase::kVal),
                                   cfg_.train)
                    .best;
    run.val_scores = linear_score_matrix(run.model, pool(split, Phase::kVal), feats, cfg_.train.threads);
    run.test_scores = linear_score_matrix(run.model, pool(split, Phase::kTest), feats, cfg_.train.threads);
    run.report = evaluate_report(run.test_scores, ground_truth(corpus_, pool(split, Phase::kTest)), cfg_.top_n);
    return visual_cache_.emplace(split, std::move(run)).first->second;
  }

 private:
  struct CachedTable {
    std::size_t max_rank = 0;
    std::shared_ptr<NeighborTable> table;
  };

  ExperimentConfig cfg_;
  Corpus corpus_;
  std::optional<SynthCorpus> synth_;
  std::vector<SplitSpec> splits_;
  std::uint64_t fingerprint_ = 0;
  mutable std::vector<ImageId> all_ids_;
  std::map<std::string, CachedTable> neighbor_cache_;
  std::map<std::size_t, VisualOnlyRun> visual_cache_;
  std::map<std::string, ModelRun> run_cache_;

  std::uint64_t pool_hash(std::size_t split) const {
    std::uint64_t h = 0;
    for (Phase p : {Phase::kTrain, Phase::kVal, Phase::kTest}) {
      const auto ids = pool(split, p);
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(ids.data()), ids.size() * sizeof(ImageId)), mix64(h));
    }
    return h;
  }
};

// ---------------------------------------------------------------------------
// Annotation experiment: every baseline plus the neighbor model, per split.

struct AnnotationBundle {
  std::vector<ReportRow> rows;
  std::vector<double> voting_alpha;   // per split
  std::vector<ApDelta> ap_deltas;     // our model vs visual-only, split 0
  std::size_t degenerate_test = 0;    // split 0
  std::string config_hash;

  const ReportRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.method == name) return r;
    throw RuntimeError("no report row '" + name + "'");
  }
};

inline bool wants(const ExperimentConfig& c, const std::string& name) {
  return std::find(c.baselines.begin(), c.baselines.end(), name) != c.baselines.end();
}

inline AnnotationBundle run_annotation_experiment(ExperimentContext& ctx) {
  const auto& cfg = ctx.config();
  const Corpus& corpus = ctx.corpus();
  AnnotationBundle bundle;
  bundle.config_hash = config_hash(cfg);
  std::map<std::string, ReportRow> rows;
  const auto add = [&rows](const std::string& name, EvalReport r) {
    rows[name].method = name;
    rows[name].splits.push_back(std::move(r));
  };

  for (std::size_t split = 0; split < ctx.splits().size(); ++split) {
    const auto train_ids = ctx.pool(split, Phase::kTrain);
    const auto val_ids = ctx.pool(split, Phase::kVal);
    const auto test_ids = ctx.pool(split, Phase::kTest);
    const LabelSets test_truth = ground_truth(corpus, test_ids);
    const auto tag_vocab = ctx.default_vocab(split, NeighborSource::metadata(MetadataKind::kTags));

    if (wants(cfg, "upper_bound")) {
      const auto feats = label_indicator_features(corpus);
      const auto m = train_logistic_ova(corpus, corpus.num_labels(), feats, train_ids, val_ids,
                                        cfg.upper_bound_train.value_or(cfg.train))
                         .best;
      add("upper_bound",
          evaluate_report(linear_score_matrix(m, test_ids, feats, cfg.train.threads), test_truth, cfg.top_n));
    }
    if (wants(cfg, "tag_only")) {
      const TagVectorizer tags(tag_vocab);
      const auto feats = tag_indicator_features(corpus, tags, MetadataKind::kTags);
      const auto m = train_logistic_ova(corpus, tags.width(), feats, train_ids, val_ids, cfg.train).best;
      add("tag_only",
          evaluate_report(linear_score_matrix(m, test_ids, feats, cfg.train.threads), test_truth, cfg.top_n));
    }
    if (wants(cfg, "visual_only") || wants(cfg, "neighborhood_voting")) {
      const auto& vis = ctx.visual_only(split);
      if (wants(cfg, "visual_only")) add("visual_only", vis.report);
      if (wants(cfg, "neighborhood_voting")) {
        const auto vocab = ctx.default_vocab(split, cfg.test_source);
        const std::size_t depth = cfg.neighborhood.max_rank;
        const auto& val_nb = ctx.neighbors(split, Phase::kVal, cfg.test_source, vocab, depth);
        const auto& test_nb = ctx.neighbors(split, Phase::kTest, cfg.test_source, vocab, depth);
        const auto sel = select_voting_alpha(vis.val_scores, val_nb, ground_truth(corpus, val_ids), depth);
        bundle.voting_alpha.push_back(sel.alpha);
        add("neighborhood_voting",
            evaluate_report(neighborhood_voting(vis.test_scores, test_nb, sel.alpha, depth), test_truth, cfg.top_n));
      }
    }
    if (wants(cfg, "knn_vote")) {
      const std::size_t k = std::min(cfg.knn_k, train_ids.size());
      add("knn_vote", evaluate_report(knn_vote(corpus, train_ids, test_ids, k, cfg.train.threads), test_truth,
                                      cfg.top_n));
    }

    auto spec = ctx.standard_spec(split);
    spec.use_tag_vector = false;
    const auto ours = ctx.run_neighbor_model(split, spec);
    add("our_model", ours.report);
    if (split == 0) {
      bundle.degenerate_test = ours.degenerate_test;
      if (wants(cfg, "visual_only")) bundle.ap_deltas = ap_compare(ours.report, ctx.visual_only(split).report);
    }
    if (cfg.use_tag_vector) {
      spec.use_tag_vector = true;
      add("our_model_tag_vector", ctx.run_neighbor_model(split, spec).report);
    }
  }
  for (const char* name : {"upper_bound", "tag_only", "visual_only", "knn_vote", "neighborhood_voting", "our_model",
                           "our_model_tag_vector"})
    if (rows.count(name)) bundle.rows.push_back(rows[name]);
  return bundle;
}

inline void write_annotation_outputs(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                                     const AnnotationBundle& b) {
  nlohmann::json j;
  j["config"] = to_json(cfg);
  j["config_hash"] = b.config_hash;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : b.rows) j["rows"].push_back(to_json(r));
  j["voting_alpha"] = b.voting_alpha;
  j["degenerate_test_images"] = b.degenerate_test;
  io::open_out(dir / "annotation_report.json") << j.dump(2) << '\n';
  io::open_out(dir / "annotation_table.csv") << format_csv(b.rows);
  io::open_out(dir / "annotation_table.md") << format_table(b.rows);
  auto out = io::open_out(dir / "ap_compare.csv");
  out << "label,positives,ap_our_model,ap_visual_only,delta\n";
  for (const auto& d : b.ap_deltas)
    out << d.label << ',' << d.positives << ',' << d.ap_a << ',' << d.ap_b << ',' << d.delta << '\n';
}

// ---------------------------------------------------------------------------
// Neighbor-source comparison, sweeps and generalization experiments.

struct SourceResult {
  std::string name;
  std::vector<EvalReport> splits;
};

/// One model per neighbor source with the source used in both phases, plus
/// the visual-only reference row first.
inline std::vector<SourceResult> run_metadata_comparison(ExperimentContext& ctx, bool include_visual_neighbors) {
  std::vector<SourceResult> out;
  std::vector<NeighborSource> sources{NeighborSource::metadata(MetadataKind::kTags),
                                      NeighborSource::metadata(MetadataKind::kGroups),
                                      NeighborSource::metadata(MetadataKind::kSets)};
  if (include_visual_neighbors) sources.push_back(NeighborSource::features());
  SourceResult vis{"visual_only", {}};
  for (std::size_t split = 0; split < ctx.splits().size(); ++split) vis.splits.push_back(ctx.visual_only(split).report);
  out.push_back(vis);
  for (const auto& src : sources) {
    if (!src.visual && ctx.corpus().vocab_size(src.kind) == 0) {
      std::cerr << "warning: corpus has no " << kind_name(src.kind) << " metadata; skipping\n";
      continue;
    }
    SourceResult r{src.name(), {}};
    for (std::size_t split = 0; split < ctx.splits().size(); ++split) {
      auto spec = ctx.standard_spec(split);
      spec.train_source = spec.test_source = src;
      spec.train_vocab = spec.test_vocab = ctx.default_vocab(split, src);
      spec.use_tag_vector = false;
      r.splits.push_back(ctx.run_neighbor_model(split, spec).report);
    }
    out.push_back(std::move(r));
  }
  return out;
}

struct SweepPoint {
  std::string factor;  // "m", "M" or "tau"
  std::size_t m = 0, max_rank = 0, tau = 0;
  std::optional<double> map_l, map_i;  // missing when infeasible
};

struct SweepGrid {
  std::vector<std::size_t> m{1, 2, 3, 4, 5, 6};
  std::vector<std::size_t> max_rank{3, 6, 12, 24, 48};
  std::vector<std::size_t> tau{500, 1000, 2000, 5000};
};

/// One-factor-at-a-time sweep around the configured (m, M, tau), split 0.
inline std::vector<SweepPoint> run_sweep(ExperimentContext& ctx, const SweepGrid& grid) {
  const auto& cfg = ctx.config();
  std::vector<SweepPoint> points;
  const auto run = [&](const std::string& factor, std::size_t m, std::size_t big_m, std::size_t tau) {
    SweepPoint p{factor, m, big_m, tau, std::nullopt, std::nullopt};
    if (m >= 1 && m <= big_m && tau >= 1) {
      auto spec = ctx.standard_spec(0);
      spec.use_tag_vector = false;
      spec.neighborhood.m = m;
      spec.neighborhood.max_rank = big_m;
      const auto vocab = select_tag_vocabulary(ctx.corpus(), ctx.splits()[0].train, MetadataKind::kTags, tau);
      if (!spec.train_source.visual && spec.train_source.kind == MetadataKind::kTags) spec.train_vocab = vocab;
      if (!spec.test_source.visual && spec.test_source.kind == MetadataKind::kTags) spec.test_vocab = vocab;
      const auto r = ctx.run_neighbor_model(0, spec).report;
      p.map_l = r.map_l;
      p.map_i = r.map_i;
    }
    points.push_back(p);
  };
  for (std::size_t m : grid.m) run("m", m, cfg.neighborhood.max_rank, cfg.tau);
  for (std::size_t big_m : grid.max_rank) run("M", cfg.neighborhood.m, big_m, cfg.tau);
  for (std::size_t tau : grid.tau) run("tau", cfg.neighborhood.m, cfg.neighborhood.max_rank, tau);
  return points;
}

/// Train/test tag vocabularies sharing `overlap` of the standard vocabulary.
/// The standard vocabulary is shuffled and halved into A and B; training uses
/// A plus the first overlap*|B| terms of B, testing uses B plus the first
/// overlap*|A| of A. Overlap 1 gives both phases the standard vocabulary.
inline std::pair<std::vector<TermId>, std::vector<TermId>> overlap_vocabularies(std::vector<TermId> standard,
                                                                                double overlap, std::uint64_t seed) {
  if (standard.size() < 2) throw ValidationError("vocab overlap: need at least 2 tag terms");
  if (overlap < 0 || overlap > 1) throw ValidationError("vocab overlap: overlap must be in [0,1]");
  std::mt19937_64 rng(seed);
  for (std::size_t i = standard.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(standard[i - 1], standard[pick(rng)]);
  }
  const std::size_t half = standard.size() / 2;
  std::vector<TermId> a(standard.begin(), standard.begin() + static_cast<std::ptrdiff_t>(half));
  std::vector<TermId> b(standard.begin() + static_cast<std::ptrdiff_t>(half), standard.end());
  const auto share_a = static_cast<std::size_t>(std::llround(overlap * static_cast<double>(a.size())));
  const auto share_b = static_cast<std::size_t>(std::llround(overlap * static_cast<double>(b.size())));
  std::vector<TermId> train = a, test = b;
  train.insert(train.end(), b.begin(), b.begin() + static_cast<std::ptrdiff_t>(share_b));
  test.insert(test.end(), a.begin(), a.begin() + static_cast<std::ptrdiff_t>(share_a));
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

struct OverlapPoint {
  double overlap = 0;
  std::size_t train_terms = 0, test_terms = 0, shared_terms = 0;
  std::vector<EvalReport> splits;
};

inline std::vector<OverlapPoint> run_vocab_overlap(ExperimentContext& ctx, const std::vector<double>& overlaps) {
  std::vector<OverlapPoint> out;
  const auto tags = NeighborSource::metadata(MetadataKind::kTags);
  for (double o : overlaps) {
    OverlapPoint p;
    p.overlap = o;
    for (std::size_t split = 0; split < ctx.splits().size(); ++split) {
      auto [train_vocab, test_vocab] =
          overlap_vocabularies(ctx.default_vocab(split, tags), o, derive_seed(ctx.config().split_seed, split, 0x0ee1u));
      std::vector<TermId> shared;
      std::set_intersection(train_vocab.begin(), train_vocab.end(), test_vocab.begin(), test_vocab.end(),
                            std::back_inserter(shared));
      p.train_terms = train_vocab.size();
      p.test_terms = test_vocab.size();
      p.shared_terms = shared.size();
      auto spec = ctx.standard_spec(split);
      spec.train_source = spec.test_source = tags;
      spec.use_tag_vector = false;
      if (o >= 1.0) {
        spec.train_vocab = spec.test_vocab = ctx.default_vocab(split, tags);
      } else {
        spec.train_vocab = std::move(train_vocab);
        spec.test_vocab = std::move(test_vocab);
      }
      p.splits.push_back(ctx.run_neighbor_model(split, spec).report);
    }
    out.push_back(std::move(p));
  }
  return out;
}

struct CrossMetadataTable {
  std::array<std::array<std::vector<double>, 3>, 3> map_l;  // [train kind][test kind] per split
  std::vector<double> visual_only;

  MeanStd cell(MetadataKind train, MetadataKind test) const {
    return mean_std(map_l[static_cast<std::size_t>(train)][static_cast<std::size_t>(test)]);
  }
};

inline constexpr MetadataKind kTableKinds[] = {MetadataKind::kTags, MetadataKind::kSets, MetadataKind::kGroups};

inline CrossMetadataTable run_cross_metadata(ExperimentContext& ctx) {
  CrossMetadataTable t;
  for (std::size_t split = 0; split < ctx.splits().size(); ++split) {
    t.visual_only.push_back(ctx.visual_only(split).report.map_l);
    for (MetadataKind tr : kTableKinds)
      for (MetadataKind te : kTableKinds) {
        auto spec = ctx.standard_spec(split);
        spec.train_source = NeighborSource::metadata(tr);
        spec.test_source = NeighborSource::metadata(te);
        spec.train_vocab = ctx.default_vocab(split, spec.train_source);
        spec.test_vocab = ctx.default_vocab(split, spec.test_source);
        spec.use_tag_vector = false;
        t.map_l[static_cast<std::size_t>(tr)][static_cast<std::size_t>(te)].push_back(
            ctx.run_neighbor_model(split, spec).report.map_l);
      }
  }
  return t;
}

inline std::string format_cross_csv(const CrossMetadataTable& t) {
  std::ostringstream out;
  out << "train\\test";
  for (MetadataKind te : kTableKinds) out << ',' << kind_name(te);
  out << '\n';
  for (MetadataKind tr : kTableKinds) {
    out << kind_name(tr);
    for (MetadataKind te : kTableKinds) out << ',' << format_mean_std(t.cell(tr, te));
    out << '\n';
  }
  out << "visual_only";
  const auto v = format_mean_std(mean_std(t.visual_only));
  for (int i = 0; i < 3; ++i) out << ',' << v;
  out << '\n';
  return out.str();
}

/// Per-kind label agreement curves over the whole corpus (all images form the
/// pool) with the standard vocabulary of split 0.
inline std::vector<std::pair<MetadataKind, CorrelationCurves>> run_correlation_analysis(ExperimentContext& ctx,
                                                                                        std::size_t k_max) {
  std::vector<std::pair<MetadataKind, CorrelationCurves>> out;
  for (MetadataKind kind : kTableKinds) {
    if (ctx.corpus().vocab_size(kind) == 0) continue;
    const auto src = NeighborSource::metadata(kind);
    const auto& table = ctx.neighbors(0, Phase::kAll, src, ctx.default_vocab(0, src), k_max);
    out.emplace_back(kind, neighbor_label_correlation(ctx.corpus(), table, k_max));
  }
  return out;
}

inline std::string format_correlation_csv(const Corpus& corpus, MetadataKind kind, const CorrelationCurves& c) {
  std::ostringstream out;
  out.precision(10);
  out << "kind,label,name,k,p_shared,base_rate,trials\n";
  for (std::size_t l = 0; l < c.curve.size(); ++l)
    for (std::size_t k = 0; k < c.k_max; ++k) {
      out << kind_name(kind) << ',' << l << ',' << corpus.label_names[l] << ',' << k + 1 << ',';
      if (c.curve[l][k]) out << *c.curve[l][k];
      out << ',' << c.base_rate[l] << ',' << c.trials[l][k] << '\n';
    }
  return out.str();
}

}  // namespace nbann
