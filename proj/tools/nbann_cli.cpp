// Command-line front end: corpus tooling, single-stage commands and the
// experiment suites. Every experiment flag has a config-file counterpart
// (see README); flags given on the command line override the config.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nbann/nbann.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nbann;

namespace {

/// Flags shared by every experiment-style subcommand. Unset optionals leave
/// the config value alone.
struct ExperimentFlags {
  std::string config;
  std::string corpus;
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> synth_images;
  std::vector<double> fractions;
  std::optional<std::size_t> n_splits;
  std::optional<std::uint64_t> split_seed;
  std::string split_file;
  std::string train_source, test_source;
  std::optional<std::size_t> tau, m, max_rank, samples_train, samples_test;
  std::optional<std::size_t> hidden, batch, epochs, threads, knn_k, top_n;
  std::optional<double> lr, l2, dropout, upper_bound_lr;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> baselines;
  bool tag_vector = false;
  bool no_filter = false;
  bool svg = false;
  std::string out;
  std::string cache;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON experiment config")->check(CLI::ExistingFile);
    app->add_option("--corpus", corpus, "corpus directory (default: generate the synthetic corpus)");
    app->add_option("--synth-seed", synth_seed, "synthetic corpus seed");
    app->add_option("--synth-images", synth_images, "synthetic corpus size");
    app->add_option("--fractions", fractions, "train val test fractions")->expected(3);
    app->add_option("--splits", n_splits, "number of random splits");
    app->add_option("--split-seed", split_seed, "split seed");
    app->add_option("--split-file", split_file, "use this split instead of generating one")->check(CLI::ExistingFile);
    app->add_option("--train-source", train_source, "neighbors for training: tags|sets|groups|visual");
    app->add_option("--test-source", test_source, "neighbors for testing: tags|sets|groups|visual");
    app->add_option("--tau", tau, "tag vocabulary size");
    app->add_option("-m,--m", m, "neighborhood size");
    app->add_option("-M,--max-rank", max_rank, "max neighbor rank");
    app->add_option("--samples-train", samples_train, "sampled neighborhoods per training example");
    app->add_option("--samples-test", samples_test, "sampled neighborhoods per test image");
    app->add_option("--hidden", hidden, "hidden units");
    app->add_option("--batch", batch, "minibatch size");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--l2", l2, "L2 weight");
    app->add_option("--dropout", dropout, "dropout rate");
    app->add_option("--upper-bound-lr", upper_bound_lr, "learning rate for the upper-bound baseline");
    app->add_option("--seed", seed, "training and sampling seed");
    app->add_option("--threads", threads, "worker threads");
    app->add_option("--baselines", baselines, "baselines to run");
    app->add_option("--knn-k", knn_k, "k for the kNN vote baseline");
    app->add_option("--top-n", top_n, "labels assigned per image");
    app->add_flag("--tag-vector", tag_vector, "also train the tag-vector extension");
    app->add_flag("--no-filter", no_filter, "keep images without labels or metadata");
    app->add_flag("--svg", svg, "also write SVG plots");
    app->add_option("-o,--out", out, "output directory");
    app->add_option("--cache", cache, "cache directory for neighbor lists and checkpoints");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c;
    if (!config.empty()) {
      json j;
      try {
        j = json::parse(io::read_file(config));
      } catch (const json::exception& e) {
        throw ValidationError(config + ": " + e.what());
      }
      c = experiment_config_from_json(j);
    }
    if (!corpus.empty()) c.corpus_dir = corpus;
    if (synth_seed) c.synth.seed = *synth_seed;
    if (synth_images) c.synth.images = *synth_images;
    if (fractions.size() == 3) c.fractions = {fractions[0], fractions[1], fractions[2]};
    if (n_splits) c.n_splits = *n_splits;
    if (split_seed) c.split_seed = *split_seed;
    if (!train_source.empty()) c.train_source = NeighborSource::parse(train_source);
    if (!test_source.empty()) c.test_source = NeighborSource::parse(test_source);
    if (tau) c.tau = *tau;
    if (m) c.neighborhood.m = *m;
    if (max_rank) c.neighborhood.max_rank = *max_rank;
    if (samples_train) c.neighborhood.samples_train = *samples_train;
    if (samples_test) c.neighborhood.samples_test = *samples_test;
    if (hidden) c.train.hidden = *hidden;
    if (batch) c.train.batch = *batch;
    if (epochs) c.train.epochs = *epochs;
    if (lr) c.train.lr = *lr;
    if (l2) c.train.l2 = *l2;
    if (dropout) c.train.dropout = *dropout;
    if (seed) {
      c.train.seed = *seed;
      c.neighborhood.seed = *seed;
    }
    if (threads) c.train.threads = *threads;
    if (c.upper_bound_train) c.upper_bound_train->threads = c.train.threads;
    if (upper_bound_lr) {
      c.upper_bound_train = c.upper_bound_train.value_or(c.train);
      c.upper_bound_train->lr = *upper_bound_lr;
    }
    if (!baselines.empty()) c.baselines = baselines;
    if (knn_k) c.knn_k = *knn_k;
    if (top_n) c.top_n = *top_n;
    if (tag_vector) c.use_tag_vector = true;
    if (no_filter) c.filter = false;
    if (svg) c.svg = true;
    if (!out.empty()) c.output_dir = out;
    if (!cache.empty()) c.cache_dir = cache;
    if (c.output_dir.empty()) c.output_dir = "out";
    if (!c.corpus_dir.empty() && !fs::is_directory(c.corpus_dir))
      throw ValidationError("corpus directory not found: " + c.corpus_dir.string());
    c.train.validate();
    c.neighborhood.validate();
    return c;
  }

  ExperimentContext context() const {
    auto cfg = resolve();
    if (split_file.empty()) return ExperimentContext(cfg);
    ExperimentContext base(cfg);
    return ExperimentContext(cfg, base.corpus(), {load_split(split_file)});
  }
};

void write_config(const ExperimentConfig& cfg) {
  io::open_out(cfg.output_dir / "config.json") << json{{"config", to_json(cfg)}, {"config_hash", config_hash(cfg)}}.dump(2)
                                               << '\n';
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

std::string fmt_opt(const std::optional<double>& v) { return v ? std::to_string(*v) : ""; }

// --------------------------------------------------------------------------

int cmd_gen_synth(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed,
                  std::optional<std::size_t> images) {
  SynthConfig cfg;
  if (!config.empty()) {
    try {
      const auto j = json::parse(io::read_file(config));
      cfg = synth_config_from_json(j.contains("synth") ? j["synth"] : j);
    } catch (const json::exception& e) {
      throw ValidationError(config + ": " + e.what());
    }
  }
  if (seed) cfg.seed = *seed;
  if (images) cfg.images = *images;
  const auto s = synth_generate(cfg);
  save_synth(out, cfg, s);
  print_json({{"out", out}, {"stats", to_json(corpus_stats(s.corpus))}});
  return 0;
}

int cmd_validate(const std::string& dir) {
  const Corpus c = load_corpus_dir(dir);
  print_json({{"valid", true}, {"stats", to_json(corpus_stats(c))}});
  return 0;
}

int cmd_split(const ExperimentFlags& f) {
  auto cfg = f.resolve();
  ExperimentContext ctx(cfg);
  for (std::size_t i = 0; i < ctx.splits().size(); ++i)
    save_split(cfg.output_dir / ("split-" + std::to_string(i) + ".json"), ctx.splits()[i]);
  print_json({{"splits", ctx.splits().size()}, {"out", cfg.output_dir.string()}});
  return 0;
}

Phase parse_phase(const std::string& s) {
  if (s == "train") return Phase::kTrain;
  if (s == "val") return Phase::kVal;
  if (s == "test") return Phase::kTest;
  if (s == "all") return Phase::kAll;
  throw ValidationError("unknown phase '" + s + "'");
}

int cmd_build_neighbors(const ExperimentFlags& f, const std::string& phase, const std::string& source,
                        const std::string& file) {
  auto ctx = f.context();
  const auto src = NeighborSource::parse(source);
  const auto& table = ctx.neighbors(0, parse_phase(phase), src, ctx.default_vocab(0, src),
                                    ctx.config().neighborhood.max_rank);
  const fs::path out = file.empty() ? ctx.config().output_dir / ("neighbors-" + phase + "-" + src.name() + ".jsonl")
                                    : fs::path(file);
  save_neighbors(out, table);
  print_json({{"lists", table.size()}, {"out", out.string()}});
  return 0;
}

int cmd_train(const ExperimentFlags& f) {
  auto ctx = f.context();
  const auto& cfg = ctx.config();
  write_config(cfg);
  auto spec = ctx.standard_spec(0);
  const std::size_t depth = spec.neighborhood.max_rank;
  const auto& train_nb = ctx.neighbors(0, Phase::kTrain, spec.train_source, spec.train_vocab, depth);
  const auto& val_nb = ctx.neighbors(0, Phase::kVal, spec.train_source, spec.train_vocab, depth);
  std::optional<TagVectorizer> tags;
  if (spec.use_tag_vector) tags.emplace(ctx.default_vocab(0, NeighborSource::metadata(MetadataKind::kTags)));
  NeighborTrainInputs in;
  in.corpus = &ctx.corpus();
  in.train_ids = ctx.pool(0, Phase::kTrain);
  in.val_ids = ctx.pool(0, Phase::kVal);
  in.train_neighbors = &train_nb;
  in.val_neighbors = &val_nb;
  in.tags = tags ? &*tags : nullptr;
  const auto result = train(in, spec.neighborhood, spec.train);
  save_checkpoint(cfg.output_dir / "model.nlpm", result.best,
                  {{"config", to_json(cfg)},
                   {"config_hash", config_hash(cfg)},
                   {"best_epoch", result.best_epoch},
                   {"history", history_to_json(result.history)}});
  save_history(cfg.output_dir / "history.csv", result.history);
  print_json({{"best_epoch", result.best_epoch},
              {"best_val_mAP_L", result.best_val_map_l},
              {"checkpoint", (cfg.output_dir / "model.nlpm").string()}});
  return 0;
}

void write_pr_curves(const fs::path& path, const ScoreMatrix& s, const LabelSets& truth) {
  auto out = io::open_out(path);
  out << "label,rank,recall,precision\n";
  std::vector<std::int64_t> keys(s.ids.begin(), s.ids.end());
  for (std::size_t c = 0; c < s.num_labels; ++c) {
    std::vector<double> col(s.rows());
    std::vector<char> rel(s.rows(), 0);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      col[r] = s.at(r, c);
      rel[r] = std::binary_search(truth[r].begin(), truth[r].end(), static_cast<LabelId>(c)) ? 1 : 0;
    }
    if (std::count(rel.begin(), rel.end(), 1) == 0) continue;
    const auto curve = pr_curve(col, keys, rel);
    for (std::size_t k = 0; k < curve.size(); ++k)
      out << c << ',' << k + 1 << ',' << curve[k].recall << ',' << curve[k].precision << '\n';
  }
}

int cmd_evaluate(const ExperimentFlags& f, const std::string& checkpoint) {
  auto ctx = f.context();
  const auto& cfg = ctx.config();
  const ModelParams p = load_checkpoint(checkpoint);
  const Corpus& corpus = ctx.corpus();
  if (p.dim() != corpus.dim || p.num_labels() != corpus.num_labels())
    throw ValidationError("checkpoint shape does not match the corpus");
  auto spec = ctx.standard_spec(0);
  const auto& test_nb = ctx.neighbors(0, Phase::kTest, spec.test_source, spec.test_vocab, spec.neighborhood.max_rank);
  std::optional<TagVectorizer> tags;
  if (p.tag_width() > 0) {
    tags.emplace(ctx.default_vocab(0, NeighborSource::metadata(MetadataKind::kTags)));
    if (tags->width() != p.tag_width()) throw ValidationError("checkpoint tag width does not match the tag vocabulary");
  }
  const auto ids = ctx.pool(0, Phase::kTest);
  const auto scores =
      evaluate_scores(p, corpus, ids, test_nb, spec.neighborhood, tags ? &*tags : nullptr, MetadataKind::kTags,
                      cfg.train.threads);
  const auto truth = ground_truth(corpus, ids);
  const auto report = evaluate_report(scores, truth, cfg.top_n);
  save_scores(cfg.output_dir / "scores.nlsm", scores);
  io::open_out(cfg.output_dir / "report.json") << json{{"config_hash", config_hash(cfg)}, {"report", to_json(report)}}.dump(2)
                                               << '\n';
  write_pr_curves(cfg.output_dir / "pr_curves.csv", scores, truth);
  print_json({{"mAP_L", report.map_l}, {"mAP_I", report.map_i}, {"Prec_I", report.prec_i}, {"Rec_I", report.rec_i},
              {"degenerate_test_images", count_degenerate(ids, test_nb, spec.neighborhood)}});
  return 0;
}

int cmd_baselines(const ExperimentFlags& f) {
  auto ctx = f.context();
  const auto& cfg = ctx.config();
  write_config(cfg);
  const Corpus& corpus = ctx.corpus();
  const auto train_ids = ctx.pool(0, Phase::kTrain);
  const auto val_ids = ctx.pool(0, Phase::kVal);
  const auto test_ids = ctx.pool(0, Phase::kTest);
  const auto truth = ground_truth(corpus, test_ids);
  json summary = json::object();
  const auto emit = [&](const std::string& name, const ScoreMatrix& s) {
    save_scores(cfg.output_dir / (name + ".nlsm"), s);
    const auto r = evaluate_report(s, truth, cfg.top_n);
    summary[name] = {{"mAP_L", r.map_l}, {"mAP_I", r.map_i}, {"Prec_I", r.prec_i}, {"Rec_I", r.rec_i}};
    io::open_out(cfg.output_dir / (name + ".json")) << to_json(r).dump(2) << '\n';
  };
  if (wants(cfg, "upper_bound")) {
    const auto feats = label_indicator_features(corpus);
    const auto m = train_logistic_ova(corpus, corpus.num_labels(), feats, train_ids, val_ids,
                                      cfg.upper_bound_train.value_or(cfg.train))
                       .best;
    emit("upper_bound", linear_score_matrix(m, test_ids, feats, cfg.train.threads));
  }
  if (wants(cfg, "tag_only")) {
    const TagVectorizer tags(ctx.default_vocab(0, NeighborSource::metadata(MetadataKind::kTags)));
    const auto feats = tag_indicator_features(corpus, tags, MetadataKind::kTags);
    const auto m = train_logistic_ova(corpus, tags.width(), feats, train_ids, val_ids, cfg.train).best;
    emit("tag_only", linear_score_matrix(m, test_ids, feats, cfg.train.threads));
  }
  if (wants(cfg, "visual_only") || wants(cfg, "neighborhood_voting")) {
    const auto& vis = ctx.visual_only(0);
    if (wants(cfg, "visual_only")) emit("visual_only", vis.test_scores);
    if (wants(cfg, "neighborhood_voting")) {
      const auto vocab = ctx.default_vocab(0, cfg.test_source);
      const std::size_t depth = cfg.neighborhood.max_rank;
      const auto& val_nb = ctx.neighbors(0, Phase::kVal, cfg.test_source, vocab, depth);
      const auto& test_nb = ctx.neighbors(0, Phase::kTest, cfg.test_source, vocab, depth);
      const auto sel = select_voting_alpha(vis.val_scores, val_nb, ground_truth(corpus, val_ids), depth);
      emit("neighborhood_voting", neighborhood_voting(vis.test_scores, test_nb, sel.alpha, depth));
      summary["neighborhood_voting"]["alpha"] = sel.alpha;
    }
  }
  if (wants(cfg, "knn_vote"))
    emit("knn_vote", knn_vote(corpus, train_ids, test_ids, std::min(cfg.knn_k, train_ids.size()), cfg.train.threads));
  print_json(summary);
  return 0;
}

std::vector<std::size_t> parse_list(const std::vector<std::size_t>& v, std::vector<std::size_t> fallback) {
  return v.empty() ? fallback : v;
}

int cmd_sweep(const ExperimentFlags& f, const std::vector<std::size_t>& gm, const std::vector<std::size_t>& gM,
              const std::vector<std::size_t>& gtau) {
  auto ctx = f.context();
  const auto& cfg = ctx.config();
  write_config(cfg);
  SweepGrid grid;
  grid.m = parse_list(gm, grid.m);
  grid.max_rank = parse_list(gM, grid.max_rank);
  grid.tau = parse_list(gtau, grid.tau);
  const auto points = run_sweep(ctx, grid);
  auto out = io::open_out(cfg.output_dir / "sweep.csv");
  out << "factor,m,M,tau,mAP_L,mAP_I\n";
  std::map<std::string, std::pair<double, double>> range;
  std::vector<PlotSeries> series;
  for (const auto& p : points) {
    out << p.factor << ',' << p.m << ',' << p.max_rank << ',' << p.tau << ',' << fmt_opt(p.map_l) << ','
        << fmt_opt(p.map_i) << '\n';
    if (!p.map_l) continue;
    auto [it, fresh] = range.try_emplace(p.factor, *p.map_l, *p.map_l);
    it->second.first = std::min(it->second.first, *p.map_l);
    it->second.second = std::max(it->second.second, *p.map_l);
  }
  json variation = json::object();
  for (const auto& [factor, r] : range) variation[factor] = r.second - r.first;
  if (cfg.svg)
    for (const char* factor : {"m", "M", "tau"}) {
      PlotSeries s{std::string("mAP_L vs ") + factor, {}, false};
      for (const auto& p : points)
        if (p.factor == factor && p.map_l)
          s.points.emplace_back(static_cast<double>(factor == std::string("m")   ? p.m
                                                    : factor == std::string("M") ? p.max_rank
                                                                                 : p.tau),
                                *p.map_l);
      write_svg_plot(cfg.output_dir / (std::string("sweep_") + factor + ".svg"), std::string("Sweep over ") + factor,
                     factor, "mAP_L", {s});
    }
  print_json({{"points", points.size()}, {"mAP_L_range", variation}});
  return 0;
}

int cmd_overlap(const ExperimentFlags& f, const std::vector<double>& pct) {
  auto ctx = f.context();
  const auto& cfg = ctx.config();
  write_config(cfg);
  std::vector<double> overlaps;
  for (double p : pct) overlaps.push_back(p / 100.0);
  const auto points = run_vocab_overlap(ctx, overlaps);
  std::vector<double> vis;
  for (std::size_t s = 0; s < ctx.splits().size(); ++s) vis.push_back(ctx.visual_only(s).report.map_l);
  const auto vis_ms = mean_std(vis);
  auto out = io::open_out(cfg.output_dir / "overlap.csv");
  out << "overlap_pct,train_terms,test_terms,shared_terms,mAP_L_mean,mAP_L_std,mAP_I_mean,mAP_I_std,visual_only_mAP_L\n";
  bool monotone = true;
  std::optional<double> prev;
  PlotSeries curve{"our model", {}, false}, ref{"visual-only", {}, true};
  for (const auto& p : points) {
    std::vector<double> ml, mi;
    for (const auto& r : p.splits) {
      ml.push_back(r.map_l);
      mi.push_back(r.map_i);
    }
    const auto a = mean_std(ml), b = mean_std(mi);
    out << p.overlap * 100 << ',' << p.train_terms << ',' << p.test_terms << ',' << p.shared_terms << ',' << a.mean
        << ',' << (a.std ? std::to_string(*a.std) : "") << ',' << b.mean << ','
        << (b.std ? std::to_string(*b.std) : "") << ',' << vis_ms.mean << '\n';
    if (prev && a.mean < *prev) monotone = false;
    prev = a.mean;
    curve.points.emplace_back(p.overlap * 100, a.mean);
    ref.points.emplace_back(p.overlap * 100, vis_ms.mean);
  }
  if (cfg.svg) write_svg_plot(cfg.output_dir / "overlap.svg", "Vocabulary overlap", "overlap (%)", "mAP_L", {curve, ref});
  print_json({{"points", points.size()}, {"monotone_nondecreasing", monotone}, {"visual_only_mAP_L", vis_ms.mean}});
  return 0;
}

int cmd_cross_metadata(const ExperimentFlags& f) {
  auto ctx = f.context();
  const auto& cfg = ctx.config();
  write_config(cfg);
  const auto t = run_cross_metadata(ctx);
  io::open_out(cfg.output_dir / "cross_metadata.csv") << format_cross_csv(t);
  json cells = json::object();
  for (MetadataKind tr : kTableKinds)
    for (MetadataKind te : kTableKinds)
      cells[std::string(kind_name(tr))][std::string(kind_name(te))] = t.cell(tr, te).mean;
  print_json({{"mAP_L", cells}, {"visual_only", mean_std(t.visual_only).mean}});
  return 0;
}

int cmd_compare_metadata(const ExperimentFlags& f, bool visual_neighbors) {
  auto ctx = f.context();
  const auto& cfg = ctx.config();
  write_config(cfg);
  const auto rows = run_metadata_comparison(ctx, visual_neighbors);
  std::vector<ReportRow> table;
  for (const auto& r : rows) table.push_back({r.name, r.splits});
  io::open_out(cfg.output_dir / "metadata_comparison.csv") << format_csv(table);
  io::open_out(cfg.output_dir / "metadata_comparison.md") << format_table(table);
  json summary = json::object();
  for (const auto& r : table) summary[r.method] = r.aggregate()[0].mean;
  print_json({{"mAP_L", summary}});
  return 0;
}

int cmd_correlate(const ExperimentFlags& f, std::size_t k_max) {
  auto ctx = f.context();
  const auto& cfg = ctx.config();
  write_config(cfg);
  json summary = json::object();
  for (const auto& [kind, curves] : run_correlation_analysis(ctx, k_max)) {
    const std::string name(kind_name(kind));
    io::open_out(cfg.output_dir / ("correlation_" + name + ".csv")) << format_correlation_csv(ctx.corpus(), kind, curves);
    json mean = json::array();
    PlotSeries s{"P(shared label) at rank k", {}, false}, base{"base rate", {}, true};
    for (std::size_t k = 1; k <= curves.k_max; ++k) {
      const auto v = curves.mean_curve(k);
      mean.push_back(v ? json(*v) : json(nullptr));
      if (v) s.points.emplace_back(static_cast<double>(k), *v);
      base.points.emplace_back(static_cast<double>(k), curves.mean_base_rate());
    }
    summary[name] = {{"mean_curve", mean}, {"mean_base_rate", curves.mean_base_rate()}};
    if (cfg.svg)
      write_svg_plot(cfg.output_dir / ("correlation_" + name + ".svg"), name + " neighbors", "neighbor rank k",
                     "probability", {s, base});
  }
  print_json(summary);
  return 0;
}

int cmd_report(const ExperimentFlags& f, const std::vector<std::string>& from) {
  if (from.empty()) {
    auto ctx = f.context();
    const auto& cfg = ctx.config();
    write_config(cfg);
    const auto bundle = run_annotation_experiment(ctx);
    write_annotation_outputs(cfg.output_dir, cfg, bundle);
    std::cout << format_table(bundle.rows);
    return 0;
  }
  // Merge per-split reports written by earlier runs.
  std::vector<ReportRow> rows;
  std::vector<std::string> hashes;
  for (const auto& path : from) {
    json j;
    try {
      j = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
      throw ValidationError(path + ": " + e.what());
    }
    hashes.push_back(j.value("config_hash", ""));
    for (const auto& rj : j.at("rows")) {
      auto row = report_row_from_json(rj);
      auto it = std::find_if(rows.begin(), rows.end(), [&](const ReportRow& r) { return r.method == row.method; });
      if (it == rows.end())
        rows.push_back(std::move(row));
      else
        it->splits.insert(it->splits.end(), row.splits.begin(), row.splits.end());
    }
  }
  const fs::path dir = f.out.empty() ? fs::path("out") : fs::path(f.out);
  json merged{{"sources", from}, {"config_hashes", hashes}, {"rows", json::array()}};
  for (const auto& r : rows) merged["rows"].push_back(to_json(r));
  io::open_out(dir / "annotation_report.json") << merged.dump(2) << '\n';
  io::open_out(dir / "annotation_table.csv") << format_csv(rows);
  io::open_out(dir / "annotation_table.md") << format_table(rows);
  std::cout << format_table(rows);
  return 0;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neighborhood-augmented multilabel image annotation"};
  app.require_subcommand(1);

  std::string synth_config, synth_out;
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> synth_images;
  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic corpus");
  gen->add_option("--config", synth_config, "synth config JSON")->check(CLI::ExistingFile);
  gen->add_option("-o,--out", synth_out, "output directory")->required();
  gen->add_option("--seed", synth_seed, "generator seed");
  gen->add_option("--images", synth_images, "number of images");

  std::string validate_dir;
  auto* val = app.add_subcommand("validate", "check a corpus directory and print statistics");
  val->add_option("corpus", validate_dir, "corpus directory")->required();

  std::vector<std::unique_ptr<ExperimentFlags>> flags;
  const auto experiment = [&](const char* name, const char* help) {
    flags.push_back(std::make_unique<ExperimentFlags>());
    auto* sub = app.add_subcommand(name, help);
    flags.back()->attach(sub);
    return std::pair{sub, flags.back().get()};
  };

  auto [split, split_f] = experiment("split", "write random train/val/test splits");
  auto [nb, nb_f] = experiment("build-neighbors", "compute top-M neighbor lists for one pool");
  std::string nb_phase = "train", nb_source = "tags", nb_file;
  nb->add_option("--phase", nb_phase, "train|val|test|all");
  nb->add_option("--source", nb_source, "tags|sets|groups|visual");
  nb->add_option("--file", nb_file, "output JSONL file");
  auto [tr, tr_f] = experiment("train", "train the neighbor model on split 0");
  auto [ev, ev_f] = experiment("evaluate", "score the test pool with a checkpoint");
  std::string checkpoint;
  ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  auto [bl, bl_f] = experiment("baselines", "train and evaluate the baselines on split 0");
  auto [sw, sw_f] = experiment("sweep", "one-factor sweeps over m, M and tau");
  std::vector<std::size_t> grid_m, grid_M, grid_tau;
  sw->add_option("--grid-m", grid_m, "values of m");
  sw->add_option("--grid-M", grid_M, "values of M");
  sw->add_option("--grid-tau", grid_tau, "values of tau");
  auto [ov, ov_f] = experiment("overlap", "train/test tag vocabulary overlap experiment");
  std::vector<double> overlaps{0, 25, 50, 75, 100};
  ov->add_option("--overlaps", overlaps, "overlaps in percent");
  auto [cm, cm_f] = experiment("cross-metadata", "train with one metadata kind, test with another");
  auto [mc, mc_f] = experiment("compare-metadata", "one model per neighbor source");
  bool visual_neighbors = false;
  mc->add_flag("--visual-neighbors", visual_neighbors, "add a row with visual-feature neighbors");
  auto [co, co_f] = experiment("correlate", "label agreement of the k-th neighbor");
  std::size_t k_max = 20;
  co->add_option("--k-max", k_max, "deepest neighbor rank");
  auto [rp, rp_f] = experiment("report", "run the annotation protocol, or merge earlier reports");
  std::vector<std::string> from;
  rp->add_option("--from", from, "annotation_report.json files to merge")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 1);
  }

  try {
    if (*gen) return cmd_gen_synth(synth_config, synth_out, synth_seed, synth_images);
    if (*val) return cmd_validate(validate_dir);
    if (*split) return cmd_split(*split_f);
    if (*nb) return cmd_build_neighbors(*nb_f, nb_phase, nb_source, nb_file);
    if (*tr) return cmd_train(*tr_f);
    if (*ev) return cmd_evaluate(*ev_f, checkpoint);
    if (*bl) return cmd_baselines(*bl_f);
    if (*sw) return cmd_sweep(*sw_f, grid_m, grid_M, grid_tau);
    if (*ov) return cmd_overlap(*ov_f, overlaps);
    if (*cm) return cmd_cross_metadata(*cm_f);
    if (*mc) return cmd_compare_metadata(*mc_f, visual_neighbors);
    if (*co) return cmd_correlate(*co_f, k_max);
    if (*rp) return cmd_report(*rp_f, from);
  } catch (const ValidationError& e) {
    return fail("validation", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 2);
  }
  return fail("usage", "no subcommand", 1);
}
