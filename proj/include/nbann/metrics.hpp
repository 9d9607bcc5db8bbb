#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbann/common.hpp"
#include "nbann/corpus.hpp"
#include "nbann/io.hpp"

namespace nbann {

/// Dense N x L scores, row-major, one row per image id.
struct ScoreMatrix {
  std::vector<ImageId> ids;
  std::size_t num_labels = 0;
  std::vector<double> scores;

  ScoreMatrix() = default;
  ScoreMatrix(std::vector<ImageId> row_ids, std::size_t labels)
      : ids(std::move(row_ids)), num_labels(labels), scores(ids.size() * labels, 0.0) {}

  std::size_t rows() const { return ids.size(); }
  double& at(std::size_t r, std::size_t c) { return scores[r * num_labels + c]; }
  double at(std::size_t r, std::size_t c) const { return scores[r * num_labels + c]; }
  std::span<const double> row(std::size_t r) const { return {scores.data() + r * num_labels, num_labels}; }
  std::span<double> row(std::size_t r) { return {scores.data() + r * num_labels, num_labels}; }
  bool operator==(const ScoreMatrix&) const = default;
};

using LabelSets = std::vector<std::vector<LabelId>>;

inline LabelSets ground_truth(const Corpus& corpus, std::span<const ImageId> ids) {
  LabelSets gt;
  gt.reserve(ids.size());
  for (ImageId id : ids) gt.push_back(corpus.at(id).labels);
  return gt;
}

// Score matrix file: "NLSM", u32 version=1, u64 N, u32 L, N x i64 ids, N*L f64.
inline void save_scores(const std::filesystem::path& path, const ScoreMatrix& s) {
  auto out = io::open_out(path, true);
  io::write_magic(out, "NLSM");
  io::write_le<std::uint32_t>(out, 1);
  io::write_le<std::uint64_t>(out, s.rows());
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.num_labels));
  for (ImageId id : s.ids) io::write_le<std::int64_t>(out, id);
  for (double v : s.scores) io::write_le(out, v);
}

inline ScoreMatrix load_scores(const std::filesystem::path& path) {
  auto in = io::open_in(path, true);
  io::expect_magic(in, "NLSM", path.string());
  std::uint32_t version = 0, num_labels = 0;
  std::uint64_t n = 0;
  if (!io::read_le(in, version) || !io::read_le(in, n) || !io::read_le(in, num_labels) || version != 1)
    throw ValidationError(path.string() + ": bad header");
  std::vector<ImageId> ids(n);
  for (auto& id : ids)
    if (!io::read_le(in, id)) throw ValidationError(path.string() + ": truncated ids");
  ScoreMatrix s(std::move(ids), num_labels);
  for (auto& v : s.scores)
    if (!io::read_le(in, v)) throw ValidationError(path.string() + ": truncated scores");
  return s;
}

// ---------------------------------------------------------------------------
// Ranking helpers. Equal scores are ordered by ascending key (image or label id).

inline std::vector<std::size_t> rank_descending(std::span<const double> scores, std::span<const std::int64_t> keys) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : keys[a] < keys[b];
  });
  return order;
}

inline std::vector<std::size_t> rank_descending(std::span<const double> scores) {
  std::vector<std::int64_t> keys(scores.size());
  std::iota(keys.begin(), keys.end(), std::int64_t{0});
  return rank_descending(scores, keys);
}

/// The n highest-scoring labels of every row, ties by ascending label id.
inline LabelSets topn_assign(const ScoreMatrix& s, std::size_t n) {
  if (n < 1) throw ValidationError("topn_assign: n must be >= 1");
  if (n > s.num_labels)
    throw ValidationError("topn_assign: n=" + std::to_string(n) + " exceeds L=" + std::to_string(s.num_labels));
  LabelSets out(s.rows());
  for (std::size_t r = 0; r < s.rows(); ++r) {
    auto order = rank_descending(s.row(r));
    out[r].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  }
  return out;
}

struct PrecisionRecall {
  double prec_i = 0, rec_i = 0, prec_l = 0, rec_l = 0;  // percentages
  std::size_t labels_evaluated = 0;   // labels with at least one positive
  std::size_t never_predicted = 0;    // of those, labels never predicted (precision 0)
  std::vector<std::optional<double>> per_label_precision, per_label_recall;
};

/// Overall (per-image) and mean per-label precision/recall of fixed-size
/// predictions. Per-label means run over labels with a positive; a label that
/// is never predicted contributes precision 0.
inline PrecisionRecall precision_recall(const LabelSets& predictions, const LabelSets& truth, std::size_t num_labels) {
  if (predictions.size() != truth.size()) throw ValidationError("precision_recall: row count mismatch");
  std::size_t hits = 0, predicted = 0, relevant = 0;
  std::vector<std::size_t> tp(num_labels, 0), pred_c(num_labels, 0), pos_c(num_labels, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& gt = truth[i];
    predicted += predictions[i].size();
    relevant += gt.size();
    for (LabelId c : gt) ++pos_c.at(c);
    for (LabelId c : predictions[i]) {
      ++pred_c.at(c);
      if (std::find(gt.begin(), gt.end(), c) != gt.end()) {
        ++hits;
        ++tp[c];
      }
    }
  }
  PrecisionRecall pr;
  pr.prec_i = predicted ? 100.0 * static_cast<double>(hits) / static_cast<double>(predicted) : 0.0;
  pr.rec_i = relevant ? 100.0 * static_cast<double>(hits) / static_cast<double>(relevant) : 0.0;
  pr.per_label_precision.resize(num_labels);
  pr.per_label_recall.resize(num_labels);
  double sp = 0, sr = 0;
  for (std::size_t c = 0; c < num_labels; ++c) {
    if (pos_c[c] == 0) continue;
    const double p = pred_c[c] ? static_cast<double>(tp[c]) / static_cast<double>(pred_c[c]) : 0.0;
    const double r = static_cast<double>(tp[c]) / static_cast<double>(pos_c[c]);
    if (!pred_c[c]) ++pr.never_predicted;
    pr.per_label_precision[c] = p;
    pr.per_label_recall[c] = r;
    sp += p;
    sr += r;
    ++pr.labels_evaluated;
  }
  if (pr.labels_evaluated) {
    pr.prec_l = 100.0 * sp / static_cast<double>(pr.labels_evaluated);
    pr.rec_l = 100.0 * sr / static_cast<double>(pr.labels_evaluated);
  }
  return pr;
}

/// Non-interpolated AP of a ranked relevance list; nullopt with no relevant
/// items.
inline std::optional<double> average_precision(std::span<const char> ranked_relevance) {
  double sum = 0;
  std::size_t found = 0;
  for (std::size_t k = 0; k < ranked_relevance.size(); ++k) {
    if (!ranked_relevance[k]) continue;
    ++found;
    sum += static_cast<double>(found) / static_cast<double>(k + 1);
  }
  if (found == 0) return std::nullopt;
  return sum / static_cast<double>(found);
}

inline std::vector<char> ranked_relevance(std::span<const double> scores, std::span<const std::int64_t> keys,
                                          std::span<const char> relevant) {
  const auto order = rank_descending(scores, keys);
  std::vector<char> rel(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) rel[k] = relevant[order[k]];
  return rel;
}

struct MapResult {
  double map = 0;                               // percentage
  std::vector<std::optional<double>> per_item;  // AP per label (or image), fraction
  std::size_t evaluated = 0;
  std::size_t excluded = 0;                     // items without positives
};

inline MapResult finish_map(std::vector<std::optional<double>> aps) {
  MapResult r;
  double s = 0;
  for (const auto& ap : aps) {
    if (ap) {
      s += *ap;
      ++r.evaluated;
    } else {
      ++r.excluded;
    }
  }
  r.map = r.evaluated ? 100.0 * s / static_cast<double>(r.evaluated) : 0.0;
  r.per_item = std::move(aps);
  return r;
}

/// Mean over labels of the AP from ranking images by that label's score.
inline MapResult map_per_label(const ScoreMatrix& s, const LabelSets& truth) {
  const std::size_t n = s.rows();
  std::vector<std::optional<double>> aps(s.num_labels);
  std::vector<double> col(n);
  std::vector<char> rel(n);
  for (std::size_t c = 0; c < s.num_labels; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = s.at(i, c);
      rel[i] = std::find(truth[i].begin(), truth[i].end(), static_cast<LabelId>(c)) != truth[i].end();
    }
    aps[c] = average_precision(ranked_relevance(col, s.ids, rel));
  }
  return finish_map(std::move(aps));
}

/// Mean over images of the AP from ranking labels by that image's scores.
inline MapResult map_per_image(const ScoreMatrix& s, const LabelSets& truth) {
  std::vector<std::optional<double>> aps(s.rows());
  std::vector<std::int64_t> keys(s.num_labels);
  std::iota(keys.begin(), keys.end(), std::int64_t{0});
  std::vector<char> rel(s.num_labels);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    std::fill(rel.begin(), rel.end(), 0);
    for (LabelId c : truth[i]) rel.at(c) = 1;
    aps[i] = average_precision(ranked_relevance(s.row(i), keys, rel));
  }
  return finish_map(std::move(aps));
}

struct PrPoint {
  double recall = 0;
  double precision = 0;
};

/// One (recall, precision) point per rank.
inline std::vector<PrPoint> pr_curve(std::span<const double> scores, std::span<const std::int64_t> keys,
                                     std::span<const char> relevant) {
  const auto rel = ranked_relevance(scores, keys, relevant);
  const auto total = static_cast<double>(std::count(rel.begin(), rel.end(), 1));
  if (total == 0) throw ValidationError("pr_curve: no positive items");
  std::vector<PrPoint> out;
  out.reserve(rel.size());
  std::size_t found = 0;
  for (std::size_t k = 0; k < rel.size(); ++k) {
    found += rel[k] ? 1 : 0;
    out.push_back({static_cast<double>(found) / total, static_cast<double>(found) / static_cast<double>(k + 1)});
  }
  return out;
}

/// Step-rule area: sum of (recall_k - recall_{k-1}) * precision_k.
inline double pr_curve_area(std::span<const PrPoint> curve) {
  double area = 0, prev = 0;
  for (const auto& p : curve) {
    area += (p.recall - prev) * p.precision;
    prev = p.recall;
  }
  return area;
}

// ---------------------------------------------------------------------------

struct EvalReport {
  std::size_t n = 3;
  double prec_i = 0, rec_i = 0, prec_l = 0, rec_l = 0, map_l = 0, map_i = 0;
  std::vector<std::optional<double>> label_ap;
  std::vector<std::size_t> label_positives;
  std::size_t labels_excluded = 0;   // no positives among evaluated images
  std::size_t never_predicted = 0;
  std::size_t images = 0;
};

inline EvalReport evaluate_report(const ScoreMatrix& s, const LabelSets& truth, std::size_t n = 3) {
  if (truth.size() != s.rows()) throw ValidationError("evaluate: truth rows != score rows");
  EvalReport r;
  r.n = n;
  r.images = s.rows();
  const auto pr = precision_recall(topn_assign(s, n), truth, s.num_labels);
  r.prec_i = pr.prec_i;
  r.rec_i = pr.rec_i;
  r.prec_l = pr.prec_l;
  r.rec_l = pr.rec_l;
  r.never_predicted = pr.never_predicted;
  auto ml = map_per_label(s, truth);
  r.map_l = ml.map;
  r.labels_excluded = ml.excluded;
  r.label_ap = std::move(ml.per_item);
  r.map_i = map_per_image(s, truth).map;
  r.label_positives.assign(s.num_labels, 0);
  for (const auto& gt : truth)
    for (LabelId c : gt) ++r.label_positives[c];
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json aps = nlohmann::json::array();
  for (const auto& ap : r.label_ap) aps.push_back(ap ? nlohmann::json(*ap) : nlohmann::json(nullptr));
  return {{"n", r.n},
          {"images", r.images},
          {"mAP_L", r.map_l},
          {"mAP_I", r.map_i},
          {"Rec_L", r.rec_l},
          {"Prec_L", r.prec_l},
          {"Rec_I", r.rec_i},
          {"Prec_I", r.prec_i},
          {"labels_excluded", r.labels_excluded},
          {"never_predicted", r.never_predicted},
          {"label_ap", aps},
          {"label_positives", r.label_positives}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.n = j.value("n", std::size_t{3});
  r.images = j.value("images", std::size_t{0});
  r.map_l = j.at("mAP_L").get<double>();
  r.map_i = j.at("mAP_I").get<double>();
  r.rec_l = j.at("Rec_L").get<double>();
  r.prec_l = j.at("Prec_L").get<double>();
  r.rec_i = j.at("Rec_I").get<double>();
  r.prec_i = j.at("Prec_I").get<double>();
  r.labels_excluded = j.value("labels_excluded", std::size_t{0});
  r.never_predicted = j.value("never_predicted", std::size_t{0});
  if (j.contains("label_ap"))
    for (const auto& v : j["label_ap"])
      r.label_ap.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  if (j.contains("label_positives")) r.label_positives = j["label_positives"].get<std::vector<std::size_t>>();
  return r;
}

struct ApDelta {
  LabelId label = 0;
  std::size_t positives = 0;
  double ap_a = 0, ap_b = 0, delta = 0;
};

/// Per-label AP(a) - AP(b) for labels with positives, sorted by positive
/// count (ascending), ties by label id.
inline std::vector<ApDelta> ap_compare(const EvalReport& a, const EvalReport& b) {
  if (a.label_ap.size() != b.label_ap.size()) throw ValidationError("ap_compare: label spaces differ");
  std::vector<ApDelta> rows;
  for (std::size_t c = 0; c < a.label_ap.size(); ++c) {
    if (!a.label_ap[c] || !b.label_ap[c]) continue;
    const std::size_t pos = c < a.label_positives.size() ? a.label_positives[c] : 0;
    rows.push_back({static_cast<LabelId>(c), pos, *a.label_ap[c], *b.label_ap[c], *a.label_ap[c] - *b.label_ap[c]});
  }
  std::sort(rows.begin(), rows.end(), [](const ApDelta& x, const ApDelta& y) {
    return x.positives != y.positives ? x.positives < y.positives : x.label < y.label;
  });
  return rows;
}

}  // namespace nbann
