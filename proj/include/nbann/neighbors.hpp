#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "nbann/common.hpp"
#include "nbann/corpus.hpp"
#include "nbann/io.hpp"

namespace nbann {

struct Neighbor {
  ImageId id = 0;
  double distance = 0;
  bool operator==(const Neighbor&) const = default;
};

/// Ranked neighbors of one query, ordered by (distance, id).
struct NeighborList {
  ImageId query = 0;
  std::vector<Neighbor> neighbors;
  std::size_t size() const { return neighbors.size(); }
};

/// Jaccard distance between two sorted term sets. Two empty sets are at
/// distance 1: sharing nothing is no evidence of relatedness.
inline double jaccard_distance(std::span<const TermId> a, std::span<const TermId> b) {
  std::size_t inter = 0;
  auto ia = a.begin(), ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++inter;
      ++ia;
      ++ib;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  if (uni == 0) return 1.0;
  return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

/// Inverted index from term to ascending pool positions. The pool is kept
/// sorted by image id so that position order is id order.
class MetadataIndex {
 public:
  MetadataIndex() = default;

  MetadataIndex(const Corpus& corpus, std::span<const ImageId> pool, MetadataKind kind,
                std::span<const TermId> vocab)
      : kind_(kind), pool_(pool.begin(), pool.end()) {
    std::sort(pool_.begin(), pool_.end());
    if (std::adjacent_find(pool_.begin(), pool_.end()) != pool_.end())
      throw ValidationError("build_index: duplicate ids in pool");
    in_vocab_.assign(corpus.vocab_size(kind), false);
    for (TermId t : vocab) {
      if (t >= in_vocab_.size()) throw ValidationError("build_index: vocab term " + std::to_string(t) + " out of range");
      in_vocab_[t] = true;
    }
    postings_.resize(in_vocab_.size());
    set_sizes_.reserve(pool_.size());
    for (std::uint32_t pos = 0; pos < pool_.size(); ++pos) {
      std::uint32_t n = 0;
      for (TermId t : corpus.at(pool_[pos]).terms(kind)) {
        if (!in_vocab_[t]) continue;
        postings_[t].push_back(pos);
        ++n;
      }
      set_sizes_.push_back(n);
    }
  }

  MetadataKind kind() const { return kind_; }
  const std::vector<ImageId>& pool() const { return pool_; }
  const std::vector<std::uint32_t>& postings(TermId t) const { return postings_.at(t); }
  const std::vector<std::uint32_t>& set_sizes() const { return set_sizes_; }
  bool in_vocab(TermId t) const { return t < in_vocab_.size() && in_vocab_[t]; }

  std::vector<TermId> restrict_terms(std::span<const TermId> terms) const {
    std::vector<TermId> out;
    for (TermId t : terms)
      if (in_vocab(t)) out.push_back(t);
    return out;
  }

  /// The M pool images nearest to `terms` (query id excluded), ties by id.
  /// Images sharing no indexed term sit at distance 1 and pad the list in
  /// ascending id order.
  NeighborList query(std::span<const TermId> terms, ImageId query_id, std::size_t max_rank) const {
    if (max_rank < 1) throw ValidationError("query_knn: M must be >= 1");
    if (pool_.empty()) throw ValidationError("query_knn: empty index");
    const bool self_in_pool = std::binary_search(pool_.begin(), pool_.end(), query_id);
    const std::size_t available = pool_.size() - (self_in_pool ? 1 : 0);
    if (available < max_rank)
      throw ValidationError("query_knn: pool has " + std::to_string(available) + " candidates, fewer than M=" +
                            std::to_string(max_rank));

    const auto q = restrict_terms(terms);
    std::vector<std::uint32_t> counts(pool_.size(), 0);
    std::vector<std::uint32_t> touched;
    for (TermId t : q)
      for (std::uint32_t pos : postings_[t])
        if (counts[pos]++ == 0) touched.push_back(pos);

    struct Cand {
      double distance;
      std::uint32_t pos;
    };
    std::vector<Cand> cands;
    cands.reserve(touched.size());
    for (std::uint32_t pos : touched) {
      if (pool_[pos] == query_id) continue;
      const std::size_t inter = counts[pos];
      const std::size_t uni = q.size() + set_sizes_[pos] - inter;
      cands.push_back({1.0 - static_cast<double>(inter) / static_cast<double>(uni), pos});
    }
    const auto less = [](const Cand& a, const Cand& b) {
      return a.distance != b.distance ? a.distance < b.distance : a.pos < b.pos;
    };
    const std::size_t keep = std::min(max_rank, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), less);

    NeighborList out;
    out.query = query_id;
    out.neighbors.reserve(max_rank);
    for (std::size_t i = 0; i < keep; ++i) out.neighbors.push_back({pool_[cands[i].pos], cands[i].distance});
    for (std::uint32_t pos = 0; pos < pool_.size() && out.neighbors.size() < max_rank; ++pos) {
      if (counts[pos] != 0 || pool_[pos] == query_id) continue;
      out.neighbors.push_back({pool_[pos], 1.0});
    }
    return out;
  }

 private:
  MetadataKind kind_ = MetadataKind::kTags;
  std::vector<ImageId> pool_;
  std::vector<bool> in_vocab_;
  std::vector<std::vector<std::uint32_t>> postings_;
  std::vector<std::uint32_t> set_sizes_;
};

inline MetadataIndex build_index(const Corpus& corpus, std::span<const ImageId> pool, MetadataKind kind,
                                 std::span<const TermId> vocab) {
  return MetadataIndex(corpus, pool, kind, vocab);
}

inline NeighborList query_knn(const MetadataIndex& index, std::span<const TermId> terms, ImageId query_id,
                              std::size_t max_rank) {
  return index.query(terms, query_id, max_rank);
}

/// Brute-force Euclidean neighbors over feature vectors ("visual neighbors").
inline NeighborList visual_knn(const Corpus& corpus, std::span<const ImageId> sorted_pool,
                               std::span<const float> query, ImageId query_id, std::size_t max_rank) {
  std::vector<Neighbor> all;
  all.reserve(sorted_pool.size());
  for (ImageId id : sorted_pool) {
    if (id == query_id) continue;
    const auto& f = corpus.at(id).features;
    double s = 0;
    for (std::size_t j = 0; j < f.size(); ++j) {
      const double diff = static_cast<double>(f[j]) - static_cast<double>(query[j]);
      s += diff * diff;
    }
    all.push_back({id, std::sqrt(s)});
  }
  if (all.size() < max_rank)
    throw ValidationError("visual_knn: pool has " + std::to_string(all.size()) + " candidates, fewer than M=" +
                          std::to_string(max_rank));
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_rank), all.end(),
                    [](const Neighbor& a, const Neighbor& b) {
                      return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
                    });
  all.resize(max_rank);
  return {query_id, std::move(all)};
}

// ---------------------------------------------------------------------------
// Neighbor tables for a whole pool.

/// Where neighbors come from: one of the metadata kinds or visual features.
struct NeighborSource {
  bool visual = false;
  MetadataKind kind = MetadataKind::kTags;

  static NeighborSource metadata(MetadataKind k) { return {false, k}; }
  static NeighborSource features() { return {true, MetadataKind::kTags}; }
  static NeighborSource parse(std::string_view name) {
    if (name == "visual") return features();
    return metadata(parse_kind(name));
  }
  std::string name() const { return visual ? "visual" : std::string(kind_name(kind)); }
};

class NeighborTable {
 public:
  NeighborTable() = default;
  explicit NeighborTable(std::vector<NeighborList> lists) : lists_(std::move(lists)) {
    for (std::size_t i = 0; i < lists_.size(); ++i) index_.emplace(lists_[i].query, i);
  }

  const NeighborList* find(ImageId id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &lists_[it->second];
  }
  const std::vector<NeighborList>& lists() const { return lists_; }
  std::size_t size() const { return lists_.size(); }

 private:
  std::vector<NeighborList> lists_;
  std::unordered_map<ImageId, std::size_t> index_;
};

/// Neighbor lists for every image in `pool`, searched within the same pool.
/// M is clamped to pool size - 1.
inline NeighborTable compute_neighbors(const Corpus& corpus, std::span<const ImageId> pool, NeighborSource source,
                                       std::span<const TermId> vocab, std::size_t max_rank,
                                       std::size_t threads = 1) {
  std::vector<ImageId> sorted(pool.begin(), pool.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<NeighborList> lists(sorted.size());
  if (sorted.size() < 2) {
    for (std::size_t i = 0; i < sorted.size(); ++i) lists[i].query = sorted[i];
    return NeighborTable(std::move(lists));
  }
  const std::size_t m_eff = std::min(max_rank, sorted.size() - 1);
  if (source.visual) {
    parallel_for(sorted.size(), threads, [&](std::size_t i) {
      lists[i] = visual_knn(corpus, sorted, corpus.at(sorted[i]).features, sorted[i], m_eff);
    });
  } else {
    const MetadataIndex index(corpus, sorted, source.kind, vocab);
    parallel_for(sorted.size(), threads, [&](std::size_t i) {
      lists[i] = index.query(corpus.at(sorted[i]).terms(source.kind), sorted[i], m_eff);
    });
  }
  return NeighborTable(std::move(lists));
}

inline void save_neighbors(const std::filesystem::path& path, const NeighborTable& table) {
  auto out = io::open_out(path);
  for (const auto& l : table.lists()) {
    nlohmann::json nbrs = nlohmann::json::array();
    for (const auto& n : l.neighbors) nbrs.push_back({n.id, n.distance});
    out << nlohmann::json{{"id", l.query}, {"nbrs", nbrs}}.dump() << '\n';
  }
}

inline NeighborTable load_neighbors(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  std::vector<NeighborList> lists;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      NeighborList l;
      l.query = j.at("id").get<ImageId>();
      for (const auto& p : j.at("nbrs")) l.neighbors.push_back({p.at(0).get<ImageId>(), p.at(1).get<double>()});
      lists.push_back(std::move(l));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ": record " + std::to_string(row) + ": " + e.what());
    }
    ++row;
  }
  return NeighborTable(std::move(lists));
}

// ---------------------------------------------------------------------------
// Candidate neighborhoods: size-m subsets of the M nearest neighbors.

/// C(n, k), saturating at UINT64_MAX.
inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  unsigned __int128 r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    r = r * (n - k + i) / i;
    if (r > std::numeric_limits<std::uint64_t>::max()) return std::numeric_limits<std::uint64_t>::max();
  }
  return static_cast<std::uint64_t>(r);
}

/// Number of candidate neighborhoods |Z_x| for a list and size m.
inline std::uint64_t count_candidates(const NeighborList& list, std::size_t m) {
  if (m < 1 || m > list.size())
    throw ValidationError("enumerate_candidates: need 1 <= m <= " + std::to_string(list.size()) + ", got m=" +
                          std::to_string(m));
  return binomial(list.size(), m);
}

/// All m-subsets of ranks [0, n) in lexicographic order.
inline std::vector<std::vector<std::uint32_t>> rank_subsets(std::size_t n, std::size_t m) {
  std::vector<std::vector<std::uint32_t>> out;
  if (m > n) return out;
  std::vector<std::uint32_t> cur(m);
  for (std::size_t i = 0; i < m; ++i) cur[i] = static_cast<std::uint32_t>(i);
  while (true) {
    out.push_back(cur);
    std::size_t i = m;
    while (i > 0 && cur[i - 1] == n - m + i - 1) --i;
    if (i == 0) break;
    ++cur[i - 1];
    for (std::size_t j = i; j < m; ++j) cur[j] = cur[j - 1] + 1;
  }
  return out;
}

inline std::vector<ImageId> subset_ids(const NeighborList& list, std::span<const std::uint32_t> ranks) {
  std::vector<ImageId> ids;
  ids.reserve(ranks.size());
  for (auto r : ranks) ids.push_back(list.neighbors[r].id);
  return ids;
}

inline std::vector<std::vector<ImageId>> enumerate_candidates(const NeighborList& list, std::size_t m) {
  const auto total = count_candidates(list, m);
  if (total > 10'000'000) throw RuntimeError("enumerate_candidates: too many candidates to enumerate");
  std::vector<std::vector<ImageId>> out;
  for (const auto& ranks : rank_subsets(list.size(), m)) out.push_back(subset_ids(list, ranks));
  return out;
}

/// `count` distinct candidate neighborhoods drawn uniformly without
/// replacement; all of them (lexicographic) when count >= |Z_x|.
inline std::vector<std::vector<ImageId>> sample_neighborhoods(const NeighborList& list, std::size_t m,
                                                              std::size_t count, std::uint64_t seed) {
  if (count < 1) throw ValidationError("sample_neighborhoods: count must be >= 1");
  const auto total = count_candidates(list, m);
  if (count >= total) return enumerate_candidates(list, m);

  std::mt19937_64 rng(seed);
  std::vector<std::vector<ImageId>> out;
  out.reserve(count);
  if (total <= 100'000 && 2 * count >= total) {
    auto all = rank_subsets(list.size(), m);
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
      std::swap(all[i], all[pick(rng)]);
      out.push_back(subset_ids(list, all[i]));
    }
    return out;
  }
  // Floyd's algorithm per draw, rejecting repeats.
  const std::size_t n = list.size();
  std::set<std::vector<std::uint32_t>> seen;
  while (out.size() < count) {
    std::vector<std::uint32_t> ranks;
    ranks.reserve(m);
    for (std::size_t j = n - m; j < n; ++j) {
      std::uniform_int_distribution<std::size_t> pick(0, j);
      const auto t = static_cast<std::uint32_t>(pick(rng));
      if (std::find(ranks.begin(), ranks.end(), t) == ranks.end())
        ranks.push_back(t);
      else
        ranks.push_back(static_cast<std::uint32_t>(j));
    }
    std::sort(ranks.begin(), ranks.end());
    if (seen.insert(ranks).second) out.push_back(subset_ids(list, ranks));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Label agreement between images and their k-th neighbors.

struct CorrelationCurves {
  std::size_t k_max = 0;
  // curve[c][k-1] = P(c in labels(k-th neighbor) | c in labels(image)); empty
  // optional where no image with label c has a k-th neighbor.
  std::vector<std::vector<std::optional<double>>> curve;
  std::vector<std::vector<std::size_t>> hits;    // numerator counts
  std::vector<std::vector<std::size_t>> trials;  // denominator counts
  std::vector<double> base_rate;                 // P(c) over query images
  std::vector<std::size_t> positives;

  /// Unweighted mean over labels with a defined value at rank k (1-based).
  std::optional<double> mean_curve(std::size_t k) const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& c : curve)
      if (c[k - 1]) {
        s += *c[k - 1];
        ++n;
      }
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
  }
  double mean_base_rate() const {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < base_rate.size(); ++c)
      if (positives[c] > 0) {
        s += base_rate[c];
        ++n;
      }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

inline CorrelationCurves neighbor_label_correlation(const Corpus& corpus, const NeighborTable& table,
                                                    std::size_t k_max) {
  const std::size_t num_l = corpus.num_labels();
  CorrelationCurves out;
  out.k_max = k_max;
  out.hits.assign(num_l, std::vector<std::size_t>(k_max, 0));
  out.trials.assign(num_l, std::vector<std::size_t>(k_max, 0));
  out.positives.assign(num_l, 0);
  out.base_rate.assign(num_l, 0.0);
  for (const auto& list : table.lists()) {
    const auto& labels = corpus.at(list.query).labels;
    for (LabelId c : labels) ++out.positives[c];
    const std::size_t depth = std::min(k_max, list.size());
    for (std::size_t k = 0; k < depth; ++k) {
      const auto& nbr = corpus.at(list.neighbors[k].id);
      for (LabelId c : labels) {
        ++out.trials[c][k];
        if (nbr.has_label(c)) ++out.hits[c][k];
      }
    }
  }
  out.curve.assign(num_l, std::vector<std::optional<double>>(k_max));
  for (std::size_t c = 0; c < num_l; ++c) {
    if (!table.lists().empty())
      out.base_rate[c] = static_cast<double>(out.positives[c]) / static_cast<double>(table.size());
    for (std::size_t k = 0; k < k_max; ++k)
      if (out.trials[c][k] > 0)
        out.curve[c][k] = static_cast<double>(out.hits[c][k]) / static_cast<double>(out.trials[c][k]);
  }
  return out;
}

}  // namespace nbann
