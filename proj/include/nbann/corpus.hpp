#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "nbann/common.hpp"
#include "nbann/io.hpp"

namespace nbann {

struct ImageRecord {
  ImageId id = 0;
  std::vector<float> features;
  std::vector<LabelId> labels;                     // sorted, unique
  std::array<std::vector<TermId>, 3> metadata;     // per kind, sorted, unique

  const std::vector<TermId>& terms(MetadataKind kind) const {
    return metadata[static_cast<std::size_t>(kind)];
  }
  std::vector<TermId>& terms(MetadataKind kind) { return metadata[static_cast<std::size_t>(kind)]; }
  bool has_label(LabelId c) const { return std::binary_search(labels.begin(), labels.end(), c); }
};

/// Images plus their label and term vocabularies. Immutable once validated;
/// lookups by id go through an index rebuilt by `reindex()`.
class Corpus {
 public:
  std::vector<ImageRecord> images;
  std::vector<std::string> label_names;
  std::array<std::vector<std::string>, 3> vocab;
  std::size_t dim = 0;

  std::size_t size() const { return images.size(); }
  std::size_t num_labels() const { return label_names.size(); }
  std::size_t vocab_size(MetadataKind kind) const { return vocab[static_cast<std::size_t>(kind)].size(); }

  void reindex() {
    index_.clear();
    index_.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) index_.emplace(images[i].id, i);
  }

  bool contains(ImageId id) const { return index_.count(id) != 0; }

  std::size_t position(ImageId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("image id " + std::to_string(id) + " not in corpus");
    return it->second;
  }

  const ImageRecord& at(ImageId id) const { return images[position(id)]; }

  std::vector<ImageId> ids() const {
    std::vector<ImageId> out;
    out.reserve(images.size());
    for (const auto& im : images) out.push_back(im.id);
    return out;
  }

  /// Checks every documented invariant; throws ValidationError naming the
  /// offending record index.
  void validate() {
    std::unordered_set<ImageId> seen;
    const std::size_t num_l = num_labels();
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& im = images[i];
      const std::string where = "record " + std::to_string(i) + " (id " + std::to_string(im.id) + ")";
      if (im.id < 0) throw ValidationError(where + ": negative id");
      if (!seen.insert(im.id).second) throw ValidationError(where + ": duplicate id");
      if (im.features.size() != dim)
        throw ValidationError(where + ": feature dimension " + std::to_string(im.features.size()) +
                              " != " + std::to_string(dim));
      for (float v : im.features)
        if (!std::isfinite(v)) throw ValidationError(where + ": non-finite feature value");
      if (!std::is_sorted(im.labels.begin(), im.labels.end()) ||
          std::adjacent_find(im.labels.begin(), im.labels.end()) != im.labels.end())
        throw ValidationError(where + ": labels not sorted/unique");
      for (LabelId c : im.labels)
        if (c >= num_l)
          throw ValidationError(where + ": label id " + std::to_string(c) + " out of range [0," +
                                std::to_string(num_l) + ")");
      for (MetadataKind kind : kAllKinds) {
        const auto& t = im.terms(kind);
        if (!std::is_sorted(t.begin(), t.end()) || std::adjacent_find(t.begin(), t.end()) != t.end())
          throw ValidationError(where + ": " + std::string(kind_name(kind)) + " not sorted/unique");
        for (TermId term : t)
          if (term >= vocab_size(kind))
            throw ValidationError(where + ": " + std::string(kind_name(kind)) + " term id " +
                                  std::to_string(term) + " out of range [0," +
                                  std::to_string(vocab_size(kind)) + ")");
      }
    }
    reindex();
  }

 private:
  std::unordered_map<ImageId, std::size_t> index_;
};

struct CorpusPaths {
  std::filesystem::path features;
  std::filesystem::path metadata;
  std::filesystem::path labels;  // label-name file
  std::array<std::filesystem::path, 3> vocab;  // optional per-kind name files

  static CorpusPaths in_dir(const std::filesystem::path& dir) {
    CorpusPaths p;
    p.features = dir / "features.bin";
    p.metadata = dir / "metadata.jsonl";
    p.labels = dir / "labels.txt";
    for (MetadataKind kind : kAllKinds)
      p.vocab[static_cast<std::size_t>(kind)] = dir / (std::string(kind_name(kind)) + ".txt");
    return p;
  }
};

namespace detail {

inline std::vector<std::uint32_t> sorted_unique(const nlohmann::json& arr, const std::string& where,
                                                const char* key) {
  std::vector<std::uint32_t> out;
  if (!arr.is_array()) throw ValidationError(where + ": \"" + key + "\" must be an array");
  out.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
      throw ValidationError(where + ": \"" + key + "\" must contain non-negative integers");
    out.push_back(v.get<std::uint32_t>());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace detail

/// Reads an "NLFM" feature file: u32 version=1, u64 N, u32 d, then N*d f32.
inline std::vector<std::vector<float>> read_features(const std::filesystem::path& path,
                                                     std::size_t* dim_out) {
  auto in = io::open_in(path, true);
  io::expect_magic(in, "NLFM", path.string());
  std::uint32_t version = 0, d = 0;
  std::uint64_t n = 0;
  if (!io::read_le(in, version) || !io::read_le(in, n) || !io::read_le(in, d))
    throw ValidationError(path.string() + ": truncated header");
  if (version != 1) throw ValidationError(path.string() + ": unsupported version " + std::to_string(version));
  std::vector<std::vector<float>> rows;
  rows.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::vector<float> row(d);
    for (std::uint32_t j = 0; j < d; ++j) {
      if (!io::read_le(in, row[j]))
        throw ValidationError(path.string() + ": truncated at record " + std::to_string(i) + " (header N=" +
                              std::to_string(n) + ", d=" + std::to_string(d) + ")");
    }
    rows.push_back(std::move(row));
  }
  *dim_out = d;
  return rows;
}

inline void write_features(const std::filesystem::path& path, const Corpus& corpus) {
  auto out = io::open_out(path, true);
  io::write_magic(out, "NLFM");
  io::write_le<std::uint32_t>(out, 1);
  io::write_le<std::uint64_t>(out, corpus.size());
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(corpus.dim));
  for (const auto& im : corpus.images)
    for (float v : im.features) io::write_le(out, v);
}

inline Corpus load_corpus(const CorpusPaths& paths) {
  Corpus corpus;
  auto rows = read_features(paths.features, &corpus.dim);
  corpus.label_names = io::read_lines(paths.labels);

  auto in = io::open_in(paths.metadata);
  std::string line;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::string where = "metadata record " + std::to_string(index);
    if (index >= rows.size())
      throw ValidationError(where + ": more metadata records than feature rows (" + std::to_string(rows.size()) + ")");
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains("id") || !obj["id"].is_number_integer())
      throw ValidationError(where + ": missing integer \"id\"");
    ImageRecord rec;
    rec.id = obj["id"].get<ImageId>();
    rec.features = std::move(rows[index]);
    if (obj.contains("labels")) rec.labels = detail::sorted_unique(obj["labels"], where, "labels");
    for (MetadataKind kind : kAllKinds) {
      const std::string key(kind_name(kind));
      if (obj.contains(key)) rec.terms(kind) = detail::sorted_unique(obj[key], where, key.c_str());
    }
    corpus.images.push_back(std::move(rec));
    ++index;
  }
  if (index != rows.size())
    throw ValidationError("metadata has " + std::to_string(index) + " records but feature file has " +
                          std::to_string(rows.size()) + " rows");

  for (MetadataKind kind : kAllKinds) {
    const auto& path = paths.vocab[static_cast<std::size_t>(kind)];
    auto& names = corpus.vocab[static_cast<std::size_t>(kind)];
    if (!path.empty() && std::filesystem::exists(path)) {
      names = io::read_lines(path);
    } else {
      TermId max_term = 0;
      bool any = false;
      for (const auto& im : corpus.images)
        if (!im.terms(kind).empty()) {
          max_term = std::max(max_term, im.terms(kind).back());
          any = true;
        }
      const std::size_t n = any ? max_term + 1 : 0;
      names.reserve(n);
      for (std::size_t t = 0; t < n; ++t) names.push_back(std::string(kind_name(kind)) + std::to_string(t));
    }
  }
  corpus.validate();
  return corpus;
}

inline Corpus load_corpus_dir(const std::filesystem::path& dir) { return load_corpus(CorpusPaths::in_dir(dir)); }

inline void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  const auto paths = CorpusPaths::in_dir(dir);
  write_features(paths.features, corpus);
  auto out = io::open_out(paths.metadata);
  for (const auto& im : corpus.images) {
    nlohmann::json obj;
    obj["id"] = im.id;
    obj["labels"] = im.labels;
    for (MetadataKind kind : kAllKinds)
      if (!im.terms(kind).empty()) obj[std::string(kind_name(kind))] = im.terms(kind);
    out << obj.dump() << '\n';
  }
  io::write_lines(paths.labels, corpus.label_names);
  for (MetadataKind kind : kAllKinds)
    io::write_lines(paths.vocab[static_cast<std::size_t>(kind)], corpus.vocab[static_cast<std::size_t>(kind)]);
}

// ---------------------------------------------------------------------------
// Statistics in the "mean / median" layout used for dataset summaries.

struct CountSummary {
  double mean = 0;
  double median = 0;
};

inline CountSummary summarize(std::vector<double> values) {
  CountSummary s;
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  s.median = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return s;
}

struct ElementStats {
  std::size_t unique_elements = 0;  // vocabulary size
  std::size_t used_elements = 0;
  CountSummary images_per_element;  // over elements used at least once
  CountSummary elements_per_image;  // over all images
};

struct CorpusStats {
  std::size_t num_images = 0;
  std::size_t dim = 0;
  ElementStats labels;
  std::array<ElementStats, 3> kinds;
};

inline ElementStats element_stats(const Corpus& corpus, std::size_t vocab_size,
                                  const std::function<const std::vector<std::uint32_t>&(const ImageRecord&)>& get) {
  ElementStats st;
  st.unique_elements = vocab_size;
  std::vector<double> per_element(vocab_size, 0.0), per_image;
  per_image.reserve(corpus.size());
  for (const auto& im : corpus.images) {
    const auto& els = get(im);
    per_image.push_back(static_cast<double>(els.size()));
    for (auto e : els) per_element[e] += 1;
  }
  std::vector<double> used;
  for (double c : per_element)
    if (c > 0) used.push_back(c);
  st.used_elements = used.size();
  st.images_per_element = summarize(std::move(used));
  st.elements_per_image = summarize(std::move(per_image));
  return st;
}

inline CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats st;
  st.num_images = corpus.size();
  st.dim = corpus.dim;
  st.labels = element_stats(corpus, corpus.num_labels(),
                            [](const ImageRecord& im) -> const std::vector<std::uint32_t>& { return im.labels; });
  for (MetadataKind kind : kAllKinds)
    st.kinds[static_cast<std::size_t>(kind)] = element_stats(
        corpus, corpus.vocab_size(kind),
        [kind](const ImageRecord& im) -> const std::vector<std::uint32_t>& { return im.terms(kind); });
  return st;
}

inline nlohmann::json to_json(const ElementStats& s) {
  return {{"unique", s.unique_elements},
          {"used", s.used_elements},
          {"images_per_element", {{"mean", s.images_per_element.mean}, {"median", s.images_per_element.median}}},
          {"per_image", {{"mean", s.elements_per_image.mean}, {"median", s.elements_per_image.median}}}};
}

inline nlohmann::json to_json(const CorpusStats& s) {
  nlohmann::json j{{"images", s.num_images}, {"dim", s.dim}, {"labels", to_json(s.labels)}};
  for (MetadataKind kind : kAllKinds) j[std::string(kind_name(kind))] = to_json(s.kinds[static_cast<std::size_t>(kind)]);
  return j;
}

// ---------------------------------------------------------------------------
// Filtering, splits, vocabularies.

/// Keeps images with at least one label and at least one metadata term of any
/// kind, in their original order.
inline Corpus filter_images(const Corpus& corpus) {
  Corpus out;
  out.label_names = corpus.label_names;
  out.vocab = corpus.vocab;
  out.dim = corpus.dim;
  for (const auto& im : corpus.images) {
    const bool has_meta = std::any_of(im.metadata.begin(), im.metadata.end(),
                                      [](const auto& t) { return !t.empty(); });
    if (!im.labels.empty() && has_meta) out.images.push_back(im);
  }
  out.reindex();
  return out;
}

struct SplitSpec {
  std::vector<ImageId> train;
  std::vector<ImageId> val;
  std::vector<ImageId> test;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const SplitSpec& s) {
  return {{"train", s.train}, {"val", s.val}, {"test", s.test}, {"seed", s.seed}};
}

inline SplitSpec split_from_json(const nlohmann::json& j) {
  SplitSpec s;
  s.train = j.at("train").get<std::vector<ImageId>>();
  s.val = j.value("val", std::vector<ImageId>{});
  s.test = j.value("test", std::vector<ImageId>{});
  s.seed = j.value("seed", std::uint64_t{0});
  std::unordered_set<ImageId> seen;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (ImageId id : *part)
      if (!seen.insert(id).second) throw ValidationError("split: id " + std::to_string(id) + " appears twice");
  return s;
}

inline void save_split(const std::filesystem::path& path, const SplitSpec& s) {
  io::open_out(path) << to_json(s).dump() << '\n';
}

inline SplitSpec load_split(const std::filesystem::path& path) {
  try {
    return split_from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

/// Partitions a seeded Fisher-Yates shuffle of the corpus ids into
/// train/val/test. When the fractions sum to one the test part takes the
/// remainder so that rounding never drops or overshoots an image.
inline std::vector<SplitSpec> make_splits(const Corpus& corpus, std::array<double, 3> fractions,
                                          std::size_t n_splits, std::uint64_t seed) {
  if (n_splits < 1) throw ValidationError("make_splits: n_splits must be >= 1");
  for (double f : fractions)
    if (f < 0) throw ValidationError("make_splits: negative fraction");
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (total > 1 + 1e-9) throw ValidationError("make_splits: fractions sum to more than 1");
  const std::size_t n = corpus.size();
  std::array<std::size_t, 3> sizes{};
  for (int i = 0; i < 3; ++i) sizes[i] = static_cast<std::size_t>(std::llround(fractions[i] * static_cast<double>(n)));
  if (std::abs(total - 1) <= 1e-9 && sizes[0] + sizes[1] <= n) sizes[2] = n - sizes[0] - sizes[1];
  if (sizes[0] + sizes[1] + sizes[2] > n)
    throw ValidationError("make_splits: corpus of " + std::to_string(n) + " images is smaller than requested sizes");

  std::vector<SplitSpec> splits;
  const auto base = corpus.ids();
  for (std::size_t s = 0; s < n_splits; ++s) {
    auto perm = base;
    std::mt19937_64 rng(seed + s);
    for (std::size_t i = perm.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(perm[i - 1], perm[pick(rng)]);
    }
    SplitSpec spec;
    spec.seed = seed + s;
    auto it = perm.begin();
    spec.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
    it += static_cast<std::ptrdiff_t>(sizes[0]);
    spec.val.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
    it += static_cast<std::ptrdiff_t>(sizes[1]);
    spec.test.assign(it, it + static_cast<std::ptrdiff_t>(sizes[2]));
    splits.push_back(std::move(spec));
  }
  return splits;
}

/// Terms of `kind` kept for neighbor search. For tags: the tau terms with the
/// highest document frequency over `train_ids` (ties by ascending id). Other
/// kinds use their whole vocabulary. Result is sorted ascending.
inline std::vector<TermId> select_tag_vocabulary(const Corpus& corpus, std::span<const ImageId> train_ids,
                                                 MetadataKind kind, std::size_t tau) {
  const std::size_t v = corpus.vocab_size(kind);
  std::vector<TermId> all(v);
  std::iota(all.begin(), all.end(), TermId{0});
  if (kind != MetadataKind::kTags || tau >= v) return all;
  if (tau < 1) throw ValidationError("select_tag_vocabulary: tau must be >= 1");
  std::vector<std::size_t> freq(v, 0);
  for (ImageId id : train_ids)
    for (TermId t : corpus.at(id).terms(kind)) ++freq[t];
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(tau), all.end(),
                    [&](TermId a, TermId b) { return freq[a] != freq[b] ? freq[a] > freq[b] : a < b; });
  all.resize(tau);
  std::sort(all.begin(), all.end());
  return all;
}

/// Intersects every image's `kind` term set with `vocab` (sorted ascending).
inline Corpus restrict_metadata(const Corpus& corpus, MetadataKind kind, std::span<const TermId> vocab) {
  if (!std::is_sorted(vocab.begin(), vocab.end())) throw ValidationError("restrict_metadata: vocab must be sorted");
  Corpus out = corpus;
  for (auto& im : out.images) {
    auto& t = im.terms(kind);
    std::vector<TermId> kept;
    std::set_intersection(t.begin(), t.end(), vocab.begin(), vocab.end(), std::back_inserter(kept));
    t = std::move(kept);
  }
  out.reindex();
  return out;
}

}  // namespace nbann
