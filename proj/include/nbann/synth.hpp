#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbann/common.hpp"
#include "nbann/corpus.hpp"
#include "nbann/io.hpp"

namespace nbann {

/// How one metadata kind is drawn. Each topic owns a slice of
/// `terms_per_topic` terms; `noise_terms` more are shared by all topics. A
/// term slot comes from the image's topic slice with probability `purity`,
/// otherwise from the shared pool; both are Zipf-distributed.
struct KindConfig {
  double mean_count = 14.2;  // terms per image: 1 + NegBin with this mean
  double shape = 2.0;        // NegBin dispersion (smaller = heavier tail)
  double purity = 0.7;
  std::size_t terms_per_topic = 150;
  std::size_t noise_terms = 3000;
  double zipf = 1.0;
};

struct SynthConfig {
  std::size_t images = 6000;
  std::size_t topics = 12;
  std::size_t labels = 24;
  std::size_t dim = 64;
  double ambiguity = 0.3;          // share of images with blended features
  double blend_min = 0.2;          // weight of the true topic in a blend
  double blend_max = 0.45;
  double centroid_scale = 1.0;     // centroid entries ~ N(0, centroid_scale^2)
  double feature_noise = 0.5;      // per-dimension Gaussian noise std
  double secondary_label = 1.0;    // chance of each non-primary topic label
  double label_noise = 0.2;        // chance of one extra label from another topic
  double topic_skew = 0.5;         // topic weights proportional to 1/(k+1)^skew
  std::array<KindConfig, 3> kinds = default_kinds();
  std::uint64_t seed = 1;

  static std::array<KindConfig, 3> default_kinds() {
    std::array<KindConfig, 3> k;
    k[static_cast<std::size_t>(MetadataKind::kTags)] = {14.2, 2.0, 0.80, 150, 20000, 1.0};
    k[static_cast<std::size_t>(MetadataKind::kSets)] = {2.0, 4.0, 0.80, 40, 400, 1.0};
    k[static_cast<std::size_t>(MetadataKind::kGroups)] = {8.0, 2.0, 0.75, 60, 800, 1.0};
    return k;
  }

  void validate() const {
    if (ambiguity < 0 || ambiguity > 1) throw ValidationError("synth: ambiguity must be in [0,1]");
    if (topics < 1 || topics > labels) throw ValidationError("synth: need 1 <= topics <= labels");
    if (images < 1 || dim < 1) throw ValidationError("synth: images and dim must be >= 1");
    if (blend_min < 0 || blend_max > 1 || blend_min > blend_max) throw ValidationError("synth: bad blend range");
    for (const auto& k : kinds)
      if (k.mean_count < 1 || k.purity < 0 || k.purity > 1 || k.terms_per_topic < 1 || !(k.shape > 0))
        throw ValidationError("synth: bad metadata kind configuration");
  }

  /// Labels owned by topic t: every c with c mod topics == t, primary first.
  std::vector<LabelId> topic_labels(std::size_t t) const {
    std::vector<LabelId> out;
    for (std::size_t c = t; c < labels; c += topics) out.push_back(static_cast<LabelId>(c));
    return out;
  }
};

inline nlohmann::json to_json(const SynthConfig& c) {
  nlohmann::json kinds;
  for (MetadataKind kind : kAllKinds) {
    const auto& k = c.kinds[static_cast<std::size_t>(kind)];
    kinds[std::string(kind_name(kind))] = {{"mean_count", k.mean_count}, {"shape", k.shape},
                                           {"purity", k.purity},         {"terms_per_topic", k.terms_per_topic},
                                           {"noise_terms", k.noise_terms}, {"zipf", k.zipf}};
  }
  return {{"images", c.images},
          {"topics", c.topics},
          {"labels", c.labels},
          {"dim", c.dim},
          {"ambiguity", c.ambiguity},
          {"blend_min", c.blend_min},
          {"blend_max", c.blend_max},
          {"centroid_scale", c.centroid_scale},
          {"feature_noise", c.feature_noise},
          {"secondary_label", c.secondary_label},
          {"label_noise", c.label_noise},
          {"topic_skew", c.topic_skew},
          {"kinds", kinds},
          {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig c = {}) {
  c.images = j.value("images", c.images);
  c.topics = j.value("topics", c.topics);
  c.labels = j.value("labels", c.labels);
  c.dim = j.value("dim", c.dim);
  c.ambiguity = j.value("ambiguity", c.ambiguity);
  c.blend_min = j.value("blend_min", c.blend_min);
  c.blend_max = j.value("blend_max", c.blend_max);
  c.centroid_scale = j.value("centroid_scale", c.centroid_scale);
  c.feature_noise = j.value("feature_noise", c.feature_noise);
  c.secondary_label = j.value("secondary_label", c.secondary_label);
  c.label_noise = j.value("label_noise", c.label_noise);
  c.topic_skew = j.value("topic_skew", c.topic_skew);
  c.seed = j.value("seed", c.seed);
  if (j.contains("kinds"))
    for (MetadataKind kind : kAllKinds) {
      const std::string name(kind_name(kind));
      if (!j["kinds"].contains(name)) continue;
      const auto& kj = j["kinds"][name];
      auto& k = c.kinds[static_cast<std::size_t>(kind)];
      k.mean_count = kj.value("mean_count", k.mean_count);
      k.shape = kj.value("shape", k.shape);
      k.purity = kj.value("purity", k.purity);
      k.terms_per_topic = kj.value("terms_per_topic", k.terms_per_topic);
      k.noise_terms = kj.value("noise_terms", k.noise_terms);
      k.zipf = kj.value("zipf", k.zipf);
    }
  return c;
}

struct SynthProvenance {
  std::vector<std::size_t> topic;        // true topic per image (corpus order)
  std::vector<std::ptrdiff_t> blended_with;  // -1 for clean images
  std::vector<double> blend_weight;      // weight of the true topic
  std::vector<char> ambiguous;

  std::size_t num_ambiguous() const { return static_cast<std::size_t>(std::count(ambiguous.begin(), ambiguous.end(), 1)); }
};

struct SynthCorpus {
  Corpus corpus;
  SynthProvenance provenance;
  std::vector<std::vector<double>> centroids;
};

namespace detail {

inline std::discrete_distribution<std::size_t> zipf_distribution(std::size_t n, double s) {
  std::vector<double> w(n);
  for (std::size_t r = 0; r < n; ++r) w[r] = 1.0 / std::pow(static_cast<double>(r + 1), s);
  return std::discrete_distribution<std::size_t>(w.begin(), w.end());
}

}  // namespace detail

/// Draws a corpus whose labels, metadata and features all derive from a
/// latent topic per image. Ambiguous images (exactly ceil(ambiguity*N))
/// carry features blended with a second topic while keeping the first
/// topic's labels and metadata.
inline SynthCorpus synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  SynthCorpus out;
  Corpus& corpus = out.corpus;
  corpus.dim = cfg.dim;
  for (std::size_t c = 0; c < cfg.labels; ++c) corpus.label_names.push_back("label" + std::to_string(c));
  for (MetadataKind kind : kAllKinds) {
    const auto& k = cfg.kinds[static_cast<std::size_t>(kind)];
    const std::size_t v = cfg.topics * k.terms_per_topic + k.noise_terms;
    auto& names = corpus.vocab[static_cast<std::size_t>(kind)];
    for (std::size_t t = 0; t < v; ++t) names.push_back(std::string(kind_name(kind)) + std::to_string(t));
  }

  std::normal_distribution<double> std_normal(0.0, 1.0);
  out.centroids.assign(cfg.topics, std::vector<double>(cfg.dim));
  for (auto& c : out.centroids)
    for (double& v : c) v = cfg.centroid_scale * std_normal(rng);

  std::vector<double> topic_w(cfg.topics);
  for (std::size_t t = 0; t < cfg.topics; ++t) topic_w[t] = 1.0 / std::pow(static_cast<double>(t + 1), cfg.topic_skew);
  std::discrete_distribution<std::size_t> pick_topic(topic_w.begin(), topic_w.end());

  const std::size_t n = cfg.images;
  const auto n_ambiguous = static_cast<std::size_t>(std::ceil(cfg.ambiguity * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = 0; i < n_ambiguous; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(perm[i], perm[pick(rng)]);
  }
  auto& prov = out.provenance;
  prov.topic.resize(n);
  prov.blended_with.assign(n, -1);
  prov.blend_weight.assign(n, 1.0);
  prov.ambiguous.assign(n, 0);
  for (std::size_t i = 0; i < n_ambiguous; ++i) prov.ambiguous[perm[i]] = 1;

  std::array<std::discrete_distribution<std::size_t>, 3> topic_terms, noise_terms;
  for (std::size_t k = 0; k < 3; ++k) {
    topic_terms[k] = detail::zipf_distribution(cfg.kinds[k].terms_per_topic, cfg.kinds[k].zipf);
    noise_terms[k] = detail::zipf_distribution(std::max<std::size_t>(1, cfg.kinds[k].noise_terms), cfg.kinds[k].zipf);
  }

  std::bernoulli_distribution secondary(cfg.secondary_label), label_noise(cfg.label_noise);
  std::uniform_real_distribution<double> blend(cfg.blend_min, cfg.blend_max);
  std::normal_distribution<double> noise(0.0, cfg.feature_noise);

  for (std::size_t i = 0; i < n; ++i) {
    ImageRecord rec;
    rec.id = static_cast<ImageId>(i);
    const std::size_t topic = pick_topic(rng);
    prov.topic[i] = topic;

    const auto owned = cfg.topic_labels(topic);
    rec.labels.push_back(owned[0]);
    for (std::size_t j = 1; j < owned.size(); ++j)
      if (secondary(rng)) rec.labels.push_back(owned[j]);
    if (label_noise(rng) && owned.size() < cfg.labels) {
      std::uniform_int_distribution<std::size_t> pick(0, cfg.labels - owned.size() - 1);
      std::size_t r = pick(rng);
      for (std::size_t c = 0; c < cfg.labels; ++c) {
        if (c % cfg.topics == topic) continue;
        if (r-- == 0) {
          rec.labels.push_back(static_cast<LabelId>(c));
          break;
        }
      }
    }
    std::sort(rec.labels.begin(), rec.labels.end());

    for (MetadataKind kind : kAllKinds) {
      const auto ki = static_cast<std::size_t>(kind);
      const auto& kc = cfg.kinds[ki];
      const double mean_extra = kc.mean_count - 1.0;
      std::size_t count = 1;
      if (mean_extra > 0) {
        std::gamma_distribution<double> rate(kc.shape, mean_extra / kc.shape);
        std::poisson_distribution<std::size_t> extra(std::max(rate(rng), 1e-12));
        count += extra(rng);
      }
      const std::size_t vocab = cfg.topics * kc.terms_per_topic + kc.noise_terms;
      count = std::min(count, vocab / 2);
      std::bernoulli_distribution from_topic(kc.noise_terms ? kc.purity : 1.0);
      std::set<TermId> terms;
      std::size_t attempts = 0;
      while (terms.size() < count && attempts < 100 * count) {
        ++attempts;
        TermId t;
        if (from_topic(rng))
          t = static_cast<TermId>(topic * kc.terms_per_topic + topic_terms[ki](rng));
        else
          t = static_cast<TermId>(cfg.topics * kc.terms_per_topic + noise_terms[ki](rng));
        terms.insert(t);
      }
      rec.terms(kind).assign(terms.begin(), terms.end());
    }

    std::vector<double> f = out.centroids[topic];
    if (prov.ambiguous[i] && cfg.topics > 1) {
      std::uniform_int_distribution<std::size_t> pick(0, cfg.topics - 2);
      std::size_t other = pick(rng);
      if (other >= topic) ++other;
      const double w = blend(rng);
      prov.blended_with[i] = static_cast<std::ptrdiff_t>(other);
      prov.blend_weight[i] = w;
      for (std::size_t j = 0; j < cfg.dim; ++j) f[j] = w * out.centroids[topic][j] + (1 - w) * out.centroids[other][j];
    }
    rec.features.resize(cfg.dim);
    for (std::size_t j = 0; j < cfg.dim; ++j)
      rec.features[j] = static_cast<float>(f[j] + (cfg.feature_noise > 0 ? noise(rng) : 0.0));
    corpus.images.push_back(std::move(rec));
  }
  corpus.validate();
  return out;
}

inline nlohmann::json provenance_json(const SynthConfig& cfg, const SynthCorpus& s) {
  nlohmann::json images = nlohmann::json::array();
  for (std::size_t i = 0; i < s.corpus.size(); ++i)
    images.push_back({{"id", s.corpus.images[i].id},
                      {"topic", s.provenance.topic[i]},
                      {"ambiguous", s.provenance.ambiguous[i] != 0},
                      {"blended_with", s.provenance.blended_with[i]},
                      {"blend_weight", s.provenance.blend_weight[i]}});
  return {{"config", to_json(cfg)}, {"num_ambiguous", s.provenance.num_ambiguous()}, {"images", images}};
}

/// Writes the corpus files plus provenance.json into `dir`.
inline void save_synth(const std::filesystem::path& dir, const SynthConfig& cfg, const SynthCorpus& s) {
  save_corpus(dir, s.corpus);
  io::open_out(dir / "provenance.json") << provenance_json(cfg, s).dump() << '\n';
}

}  // namespace nbann
