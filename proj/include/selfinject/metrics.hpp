#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "selfinject/backend.hpp"
#include "selfinject/common.hpp"
#include "selfinject/cooccurrence.hpp"
#include "selfinject/dataset_io.hpp"
#include "selfinject/lexicon.hpp"

namespace selfinject {

using AnnotationMap = std::map<std::string, GroundTruthAnnotation>;

inline AnnotationMap index_annotations(const std::vector<GroundTruthAnnotation>& annotations) {
  AnnotationMap out;
  for (const auto& a : annotations) out.emplace(a.sample_id, a);
  return out;
}

struct TaggedResponse {
  std::string sample_id;
  ObjectTagSet objects;
};

namespace detail {
inline void require_annotations(const std::vector<TaggedResponse>& responses, const AnnotationMap& truth) {
  std::vector<std::string> missing;
  for (const auto& r : responses) {
    if (!truth.count(r.sample_id)) missing.push_back(r.sample_id);
  }
  if (!missing.empty()) throw InputError("missing annotations for: " + join(missing, ", "));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// CHAIR

struct ChairResult {
  double chair_i = 0.0;
  double chair_s = 0.0;
  std::size_t n_objects = 0;
  std::size_t n_hallucinated_objects = 0;
  std::size_t n_responses = 0;
  std::size_t n_hallucinated_responses = 0;
};

/// CHAIR-i: hallucinated / mentioned objects. CHAIR-s: responses with at
/// least one hallucinated object / responses. Distinct tags per response.
inline ChairResult chair(const std::vector<TaggedResponse>& responses, const AnnotationMap& truth) {
  detail::require_annotations(responses, truth);
  ChairResult r;
  for (const auto& resp : responses) {
    const auto& present = truth.at(resp.sample_id).present_tags;
    std::size_t hallucinated = 0;
    for (const auto& tag : resp.objects.tags) {
      if (!present.count(tag)) ++hallucinated;
    }
    r.n_objects += resp.objects.tags.size();
    r.n_hallucinated_objects += hallucinated;
    ++r.n_responses;
    if (hallucinated > 0) ++r.n_hallucinated_responses;
  }
  r.chair_i = static_cast<double>(r.n_hallucinated_objects) / static_cast<double>(std::max<std::size_t>(r.n_objects, 1));
  r.chair_s = r.n_responses == 0 ? 0.0
                                 : static_cast<double>(r.n_hallucinated_responses) / static_cast<double>(r.n_responses);
  return r;
}

// ---------------------------------------------------------------------------
// Hellinger distance / PDM-H

/// H(p, q) = sqrt(sum (sqrt p_i - sqrt q_i)^2 / 2), clamped to [0, 1].
inline double hellinger(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InputError("hellinger: dimension mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = std::sqrt(p[i]) - std::sqrt(q[i]);
    sum += d * d;
  }
  return std::clamp(std::sqrt(0.5 * sum), 0.0, 1.0);
}

namespace detail {
inline std::map<std::string, double> checked_masses(const TokenDistribution& d, const char* which) {
  std::map<std::string, double> out;
  double total = 0.0;
  for (const auto& [tok, p] : d.support) {
    if (!std::isfinite(p) || p < 0.0) throw InputError(std::string("pdm_h: invalid probability in ") + which);
    if (!out.emplace(tok, p).second) {
      throw InputError(std::string("pdm_h: duplicate token '") + tok + "' in " + which);
    }
    total += p;
  }
  if (!(total > 0.0)) throw InputError(std::string("pdm_h: ") + which + " has no probability mass");
  return out;
}
}  // namespace detail

/// Aligns both distributions on the union of their supports (missing
/// tokens get probability 0), renormalizes each over that union, and
/// returns their Hellinger distance. Tokens are visited in sorted order,
/// so the result does not depend on support order.
inline double pdm_h(const TokenDistribution& with_image, const TokenDistribution& text_only) {
  const auto p = detail::checked_masses(with_image, "image-conditioned distribution");
  const auto q = detail::checked_masses(text_only, "text-only distribution");
  std::map<std::string, std::pair<double, double>> joint;
  for (const auto& [tok, v] : p) joint[tok].first = v;
  for (const auto& [tok, v] : q) joint[tok].second = v;
  double sp = 0.0, sq = 0.0;
  for (const auto& [_, pq] : joint) {
    sp += pq.first;
    sq += pq.second;
  }
  std::vector<double> pv, qv;
  pv.reserve(joint.size());
  qv.reserve(joint.size());
  for (const auto& [_, pq] : joint) {
    pv.push_back(pq.first / sp);
    qv.push_back(pq.second / sq);
  }
  return hellinger(pv, qv);
}

/// PDM-H at every step j of `tokens`: distance between the next-token
/// distributions given (image, prompt + y_<j) and (prompt + y_<j). A step
/// whose backend call fails is logged and left empty.
inline std::vector<std::optional<double>> pdm_h_curve(const Backend& backend, std::string_view prompt,
                                                      const std::optional<std::string>& image_ref,
                                                      const std::vector<std::string>& tokens, std::size_t top_k) {
  std::vector<std::optional<double>> curve;
  curve.reserve(tokens.size());
  std::string context(prompt);
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    try {
      const auto with_image = backend.next_token_distribution(context, image_ref, top_k);
      const auto text_only = backend.next_token_distribution(context, std::nullopt, top_k);
      curve.emplace_back(pdm_h(with_image, text_only));
    } catch (const BackendError& e) {
      log_warning("pdm-h step " + std::to_string(j + 1) + " skipped: " + e.what());
      curve.emplace_back(std::nullopt);
    }
    context += tokens[j];
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Positional hallucination profile

struct PositionalBin {
  double lower = 0.0;  // bins cover (lower, upper] of k / L
  double upper = 0.0;
  std::size_t sentences = 0;
  std::size_t hallucinated = 0;
  double rate = 0.0;
};

struct FlaggedResponse {
  std::size_t sentence_count = 0;
  std::vector<bool> flags;  // one per sentence
};

/// Sentence k of L falls in bin ceil(k * B / L) - 1; rate is the flagged
/// share of sentences landing in each bin.
inline std::vector<PositionalBin> positional_profile(const std::vector<FlaggedResponse>& items,
                                                     std::size_t bin_count = 10) {
  if (bin_count == 0) throw InputError("bin count must be >= 1");
  std::vector<PositionalBin> bins(bin_count);
  for (std::size_t b = 0; b < bin_count; ++b) {
    bins[b].lower = static_cast<double>(b) / static_cast<double>(bin_count);
    bins[b].upper = static_cast<double>(b + 1) / static_cast<double>(bin_count);
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    if (item.flags.size() != item.sentence_count || item.sentence_count == 0) {
      throw InputError("response " + std::to_string(i) + ": flag count does not match sentence count");
    }
    const std::size_t L = item.sentence_count;
    for (std::size_t k = 1; k <= L; ++k) {
      const std::size_t b = (k * bin_count + L - 1) / L - 1;
      ++bins[b].sentences;
      if (item.flags[k - 1]) ++bins[b].hallucinated;
    }
  }
  for (auto& b : bins) {
    b.rate = b.sentences == 0 ? 0.0 : static_cast<double>(b.hallucinated) / static_cast<double>(b.sentences);
  }
  return bins;
}

/// Per-sentence flags: a sentence is flagged when it mentions a tag absent
/// from the annotation.
inline FlaggedResponse flag_sentences(const ObjectTagSet& objects, const GroundTruthAnnotation& truth) {
  FlaggedResponse f;
  f.sentence_count = objects.per_sentence.size();
  for (const auto& tags : objects.per_sentence) {
    bool flagged = false;
    for (const auto& t : tags) flagged = flagged || !truth.present_tags.count(t);
    f.flags.push_back(flagged);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Co-occurrence diagnostics

struct CooccurStats {
  std::size_t hallucinated = 0;
  std::size_t cooccurring = 0;  // co-occurs with at least one correct tag
  std::size_t top1 = 0;
  std::size_t top5 = 0;
  double cooccurring_fraction = 0.0;
  double top1_fraction = 0.0;
  double top5_fraction = 0.0;
};

/// Ranks each hallucinated tag against the response's correct tags.
inline CooccurStats cooccur_stats(const std::vector<TaggedResponse>& responses, const AnnotationMap& truth,
                                  const CooccurrenceGraph& graph) {
  detail::require_annotations(responses, truth);
  CooccurStats s;
  for (const auto& resp : responses) {
    const auto& present = truth.at(resp.sample_id).present_tags;
    TagSet correct, hallucinated;
    for (const auto& tag : resp.objects.tags) (present.count(tag) ? correct : hallucinated).insert(tag);
    for (const auto& tag : hallucinated) {
      ++s.hallucinated;
      const auto rank = cooccurrence_rank(graph, correct, tag);
      if (!rank) continue;
      ++s.cooccurring;
      if (*rank <= 1) ++s.top1;
      if (*rank <= 5) ++s.top5;
    }
  }
  if (s.hallucinated > 0) {
    const double n = static_cast<double>(s.hallucinated);
    s.cooccurring_fraction = static_cast<double>(s.cooccurring) / n;
    s.top1_fraction = static_cast<double>(s.top1) / n;
    s.top5_fraction = static_cast<double>(s.top5) / n;
  }
  return s;
}

}  // namespace selfinject
