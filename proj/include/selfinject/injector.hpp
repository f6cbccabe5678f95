#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "selfinject/backend.hpp"
#include "selfinject/common.hpp"
#include "selfinject/cooccurrence.hpp"
#include "selfinject/lexicon.hpp"

namespace selfinject {

inline constexpr std::string_view kHalObjectPlaceholder = "<hal-object>";

/// Sentence opener with exactly one `<hal-object>` slot.
class GuidingTemplate {
 public:
  GuidingTemplate(std::string pattern, int id) : pattern_(std::move(pattern)), id_(id) {
    const auto first = pattern_.find(kHalObjectPlaceholder);
    if (first == std::string::npos ||
        pattern_.find(kHalObjectPlaceholder, first + kHalObjectPlaceholder.size()) != std::string::npos) {
      throw InputError("template must contain exactly one " + std::string(kHalObjectPlaceholder) + ": '" +
                       pattern_ + "'");
    }
  }

  [[nodiscard]] const std::string& pattern() const noexcept { return pattern_; }
  [[nodiscard]] int id() const noexcept { return id_; }

  /// Fills the slot and capitalizes the first character.
  [[nodiscard]] std::string instantiate(std::string_view object) const {
    std::string out = pattern_;
    out.replace(out.find(kHalObjectPlaceholder), kHalObjectPlaceholder.size(), object);
    if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
    return out;
  }

 private:
  std::string pattern_;
  int id_;
};

inline const std::vector<std::string>& default_template_patterns() {
  static const std::vector<std::string> patterns = {
      "A <hal-object> appears",
      "There is a <hal-object>",
      "There are <hal-object>",
      "<hal-object> can also be seen",
      "<hal-object> can be seen",
      "You can see a <hal-object>",
      "There are multiple <hal-object>",
      "Several <hal-object> can be observed",
      "Some <hal-object> are present",
      "Among the items, there is a <hal-object>",
      "In the image, there is a <hal-object>",
      "On the right, there is a <hal-object>",
      "On the left, a <hal-object> is present",
      "In the center, you see a <hal-object>",
      "At the top, there is a <hal-object>",
      "At the bottom, a <hal-object> is visible",
      "In the background, a <hal-object> can be seen",
      "In the foreground, there is a <hal-object>",
      "To the side, a <hal-object> is located",
      "Near the edge, a <hal-object> appears",
      "Close to the center, a <hal-object> is seen",
  };
  return patterns;
}

inline std::vector<GuidingTemplate> default_templates() {
  std::vector<GuidingTemplate> out;
  const auto& patterns = default_template_patterns();
  for (std::size_t i = 0; i < patterns.size(); ++i) out.emplace_back(patterns[i], static_cast<int>(i));
  return out;
}

/// One pattern per line; blank lines and lines starting with `#` skipped.
/// Ids follow the order of the patterns in the file, starting at 0.
inline std::vector<GuidingTemplate> parse_templates(std::string_view text) {
  std::vector<GuidingTemplate> out;
  for (const auto& raw : split(text, '\n')) {
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    out.emplace_back(std::string(line), static_cast<int>(out.size()));
  }
  if (out.empty()) throw InputError("template list is empty");
  return out;
}

inline std::vector<GuidingTemplate> load_templates(const std::string& path) { return parse_templates(read_file(path)); }

// ---------------------------------------------------------------------------
// Weighted positional sampling.

/// w_k = 1 + (k - 1) / L for k = 1..L, computed as (L + k - 1) / L so each
/// weight is the correctly rounded value of the exact fraction.
inline std::vector<double> sentence_weights(std::size_t sentence_count) {
  if (sentence_count == 0) throw InputError("sentence count must be >= 1");
  std::vector<double> w(sentence_count);
  for (std::size_t k = 1; k <= sentence_count; ++k) {
    w[k - 1] = static_cast<double>(sentence_count + k - 1) / static_cast<double>(sentence_count);
  }
  return w;
}

/// round(rho * L), half away from zero. The 1e-9 slack keeps decimal rates
/// such as 0.15 * 10 on the upper side of the half-way point.
inline std::size_t replace_count(std::size_t sentence_count, double rho) {
  return static_cast<std::size_t>(std::floor(rho * static_cast<double>(sentence_count) + 0.5 + 1e-9));
}

inline void check_rate(double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) throw InputError("injection rate must lie in (0, 1], got " + std::to_string(rho));
}

enum class DiscardReason { kZeroCount, kSingleSentence, kExhaustedCandidates, kBackendFailure, kInvalidCompletion };

inline std::string_view to_string(DiscardReason r) {
  switch (r) {
    case DiscardReason::kZeroCount: return "zero-count";
    case DiscardReason::kSingleSentence: return "single-sentence";
    case DiscardReason::kExhaustedCandidates: return "exhausted-candidates";
    case DiscardReason::kBackendFailure: return "backend-failure";
    case DiscardReason::kInvalidCompletion: return "invalid-completion";
  }
  return "unknown";
}

struct Discard {
  DiscardReason reason;
  std::string detail;
};

/// Either a value or the reason the sample was dropped.
template <typename T>
using Outcome = std::variant<T, Discard>;

/// Draws round(rho * L) distinct 1-based sentence indices from {2..L},
/// successively and without replacement, each draw proportional to w_k over
/// the indices still available. Result is ascending.
inline Outcome<std::vector<std::size_t>> sample_replace_indices(std::size_t sentence_count, double rho, Rng& rng) {
  check_rate(rho);
  if (sentence_count == 0) throw InputError("sentence count must be >= 1");
  if (sentence_count == 1) return Discard{DiscardReason::kSingleSentence, "response has a single sentence"};
  std::size_t count = replace_count(sentence_count, rho);
  if (count == 0) return Discard{DiscardReason::kZeroCount, "round(rho * L) is zero"};
  count = std::min(count, sentence_count - 1);

  const auto weights = sentence_weights(sentence_count);
  std::vector<std::size_t> available;
  for (std::size_t k = 2; k <= sentence_count; ++k) available.push_back(k);
  std::vector<std::size_t> chosen;
  for (std::size_t draw = 0; draw < count; ++draw) {
    double total = 0.0;
    for (auto k : available) total += weights[k - 1];
    double u = rng.uniform() * total;
    std::size_t pick = available.size() - 1;
    for (std::size_t i = 0; i < available.size(); ++i) {
      const double w = weights[available[i] - 1];
      if (u < w) {
        pick = i;
        break;
      }
      u -= w;
    }
    chosen.push_back(available[pick]);
    available.erase(available.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

// ---------------------------------------------------------------------------
// Plans and pairs.

struct InjectionPlan {
  std::size_t sentence_count = 0;
  double rho = 0.0;
  std::vector<std::size_t> replace_indices;  // 1-based, ascending, never 1
  std::vector<int> template_ids;
  std::vector<std::string> objects;

  friend bool operator==(const InjectionPlan&, const InjectionPlan&) = default;
};

/// Samples indices, then for each index (ascending) queries the graph with
/// the tags of the sentences still holding original text (excluding the
/// one being replaced) as context, and the response's own tags plus the
/// objects already chosen as exclusions. A template is drawn uniformly per
/// index.
inline Outcome<InjectionPlan> build_injection_plan(const SegmentedResponse& y_plus, const ObjectTagSet& objects,
                                                   const CooccurrenceGraph& graph,
                                                   const std::vector<GuidingTemplate>& templates, double rho,
                                                   Rng& rng) {
  if (objects.per_sentence.size() != y_plus.size()) {
    throw InputError("object tags do not line up with the response sentences");
  }
  if (templates.empty()) throw InputError("template list is empty");
  auto indices = sample_replace_indices(y_plus.size(), rho, rng);
  if (auto* d = std::get_if<Discard>(&indices)) return *d;

  InjectionPlan plan;
  plan.sentence_count = y_plus.size();
  plan.rho = rho;
  plan.replace_indices = std::get<std::vector<std::size_t>>(std::move(indices));

  TagSet exclude = objects.tags;
  std::set<std::size_t> replaced;
  for (auto k : plan.replace_indices) {
    TagSet context;
    for (std::size_t j = 1; j <= y_plus.size(); ++j) {
      if (j == k || replaced.count(j)) continue;
      context.insert(objects.per_sentence[j - 1].begin(), objects.per_sentence[j - 1].end());
    }
    auto object = query_hallucinated_object(graph, context, exclude);
    if (!object) {
      return Discard{DiscardReason::kExhaustedCandidates, "no graph tag outside the response's objects"};
    }
    exclude.insert(*object);
    plan.objects.push_back(*object);
    plan.template_ids.push_back(templates[rng.below(templates.size())].id());
    replaced.insert(k);
  }
  return plan;
}

struct PreferencePair {
  std::string sample_id;
  std::string image_ref;
  std::string prompt;
  SegmentedResponse preferred;
  SegmentedResponse dispreferred;
  InjectionPlan plan;
  int iteration = 0;
};

struct CompletionOptions {
  int max_tokens = 48;
  double temperature = 0.0;
  std::uint64_t seed = 0;
};

/// Text-only prompt for completing the sentence at some index: the
/// descriptive prompt, a newline, the preceding sentences of the
/// dis-preferred response under construction, and the filled template.
inline std::string completion_prompt(std::string_view prompt, const std::vector<std::string>& previous,
                                     std::string_view template_text) {
  std::string out(prompt);
  out += '\n';
  if (!previous.empty()) {
    out += join(previous, " ");
    out += ' ';
  }
  out += template_text;
  return out;
}

/// Template text followed by the completion, ending in a terminator.
inline std::string compose_sentence(std::string_view template_text, std::string_view completion) {
  const std::string tail = collapse_whitespace(completion);
  std::string out(template_text);
  if (!tail.empty()) {
    if (tail.front() != ',' && tail.front() != ';' && tail.front() != ':') out += ' ';
    out += tail;
  }
  if (!detail::is_terminator(out.back())) out += '.';
  return out;
}

inline const GuidingTemplate& find_template(const std::vector<GuidingTemplate>& templates, int id) {
  for (const auto& t : templates) {
    if (t.id() == id) return t;
  }
  throw InputError("unknown template id " + std::to_string(id));
}

/// Replaces the planned sentences in ascending order. Each completion sees
/// the already-replaced sentences, not the originals, as its context.
inline Outcome<PreferencePair> inject(const InjectionPlan& plan, const SegmentedResponse& y_plus,
                                      std::string_view sample_id, std::string_view image_ref, std::string_view prompt,
                                      const std::vector<GuidingTemplate>& templates, const Backend& backend,
                                      const CompletionOptions& options = {},
                                      const AbbreviationList& abbreviations = default_abbreviations()) {
  if (plan.sentence_count != y_plus.size()) throw InputError("plan does not match the response length");
  PreferencePair pair;
  pair.sample_id = sample_id;
  pair.image_ref = image_ref;
  pair.prompt = prompt;
  pair.preferred = y_plus;
  pair.dispreferred = y_plus;
  pair.plan = plan;

  for (std::size_t n = 0; n < plan.replace_indices.size(); ++n) {
    const std::size_t k = plan.replace_indices[n];
    const std::string filled = find_template(templates, plan.template_ids[n]).instantiate(plan.objects[n]);
    const std::vector<std::string> previous(pair.dispreferred.sentences.begin(),
                                            pair.dispreferred.sentences.begin() + static_cast<std::ptrdiff_t>(k - 1));
    GenerationRequest req;
    req.prompt = completion_prompt(prompt, previous, filled);
    req.max_tokens = options.max_tokens;
    req.temperature = options.temperature;
    req.stop_sequences = {".", "!", "?"};
    req.seed = splitmix64(options.seed + k);
    GenerationResult result;
    try {
      result = backend.generate(req);
    } catch (const BackendError& e) {
      const std::string msg = "sample " + std::string(sample_id) + ": completion failed: " + e.what();
      log_warning(msg);
      return Discard{DiscardReason::kBackendFailure, msg};
    }
    if (result.finish_reason == FinishReason::kError) {
      return Discard{DiscardReason::kBackendFailure, "sample " + std::string(sample_id) + ": completion errored"};
    }
    const std::string sentence = compose_sentence(filled, result.text);
    const auto check = segment_sentences(sentence, abbreviations);
    if (check.size() != 1 || check.sentences[0] != sentence) {
      return Discard{DiscardReason::kInvalidCompletion,
                     "sample " + std::string(sample_id) + ": completion does not form one sentence"};
    }
    pair.dispreferred.sentences[k - 1] = sentence;
  }
  return pair;
}

/// Violated pair invariants, empty when the pair is well-formed. With a
/// lexicon, also checks that every injected object is absent from y+ and
/// mentioned in y-.
inline std::vector<std::string> pair_violations(const PreferencePair& pair, const std::vector<GuidingTemplate>& templates,
                                                const SynonymLexicon* lexicon = nullptr) {
  std::vector<std::string> out;
  const auto& plan = pair.plan;
  if (pair.preferred.size() != pair.dispreferred.size()) out.push_back("sentence counts differ");
  if (plan.replace_indices.empty()) out.push_back("plan has no replacements");
  if (plan.replace_indices.size() != plan.objects.size() || plan.objects.size() != plan.template_ids.size()) {
    out.push_back("plan field lengths differ");
    return out;
  }
  std::set<std::size_t> planned(plan.replace_indices.begin(), plan.replace_indices.end());
  if (planned.size() != plan.replace_indices.size()) out.push_back("duplicate indices");
  if (planned.count(1)) out.push_back("first sentence replaced");
  for (std::size_t k = 1; k <= std::min(pair.preferred.size(), pair.dispreferred.size()); ++k) {
    const bool differs = pair.preferred.sentences[k - 1] != pair.dispreferred.sentences[k - 1];
    if (differs != (planned.count(k) > 0)) out.push_back("sentence " + std::to_string(k) + " diff/plan mismatch");
  }
  for (std::size_t n = 0; n < plan.replace_indices.size(); ++n) {
    const auto k = plan.replace_indices[n];
    if (k == 0 || k > pair.dispreferred.size()) {
      out.push_back("index out of range");
      continue;
    }
    const auto filled = find_template(templates, plan.template_ids[n]).instantiate(plan.objects[n]);
    if (pair.dispreferred.sentences[k - 1].rfind(filled, 0) != 0) {
      out.push_back("sentence " + std::to_string(k) + " does not start with its template");
    }
  }
  if (lexicon) {
    const auto plus = parse_objects(pair.preferred, *lexicon);
    const auto minus = parse_objects(pair.dispreferred, *lexicon);
    for (const auto& obj : plan.objects) {
      if (plus.tags.count(obj)) out.push_back("object '" + obj + "' already in y+");
      if (!minus.tags.count(obj)) out.push_back("object '" + obj + "' not mentioned in y-");
    }
  }
  return out;
}

}  // namespace selfinject
