#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "selfinject/common.hpp"
#include "selfinject/toy_model.hpp"

namespace selfinject {

struct GenerationRequest {
  std::string prompt;
  std::optional<std::string> image_ref;
  int max_tokens = 64;
  double temperature = 0.0;
  std::vector<std::string> stop_sequences;
  std::optional<std::uint64_t> seed;

  void validate() const {
    if (max_tokens < 1) throw InputError("max_tokens must be >= 1");
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw InputError("temperature must be >= 0");
  }
};

using TokenLogprobs = std::vector<std::pair<std::string, double>>;

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
  TokenLogprobs top;  // descending logprob, always contains `token`

  friend bool operator==(const TokenLogprob&, const TokenLogprob&) = default;
};

enum class FinishReason { kStop, kLength, kError };

inline std::string_view to_string(FinishReason r) {
  switch (r) {
    case FinishReason::kStop: return "stop";
    case FinishReason::kLength: return "length";
    case FinishReason::kError: return "error";
  }
  return "error";
}

/// `text` is empty only for kError or when a stop sequence matched at the
/// very first position.
struct GenerationResult {
  std::string text;
  std::optional<std::vector<TokenLogprob>> token_logprobs;
  FinishReason finish_reason = FinishReason::kStop;

  friend bool operator==(const GenerationResult&, const GenerationResult&) = default;
};

struct SequenceScore {
  double total_logprob = 0.0;
  std::vector<double> per_token;
};

/// Discrete distribution over tokens.
struct TokenDistribution {
  TokenLogprobs support;  // (token, probability)
  bool renormalized = false;

  /// Keeps the `top_k` most likely entries of `logprobs` (ties broken by
  /// input order) and renormalizes their probabilities to sum to one.
  static TokenDistribution from_logprobs(TokenLogprobs logprobs, std::size_t top_k) {
    if (top_k == 0) throw InputError("top_k must be >= 1");
    if (logprobs.empty()) throw BackendError(BackendError::Kind::kCapability, "empty next-token distribution");
    std::stable_sort(logprobs.begin(), logprobs.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (logprobs.size() > top_k) logprobs.resize(top_k);
    const double mx = logprobs.front().second;
    double sum = 0.0;
    for (const auto& [_, lp] : logprobs) sum += std::exp(lp - mx);
    TokenDistribution d;
    d.renormalized = true;
    for (auto& [tok, lp] : logprobs) d.support.emplace_back(std::move(tok), std::exp(lp - mx) / sum);
    return d;
  }
};

/// Uniform interface over text generators. Implementations must be safe
/// to call concurrently from several workers.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual GenerationResult generate(const GenerationRequest& request) const = 0;

  virtual SequenceScore score_sequence(std::string_view prompt, const std::optional<std::string>& image_ref,
                                       std::string_view continuation) const = 0;

  virtual TokenDistribution next_token_distribution(std::string_view prompt,
                                                    const std::optional<std::string>& image_ref,
                                                    std::size_t top_k) const = 0;

  /// Splits text into the backend's tokens (used to step through a
  /// response token by token).
  virtual std::vector<std::string> tokenize(std::string_view text) const = 0;

  [[nodiscard]] virtual std::string name() const = 0;
};

namespace detail {

// Earliest stop match; returns the cut position or npos.
inline std::size_t find_stop(std::string_view text, const std::vector<std::string>& stops) {
  std::size_t cut = std::string_view::npos;
  for (const auto& s : stops) {
    if (s.empty()) continue;
    auto pos = text.find(s);
    if (pos != std::string_view::npos && pos < cut) cut = pos;
  }
  return cut;
}

inline std::uint64_t request_seed(const GenerationRequest& req) {
  std::uint64_t h = splitmix64(req.seed.value_or(0));
  h = splitmix64(h ^ fnv1a64(req.prompt));
  if (req.image_ref) h = splitmix64(h ^ fnv1a64(*req.image_ref) ^ 0x1ULL);
  return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Backend over a character-level ToyLanguageModel. Rows can be overridden
/// per image reference to model image-conditional behaviour; without an
/// override the image is ignored. Configure before sharing.
class ToyBackend : public Backend {
 public:
  static constexpr std::size_t kReportedTopK = 5;

  explicit ToyBackend(ToyLanguageModel text_model) : text_model_(std::move(text_model)) {}

  /// Replaces row `row` with `logits` when conditioning on `image_ref`.
  void override_image_row(const std::string& image_ref, std::size_t row, std::span<const double> logits) {
    if (logits.size() != text_model_.vocab_size()) throw InputError("override row has the wrong width");
    auto [it, _] = image_models_.try_emplace(image_ref, text_model_);
    auto dst = it->second.row(row);
    std::copy(logits.begin(), logits.end(), dst.begin());
  }

  [[nodiscard]] const ToyLanguageModel& model_for(const std::optional<std::string>& image_ref) const {
    if (image_ref) {
      if (auto it = image_models_.find(*image_ref); it != image_models_.end()) return it->second;
    }
    return text_model_;
  }

  [[nodiscard]] const ToyLanguageModel& text_model() const noexcept { return text_model_; }

  std::vector<std::string> tokenize(std::string_view text) const override {
    auto tokens = char_tokens(text);
    for (const auto& t : tokens) {
      if (!text_model_.has_token(t)) throw InputError("text contains a character outside the toy vocabulary");
    }
    return tokens;
  }

  GenerationResult generate(const GenerationRequest& req) const override {
    req.validate();
    const auto& model = model_for(req.image_ref);
    const auto ctx_tokens = tokenize(req.prompt);
    const auto ctx = model.ids_of(ctx_tokens);
    std::size_t prev = model.context_row(ctx);
    const std::optional<TokenId> unk =
        model.has_token(kUnknownToken) ? std::optional<TokenId>(model.id_of(kUnknownToken)) : std::nullopt;

    Rng rng(detail::request_seed(req));
    GenerationResult result;
    result.token_logprobs.emplace();
    result.finish_reason = FinishReason::kLength;
    for (int step = 0; step < req.max_tokens; ++step) {
      const auto lps = model.row_log_probs(prev);
      const TokenId next = req.temperature == 0.0 ? argmax(lps, unk) : sample(lps, req.temperature, unk, rng);
      result.text += model.token(next);
      result.token_logprobs->push_back(describe(model, lps, next));
      prev = next;
      if (auto cut = detail::find_stop(result.text, req.stop_sequences); cut != std::string::npos) {
        result.text.resize(cut);
        result.token_logprobs->resize(cut);  // one character per token
        result.finish_reason = FinishReason::kStop;
        break;
      }
    }
    return result;
  }

  SequenceScore score_sequence(std::string_view prompt, const std::optional<std::string>& image_ref,
                               std::string_view continuation) const override {
    const auto& model = model_for(image_ref);
    const auto ctx = model.ids_of(tokenize(prompt));
    const auto cont = model.ids_of(tokenize(continuation));
    if (cont.empty()) throw InputError("continuation must contain at least one token");
    SequenceScore score;
    score.per_token = toy_token_logprobs(model, ctx, cont);
    for (double lp : score.per_token) score.total_logprob += lp;
    return score;
  }

  TokenDistribution next_token_distribution(std::string_view prompt, const std::optional<std::string>& image_ref,
                                            std::size_t top_k) const override {
    const auto& model = model_for(image_ref);
    const auto ctx = model.ids_of(tokenize(prompt));
    const auto lps = model.row_log_probs(model.context_row(ctx));
    TokenLogprobs entries;
    entries.reserve(lps.size());
    for (TokenId i = 0; i < lps.size(); ++i) entries.emplace_back(model.token(i), lps[i]);
    return TokenDistribution::from_logprobs(std::move(entries), top_k);
  }

  /// Per-token logprob records for `text` following `prompt`.
  [[nodiscard]] std::vector<TokenLogprob> annotate(std::string_view prompt, const std::optional<std::string>& image_ref,
                                                   std::string_view text) const {
    const auto& model = model_for(image_ref);
    const auto ctx = model.ids_of(tokenize(prompt));
    const auto cont = model.ids_of(tokenize(text));
    std::vector<TokenLogprob> out;
    std::size_t prev = model.context_row(ctx);
    for (TokenId next : cont) {
      out.push_back(describe(model, model.row_log_probs(prev), next));
      prev = next;
    }
    return out;
  }

  [[nodiscard]] std::string name() const override { return "toy"; }

 private:
  static TokenId argmax(const std::vector<double>& lps, std::optional<TokenId> skip) {
    TokenId best = lps.size();
    for (TokenId i = 0; i < lps.size(); ++i) {
      if (skip && *skip == i) continue;
      if (best == lps.size() || lps[i] > lps[best]) best = i;
    }
    return best;
  }

  static TokenId sample(const std::vector<double>& lps, double temperature, std::optional<TokenId> skip, Rng& rng) {
    std::vector<double> weights(lps.size(), 0.0);
    double mx = -std::numeric_limits<double>::infinity();
    for (TokenId i = 0; i < lps.size(); ++i) {
      if (!(skip && *skip == i)) mx = std::max(mx, lps[i] / temperature);
    }
    double total = 0.0;
    for (TokenId i = 0; i < lps.size(); ++i) {
      if (skip && *skip == i) continue;
      weights[i] = std::exp(lps[i] / temperature - mx);
      total += weights[i];
    }
    double u = rng.uniform() * total;
    TokenId last = 0;
    for (TokenId i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      last = i;
      if (u < weights[i]) return i;
      u -= weights[i];
    }
    return last;
  }

  static TokenLogprob describe(const ToyLanguageModel& model, const std::vector<double>& lps, TokenId chosen) {
    std::vector<TokenId> order(lps.size());
    for (TokenId i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return lps[a] > lps[b]; });
    TokenLogprob tl{model.token(chosen), lps[chosen], {}};
    bool has_chosen = false;
    for (std::size_t i = 0; i < std::min(kReportedTopK, order.size()); ++i) {
      tl.top.emplace_back(model.token(order[i]), lps[order[i]]);
      has_chosen = has_chosen || order[i] == chosen;
    }
    if (!has_chosen) {
      tl.top.emplace_back(model.token(chosen), lps[chosen]);
      std::stable_sort(tl.top.begin(), tl.top.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    }
    return tl;
  }

  ToyLanguageModel text_model_;
  std::map<std::string, ToyLanguageModel> image_models_;
};

/// Toy backend from JSON: {"vocabulary": [...], "logits": [[...], ...],
/// "image_rows": [{"image_ref", "row", "logits"}]}. `logits` holds one row
/// per token followed by the start row; omitted, every row is uniform.
/// An image row names its conditioning token, or "<start>".
inline ToyBackend parse_toy_backend(std::string_view text, const std::string& source = "<memory>") {
  using Json = nlohmann::json;
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw InputError(source + ": malformed JSON: " + e.what());
  }
  try {
    ToyLanguageModel model(j.at("vocabulary").get<std::vector<std::string>>());
    const std::size_t v = model.vocab_size();
    auto row_of = [&](const std::string& name) {
      return name == "<start>" ? model.start_row() : model.id_of(name);
    };
    auto check_width = [&](const std::vector<double>& row) {
      if (row.size() != v) throw InputError(source + ": logit row has " + std::to_string(row.size()) +
                                            " entries, expected " + std::to_string(v));
      for (double x : row) {
        if (!std::isfinite(x)) throw InputError(source + ": non-finite logit");
      }
    };
    if (j.contains("logits")) {
      const auto rows = j.at("logits").get<std::vector<std::vector<double>>>();
      if (rows.size() != model.row_count()) {
        throw InputError(source + ": expected " + std::to_string(model.row_count()) + " logit rows");
      }
      for (std::size_t r = 0; r < rows.size(); ++r) {
        check_width(rows[r]);
        std::copy(rows[r].begin(), rows[r].end(), model.row(r).begin());
      }
    }
    ToyBackend backend(model);
    if (j.contains("image_rows")) {
      for (const auto& o : j.at("image_rows")) {
        const auto logits = o.at("logits").get<std::vector<double>>();
        check_width(logits);
        backend.override_image_row(o.at("image_ref").get<std::string>(), row_of(o.at("row").get<std::string>()),
                                   logits);
      }
    }
    return backend;
  } catch (const Json::exception& e) {
    throw InputError(source + ": bad toy model: " + e.what());
  }
}

inline ToyBackend load_toy_backend(const std::string& path) { return parse_toy_backend(read_file(path), path); }

// ---------------------------------------------------------------------------

struct SceneArchetype {
  std::string name;
  std::vector<std::string> objects;  // canonical tags
};

inline const std::vector<SceneArchetype>& default_scenes() {
  static const std::vector<SceneArchetype> scenes = {
      {"kitchen", {"table", "chair", "cup", "bowl", "oven", "refrigerator", "sink", "knife", "bottle"}},
      {"living room", {"couch", "table", "chair", "television", "lamp", "book", "vase", "clock"}},
      {"city street", {"car", "bus", "person", "traffic light", "bicycle", "truck", "bench", "stop sign"}},
      {"park", {"dog", "frisbee", "tree", "bench", "person", "kite", "ball"}},
      {"beach", {"surfboard", "umbrella", "person", "boat", "kite", "bird"}},
      {"office", {"laptop", "keyboard", "monitor", "chair", "cup", "book", "phone"}},
  };
  return scenes;
}

/// Deterministic stand-in for an LVLM. Image-conditioned requests produce a
/// multi-sentence scene description; text-only requests produce a short
/// continuation phrase. Scores come from a character bigram model fitted to
/// the description templates, so the image is ignored when scoring and
/// text that does not read like a description scores lower.
class MockBackend : public Backend {
 public:
  explicit MockBackend(std::vector<SceneArchetype> scenes = default_scenes())
      : scenes_(std::move(scenes)), scorer_(fit_scorer(scenes_)) {}

  GenerationResult generate(const GenerationRequest& req) const override {
    req.validate();
    Rng rng(detail::request_seed(req));
    std::string text = req.image_ref ? describe_scene(rng) : continuation(rng);
    GenerationResult result;
    result.finish_reason = FinishReason::kStop;
    if (auto cut = detail::find_stop(text, req.stop_sequences); cut != std::string::npos) text.resize(cut);
    if (text.size() > static_cast<std::size_t>(req.max_tokens)) {
      text.resize(static_cast<std::size_t>(req.max_tokens));
      result.finish_reason = FinishReason::kLength;
    }
    result.text = std::move(text);
    result.token_logprobs = scorer_.annotate(req.prompt, std::nullopt, result.text);
    return result;
  }

  SequenceScore score_sequence(std::string_view prompt, const std::optional<std::string>&,
                               std::string_view continuation) const override {
    return scorer_.score_sequence(prompt, std::nullopt, continuation);
  }

  TokenDistribution next_token_distribution(std::string_view prompt, const std::optional<std::string>&,
                                            std::size_t top_k) const override {
    return scorer_.next_token_distribution(prompt, std::nullopt, top_k);
  }

  std::vector<std::string> tokenize(std::string_view text) const override { return char_tokens(text); }

  [[nodiscard]] std::string name() const override { return "mock"; }

  [[nodiscard]] const ToyLanguageModel& scoring_model() const noexcept { return scorer_.text_model(); }
  [[nodiscard]] const std::vector<SceneArchetype>& scenes() const noexcept { return scenes_; }

 private:
  static const std::vector<std::string>& object_patterns() {
    static const std::vector<std::string> p = {"A {} rests {}.", "We notice a {} {}.", "One {} stands {}.",
                                               "Next, a {} lies {}."};
    return p;
  }
  static const std::vector<std::string>& locations() {
    static const std::vector<std::string> l = {"on the left side", "near the middle",   "on the right side",
                                               "toward the back",  "close to the front", "beside the others"};
    return l;
  }
  static const std::vector<std::string>& closings() {
    static const std::vector<std::string> c = {"The overall mood feels calm.", "The lighting seems soft and even.",
                                               "Everything looks neat and tidy."};
    return c;
  }
  static const std::vector<std::string>& continuations() {
    static const std::vector<std::string> c = {"standing quietly near the far edge.", "resting beside the other items.",
                                               "placed close to the corner.", "visible under soft natural light.",
                                               "partly hidden behind something."};
    return c;
  }

  static std::string fill(std::string_view pattern, std::string_view a, std::string_view b) {
    std::string out(pattern);
    auto pos = out.find("{}");
    out.replace(pos, 2, a);
    pos = out.find("{}", pos + a.size());
    out.replace(pos, 2, b);
    return out;
  }

  static std::string opening(std::string_view scene, std::string_view object) {
    return "The image shows a " + std::string(scene) + " with a " + std::string(object) + ".";
  }

  std::string describe_scene(Rng& rng) const {
    const auto& scene = scenes_.at(rng.below(scenes_.size()));
    std::vector<std::string> pool = scene.objects;
    const std::size_t extra = std::min<std::size_t>(5, pool.size() - 1);
    const std::size_t count = 2 + rng.below(extra);
    for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    std::vector<std::string> sentences{opening(scene.name, pool[0])};
    for (std::size_t i = 1; i < count; ++i) {
      const auto& pattern = object_patterns()[rng.below(object_patterns().size())];
      sentences.push_back(fill(pattern, pool[i], locations()[rng.below(locations().size())]));
    }
    if (rng.below(2) == 0) sentences.push_back(closings()[rng.below(closings().size())]);
    return join(sentences, " ");
  }

  static std::string continuation(Rng& rng) { return continuations()[rng.below(continuations().size())]; }

  // Character bigram counts over every sentence the description grammar can
  // produce, smoothed with a small pseudo-count.
  static ToyBackend fit_scorer(const std::vector<SceneArchetype>& scenes) {
    constexpr double kPseudoCount = 0.05;
    ToyLanguageModel model(char_vocabulary());
    std::vector<double> counts(model.row_count() * model.vocab_size(), 0.0);
    auto count_text = [&](const std::string& text) {
      std::size_t prev = model.start_row();
      for (const auto& tok : char_tokens(text)) {
        const TokenId id = model.id_of(tok);
        counts[prev * model.vocab_size() + id] += 1.0;
        prev = id;
      }
    };
    for (const auto& scene : scenes) {
      for (const auto& obj : scene.objects) {
        count_text(opening(scene.name, obj));
        for (const auto& p : object_patterns()) {
          for (const auto& loc : locations()) count_text(fill(p, obj, loc) + " ");
        }
      }
    }
    for (const auto& c : closings()) count_text(c + " ");
    auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i] = std::log(counts[i] + kPseudoCount);
    return ToyBackend(std::move(model));
  }

  std::vector<SceneArchetype> scenes_;
  ToyBackend scorer_;
};

}  // namespace selfinject
