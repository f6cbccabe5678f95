#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "selfinject/common.hpp"

namespace selfinject {

using TokenId = std::size_t;

/// Tabular bigram language model. Row `prev` holds the logits of the next
/// token given the previous one; one extra row (start_row()) conditions the
/// first token of an empty context.
class ToyLanguageModel {
 public:
  ToyLanguageModel() = default;

  explicit ToyLanguageModel(std::vector<std::string> vocabulary)
      : vocabulary_(std::move(vocabulary)), logits_((vocabulary_.size() + 1) * vocabulary_.size(), 0.0) {
    if (vocabulary_.empty()) throw InputError("toy model vocabulary is empty");
    for (TokenId i = 0; i < vocabulary_.size(); ++i) {
      if (!index_.emplace(vocabulary_[i], i).second) {
        throw InputError("duplicate token '" + vocabulary_[i] + "' in toy vocabulary");
      }
    }
  }

  [[nodiscard]] std::size_t vocab_size() const noexcept { return vocabulary_.size(); }
  [[nodiscard]] std::size_t row_count() const noexcept { return vocabulary_.size() + 1; }
  [[nodiscard]] std::size_t start_row() const noexcept { return vocabulary_.size(); }
  [[nodiscard]] const std::vector<std::string>& vocabulary() const noexcept { return vocabulary_; }
  [[nodiscard]] const std::string& token(TokenId id) const { return vocabulary_.at(id); }

  [[nodiscard]] TokenId id_of(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) throw InputError("unknown token '" + std::string(token) + "'");
    return it->second;
  }
  [[nodiscard]] bool has_token(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  [[nodiscard]] std::vector<TokenId> ids_of(std::span<const std::string> tokens) const {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id_of(t));
    return ids;
  }

  double& logit(std::size_t row, TokenId next) { return logits_.at(row * vocab_size() + next); }
  [[nodiscard]] double logit(std::size_t row, TokenId next) const { return logits_.at(row * vocab_size() + next); }

  [[nodiscard]] std::span<double> row(std::size_t r) {
    return std::span<double>(logits_).subspan(r * vocab_size(), vocab_size());
  }
  [[nodiscard]] std::span<const double> row(std::size_t r) const {
    return std::span<const double>(logits_).subspan(r * vocab_size(), vocab_size());
  }

  [[nodiscard]] std::vector<double>& parameters() noexcept { return logits_; }
  [[nodiscard]] const std::vector<double>& parameters() const noexcept { return logits_; }

  /// Row used to predict the token after `context`.
  [[nodiscard]] std::size_t context_row(std::span<const TokenId> context) const noexcept {
    return context.empty() ? start_row() : context.back();
  }

  /// Numerically stable log-softmax of one row.
  [[nodiscard]] std::vector<double> row_log_probs(std::size_t r) const {
    const auto logits = row(r);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
  }

  [[nodiscard]] std::vector<double> row_probs(std::size_t r) const {
    auto lp = row_log_probs(r);
    for (double& v : lp) v = std::exp(v);
    return lp;
  }

  [[nodiscard]] double log_prob(std::size_t r, TokenId next) const { return row_log_probs(r).at(next); }

  friend bool operator==(const ToyLanguageModel& a, const ToyLanguageModel& b) {
    return a.vocabulary_ == b.vocabulary_ && a.logits_ == b.logits_;
  }

 private:
  std::vector<std::string> vocabulary_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<double> logits_;
};

/// Per-token log-probabilities of `continuation` following `context`.
inline std::vector<double> toy_token_logprobs(const ToyLanguageModel& model, std::span<const TokenId> context,
                                              std::span<const TokenId> continuation) {
  std::vector<double> out;
  out.reserve(continuation.size());
  std::size_t prev = model.context_row(context);
  for (TokenId next : continuation) {
    if (next >= model.vocab_size()) throw InputError("token id out of range");
    out.push_back(model.log_prob(prev, next));
    prev = next;
  }
  return out;
}

inline double toy_sequence_logprob(const ToyLanguageModel& model, std::span<const TokenId> context,
                                   std::span<const TokenId> continuation) {
  if (continuation.empty()) throw InputError("continuation must contain at least one token");
  double total = 0.0;
  for (double lp : toy_token_logprobs(model, context, continuation)) total += lp;
  return total;
}

inline double toy_sequence_logprob(const ToyLanguageModel& model, std::span<const std::string> context,
                                   std::span<const std::string> continuation) {
  const auto ctx = model.ids_of(context);
  const auto cont = model.ids_of(continuation);
  return toy_sequence_logprob(model, std::span<const TokenId>(ctx), std::span<const TokenId>(cont));
}

// ---------------------------------------------------------------------------
// Character tokenizer over printable ASCII; any other byte becomes "<unk>".

inline constexpr std::string_view kUnknownToken = "<unk>";

inline std::vector<std::string> char_vocabulary() {
  std::vector<std::string> vocab;
  for (char c = 32; c < 127; ++c) vocab.emplace_back(1, c);
  vocab.emplace_back(kUnknownToken);
  return vocab;
}

inline std::vector<std::string> char_tokens(std::string_view text) {
  std::vector<std::string> out;
  out.reserve(text.size());
  for (char c : text) {
    if (c >= 32 && c < 127) {
      out.emplace_back(1, c);
    } else {
      out.emplace_back(kUnknownToken);
    }
  }
  return out;
}

}  // namespace selfinject
