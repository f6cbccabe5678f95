#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "selfinject/common.hpp"
#include "selfinject/toy_model.hpp"

namespace selfinject {

/// Sequence log-probabilities entering the DPO objective.
struct DpoBatchItem {
  double logp_policy_plus = 0.0;
  double logp_policy_minus = 0.0;
  double logp_ref_plus = 0.0;
  double logp_ref_minus = 0.0;

  void validate() const {
    for (double v : {logp_policy_plus, logp_policy_minus, logp_ref_plus, logp_ref_minus}) {
      if (!std::isfinite(v) || v > 0.0) throw InputError("sequence log-probabilities must be finite and <= 0");
    }
  }
};

// Reference LVLM runs used beta 0.1, 1-3 epochs, learning rates 4e-7 / 1e-6
// and batch size 64 with LoRA. The toy defaults below are sized for the
// bigram model instead.
struct DpoConfig {
  double beta = 0.1;
  double learning_rate = 2.0;
  int epochs = 200;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("beta must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
  }
};

/// log(1 + e^x) without overflow.
inline double softplus(double x) noexcept { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct DpoLoss {
  double loss = 0.0;
  double margin = 0.0;
};

/// margin = beta * ((pi+ - ref+) - (pi- - ref-)), loss = -log sigmoid(margin).
inline DpoLoss dpo_loss(const DpoBatchItem& item, double beta) {
  item.validate();
  if (!(beta > 0.0)) throw InputError("beta must be positive");
  const double margin = beta * ((item.logp_policy_plus - item.logp_ref_plus) -
                                (item.logp_policy_minus - item.logp_ref_minus));
  return {softplus(-margin), margin};
}

// ---------------------------------------------------------------------------
// Toy-model DPO.

struct ToyPreferencePair {
  std::vector<std::string> context;
  std::vector<std::string> plus;
  std::vector<std::string> minus;
};

struct ToyDpoGradient {
  std::vector<double> logits;  // same layout as ToyLanguageModel::parameters()
  DpoLoss value;
};

namespace detail {

struct EncodedPair {
  std::vector<TokenId> context, plus, minus;
};

inline EncodedPair encode(const ToyLanguageModel& model, const ToyPreferencePair& pair) {
  if (pair.plus.empty() || pair.minus.empty()) throw InputError("preference sequences must be non-empty");
  return {model.ids_of(pair.context), model.ids_of(pair.plus), model.ids_of(pair.minus)};
}

// Adds scale * d(log p(continuation | context)) / d(logits) into grad.
inline void accumulate_logprob_gradient(const ToyLanguageModel& model, std::span<const TokenId> context,
                                        std::span<const TokenId> continuation, double scale,
                                        std::vector<double>& grad) {
  const std::size_t v = model.vocab_size();
  std::size_t prev = model.context_row(context);
  for (TokenId next : continuation) {
    const auto probs = model.row_probs(prev);
    for (std::size_t j = 0; j < v; ++j) grad[prev * v + j] -= scale * probs[j];
    grad[prev * v + next] += scale;
    prev = next;
  }
}

inline DpoLoss pair_loss(const ToyLanguageModel& policy, const ToyLanguageModel& reference, const EncodedPair& p,
                         double beta) {
  DpoBatchItem item{toy_sequence_logprob(policy, p.context, p.plus), toy_sequence_logprob(policy, p.context, p.minus),
                    toy_sequence_logprob(reference, p.context, p.plus),
                    toy_sequence_logprob(reference, p.context, p.minus)};
  return dpo_loss(item, beta);
}

inline ToyDpoGradient pair_gradient(const ToyLanguageModel& policy, const ToyLanguageModel& reference,
                                    const EncodedPair& p, double beta) {
  ToyDpoGradient g;
  g.value = pair_loss(policy, reference, p, beta);
  g.logits.assign(policy.parameters().size(), 0.0);
  // d(loss)/d(margin) = -sigmoid(-margin); margin is beta * (lp+ - lp-) + const.
  const double scale = -sigmoid(-g.value.margin) * beta;
  accumulate_logprob_gradient(policy, p.context, p.plus, scale, g.logits);
  accumulate_logprob_gradient(policy, p.context, p.minus, -scale, g.logits);
  return g;
}

}  // namespace detail

inline DpoLoss toy_dpo_loss(const ToyLanguageModel& policy, const ToyLanguageModel& reference,
                            const ToyPreferencePair& pair, double beta) {
  return detail::pair_loss(policy, reference, detail::encode(policy, pair), beta);
}

/// Analytic d(loss)/d(policy logits). The reference model is a constant.
inline ToyDpoGradient dpo_gradient(const ToyLanguageModel& policy, const ToyLanguageModel& reference,
                                   const ToyPreferencePair& pair, double beta) {
  if (policy.vocabulary() != reference.vocabulary()) throw InputError("policy and reference vocabularies differ");
  return detail::pair_gradient(policy, reference, detail::encode(policy, pair), beta);
}

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double mean_margin = 0.0;

  [[nodiscard]] nlohmann::ordered_json to_json() const {
    return {{"epoch", epoch}, {"mean_loss", mean_loss}, {"mean_margin", mean_margin}};
  }
};

struct ToyTrainingResult {
  ToyLanguageModel model;
  std::vector<EpochStats> stats;  // epoch 0 is the untrained model
};

/// Full-batch gradient descent on the mean DPO loss. The reference is a
/// frozen copy of the initial model. Pairs are reduced in dataset order so
/// results are bit-stable.
inline ToyTrainingResult train_toy_dpo(const ToyLanguageModel& initial, const std::vector<ToyPreferencePair>& dataset,
                                       const DpoConfig& config) {
  config.validate();
  if (dataset.empty()) throw InputError("toy DPO dataset is empty");
  const ToyLanguageModel reference = initial;
  ToyTrainingResult result{initial, {}};
  std::vector<detail::EncodedPair> encoded;
  encoded.reserve(dataset.size());
  for (const auto& p : dataset) encoded.push_back(detail::encode(initial, p));
  const double n = static_cast<double>(encoded.size());

  auto evaluate = [&](int epoch, std::vector<double>* grad) {
    EpochStats s{epoch, 0.0, 0.0};
    if (grad) grad->assign(result.model.parameters().size(), 0.0);
    for (const auto& p : encoded) {
      if (grad) {
        auto g = detail::pair_gradient(result.model, reference, p, config.beta);
        for (std::size_t i = 0; i < g.logits.size(); ++i) (*grad)[i] += g.logits[i] / n;
        s.mean_loss += g.value.loss / n;
        s.mean_margin += g.value.margin / n;
      } else {
        const auto v = detail::pair_loss(result.model, reference, p, config.beta);
        s.mean_loss += v.loss / n;
        s.mean_margin += v.margin / n;
      }
    }
    if (!std::isfinite(s.mean_loss)) throw Error("toy DPO diverged at epoch " + std::to_string(epoch));
    return s;
  };

  std::vector<double> grad;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto before = evaluate(epoch - 1, &grad);
    if (epoch == 1) result.stats.push_back(before);
    auto& params = result.model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= config.learning_rate * grad[i];
    result.stats.push_back(evaluate(epoch, nullptr));
  }
  return result;
}

/// Synthetic preference data over `model`'s vocabulary: preferred
/// continuations use tokens from the first half of the vocabulary and
/// dis-preferred ones from the second half, after a one-token context.
inline std::vector<ToyPreferencePair> synthetic_toy_dataset(const ToyLanguageModel& model, std::size_t count,
                                                            std::size_t length, Rng& rng) {
  const std::size_t v = model.vocab_size();
  if (v < 2) throw InputError("synthetic dataset needs at least two tokens");
  const std::size_t half = v / 2;
  std::vector<ToyPreferencePair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ToyPreferencePair p;
    p.context.push_back(model.token(rng.below(v)));
    for (std::size_t j = 0; j < length; ++j) p.plus.push_back(model.token(rng.below(half)));
    for (std::size_t j = 0; j < length; ++j) p.minus.push_back(model.token(half + rng.below(v - half)));
    out.push_back(std::move(p));
  }
  return out;
}

/// Toy model with logits drawn uniformly from [-scale, scale].
inline ToyLanguageModel random_toy_model(std::vector<std::string> vocabulary, double scale, Rng& rng) {
  ToyLanguageModel model(std::move(vocabulary));
  for (double& v : model.parameters()) v = (2.0 * rng.uniform() - 1.0) * scale;
  return model;
}

}  // namespace selfinject
