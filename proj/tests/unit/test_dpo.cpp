#include <gtest/gtest.h>

#include <cmath>

#include "selfinject/dpo.hpp"
#include "selfinject/toy_model.hpp"

using namespace selfinject;

namespace {

// High-precision references.
constexpr double kNegLogSigmoidTenth = 0.6443966600735708948300991083156580419056;
constexpr double kLog2 = 0.6931471805599453094172321214581765680755;

std::vector<std::string> letters(std::size_t n) {
  std::vector<std::string> v;
  for (std::size_t i = 0; i < n; ++i) v.emplace_back(1, static_cast<char>('a' + i));
  return v;
}

// Independent sequence log-probability: explicit softmax per step.
double naive_logprob(const ToyLanguageModel& m, const std::vector<std::string>& ctx,
                     const std::vector<std::string>& cont) {
  std::size_t row = ctx.empty() ? m.start_row() : m.id_of(ctx.back());
  double total = 0.0;
  for (const auto& tok : cont) {
    double z = 0.0;
    for (std::size_t j = 0; j < m.vocab_size(); ++j) z += std::exp(m.logit(row, j));
    const auto id = m.id_of(tok);
    total += m.logit(row, id) - std::log(z);
    row = id;
  }
  return total;
}

}  // namespace

TEST(DpoLoss, EqualLogprobsGiveLog2) {
  for (double lp : {-0.1, -3.0, -250.0}) {
    const auto r = dpo_loss({lp, lp, lp, lp}, 0.1);
    EXPECT_NEAR(r.loss, kLog2, 1e-12);
    EXPECT_EQ(r.margin, 0.0);
  }
}

TEST(DpoLoss, UnitMarginValue) {
  // beta=0.1 and a unit policy gain on y+ gives margin 0.1.
  const auto r = dpo_loss({-1.0, -3.0, -2.0, -3.0}, 0.1);
  EXPECT_NEAR(r.margin, 0.1, 1e-15);
  EXPECT_NEAR(r.loss, kNegLogSigmoidTenth, 1e-12);
}

TEST(DpoLoss, ExtremeMarginsStayFinite) {
  const auto big = dpo_loss({0.0, -1e5, 0.0, 0.0}, 0.1);  // margin 1e4
  EXPECT_TRUE(std::isfinite(big.loss));
  EXPECT_GE(big.loss, 0.0);
  EXPECT_LT(big.loss, 1e-300);
  const auto neg = dpo_loss({-1e5, 0.0, 0.0, 0.0}, 0.1);  // margin -1e4
  EXPECT_TRUE(std::isfinite(neg.loss));
  EXPECT_NEAR(neg.loss, 1e4, 1e-9);
}

TEST(DpoLoss, InvariantToSharedReferenceShift) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    DpoBatchItem item{-10 * rng.uniform(), -10 * rng.uniform(), -10 * rng.uniform(), -10 * rng.uniform()};
    const double c = -5 * rng.uniform();
    DpoBatchItem shifted = item;
    shifted.logp_ref_plus += c;
    shifted.logp_ref_minus += c;
    EXPECT_NEAR(dpo_loss(item, 0.1).loss, dpo_loss(shifted, 0.1).loss, 1e-12);
  }
}

TEST(DpoLoss, RejectsInvalidInputs) {
  EXPECT_THROW(dpo_loss({0.5, -1, -1, -1}, 0.1), InputError);
  EXPECT_THROW(dpo_loss({NAN, -1, -1, -1}, 0.1), InputError);
  EXPECT_THROW(dpo_loss({-1, -1, -1, -1}, 0.0), InputError);
  EXPECT_THROW(DpoConfig({0.1, 0.5, 0}).validate(), ConfigError);
}

TEST(DpoLoss, MonotoneDecreasingInMargin) {
  double prev = INFINITY;
  for (double m = -50; m <= 50; m += 0.25) {
    const DpoBatchItem item = m >= 0 ? DpoBatchItem{0.0, -m, 0.0, 0.0} : DpoBatchItem{m, 0.0, 0.0, 0.0};
    const auto r = dpo_loss(item, 1.0);
    EXPECT_DOUBLE_EQ(r.margin, m);
    const double loss = r.loss;
    EXPECT_LT(loss, prev);
    prev = loss;
  }
}

TEST(ToyModel, SequenceLogprobMatchesNaiveSoftmax) {
  Rng rng(9);
  const auto m = random_toy_model(letters(5), 2.0, rng);
  for (int i = 0; i < 50; ++i) {
    std::vector<std::string> ctx, cont;
    for (std::size_t j = rng.below(3); j > 0; --j) ctx.push_back(m.token(rng.below(5)));
    for (std::size_t j = 1 + rng.below(6); j > 0; --j) cont.push_back(m.token(rng.below(5)));
    EXPECT_NEAR(toy_sequence_logprob(m, std::span<const std::string>(ctx), std::span<const std::string>(cont)),
                naive_logprob(m, ctx, cont), 1e-12);
  }
}

TEST(ToyDpo, GradientMatchesFiniteDifferences) {
  Rng rng(21);
  const auto reference = random_toy_model(letters(4), 1.0, rng);
  const auto policy = random_toy_model(letters(4), 1.0, rng);
  const ToyPreferencePair pair{{"a"}, {"b", "c", "a"}, {"d", "d", "b"}};
  for (double beta : {0.1, 1.0, 5.0}) {
    const auto g = dpo_gradient(policy, reference, pair, beta);
    ASSERT_EQ(g.logits.size(), policy.parameters().size());
    const double h = 1e-5;
    for (std::size_t i = 0; i < g.logits.size(); ++i) {
      auto up = policy, down = policy;
      up.parameters()[i] += h;
      down.parameters()[i] -= h;
      const double fd =
          (toy_dpo_loss(up, reference, pair, beta).loss - toy_dpo_loss(down, reference, pair, beta).loss) / (2 * h);
      EXPECT_NEAR(g.logits[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "param " << i << " beta " << beta;
    }
  }
}

TEST(ToyDpo, GradientIgnoresUnusedRows) {
  Rng rng(2);
  const auto m = random_toy_model(letters(4), 1.0, rng);
  const auto g = dpo_gradient(m, m, {{}, {"a"}, {"b"}}, 0.1);
  // Only the start row is touched by a one-token continuation with no context.
  for (std::size_t r = 0; r < m.start_row(); ++r) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(g.logits[r * 4 + j], 0.0);
  }
  EXPECT_NEAR(g.value.loss, kLog2, 1e-12);
}

TEST(ToyDpo, TrainingHalvesLossAndRaisesEveryMargin) {
  Rng rng(42);
  const auto initial = random_toy_model(letters(6), 0.5, rng);
  const auto data = synthetic_toy_dataset(initial, 50, 3, rng);
  const auto result = train_toy_dpo(initial, data, DpoConfig{});
  ASSERT_EQ(result.stats.size(), 201u);
  EXPECT_NEAR(result.stats.front().mean_loss, kLog2, 1e-12);
  EXPECT_LE(result.stats.back().mean_loss, 0.5 * result.stats.front().mean_loss);
  for (std::size_t e = 1; e < result.stats.size(); ++e) {
    EXPECT_LE(result.stats[e].mean_loss, result.stats[e - 1].mean_loss + 1e-12) << "epoch " << e;
  }
  for (const auto& p : data) {
    EXPECT_GT(toy_dpo_loss(result.model, initial, p, 0.1).margin, 0.0);
  }
}

TEST(ToyDpo, SinglePairMarginRisesEveryEpoch) {
  Rng rng(8);
  const auto initial = random_toy_model(letters(5), 1.0, rng);
  const auto result = train_toy_dpo(initial, {{{"a"}, {"b", "c"}, {"d", "e"}}}, DpoConfig{0.1, 2.0, 50});
  for (std::size_t e = 1; e < result.stats.size(); ++e) {
    EXPECT_GT(result.stats[e].mean_margin, result.stats[e - 1].mean_margin) << "epoch " << e;
  }
}

TEST(ToyDpo, ZeroLearningRateLeavesModelUnchanged) {
  Rng rng(8);
  const auto initial = random_toy_model(letters(5), 1.0, rng);
  const auto data = synthetic_toy_dataset(initial, 5, 2, rng);
  const auto result = train_toy_dpo(initial, data, DpoConfig{0.1, 0.0, 5});
  EXPECT_EQ(result.model, initial);
  for (const auto& s : result.stats) EXPECT_EQ(s.mean_loss, result.stats.front().mean_loss);
}

TEST(ToyDpo, TrainingIsDeterministic) {
  Rng a(5), b(5);
  const auto ma = random_toy_model(letters(4), 1.0, a);
  const auto mb = random_toy_model(letters(4), 1.0, b);
  const auto da = synthetic_toy_dataset(ma, 10, 2, a);
  const auto db = synthetic_toy_dataset(mb, 10, 2, b);
  DpoConfig cfg{0.1, 0.5, 20};
  EXPECT_EQ(train_toy_dpo(ma, da, cfg).model, train_toy_dpo(mb, db, cfg).model);
}

TEST(ToyDpo, RejectsBadInputs) {
  ToyLanguageModel m(letters(3));
  EXPECT_THROW(train_toy_dpo(m, {}, {}), InputError);
  EXPECT_THROW(toy_dpo_loss(m, m, {{}, {}, {"a"}}, 0.1), InputError);
  EXPECT_THROW(toy_dpo_loss(m, m, {{}, {"z"}, {"a"}}, 0.1), InputError);
  EXPECT_THROW(dpo_gradient(m, ToyLanguageModel(letters(4)), {{}, {"a"}, {"b"}}, 0.1), InputError);
}
