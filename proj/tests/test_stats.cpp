#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "faudit/stats.hpp"
#include "test_util.hpp"

using namespace faudit;
using namespace faudit::stats;

namespace {

AuditRecord row(const std::string& model, const std::string& explainer, std::uint64_t sample,
                std::size_t cls, double del, bool correct = true, std::uint64_t seed = 0) {
  AuditRecord r;
  r.run_seed = seed;
  r.model = model;
  r.explainer = explainer;
  r.fill = "zero";
  r.sample_id = sample;
  r.true_class = cls;
  r.predicted_class = correct ? cls : cls + 1;
  r.correct = correct;
  r.del_auc = del;
  r.ins_auc = 1.0 - del;
  r.stability = 0.5;
  r.iou = 0.1;
  r.spearman_defect = 0.2;
  r.topk_drop = {{5, 0.1}, {10, 0.2}, {20, 0.3}};
  return r;
}

std::vector<double> normal_sample(std::mt19937_64& gen, std::size_t n, double mu, double sd) {
  std::normal_distribution<double> dist(mu, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

}  // namespace

// ---- Cohen's d ----

TEST(CohensD, AnalyticCase) {
  const std::vector<double> a = {0, 2}, b = {2, 4};
  EXPECT_NEAR(cohens_d(a, b), -std::sqrt(2.0), 1e-12);
}

TEST(CohensD, IdenticalGroupsGiveZero) {
  const std::vector<double> a = {1, 2, 4, 8};
  EXPECT_EQ(cohens_d(a, a), 0.0);
}

TEST(CohensD, AntisymmetricShiftAndScaleInvariant) {
  std::mt19937_64 gen(1);
  const auto a = normal_sample(gen, 30, 0.4, 0.1);
  const auto b = normal_sample(gen, 45, 0.5, 0.2);
  const double d = cohens_d(a, b);
  EXPECT_NEAR(cohens_d(b, a), -d, 1e-12);
  auto a2 = a, b2 = b;
  for (auto& x : a2) x = 3.0 * x + 7.0;
  for (auto& x : b2) x = 3.0 * x + 7.0;
  EXPECT_NEAR(cohens_d(a2, b2), d, 1e-10);
}

TEST(CohensD, MatchesDirectFormula) {
  const std::vector<double> a = {0.1, 0.4, 0.35, 0.2, 0.5}, b = {0.6, 0.55, 0.7};
  const double ma = 1.55 / 5.0, mb = 1.85 / 3.0;
  double ssa = 0.0, ssb = 0.0;
  for (double x : a) ssa += (x - ma) * (x - ma);
  for (double x : b) ssb += (x - mb) * (x - mb);
  const double pooled = std::sqrt((ssa + ssb) / 6.0);
  EXPECT_NEAR(cohens_d(a, b), (ma - mb) / pooled, 1e-12);
}

TEST(CohensD, SeparatedFamiliesGiveLargeEffect) {
  // Two families 0.211 +/- 0.15 against 0.495 +/- 0.20, 594 samples each.
  std::mt19937_64 gen(2);
  const auto a = normal_sample(gen, 594, 0.211, 0.15);
  const auto b = normal_sample(gen, 594, 0.495, 0.20);
  EXPECT_GT(std::abs(cohens_d(a, b)), 1.1);
  EXPECT_LT(cohens_d(a, b), 0.0);
}

TEST(CohensD, Preconditions) {
  EXPECT_THROW(cohens_d(std::vector<double>{1}, std::vector<double>{1, 2}), std::invalid_argument);
  EXPECT_THROW(cohens_d(std::vector<double>{1, 1}, std::vector<double>{2, 2}), std::domain_error);
}

// ---- bootstrap ----

TEST(Bootstrap, ConstantDataIsDegenerate) {
  const auto ci = bootstrap_ci(std::vector<double>{5, 5, 5, 5}, 2000, 0.95, 3);
  EXPECT_EQ(ci.low, 5.0);
  EXPECT_EQ(ci.high, 5.0);
}

TEST(Bootstrap, SameSeedSameInterval) {
  std::mt19937_64 gen(4);
  const auto v = normal_sample(gen, 50, 0, 1);
  const auto a = bootstrap_ci(v, 2000, 0.95, 9);
  const auto b = bootstrap_ci(v, 2000, 0.95, 9);
  EXPECT_EQ(a.low, b.low);
  EXPECT_EQ(a.high, b.high);
  const auto c = bootstrap_ci(v, 2000, 0.95, 10);
  EXPECT_NE(a.low, c.low);
}

TEST(Bootstrap, LargeSampleWidthMatchesNormalTheory) {
  std::mt19937_64 gen(5);
  const auto v = normal_sample(gen, 594, 0, 1);
  const auto ci = bootstrap_ci(v, 2000, 0.95, 1);
  const double expected = 2.0 * 1.96 / std::sqrt(594.0);
  EXPECT_NEAR(ci.high - ci.low, expected, 0.2 * expected);
  EXPECT_LE(ci.low, mean(v));
  EXPECT_GE(ci.high, mean(v));
}

TEST(Bootstrap, CoverageIsNearNominal) {
  std::mt19937_64 gen(6);
  int covered = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto v = normal_sample(gen, 100, 2.0, 1.0);
    const auto ci = bootstrap_ci(v, 1000, 0.95, static_cast<std::uint64_t>(t));
    covered += ci.low <= 2.0 && 2.0 <= ci.high;
  }
  const double rate = covered / 1000.0;
  EXPECT_GE(rate, 0.92);
  EXPECT_LE(rate, 0.97);
}

TEST(Bootstrap, Preconditions) {
  EXPECT_THROW(bootstrap_ci(std::vector<double>{}), std::invalid_argument);
  EXPECT_THROW(bootstrap_ci(std::vector<double>{1, 2}, 0), std::invalid_argument);
  EXPECT_THROW(bootstrap_ci(std::vector<double>{1, 2}, 10, 1.0), std::invalid_argument);
}

// ---- ranks and correlation ----

TEST(Spearman, MonotoneCasesAreExact) {
  const std::vector<double> x = {1, 2, 3, 4, 5, 6};
  const std::vector<double> up = {-3, 0, 0.5, 10, 11, 1000};
  std::vector<double> down(up.rbegin(), up.rend());
  EXPECT_EQ(spearman(x, up).value(), 1.0);
  EXPECT_EQ(spearman(x, down).value(), -1.0);
}

TEST(Spearman, TiesUseAverageRanks) {
  EXPECT_EQ(average_ranks(std::vector<double>{10, 20, 20, 5}),
            (std::vector<double>{2, 3.5, 3.5, 1}));
  // Pearson on the tied ranks, evaluated by hand: ranks a = 1,2.5,2.5,4 and
  // b = 1,2,3,4 give rho = 4.5 / sqrt(4.5 * 5).
  const auto rho = spearman(std::vector<double>{1, 2, 2, 3}, std::vector<double>{1, 2, 3, 4});
  EXPECT_NEAR(rho.value(), 4.5 / std::sqrt(4.5 * 5.0), 1e-15);
}

TEST(Spearman, ConstantSideIsUndefined) {
  EXPECT_FALSE(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}).has_value());
  EXPECT_THROW(spearman(std::vector<double>{1, 2}, std::vector<double>{1}), std::invalid_argument);
}

TEST(Descriptive, MeanStdPercentile) {
  const std::vector<double> v = {2, 4, 4, 4, 5, 5, 7, 9};
  EXPECT_EQ(mean(v), 5.0);
  EXPECT_NEAR(stddev(v), std::sqrt(32.0 / 7.0), 1e-15);
  EXPECT_EQ(stddev(std::vector<double>{3}), 0.0);
  EXPECT_EQ(percentile(v, 0), 2.0);
  EXPECT_EQ(percentile(v, 100), 9.0);
  EXPECT_NEAR(percentile({1, 2, 3, 4}, 50), 2.5, 1e-15);
}

TEST(Classification, AccuracyBalancedAndMacroF1) {
  const std::vector<std::size_t> truth = {0, 0, 0, 0, 1, 1};
  const std::vector<std::size_t> pred = {0, 0, 0, 1, 1, 0};
  EXPECT_NEAR(accuracy(truth, pred), 4.0 / 6.0, 1e-15);
  EXPECT_NEAR(balanced_accuracy(truth, pred, 2), (0.75 + 0.5) / 2.0, 1e-15);
  // Class 0: P = 3/4, R = 3/4 -> F1 0.75. Class 1: P = 1/2, R = 1/2 -> 0.5.
  EXPECT_NEAR(macro_f1(truth, pred, 2), 0.625, 1e-15);
}

// ---- tables and filters ----

TEST(PerClass, SingleRecordAndHandMeans) {
  const std::vector<AuditRecord> one = {row("cnn", "gradcam", 1, 2, 0.3)};
  const auto t1 = per_class_table(one);
  EXPECT_EQ(t1.classes, (std::vector<std::size_t>{2}));
  EXPECT_EQ(t1.at(2, "cnn/gradcam").value(), 0.3);

  const std::vector<AuditRecord> rows = {row("cnn", "gradcam", 1, 0, 0.2), row("cnn", "gradcam", 2, 0, 0.4),
                                         row("cnn", "gradcam", 3, 1, 0.9), row("vit", "rollout", 1, 0, 0.1)};
  const auto t = per_class_table(rows);
  EXPECT_NEAR(t.at(0, "cnn/gradcam").value(), 0.3, 1e-15);
  EXPECT_NEAR(t.at(1, "cnn/gradcam").value(), 0.9, 1e-15);
  EXPECT_NEAR(t.at(0, "vit/rollout").value(), 0.1, 1e-15);
  EXPECT_FALSE(t.at(1, "vit/rollout").has_value());
}

TEST(PerClass, MatchesFilterAndAverage) {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<AuditRecord> rows;
  const std::vector<std::string> models = {"a", "b", "c"};
  for (std::uint64_t s = 0; s < 300; ++s) rows.push_back(row(models[s % 3], "e", s, (s * 7) % 5, u(gen)));
  rows[4].error = "failed";
  const auto t = per_class_table(rows);
  for (std::size_t cls = 0; cls < 5; ++cls)
    for (const auto& m : models) {
      double sum = 0.0, n = 0.0;
      for (const auto& r : rows)
        if (r.true_class == cls && r.model == m && r.error.empty()) sum += r.del_auc, n += 1;
      EXPECT_NEAR(t.at(cls, m + "/e").value(), sum / n, 1e-12);
    }
  auto shuffled = rows;
  std::shuffle(shuffled.begin(), shuffled.end(), gen);
  const auto t2 = per_class_table(shuffled);
  for (const auto& [key, v] : t.cells) EXPECT_NEAR(t2.cells.at(key), v, 1e-12);
}

TEST(CommonlyCorrect, AllCorrectOneWrongAndHandCase) {
  std::vector<AuditRecord> all;
  for (std::uint64_t s = 0; s < 4; ++s) {
    all.push_back(row("cnn", "gradcam", s, 0, 0.1));
    all.push_back(row("vit", "rollout", s, 0, 0.1));
  }
  EXPECT_EQ(commonly_correct_filter(all).size(), 4u);

  auto wrong = all;
  for (auto& r : wrong)
    if (r.model == "vit") r.correct = false;
  EXPECT_TRUE(commonly_correct_filter(wrong).empty());

  auto mixed = all;
  mixed[0].correct = false;  // cnn, sample 0
  mixed[3].correct = false;  // vit, sample 1
  mixed[4].correct = false;  // cnn, sample 2
  EXPECT_EQ(commonly_correct_filter(mixed), (std::set<SampleKey>{{0, 3}}));
  EXPECT_EQ(restrict_to(mixed, {{0, 3}}).size(), 2u);
}

TEST(CommonlyCorrect, MismatchedCoverageThrows) {
  std::vector<AuditRecord> rows = {row("cnn", "gradcam", 1, 0, 0.1), row("cnn", "gradcam", 2, 0, 0.1),
                                   row("vit", "rollout", 1, 0, 0.1)};
  EXPECT_THROW(commonly_correct_filter(rows), std::invalid_argument);
}

TEST(ExcludeClass, EmptyAbsentAndHandCase) {
  EXPECT_TRUE(exclude_class(std::vector<AuditRecord>{}, 0).empty());
  const std::vector<AuditRecord> rows = {row("m", "e", 1, 1, 0.1), row("m", "e", 2, 2, 0.2),
                                         row("m", "e", 3, 0, 0.3)};
  EXPECT_EQ(exclude_class(rows, 4).size(), 3u);
  const auto kept = exclude_class(rows, 0);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].sample_id, 1u);
  EXPECT_EQ(kept[1].sample_id, 2u);
}

TEST(Summaries, GroupByFamilyAndFill) {
  std::vector<AuditRecord> rows;
  for (std::uint64_t s = 0; s < 10; ++s) rows.push_back(row("cnn", "gradcam", s, s % 2, 0.1 * s));
  rows.push_back(row("vit", "rollout", 0, 0, 0.5));
  rows.push_back(row("vit", "rollout", 1, 0, 0.7));
  rows.back().has_mask = false;
  rows.back().iou = 123.0;
  auto failed = row("vit", "rollout", 2, 0, 0.0);
  failed.error = "boom";
  rows.push_back(failed);

  const auto out = summarize(rows, 500, 1);
  ASSERT_EQ(out.size(), 2u);
  const auto& cnn = out[0];
  EXPECT_EQ(cnn.family, "cnn/gradcam");
  EXPECT_EQ(cnn.n, 10u);
  EXPECT_NEAR(cnn.metrics.at(Metric::del_auc).mean, 0.45, 1e-12);
  EXPECT_LE(cnn.del_auc_ci.low, 0.45);
  EXPECT_GE(cnn.del_auc_ci.high, 0.45);
  EXPECT_NEAR(cnn.per_class_del_auc.at(0), 0.4, 1e-12);
  EXPECT_NEAR(cnn.per_class_del_auc.at(1), 0.5, 1e-12);
  const auto& vit = out[1];
  EXPECT_EQ(vit.n, 2u);
  EXPECT_NEAR(vit.metrics.at(Metric::del_auc).mean, 0.6, 1e-12);
  // The maskless row is left out of iou.
  EXPECT_NEAR(vit.metrics.at(Metric::iou).mean, 0.1, 1e-12);
  EXPECT_NEAR(vit.topk.at(10).mean, 0.2, 1e-12);
}
