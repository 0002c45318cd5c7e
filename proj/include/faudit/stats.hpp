#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "faudit/record.hpp"

namespace faudit::stats {

double mean(std::span<const double> values);
/// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 values.
double stddev(std::span<const double> values);
/// Linear-interpolated percentile, q in [0, 100].
double percentile(std::vector<double> values, double q);

/// Ranks starting at 1; tied values share the mean of their ranks.
std::vector<double> average_ranks(std::span<const double> values);
/// Spearman rank correlation. Returns nullopt when either side is constant.
std::optional<double> spearman(std::span<const double> a, std::span<const double> b);

double accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> pred);
/// Mean per-class recall over the classes that occur in `truth`.
double balanced_accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                         std::size_t n_classes);
double macro_f1(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                std::size_t n_classes);

/// Standardized mean difference with the pooled sample standard deviation.
double cohens_d(std::span<const double> a, std::span<const double> b);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

/// Percentile bootstrap interval for the mean.
Interval bootstrap_ci(std::span<const double> values, std::size_t n_resamples = 2000,
                      double level = 0.95, std::uint64_t seed = 0);

enum class Metric { del_auc, ins_auc, stability, iou, spearman_defect };
std::string to_string(Metric m);
double metric_value(const AuditRecord& r, Metric m);
/// False for mask-based metrics on samples without a defect mask, and for
/// stability when it was not measured.
bool metric_defined(const AuditRecord& r, Metric m);
inline const std::vector<Metric>& all_metrics() {
  static const std::vector<Metric> m = {Metric::del_auc, Metric::ins_auc, Metric::stability,
                                        Metric::iou, Metric::spearman_defect};
  return m;
}

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
};

struct FamilySummary {
  std::string family;
  std::string fill;
  std::size_t n = 0;
  std::map<Metric, MetricSummary> metrics;
  std::map<int, MetricSummary> topk;
  std::map<std::size_t, double> per_class_del_auc;
  Interval del_auc_ci;
  std::size_t degenerate = 0;
};

/// Groups valid records by (family, fill) and summarizes each group.
std::vector<FamilySummary> summarize(std::span<const AuditRecord> records,
                                     std::size_t n_resamples = 2000, std::uint64_t seed = 0);

/// class x family mean of one metric. Absent cells are missing from `cells`.
struct ClassTable {
  std::vector<std::size_t> classes;
  std::vector<std::string> families;
  std::map<std::pair<std::size_t, std::string>, double> cells;

  std::optional<double> at(std::size_t cls, const std::string& family) const;
};

ClassTable per_class_table(std::span<const AuditRecord> records, Metric metric = Metric::del_auc);

using SampleKey = std::pair<std::uint64_t, std::uint64_t>;  // (run seed, sample id)

/// Samples every model classifies correctly. Throws std::invalid_argument
/// when models were evaluated on different sample sets.
std::set<SampleKey> commonly_correct_filter(std::span<const AuditRecord> records);

std::vector<AuditRecord> restrict_to(std::span<const AuditRecord> records,
                                     const std::set<SampleKey>& keys);
std::vector<AuditRecord> exclude_class(std::span<const AuditRecord> records, std::size_t cls);

}  // namespace faudit::stats
