#include "faudit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "faudit/rng.hpp"

namespace faudit::stats {

double mean(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean: empty input");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double stddev(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double m = mean(values);
  double s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(values.size() - 1));
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  if (q < 0.0 || q > 100.0) throw std::invalid_argument("percentile: q outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  if (a.size() < 2) return std::nullopt;
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double ma = mean(ra), mb = mean(rb);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - ma, db = rb[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> pred) {
  if (truth.size() != pred.size() || truth.empty()) {
    throw std::invalid_argument("accuracy: empty or mismatched inputs");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double balanced_accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                         std::size_t n_classes) {
  if (truth.size() != pred.size() || truth.empty()) {
    throw std::invalid_argument("balanced_accuracy: empty or mismatched inputs");
  }
  std::vector<std::size_t> total(n_classes, 0), hit(n_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= n_classes) throw std::out_of_range("balanced_accuracy: label out of range");
    ++total[truth[i]];
    hit[truth[i]] += truth[i] == pred[i];
  }
  double s = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (!total[c]) continue;
    s += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    ++present;
  }
  return s / static_cast<double>(present);
}

double macro_f1(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                std::size_t n_classes) {
  if (truth.size() != pred.size() || truth.empty()) {
    throw std::invalid_argument("macro_f1: empty or mismatched inputs");
  }
  std::vector<double> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= n_classes || pred[i] >= n_classes) {
      throw std::out_of_range("macro_f1: label out of range");
    }
    if (truth[i] == pred[i]) {
      ++tp[truth[i]];
    } else {
      ++fp[pred[i]];
      ++fn[truth[i]];
    }
  }
  double s = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    ++present;
    s += 2.0 * tp[c] / (2.0 * tp[c] + fp[c] + fn[c]);
  }
  return s / static_cast<double>(present);
}

double cohens_d(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("cohens_d: each group needs n >= 2");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sa = stddev(a), sb = stddev(b);
  const double pooled = std::sqrt(((na - 1.0) * sa * sa + (nb - 1.0) * sb * sb) / (na + nb - 2.0));
  if (pooled == 0.0) throw std::domain_error("cohens_d: zero pooled standard deviation");
  return (mean(a) - mean(b)) / pooled;
}

Interval bootstrap_ci(std::span<const double> values, std::size_t n_resamples, double level,
                      std::uint64_t seed) {
  if (values.empty()) throw std::invalid_argument("bootstrap_ci: empty input");
  if (n_resamples == 0) throw std::invalid_argument("bootstrap_ci: need at least one resample");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("bootstrap_ci: level outside (0,1)");
  Rng rng(seed);
  const std::size_t n = values.size();
  std::vector<double> means(n_resamples);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[rng.below(n)];
    m = s / static_cast<double>(n);
  }
  const double tail = (1.0 - level) / 2.0 * 100.0;
  return {percentile(means, tail), percentile(means, 100.0 - tail)};
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::del_auc: return "del_auc";
    case Metric::ins_auc: return "ins_auc";
    case Metric::stability: return "stability";
    case Metric::iou: return "iou";
    case Metric::spearman_defect: return "spearman_defect";
  }
  return "?";
}

double metric_value(const AuditRecord& r, Metric m) {
  switch (m) {
    case Metric::del_auc: return r.del_auc;
    case Metric::ins_auc: return r.ins_auc;
    case Metric::stability: return r.stability;
    case Metric::iou: return r.iou;
    case Metric::spearman_defect: return r.spearman_defect;
  }
  return 0.0;
}

bool metric_defined(const AuditRecord& r, Metric m) {
  if (m == Metric::stability) return r.has_stability;
  return r.has_mask || (m != Metric::iou && m != Metric::spearman_defect);
}

namespace {

MetricSummary summarize_values(const std::vector<double>& v) {
  return {mean(v), stddev(v)};
}

}  // namespace

std::vector<FamilySummary> summarize(std::span<const AuditRecord> records, std::size_t n_resamples,
                                     std::uint64_t seed) {
  std::map<std::pair<std::string, std::string>, std::vector<const AuditRecord*>> groups;
  for (const auto& r : records)
    if (r.ok()) groups[{r.family(), r.fill}].push_back(&r);

  std::vector<FamilySummary> out;
  for (const auto& [key, rows] : groups) {
    FamilySummary s;
    s.family = key.first;
    s.fill = key.second;
    s.n = rows.size();
    for (auto m : all_metrics()) {
      std::vector<double> v;
      for (const auto* r : rows)
        if (metric_defined(*r, m)) v.push_back(metric_value(*r, m));
      if (!v.empty()) s.metrics[m] = summarize_values(v);
    }
    std::map<int, std::vector<double>> topk;
    std::map<std::size_t, std::vector<double>> per_class;
    std::vector<double> del;
    for (const auto* r : rows) {
      for (const auto& [k, v] : r->topk_drop) topk[k].push_back(v);
      per_class[r->true_class].push_back(r->del_auc);
      del.push_back(r->del_auc);
      s.degenerate += r->degenerate;
    }
    for (const auto& [k, v] : topk) s.topk[k] = summarize_values(v);
    for (const auto& [c, v] : per_class) s.per_class_del_auc[c] = mean(v);
    s.del_auc_ci = bootstrap_ci(del, n_resamples, 0.95, seed);
    out.push_back(std::move(s));
  }
  return out;
}

std::optional<double> ClassTable::at(std::size_t cls, const std::string& family) const {
  auto it = cells.find({cls, family});
  if (it == cells.end()) return std::nullopt;
  return it->second;
}

ClassTable per_class_table(std::span<const AuditRecord> records, Metric metric) {
  std::map<std::pair<std::size_t, std::string>, std::pair<double, std::size_t>> acc;
  std::set<std::size_t> classes;
  std::set<std::string> families;
  for (const auto& r : records) {
    if (!r.ok() || !metric_defined(r, metric)) continue;
    auto& cell = acc[{r.true_class, r.family()}];
    cell.first += metric_value(r, metric);
    ++cell.second;
    classes.insert(r.true_class);
    families.insert(r.family());
  }
  ClassTable t;
  t.classes.assign(classes.begin(), classes.end());
  t.families.assign(families.begin(), families.end());
  for (const auto& [key, v] : acc) t.cells[key] = v.first / static_cast<double>(v.second);
  return t;
}

std::set<SampleKey> commonly_correct_filter(std::span<const AuditRecord> records) {
  std::map<std::string, std::map<SampleKey, bool>> per_model;
  for (const auto& r : records) {
    auto& slot = per_model[r.model];
    const SampleKey key{r.run_seed, r.sample_id};
    auto it = slot.find(key);
    if (it == slot.end()) {
      slot[key] = r.correct;
    } else {
      it->second = it->second && r.correct;
    }
  }
  std::set<SampleKey> out;
  if (per_model.empty()) return out;
  const auto& first = per_model.begin()->second;
  for (const auto& [model, slot] : per_model) {
    if (slot.size() != first.size() ||
        !std::equal(slot.begin(), slot.end(), first.begin(),
                    [](const auto& x, const auto& y) { return x.first == y.first; })) {
      throw std::invalid_argument("commonly_correct_filter: model '" + model +
                                  "' covers a different sample set");
    }
  }
  for (const auto& [key, correct] : first) {
    bool all = true;
    for (const auto& [model, slot] : per_model) all = all && slot.at(key);
    if (all) out.insert(key);
  }
  return out;
}

std::vector<AuditRecord> restrict_to(std::span<const AuditRecord> records,
                                     const std::set<SampleKey>& keys) {
  std::vector<AuditRecord> out;
  for (const auto& r : records)
    if (keys.count({r.run_seed, r.sample_id})) out.push_back(r);
  return out;
}

std::vector<AuditRecord> exclude_class(std::span<const AuditRecord> records, std::size_t cls) {
  std::vector<AuditRecord> out;
  for (const auto& r : records)
    if (r.true_class != cls) out.push_back(r);
  return out;
}

}  // namespace faudit::stats
