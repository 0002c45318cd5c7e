#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace faudit {

/// One row of the audit: every scalar metric for a
/// (run, model, sample, explainer, fill operator) cell.
struct AuditRecord {
  std::uint64_t run_seed = 0;
  std::string model;
  std::uint64_t sample_id = 0;
  std::size_t true_class = 0;
  std::size_t predicted_class = 0;
  bool correct = false;
  std::string explainer;
  std::string fill;

  double del_auc = 0.0;
  double ins_auc = 0.0;
  double stability = 0.0;
  double iou = 0.0;
  double spearman_defect = 0.0;
  /// top-k percent -> confidence drop
  std::map<int, double> topk_drop;
  /// False when the sample has no defect pixels; iou and spearman_defect
  /// are then undefined (stored as 0) and left out of summaries.
  bool has_mask = true;
  /// False when stability was not measured for this explainer.
  bool has_stability = true;

  bool degenerate = false;
  std::vector<std::string> annotations;
  /// Non-empty for rows recording a failed sample; metrics are then unset.
  std::string error;

  /// "model/explainer", the unit the statistics compare.
  std::string family() const { return model + "/" + explainer; }
  bool ok() const { return error.empty(); }
};

}  // namespace faudit
