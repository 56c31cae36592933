#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stampnet/box.hpp"
#include "stampnet/data.hpp"
#include "stampnet/model.hpp"

namespace stampnet {

/// Intersection over union by pixel-area arithmetic.
double iou(const BoundingBox& a, const BoundingBox& b);

/// One-to-one assignment between predictions (rows) and ground truths
/// (columns). pred_to_gt[i] / gt_to_pred[j] are empty when unmatched.
struct Assignment {
  std::vector<std::optional<std::size_t>> pred_to_gt;
  std::vector<std::optional<std::size_t>> gt_to_pred;
  double total = 0.0;
};

/// Maximum-total-weight assignment of a (possibly rectangular) score
/// matrix via the Hungarian method. Among optimal assignments the
/// lexicographically smallest (by prediction, then ground-truth index) is
/// returned, and a real pairing is preferred over leaving an entry unmatched.
Assignment match_scores(const Eigen::MatrixXd& scores);
Assignment match_boxes(std::span<const BoundingBox> preds, std::span<const BoundingBox> gts);

/// Fraction of ground truths whose matched IoU reaches `threshold`; an empty
/// optional marks an unmatched ground truth and counts as a miss.
double corloc(std::span<const std::optional<double>> matched_ious, double threshold = 0.5);

/// Clustering purity of cluster ids against class labels.
double purity(std::span<const Index> cluster_ids, std::span<const Index> class_labels);

struct MetricsReport {
  std::string dataset;
  std::size_t samples = 0;
  double corloc = 0.0;
  double mean_iou = 0.0;
  double purity = 0.0;
  double threshold = 0.5;
  double tau_eval = 0.01;
  std::vector<std::size_t> per_stamp_counts;

  /// Validates fractions and refuses empty evaluations.
  static MetricsReport create(std::string dataset, std::size_t samples, double corloc, double mean_iou,
                              double purity, double threshold, double tau_eval,
                              std::vector<std::size_t> per_stamp_counts);
};

struct EvalOptions {
  double tau_eval = 0.01;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;
  unsigned threads = 1;
  std::string dataset_name = "dataset";
};

/// Per-sample predictions and their matching, kept for inspection.
struct SampleEvaluation {
  std::vector<Prediction> predictions;
  Assignment assignment;
};

/// Forward every sample at `tau_eval`, extract boxes, match and aggregate.
/// Gumbel noise for sample i comes from a stream derived from (seed, i), so
/// the report does not depend on batch size or thread count.
MetricsReport evaluate(const StampNet& model, const Dataset& dataset, const EvalOptions& options,
                       std::vector<SampleEvaluation>* details = nullptr);

/// RNG stream used for sample `index` at evaluation time.
SeededRng eval_stream(std::uint64_t seed, std::size_t index);

/// Canonical JSON text with fractions at fixed 6-decimal precision.
std::string report_to_text(const MetricsReport& report);
MetricsReport report_from_text(const std::string& text);
void export_report(const MetricsReport& report, const std::filesystem::path& path);
MetricsReport read_report(const std::filesystem::path& path);

}  // namespace stampnet
