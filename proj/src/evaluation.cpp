#include "stampnet/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stampnet/parallel.hpp"

namespace stampnet {

double iou(const BoundingBox& a, const BoundingBox& b) {
  const Index ix = std::max<Index>(0, std::min(a.x + a.width, b.x + b.width) - std::max(a.x, b.x));
  const Index iy = std::max<Index>(0, std::min(a.y + a.height, b.y + b.height) - std::max(a.y, b.y));
  const Index inter = ix * iy;
  const Index uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

namespace {

// Hungarian method (shortest augmenting paths with potentials) minimizing
// cost over a square matrix. Returns row_for_col.
std::vector<Index> hungarian_min(const Eigen::MatrixXd& cost) {
  const Index n = cost.rows();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<Index> p(n + 1, 0), way(n + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const Index i0 = p[j0];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> row_for_col(n);
  for (Index j = 1; j <= n; ++j) row_for_col[j - 1] = p[j] - 1;
  return row_for_col;
}

double best_total(const Eigen::MatrixXd& scores, const std::vector<Index>& rows, const std::vector<Index>& cols) {
  const Index k = static_cast<Index>(rows.size());
  if (k == 0) return 0.0;
  Eigen::MatrixXd cost(k, k);
  for (Index r = 0; r < k; ++r) {
    for (Index c = 0; c < k; ++c) cost(r, c) = -scores(rows[r], cols[c]);
  }
  const auto row_for_col = hungarian_min(cost);
  double total = 0.0;
  for (Index c = 0; c < k; ++c) total += scores(rows[row_for_col[c]], cols[c]);
  return total;
}

}  // namespace

Assignment match_scores(const Eigen::MatrixXd& scores) {
  const Index n_pred = scores.rows(), n_gt = scores.cols();
  const Index k = std::max(n_pred, n_gt);
  Assignment result;
  result.pred_to_gt.assign(static_cast<std::size_t>(n_pred), std::nullopt);
  result.gt_to_pred.assign(static_cast<std::size_t>(n_gt), std::nullopt);
  if (n_pred == 0 || n_gt == 0) return result;

  // Pad with zero-score dummies so the problem is square.
  Eigen::MatrixXd padded = Eigen::MatrixXd::Zero(k, k);
  padded.topLeftCorner(n_pred, n_gt) = scores;

  std::vector<Index> rows(k), cols(k);
  for (Index i = 0; i < k; ++i) rows[i] = cols[i] = i;
  double remaining = best_total(padded, rows, cols);
  constexpr double kTol = 1e-12;

  // Fix rows in order, each to the lowest column that keeps the optimum.
  for (Index i = 0; i < n_pred; ++i) {
    std::vector<Index> rest_rows(rows.begin() + 1, rows.end());
    for (std::size_t ci = 0; ci < cols.size(); ++ci) {
      const Index j = cols[ci];
      std::vector<Index> rest_cols = cols;
      rest_cols.erase(rest_cols.begin() + static_cast<std::ptrdiff_t>(ci));
      const double rest = best_total(padded, rest_rows, rest_cols);
      if (padded(i, j) + rest >= remaining - kTol) {
        if (j < n_gt) {
          result.pred_to_gt[static_cast<std::size_t>(i)] = static_cast<std::size_t>(j);
          result.gt_to_pred[static_cast<std::size_t>(j)] = static_cast<std::size_t>(i);
          result.total += scores(i, j);
        }
        remaining = rest;
        rows = std::move(rest_rows);
        cols = std::move(rest_cols);
        break;
      }
    }
  }
  return result;
}

Assignment match_boxes(std::span<const BoundingBox> preds, std::span<const BoundingBox> gts) {
  Eigen::MatrixXd scores(static_cast<Index>(preds.size()), static_cast<Index>(gts.size()));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      scores(static_cast<Index>(i), static_cast<Index>(j)) = iou(preds[i], gts[j]);
    }
  }
  return match_scores(scores);
}

double corloc(std::span<const std::optional<double>> matched_ious, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("corloc: threshold must lie in (0, 1)");
  if (matched_ious.empty()) throw ConfigError("corloc: no ground-truth boxes");
  std::size_t hits = 0;
  for (const auto& v : matched_ious) {
    if (v && *v >= threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(matched_ious.size());
}

double purity(std::span<const Index> cluster_ids, std::span<const Index> class_labels) {
  if (cluster_ids.size() != class_labels.size()) {
    throw DimensionError("purity: cluster ids and class labels differ in length");
  }
  if (cluster_ids.empty()) throw ConfigError("purity: undefined for an empty assignment");
  std::map<Index, std::map<Index, std::size_t>> table;
  for (std::size_t i = 0; i < cluster_ids.size(); ++i) ++table[cluster_ids[i]][class_labels[i]];
  std::size_t majority = 0;
  for (const auto& [cluster, classes] : table) {
    std::size_t best = 0;
    for (const auto& [label, count] : classes) best = std::max(best, count);
    majority += best;
  }
  return static_cast<double>(majority) / static_cast<double>(cluster_ids.size());
}

MetricsReport MetricsReport::create(std::string dataset, std::size_t samples, double corloc, double mean_iou,
                                    double purity, double threshold, double tau_eval,
                                    std::vector<std::size_t> per_stamp_counts) {
  if (samples == 0) throw ConfigError("metrics report: refusing a report over 0 samples");
  for (double f : {corloc, mean_iou, purity}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("metrics report: fractions must lie in [0, 1]");
  }
  return MetricsReport{std::move(dataset), samples, corloc, mean_iou, purity, threshold, tau_eval,
                       std::move(per_stamp_counts)};
}

SeededRng eval_stream(std::uint64_t seed, std::size_t index) {
  return SeededRng::derive(seed, {0x4556414c, index});
}

MetricsReport evaluate(const StampNet& model, const Dataset& dataset, const EvalOptions& options,
                       std::vector<SampleEvaluation>* details) {
  const ModelConfig& mc = model.config();
  if (dataset.canvas_x != mc.canvas_x || dataset.canvas_y != mc.canvas_y) {
    throw DimensionError("evaluate: dataset canvas " + std::to_string(dataset.canvas_x) + "x" +
                         std::to_string(dataset.canvas_y) + " does not match model canvas " +
                         std::to_string(mc.canvas_x) + "x" + std::to_string(mc.canvas_y));
  }
  const std::size_t n = dataset.size();
  const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
  std::vector<SampleEvaluation> per_sample(n);
  const std::size_t batches = (n + bs - 1) / bs;
  parallel_for(batches, options.threads, [&](std::size_t bi) {
    const std::size_t first = bi * bs, last = std::min(n, first + bs);
    std::vector<std::size_t> idx;
    std::vector<SeededRng> rngs;
    for (std::size_t i = first; i < last; ++i) {
      idx.push_back(i);
      rngs.push_back(eval_stream(options.seed, i));
    }
    const auto out = model.infer(stack_images(dataset, idx), options.tau_eval, rngs);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      SampleEvaluation& ev = per_sample[idx[b]];
      ev.predictions = extract_predictions(out.latents[b], mc.stamp_x, mc.stamp_y);
      std::vector<BoundingBox> pb, gb;
      for (const auto& p : ev.predictions) pb.push_back(p.box);
      for (const auto& g : dataset.samples[idx[b]].boxes) gb.push_back(g.box());
      ev.assignment = match_boxes(pb, gb);
    }
  });

  std::vector<std::optional<double>> gt_ious;
  std::vector<Index> clusters, classes;
  std::vector<std::size_t> counts(static_cast<std::size_t>(mc.stamps), 0);
  double iou_sum = 0.0;
  std::size_t matched = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const SampleEvaluation& ev = per_sample[i];
    const auto& gts = dataset.samples[i].boxes;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const auto& p = ev.assignment.gt_to_pred[j];
      if (!p) {
        gt_ious.emplace_back(std::nullopt);
        continue;
      }
      const Prediction& pred = ev.predictions[*p];
      const double v = iou(pred.box, gts[j].box());
      gt_ious.emplace_back(v);
      iou_sum += v;
      ++matched;
      clusters.push_back(pred.stamp);
      classes.push_back(gts[j].class_label);
      ++counts[static_cast<std::size_t>(pred.stamp)];
    }
  }
  if (details != nullptr) *details = std::move(per_sample);
  if (gt_ious.empty()) throw ConfigError("evaluate: dataset has no ground-truth boxes");
  const double loc = corloc(gt_ious, options.threshold);
  const double mean_iou = matched > 0 ? iou_sum / static_cast<double>(matched) : 0.0;
  const double pur = matched > 0 ? purity(clusters, classes) : 0.0;
  return MetricsReport::create(options.dataset_name, n, loc, mean_iou, pur, options.threshold, options.tau_eval,
                               std::move(counts));
}

namespace {
std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace

std::string report_to_text(const MetricsReport& r) {
  std::ostringstream out;
  out << "{\n";
  out << "  \"dataset\": " << nlohmann::json(r.dataset).dump() << ",\n";
  out << "  \"samples\": " << r.samples << ",\n";
  out << "  \"corloc\": " << fixed6(r.corloc) << ",\n";
  out << "  \"mean_iou\": " << fixed6(r.mean_iou) << ",\n";
  out << "  \"purity\": " << fixed6(r.purity) << ",\n";
  out << "  \"threshold\": " << fixed6(r.threshold) << ",\n";
  out << "  \"tau_eval\": " << fixed6(r.tau_eval) << ",\n";
  out << "  \"per_stamp_counts\": [";
  for (std::size_t i = 0; i < r.per_stamp_counts.size(); ++i) out << (i ? ", " : "") << r.per_stamp_counts[i];
  out << "]\n}\n";
  return out.str();
}

MetricsReport report_from_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    return MetricsReport::create(j.at("dataset").get<std::string>(), j.at("samples").get<std::size_t>(),
                                 j.at("corloc").get<double>(), j.at("mean_iou").get<double>(),
                                 j.at("purity").get<double>(), j.at("threshold").get<double>(),
                                 j.at("tau_eval").get<double>(),
                                 j.at("per_stamp_counts").get<std::vector<std::size_t>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  }
}

void export_report(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << report_to_text(report);
  if (!out) throw FormatError("failed writing " + path.string());
}

MetricsReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return report_from_text(buf.str());
}

}  // namespace stampnet
