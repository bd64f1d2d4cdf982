#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "whorl/error.hpp"

namespace whorl {

struct EvalConfig {
  /// Maximum |dz| for a detection to count as the same whorl.
  double match_tol_m = 0.20;

  void validate() const {
    if (!(match_tol_m > 0.0)) throw ConfigError("match_tol_m must be > 0");
  }
};

struct MatchResult {
  /// (prediction index, truth index), ordered by truth height.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::size_t> unmatched_pred;  // false positives
  std::vector<std::size_t> unmatched_gt;    // false negatives
};

namespace detail {
inline std::vector<std::size_t> argsort(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  return idx;
}
}  // namespace detail

/// One-to-one matching under |dz| <= tol. Walking the truths bottom-up and
/// taking the lowest free prediction in range gives a maximum matching on a
/// line.
inline MatchResult match_whorls(std::span<const double> pred_z, std::span<const double> gt_z, double tol) {
  const auto p = detail::argsort(pred_z);
  const auto g = detail::argsort(gt_z);
  MatchResult m;
  std::size_t j = 0;
  for (std::size_t gi : g) {
    while (j < p.size() && pred_z[p[j]] < gt_z[gi] - tol) m.unmatched_pred.push_back(p[j++]);
    if (j < p.size() && std::abs(pred_z[p[j]] - gt_z[gi]) <= tol) {
      m.pairs.emplace_back(p[j++], gi);
    } else {
      m.unmatched_gt.push_back(gi);
    }
  }
  while (j < p.size()) m.unmatched_pred.push_back(p[j++]);
  return m;
}

inline double precision(std::size_t tp, std::size_t fp) {
  return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

inline double recall(std::size_t tp, std::size_t fn) {
  return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

inline double f1(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

/// Signed errors of predicted minus true internodal distance, over pairs of
/// consecutive truths whose matched predictions are also consecutive.
inline std::vector<double> internode_errors(std::span<const double> pred_z, std::span<const double> gt_z,
                                            const MatchResult& m) {
  std::vector<std::size_t> pred_rank(pred_z.size()), gt_rank(gt_z.size());
  const auto p = detail::argsort(pred_z);
  const auto g = detail::argsort(gt_z);
  for (std::size_t r = 0; r < p.size(); ++r) pred_rank[p[r]] = r;
  for (std::size_t r = 0; r < g.size(); ++r) gt_rank[g[r]] = r;

  auto pairs = m.pairs;
  std::sort(pairs.begin(), pairs.end(), [&](const auto& a, const auto& b) { return gt_rank[a.second] < gt_rank[b.second]; });
  std::vector<double> errors;
  for (std::size_t k = 1; k < pairs.size(); ++k) {
    const auto [pa, ga] = pairs[k - 1];
    const auto [pb, gb] = pairs[k];
    if (gt_rank[gb] != gt_rank[ga] + 1 || pred_rank[pb] != pred_rank[pa] + 1) continue;
    errors.push_back((pred_z[pb] - pred_z[pa]) - (gt_z[gb] - gt_z[ga]));
  }
  return errors;
}

inline std::optional<double> rms(std::span<const double> errors) {
  if (errors.empty()) return std::nullopt;
  double s = 0.0;
  for (double e : errors) s += e * e;
  return std::sqrt(s / static_cast<double>(errors.size()));
}

/// Internodal RMSE; absent with fewer than two matched pairs or no
/// consecutive matched internode.
inline std::optional<double> rmse_internodal(std::span<const double> pred_z, std::span<const double> gt_z,
                                             const MatchResult& m) {
  if (m.pairs.size() < 2) return std::nullopt;
  return rms(internode_errors(pred_z, gt_z, m));
}

struct TreeEval {
  std::string tree_id;
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::optional<double> rmse_internodal_m;
  std::vector<double> internode_errors;
  /// Predictions exist but no truth was supplied; every prediction is an FP.
  bool missing_truth = false;
};

struct EvalReport {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::optional<double> rmse_internodal_m;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  std::vector<TreeEval> trees;
};

inline TreeEval evaluate_tree(std::string tree_id, std::span<const double> pred_z, std::span<const double> gt_z,
                              const EvalConfig& cfg) {
  cfg.validate();
  TreeEval t;
  t.tree_id = std::move(tree_id);
  const auto m = match_whorls(pred_z, gt_z, cfg.match_tol_m);
  t.tp = m.pairs.size();
  t.fp = m.unmatched_pred.size();
  t.fn = m.unmatched_gt.size();
  t.precision = precision(t.tp, t.fp);
  t.recall = recall(t.tp, t.fn);
  t.f1 = f1(t.precision, t.recall);
  if (m.pairs.size() >= 2) t.internode_errors = internode_errors(pred_z, gt_z, m);
  t.rmse_internodal_m = m.pairs.size() >= 2 ? rms(t.internode_errors) : std::nullopt;
  return t;
}

using HeightsByTree = std::map<std::string, std::vector<double>>;

/// Pools TP/FP/FN over trees before applying the metric formulas; per-tree
/// and macro-averaged figures are kept alongside.
inline EvalReport evaluate_batch(const HeightsByTree& predictions, const HeightsByTree& truths, const EvalConfig& cfg) {
  cfg.validate();
  EvalReport r;
  std::map<std::string, bool> ids;
  for (const auto& [id, _] : truths) ids[id] = true;
  for (const auto& [id, _] : predictions) ids.try_emplace(id, false);

  static const std::vector<double> none;
  std::vector<double> all_errors;
  for (const auto& [id, has_truth] : ids) {
    const auto pit = predictions.find(id);
    const auto& pred = pit != predictions.end() ? pit->second : none;
    const auto tit = truths.find(id);
    const auto& gt = tit != truths.end() ? tit->second : none;
    auto t = evaluate_tree(id, pred, gt, cfg);
    t.missing_truth = !has_truth;
    r.tp += t.tp;
    r.fp += t.fp;
    r.fn += t.fn;
    all_errors.insert(all_errors.end(), t.internode_errors.begin(), t.internode_errors.end());
    r.trees.push_back(std::move(t));
  }
  r.precision = precision(r.tp, r.fp);
  r.recall = recall(r.tp, r.fn);
  r.f1 = f1(r.precision, r.recall);
  r.rmse_internodal_m = rms(all_errors);
  if (!r.trees.empty()) {
    for (const auto& t : r.trees) {
      r.macro_precision += t.precision;
      r.macro_recall += t.recall;
      r.macro_f1 += t.f1;
    }
    const auto n = static_cast<double>(r.trees.size());
    r.macro_precision /= n;
    r.macro_recall /= n;
    r.macro_f1 /= n;
  }
  return r;
}

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json report_to_json(const EvalReport& r) {
  auto trees = nlohmann::json::array();
  for (const auto& t : r.trees) {
    trees.push_back({{"tree_id", t.tree_id},
                     {"tp", t.tp},
                     {"fp", t.fp},
                     {"fn", t.fn},
                     {"precision", t.precision},
                     {"recall", t.recall},
                     {"f1", t.f1},
                     {"rmse_internodal_m", optional_json(t.rmse_internodal_m)},
                     {"missing_truth", t.missing_truth}});
  }
  return {{"tp", r.tp},
          {"fp", r.fp},
          {"fn", r.fn},
          {"precision", r.precision},
          {"recall", r.recall},
          {"f1", r.f1},
          {"rmse_internodal_m", optional_json(r.rmse_internodal_m)},
          {"macro", {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f1", r.macro_f1}}},
          {"trees", std::move(trees)}};
}

/// Plain-text table: one row per tree, then pooled and macro rows.
inline std::string format_report_table(const EvalReport& r) {
  std::string out;
  char buf[256];
  auto rmse_text = [](const std::optional<double>& v) {
    char b[32];
    if (!v) return std::string("-");
    std::snprintf(b, sizeof(b), "%.3f", *v);
    return std::string(b);
  };
  std::snprintf(buf, sizeof(buf), "%-20s %5s %5s %5s %10s %8s %9s %10s\n", "tree", "TP", "FP", "FN", "Precision",
                "Recall", "F1-score", "RMSE (m)");
  out += buf;
  for (const auto& t : r.trees) {
    std::snprintf(buf, sizeof(buf), "%-20s %5zu %5zu %5zu %10.2f %8.2f %9.2f %10s\n", t.tree_id.c_str(), t.tp, t.fp,
                  t.fn, t.precision, t.recall, t.f1, rmse_text(t.rmse_internodal_m).c_str());
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "%-20s %5zu %5zu %5zu %10.2f %8.2f %9.2f %10s\n", "all (pooled)", r.tp, r.fp, r.fn,
                r.precision, r.recall, r.f1, rmse_text(r.rmse_internodal_m).c_str());
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-20s %5s %5s %5s %10.2f %8.2f %9.2f %10s\n", "mean over trees", "", "", "",
                r.macro_precision, r.macro_recall, r.macro_f1, "");
  out += buf;
  return out;
}

}  // namespace whorl
