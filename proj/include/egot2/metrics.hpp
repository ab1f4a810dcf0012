#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <optional>
#include <vector>

#include "egot2/errors.hpp"

namespace egot2::metrics {

namespace detail {
inline void same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ValidationError(std::string(what) + ": predictions and labels differ in length");
}
}  // namespace detail

// Exact-match accuracy; an empty optional (an Incorrect decode) counts as wrong.
template <class L>
double accuracy(const std::vector<std::optional<L>>& preds, const std::vector<L>& labels) {
  detail::same_length(preds.size(), labels.size(), "accuracy");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += preds[i].has_value() && *preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// Area under the precision-recall curve from a sweep over every distinct score
// threshold (tied scores enter together): sum_i (R_i - R_{i-1}) * P_i.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& positive) {
  detail::same_length(scores.size(), positive.size(), "mAP");
  const long n_pos = std::count_if(positive.begin(), positive.end(), [](int p) { return p != 0; });
  if (n_pos == 0) throw ValidationError("mAP: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0, prev_recall = 0;
  long tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += positive[order[j]] != 0;
      ++seen;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

// Mean |pred - gt| / frame_rate, in seconds.
inline double loc_error(const std::vector<int>& pred, const std::vector<int>& gt, double frame_rate_hz) {
  detail::same_length(pred.size(), gt.size(), "loc_error");
  if (!(frame_rate_hz > 0)) throw ValidationError("loc_error: frame rate must be > 0");
  if (gt.empty()) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) total += std::abs(pred[i] - gt[i]) / frame_rate_hz;
  return total / static_cast<double>(gt.size());
}

// Two-row dynamic program.
inline int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Mean Levenshtein(pred, gt) / Z.
inline double ed_at_z(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& gt, int horizon) {
  detail::same_length(pred.size(), gt.size(), "ed_at_z");
  if (horizon < 1) throw ValidationError("ed_at_z: horizon must be >= 1");
  if (gt.empty()) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) total += static_cast<double>(levenshtein(pred[i], gt[i])) / horizon;
  return total / static_cast<double>(gt.size());
}

}  // namespace egot2::metrics
