#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <vector>

namespace oracle {

// Edit distance straight from the recursive definition, memoized on (i, j).
inline int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<std::size_t, std::size_t>, int> memo;
  std::function<int(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> int {
    if (i == 0) return static_cast<int>(j);
    if (j == 0) return static_cast<int>(i);
    auto it = memo.find({i, j});
    if (it != memo.end()) return it->second;
    const int r = std::min({d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1])});
    memo[{i, j}] = r;
    return r;
  };
  return d(a.size(), b.size());
}

// Precision-recall sweep by brute force: for each distinct threshold, count every item.
inline double average_precision(const std::vector<double>& s, const std::vector<int>& pos) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double n_pos = 0;
  for (int p : pos) n_pos += p;
  double ap = 0, prev_r = 0;
  for (double th : thresholds) {
    double tp = 0, sel = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= th) {
        sel += 1;
        tp += pos[i];
      }
    const double r = tp / n_pos;
    ap += (r - prev_r) * (tp / sel);
    prev_r = r;
  }
  return ap;
}

}  // namespace oracle

namespace oracle {

// Mean absolute frame offset in seconds, summed in integers first.
inline double loc_error(const std::vector<int>& pred, const std::vector<int>& gold, double rate_hz) {
  long total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) total += pred[i] > gold[i] ? pred[i] - gold[i] : gold[i] - pred[i];
  return static_cast<double>(total) / rate_hz / static_cast<double>(pred.size());
}

}  // namespace oracle
