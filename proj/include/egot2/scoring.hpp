#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "egot2/metrics.hpp"
#include "egot2/task_suite.hpp"

namespace egot2 {

struct Prediction {
  std::optional<Label> label;  // empty: the output could not be mapped back to a label
  double score = 0.0;          // binary tasks: confidence of the positive class
};

// Row-wise argmax of a (arity x classes) logit matrix.
template <class S>
Prediction prediction_from_logits(const LabelSpace& space, const Matrix<S>& logits) {
  Prediction p;
  Label y;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    logits.row(r).maxCoeff(&best);
    y.push_back(static_cast<int>(best));
  }
  if (space.kind == LabelKind::binary) {
    const double a = static_cast<double>(logits(0, 0)), b = static_cast<double>(logits(0, 1));
    p.score = 1.0 / (1.0 + std::exp(a - b));
  }
  p.label = std::move(y);
  return p;
}

// Metrics for one task. Names: accuracy, mAP (binary), loc_error_s (frame_index), ed_at_z (sequence).
// Undecodable outputs are wrong for accuracy, take the farthest frame for loc_error_s and
// count as an empty sequence for ed_at_z.
inline std::map<std::string, double> score_task(const TaskSpec& task, const std::vector<Prediction>& preds,
                                                const std::vector<Label>& labels) {
  if (preds.size() != labels.size()) throw ValidationError("score_task: predictions and labels differ in length");
  std::map<std::string, double> out;
  std::vector<std::optional<Label>> pl;
  for (const auto& p : preds) pl.push_back(p.label);
  out["accuracy"] = metrics::accuracy(pl, labels);
  const LabelSpace& l = task.label_space;
  if (l.kind == LabelKind::frame_index) {
    std::vector<int> pf, gf;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int g = labels[i][0];
      gf.push_back(g);
      pf.push_back(pl[i] && pl[i]->size() == 1 ? (*pl[i])[0] : (g < l.n_frames / 2 ? l.n_frames - 1 : 0));
    }
    out["loc_error_s"] = metrics::loc_error(pf, gf, task.frame_rate_hz);
  } else if (l.kind == LabelKind::binary) {
    std::vector<double> s;
    std::vector<int> pos;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s.push_back(preds[i].score);
      pos.push_back(labels[i][0]);
    }
    if (std::count(pos.begin(), pos.end(), 1) > 0) out["mAP"] = metrics::average_precision(s, pos);
  } else if (l.kind == LabelKind::sequence) {
    std::vector<std::vector<int>> ps;
    for (const auto& p : pl) ps.push_back(p ? *p : std::vector<int>{});
    out["ed_at_z"] = metrics::ed_at_z(ps, labels, l.horizon);
  }
  return out;
}

// The metric a task is judged by, and whether larger is better.
inline std::pair<std::string, bool> headline_metric(const TaskSpec& task) {
  switch (task.label_space.kind) {
    case LabelKind::frame_index: return {"loc_error_s", false};
    case LabelKind::sequence: return {"ed_at_z", false};
    default: return {"accuracy", true};
  }
}

}  // namespace egot2
