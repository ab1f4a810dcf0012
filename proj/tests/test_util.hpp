#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "egot2/nn.hpp"

namespace egot2::testing {

// Largest |analytic - numeric| / max(|analytic| + |numeric|, floor) over every element
// of `params`, with numeric gradients from central differences of step h.
// `build` must construct the scalar loss on the given tape.
template <class Build>
double max_relative_grad_error(const std::vector<Parameter<double>*>& params, Build&& build, double h = 1e-5,
                               double floor = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    ag::Tape<double> t;
    t.backward(build(t));
  }
  auto eval = [&] {
    ag::Tape<double> t;
    return build(t).value()(0, 0);
  };
  double worst = 0;
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double keep = p->value.data()[i];
      p->value.data()[i] = keep + h;
      const double up = eval();
      p->value.data()[i] = keep - h;
      const double down = eval();
      p->value.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p->grad.data()[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor));
    }
  }
  return worst;
}

}  // namespace egot2::testing

#include "egot2/train_eval.hpp"

namespace egot2::testing {

// Two small tasks sharing one latent, for composition and gradient tests.
struct MicroSuite {
  ModalityConfig modality{4, 2, 4.0};
  std::vector<TaskSpec> tasks;
  SynergySpec synergy;

  MicroSuite() {
    TaskSpec a;
    a.task_id = "A";
    a.prompt_token = "<A>";
    a.span_s = 4;
    a.frame_rate_hz = 1;
    a.label_space = {LabelKind::binary, 0, 2, 0, 0, ""};
    TaskSpec b = a;
    b.task_id = "B";
    b.prompt_token = "<B>";
    b.frame_rate_hz = 2;
    b.label_space = {LabelKind::categorical, 0, 3, 0, 0, "b"};
    tasks = {a, b};
    synergy.latents = {LatentSpec{4, LatentKind::pattern, 1.0, 0.0}};
    synergy.task_dependency = {{"A", {0}}, {"B", {0}}};
    synergy.noise_sigma = 0.1;
  }

  BackboneSpec backbone(const std::string& id, int width) const {
    BackboneConfig c;
    c.layers = 1;
    c.default_width = width;
    return backbone_spec_for(find_task(tasks, id), modality, c);
  }
};

// Max over translator tensors of ||g_sum - g_joint||_inf / ||g_joint||_inf, where g_sum
// accumulates one backward pass per task batch and g_joint differentiates the summed loss.
template <class S>
double aggregation_gap(std::uint64_t seed, int clips_per_task = 3) {
  MicroSuite m;
  std::vector<FrozenModel<S>> bbs{FrozenModel<S>(TaskModel<S>(m.backbone("A", 6), seed)),
                                  FrozenModel<S>(TaskModel<S>(m.backbone("B", 5), seed + 1))};
  FusionConfig f;
  f.depth = 1;
  f.width = 8;
  f.heads = 2;
  GeneralTranslator<S> g({f, {1, 2, 2}, {{"A", "A", 6}, {"B", "B", 5}}, m.tasks}, seed + 2);
  std::vector<std::vector<CachedClip<S>>> clips;
  std::vector<TaskBatch<S>> batches;
  for (const auto& t : m.tasks)
    clips.push_back(prepare_general_clips<S>(generate_dataset(t, m.modality, m.synergy, clips_per_task, seed + 3), t, m.modality,
                                             bbs, 1.0, false));
  for (std::size_t k = 0; k < m.tasks.size(); ++k) {
    TaskBatch<S> b{m.tasks[k].task_id, {}};
    for (const auto& c : clips[k]) b.clips.push_back(&c);
    batches.push_back(std::move(b));
  }
  auto grads = [&](bool per_task) {
    g.params().zero_grad();
    accumulate_task_gradients(g, batches, per_task, false);
    std::vector<Matrix<S>> out;
    for (auto* p : g.params().all()) out.push_back(p->grad);
    return out;
  };
  const auto joint = grads(false);
  const auto summed = grads(true);
  double worst = 0;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    const double scale = static_cast<double>(joint[i].cwiseAbs().maxCoeff());
    const double diff = static_cast<double>((summed[i] - joint[i]).cwiseAbs().maxCoeff());
    if (scale == 0) {
      if (diff > 0) return std::numeric_limits<double>::infinity();
      continue;
    }
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

}  // namespace egot2::testing
