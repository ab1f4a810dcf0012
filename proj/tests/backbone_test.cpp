#include <gtest/gtest.h>

#include "egot2/backbone.hpp"
#include "test_util.hpp"

using namespace egot2;

namespace {

SynergySpec five_task_synergy() {
  SynergySpec s;
  s.latents = {{8, LatentKind::pattern, 1.0, 0.5}, {16, LatentKind::pulse, 2.0, 0.0}};
  s.task_dependency = {{"LOC", {1}}, {"SCC", {0}}, {"REC", {0}}, {"ANT", {0}}, {"TLK", {0}}};
  s.noise_sigma = 0.3;
  return s;
}

struct Fixture {
  SuiteConfig suite = default_suite_config();
  SynergySpec syn = five_task_synergy();
  BackboneConfig bc;

  const TaskSpec& task(const std::string& id) const { return find_task(suite.tasks, id); }
  BackboneSpec spec(const std::string& id) const { return backbone_spec_for(task(id), suite.modality, bc); }
  Sample sample(const std::string& id, std::uint64_t seed = 1) const {
    return generate_dataset(task(id), suite.modality, syn, 1, seed).samples[0];
  }
};

}  // namespace

TEST(Adapt, WindowCountFormula) {
  EXPECT_EQ(window_count(16, 8, 4), 3);
  EXPECT_EQ(window_count(8, 8, 4), 1);
  EXPECT_EQ(window_count(16, 4, 2), 7);
  EXPECT_EQ(window_count(8, 2, 1.5), 5);
  EXPECT_EQ(window_count(8, 4, 3), 2);
}

TEST(Adapt, ResampleKeepsEndpoints) {
  Matrix<float> x(4, 2);
  x << 0, 10, 1, 11, 2, 12, 3, 13;
  const Matrix<float> up = resample_linear(x, 7);
  const float want[] = {0, 0.5f, 1, 1.5f, 2, 2.5f, 3};
  for (int j = 0; j < 7; ++j) {
    EXPECT_FLOAT_EQ(up(j, 0), want[j]);
    EXPECT_FLOAT_EQ(up(j, 1), want[j] + 10);
  }
  Matrix<float> y(7, 1);
  y << 0, 1, 2, 3, 4, 5, 6;
  const Matrix<float> down = resample_linear(y, 3);
  EXPECT_FLOAT_EQ(down(0, 0), 0);
  EXPECT_FLOAT_EQ(down(1, 0), 3);
  EXPECT_FLOAT_EQ(down(2, 0), 6);
  EXPECT_TRUE(resample_linear(x, 4) == x);
}

TEST(Adapt, LongerSpanIsExcluded) {
  Fixture f;
  auto a = adapt_input(f.sample("SCC"), f.task("SCC"), f.suite.modality, f.spec("ANT"), 4.0);
  ASSERT_TRUE(std::holds_alternative<Excluded>(a));
  EXPECT_NE(std::get<Excluded>(a).reason.find("16.0 s"), std::string::npos) << std::get<Excluded>(a).reason;
}

TEST(Adapt, SlidingWindowsOverLongerClip) {
  Fixture f;
  auto a = std::get<AdaptedInput>(adapt_input(f.sample("ANT"), f.task("ANT"), f.suite.modality, f.spec("LOC"), 4.0));
  ASSERT_EQ(a.windows(), 3u);
  EXPECT_EQ(a.window_start_s, (std::vector<double>{0, 4, 8}));
  for (const auto& v : a.video) EXPECT_EQ(v.rows(), 16);
  // Same rate, so window w starts at primary frame 8w.
  EXPECT_DOUBLE_EQ(a.positions[2][0], 16.0);
  const Sample x = f.sample("ANT");
  EXPECT_TRUE(a.video[1] == x.video.middleRows(8, 16));
}

TEST(Adapt, RateChangeMapsPositionsOntoPrimaryFrames) {
  Fixture f;
  auto a = std::get<AdaptedInput>(adapt_input(f.sample("SCC"), f.task("SCC"), f.suite.modality, f.spec("REC"), 4.0));
  ASSERT_EQ(a.windows(), 1u);
  ASSERT_EQ(a.video[0].rows(), 32);
  EXPECT_DOUBLE_EQ(a.positions[0].front(), 0.0);
  EXPECT_DOUBLE_EQ(a.positions[0].back(), 15.0);
  EXPECT_NEAR(a.positions[0][1], 15.0 / 31.0, 1e-12);
}

TEST(Adapt, UnimodalPathwayForVideoOnlyClips) {
  Fixture f;
  auto a = std::get<AdaptedInput>(adapt_input(f.sample("SCC"), f.task("SCC"), f.suite.modality, f.spec("TLK"), 4.0));
  EXPECT_TRUE(a.unimodal);
  EXPECT_EQ(a.windows(), 2u);
  auto b = std::get<AdaptedInput>(adapt_input(f.sample("TLK"), f.task("TLK"), f.suite.modality, f.spec("TLK"), 4.0));
  EXPECT_FALSE(b.unimodal);
  ASSERT_EQ(b.audio[0].rows(), 32);
  // Audio actually moves the features.
  FrozenModel<double> m(TaskModel<double>(f.spec("TLK"), 3));
  auto with_audio = m.extract_features(b);
  b.audio[0].setZero();
  auto silent = m.extract_features(b);
  EXPECT_GT((with_audio.values - silent.values).norm(), 1e-6);
}

TEST(Model, FeatureAndHeadShapes) {
  Fixture f;
  f.bc.width = {{"REC", 12}};
  for (const char* id : {"LOC", "SCC", "REC", "ANT", "TLK"}) {
    TaskModel<double> m(f.spec(id), 0);
    ag::Tape<double> t;
    const Sample x = f.sample(id);
    auto feats = m.features(t, x);
    EXPECT_EQ(feats.rows(), f.task(id).frames()) << id;
    EXPECT_EQ(feats.cols(), std::string(id) == "REC" ? 12 : 32) << id;
    auto z = m.logits(t, feats);
    const LabelSpace& l = f.task(id).label_space;
    if (l.kind == LabelKind::frame_index) {
      EXPECT_EQ(z.rows(), 1);
      EXPECT_EQ(z.cols(), 16);
    } else {
      EXPECT_EQ(z.rows(), l.arity()) << id;
      EXPECT_EQ(z.cols(), l.classes()) << id;
    }
  }
  EXPECT_EQ(find_task(f.suite.tasks, "REC").label_space.classes(), 8);
}

TEST(Model, TransformerArchAndDownsample) {
  Fixture f;
  f.bc.arch = BackboneArch::transformer;
  f.bc.downsample = 2;
  TaskModel<double> m(f.spec("REC"), 0);
  auto a = std::get<AdaptedInput>(adapt_input(f.sample("REC"), f.task("REC"), f.suite.modality, f.spec("REC"), 4.0));
  FrozenModel<double> fm(std::move(m));
  auto fs = fm.extract_features(a);
  EXPECT_EQ(fs.values.rows(), 16);
  EXPECT_EQ(fs.layout.rows(), 16u);
  EXPECT_DOUBLE_EQ(fs.layout.position[0], 0.5);
  f.bc.downsample = 3;
  EXPECT_THROW(f.spec("REC"), ValidationError);
}

TEST(Model, FreezingMarksEveryParameter) {
  Fixture f;
  FrozenModel<double> m(TaskModel<double>(f.spec("SCC"), 0));
  for (auto* p : m.model().params().all()) EXPECT_FALSE(p->trainable) << p->name;
  EXPECT_GT(m.parameter_count(), 0);
}

TEST(StageOne, DeterministicAndRoundTrips) {
  Fixture f;
  f.bc.width = {{"SCC", 8}};
  Dataset d = generate_dataset(f.task("SCC"), f.suite.modality, f.syn, 24, 5);
  auto parts = split(d, {0.5, 0.25, 0.25}, 5);
  FitOptions fit{3, 4, 1e-3, 1e-4, 7};
  auto a = train_task_model<double>(f.spec("SCC"), parts[0], parts[1], fit);
  auto b = train_task_model<double>(f.spec("SCC"), parts[0], parts[1], fit);
  EXPECT_TRUE(a.checkpoint == b.checkpoint);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  EXPECT_EQ(a.loss_curve.size(), 3u);
  EXPECT_EQ(a.val_metrics.count("mAP"), 1u);
  EXPECT_EQ(a.checkpoint.meta.at("kind"), "backbone");

  const Bytes bytes = encode_checkpoint(a.checkpoint);
  auto back = TaskModel<float>::from_checkpoint(decode_checkpoint(bytes));
  EXPECT_EQ(back.spec(), f.spec("SCC"));
  EXPECT_EQ(encode_checkpoint(back.to_checkpoint(a.checkpoint.meta)), bytes);
}

TEST(StageOne, RejectsMismatchedData) {
  Fixture f;
  Dataset rec = generate_dataset(f.task("REC"), f.suite.modality, f.syn, 4, 5);
  FitOptions fit{1, 2, 1e-3, 0, 0};
  EXPECT_THROW(train_task_model<double>(f.spec("SCC"), rec, Dataset{}, fit), ValidationError);
  auto spec = f.spec("REC");
  spec.label_space.n_classes = 5;
  EXPECT_THROW(train_task_model<double>(spec, rec, Dataset{}, fit), ValidationError);
}

TEST(StageOne, LearnsAnEasyTask) {
  Fixture f;
  f.syn.noise_sigma = 0.1;
  Dataset d = generate_dataset(f.task("REC"), f.suite.modality, f.syn, 120, 9);
  auto parts = split(d, {0.6, 0.2, 0.2}, 9);
  FitOptions fit{15, 8, 3e-3, 1e-4, 0};
  f.bc.default_width = 16;
  auto r = train_task_model<float>(f.spec("REC"), parts[0], parts[1], fit);
  EXPECT_LT(r.loss_curve.back(), r.loss_curve.front());
  EXPECT_GT(r.val_metrics.at("accuracy"), 0.9);
}
