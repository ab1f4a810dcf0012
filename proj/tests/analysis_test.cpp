#include <gtest/gtest.h>

#include "egot2/analysis.hpp"
#include "test_util.hpp"

using namespace egot2;
using egot2::testing::MicroSuite;

namespace {

FusionConfig capture_fusion(bool capture = true) {
  FusionConfig f;
  f.depth = 1;
  f.width = 8;
  f.heads = 2;
  f.capture_attention = capture;
  return f;
}

struct Bench {
  MicroSuite m;
  std::vector<FrozenModel<double>> bbs{FrozenModel<double>(TaskModel<double>(m.backbone("A", 6), 1)),
                                       FrozenModel<double>(TaskModel<double>(m.backbone("B", 5), 2))};
  Dataset val = generate_dataset(m.tasks[0], m.modality, m.synergy, 6, 4);

  Translator<double> translator(bool capture = true) const {
    return Translator<double>({capture_fusion(capture), {{"A", "A", 6}, {"B", "B", 5}}, "A", m.tasks[0], false}, 7);
  }
};

}  // namespace

TEST(Analysis, ColumnMassAndPooling) {
  nn::HeadMaps<double> heads(2, Matrix<double>(2, 3));
  heads[0] << 0.5, 0.25, 0.25, 0.1, 0.2, 0.7;
  heads[1] << 0.0, 1.0, 0.0, 0.3, 0.3, 0.4;
  const auto mass = column_mass(heads, {1});
  EXPECT_NEAR(mass[0], 0.4, 1e-15);
  EXPECT_NEAR(mass[1], 0.5, 1e-15);
  EXPECT_NEAR(mass[2], 1.1, 1e-15);
  std::vector<TokenInfo> meta{{0, 0, 0, 0}, {1, 0, 0, 0}, {1, 0, 1, 1}};
  const auto pooled = pool_by_source(mass, meta, 2);
  EXPECT_NEAR(pooled[0], 0.4, 1e-15);
  EXPECT_NEAR(pooled[1], 1.6, 1e-15);
  EXPECT_THROW(pool_by_source(mass, {meta[0]}, 2), ShapeError);
  EXPECT_THROW(column_mass(nn::HeadMaps<double>{}, {0}), ValidationError);
}

TEST(Analysis, RelationMatrixRowsAreDistributions) {
  Bench s;
  const auto tr = s.translator();
  const auto rel = relation_matrix_s(tr, s.bbs, s.val, s.m.modality, 1.0);
  EXPECT_EQ(rel.rows, (std::vector<std::string>{"A"}));
  EXPECT_EQ(rel.cols, (std::vector<std::string>{"A", "B"}));
  EXPECT_NEAR(rel.normalized.row(0).sum(), 1.0, 1e-12);
  EXPECT_GT(rel.at("A", "B"), 0.0);
  EXPECT_THROW(rel.at("A", "C"), ValidationError);
}

TEST(Analysis, PoolingConservesAttentionMass) {
  Bench s;
  const auto tr = s.translator();
  std::vector<const FrozenModel<double>*> bbs{&s.bbs[0], &s.bbs[1]};
  for (const auto& c : prepare_clips<double>(s.val, s.m.tasks[0], s.m.modality, bbs, {0, 1}, 1.0, false)) {
    std::vector<double> cols;
    std::vector<TokenInfo> meta;
    const auto pooled = egot2s_clip_mass(tr, c, &cols, &meta);
    double a = 0, b = 0;
    for (double x : cols) a += x;
    for (double x : pooled) b += x;
    EXPECT_NEAR(a, b, 1e-12);
    // Every attention row is a distribution, so the total is heads x readout rows.
    const double rows = a / 2.0;
    EXPECT_NEAR(rows, std::round(rows), 1e-9);
    EXPECT_GE(std::round(rows), 1.0);
  }
}

TEST(Analysis, CaptureMustBeEnabled) {
  Bench s;
  const auto tr = s.translator(false);
  EXPECT_THROW(relation_matrix_s(tr, s.bbs, s.val, s.m.modality, 1.0), Incompatible);
  EXPECT_THROW(top_segments(tr, s.bbs, s.val, s.m.modality, 1.0, "B", 3), Incompatible);
}

TEST(Analysis, TopSegmentsAreRankedAndBounded) {
  Bench s;
  const auto tr = s.translator();
  const auto top = top_segments(tr, s.bbs, s.val, s.m.modality, 1.0, "B", 4);
  ASSERT_EQ(top.size(), 4u);
  for (std::size_t i = 1; i < top.size(); ++i) EXPECT_GE(top[i - 1].weight, top[i].weight);
  EXPECT_TRUE(top_segments(tr, s.bbs, s.val, s.m.modality, 1.0, "B", 0).empty());
  EXPECT_THROW(top_segments(tr, s.bbs, s.val, s.m.modality, 1.0, "Z", 3), ValidationError);
}

TEST(Analysis, GeneralTranslatorRelations) {
  Bench s;
  GeneralTranslator<double> g({capture_fusion(), {1, 2, 2}, {{"A", "A", 6}, {"B", "B", 5}}, s.m.tasks}, 3);
  std::vector<Dataset> vals{s.val, generate_dataset(s.m.tasks[1], s.m.modality, s.m.synergy, 4, 5)};
  const auto rel = relation_matrix_g(g, s.bbs, vals, s.m.modality, 1.0, false);
  EXPECT_EQ(rel.rows, (std::vector<std::string>{"A", "B"}));
  for (Eigen::Index r = 0; r < 2; ++r) EXPECT_NEAR(rel.normalized.row(r).sum(), 1.0, 1e-12);
}

TEST(Analysis, CsvRoundTripAndReportFiles) {
  TaskRelationMatrix m;
  m.rows = {"SCC", "REC"};
  m.cols = {"SCC", "REC", "OBJ"};
  m.raw.resize(2, 3);
  m.raw << 3, 1, 0, 0.1, 0.2, 0.3;
  normalize_rows(m);
  EXPECT_DOUBLE_EQ(m.normalized(0, 0), 0.75);
  EXPECT_DOUBLE_EQ(m.normalized(1, 2), 0.5);
  const auto back = parse_relations_csv(relations_csv(m));
  EXPECT_EQ(back.rows, m.rows);
  EXPECT_EQ(back.cols, m.cols);
  EXPECT_TRUE(back.normalized == m.normalized);
  EXPECT_THROW(parse_relations_csv(""), FormatError);
  EXPECT_THROW(parse_relations_csv("task,A,B\nX,1\n"), FormatError);

  const Bytes ppm = heatmap_ppm(m.normalized, 2);
  const std::string header = "P6\n6 4\n255\n";
  EXPECT_EQ(std::string(ppm.begin(), ppm.begin() + static_cast<long>(header.size())), header);
  EXPECT_EQ(ppm.size(), header.size() + 6 * 4 * 3);

  const fs::path dir = fs::temp_directory_path() / "egot2_analysis_report";
  fs::remove_all(dir);
  Timeline t{"clip-1", {{0, 0, 0, 0.0}, {1, 0, 0, 0.0}}, {0.25, 0.75}};
  emit_report(dir, m, {t}, {"SCC", "REC"});
  for (const char* f : {"relations.csv", "relations.json", "relations.ppm", "timelines/clip-1.csv"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(read_text(dir / "timelines/clip-1.csv"), "token,source,window,frame,position,mass\n0,SCC,0,0,0,0.25\n1,REC,0,0,0,0.75\n");
}
