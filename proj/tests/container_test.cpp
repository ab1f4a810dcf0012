#include <gtest/gtest.h>

#include <filesystem>

#include "egot2/container.hpp"

using namespace egot2;

TEST(ArrayBlob, HeaderLayout) {
  Matrix<float> m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  const Bytes b = encode_array(m);
  ASSERT_EQ(b.size(), 4u + 3u + 8u + 24u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "EGT2");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5], 1);
  EXPECT_EQ(b[6], 2);
  // Little-endian u32 dims.
  EXPECT_EQ((Bytes{b.begin() + 7, b.begin() + 15}), (Bytes{2, 0, 0, 0, 3, 0, 0, 0}));
  // 1.0f = 0x3f800000, little-endian.
  EXPECT_EQ((Bytes{b.begin() + 15, b.begin() + 19}), (Bytes{0x00, 0x00, 0x80, 0x3f}));
  const Matrix<float> back = decode_array(b);
  EXPECT_TRUE(back == m);
}

TEST(ArrayBlob, RankOneReadsAsRow) {
  Bytes b{'E', 'G', 'T', '2', 1, 1, 1, 2, 0, 0, 0};
  detail::put_f32(b, -0.5f);
  detail::put_f32(b, 7.25f);
  const Matrix<float> m = decode_array(b);
  ASSERT_EQ(m.rows(), 1);
  ASSERT_EQ(m.cols(), 2);
  EXPECT_EQ(m(0, 1), 7.25f);
}

TEST(ArrayBlob, CorruptInputsAreFormatErrors) {
  Matrix<float> m = Matrix<float>::Ones(2, 2);
  const Bytes good = encode_array(m);
  auto expect_field = [](const Bytes& b, const std::string& field) {
    try {
      decode_array(b, "x");
      FAIL() << "no error for " << field;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("field: " + field), std::string::npos) << e.what();
    }
  };
  Bytes b = good;
  b[1] = 'X';
  expect_field(b, "magic");
  b = good;
  b[4] = 9;
  expect_field(b, "version");
  b = good;
  b[5] = 3;
  expect_field(b, "dtype");
  b = good;
  b[6] = 4;
  expect_field(b, "rank");
  expect_field(Bytes(good.begin(), good.begin() + 5), "header");
  expect_field(Bytes(good.begin(), good.end() - 1), "payload");
  b = good;
  b.push_back(0);
  expect_field(b, "payload");
}

TEST(ArrayBlob, NonFiniteValuesSurvive) {
  Matrix<float> m(1, 3);
  m << std::numeric_limits<float>::infinity(), -0.0f, std::numeric_limits<float>::denorm_min();
  const Matrix<float> back = decode_array(encode_array(m));
  EXPECT_EQ(std::memcmp(back.data(), m.data(), sizeof(float) * 3), 0);
}

TEST(CheckpointFile, RoundTripIsBitExact) {
  Checkpoint ck;
  ck.meta = {{"kind", "backbone"}, {"task", "SCC"}, {"stride_s", 4.0}};
  ck.arrays.emplace_back("a.w", Matrix<float>::Random(3, 5));
  ck.arrays.emplace_back("b", Matrix<float>::Random(1, 7));
  ck.arrays.emplace_back("c.empty", Matrix<float>(0, 4));
  const Bytes bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_TRUE(back == ck);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  ASSERT_NE(back.find("b"), nullptr);
  EXPECT_EQ(back.find("nope"), nullptr);

  const fs::path p = fs::temp_directory_path() / "egot2_ck_test.egt2";
  save_checkpoint_file(p, ck);
  EXPECT_TRUE(load_checkpoint_file(p) == ck);
  EXPECT_EQ(digest_path(p), digest_bytes(bytes));
}

TEST(CheckpointFile, RejectsTruncationAndArrays) {
  Checkpoint ck;
  ck.arrays.emplace_back("w", Matrix<float>::Ones(4, 4));
  const Bytes bytes = encode_checkpoint(ck);
  for (std::size_t cut : {std::size_t{3}, std::size_t{9}, std::size_t{14}, bytes.size() - 1})
    EXPECT_THROW(decode_checkpoint(Bytes(bytes.begin(), bytes.begin() + cut)), FormatError) << cut;
  EXPECT_THROW(decode_checkpoint(encode_array(Matrix<float>::Ones(1, 1))), FormatError);
}

TEST(Digest, FnvKnownValues) {
  // FNV-1a 64 reference values.
  EXPECT_EQ(digest_bytes({}), "cbf29ce484222325");
  EXPECT_EQ(digest_bytes({'a'}), "af63dc4c8601ec8c");
  EXPECT_EQ(digest_bytes({'f', 'o', 'o', 'b', 'a', 'r'}), "85944171f73967e8");
}

TEST(Digest, DirectoryDigestTracksNamesAndContents) {
  const fs::path d = fs::temp_directory_path() / "egot2_digest_dir";
  fs::remove_all(d);
  fs::create_directories(d / "sub");
  write_text(d / "a.txt", "one");
  write_text(d / "sub/b.txt", "two");
  const std::string first = digest_path(d);
  EXPECT_EQ(digest_path(d), first);
  write_text(d / "sub/b.txt", "twO");
  EXPECT_NE(digest_path(d), first);
  write_text(d / "sub/b.txt", "two");
  EXPECT_EQ(digest_path(d), first);
  fs::rename(d / "a.txt", d / "c.txt");
  EXPECT_NE(digest_path(d), first);
}
