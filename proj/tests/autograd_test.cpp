#include <gtest/gtest.h>

#include "egot2/nn.hpp"
#include "test_util.hpp"

using namespace egot2;
using egot2::testing::max_relative_grad_error;

namespace {

Parameter<double> random_param(const char* name, Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  Parameter<double> p;
  p.name = name;
  p.value = normal_init<double>(r, c, 1.0, rng);
  p.zero_grad();
  return p;
}

}  // namespace

TEST(Autograd, MatmulAddReluGradients) {
  auto a = random_param("a", 3, 4, 1), b = random_param("b", 4, 5, 2), c = random_param("c", 1, 5, 3);
  double err = max_relative_grad_error({&a, &b, &c}, [&](ag::Tape<double>& t) {
    auto y = ag::relu(ag::add_row(ag::matmul(t.param(a), t.param(b)), t.param(c)));
    return ag::cross_entropy(y, {0, 4, 2}, {1.0, 0.5, 2.0});
  });
  EXPECT_LT(err, 1e-6);
}

TEST(Autograd, LayerNormSoftmaxGradients) {
  auto x = random_param("x", 4, 6, 4), g = random_param("g", 1, 6, 5), b = random_param("b", 1, 6, 6);
  for (bool causal : {false, true}) {
    double err = max_relative_grad_error({&x, &g, &b}, [&](ag::Tape<double>& t) {
      auto y = ag::layer_norm(t.param(x), t.param(g), t.param(b));
      auto s = ag::softmax_rows(ag::matmul(y, ag::transpose(y)), causal);
      auto z = ag::matmul(s, y);
      return ag::cross_entropy(z, {1, 2, 3, 5}, {1.0, 1.0, 1.0, 1.0});
    });
    EXPECT_LT(err, 1e-6) << "causal=" << causal;
  }
}

TEST(Autograd, ShapeOpsGradients) {
  auto x = random_param("x", 5, 4, 7), w = random_param("w", 12, 3, 8);
  double err = max_relative_grad_error({&x, &w}, [&](ag::Tape<double>& t) {
    auto u = ag::matmul(ag::unfold_time(t.param(x), 3), t.param(w));  // 5 x 3
    auto top = ag::slice_rows(u, 0, 2), rest = ag::slice_rows(u, 2, 3);
    auto cat = ag::concat_rows<double>({rest, top});
    auto cols = ag::concat_cols<double>({ag::slice_cols(cat, 1, 2), ag::slice_cols(cat, 0, 1)});
    auto g = ag::gather_rows(cols, {4, 0, 0, 2});
    auto m = ag::mean_rows(ag::scale(g, 0.7));
    auto r = ag::reshape(ag::concat_cols<double>({m, m}), 2, 3);
    return ag::cross_entropy(r, {2, 0}, {1.0, 1.0});
  });
  EXPECT_LT(err, 1e-6);
}

TEST(Autograd, ZeroWeightRowsAreSkipped) {
  ag::Tape<double> t;
  Parameter<double> z{"z", Matrix<double>::Random(3, 4), {}, true};
  z.zero_grad();
  auto loss = ag::cross_entropy(t.param(z), {0, 1, 2}, {0.0, 1.0, 1.0});
  t.backward(loss);
  EXPECT_TRUE((z.grad.row(0).array() == 0.0).all());
  EXPECT_FALSE((z.grad.row(1).array() == 0.0).all());
}

TEST(Autograd, NonTrainableParametersReceiveNoGradient) {
  ag::Tape<double> t;
  Matrix<double> wv(2, 2);
  wv << 1, 2, 3, 5;
  Parameter<double> w{"w", wv, {}, false};
  Parameter<double> v{"v", Matrix<double>::Ones(2, 2), {}, true};
  w.zero_grad();
  v.zero_grad();
  auto y = ag::matmul(t.param(w), t.param(v));
  t.backward(ag::cross_entropy(y, {0, 1}, {1.0, 1.0}));
  EXPECT_TRUE((w.grad.array() == 0.0).all());
  EXPECT_GT(v.grad.cwiseAbs().sum(), 0.0);
}

TEST(Autograd, ShapeErrors) {
  ag::Tape<double> t;
  auto a = t.constant(Matrix<double>::Ones(2, 3));
  auto b = t.constant(Matrix<double>::Ones(2, 3));
  EXPECT_THROW(ag::matmul(a, b), ShapeError);
  EXPECT_THROW(ag::reshape(a, 4, 2), ShapeError);
  EXPECT_THROW(t.backward(a), ShapeError);
}

TEST(Autograd, AttentionBlocksGradients) {
  ParamStore<double> store;
  Rng rng(11);
  nn::EncoderLayer<double> enc(store, "enc", 8, 2, 16, rng);
  nn::DecoderLayer<double> dec(store, "dec", 8, 2, 16, rng);
  Matrix<double> x = normal_init<double>(5, 8, 1.0, rng), y = normal_init<double>(3, 8, 1.0, rng);
  double err = max_relative_grad_error(store.all(), [&](ag::Tape<double>& t) {
    auto mem = enc(t, t.constant(x), nullptr);
    auto out = dec(t, t.constant(y), mem, nullptr, nullptr);
    return ag::cross_entropy(out, {1, 7, 3}, {1.0, 1.0, 1.0});
  });
  EXPECT_LT(err, 1e-4);
}
