#include <gtest/gtest.h>

#include <sstream>

#include "advex/error.hpp"
#include "advex/tensor.hpp"

using namespace advex;

TEST(Tensor, ShapeAndItem) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(shape_str(t.shape()), "[2,3]");
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.0).item(), 4.0);
  EXPECT_THROW(t.item(), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, Reshape) {
  auto m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  auto r = m.reshaped({3, 2});
  EXPECT_EQ(r.values(), m.values());
  EXPECT_THROW(m.reshaped({4, 2}), ShapeError);
}

TEST(Tensor, ClampAndNorm) {
  auto c = clamp(Tensor::vector({-1.0, 0.5, 2.0}), 0.0, 1.0);
  EXPECT_EQ(c.values(), (std::vector<double>{0.0, 0.5, 1.0}));
  auto v = Tensor::vector({3.0, 4.0});
  EXPECT_DOUBLE_EQ(l2_norm(v.data()), 5.0);
  EXPECT_DOUBLE_EQ(sum(v.data()), 7.0);
}

TEST(Tensor, StackAndSlice) {
  std::vector<Tensor> items{Tensor::vector({1, 2}), Tensor::vector({3, 4})};
  auto b = stack(items);
  EXPECT_EQ(b.shape(), (Shape{2, 2}));
  EXPECT_EQ(slice_row(b, 1), items[1]);
}

TEST(Tensor, FiniteCheck) {
  Tensor t({2});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(Aetn, RoundTrip) {
  Tensor t({2, 1, 3}, std::vector<double>{0.1, -2.5, 3e-300, 1e300, 0.0, 7.0});
  auto bytes = encode_aetn(t);
  EXPECT_EQ(bytes.substr(0, 4), "AETN");
  EXPECT_EQ(bytes.size(), 4u + 4u + 3u * 4u + 6u * 8u);
  EXPECT_EQ(decode_aetn(bytes), t);

  std::stringstream ss;
  write_aetn(ss, t);
  write_aetn(ss, Tensor::scalar(2.0));
  EXPECT_EQ(read_aetn(ss), t);
  EXPECT_EQ(read_aetn(ss), Tensor::scalar(2.0));
}

TEST(Aetn, RejectsBadInput) {
  EXPECT_THROW(decode_aetn("XXXX"), FormatError);
  auto bytes = encode_aetn(Tensor::vector({1, 2, 3}));
  EXPECT_THROW(decode_aetn(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(load_aetn("/nonexistent/advex.aetn"), Error);
}
