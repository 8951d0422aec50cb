#include <gtest/gtest.h>

#include "fqr/dataset.hpp"
#include "test_util.hpp"

using namespace fqr;

namespace {

std::filesystem::path write_toy(const std::string& name, const std::string& responses, const std::string& design,
                                const std::string& grid) {
  auto dir = test::scratch_dir(name);
  test::write_text(dir / "y.csv", responses);
  test::write_text(dir / "x.csv", design);
  test::write_text(dir / "t.csv", grid);
  return dir;
}

}  // namespace

TEST(Dataset, LoadsDimensions) {
  auto dir = write_toy("load", "1,2,3,4\n5,6,7,8\n9,10,11,13\n", "1,0.5\n1,-1\n1,2\n", "0\n1\n2\n3\n");
  auto ds = load_dataset(dir / "y.csv", dir / "x.csv", dir / "t.csv");
  EXPECT_EQ(ds.n(), 3);
  EXPECT_EQ(ds.T(), 4);
  EXPECT_EQ(ds.d(), 2);
}

TEST(Dataset, HeaderRowIsSkipped) {
  auto dir = write_toy("header", "a,b\n1,2\n3,4\n5,7\n", "intercept,x\n1,0\n1,1\n1,3\n", "t\n0.5\n1.5\n");
  auto ds = load_dataset(dir / "y.csv", dir / "x.csv", dir / "t.csv");
  EXPECT_EQ(ds.n(), 3);
  EXPECT_DOUBLE_EQ(ds.grid()[1], 1.5);
}

TEST(Dataset, NonIncreasingGridReportsIndex) {
  auto dir = write_toy("grid", "1,2,3\n4,5,6\n", "1\n1\n", "1.0\n1.0\n2.0\n");
  try {
    load_dataset(dir / "y.csv", dir / "x.csv", dir / "t.csv");
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("non-increasing grid at index 1"), std::string::npos) << e.what();
  }
}

TEST(Dataset, DuplicatedDesignColumnIsRankDeficient) {
  // columns equal => singular values (sqrt(2)*||c||, 0), so sigma_min / sigma_max = 0
  Matrix X(3, 2);
  X << 1, 1, 2, 2, 3, 3;
  Eigen::JacobiSVD<Matrix> svd(X);
  ASSERT_NEAR(svd.singularValues()(1), 0.0, 1e-12);
  Matrix Y = Matrix::Ones(3, 2);
  EXPECT_THROW(FunctionalDataset(Y, X, SamplingGrid({0.0, 1.0})), Error);
  try {
    FunctionalDataset(Y, X, SamplingGrid({0.0, 1.0}));
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("rank-deficient"), std::string::npos);
  }
}

TEST(Dataset, DimensionMismatchAndNonFiniteAreReported) {
  auto dir = write_toy("mismatch", "1,2\n3,4\n", "1\n1\n1\n", "0\n1\n");
  EXPECT_THROW(load_dataset(dir / "y.csv", dir / "x.csv", dir / "t.csv"), Error);

  auto dir2 = write_toy("nan", "1,2\n3,nan\n", "1\n1\n", "0\n1\n");
  try {
    load_dataset(dir2 / "y.csv", dir2 / "x.csv", dir2 / "t.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("row 2, column 2"), std::string::npos) << e.what();
  }

  auto dir3 = write_toy("ragged", "1,2\n3\n", "1\n1\n", "0\n1\n");
  EXPECT_THROW(load_dataset(dir3 / "y.csv", dir3 / "x.csv", dir3 / "t.csv"), Error);
}

TEST(Dataset, SummaryMaxGap) {
  auto g = SamplingGrid::equally_spaced(0.0, 5.10, 128);
  EXPECT_NEAR(g.max_gap(), 5.10 / 127.0, 1e-12);
  EXPECT_NEAR(g.max_gap(), 0.04016, 1e-5);
  EXPECT_DOUBLE_EQ(SamplingGrid({0.0, 1.0, 3.0}).max_gap(), 2.0);
  EXPECT_DOUBLE_EQ(SamplingGrid({0.0, 1.0}).max_gap(), 1.0);

  Matrix Y(2, 3);
  Y << 1, 5, -2, 3, 0, 4;
  FunctionalDataset ds(Y, Matrix::Ones(2, 1), SamplingGrid({0.0, 1.0, 3.0}));
  auto s = summarize(ds);
  EXPECT_EQ(s.T, 3);
  EXPECT_DOUBLE_EQ(s.max_gap, 2.0);
  EXPECT_DOUBLE_EQ(s.response_min(2), -2.0);
  EXPECT_DOUBLE_EQ(s.response_max(0), 3.0);
  auto s2 = summarize(ds);
  EXPECT_EQ(s.response_min, s2.response_min);
}

TEST(Dataset, SaveLoadRoundTripIsExact) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> z;
  Matrix Y(5, 6), X(5, 2);
  for (int i = 0; i < 5; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = z(rng);
    for (int j = 0; j < 6; ++j) Y(i, j) = z(rng) * 1e3 / 7.0;
  }
  FunctionalDataset ds(Y, X, SamplingGrid({0.1, 0.2, 0.30000000000000004, 0.7, 1.0 / 3.0 + 1.0, 2.0}));
  auto dir = test::scratch_dir("roundtrip");
  save_dataset(ds, dir / "y.csv", dir / "x.csv", dir / "t.csv");
  auto back = load_dataset(dir / "y.csv", dir / "x.csv", dir / "t.csv");
  EXPECT_EQ(back.responses(), ds.responses());
  EXPECT_EQ(back.design(), ds.design());
  EXPECT_TRUE(back.grid() == ds.grid());
}

TEST(Dataset, ContrastIsNormalized) {
  Contrast c(Vector::Constant(2, 3.0));
  EXPECT_NEAR(c.weights().norm(), 1.0, 1e-15);
  EXPECT_THROW(Contrast(Vector::Zero(2)), Error);
  EXPECT_THROW(Contrast::unit(2, 5), Error);
}
