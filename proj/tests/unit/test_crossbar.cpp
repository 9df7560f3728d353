#include <gtest/gtest.h>

#include <algorithm>

#include "hatdiag/crossbar.hpp"

using namespace hatdiag;

namespace {

void expect_near_tensor(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "entry " << i;
}

}  // namespace

TEST(ProgramWeights, HandExample) {
  const CrossbarConfig cfg;
  const ProgrammedPair p = program_weights(Tensor::matrix({{0.5, -0.25}}), cfg);
  EXPECT_DOUBLE_EQ(p.scale, 0.5);
  expect_near_tensor(p.g_p, Tensor::matrix({{1e-4, 1e-6}}), 1e-18);
  expect_near_tensor(p.g_n, Tensor::matrix({{1e-6, 5.05e-5}}), 1e-18);
}

TEST(ProgramWeights, ZeroMatrixMapsToGmin) {
  const CrossbarConfig cfg;
  const ProgrammedPair p = program_weights(Tensor(Shape{2, 3}), cfg);
  EXPECT_EQ(p.scale, 0.0);
  for (double g : p.g_p.data()) EXPECT_EQ(g, cfg.g_min);
  for (double g : p.g_n.data()) EXPECT_EQ(g, cfg.g_min);
  EXPECT_EQ(reconstruct_effective(p, cfg), Tensor(Shape{2, 3}));
}

TEST(ProgramWeights, ClampsBeforeMapping) {
  const CrossbarConfig cfg;
  const ProgrammedPair p = program_weights(Tensor::matrix({{2.0}}), cfg);
  EXPECT_DOUBLE_EQ(p.scale, 1.0);
  expect_near_tensor(p.g_p, Tensor::matrix({{1e-4}}), 1e-18);
  expect_near_tensor(p.g_n, Tensor::matrix({{1e-6}}), 1e-18);
}

TEST(ReconstructEffective, RoundTrip) {
  const CrossbarConfig cfg;
  const Tensor w = Tensor::matrix({{0.5, -0.25}});
  expect_near_tensor(reconstruct_effective(program_weights(w, cfg), cfg), w, 1e-15);
}

TEST(ReconstructEffective, SymmetricPairIsZero) {
  const CrossbarConfig cfg;
  ProgrammedPair p{Tensor(Shape{2, 2}, 3e-5), Tensor(Shape{2, 2}, 3e-5), 0.7};
  EXPECT_EQ(reconstruct_effective(p, cfg), Tensor(Shape{2, 2}));
}

TEST(ReconstructEffective, RoundTripClipsRandomMatrices) {
  const CrossbarConfig cfg;
  Tensor w(Shape{4, 5});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = -1.7 + 0.17 * static_cast<double>(i);
  const Tensor back = reconstruct_effective(program_weights(w, cfg), cfg);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(back[i], std::clamp(w[i], -1.0, 1.0), 1e-12);
}

TEST(ColumnBlocks, CeilingDivision) {
  using Blocks = std::vector<std::pair<std::size_t, std::size_t>>;
  EXPECT_EQ(column_blocks(300, 128), (Blocks{{0, 128}, {128, 256}, {256, 300}}));
  EXPECT_EQ(column_blocks(128, 128), (Blocks{{0, 128}}));
  EXPECT_EQ(column_blocks(1, 128), (Blocks{{0, 1}}));
}

TEST(CrossbarConfig, RejectsInvertedRanges) {
  CrossbarConfig cfg;
  cfg.g_min = 2e-4;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(ProgramWeightsGraph, ScaleCarriesGradient) {
  const CrossbarConfig cfg;
  Var w = Var::leaf(Tensor::matrix({{0.5, -0.25}}));
  const ProgrammedVars pv = program_weights(w, cfg);
  EXPECT_FALSE(pv.degenerate);
  Var recon = reconstruct_effective(pv.g_p, pv.g_n, pv.scale, cfg);
  backward_pass(ad::sum(recon));
  EXPECT_NEAR(w.grad()[0], 1.0, 1e-9);
  EXPECT_NEAR(w.grad()[1], 1.0, 1e-9);
}
