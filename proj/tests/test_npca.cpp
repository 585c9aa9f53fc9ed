#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "spur/npca.hpp"

using namespace spur;

namespace {

WeightedFeatures from_rows(const Matrix& psi) {
  WeightedFeatures w;
  w.psi = psi;
  for (Eigen::Index i = 0; i < psi.rows(); ++i) w.rows.push_back(static_cast<std::size_t>(i));
  return w;
}

}  // namespace

TEST(Npca, PsiIsElementwiseProduct) {
  Rng rng(10);
  auto b = oracle::random_bundle(rng, 3, 4, 10);
  const std::vector<std::size_t> idx = {0, 3, 7, 9};
  const auto psi = compute_psi(b.features, b.head, 2, idx);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Vector want = oracle::psi_row(b.features, b.head, 2, idx[i]);
    for (Eigen::Index j = 0; j < 4; ++j) EXPECT_EQ(psi.psi(static_cast<Eigen::Index>(i), j), want[j]);
  }

  auto ones = b.head;
  std::fill(ones.w.begin(), ones.w.end(), 1.0f);
  EXPECT_EQ(compute_psi(b.features, ones, 0, idx).psi, b.features.to_matrix()(std::vector<Eigen::Index>{0, 3, 7, 9}, Eigen::all));
  auto zeros = b.head;
  std::fill(zeros.w.begin(), zeros.w.end(), 0.0f);
  EXPECT_TRUE(compute_psi(b.features, zeros, 1, idx).psi.isZero(0.0));
  EXPECT_THROW(compute_psi(b.features, b.head, 0, {}), Error);
  EXPECT_THROW(compute_psi(b.features, b.head, 0, {10}), Error);
}

TEST(Npca, TwoPointCase) {
  Matrix psi(2, 2);
  psi << 1, 0, -1, 0;
  const auto c = fit_class_npca(from_rows(psi));
  EXPECT_EQ(c.mean, Vector::Zero(2));
  EXPECT_DOUBLE_EQ(c.eigenvalues[0], 2.0);
  EXPECT_NEAR(c.eigenvalues[1], 0.0, 1e-15);
  EXPECT_NEAR(c.eigenvectors(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(c.eigenvectors(0, 1), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(c.variance(0), 2.0);
}

TEST(Npca, IdenticalRowsGiveZeroSpectrum) {
  Matrix psi = Matrix::Constant(5, 3, 1.5);
  const auto c = fit_class_npca(from_rows(psi));
  EXPECT_TRUE(c.eigenvalues.isZero(1e-12));
}

TEST(Npca, DegenerateAndInvalidInputs) {
  EXPECT_THROW(fit_class_npca(from_rows(Matrix::Ones(1, 3))), Error);
  try {
    fit_class_npca(from_rows(Matrix::Ones(1, 3)));
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateClass);
  }
  EXPECT_THROW(fit_class_npca(from_rows(Matrix::Random(4, 3)), 4), Error);
}

TEST(Npca, MatchesJacobiOracleOn50x8) {
  Rng rng(11);
  Matrix psi(50, 8);
  for (Eigen::Index i = 0; i < psi.size(); ++i) psi.data()[i] = rng.normal() * (1 + i % 8);
  const auto c = fit_class_npca(from_rows(psi));
  const auto o = oracle::jacobi_eigen(oracle::scatter_by_loops(psi));
  for (Eigen::Index l = 0; l < 8; ++l) {
    EXPECT_NEAR(c.eigenvalues[l], o.values[l], 1e-8 * std::abs(o.values[l]));
    EXPECT_GE(std::abs(c.eigenvectors.row(l).dot(o.vectors.col(l))), 1.0 - 1e-8);
  }
}

TEST(Npca, InvariantsOnRandomClasses) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const auto n = static_cast<Eigen::Index>(2 + rng.below(40));
    const auto d = static_cast<Eigen::Index>(1 + rng.below(20));
    Matrix psi(n, d);
    for (Eigen::Index i = 0; i < psi.size(); ++i) psi.data()[i] = rng.normal();
    const auto c = fit_class_npca(from_rows(psi));
    const Matrix gram = c.eigenvectors * c.eigenvectors.transpose();
    EXPECT_LE((gram - Matrix::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-6);
    const double top = std::max(c.eigenvalues[0], 1.0);
    EXPECT_GE(c.eigenvalues.minCoeff(), -1e-8 * top);
    for (Eigen::Index l = 1; l < d; ++l) EXPECT_LE(c.eigenvalues[l], c.eigenvalues[l - 1]);
    const double trace = oracle::scatter_by_loops(psi).trace();
    EXPECT_NEAR(c.eigenvalues.sum(), trace, 1e-6 * std::max(trace, 1.0));
    for (Eigen::Index l = 0; l < d; ++l) EXPECT_NEAR(c.ones_dot[l], c.eigenvectors.row(l).sum(), 1e-15);
  }
}

TEST(Npca, SignConventionIsDeterministic) {
  Rng rng(13);
  Matrix psi(30, 6);
  for (Eigen::Index i = 0; i < psi.size(); ++i) psi.data()[i] = rng.normal();
  const auto a = fit_class_npca(from_rows(psi));
  const auto b = fit_class_npca(from_rows(psi));
  EXPECT_EQ(encode_npca(a), encode_npca(b));
  EXPECT_EQ(a.eigenvectors, b.eigenvectors);
  for (Eigen::Index l = 0; l < 6; ++l) {
    Eigen::Index arg = 0;
    a.eigenvectors.row(l).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(a.eigenvectors(l, arg), 0.0);
  }
  Vector tie(2);
  tie << -0.5, 0.5;
  detail::canonicalize_sign(tie);
  EXPECT_GT(tie[0], 0.0);
}

TEST(Npca, AlphaExamples) {
  ClassNpca c;
  c.mean = Vector::Zero(2);
  c.eigenvectors = Matrix::Identity(2, 2);
  c.eigenvalues = Vector::Ones(2);
  c.ones_dot = c.eigenvectors.rowwise().sum();
  Vector psi(2);
  psi << 3, 4;
  EXPECT_DOUBLE_EQ(alpha_values(c, psi)[0], 3.0);
  EXPECT_TRUE(alpha_values(c, c.mean).isZero(0.0));

  c.eigenvectors.row(0) << 1 / std::sqrt(2.0), -1 / std::sqrt(2.0);
  c.ones_dot = c.eigenvectors.rowwise().sum();
  Rng rng(14);
  for (int i = 0; i < 20; ++i) {
    Vector x(2);
    x << rng.normal(), rng.normal();
    EXPECT_EQ(alpha_values(c, x)[0], 0.0);
  }
}

TEST(Npca, ReconstructionIdentity) {
  Rng rng(15);
  auto b = oracle::random_bundle(rng, 6, 20, 120);
  for (std::uint32_t k = 0; k < 6; ++k) {
    const auto psi = compute_class_psi(b.features, b.labels, b.head, k);
    const auto c = fit_class_npca(psi);
    for (std::size_t i = 0; i < b.features.n; ++i) {
      const double direct = oracle::direct_logit(b.features, b.head, k, i);
      const double rec = reconstruct_logit(c, b.head, oracle::psi_row(b.features, b.head, k, i));
      EXPECT_NEAR(rec, direct, 1e-5 * std::max(1.0, std::abs(direct)));
    }
    EXPECT_NEAR(reconstruct_logit(c, b.head, c.mean), c.mean.sum() + b.head.bias[k], 1e-12);
    const Matrix alpha = alpha_matrix(c, psi.psi);
    for (std::size_t i = 0; i < psi.size(); ++i)
      for (std::size_t l = 0; l < 20; l += 7)
        EXPECT_NEAR(alpha(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l)),
                    oracle::alpha_by_definition(c, psi.psi.row(static_cast<Eigen::Index>(i)).transpose(), l), 1e-10);
  }
}

TEST(Npca, TruncatedBasisRejected) {
  Rng rng(16);
  auto b = oracle::random_bundle(rng, 2, 6, 30);
  const auto psi = compute_class_psi(b.features, b.labels, b.head, 0);
  const auto c = fit_class_npca(psi, 3);
  EXPECT_EQ(c.components(), 3u);
  EXPECT_THROW(reconstruct_logit(c, b.head, c.mean), Error);
}

TEST(Npca, BinaryRoundTrip) {
  Rng rng(17);
  auto b = oracle::random_bundle(rng, 3, 9, 40);
  const auto c = fit_class_npca(compute_class_psi(b.features, b.labels, b.head, 1), 5);
  const auto bytes = encode_npca(c);
  EXPECT_EQ(bytes.size(), 24u + 4u * (9 + 5 + 45));
  const auto back = decode_npca(bytes);
  EXPECT_EQ(encode_npca(back), bytes);
  EXPECT_EQ(back.class_index, 1u);
  EXPECT_EQ(back.sample_count, c.sample_count);
  EXPECT_LE((back.eigenvectors - c.eigenvectors).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_EQ(npca_filename(3), "npca_k3.npca");
  EXPECT_THROW(decode_npca(bytes + "z"), Error);
}
