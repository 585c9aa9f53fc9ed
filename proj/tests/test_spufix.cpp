#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"
#include "spur/spufix.hpp"

using namespace spur;

namespace {

struct Fitted {
  oracle::Bundle b;
  std::map<std::uint32_t, ClassNpca> npcas;
};

Fitted fitted_bundle(std::uint64_t seed, std::uint32_t k, std::uint32_t d, std::uint32_t n) {
  Rng rng(seed);
  Fitted f{oracle::random_bundle(rng, k, d, n), {}};
  for (std::uint32_t c = 0; c < k; ++c)
    f.npcas.emplace(c, fit_class_npca(compute_class_psi(f.b.features, f.b.labels, f.b.head, c)));
  return f;
}

LabelerSession session(std::string id, std::vector<std::pair<ComponentKey, Verdict>> v) {
  LabelerSession s{std::move(id), {}};
  for (auto& [key, verdict] : v) s.verdicts[key] = {verdict, "2024-01-01T00:00:00Z"};
  return s;
}

constexpr auto S = Verdict::kSpurious;
constexpr auto N = Verdict::kNotSpurious;

}  // namespace

TEST(Spufix, EmptyRegistryLeavesLogits) {
  auto f = fitted_bundle(40, 3, 5, 30);
  const Matrix base = direct_logits(f.b.features, f.b.head);
  EXPECT_EQ(spufix_logits(f.npcas, f.b.head, SpuriousRegistry{}, f.b.features, base), base);
}

TEST(Spufix, ArithmeticOfTheTruncation) {
  // One class, D = 1: f = w*x + b, alpha = x - mean.
  ClassNpca c;
  c.mean = Vector::Zero(1);
  c.eigenvectors = Matrix::Ones(1, 1);
  c.eigenvalues = Vector::Ones(1);
  c.ones_dot = Vector::Ones(1);
  HeadWeights h{1, 1, {1.0f}, {7.0f}};
  SpuriousRegistry reg;
  reg.classes[0] = {0};
  FeatureDump f{2, 1, {3.0f, -2.0f}};
  const Matrix base = direct_logits(f, h);
  EXPECT_EQ(base(0, 0), 10.0);
  const Matrix fixed = spufix_logits({{0, c}}, h, reg, f, base);
  EXPECT_EQ(fixed(0, 0), 7.0);
  EXPECT_EQ(fixed(1, 0), 5.0);
}

TEST(Spufix, MatchesFromScratchAndInvariants) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto f = fitted_bundle(41 + seed, 4, 10, 80);
    Rng rng(seed);
    SpuriousRegistry reg;
    for (std::uint32_t k = 0; k < 4; k += 2)
      for (int i = 0; i < 3; ++i) reg.classes[k].insert(rng.below(10));
    const Matrix base = direct_logits(f.b.features, f.b.head);
    const Matrix fixed = spufix_logits(f.npcas, f.b.head, reg, f.b.features, base);
    const Matrix want = oracle::spufix_from_scratch(f.npcas, f.b.head, reg, f.b.features);
    EXPECT_LE((fixed - want).cwiseAbs().maxCoeff(), 1e-9);
    for (Eigen::Index i = 0; i < fixed.rows(); ++i) {
      for (std::uint32_t k = 0; k < 4; ++k) {
        EXPECT_LE(fixed(i, k), base(i, k));
        if (k % 2 == 1) {
          EXPECT_EQ(fixed(i, k), base(i, k));
        } else {
          bool all_nonpositive = true;
          const Vector psi = oracle::psi_row(f.b.features, f.b.head, k, static_cast<std::size_t>(i));
          for (auto l : reg.classes[k]) all_nonpositive &= alpha_values(f.npcas.at(k), psi)[static_cast<Eigen::Index>(l)] <= 0;
          EXPECT_EQ(fixed(i, k) == base(i, k), all_nonpositive);
        }
      }
    }
  }
}

TEST(Spufix, RegistryOutOfRangeRejected) {
  auto f = fitted_bundle(50, 2, 4, 20);
  SpuriousRegistry reg;
  reg.classes[1] = {4};
  EXPECT_THROW(spufix_logits(f.npcas, f.b.head, reg, f.b.features), Error);
}

TEST(Spufix, MatchedDirectionsMaximizeCovariance) {
  Rng rng(51);
  auto src = oracle::random_bundle(rng, 2, 8, 60);
  auto tgt = oracle::random_bundle(rng, 2, 11, 60);
  tgt.labels = src.labels;
  const auto sp = compute_class_psi(src.features, src.labels, src.head, 0);
  const auto tp = compute_class_psi(tgt.features, tgt.labels, tgt.head, 0);
  const auto npca = fit_class_npca(sp);
  const auto basis = match_directions(npca, sp, tp, {0, 3, 5});
  ASSERT_EQ(basis.size(), 3u);
  const Matrix centered = tp.psi.rowwise() - tp.psi.colwise().mean();
  const Matrix alpha = alpha_matrix(npca, sp.psi);
  for (Eigen::Index r = 0; r < 3; ++r) {
    EXPECT_NEAR(basis.directions.row(r).norm(), 1.0, 1e-6);
    const Vector num = centered.transpose() * alpha.col(static_cast<Eigen::Index>(basis.components[static_cast<std::size_t>(r)]));
    const double at_b = basis.directions.row(r).dot(num);
    for (int i = 0; i < 1000; ++i) {
      Vector u(11);
      for (auto& x : u) x = rng.normal();
      EXPECT_GE(at_b, u.normalized().dot(num) - 1e-12);
    }
  }
  EXPECT_THROW(match_directions(npca, sp, compute_psi(tgt.features, tgt.head, 0, {0, 1}), {0}), Error);
}

TEST(Spufix, SingleRowClassIsSkipped) {
  HeadWeights h{1, 2, {1.f, 1.f}, {0.f}};
  FeatureDump f{1, 2, {1.f, 2.f}};
  const auto psi = compute_psi(f, h, 0, {0});
  ClassNpca c;
  c.mean = psi.psi.row(0).transpose();
  c.eigenvectors = Matrix::Identity(2, 2);
  c.eigenvalues = Vector::Zero(2);
  c.ones_dot = Vector::Ones(2);
  const auto basis = match_directions(c, psi, psi, {0, 1});
  EXPECT_EQ(basis.size(), 0u);
  EXPECT_EQ(basis.skipped, (std::vector<std::size_t>{0, 1}));
}

TEST(Spufix, ProjectionExamples) {
  MatchedBasis b;
  b.directions = Matrix(1, 2);
  b.directions << 1, 0;
  b.target_mean = Vector::Zero(2);
  detail::fill_gram_pinv(b);
  b.components = {0};
  Vector row(2);
  row << 3, 4;
  EXPECT_NEAR(project_spanned(b, row)[0], 3.0, 1e-15);

  Rng rng(52);
  Matrix q = Matrix::Random(6, 6).householderQr().householderQ();
  MatchedBasis ortho;
  ortho.directions = q.topRows(3);
  ortho.target_mean = Vector::Zero(6);
  ortho.components = {0, 1, 2};
  detail::fill_gram_pinv(ortho);
  Vector x(6);
  for (auto& v : x) v = rng.normal();
  EXPECT_LE((project_spanned(ortho, x) - ortho.directions * x).norm(), 1e-12);
}

TEST(Spufix, ProjectionLeastSquaresAndRankDeficiency) {
  Rng rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    MatchedBasis b;
    const Eigen::Index d = 7, L = 4;
    b.directions = Matrix(L, d);
    for (Eigen::Index i = 0; i < b.directions.size(); ++i) b.directions.data()[i] = rng.normal();
    if (trial % 2 == 1) b.directions.row(3) = b.directions.row(1);  // duplicated direction
    for (Eigen::Index r = 0; r < L; ++r) b.directions.row(r).normalize();
    b.target_mean = Vector::Zero(d);
    b.components = {0, 1, 2, 3};
    detail::fill_gram_pinv(b);
    EXPECT_EQ(b.gram_rank, trial % 2 == 1 ? 3u : 4u);
    Vector x(d);
    for (auto& v : x) v = rng.normal();
    const Vector p = project_spanned(b, x);
    const Vector residual = x - b.directions.transpose() * p;
    EXPECT_LE((b.directions * residual).cwiseAbs().maxCoeff(), 1e-6 * x.norm());
    const Vector want = oracle::least_squares_min_norm(b.directions, x);
    EXPECT_LE((b.directions.transpose() * (p - want)).norm(), 1e-6);
    EXPECT_LE((p - want).norm(), 1e-6);
    for (Eigen::Index l = 0; l < L; ++l)
      for (double delta : {1e-3, -1e-3}) {
        Vector q = p;
        q[l] += delta;
        EXPECT_GE((x - b.directions.transpose() * q).norm(), residual.norm());
      }
  }
}

TEST(Spufix, TransferMatchesFromScratch) {
  Rng rng(54);
  auto src = oracle::random_bundle(rng, 3, 6, 90);
  auto tgt = oracle::random_bundle(rng, 3, 9, 90);
  tgt.labels = src.labels;
  std::map<std::uint32_t, ClassNpca> npcas;
  for (std::uint32_t k = 0; k < 3; ++k) npcas.emplace(k, fit_class_npca(compute_class_psi(src.features, src.labels, src.head, k)));
  SpuriousRegistry reg;
  reg.classes[1] = {0, 2, 4};
  const auto bases = match_all(npcas, src.head, src.features, src.labels, tgt.head, tgt.features, reg);
  const Matrix base = direct_logits(tgt.features, tgt.head);
  const Matrix got = transfer_spufix_logits(bases, tgt.head, tgt.features, base);

  const auto sp = compute_class_psi(src.features, src.labels, src.head, 1);
  const auto tp = compute_class_psi(tgt.features, tgt.labels, tgt.head, 1);
  std::vector<std::size_t> all(90);
  std::iota(all.begin(), all.end(), 0);
  const auto eval = compute_psi(tgt.features, tgt.head, 1, all);
  const Matrix want = oracle::transfer_from_scratch(npcas.at(1), sp.psi, tp.psi, reg.classes[1], eval.psi, base, 1);
  EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-8);
  for (std::uint32_t k : {0u, 2u}) EXPECT_EQ(got.col(k), base.col(k));
}

TEST(Spufix, TransferWithNonPositiveTermsIsIdentity) {
  MatchedBasis b;
  b.class_index = 0;
  b.directions = Matrix(1, 2);
  b.directions << 1, 0;
  b.target_mean = Vector::Zero(2);
  b.components = {0};
  b.ones_dot = b.directions.rowwise().sum();
  detail::fill_gram_pinv(b);
  HeadWeights h{1, 2, {1.f, 1.f}, {0.f}};
  FeatureDump f{2, 2, {-1.f, 5.f, -3.f, 0.f}};
  const Matrix base = direct_logits(f, h);
  EXPECT_EQ(transfer_spufix_logits({{0, b}}, h, f, base), base);
}

TEST(Spufix, SelfRecovery) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto f = fitted_bundle(60 + seed, 3, 8, 100);
    SpuriousRegistry reg;
    reg.classes[0] = {0, 1};
    reg.classes[2] = {3};
    const Matrix base = direct_logits(f.b.features, f.b.head);
    const Matrix native = spufix_logits(f.npcas, f.b.head, reg, f.b.features, base);
    const auto bases = match_all(f.npcas, f.b.head, f.b.features, f.b.labels, f.b.head, f.b.features, reg);
    const Matrix transferred = transfer_spufix_logits(bases, f.b.head, f.b.features, base);
    EXPECT_LE((native - transferred).cwiseAbs().maxCoeff(), 1e-4);
    for (const auto& [k, basis] : bases)
      for (std::size_t r = 0; r < basis.size(); ++r) {
        const Vector v = f.npcas.at(k).eigenvectors.row(static_cast<Eigen::Index>(basis.components[r])).transpose();
        EXPECT_NEAR(std::abs(basis.directions.row(static_cast<Eigen::Index>(r)).dot(v)), 1.0, 1e-9);
      }
  }
}

TEST(Registry, FinalizeExamples) {
  const auto a = session("A", {{{1, 2}, S}, {{1, 3}, S}});
  const auto b = session("B", {{{1, 3}, S}, {{2, 0}, S}});
  auto reg = finalize_registry({a, b}, "m");
  EXPECT_EQ(reg.classes.size(), 1u);
  EXPECT_EQ(reg.classes.at(1), (std::set<std::size_t>{3}));

  reg = finalize_registry({a, a});
  EXPECT_EQ(reg.classes.at(1), (std::set<std::size_t>{2, 3}));

  reg = finalize_registry({a, session("C", {})});
  EXPECT_TRUE(reg.classes.empty());

  const auto c = session("C", {{{1, 3}, N}});
  EXPECT_TRUE(finalize_registry({a, b, c}).classes.empty());
  EXPECT_THROW(finalize_registry({a}), Error);
}

TEST(Registry, RandomizedAgainstSetAlgebra) {
  Rng rng(70);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<LabelerSession> sessions;
    const auto n = 2 + rng.below(3);
    for (std::size_t s = 0; s < n; ++s) {
      LabelerSession ls{"L" + std::to_string(s), {}};
      for (int e = 0; e < 12; ++e)
        ls.verdicts[{static_cast<std::uint32_t>(rng.below(3)), rng.below(4)}] = {rng.uniform() < 0.7 ? S : N, ""};
      sessions.push_back(ls);
    }
    const auto reg = finalize_registry(sessions);
    std::set<ComponentKey> got;
    for (const auto& [k, comps] : reg.classes)
      for (auto l : comps) got.insert({k, l});
    EXPECT_EQ(got, oracle::intersect_sessions(sessions));
  }
}

TEST(Registry, JsonRoundTripAndValidation) {
  const auto reg = finalize_registry({session("A", {{{1, 3}, S}, {{0, 2}, N}}), session("B", {{{1, 3}, S}})}, "resnet");
  const auto dir = std::filesystem::temp_directory_path() / "spur_registry_test";
  std::filesystem::create_directories(dir);
  write_registry(dir / "r.json", reg);
  const auto back = read_registry(dir / "r.json");
  EXPECT_EQ(to_json(back), to_json(reg));
  EXPECT_FALSE(std::filesystem::exists(dir / "r.json.tmp"));
  const auto j = to_json(reg);
  EXPECT_EQ(j["version"], 1);
  EXPECT_EQ(j["classes"]["1"], nlohmann::json::array({3}));
  EXPECT_EQ(j["sessions"][0]["verdicts"][0]["verdict"], "not_spurious");
  auto bad = j;
  bad["version"] = 2;
  EXPECT_THROW(registry_from_json(bad), Error);
  bad = j;
  bad["classes"]["x"] = nlohmann::json::array();
  EXPECT_THROW(registry_from_json(bad), Error);
  std::filesystem::remove_all(dir);
}
