#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "spur/cli.hpp"

using namespace spur;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "spuraudit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("spur_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string p(const std::string& rel) const { return (dir_ / rel).string(); }

  void synth(const std::vector<std::string>& extra = {}) {
    std::vector<std::string> args = {"synth", "--out", p("d")};
    args.insert(args.end(), extra.begin(), extra.end());
    ASSERT_EQ(run(args).code, 0);
  }

  fs::path dir_;
};

}  // namespace

TEST(Cli, VersionAndHelp) {
  auto r = run({"--version"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, std::string("spuraudit ") + SPUR_VERSION + "\n");
  for (const char* sub : {"ingest", "npca", "npfv", "rank", "spufix", "transfer", "eval", "diversity", "synth",
                          "synth-eval", "serve"}) {
    r = run({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << sub;
  }
  r = run({"npfv", "--help"});
  EXPECT_NE(r.out.find("30"), std::string::npos);
  EXPECT_NE(r.out.find("200"), std::string::npos);
  EXPECT_NE(run({"rank", "--help"}).out.find("128"), std::string::npos);
}

TEST(Cli, UsageErrorsExitOne) {
  auto r = run({"npca", "--features", "f.npfd"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("required"), std::string::npos);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"eval", "--val-logits", "a", "--val-labels", "b", "--spurious-logits", "c", "--spurious-labels", "d",
                 "--variant", "other", "--out", "x"})
                .code,
            1);
}

TEST_F(CliTest, NpcaWritesRequestedClass) {
  synth();
  const auto r = run({"npca", "--features", p("d/features.npfd"), "--labels", p("d/labels.nplb"), "--head",
                      p("d/head.nphd"), "--class", "3", "--out", p("npca")});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "npca" / "npca_k3.npca"));
  EXPECT_FALSE(fs::exists(dir_ / "npca" / "npca_k0.npca"));
  EXPECT_EQ(run({"npca", "--features", p("d/features.npfd"), "--labels", p("d/labels.nplb"), "--head",
                 p("d/head.nphd"), "--class", "3", "--all", "--out", p("npca")})
                .code,
            1);
  EXPECT_EQ(run({"npca", "--features", p("d/features.npfd"), "--labels", p("d/labels.nplb"), "--head",
                 p("d/head.nphd"), "--out", p("npca")})
                .code,
            1);
  EXPECT_EQ(run({"npca", "--features", p("d/features.npfd"), "--labels", p("d/labels.nplb"), "--head",
                 p("d/head.nphd"), "--class", "9", "--out", p("npca")})
                .code,
            2);
}

TEST_F(CliTest, DataErrorsExitTwo) {
  synth();
  write_file(dir_ / "bad.npfd", "NPFX");
  auto r = run({"ingest", "--features", p("bad.npfd"), "--labels", p("d/labels.nplb"), "--head", p("d/head.nphd")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad_magic"), std::string::npos);
  EXPECT_EQ(run({"ingest", "--features", p("missing.npfd"), "--labels", p("d/labels.nplb"), "--head", p("d/head.nphd")}).code,
            2);

  auto labels = read_labels(dir_ / "d/labels.nplb");
  labels.labels[0] = 99;
  write_labels(dir_ / "bad.nplb", labels);
  r = run({"ingest", "--features", p("d/features.npfd"), "--labels", p("bad.nplb"), "--head", p("d/head.nphd")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("label out of range"), std::string::npos);

  r = run({"ingest", "--features", p("d/features.npfd"), "--labels", p("d/labels.nplb"), "--head", p("d/head.nphd"),
           "--manifest", p("d/manifest.json")});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(nlohmann::json::parse(r.out)["class_counts"][0], 200);
}

TEST_F(CliTest, SyntheticPipelineReproducesReport) {
  synth({"--mlp"});
  const auto d = [&](const std::string& f) { return p("d/" + f); };
  const auto report = nlohmann::json::parse(run({"synth-eval"}).out);

  ASSERT_EQ(run({"npca", "--features", d("features.npfd"), "--labels", d("labels.nplb"), "--head", d("head.nphd"),
                 "--all", "--out", p("npca")})
                .code,
            0);
  // Alignment recomputed from the written artifacts.
  const auto c0 = read_npca(dir_ / "npca" / "npca_k0.npca");
  const auto spec = nlohmann::json::parse(read_file(dir_ / "d/synth_spec.json"));
  const auto head = read_head(dir_ / "d/head.nphd");
  const auto u = spec["u"].get<std::vector<double>>();
  Vector target = head.row(0).cwiseProduct(Eigen::Map<const Vector>(u.data(), static_cast<Eigen::Index>(u.size())));
  target.normalize();
  EXPECT_NEAR(std::abs(c0.eigenvectors.row(0).dot(target)), report["alignment"].get<double>(), 1e-5);

  // NPFV on the MLP variant.
  ASSERT_EQ(run({"npca", "--features", d("mlp_features.npfd"), "--labels", d("labels.nplb"), "--head",
                 d("mlp_head.nphd"), "--class", "0", "--out", p("mnpca")})
                .code,
            0);
  auto r = run({"npfv", "--mlp", d("mlp.npml"), "--head", d("mlp_head.nphd"), "--npca-dir", p("mnpca"), "--class", "0",
                "--top-variance", "12", "--steps", "40", "--out", p("npfv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "npfv" / "npfv_k0_c11.pgm"));
  r = run({"rank", "--features", d("mlp_features.npfd"), "--labels", d("labels.nplb"), "--head", d("mlp_head.nphd"),
           "--npca-dir", p("mnpca"), "--npfv-dir", p("npfv"), "--class", "0", "--top-variance", "12", "--manifest",
           d("manifest.json"), "--out", p("cards")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cards = cards_from_json(nlohmann::json::parse(read_file(dir_ / "cards" / "cards_k0.json")));
  EXPECT_EQ(cards.size(), 10u);
  for (std::size_t i = 1; i < cards.size(); ++i) EXPECT_GE(cards[i - 1].npfv_confidence, cards[i].npfv_confidence);
  EXPECT_EQ(cards[0].top_images.size(), 5u);
  EXPECT_TRUE(cards[0].top_images[0].image_id.has_value());
  EXPECT_EQ(nlohmann::json::parse(read_file(dir_ / "cards" / "baseline_k0.json")).size(), 5u);
  EXPECT_EQ(run({"rank", "--features", d("mlp_features.npfd"), "--labels", d("labels.nplb"), "--head",
                 d("mlp_head.nphd"), "--npca-dir", p("mnpca"), "--npfv-dir", p("npfv"), "--class", "0", "--out",
                 p("cards2")})
                .code,
            2);  // sidecars for components beyond the first 12 are missing

  // SpuFix on the planted component, then the spurious score.
  SpuriousRegistry reg;
  reg.model_id = "synthetic";
  reg.classes[0] = {report["planted_component"].get<std::size_t>()};
  write_registry(dir_ / "reg.json", reg);
  for (const std::string split : {"val", "spurious"}) {
    ASSERT_EQ(run({"spufix", "--features", d(split + "_features.npfd"), "--head", d("head.nphd"), "--npca-dir",
                   p("npca"), "--registry", p("reg.json"), "--out", p(split + "_fix.npfd"), "--original-out",
                   p(split + "_orig.npfd")})
                  .code,
              0);
  }
  for (const std::string variant : {"original", "spufix"}) {
    const std::string tag = variant == "original" ? "orig" : "fix";
    r = run({"eval", "--val-logits", p("val_" + tag + ".npfd"), "--val-labels", d("val_labels.nplb"),
             "--spurious-logits", p("spurious_" + tag + ".npfd"), "--spurious-labels", d("spurious_labels.nplb"),
             "--class-names", d("classes.json"), "--variant", variant, "--out", p("eval_" + tag)});
    ASSERT_EQ(r.code, 0) << r.err;
    const double mauc = nlohmann::json::parse(r.out)["mauc"].get<double>();
    EXPECT_NEAR(mauc, report[variant == "original" ? "auc_before" : "auc_after"].get<double>(), 1e-6);
    const auto csv = read_file(dir_ / ("eval_" + tag) / "report.csv");
    EXPECT_NE(csv.find("0,class_0,75,50,"), std::string::npos);
  }

  // Transfer onto the source model itself recovers native SpuFix.
  ASSERT_EQ(run({"transfer", "--source-features", d("features.npfd"), "--labels", d("labels.nplb"), "--source-head",
                 d("head.nphd"), "--npca-dir", p("npca"), "--registry", p("reg.json"), "--target-features",
                 d("features.npfd"), "--target-head", d("head.nphd"), "--eval-features", d("spurious_features.npfd"),
                 "--out", p("tr.npfd")})
                .code,
            0);
  const auto a = read_feature_dump(dir_ / "tr.npfd").to_matrix();
  const auto b = read_feature_dump(dir_ / "spurious_fix.npfd").to_matrix();
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-4);
}

TEST_F(CliTest, DeterministicAndInputsUntouched) {
  synth();
  const auto features = read_file(dir_ / "d/features.npfd");
  fs::rename(dir_ / "d", dir_ / "d1");
  synth();
  for (const char* f : {"features.npfd", "labels.nplb", "head.nphd", "val_features.npfd", "spurious_features.npfd",
                        "manifest.json", "synth_spec.json"})
    EXPECT_EQ(read_file(dir_ / "d" / f), read_file(dir_ / "d1" / f)) << f;
  for (const char* out : {"n1", "n2"})
    ASSERT_EQ(run({"--jobs", out[1] == '1' ? "1" : "3", "npca", "--features", p("d/features.npfd"), "--labels",
                   p("d/labels.nplb"), "--head", p("d/head.nphd"), "--all", "--out", p(out)})
                  .code,
              0);
  for (int k = 0; k < 5; ++k)
    EXPECT_EQ(read_file(dir_ / "n1" / npca_filename(k)), read_file(dir_ / "n2" / npca_filename(k)));
  EXPECT_EQ(read_file(dir_ / "d/features.npfd"), features);
}

TEST_F(CliTest, Diversity) {
  DistanceMatrix dm{6, std::vector<float>(36, 1.0f)};
  for (int i = 0; i < 6; ++i) dm.d[i * 6 + i] = 0.f;
  write_distance_matrix(dir_ / "dm.npdm", dm);
  write_file(dir_ / "groups.json", R"([{"class":0,"components":[[0,1],[1,2],[3,4]]}])");
  auto r = run({"diversity", "--groups", p("groups.json"), "--dm", p("dm.npdm"), "--bins", "2", "--range", "0", "1",
                "--out", p("div")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto dists = read_feature_dump(dir_ / "div" / "matched_distances.npfd");
  EXPECT_EQ(dists.n, 1u);
  EXPECT_EQ(dists.d, 12u);
  const auto h = nlohmann::json::parse(read_file(dir_ / "div" / "histogram.json"));
  EXPECT_EQ(h["identical_pairs"][0]["identical_pairs"], 1);
  EXPECT_EQ(h["counts"], nlohmann::json::array({2, 10}));
}
