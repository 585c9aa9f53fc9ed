#pragma once

// `spuraudit` command line: one subcommand per pipeline stage.
// Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal error.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spur/diversity.hpp"
#include "spur/error.hpp"
#include "spur/evaluation.hpp"
#include "spur/label_service.hpp"
#include "spur/npca.hpp"
#include "spur/npfv.hpp"
#include "spur/parallel.hpp"
#include "spur/ranking.hpp"
#include "spur/spufix.hpp"
#include "spur/synthbench.hpp"
#include "spur/tensorio.hpp"

#ifndef SPUR_VERSION
#define SPUR_VERSION "0.0.0"
#endif

namespace spur::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

// Raised for flag combinations CLI11 cannot express; maps to exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create directory '" + dir.string() + "': " + ec.message());
}

inline std::vector<std::uint32_t> select_classes(const std::vector<std::uint32_t>& given, bool all, std::uint32_t k) {
  if (all && !given.empty()) throw UsageError("--class and --all are mutually exclusive");
  if (!all && given.empty()) throw UsageError("one of --class or --all is required");
  std::vector<std::uint32_t> out;
  if (all) {
    for (std::uint32_t c = 0; c < k; ++c) out.push_back(c);
  } else {
    for (auto c : given) {
      if (c >= k) throw Error(ErrorCode::kOutOfRange, "class " + std::to_string(c) + " >= K=" + std::to_string(k));
      out.push_back(c);
    }
  }
  return out;
}

inline std::map<std::uint32_t, ClassNpca> load_npcas(const fs::path& dir, const std::set<std::uint32_t>& classes) {
  std::map<std::uint32_t, ClassNpca> out;
  for (auto k : classes) out.emplace(k, read_npca(dir / npca_filename(k)));
  return out;
}

inline std::set<std::uint32_t> registry_classes(const SpuriousRegistry& reg) {
  std::set<std::uint32_t> out;
  for (const auto& [k, comps] : reg.classes)
    if (!comps.empty()) out.insert(k);
  return out;
}

inline void write_logits(const fs::path& path, const Matrix& logits) {
  write_feature_dump(path, FeatureDump::from_matrix(logits));
}

inline std::map<std::uint32_t, std::string> read_class_names(const std::optional<fs::path>& path) {
  std::map<std::uint32_t, std::string> names;
  if (!path) return names;
  const auto j = nlohmann::json::parse(read_file(*path));
  for (const auto& c : j) names[c.at("class").get<std::uint32_t>()] = c.value("class_name", std::string());
  return names;
}

inline nlohmann::json class_names_json(std::uint32_t k) {
  auto arr = nlohmann::json::array();
  for (std::uint32_t c = 0; c < k; ++c) arr.push_back({{"class", c}, {"class_name", "class_" + std::to_string(c)}});
  return arr;
}

inline void add_synth_options(CLI::App* sub, SynthSpec& spec) {
  sub->add_option("--k", spec.k_classes, "Number of classes")->capture_default_str();
  sub->add_option("--d", spec.d_features, "Feature dimension")->capture_default_str();
  sub->add_option("--n", spec.n_per_class, "Training rows per class")->capture_default_str();
  sub->add_option("--rho", spec.rho, "Fraction of class-0 rows carrying the planted feature")->capture_default_str();
  sub->add_option("--s", spec.s, "Planted signal strength")->capture_default_str();
  sub->add_option("--sigma", spec.sigma, "Noise scale")->capture_default_str();
  sub->add_option("--gamma", spec.gamma, "Head pickup of the planted direction")->capture_default_str();
  sub->add_option("--seed", spec.seed, "Seed")->capture_default_str();
  sub->add_option("--n-val", spec.n_val_per_class, "Validation rows per class")->capture_default_str();
  sub->add_option("--n-spurious", spec.n_spurious, "Spurious-only rows")->capture_default_str();
  sub->add_option("--patch", spec.patch, "Support size of the planted direction")->capture_default_str();
  sub->add_option("--object-support", spec.object_support, "Support size of each class mean")->capture_default_str();
}

inline std::pair<std::size_t, std::size_t> image_shape(std::size_t dim, std::size_t width, std::size_t height) {
  if (width && height) return {width, height};
  if (width) return {width, dim / width};
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  if (side * side == dim) return {side, side};
  return {dim, 1};
}

}  // namespace detail

// Runs the CLI; `out` receives data written to standard output, `err` diagnostics.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Class-wise neural PCA toolkit: spurious-feature detection, SpuFix mitigation and evaluation",
               "spuraudit"};
  app.set_version_flag("--version", std::string("spuraudit ") + SPUR_VERSION);
  app.require_subcommand(1);
  unsigned jobs = default_jobs();
  app.add_option("--jobs", jobs, "Worker threads for per-class work")->check(CLI::PositiveNumber);

  // ingest
  struct {
    std::string features, labels, head, manifest, out;
  } ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Validate a feature bundle and report per-class counts");
  c_ingest->add_option("--features", ingest.features, "NPFD feature dump")->required();
  c_ingest->add_option("--labels", ingest.labels, "NPLB labels")->required();
  c_ingest->add_option("--head", ingest.head, "NPHD head")->required();
  c_ingest->add_option("--manifest", ingest.manifest, "Manifest JSON");
  c_ingest->add_option("--out", ingest.out, "Write the report here instead of stdout");

  // npca
  struct {
    std::string features, labels, head, out;
    std::vector<std::uint32_t> classes;
    bool all = false;
    std::size_t components = 0;
  } npca;
  auto* c_npca = app.add_subcommand("npca", "Fit class-wise neural PCA");
  c_npca->add_option("--features", npca.features, "NPFD feature dump")->required();
  c_npca->add_option("--labels", npca.labels, "NPLB labels")->required();
  c_npca->add_option("--head", npca.head, "NPHD head")->required();
  c_npca->add_option("--class", npca.classes, "Class index (repeatable)");
  c_npca->add_flag("--all", npca.all, "All classes of the head");
  c_npca->add_option("--components", npca.components, "Retained components (0 = all)")->capture_default_str();
  c_npca->add_option("--out", npca.out, "Output directory")->required();

  // npfv
  struct {
    std::string mlp, head, npca_dir, out;
    std::uint32_t cls = 0;
    std::vector<std::size_t> components;
    std::size_t top_variance = kDefaultTopVariance;
    ApgdConfig cfg;
    bool no_clamp = false;
    std::size_t width = 0, height = 0;
  } npfv;
  auto* c_npfv = app.add_subcommand("npfv", "Generate NPCA feature visualizations with APGD");
  c_npfv->add_option("--mlp", npfv.mlp, "NPML first layer of the TinyMlp")->required();
  c_npfv->add_option("--head", npfv.head, "NPHD head over the hidden layer")->required();
  c_npfv->add_option("--npca-dir", npfv.npca_dir, "Directory with npca_k{K}.npca of the hidden layer")->required();
  c_npfv->add_option("--class", npfv.cls, "Class index")->required();
  c_npfv->add_option("--components", npfv.components, "Components (default: top-variance)");
  c_npfv->add_option("--top-variance", npfv.top_variance, "Number of top-variance components")->capture_default_str();
  c_npfv->add_option("--eps", npfv.cfg.epsilon, "L2 budget")->capture_default_str()->check(CLI::NonNegativeNumber);
  c_npfv->add_option("--steps", npfv.cfg.steps, "APGD steps")->capture_default_str()->check(CLI::PositiveNumber);
  c_npfv->add_option("--seed", npfv.cfg.seed, "Seed for --random-start")->capture_default_str();
  c_npfv->add_flag("--random-start", npfv.cfg.random_start, "Start from a seeded perturbation of the gray image");
  c_npfv->add_flag("--no-clamp", npfv.no_clamp, "Do not clamp iterates to [0,1]");
  c_npfv->add_option("--width", npfv.width, "Image width for the PGM asset");
  c_npfv->add_option("--height", npfv.height, "Image height for the PGM asset");
  c_npfv->add_option("--out", npfv.out, "Output directory")->required();

  // rank
  struct {
    std::string features, labels, head, npca_dir, npfv_dir, manifest, heatmaps, out;
    std::vector<std::uint32_t> classes;
    bool all = false;
    std::size_t top_variance = kDefaultTopVariance, keep = kDefaultKeep, top_images = kDefaultTopImages,
                top_neurons = kDefaultTopNeurons;
  } rank;
  auto* c_rank = app.add_subcommand("rank", "Build component cards and the top-neuron baseline");
  c_rank->add_option("--features", rank.features, "NPFD feature dump")->required();
  c_rank->add_option("--labels", rank.labels, "NPLB labels")->required();
  c_rank->add_option("--head", rank.head, "NPHD head")->required();
  c_rank->add_option("--npca-dir", rank.npca_dir, "Directory with npca_k{K}.npca")->required();
  c_rank->add_option("--npfv-dir", rank.npfv_dir, "Directory with NPFV sidecars")->required();
  c_rank->add_option("--manifest", rank.manifest, "Manifest JSON for image ids and asset paths");
  c_rank->add_option("--heatmaps", rank.heatmaps, "Directory of precomputed heatmaps heatmap_k{K}_c{L}*");
  c_rank->add_option("--class", rank.classes, "Class index (repeatable)");
  c_rank->add_flag("--all", rank.all, "All classes of the head");
  c_rank->add_option("--top-variance", rank.top_variance, "Candidate components by variance")->capture_default_str();
  c_rank->add_option("--keep", rank.keep, "Cards kept by NPFV confidence")->capture_default_str();
  c_rank->add_option("--top-images", rank.top_images, "Most-activating images per card")->capture_default_str();
  c_rank->add_option("--top-neurons", rank.top_neurons, "Baseline neurons per class")->capture_default_str();
  c_rank->add_option("--out", rank.out, "Output directory")->required();

  // spufix
  struct {
    std::string features, head, npca_dir, registry, out, original_out;
  } fix;
  auto* c_fix = app.add_subcommand("spufix", "Apply SpuFix to logits of the detection model");
  c_fix->add_option("--features", fix.features, "NPFD features of the rows to correct")->required();
  c_fix->add_option("--head", fix.head, "NPHD head")->required();
  c_fix->add_option("--npca-dir", fix.npca_dir, "Directory with npca_k{K}.npca")->required();
  c_fix->add_option("--registry", fix.registry, "Registry JSON")->required();
  c_fix->add_option("--out", fix.out, "Corrected logits (NPFD, rows x K)")->required();
  c_fix->add_option("--original-out", fix.original_out, "Also write the uncorrected logits");

  // transfer
  struct {
    std::string source_features, labels, source_head, npca_dir, registry, target_features, target_head,
        eval_features, out, original_out;
  } tr;
  auto* c_tr = app.add_subcommand("transfer", "Transfer SpuFix to another classifier via matched directions");
  c_tr->add_option("--source-features", tr.source_features, "Source model training features")->required();
  c_tr->add_option("--labels", tr.labels, "Training labels shared by both dumps")->required();
  c_tr->add_option("--source-head", tr.source_head, "Source NPHD head")->required();
  c_tr->add_option("--npca-dir", tr.npca_dir, "Source NPCA directory")->required();
  c_tr->add_option("--registry", tr.registry, "Registry JSON")->required();
  c_tr->add_option("--target-features", tr.target_features, "Target model features of the same training rows")
      ->required();
  c_tr->add_option("--target-head", tr.target_head, "Target NPHD head")->required();
  c_tr->add_option("--eval-features", tr.eval_features, "Target features of the rows to correct (default: training)");
  c_tr->add_option("--out", tr.out, "Corrected target logits (NPFD)")->required();
  c_tr->add_option("--original-out", tr.original_out, "Also write the uncorrected target logits");

  // eval
  struct {
    std::string val_logits, val_labels, spur_logits, spur_labels, class_names, model_id = "model", variant = "original",
                                                                                 out;
  } ev;
  auto* c_eval = app.add_subcommand("eval", "Spurious-score AUC report from logits");
  c_eval->add_option("--val-logits", ev.val_logits, "Validation logits (NPFD)")->required();
  c_eval->add_option("--val-labels", ev.val_labels, "Validation labels (NPLB)")->required();
  c_eval->add_option("--spurious-logits", ev.spur_logits, "Spurious-image logits (NPFD)")->required();
  c_eval->add_option("--spurious-labels", ev.spur_labels, "Class each spurious image belongs to (NPLB)")->required();
  c_eval->add_option("--class-names", ev.class_names, "JSON [{class, class_name}]");
  c_eval->add_option("--model-id", ev.model_id, "Model identifier")->capture_default_str();
  c_eval->add_option("--variant", ev.variant, "original | spufix")
      ->capture_default_str()
      ->check(CLI::IsMember({"original", "spufix"}));
  c_eval->add_option("--out", ev.out, "Output directory")->required();

  // diversity
  struct {
    std::string groups, dm, out;
    double tol = 0.0;
    std::size_t bins = 20;
    std::vector<double> range, edges;
  } dv;
  auto* c_dv = app.add_subcommand("diversity", "Matched distances and identical pairs of activating image sets");
  c_dv->add_option("--groups", dv.groups, "Groups JSON")->required();
  c_dv->add_option("--dm", dv.dm, "NPDM distance matrix")->required();
  c_dv->add_option("--tol", dv.tol, "Distance treated as identical")->capture_default_str();
  c_dv->add_option("--bins", dv.bins, "Histogram bins over --range")->capture_default_str();
  c_dv->add_option("--range", dv.range, "Histogram range lo hi (default 0..max)")->expected(2);
  c_dv->add_option("--edges", dv.edges, "Explicit histogram bin edges");
  c_dv->add_option("--out", dv.out, "Output directory")->required();

  // synth / synth-eval
  SynthSpec synth_spec;
  std::string synth_out;
  bool synth_mlp = false;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic planted-feature bundle");
  detail::add_synth_options(c_synth, synth_spec);
  c_synth->add_flag("--mlp", synth_mlp, "Also write the TinyMlp image variant");
  c_synth->add_option("--out", synth_out, "Output directory")->required();

  SynthSpec eval_spec;
  auto* c_synth_eval = app.add_subcommand("synth-eval", "Print the synthetic verification report as JSON");
  detail::add_synth_options(c_synth_eval, eval_spec);

  // serve
  struct {
    std::string cards, assets, log, registry, ui, bind = "127.0.0.1", model_id;
    int port = 8080;
  } sv;
  auto* c_serve = app.add_subcommand("serve", "Run the labeling HTTP service");
  c_serve->add_option("--cards", sv.cards, "Directory with cards_k{K}.json (and optional classes.json)")->required();
  c_serve->add_option("--assets", sv.assets, "Directory served under /assets")->required();
  c_serve->add_option("--log", sv.log, "JSONL label log")->required();
  c_serve->add_option("--port", sv.port, "Port")->capture_default_str();
  c_serve->add_option("--bind", sv.bind, "Bind address")->capture_default_str();
  c_serve->add_option("--registry", sv.registry, "Final registry path (default: next to the log)");
  c_serve->add_option("--model-id", sv.model_id, "Model id recorded in the registry");
  c_serve->add_option("--ui", sv.ui, "Directory with the labeling UI served at /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (c_ingest->parsed()) {
      const auto features = read_feature_dump(ingest.features);
      const auto labels = read_labels(ingest.labels);
      const auto head = read_head(ingest.head);
      std::optional<Manifest> manifest;
      if (!ingest.manifest.empty()) manifest = read_manifest(ingest.manifest);
      const auto rep = validate_bundle(features, labels, head, manifest ? &*manifest : nullptr);
      const std::string text = to_json(rep).dump(2) + "\n";
      if (ingest.out.empty()) {
        out << text;
      } else {
        write_file(ingest.out, text);
      }
      for (const auto& f : rep.findings) err << (f.severity == Finding::Severity::kError ? "error: " : "warning: ")
                                             << f.message << "\n";
      return rep.has_errors() ? kData : kOk;
    }

    if (c_npca->parsed()) {
      const auto features = read_feature_dump(npca.features);
      const auto labels = read_labels(npca.labels);
      const auto head = read_head(npca.head);
      check_head_matches(head, features);
      const auto classes = detail::select_classes(npca.classes, npca.all, head.k);
      detail::ensure_dir(npca.out);
      parallel_for(classes.size(), jobs, [&](std::size_t i) {
        const auto k = classes[i];
        const auto fitted = fit_class_npca(compute_class_psi(features, labels, head, k), npca.components);
        write_npca(fs::path(npca.out) / npca_filename(k), fitted);
      });
      return kOk;
    }

    if (c_npfv->parsed()) {
      TinyMlp mlp;
      decode_mlp_layer(read_file(npfv.mlp), mlp);
      mlp.head = read_head(npfv.head);
      if (npfv.cls >= mlp.head.k) throw Error(ErrorCode::kOutOfRange, "class out of range");
      mlp.npca.emplace(npfv.cls, read_npca(fs::path(npfv.npca_dir) / npca_filename(npfv.cls)));
      const ClassNpca& cn = mlp.class_npca(npfv.cls);
      if (cn.dim() != mlp.hidden_dim() || mlp.head.d != mlp.hidden_dim())
        throw Error(ErrorCode::kDimensionMismatch, "npfv: MLP hidden size, head and NPCA disagree");
      std::vector<std::size_t> comps = npfv.components;
      if (comps.empty()) comps = top_variance_components(cn, npfv.top_variance);
      for (auto l : comps)
        if (l >= cn.components()) throw Error(ErrorCode::kOutOfRange, "component " + std::to_string(l) + " >= M");
      npfv.cfg.clamp_box = !npfv.no_clamp;
      const auto [w, h] = detail::image_shape(mlp.input_dim(), npfv.width, npfv.height);
      detail::ensure_dir(npfv.out);
      TinyMlpOracle oracle(mlp);
      parallel_for(comps.size(), jobs, [&](std::size_t i) {
        const auto res = generate_npfv(oracle, npfv.cls, comps[i], npfv.cfg);
        write_npfv_assets(npfv.out, res, npfv.cfg, w, h);
      });
      return kOk;
    }

    if (c_rank->parsed()) {
      const auto features = read_feature_dump(rank.features);
      const auto labels = read_labels(rank.labels);
      const auto head = read_head(rank.head);
      check_head_matches(head, features);
      std::optional<Manifest> manifest;
      if (!rank.manifest.empty()) manifest = read_manifest(rank.manifest);
      const auto classes = detail::select_classes(rank.classes, rank.all, head.k);
      const Matrix logits = direct_logits(features, head);
      detail::ensure_dir(rank.out);
      parallel_for(classes.size(), jobs, [&](std::size_t ci) {
        const auto k = classes[ci];
        const auto cn = read_npca(fs::path(rank.npca_dir) / npca_filename(k));
        const auto psi = compute_class_psi(features, labels, head, k);
        std::vector<ComponentCard> cards;
        for (auto l : top_variance_components(cn, rank.top_variance)) {
          const auto side = fs::path(rank.npfv_dir) / (npfv_stem(k, l) + ".json");
          if (!fs::exists(side))
            throw Error(ErrorCode::kIo, "missing NPFV sidecar '" + side.string() + "' (run npfv first)");
          const auto sj = nlohmann::json::parse(read_file(side));
          ComponentCard card;
          card.class_index = k;
          card.component = l;
          card.eigenvalue = cn.eigenvalues[static_cast<Eigen::Index>(l)];
          card.variance = cn.variance(l);
          card.npfv_confidence = sj.at("confidence").get<double>();
          card.npfv_objective = sj.at("objective").get<double>();
          card.npfv_asset = npfv_stem(k, l) + ".pgm";
          cards.push_back(std::move(card));
        }
        cards = rank_by_confidence(std::move(cards), rank.keep);
        for (auto& card : cards) {
          for (const auto& ra : top_activating_images(cn, psi, card.component, rank.top_images)) {
            TopImage t;
            t.row = ra.row;
            t.alpha = ra.alpha;
            t.class_confidence = softmax(logits.row(static_cast<Eigen::Index>(ra.row)).transpose())[k];
            if (manifest) {
              if (const auto* e = manifest->find_row(static_cast<std::uint32_t>(ra.row))) {
                t.image_id = e->id;
                t.asset_path = e->path;
              }
            }
            card.top_images.push_back(std::move(t));
          }
          if (!rank.heatmaps.empty() && fs::is_directory(rank.heatmaps)) {
            const std::string prefix = "heatmap_k" + std::to_string(k) + "_c" + std::to_string(card.component);
            for (const auto& entry : fs::directory_iterator(rank.heatmaps)) {
              const auto name = entry.path().filename().string();
              if (name.rfind(prefix, 0) == 0 &&
                  (name.size() == prefix.size() || name[prefix.size()] == '_' || name[prefix.size()] == '.'))
                card.heatmaps.push_back(name);
            }
            std::sort(card.heatmaps.begin(), card.heatmaps.end());
          }
        }
        write_file(fs::path(rank.out) / cards_filename(k), cards_to_json(cards).dump(2) + "\n");
        write_file(fs::path(rank.out) / ("baseline_k" + std::to_string(k) + ".json"),
                   to_json(baseline_top_neurons(psi, rank.top_neurons)).dump(2) + "\n");
      });
      return kOk;
    }

    if (c_fix->parsed()) {
      const auto features = read_feature_dump(fix.features);
      const auto head = read_head(fix.head);
      const auto reg = read_registry(fix.registry);
      const auto npcas = detail::load_npcas(fix.npca_dir, detail::registry_classes(reg));
      const Matrix base = direct_logits(features, head);
      detail::write_logits(fix.out, spufix_logits(npcas, head, reg, features, base));
      if (!fix.original_out.empty()) detail::write_logits(fix.original_out, base);
      return kOk;
    }

    if (c_tr->parsed()) {
      const auto src = read_feature_dump(tr.source_features);
      const auto labels = read_labels(tr.labels);
      const auto src_head = read_head(tr.source_head);
      const auto reg = read_registry(tr.registry);
      const auto tgt = read_feature_dump(tr.target_features);
      const auto tgt_head = read_head(tr.target_head);
      const auto npcas = detail::load_npcas(tr.npca_dir, detail::registry_classes(reg));
      const auto bases = match_all(npcas, src_head, src, labels, tgt_head, tgt, reg);
      for (const auto& [k, b] : bases)
        for (auto l : b.skipped)
          err << "warning: class " << k << " component " << l << " has a vanishing matched direction; skipped\n";
      const auto eval_rows = tr.eval_features.empty() ? tgt : read_feature_dump(tr.eval_features);
      const Matrix base = direct_logits(eval_rows, tgt_head);
      detail::write_logits(tr.out, transfer_spufix_logits(bases, tgt_head, eval_rows, base));
      if (!tr.original_out.empty()) detail::write_logits(tr.original_out, base);
      return kOk;
    }

    if (c_eval->parsed()) {
      const auto val_logits = read_feature_dump(ev.val_logits);
      const auto val_labels = read_labels(ev.val_labels);
      const auto spur_logits = read_feature_dump(ev.spur_logits);
      const auto spur_labels = read_labels(ev.spur_labels);
      const auto names =
          detail::read_class_names(ev.class_names.empty() ? std::nullopt : std::optional<fs::path>(ev.class_names));
      auto report = spurious_report(
          scored_samples_from_logits(val_logits, val_labels, spur_logits, spur_labels, names), ev.model_id, ev.variant);
      report.top1_accuracy = top1_accuracy(val_logits, val_labels);
      detail::ensure_dir(ev.out);
      write_file(fs::path(ev.out) / "report.csv", report_csv(report));
      write_file(fs::path(ev.out) / "summary.json", report_summary_json(report).dump(2) + "\n");
      write_file(fs::path(ev.out) / "bars.json", report_bars_json(report).dump(2) + "\n");
      for (const auto& f : report.findings) err << "warning: " << f << "\n";
      out << report_summary_json(report).dump() << "\n";
      return kOk;
    }

    if (c_dv->parsed()) {
      const auto groups = groups_from_json(nlohmann::json::parse(read_file(dv.groups)));
      const auto dm = read_distance_matrix(dv.dm);
      const auto dists = all_matched_distances(groups, dm);
      std::vector<std::size_t> pairs;
      for (const auto& g : groups) pairs.push_back(identical_pairs(g, dm, dv.tol));
      std::vector<double> edges = dv.edges;
      if (edges.empty()) {
        double lo = 0.0, hi = 0.0;
        if (!dv.range.empty()) {
          lo = dv.range[0];
          hi = dv.range[1];
        } else {
          for (double d : dists) hi = std::max(hi, d);
          if (hi <= lo) hi = lo + 1.0;
        }
        edges = uniform_edges(lo, hi, dv.bins);
      }
      const auto hist = histogram(dists, edges);
      detail::ensure_dir(dv.out);
      FeatureDump dump;
      dump.n = 1;
      dump.d = static_cast<std::uint32_t>(dists.size());
      for (double d : dists) dump.data.push_back(static_cast<float>(d));
      write_feature_dump(fs::path(dv.out) / "matched_distances.npfd", dump);
      write_file(fs::path(dv.out) / "histogram.json", diversity_summary_json(hist, groups, pairs, dv.tol).dump(2) + "\n");
      return kOk;
    }

    if (c_synth->parsed()) {
      const fs::path dir = synth_out;
      detail::ensure_dir(dir);
      const auto b = generate_bundle(synth_spec);
      for (const auto& w : b.warnings) err << "warning: " << w << "\n";
      write_feature_dump(dir / "features.npfd", b.features);
      write_labels(dir / "labels.nplb", b.labels);
      write_head(dir / "head.nphd", b.head);
      write_feature_dump(dir / "val_features.npfd", b.val_features);
      write_labels(dir / "val_labels.nplb", b.val_labels);
      write_feature_dump(dir / "spurious_features.npfd", b.spurious);
      write_labels(dir / "spurious_labels.nplb", b.spurious_labels);
      Manifest m;
      for (std::uint32_t i = 0; i < b.features.n; ++i)
        m.entries.push_back({i, "train_" + std::to_string(i), std::nullopt,
                             "class_" + std::to_string(b.labels.labels[i])});
      write_manifest(dir / "manifest.json", m);
      write_file(dir / "classes.json", detail::class_names_json(synth_spec.k_classes).dump(2) + "\n");
      auto spec_json = to_json(synth_spec, b.u);
      spec_json["planted_rows"] = b.planted_rows;
      write_file(dir / "synth_spec.json", spec_json.dump(2) + "\n");
      if (synth_mlp) {
        const auto mb = generate_mlp_bundle(synth_spec);
        write_file(dir / "mlp.npml", encode_mlp_layer(mb.mlp));
        write_head(dir / "mlp_head.nphd", mb.mlp.head);
        write_feature_dump(dir / "mlp_features.npfd", mb.hidden);
        write_feature_dump(dir / "images.npfd", FeatureDump::from_matrix(mb.inputs));
      }
      return kOk;
    }

    if (c_synth_eval->parsed()) {
      out << to_json(evaluate_synthetic(generate_bundle(eval_spec))).dump(2) << "\n";
      return kOk;
    }

    if (c_serve->parsed()) {
      LabelServiceConfig cfg;
      cfg.cards_dir = sv.cards;
      cfg.assets_dir = sv.assets;
      cfg.log_path = sv.log;
      cfg.registry_path =
          sv.registry.empty() ? fs::path(sv.log).parent_path() / "registry_final.json" : fs::path(sv.registry);
      if (!sv.ui.empty()) cfg.ui_dir = sv.ui;
      cfg.model_id = sv.model_id;
      LabelService service(std::move(cfg));
      err << "serving on http://" << sv.bind << ":" << sv.port << "\n";
      if (!service.listen(sv.bind, sv.port)) {
        err << "error: cannot listen on " << sv.bind << ":" << sv.port << "\n";
        return kData;
      }
      return kOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed JSON: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}

}  // namespace spur::cli
