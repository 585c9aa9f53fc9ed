#pragma once

// Synthetic bundles with a planted spurious feature that the head of class 0
// picks up. The identity "network" (phi = x) isolates the linear algebra; the
// TinyMlp variant renders the same data as 8-bit-style images in [0,1] for
// feature visualization.
//
// Generation order for SynthSpec (one Rng stream seeded with `seed`):
//   1. u (unless given): offset = below(D - patch + 1); u_j = 1/sqrt(patch) on [offset, offset+patch).
//   2. per class k: a support of `object_support` coordinates outside the patch, drawn by a partial
//      Fisher-Yates shuffle of the non-patch coordinates (ascending order); mu_k = +-1 on the
//      support (sign: uniform() < 0.5 -> -1), rescaled to norm `class_scale`.
//   3. head: w_k = mu_k / |mu_k|, w_0 += gamma * u, bias 0.
//   4. training rows, class-major: x = mu_k + sigma * normal() per coordinate; then floor(rho * n)
//      class-0 rows (partial Fisher-Yates over 0..n-1) get + s*u.
//   5. validation rows, same recipe with n_val per class.
//   6. spurious-only rows: sigma * normal() + s*u, labeled 0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spur/error.hpp"
#include "spur/evaluation.hpp"
#include "spur/npca.hpp"
#include "spur/npfv.hpp"
#include "spur/rng.hpp"
#include "spur/spufix.hpp"
#include "spur/tensorio.hpp"

namespace spur {

struct SynthSpec {
  std::uint32_t k_classes = 5;
  std::uint32_t d_features = 64;
  std::uint32_t n_per_class = 200;
  double rho = 0.15;
  double s = 4.0;
  double sigma = 1.0;
  double gamma = 1.5;
  std::uint64_t seed = 17;
  std::uint32_t n_val_per_class = 50;
  std::uint32_t n_spurious = 75;
  double class_scale = 4.0;
  std::uint32_t patch = 20;
  std::uint32_t object_support = 6;
  std::optional<Vector> u;  // planted unit direction; drawn from the seed when absent

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorCode::kInvalidArgument, "SynthSpec: " + m); };
    if (k_classes < 1 || d_features < 1 || n_per_class < 2) bad("need K >= 1, D >= 1, n >= 2");
    if (!(rho > 0.0 && rho < 1.0)) bad("rho must be in (0,1)");
    if (!(s > 0.0) || !(sigma > 0.0)) bad("s and sigma must be > 0");
    if (u) {
      if (static_cast<std::uint32_t>(u->size()) != d_features) bad("u has wrong dimension");
      if (std::abs(u->norm() - 1.0) > 1e-9) bad("u must have unit norm");
    } else {
      if (patch < 1 || patch > d_features) bad("patch must be in [1, D]");
    }
    if (object_support < 1 || object_support > d_features - (u ? 0 : patch)) bad("object_support too large");
  }
};

struct SynthBundle {
  FeatureDump features;
  LabelVector labels;
  HeadWeights head;
  FeatureDump val_features;
  LabelVector val_labels;
  FeatureDump spurious;
  LabelVector spurious_labels;
  Vector u;
  std::vector<std::size_t> planted_rows;  // training rows carrying s*u
  std::vector<std::string> warnings;
};

namespace detail {

// First `count` entries of a partial Fisher-Yates shuffle of `pool`, sorted ascending.
inline std::vector<std::size_t> draw_subset(Rng& rng, std::vector<std::size_t> pool, std::size_t count) {
  count = std::min(count, pool.size());
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline void append_rows(Rng& rng, std::vector<float>& data, const Vector& mu, double sigma, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < mu.size(); ++j) data.push_back(static_cast<float>(mu[j] + sigma * rng.normal()));
}

inline void plant(std::vector<float>& data, std::size_t d, std::size_t row, const Vector& u, double s) {
  for (std::size_t j = 0; j < d; ++j) data[row * d + j] += static_cast<float>(s * u[static_cast<Eigen::Index>(j)]);
}

}  // namespace detail

inline SynthBundle generate_bundle(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::uint32_t K = spec.k_classes, D = spec.d_features;
  SynthBundle b;

  std::vector<bool> in_patch(D, false);
  if (spec.u) {
    b.u = *spec.u;
  } else {
    const auto offset = static_cast<std::uint32_t>(rng.below(D - spec.patch + 1));
    b.u = Vector::Zero(D);
    for (std::uint32_t j = offset; j < offset + spec.patch; ++j) {
      b.u[j] = 1.0 / std::sqrt(static_cast<double>(spec.patch));
      in_patch[j] = true;
    }
  }
  std::vector<std::size_t> object_pool;
  for (std::uint32_t j = 0; j < D; ++j)
    if (!in_patch[j]) object_pool.push_back(j);

  std::vector<Vector> mu(K);
  for (std::uint32_t k = 0; k < K; ++k) {
    mu[k] = Vector::Zero(D);
    for (auto j : detail::draw_subset(rng, object_pool, spec.object_support))
      mu[k][static_cast<Eigen::Index>(j)] = rng.uniform() < 0.5 ? -1.0 : 1.0;
    mu[k] *= spec.class_scale / mu[k].norm();
  }

  b.head.k = K;
  b.head.d = D;
  b.head.w.resize(static_cast<std::size_t>(K) * D);
  b.head.bias.assign(K, 0.0f);
  for (std::uint32_t k = 0; k < K; ++k) {
    Vector w = mu[k] / mu[k].norm();
    if (k == 0) w += spec.gamma * b.u;
    for (std::uint32_t j = 0; j < D; ++j) b.head.w[static_cast<std::size_t>(k) * D + j] = static_cast<float>(w[j]);
  }

  auto make_split = [&](std::uint32_t n_per, FeatureDump& f, LabelVector& l, std::vector<std::size_t>* planted) {
    f.d = D;
    f.n = K * n_per;
    f.data.reserve(static_cast<std::size_t>(f.n) * D);
    for (std::uint32_t k = 0; k < K; ++k) {
      detail::append_rows(rng, f.data, mu[k], spec.sigma, n_per);
      l.labels.insert(l.labels.end(), n_per, k);
    }
    const auto n_planted = static_cast<std::size_t>(std::floor(spec.rho * n_per));
    std::vector<std::size_t> pool(n_per);
    std::iota(pool.begin(), pool.end(), 0);
    const auto rows = detail::draw_subset(rng, pool, n_planted);
    for (auto r : rows) detail::plant(f.data, D, r, b.u, spec.s);
    if (planted) *planted = rows;
    return n_planted;
  };

  if (make_split(spec.n_per_class, b.features, b.labels, &b.planted_rows) == 0)
    b.warnings.push_back("rho * n_per_class < 1: no planted training rows");
  make_split(spec.n_val_per_class, b.val_features, b.val_labels, nullptr);

  b.spurious.d = D;
  b.spurious.n = spec.n_spurious;
  detail::append_rows(rng, b.spurious.data, Vector::Zero(D), spec.sigma, spec.n_spurious);
  for (std::size_t r = 0; r < spec.n_spurious; ++r) detail::plant(b.spurious.data, D, r, b.u, spec.s);
  b.spurious_labels.labels.assign(spec.n_spurious, 0);
  return b;
}

// ---------------------------------------------------------------------------
// Verification

struct SynthReport {
  double alignment = 0.0;              // |cos(v_1, w_0 (.) u)| for the top-variance component of class 0
  std::size_t planted_component = 0;   // component with the largest |cos| to w_0 (.) u
  double planted_alignment = 0.0;
  double auc_before = 0.0;
  double auc_after = 0.0;
  double spurious_class0_rate = 0.0;   // fraction of spurious-only rows predicted as class 0
  std::size_t n_planted = 0;
};

inline Vector planted_target(const SynthBundle& b) {
  const Vector t = b.head.row(0).cwiseProduct(b.u);
  return t / t.norm();
}

// Class-0 probabilities of logit rows.
inline std::vector<double> class_probs(const Matrix& logits, std::uint32_t k) {
  std::vector<double> p(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) p[static_cast<std::size_t>(i)] = softmax(logits.row(i).transpose())[k];
  return p;
}

inline SynthReport evaluate_synthetic(const SynthBundle& b) {
  SynthReport rep;
  rep.n_planted = b.planted_rows.size();
  const ClassNpca npca = fit_class_npca(compute_class_psi(b.features, b.labels, b.head, 0));
  const Vector target = planted_target(b);
  const Vector cos = (npca.eigenvectors * target).cwiseAbs();
  rep.alignment = cos[0];
  Eigen::Index best = 0;
  rep.planted_alignment = cos.maxCoeff(&best);
  rep.planted_component = static_cast<std::size_t>(best);

  std::map<std::uint32_t, ClassNpca> npcas{{0, npca}};
  SpuriousRegistry reg;
  reg.classes[0] = {rep.planted_component};

  // Validation rows of class 0 are the positives; spurious-only rows the negatives.
  const auto val_rows = b.val_labels.rows_of(0);
  auto val0 = FeatureDump{};
  val0.d = b.val_features.d;
  val0.n = static_cast<std::uint32_t>(val_rows.size());
  for (auto r : val_rows)
    val0.data.insert(val0.data.end(), b.val_features.data.begin() + static_cast<std::ptrdiff_t>(r * val0.d),
                     b.val_features.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * val0.d));

  const Matrix val_base = direct_logits(val0, b.head);
  const Matrix spur_base = direct_logits(b.spurious, b.head);
  const Matrix val_fix = spufix_logits(npcas, b.head, reg, val0, val_base);
  const Matrix spur_fix = spufix_logits(npcas, b.head, reg, b.spurious, spur_base);

  rep.auc_before = roc_auc(class_probs(val_base, 0), class_probs(spur_base, 0));
  rep.auc_after = roc_auc(class_probs(val_fix, 0), class_probs(spur_fix, 0));

  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < spur_base.rows(); ++i) {
    Eigen::Index arg = 0;
    spur_base.row(i).maxCoeff(&arg);
    hits += arg == 0 ? 1 : 0;
  }
  rep.spurious_class0_rate = spur_base.rows() ? static_cast<double>(hits) / static_cast<double>(spur_base.rows()) : 0.0;
  return rep;
}

inline nlohmann::json to_json(const SynthReport& r) {
  return {{"alignment", r.alignment},
          {"planted_component", r.planted_component},
          {"planted_alignment", r.planted_alignment},
          {"auc_before", r.auc_before},
          {"auc_after", r.auc_after},
          {"spurious_class0_rate", r.spurious_class0_rate},
          {"n_planted", r.n_planted}};
}

inline nlohmann::json to_json(const SynthSpec& s, const Vector& u) {
  return {{"k_classes", s.k_classes}, {"d_features", s.d_features}, {"n_per_class", s.n_per_class},
          {"rho", s.rho},             {"s", s.s},                   {"sigma", s.sigma},
          {"gamma", s.gamma},         {"seed", s.seed},             {"n_val_per_class", s.n_val_per_class},
          {"n_spurious", s.n_spurious}, {"class_scale", s.class_scale}, {"patch", s.patch},
          {"object_support", s.object_support}, {"u", std::vector<double>(u.data(), u.data() + u.size())},
          {"rng", "xoshiro256** seeded by SplitMix64; normals by Box-Muller"}};
}

// ---------------------------------------------------------------------------
// TinyMlp variant: the same rows rendered as images x = clamp(0.5 + scale * row, 0, 1)
// and passed through a sign-split hidden layer W1 = [I; -I] + jitter * N(0,1)
// (H = 2D), c1 = -W1 * 0.5 + offset, so the gray image is strictly inside the
// active region. The head over the hidden layer is [w; -w] / scale, which
// reproduces the identity model's logits up to a constant on unclamped inputs.

struct SynthMlpBundle {
  SynthBundle base;
  TinyMlp mlp;  // npca filled for every class with >= 2 rows
  Matrix inputs;           // training images, N x D
  Matrix spurious_inputs;  // spurious-only images
  FeatureDump hidden;      // phi of the training images
};

struct SynthMlpOptions {
  double input_scale = 0.1;
  double jitter = 0.05;
  double offset = 0.02;
};

inline Matrix to_images(const FeatureDump& f, double scale) {
  return (0.5 + (f.to_matrix() * scale).array()).cwiseMax(0.0).cwiseMin(1.0).matrix();
}

inline SynthMlpBundle generate_mlp_bundle(const SynthSpec& spec, const SynthMlpOptions& opt = {}) {
  SynthMlpBundle out;
  out.base = generate_bundle(spec);
  const std::uint32_t D = spec.d_features, K = spec.k_classes;
  Rng rng(spec.seed ^ 0x6d6c7076ULL);  // independent stream for the layer jitter

  out.mlp.w1 = Matrix::Zero(2 * D, D);
  for (std::uint32_t j = 0; j < D; ++j) {
    out.mlp.w1(j, j) = 1.0;
    out.mlp.w1(D + j, j) = -1.0;
  }
  for (Eigen::Index i = 0; i < out.mlp.w1.rows(); ++i)
    for (Eigen::Index j = 0; j < out.mlp.w1.cols(); ++j) out.mlp.w1(i, j) += opt.jitter * rng.normal();
  out.mlp.c1 = -out.mlp.w1 * Vector::Constant(D, 0.5) + Vector::Constant(2 * D, opt.offset);

  HeadWeights& h = out.mlp.head;
  h.k = K;
  h.d = 2 * D;
  h.w.resize(static_cast<std::size_t>(K) * 2 * D);
  h.bias = out.base.head.bias;
  for (std::uint32_t k = 0; k < K; ++k)
    for (std::uint32_t j = 0; j < D; ++j) {
      const float w = static_cast<float>(out.base.head.w[static_cast<std::size_t>(k) * D + j] / opt.input_scale);
      h.w[static_cast<std::size_t>(k) * 2 * D + j] = w;
      h.w[static_cast<std::size_t>(k) * 2 * D + D + j] = -w;
    }

  out.inputs = to_images(out.base.features, opt.input_scale);
  out.spurious_inputs = to_images(out.base.spurious, opt.input_scale);
  out.hidden = out.mlp.feature_dump(out.inputs);
  for (std::uint32_t k = 0; k < K; ++k) {
    const auto rows = out.base.labels.rows_of(k);
    if (rows.size() < 2) continue;
    out.mlp.npca.emplace(k, fit_class_npca(compute_psi(out.hidden, h, k, rows)));
  }
  return out;
}

// Class-0 component of the MLP NPCA best aligned with the planted patch in hidden space.
inline std::size_t mlp_planted_component(const SynthMlpBundle& b) {
  const Vector u_img = b.base.u;
  // Hidden response to moving the image along u from gray.
  const Vector gray = Vector::Constant(u_img.size(), 0.5);
  const Vector dphi = b.mlp.features(gray + 0.1 * u_img) - b.mlp.features(gray);
  const Vector target = b.mlp.head.row(0).cwiseProduct(dphi).normalized();
  Eigen::Index best = 0;
  (b.mlp.class_npca(0).eigenvectors * target).cwiseAbs().maxCoeff(&best);
  return static_cast<std::size_t>(best);
}

}  // namespace spur
