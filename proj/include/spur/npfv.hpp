#pragma once

// Feature visualization of NPCA components: maximize alpha_l^(k)(x) from a
// gray start inside an L2 ball with APGD (momentum + step-halving checkpoints).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "spur/error.hpp"
#include "spur/evaluation.hpp"
#include "spur/npca.hpp"
#include "spur/rng.hpp"
#include "spur/tensorio.hpp"

namespace spur {

class GradientOracle {
 public:
  virtual ~GradientOracle() = default;

  virtual std::size_t input_dim() const = 0;
  // (alpha_l^(k)(x), d alpha / dx)
  virtual std::pair<double, Vector> value_and_grad(const Vector& x, std::uint32_t k, std::size_t l) const = 0;
  // Softmax probability of class k at x.
  virtual double confidence(const Vector& x, std::uint32_t k) const = 0;
};

// One hidden ReLU layer followed by a linear head: phi(x) = ReLU(W1 x + c1).
struct TinyMlp {
  Matrix w1;  // H x D_in
  Vector c1;  // H
  HeadWeights head;
  std::map<std::uint32_t, ClassNpca> npca;

  std::size_t input_dim() const { return static_cast<std::size_t>(w1.cols()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(w1.rows()); }

  Vector features(const Vector& x) const { return (w1 * x + c1).cwiseMax(0.0); }

  Vector logits(const Vector& x) const { return head.weight_matrix() * features(x) + head.bias_vector(); }

  const ClassNpca& class_npca(std::uint32_t k) const {
    auto it = npca.find(k);
    if (it == npca.end()) throw Error(ErrorCode::kOutOfRange, "TinyMlp: no NPCA for class " + std::to_string(k));
    return it->second;
  }

  // Features of many inputs (rows of x) as a dump.
  FeatureDump feature_dump(const Matrix& inputs) const {
    Matrix pre = (inputs * w1.transpose()).rowwise() + c1.transpose();
    return FeatureDump::from_matrix(pre.cwiseMax(0.0));
  }
};

// Value and exact subgradient (ReLU'(0) = 0) of alpha_l^(k) through the MLP.
inline std::pair<double, Vector> value_and_grad_tinymlp(const TinyMlp& mlp, const Vector& x, std::uint32_t k,
                                                        std::size_t l) {
  if (static_cast<std::size_t>(x.size()) != mlp.input_dim())
    throw Error(ErrorCode::kDimensionMismatch, "TinyMlp: input has wrong dimension");
  const ClassNpca& npca = mlp.class_npca(k);
  if (l >= npca.components()) throw Error(ErrorCode::kOutOfRange, "TinyMlp: component out of range");
  if (npca.dim() != mlp.hidden_dim() || mlp.head.d != mlp.hidden_dim())
    throw Error(ErrorCode::kDimensionMismatch, "TinyMlp: head/NPCA dimension does not match hidden layer");

  const Vector pre = mlp.w1 * x + mlp.c1;
  const Vector wk = mlp.head.row(k);
  const Vector v = npca.eigenvectors.row(static_cast<Eigen::Index>(l)).transpose();
  const double ones_dot = npca.ones_dot[static_cast<Eigen::Index>(l)];

  Vector psi(pre.size());
  Vector upstream(pre.size());
  for (Eigen::Index j = 0; j < pre.size(); ++j) {
    const bool active = pre[j] > 0.0;
    psi[j] = wk[j] * (active ? pre[j] : 0.0);
    upstream[j] = active ? ones_dot * v[j] * wk[j] : 0.0;
  }
  const double value = ones_dot * (psi - npca.mean).dot(v);
  return {value, mlp.w1.transpose() * upstream};
}

class TinyMlpOracle final : public GradientOracle {
 public:
  explicit TinyMlpOracle(const TinyMlp& mlp) : mlp_(&mlp) {}

  std::size_t input_dim() const override { return mlp_->input_dim(); }
  std::pair<double, Vector> value_and_grad(const Vector& x, std::uint32_t k, std::size_t l) const override {
    return value_and_grad_tinymlp(*mlp_, x, k, l);
  }
  double confidence(const Vector& x, std::uint32_t k) const override { return softmax_prob(mlp_->logits(x), k); }

 private:
  const TinyMlp* mlp_;
};

// ---------------------------------------------------------------------------
// APGD

struct ApgdConfig {
  double epsilon = 30.0;
  std::size_t steps = 200;
  bool clamp_box = true;
  double momentum = 0.75;
  // Step is halved at a checkpoint when fewer than this fraction of the steps since the previous one improved.
  double success_ratio = 0.75;
  double initial_step_factor = 2.0;  // initial step = factor * epsilon
  bool random_start = false;         // perturb the start by a seeded draw of norm epsilon/2
  std::uint64_t seed = 0;
};

struct NpfvResult {
  std::uint32_t class_index = 0;
  std::size_t component = 0;
  Vector z;
  double objective = 0.0;
  double confidence = 0.0;
  std::vector<double> trace;  // trace[0] at the start, trace[t] best after step t
};

// Checkpoint iterations ceil(p_j * steps) with p_0 = 0, p_1 = 0.22,
// p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06), for p_j <= 1.
inline std::vector<std::size_t> apgd_checkpoints(std::size_t steps) {
  std::vector<double> p = {0.0, 0.22};
  while (true) {
    const double next = p.back() + std::max(p.back() - p[p.size() - 2] - 0.03, 0.06);
    if (next > 1.0) break;
    p.push_back(next);
  }
  std::vector<std::size_t> w;
  for (double pj : p) {
    const auto c = static_cast<std::size_t>(std::ceil(pj * static_cast<double>(steps) - 1e-9));
    if (w.empty() || c > w.back()) w.push_back(c);
  }
  return w;
}

namespace detail {

inline Vector project_feasible(const Vector& x, const Vector& start, double eps, bool clamp_box) {
  Vector delta = x - start;
  const double norm = delta.norm();
  if (norm > eps) delta *= eps / norm;
  Vector out = start + delta;
  if (clamp_box) out = out.cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

inline void check_finite(const Vector& g, double value) {
  if (!std::isfinite(value) || !g.allFinite())
    throw Error(ErrorCode::kNonFinite, "APGD: oracle returned a non-finite value or gradient");
}

inline Vector normalized(const Vector& g) {
  const double n = g.norm();
  return n > 0.0 ? Vector(g / n) : Vector(Vector::Zero(g.size()));
}

}  // namespace detail

using IterateObserver = std::function<void(std::size_t step, const Vector& x)>;

// Maximizes oracle's alpha_l^(k) over {x : ||x - start||_2 <= eps} (intersected
// with [0,1]^d when clamping). Returns the best iterate seen.
inline NpfvResult apgd_maximize(const GradientOracle& oracle, std::uint32_t k, std::size_t l, const Vector& start,
                                const ApgdConfig& cfg, const IterateObserver& observe = {}) {
  if (cfg.epsilon < 0.0) throw Error(ErrorCode::kInvalidArgument, "APGD: epsilon must be >= 0");
  if (cfg.steps < 1) throw Error(ErrorCode::kInvalidArgument, "APGD: steps must be >= 1");
  if (static_cast<std::size_t>(start.size()) != oracle.input_dim())
    throw Error(ErrorCode::kDimensionMismatch, "APGD: start has wrong dimension");
  if (cfg.clamp_box && (start.minCoeff() < 0.0 || start.maxCoeff() > 1.0))
    throw Error(ErrorCode::kInvalidArgument, "APGD: start outside [0,1] box with clamping enabled");

  NpfvResult res;
  res.class_index = k;
  res.component = l;

  auto project = [&](const Vector& x) { return detail::project_feasible(x, start, cfg.epsilon, cfg.clamp_box); };

  Vector x_cur = start;
  if (cfg.random_start && cfg.epsilon > 0.0) {
    Rng rng(cfg.seed);
    Vector dir(start.size());
    for (Eigen::Index i = 0; i < dir.size(); ++i) dir[i] = rng.normal();
    x_cur = project(start + detail::normalized(dir) * (0.5 * cfg.epsilon));
  }
  if (observe) observe(0, x_cur);

  auto [f_cur, g_cur] = oracle.value_and_grad(x_cur, k, l);
  detail::check_finite(g_cur, f_cur);

  Vector x_best = x_cur;
  Vector g_best = g_cur;
  double f_best = f_cur;
  res.trace.push_back(f_best);

  if (cfg.epsilon == 0.0) {
    res.trace.assign(cfg.steps + 1, f_best);
    res.z = x_best;
    res.objective = f_best;
    res.confidence = oracle.confidence(x_best, k);
    return res;
  }

  const auto checkpoints = apgd_checkpoints(cfg.steps);
  std::size_t next_cp = 1;  // checkpoints[0] == 0
  double eta = cfg.initial_step_factor * cfg.epsilon;
  double eta_at_last_cp = eta;
  double f_best_at_last_cp = f_best;
  std::size_t successes = 0;
  bool halved_last_time = false;

  Vector x_prev = x_cur;
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const Vector z = project(x_cur + eta * detail::normalized(g_cur));
    Vector x_next;
    if (t == 0) {
      x_next = z;
    } else {
      x_next = project(x_cur + cfg.momentum * (z - x_cur) + (1.0 - cfg.momentum) * (x_cur - x_prev));
    }
    if (observe) observe(t + 1, x_next);

    auto [f_next, g_next] = oracle.value_and_grad(x_next, k, l);
    detail::check_finite(g_next, f_next);

    if (f_next > f_cur) ++successes;
    if (f_next > f_best) {
      f_best = f_next;
      x_best = x_next;
      g_best = g_next;
    }
    res.trace.push_back(f_best);

    x_prev = x_cur;
    x_cur = std::move(x_next);
    f_cur = f_next;
    g_cur = std::move(g_next);

    const std::size_t iter = t + 1;
    if (next_cp < checkpoints.size() && iter == checkpoints[next_cp]) {
      const std::size_t span = checkpoints[next_cp] - checkpoints[next_cp - 1];
      const bool few_successes = static_cast<double>(successes) < cfg.success_ratio * static_cast<double>(span);
      const bool stalled = !halved_last_time && eta_at_last_cp == eta && f_best_at_last_cp == f_best;
      halved_last_time = few_successes || stalled;
      eta_at_last_cp = eta;
      f_best_at_last_cp = f_best;
      if (halved_last_time) {
        eta *= 0.5;
        x_prev = x_best;
        x_cur = x_best;
        f_cur = f_best;
        g_cur = g_best;
      }
      successes = 0;
      ++next_cp;
    }
  }

  res.z = x_best;
  res.objective = f_best;
  res.confidence = oracle.confidence(x_best, k);
  return res;
}

// Gray image start g = 0.5 * 1.
inline NpfvResult generate_npfv(const GradientOracle& oracle, std::uint32_t k, std::size_t l, const ApgdConfig& cfg,
                                const IterateObserver& observe = {}) {
  const Vector gray = Vector::Constant(static_cast<Eigen::Index>(oracle.input_dim()), 0.5);
  return apgd_maximize(oracle, k, l, gray, cfg, observe);
}

// ---------------------------------------------------------------------------
// Assets

inline std::string npfv_stem(std::uint32_t k, std::size_t l) {
  return "npfv_k" + std::to_string(k) + "_c" + std::to_string(l);
}

// Binary 8-bit PGM (P5), linear [0,1] -> [0,255] with clamping.
inline std::string encode_pgm(const Vector& pixels, std::size_t width, std::size_t height) {
  if (static_cast<std::size_t>(pixels.size()) != width * height)
    throw Error(ErrorCode::kDimensionMismatch, "PGM: vector length " + std::to_string(pixels.size()) +
                                                   " != width*height " + std::to_string(width * height));
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.reserve(out.size() + width * height);
  for (Eigen::Index i = 0; i < pixels.size(); ++i) {
    const double v = std::clamp(pixels[i], 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  return out;
}

inline nlohmann::json npfv_sidecar(const NpfvResult& r, const ApgdConfig& cfg) {
  return {{"class", r.class_index},     {"component", r.component}, {"objective", r.objective},
          {"confidence", r.confidence}, {"epsilon", cfg.epsilon},   {"steps", cfg.steps},
          {"clamp_box", cfg.clamp_box}};
}

// Writes <dir>/npfv_k{K}_c{L}.pgm and the JSON sidecar; returns the PGM filename.
inline std::string write_npfv_assets(const std::filesystem::path& dir, const NpfvResult& r, const ApgdConfig& cfg,
                                     std::size_t width, std::size_t height) {
  const std::string stem = npfv_stem(r.class_index, r.component);
  write_file(dir / (stem + ".pgm"), encode_pgm(r.z, width, height));
  write_file(dir / (stem + ".json"), npfv_sidecar(r, cfg).dump(2) + "\n");
  return stem + ".pgm";
}

// ---------------------------------------------------------------------------
// TinyMlp first layer: "NPML" u32 version=1, u32 d_in, u32 h, h*d_in f32 W1, h f32 c1.
// The head (NPHD over the hidden layer) and per-class NPCA files are stored separately.

inline std::string encode_mlp_layer(const TinyMlp& mlp) {
  std::string out;
  detail::put_magic(out, "NPML");
  detail::put_u32(out, kFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(mlp.input_dim()));
  detail::put_u32(out, static_cast<std::uint32_t>(mlp.hidden_dim()));
  for (Eigen::Index i = 0; i < mlp.w1.rows(); ++i)
    for (Eigen::Index j = 0; j < mlp.w1.cols(); ++j) detail::put_f32(out, static_cast<float>(mlp.w1(i, j)));
  for (Eigen::Index i = 0; i < mlp.c1.size(); ++i) detail::put_f32(out, static_cast<float>(mlp.c1[i]));
  return out;
}

inline void decode_mlp_layer(std::string_view bytes, TinyMlp& mlp) {
  detail::ByteReader r(bytes, "NPML");
  r.expect_magic("NPML");
  r.expect_version();
  const std::uint32_t din = r.u32("d_in");
  const std::uint32_t h = r.u32("h");
  r.need_payload(static_cast<std::uint64_t>(h) * din + h, 4, "mlp payload");
  mlp.w1.resize(h, din);
  for (std::uint32_t i = 0; i < h; ++i)
    for (std::uint32_t j = 0; j < din; ++j) mlp.w1(i, j) = r.f32("W1");
  mlp.c1.resize(h);
  for (std::uint32_t i = 0; i < h; ++i) mlp.c1[i] = r.f32("c1");
  r.expect_end();
}

}  // namespace spur
