#pragma once

// Class-wise neural PCA over head-weighted penultimate features.
//
// For class k the weighted feature of an input is psi_k = w_k (.) phi, whose
// coordinates sum (plus b_k) to the class logit. The eigenvectors of the
// class scatter of psi_k split the logit into additive per-component
// contributions alpha_l = <1, v_l> <psi_k - mean, v_l>.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spur/error.hpp"
#include "spur/tensorio.hpp"

namespace spur {

struct WeightedFeatures {
  std::uint32_t class_index = 0;
  std::vector<std::size_t> rows;  // source row index of each psi row
  Matrix psi;                     // rows.size() x D

  std::size_t size() const { return rows.size(); }
};

struct ClassNpca {
  std::uint32_t class_index = 0;
  std::uint32_t sample_count = 0;
  Vector mean;          // D
  Matrix eigenvectors;  // M x D, row l = v_l
  Vector eigenvalues;   // M, non-increasing; eigenvalues of the unnormalized scatter
  Vector ones_dot;      // M, <1, v_l>

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
  std::size_t components() const { return static_cast<std::size_t>(eigenvalues.size()); }

  // Conventional sample variance along v_l.
  double variance(std::size_t l) const {
    return sample_count > 1 ? eigenvalues[l] / static_cast<double>(sample_count - 1) : 0.0;
  }
};

// psi rows for the given source rows: psi[i][j] = w[k][j] * phi[idx_i][j].
inline WeightedFeatures compute_psi(const FeatureDump& features, const HeadWeights& head, std::uint32_t k,
                                    const std::vector<std::size_t>& idx) {
  check_head_matches(head, features);
  if (k >= head.k) throw Error(ErrorCode::kOutOfRange, "class " + std::to_string(k) + " >= K=" + std::to_string(head.k));
  if (idx.empty()) throw Error(ErrorCode::kInvalidArgument, "compute_psi: empty row subset for class " + std::to_string(k));
  WeightedFeatures out;
  out.class_index = k;
  out.rows = idx;
  out.psi.resize(static_cast<Eigen::Index>(idx.size()), head.d);
  const float* w = head.w.data() + static_cast<std::size_t>(k) * head.d;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= features.n)
      throw Error(ErrorCode::kOutOfRange, "compute_psi: row " + std::to_string(idx[i]) + " >= n");
    const float* phi = features.data.data() + idx[i] * features.d;
    for (std::size_t j = 0; j < head.d; ++j)
      out.psi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          static_cast<double>(w[j]) * static_cast<double>(phi[j]);
  }
  return out;
}

// All rows of class k according to `labels`.
inline WeightedFeatures compute_class_psi(const FeatureDump& features, const LabelVector& labels,
                                          const HeadWeights& head, std::uint32_t k) {
  return compute_psi(features, head, k, labels.rows_of(k));
}

namespace detail {

// Flips v so that its largest-magnitude coordinate is positive (first index on ties).
inline void canonicalize_sign(Eigen::Ref<Vector> v) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < v.size(); ++j)
    if (std::abs(v[j]) > std::abs(v[best])) best = j;
  if (v.size() > 0 && v[best] < 0) v = -v;
}

}  // namespace detail

inline Matrix scatter_matrix(const Matrix& psi, const Vector& mean) {
  const Matrix centered = psi.rowwise() - mean.transpose();
  return centered.transpose() * centered;
}

// Top-m eigenpairs of the unnormalized class scatter. m = 0 keeps all D components.
inline ClassNpca fit_class_npca(const WeightedFeatures& psi, std::size_t m = 0) {
  const std::size_t n = psi.size();
  const auto d = static_cast<std::size_t>(psi.psi.cols());
  if (n < 2)
    throw Error(ErrorCode::kDegenerateClass,
                "class " + std::to_string(psi.class_index) + " has " + std::to_string(n) + " samples; need >= 2");
  if (m == 0) m = d;
  if (m > d) throw Error(ErrorCode::kInvalidArgument, "retained components m=" + std::to_string(m) + " > D");

  ClassNpca out;
  out.class_index = psi.class_index;
  out.sample_count = static_cast<std::uint32_t>(n);
  out.mean = psi.psi.colwise().mean().transpose();

  Eigen::SelfAdjointEigenSolver<Matrix> solver(scatter_matrix(psi.psi, out.mean));
  if (solver.info() != Eigen::Success)
    throw Error(ErrorCode::kNotConverged, "eigen-solver did not converge for class " + std::to_string(psi.class_index));

  // Eigen returns ascending order; keep the largest m, descending.
  const auto& evals = solver.eigenvalues();
  const auto& evecs = solver.eigenvectors();
  out.eigenvalues.resize(static_cast<Eigen::Index>(m));
  out.eigenvectors.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
  for (std::size_t l = 0; l < m; ++l) {
    const auto src = static_cast<Eigen::Index>(d - 1 - l);
    out.eigenvalues[static_cast<Eigen::Index>(l)] = evals[src];
    Vector v = evecs.col(src);
    detail::canonicalize_sign(v);
    out.eigenvectors.row(static_cast<Eigen::Index>(l)) = v.transpose();
  }
  out.ones_dot = out.eigenvectors.rowwise().sum();
  return out;
}

// alpha_l = <1, v_l> <psi - mean, v_l> for every retained component.
inline Vector alpha_values(const ClassNpca& npca, const Vector& psi_row) {
  if (static_cast<std::size_t>(psi_row.size()) != npca.dim())
    throw Error(ErrorCode::kDimensionMismatch, "alpha_values: psi row has wrong dimension");
  const Vector proj = npca.eigenvectors * (psi_row - npca.mean);
  return npca.ones_dot.cwiseProduct(proj);
}

// alpha for every psi row at once: rows x M.
inline Matrix alpha_matrix(const ClassNpca& npca, const Matrix& psi) {
  if (static_cast<std::size_t>(psi.cols()) != npca.dim())
    throw Error(ErrorCode::kDimensionMismatch, "alpha_matrix: psi has wrong dimension");
  const Matrix proj = (psi.rowwise() - npca.mean.transpose()) * npca.eigenvectors.transpose();
  return proj * npca.ones_dot.asDiagonal();
}

// Rebuilds the class-k logit from its component contributions. Requires the full basis.
inline double reconstruct_logit(const ClassNpca& npca, const HeadWeights& head, const Vector& psi_row) {
  if (npca.components() != npca.dim())
    throw Error(ErrorCode::kInvalidArgument, "reconstruct_logit: truncated basis (M=" +
                                                 std::to_string(npca.components()) + " < D=" +
                                                 std::to_string(npca.dim()) + ")");
  if (npca.class_index >= head.k || head.d != npca.dim())
    throw Error(ErrorCode::kDimensionMismatch, "reconstruct_logit: head does not match NPCA");
  return alpha_values(npca, psi_row).sum() + npca.mean.sum() + static_cast<double>(head.bias[npca.class_index]);
}

// ---------------------------------------------------------------------------
// NPCA binary: "NPCA" u32 version=1, u32 k, u32 d, u32 m, u32 n_samples,
// d f32 mean, m f32 eigenvalues, m*d f32 eigenvectors (row-major).

inline std::string encode_npca(const ClassNpca& c) {
  std::string out;
  const auto d = static_cast<std::uint32_t>(c.dim());
  const auto m = static_cast<std::uint32_t>(c.components());
  out.reserve(24 + 4 * (d + m + static_cast<std::size_t>(m) * d));
  detail::put_magic(out, "NPCA");
  detail::put_u32(out, kFormatVersion);
  detail::put_u32(out, c.class_index);
  detail::put_u32(out, d);
  detail::put_u32(out, m);
  detail::put_u32(out, c.sample_count);
  for (std::uint32_t j = 0; j < d; ++j) detail::put_f32(out, static_cast<float>(c.mean[j]));
  for (std::uint32_t l = 0; l < m; ++l) detail::put_f32(out, static_cast<float>(c.eigenvalues[l]));
  for (std::uint32_t l = 0; l < m; ++l)
    for (std::uint32_t j = 0; j < d; ++j) detail::put_f32(out, static_cast<float>(c.eigenvectors(l, j)));
  return out;
}

inline ClassNpca decode_npca(std::string_view bytes) {
  detail::ByteReader r(bytes, "NPCA");
  r.expect_magic("NPCA");
  r.expect_version();
  ClassNpca c;
  c.class_index = r.u32("k");
  const std::uint32_t d = r.u32("d");
  const std::uint32_t m = r.u32("m");
  c.sample_count = r.u32("n_samples");
  if (m > d) throw Error(ErrorCode::kInvalidArgument, "NPCA: m > d", 12);
  r.need_payload(static_cast<std::uint64_t>(d) + m + static_cast<std::uint64_t>(m) * d, 4, "npca payload");
  c.mean.resize(d);
  for (std::uint32_t j = 0; j < d; ++j) c.mean[j] = r.f32("mean");
  c.eigenvalues.resize(m);
  for (std::uint32_t l = 0; l < m; ++l) c.eigenvalues[l] = r.f32("eigenvalue");
  c.eigenvectors.resize(m, d);
  for (std::uint32_t l = 0; l < m; ++l)
    for (std::uint32_t j = 0; j < d; ++j) c.eigenvectors(l, j) = r.f32("eigenvector");
  r.expect_end();
  c.ones_dot = c.eigenvectors.rowwise().sum();
  return c;
}

inline std::string npca_filename(std::uint32_t k) { return "npca_k" + std::to_string(k) + ".npca"; }

inline ClassNpca read_npca(const std::filesystem::path& path) { return decode_npca(read_file(path)); }
inline void write_npca(const std::filesystem::path& path, const ClassNpca& c) { write_file(path, encode_npca(c)); }

}  // namespace spur
