#pragma once

// SpuFix: truncation of the positive logit contribution of registered
// spurious NPCA components, and its transfer to a foreign classifier through
// matched directions and a least-squares projection onto their span.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "spur/error.hpp"
#include "spur/npca.hpp"
#include "spur/tensorio.hpp"

namespace spur {

enum class Verdict { kSpurious, kNotSpurious };

inline const char* to_string(Verdict v) { return v == Verdict::kSpurious ? "spurious" : "not_spurious"; }

inline Verdict parse_verdict(const std::string& s) {
  if (s == "spurious") return Verdict::kSpurious;
  if (s == "not_spurious") return Verdict::kNotSpurious;
  throw Error(ErrorCode::kParse, "unknown verdict '" + s + "'");
}

using ComponentKey = std::pair<std::uint32_t, std::size_t>;  // (class, component)

struct VerdictEntry {
  Verdict verdict = Verdict::kNotSpurious;
  std::string ts;  // ISO-8601
};

struct LabelerSession {
  std::string labeler_id;
  std::map<ComponentKey, VerdictEntry> verdicts;
};

struct SpuriousRegistry {
  std::string model_id;
  std::map<std::uint32_t, std::set<std::size_t>> classes;
  std::vector<LabelerSession> sessions;

  const std::set<std::size_t>* components_of(std::uint32_t k) const {
    auto it = classes.find(k);
    return it == classes.end() || it->second.empty() ? nullptr : &it->second;
  }
};

// (k, l) is kept iff every session marks it spurious.
inline SpuriousRegistry finalize_registry(const std::vector<LabelerSession>& sessions, std::string model_id = {}) {
  if (sessions.size() < 2)
    throw Error(ErrorCode::kInvalidArgument, "finalize_registry: need at least two labeler sessions, got " +
                                                 std::to_string(sessions.size()));
  SpuriousRegistry reg;
  reg.model_id = std::move(model_id);
  reg.sessions = sessions;
  for (const auto& [key, entry] : sessions.front().verdicts) {
    if (entry.verdict != Verdict::kSpurious) continue;
    const bool unanimous = std::all_of(sessions.begin() + 1, sessions.end(), [&](const LabelerSession& s) {
      auto it = s.verdicts.find(key);
      return it != s.verdicts.end() && it->second.verdict == Verdict::kSpurious;
    });
    if (unanimous) reg.classes[key.first].insert(key.second);
  }
  return reg;
}

// Every registered component must exist in the class NPCA.
inline void validate_registry(const SpuriousRegistry& reg, const std::map<std::uint32_t, ClassNpca>& npcas) {
  for (const auto& [k, comps] : reg.classes) {
    if (comps.empty()) continue;
    auto it = npcas.find(k);
    if (it == npcas.end())
      throw Error(ErrorCode::kOutOfRange, "registry references class " + std::to_string(k) + " without NPCA");
    for (auto l : comps)
      if (l >= it->second.components())
        throw Error(ErrorCode::kOutOfRange, "registry component " + std::to_string(l) + " of class " +
                                                std::to_string(k) + " >= M=" +
                                                std::to_string(it->second.components()));
  }
}

// ---------------------------------------------------------------------------
// Native SpuFix

// Direct logits <w_k, phi> + b_k for every row: N x K.
inline Matrix direct_logits(const FeatureDump& features, const HeadWeights& head) {
  check_head_matches(head, features);
  return (features.to_matrix() * head.weight_matrix().transpose()).rowwise() + head.bias_vector().transpose();
}

// f_k - sum_{l in S_k} max(alpha_l^(k), 0), applied to `base_logits` (N x K) of the same rows.
inline Matrix spufix_logits(const std::map<std::uint32_t, ClassNpca>& npcas, const HeadWeights& head,
                            const SpuriousRegistry& reg, const FeatureDump& features, const Matrix& base_logits) {
  validate_registry(reg, npcas);
  check_head_matches(head, features);
  if (base_logits.rows() != features.n || base_logits.cols() != head.k)
    throw Error(ErrorCode::kDimensionMismatch, "spufix_logits: base logits shape does not match rows x K");
  Matrix out = base_logits;
  if (features.n == 0) return out;
  std::vector<std::size_t> all_rows(features.n);
  for (std::size_t i = 0; i < all_rows.size(); ++i) all_rows[i] = i;
  for (const auto& [k, comps] : reg.classes) {
    if (comps.empty()) continue;
    if (k >= head.k) throw Error(ErrorCode::kOutOfRange, "registry class " + std::to_string(k) + " >= K");
    const ClassNpca& npca = npcas.at(k);
    const WeightedFeatures psi = compute_psi(features, head, k, all_rows);
    const Matrix alpha = alpha_matrix(npca, psi.psi);
    for (Eigen::Index i = 0; i < alpha.rows(); ++i) {
      double cut = 0.0;
      for (auto l : comps) cut += std::max(alpha(i, static_cast<Eigen::Index>(l)), 0.0);
      out(i, k) -= cut;
    }
  }
  return out;
}

inline Matrix spufix_logits(const std::map<std::uint32_t, ClassNpca>& npcas, const HeadWeights& head,
                            const SpuriousRegistry& reg, const FeatureDump& features) {
  return spufix_logits(npcas, head, reg, features, direct_logits(features, head));
}

// ---------------------------------------------------------------------------
// Transfer to a foreign classifier

inline constexpr double kMatchedNormFloor = 1e-12;
inline constexpr double kGramRelativeCutoff = 1e-10;

struct MatchedBasis {
  std::uint32_t class_index = 0;
  std::vector<std::size_t> components;  // source component of each retained row
  Matrix directions;                    // L x D~, unit rows b_l
  Matrix gram_pinv;                     // (B B^T)^+ over the rows, L x L
  double gram_cutoff = 0.0;             // absolute eigenvalue cutoff used for the pseudo-inverse
  std::size_t gram_rank = 0;
  Vector target_mean;                   // mean of target psi over I_k
  Vector ones_dot;                      // <1, b_l>
  std::vector<std::size_t> skipped;     // components with a vanishing matched numerator

  std::size_t size() const { return components.size(); }
};

namespace detail {

inline void fill_gram_pinv(MatchedBasis& basis) {
  const auto L = basis.directions.rows();
  basis.gram_pinv = Matrix::Zero(L, L);
  basis.gram_rank = 0;
  if (L == 0) return;
  Eigen::SelfAdjointEigenSolver<Matrix> es(basis.directions * basis.directions.transpose());
  if (es.info() != Eigen::Success) throw Error(ErrorCode::kNotConverged, "matched basis: Gram eigen-solver failed");
  const double max_ev = es.eigenvalues().cwiseAbs().maxCoeff();
  basis.gram_cutoff = kGramRelativeCutoff * max_ev;
  for (Eigen::Index i = 0; i < L; ++i) {
    const double ev = es.eigenvalues()[i];
    if (ev <= basis.gram_cutoff) continue;
    ++basis.gram_rank;
    basis.gram_pinv += es.eigenvectors().col(i) * es.eigenvectors().col(i).transpose() / ev;
  }
}

}  // namespace detail

// b_l = sum_s (psi~_s - mean~) alpha_l(x_s) / ||.||_2 over the paired rows of class k.
inline MatchedBasis match_directions(const ClassNpca& source_npca, const WeightedFeatures& source_psi,
                                     const WeightedFeatures& target_psi, const std::set<std::size_t>& spurious) {
  if (source_psi.size() != target_psi.size())
    throw Error(ErrorCode::kDimensionMismatch, "match_directions: source has " + std::to_string(source_psi.size()) +
                                                   " rows, target " + std::to_string(target_psi.size()));
  if (source_psi.rows != target_psi.rows)
    throw Error(ErrorCode::kInvalidArgument, "match_directions: source and target rows are not paired");
  if (source_psi.size() == 0) throw Error(ErrorCode::kInvalidArgument, "match_directions: no rows");

  MatchedBasis basis;
  basis.class_index = source_npca.class_index;
  basis.target_mean = target_psi.psi.colwise().mean().transpose();
  const Matrix centered = target_psi.psi.rowwise() - basis.target_mean.transpose();
  const Matrix alpha = alpha_matrix(source_npca, source_psi.psi);

  std::vector<Vector> rows;
  for (auto l : spurious) {
    if (l >= source_npca.components())
      throw Error(ErrorCode::kOutOfRange, "match_directions: component " + std::to_string(l) + " out of range");
    const Vector numer = centered.transpose() * alpha.col(static_cast<Eigen::Index>(l));
    const double norm = numer.norm();
    if (!(norm >= kMatchedNormFloor)) {
      basis.skipped.push_back(l);
      continue;
    }
    basis.components.push_back(l);
    rows.push_back(numer / norm);
  }
  basis.directions.resize(static_cast<Eigen::Index>(rows.size()), target_psi.psi.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) basis.directions.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  basis.ones_dot = basis.directions.rowwise().sum();
  detail::fill_gram_pinv(basis);
  return basis;
}

// Least-squares coefficients P minimizing ||(psi~ - mean~) - B^T P||_2 (minimum norm when rank-deficient).
inline Vector project_spanned(const MatchedBasis& basis, const Vector& target_psi_row) {
  if (target_psi_row.size() != basis.target_mean.size())
    throw Error(ErrorCode::kDimensionMismatch, "project_spanned: row has wrong dimension");
  if (basis.size() == 0) throw Error(ErrorCode::kInvalidArgument, "project_spanned: empty basis");
  return basis.gram_pinv * (basis.directions * (target_psi_row - basis.target_mean));
}

// f~_k - sum_l max(<1, b_l> P_l, 0) for each class with a matched basis.
inline Matrix transfer_spufix_logits(const std::map<std::uint32_t, MatchedBasis>& bases, const HeadWeights& target_head,
                                     const FeatureDump& target_features, const Matrix& base_logits) {
  check_head_matches(target_head, target_features);
  if (base_logits.rows() != target_features.n || base_logits.cols() != target_head.k)
    throw Error(ErrorCode::kDimensionMismatch, "transfer_spufix_logits: base logits shape does not match rows x K");
  Matrix out = base_logits;
  if (target_features.n == 0) return out;
  std::vector<std::size_t> all_rows(target_features.n);
  for (std::size_t i = 0; i < all_rows.size(); ++i) all_rows[i] = i;
  for (const auto& [k, basis] : bases) {
    if (basis.size() == 0) continue;
    if (k >= target_head.k) throw Error(ErrorCode::kOutOfRange, "matched basis class " + std::to_string(k) + " >= K");
    if (basis.target_mean.size() != target_head.d)
      throw Error(ErrorCode::kDimensionMismatch, "matched basis dimension does not match target head");
    const WeightedFeatures psi = compute_psi(target_features, target_head, k, all_rows);
    const Matrix centered = psi.psi.rowwise() - basis.target_mean.transpose();
    const Matrix coeffs = centered * basis.directions.transpose() * basis.gram_pinv;  // N x L
    for (Eigen::Index i = 0; i < coeffs.rows(); ++i) {
      double cut = 0.0;
      for (Eigen::Index l = 0; l < coeffs.cols(); ++l) cut += std::max(basis.ones_dot[l] * coeffs(i, l), 0.0);
      out(i, k) -= cut;
    }
  }
  return out;
}

// Matched bases for every registered class, using the source training rows of each class.
inline std::map<std::uint32_t, MatchedBasis> match_all(const std::map<std::uint32_t, ClassNpca>& source_npcas,
                                                       const HeadWeights& source_head,
                                                       const FeatureDump& source_features,
                                                       const LabelVector& labels, const HeadWeights& target_head,
                                                       const FeatureDump& target_features,
                                                       const SpuriousRegistry& reg) {
  validate_registry(reg, source_npcas);
  if (source_features.n != target_features.n || labels.n() != source_features.n)
    throw Error(ErrorCode::kDimensionMismatch, "transfer: source and target dumps must pair the same training rows");
  std::map<std::uint32_t, MatchedBasis> out;
  for (const auto& [k, comps] : reg.classes) {
    if (comps.empty()) continue;
    const auto rows = labels.rows_of(k);
    const auto src = compute_psi(source_features, source_head, k, rows);
    const auto tgt = compute_psi(target_features, target_head, k, rows);
    out.emplace(k, match_directions(source_npcas.at(k), src, tgt, comps));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Registry JSON:
// {"version":1, "model_id": s, "classes": {"<k>": [l,...]},
//  "sessions": [{"labeler": s, "verdicts": [{"class":k,"component":l,"verdict":"spurious"|"not_spurious","ts":s}]}]}

inline nlohmann::json to_json(const SpuriousRegistry& reg) {
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [k, comps] : reg.classes)
    classes[std::to_string(k)] = std::vector<std::size_t>(comps.begin(), comps.end());
  auto sessions = nlohmann::json::array();
  for (const auto& s : reg.sessions) {
    auto verdicts = nlohmann::json::array();
    for (const auto& [key, e] : s.verdicts)
      verdicts.push_back({{"class", key.first}, {"component", key.second}, {"verdict", to_string(e.verdict)},
                          {"ts", e.ts}});
    sessions.push_back({{"labeler", s.labeler_id}, {"verdicts", std::move(verdicts)}});
  }
  return {{"version", 1}, {"model_id", reg.model_id}, {"classes", std::move(classes)}, {"sessions", std::move(sessions)}};
}

inline SpuriousRegistry registry_from_json(const nlohmann::json& j) {
  try {
    if (j.value("version", 0) != 1) throw Error(ErrorCode::kVersionMismatch, "registry: unsupported version");
    SpuriousRegistry reg;
    reg.model_id = j.value("model_id", std::string());
    for (const auto& [key, arr] : j.at("classes").items()) {
      std::size_t consumed = 0;
      const unsigned long k = std::stoul(key, &consumed);
      if (consumed != key.size()) throw Error(ErrorCode::kParse, "registry: bad class key '" + key + "'");
      auto& set = reg.classes[static_cast<std::uint32_t>(k)];
      for (const auto& l : arr) set.insert(l.get<std::size_t>());
    }
    if (j.contains("sessions")) {
      for (const auto& sj : j["sessions"]) {
        LabelerSession s;
        s.labeler_id = sj.at("labeler").get<std::string>();
        for (const auto& v : sj.at("verdicts"))
          s.verdicts[{v.at("class").get<std::uint32_t>(), v.at("component").get<std::size_t>()}] = {
              parse_verdict(v.at("verdict").get<std::string>()), v.value("ts", std::string())};
        reg.sessions.push_back(std::move(s));
      }
    }
    return reg;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("registry: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw Error(ErrorCode::kParse, "registry: class keys must be integers");
  } catch (const std::out_of_range&) {
    throw Error(ErrorCode::kParse, "registry: class key out of range");
  }
}

inline SpuriousRegistry read_registry(const std::filesystem::path& path) {
  try {
    return registry_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kParse, "registry '" + path.string() + "': " + e.what());
  }
}

inline void write_registry(const std::filesystem::path& path, const SpuriousRegistry& reg) {
  write_file_atomic(path, to_json(reg).dump(2) + "\n");
}

}  // namespace spur
