#pragma once

// Selection of components for human inspection and the mean-feature
// top-neuron baseline. Every ranking breaks ties by lower index.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spur/error.hpp"
#include "spur/npca.hpp"

namespace spur {

inline constexpr std::size_t kDefaultTopVariance = 128;
inline constexpr std::size_t kDefaultKeep = 10;
inline constexpr std::size_t kDefaultTopImages = 5;
inline constexpr std::size_t kDefaultTopNeurons = 5;

struct TopImage {
  std::size_t row = 0;
  double alpha = 0.0;
  double class_confidence = 0.0;
  std::optional<std::string> image_id;
  std::optional<std::string> asset_path;
};

struct ComponentCard {
  std::uint32_t class_index = 0;
  std::size_t component = 0;
  double eigenvalue = 0.0;
  double variance = 0.0;
  double npfv_confidence = 0.0;
  std::optional<double> npfv_objective;
  std::string npfv_asset;
  std::vector<TopImage> top_images;   // alpha descending, at most 5
  std::vector<std::string> heatmaps;  // precomputed assets only
};

struct NeuronScore {
  std::uint32_t class_index = 0;
  std::size_t neuron = 0;
  double score = 0.0;
};

inline std::vector<std::size_t> top_variance_components(const ClassNpca& npca, std::size_t budget) {
  const std::size_t m = npca.components();
  if (budget > m) budget = m;
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return npca.eigenvalues[static_cast<Eigen::Index>(a)] > npca.eigenvalues[static_cast<Eigen::Index>(b)];
  });
  idx.resize(budget);
  return idx;
}

// Highest NPFV confidence first; ties by larger eigenvalue, then lower component index.
inline std::vector<ComponentCard> rank_by_confidence(std::vector<ComponentCard> cards, std::size_t keep) {
  std::sort(cards.begin(), cards.end(), [](const ComponentCard& a, const ComponentCard& b) {
    if (a.npfv_confidence != b.npfv_confidence) return a.npfv_confidence > b.npfv_confidence;
    if (a.eigenvalue != b.eigenvalue) return a.eigenvalue > b.eigenvalue;
    return a.component < b.component;
  });
  if (cards.size() > keep) cards.resize(keep);
  return cards;
}

struct RowAlpha {
  std::size_t row = 0;  // source row index
  double alpha = 0.0;
};

inline std::vector<RowAlpha> top_activating_images(const ClassNpca& npca, const WeightedFeatures& psi, std::size_t l,
                                                   std::size_t count) {
  if (l >= npca.components()) throw Error(ErrorCode::kOutOfRange, "top_activating_images: component out of range");
  const Matrix alpha = alpha_matrix(npca, psi.psi);
  std::vector<RowAlpha> rows(psi.size());
  for (std::size_t i = 0; i < psi.size(); ++i)
    rows[i] = {psi.rows[i], alpha(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l))};
  std::stable_sort(rows.begin(), rows.end(), [](const RowAlpha& a, const RowAlpha& b) {
    if (a.alpha != b.alpha) return a.alpha > b.alpha;
    return a.row < b.row;
  });
  if (rows.size() > count) rows.resize(count);
  return rows;
}

// Class-wise mean of psi over I_k; the `count` largest coordinates, descending.
inline std::vector<NeuronScore> baseline_top_neurons(const WeightedFeatures& psi, std::size_t count) {
  if (psi.size() == 0) throw Error(ErrorCode::kInvalidArgument, "baseline_top_neurons: no rows");
  const Vector mean = psi.psi.colwise().mean().transpose();
  std::vector<NeuronScore> scores(static_cast<std::size_t>(mean.size()));
  for (Eigen::Index j = 0; j < mean.size(); ++j)
    scores[static_cast<std::size_t>(j)] = {psi.class_index, static_cast<std::size_t>(j), mean[j]};
  std::stable_sort(scores.begin(), scores.end(),
                   [](const NeuronScore& a, const NeuronScore& b) { return a.score > b.score; });
  if (scores.size() > count) scores.resize(count);
  return scores;
}

// ---------------------------------------------------------------------------
// cards_k{K}.json: array of ComponentCard objects.

inline std::string cards_filename(std::uint32_t k) { return "cards_k" + std::to_string(k) + ".json"; }

inline nlohmann::json to_json(const ComponentCard& c) {
  nlohmann::json j = {{"class", c.class_index},
                      {"component", c.component},
                      {"eigenvalue", c.eigenvalue},
                      {"variance", c.variance},
                      {"npfv_confidence", c.npfv_confidence},
                      {"npfv_asset", c.npfv_asset}};
  if (c.npfv_objective) j["npfv_objective"] = *c.npfv_objective;
  auto imgs = nlohmann::json::array();
  for (const auto& t : c.top_images) {
    nlohmann::json ij = {{"row", t.row}, {"alpha", t.alpha}, {"class_confidence", t.class_confidence}};
    if (t.image_id) ij["image_id"] = *t.image_id;
    if (t.asset_path) ij["asset_path"] = *t.asset_path;
    imgs.push_back(std::move(ij));
  }
  j["top_images"] = std::move(imgs);
  if (!c.heatmaps.empty()) j["heatmaps"] = c.heatmaps;
  return j;
}

inline ComponentCard card_from_json(const nlohmann::json& j) {
  ComponentCard c;
  c.class_index = j.at("class").get<std::uint32_t>();
  c.component = j.at("component").get<std::size_t>();
  c.eigenvalue = j.at("eigenvalue").get<double>();
  c.variance = j.value("variance", 0.0);
  c.npfv_confidence = j.at("npfv_confidence").get<double>();
  c.npfv_asset = j.value("npfv_asset", std::string());
  if (j.contains("npfv_objective")) c.npfv_objective = j["npfv_objective"].get<double>();
  for (const auto& ij : j.at("top_images")) {
    TopImage t;
    t.row = ij.at("row").get<std::size_t>();
    t.alpha = ij.at("alpha").get<double>();
    t.class_confidence = ij.at("class_confidence").get<double>();
    if (ij.contains("image_id")) t.image_id = ij["image_id"].get<std::string>();
    if (ij.contains("asset_path")) t.asset_path = ij["asset_path"].get<std::string>();
    c.top_images.push_back(std::move(t));
  }
  if (j.contains("heatmaps")) c.heatmaps = j["heatmaps"].get<std::vector<std::string>>();
  return c;
}

inline nlohmann::json cards_to_json(const std::vector<ComponentCard>& cards) {
  auto arr = nlohmann::json::array();
  for (const auto& c : cards) arr.push_back(to_json(c));
  return arr;
}

inline std::vector<ComponentCard> cards_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorCode::kParse, "cards: expected a JSON array");
  std::vector<ComponentCard> out;
  for (const auto& c : j) out.push_back(card_from_json(c));
  return out;
}

inline nlohmann::json to_json(const std::vector<NeuronScore>& scores) {
  auto arr = nlohmann::json::array();
  for (const auto& s : scores) arr.push_back({{"class", s.class_index}, {"neuron", s.neuron}, {"score", s.score}});
  return arr;
}

}  // namespace spur
