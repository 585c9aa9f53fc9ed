#pragma once

// Diversity of the maximally activating image sets of different components,
// measured on a precomputed (perceptual) distance matrix.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spur/error.hpp"
#include "spur/tensorio.hpp"

namespace spur {

struct ComponentImageSets {
  std::uint32_t class_index = 0;
  std::vector<std::vector<std::size_t>> sets;  // per component: image indices into the distance matrix
};

inline void check_sets(const ComponentImageSets& s, const DistanceMatrix& dm) {
  for (const auto& set : s.sets)
    for (auto i : set)
      if (i >= dm.n)
        throw Error(ErrorCode::kOutOfRange, "class " + std::to_string(s.class_index) + ": image index " +
                                                std::to_string(i) + " >= " + std::to_string(dm.n));
}

// min over x' in target of d(x, x').
inline double matched_distance(std::size_t x, const std::vector<std::size_t>& target, const DistanceMatrix& dm) {
  if (target.empty()) throw Error(ErrorCode::kInvalidArgument, "matched_distance: empty target set");
  if (x >= dm.n) throw Error(ErrorCode::kOutOfRange, "matched_distance: image index out of range");
  double best = std::numeric_limits<double>::infinity();
  for (auto y : target) {
    if (y >= dm.n) throw Error(ErrorCode::kOutOfRange, "matched_distance: image index out of range");
    best = std::min(best, static_cast<double>(dm.at(x, y)));
  }
  return best;
}

// Closed-form output length of all_matched_distances.
inline std::size_t matched_distance_count(const std::vector<ComponentImageSets>& classes) {
  std::size_t total = 0;
  for (const auto& c : classes) {
    const std::size_t m = c.sets.size();
    std::size_t images = 0;
    for (const auto& s : c.sets) images += s.size();
    if (m >= 2) total += images * (m - 1);
  }
  return total;
}

// For every image of every component, its matched distance to each other
// component of the same class. Ordered by class, source component, image, target component.
inline std::vector<double> all_matched_distances(const std::vector<ComponentImageSets>& classes,
                                                 const DistanceMatrix& dm) {
  std::vector<double> out;
  out.reserve(matched_distance_count(classes));
  for (const auto& c : classes) {
    check_sets(c, dm);
    for (std::size_t i = 0; i < c.sets.size(); ++i)
      for (auto x : c.sets[i])
        for (std::size_t j = 0; j < c.sets.size(); ++j)
          if (j != i) out.push_back(matched_distance(x, c.sets[j], dm));
  }
  return out;
}

// Cross-component image pairs (x in I_i, x' in I_j, i < j) with d(x, x') <= tol.
inline std::size_t identical_pairs(const ComponentImageSets& c, const DistanceMatrix& dm, double tol = 0.0) {
  check_sets(c, dm);
  std::size_t count = 0;
  for (std::size_t i = 0; i < c.sets.size(); ++i)
    for (std::size_t j = i + 1; j < c.sets.size(); ++j)
      for (auto x : c.sets[i])
        for (auto y : c.sets[j])
          if (static_cast<double>(dm.at(x, y)) <= tol) ++count;
  return count;
}

struct Histogram {
  std::vector<double> edges;         // ascending, size bins+1
  std::vector<std::size_t> counts;   // size bins; last bin is closed on the right
  std::size_t below = 0;
  std::size_t above = 0;
};

inline Histogram histogram(const std::vector<double>& values, std::vector<double> edges) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end()) ||
      std::adjacent_find(edges.begin(), edges.end()) != edges.end())
    throw Error(ErrorCode::kInvalidArgument, "histogram: need >= 2 strictly increasing bin edges");
  Histogram h;
  h.edges = std::move(edges);
  h.counts.assign(h.edges.size() - 1, 0);
  for (double v : values) {
    if (v < h.edges.front()) {
      ++h.below;
    } else if (v > h.edges.back()) {
      ++h.above;
    } else if (v == h.edges.back()) {
      ++h.counts.back();
    } else {
      const auto it = std::upper_bound(h.edges.begin(), h.edges.end(), v);
      ++h.counts[static_cast<std::size_t>(it - h.edges.begin()) - 1];
    }
  }
  return h;
}

inline std::vector<double> uniform_edges(double lo, double hi, std::size_t bins) {
  if (bins == 0 || !(hi > lo)) throw Error(ErrorCode::kInvalidArgument, "uniform_edges: need bins > 0 and hi > lo");
  std::vector<double> e(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  return e;
}

// ---------------------------------------------------------------------------
// Groups JSON: {"class": k, "components": [[idx, ...], ...]} or an array of those.

inline std::vector<ComponentImageSets> groups_from_json(const nlohmann::json& j) {
  auto one = [](const nlohmann::json& o) {
    ComponentImageSets s;
    s.class_index = o.at("class").get<std::uint32_t>();
    for (const auto& comp : o.at("components")) s.sets.push_back(comp.get<std::vector<std::size_t>>());
    return s;
  };
  try {
    std::vector<ComponentImageSets> out;
    if (j.is_array()) {
      for (const auto& o : j) out.push_back(one(o));
    } else {
      out.push_back(one(j));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("groups: ") + e.what());
  }
}

inline nlohmann::json groups_to_json(const std::vector<ComponentImageSets>& groups) {
  auto arr = nlohmann::json::array();
  for (const auto& g : groups) arr.push_back({{"class", g.class_index}, {"components", g.sets}});
  return arr;
}

inline nlohmann::json diversity_summary_json(const Histogram& h, const std::vector<ComponentImageSets>& groups,
                                             const std::vector<std::size_t>& pairs, double tol) {
  auto per_class = nlohmann::json::array();
  std::map<std::size_t, std::size_t> pair_hist;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    per_class.push_back({{"class", groups[i].class_index}, {"identical_pairs", pairs[i]}});
    ++pair_hist[pairs[i]];
  }
  auto pair_hist_json = nlohmann::json::array();
  for (const auto& [n, classes] : pair_hist) pair_hist_json.push_back({{"identical_pairs", n}, {"classes", classes}});
  return {{"bin_edges", h.edges},
          {"counts", h.counts},
          {"below_range", h.below},
          {"above_range", h.above},
          {"tolerance", tol},
          {"identical_pairs", std::move(per_class)},
          {"identical_pair_histogram", std::move(pair_hist_json)}};
}

}  // namespace spur
