#pragma once

// Spurious-score evaluation: softmax link, Mann-Whitney ROC-AUC and the
// class-wise AUC report with its mean (mAUC).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spur/error.hpp"
#include "spur/tensorio.hpp"

namespace spur {

// Max-shifted softmax.
inline Vector softmax(const Vector& logits) {
  if (logits.size() == 0) return logits;
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp();
  return e / e.sum();
}

inline double softmax_prob(const Vector& logits, std::size_t k) { return softmax(logits)[static_cast<Eigen::Index>(k)]; }

// Pair counts behind an AUC: twice the number of (pos > neg) pairs plus ties.
struct AucCounts {
  std::int64_t doubled_wins = 0;
  std::int64_t n_pos = 0;
  std::int64_t n_neg = 0;

  double auc() const { return static_cast<double>(doubled_wins) / (2.0 * static_cast<double>(n_pos * n_neg)); }
};

// Sort-and-rank computation in O(n log n); ties share their average rank.
inline AucCounts roc_auc_counts(const std::vector<double>& positives, const std::vector<double>& negatives) {
  if (positives.empty() || negatives.empty())
    throw Error(ErrorCode::kInvalidArgument, "roc_auc: both score lists must be non-empty");
  struct Item {
    double score;
    bool pos;
  };
  std::vector<Item> all;
  all.reserve(positives.size() + negatives.size());
  for (double s : positives) all.push_back({s, true});
  for (double s : negatives) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  // Sum of doubled (1-based) ranks of the positives; a tie block [i, j) has doubled rank i + j + 1.
  std::int64_t doubled_rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::int64_t pos_in_block = 0;
    while (j < all.size() && all[j].score == all[i].score) {
      pos_in_block += all[j].pos ? 1 : 0;
      ++j;
    }
    doubled_rank_sum += pos_in_block * static_cast<std::int64_t>(i + j + 1);
    i = j;
  }
  AucCounts c;
  c.n_pos = static_cast<std::int64_t>(positives.size());
  c.n_neg = static_cast<std::int64_t>(negatives.size());
  c.doubled_wins = doubled_rank_sum - c.n_pos * (c.n_pos + 1);
  return c;
}

// P(pos > neg) + 0.5 P(pos == neg). Here positives are genuine class images and
// negatives spurious-feature images, so 1.0 means no reliance on the feature.
inline double roc_auc(const std::vector<double>& positives, const std::vector<double>& negatives) {
  return roc_auc_counts(positives, negatives).auc();
}

// ---------------------------------------------------------------------------
// Reports

enum class SampleGroup { kSpurious, kValidation };

struct ScoredSample {
  std::string image_id;
  double score = 0.0;  // predicted probability of the class
  SampleGroup group = SampleGroup::kValidation;
};

struct ClassSamples {
  std::uint32_t class_index = 0;
  std::string class_name;
  std::vector<ScoredSample> samples;
};

struct ClassAuc {
  std::uint32_t class_index = 0;
  std::string class_name;
  std::size_t n_spurious = 0;
  std::size_t n_val = 0;
  double auc = 0.0;
};

struct EvalReport {
  std::string model_id;
  std::string variant;  // "original" | "spufix"
  std::vector<ClassAuc> per_class;
  double mauc = 0.0;
  std::optional<double> top1_accuracy;
  std::vector<std::string> findings;
};

// Orders classes by index and sets mauc to the arithmetic mean.
inline EvalReport aggregate_report(std::vector<ClassAuc> per_class, std::string model_id, std::string variant) {
  EvalReport r;
  r.model_id = std::move(model_id);
  r.variant = std::move(variant);
  std::sort(per_class.begin(), per_class.end(),
            [](const ClassAuc& a, const ClassAuc& b) { return a.class_index < b.class_index; });
  r.per_class = std::move(per_class);
  double sum = 0.0;
  for (const auto& c : r.per_class) sum += c.auc;
  r.mauc = r.per_class.empty() ? 0.0 : sum / static_cast<double>(r.per_class.size());
  return r;
}

// Per-class AUC of validation vs spurious scores. Classes lacking a group are
// excluded and reported as findings.
inline EvalReport spurious_report(const std::vector<ClassSamples>& classes, std::string model_id, std::string variant) {
  std::vector<ClassAuc> rows;
  std::vector<std::string> findings;
  for (const auto& c : classes) {
    std::vector<double> pos, neg;
    for (const auto& s : c.samples) {
      if (!(s.score >= 0.0 && s.score <= 1.0))
        throw Error(ErrorCode::kInvalidArgument, "score outside [0,1] for image '" + s.image_id + "'");
      (s.group == SampleGroup::kValidation ? pos : neg).push_back(s.score);
    }
    if (pos.empty() || neg.empty()) {
      findings.push_back("class " + std::to_string(c.class_index) + " excluded: missing " +
                         (pos.empty() ? "validation" : "spurious") + " samples");
      continue;
    }
    rows.push_back({c.class_index, c.class_name, neg.size(), pos.size(), roc_auc(pos, neg)});
  }
  auto r = aggregate_report(std::move(rows), std::move(model_id), std::move(variant));
  r.findings = std::move(findings);
  return r;
}

// Top-1 accuracy of logits (rows) against labels.
inline double top1_accuracy(const FeatureDump& logits, const LabelVector& labels) {
  if (logits.n != labels.n())
    throw Error(ErrorCode::kDimensionMismatch, "top1_accuracy: logits and labels differ in row count");
  if (logits.n == 0) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < logits.n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.d; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    hit += best == labels.labels[i] ? 1 : 0;
  }
  return static_cast<double>(hit) / logits.n;
}

// Builds per-class scored samples from logit dumps: validation rows of class k
// and spurious rows tagged with class k, both scored by softmax probability of k.
inline std::vector<ClassSamples> scored_samples_from_logits(const FeatureDump& val_logits, const LabelVector& val_labels,
                                                            const FeatureDump& spur_logits,
                                                            const LabelVector& spur_labels,
                                                            const std::map<std::uint32_t, std::string>& names = {}) {
  if (val_logits.n != val_labels.n() || spur_logits.n != spur_labels.n())
    throw Error(ErrorCode::kDimensionMismatch, "logit and label row counts differ");
  if (val_logits.d != spur_logits.d)
    throw Error(ErrorCode::kDimensionMismatch, "validation and spurious logits have different class counts");
  std::map<std::uint32_t, ClassSamples> by_class;
  auto add = [&](const FeatureDump& logits, const LabelVector& labels, SampleGroup g, const char* tag) {
    for (std::size_t i = 0; i < logits.n; ++i) {
      const auto k = labels.labels[i];
      if (k >= logits.d) throw Error(ErrorCode::kOutOfRange, std::string(tag) + " label out of range");
      auto& cs = by_class[k];
      cs.class_index = k;
      if (auto it = names.find(k); it != names.end()) cs.class_name = it->second;
      cs.samples.push_back({std::string(tag) + "_" + std::to_string(i), softmax_prob(logits.row(i), k), g});
    }
  };
  add(spur_logits, spur_labels, SampleGroup::kSpurious, "spurious");
  // Validation rows only matter for classes that carry spurious images.
  for (std::size_t i = 0; i < val_logits.n; ++i) {
    const auto k = val_labels.labels[i];
    auto it = by_class.find(k);
    if (it == by_class.end()) continue;
    it->second.samples.push_back({"val_" + std::to_string(i), softmax_prob(val_logits.row(i), k),
                                  SampleGroup::kValidation});
  }
  std::vector<ClassSamples> out;
  for (auto& [k, cs] : by_class) out.push_back(std::move(cs));
  return out;
}

// ---------------------------------------------------------------------------
// Output formats

inline std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string percent1(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * v);
  return buf;
}

inline std::string report_csv(const EvalReport& r) {
  std::string out = "class_index,class_name,n_spurious,n_val,auc\n";
  char buf[64];
  for (const auto& c : r.per_class) {
    std::snprintf(buf, sizeof buf, "%.6f", c.auc);
    std::string name = c.class_name;
    if (name.find_first_of(",\"\n") != std::string::npos) {
      std::string q = "\"";
      for (char ch : name) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      name = q + "\"";
    }
    out += std::to_string(c.class_index) + "," + name + "," + std::to_string(c.n_spurious) + "," +
           std::to_string(c.n_val) + "," + buf + "\n";
  }
  return out;
}

inline nlohmann::json report_summary_json(const EvalReport& r) {
  nlohmann::json j = {{"model_id", r.model_id}, {"variant", r.variant}, {"mauc", r.mauc},
                      {"n_classes", r.per_class.size()}};
  if (r.top1_accuracy) j["top1_accuracy"] = *r.top1_accuracy;
  if (!r.findings.empty()) j["findings"] = r.findings;
  return j;
}

// Per-class bar-chart data: [{class_name, auc}].
inline nlohmann::json report_bars_json(const EvalReport& r) {
  auto arr = nlohmann::json::array();
  for (const auto& c : r.per_class)
    arr.push_back({{"class_name", c.class_name.empty() ? std::to_string(c.class_index) : c.class_name},
                   {"auc", c.auc}});
  return arr;
}

// One results-table row: "<model> | <acc> | <mAUC> | <acc SpuFix> | <mAUC SpuFix>".
inline std::string format_table_row(const std::string& model, double acc_original, const EvalReport& original,
                                    double acc_fixed, const EvalReport& fixed) {
  return model + " | " + percent1(acc_original) + " | " + fixed3(original.mauc) + " | " + percent1(acc_fixed) + " | " +
         fixed3(fixed.mauc);
}

}  // namespace spur
