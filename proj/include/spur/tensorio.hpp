#pragma once

// Binary interchange formats for feature dumps, linear heads, labels and
// distance matrices, plus the JSON image manifest and bundle validation.
//
// All binary formats are little-endian, f32 IEEE-754, row-major:
//   NPFD  "NPFD" u32 version=1, u32 n, u32 d, n*d f32
//   NPHD  "NPHD" u32 version=1, u32 k, u32 d, k*d f32 (row k = w_k), k f32 bias
//   NPLB  "NPLB" u32 version=1, u32 n, n u32
//   NPDM  "NPDM" u32 version=1, u32 n, n*n f32

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "spur/error.hpp"

namespace spur {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr std::uint32_t kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Domain types

struct FeatureDump {
  std::uint32_t n = 0;
  std::uint32_t d = 0;
  std::vector<float> data;  // n*d, row-major

  float at(std::size_t row, std::size_t col) const { return data[row * d + col]; }

  Vector row(std::size_t i) const {
    Vector v(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = data[i * d + j];
    return v;
  }

  Matrix to_matrix() const {
    Matrix m(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) m(i, j) = data[i * d + j];
    return m;
  }

  static FeatureDump from_matrix(const Matrix& m) {
    FeatureDump f;
    f.n = static_cast<std::uint32_t>(m.rows());
    f.d = static_cast<std::uint32_t>(m.cols());
    f.data.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f.data[i * f.d + j] = static_cast<float>(m(i, j));
    return f;
  }

  friend bool operator==(const FeatureDump&, const FeatureDump&) = default;
};

struct HeadWeights {
  std::uint32_t k = 0;
  std::uint32_t d = 0;
  std::vector<float> w;     // k*d, row-major
  std::vector<float> bias;  // k

  Vector row(std::size_t cls) const {
    Vector v(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = w[cls * d + j];
    return v;
  }

  Matrix weight_matrix() const {
    Matrix m(k, d);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < d; ++j) m(i, j) = w[i * d + j];
    return m;
  }

  Vector bias_vector() const {
    Vector b(k);
    for (std::size_t i = 0; i < k; ++i) b[i] = bias[i];
    return b;
  }

  friend bool operator==(const HeadWeights&, const HeadWeights&) = default;
};

struct LabelVector {
  std::vector<std::uint32_t> labels;

  std::size_t n() const { return labels.size(); }

  // Row indices with label == cls, ascending.
  std::vector<std::size_t> rows_of(std::uint32_t cls) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) idx.push_back(i);
    return idx;
  }

  friend bool operator==(const LabelVector&, const LabelVector&) = default;
};

struct ManifestEntry {
  std::uint32_t row = 0;
  std::string id;
  std::optional<std::string> path;
  std::optional<std::string> class_name;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::vector<ManifestEntry> entries;

  const ManifestEntry* find_row(std::uint32_t row) const {
    for (const auto& e : entries)
      if (e.row == row) return &e;
    return nullptr;
  }

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

struct DistanceMatrix {
  std::uint32_t n = 0;
  std::vector<float> d;  // n*n, row-major

  float at(std::size_t i, std::size_t j) const { return d[i * n + j]; }

  friend bool operator==(const DistanceMatrix&, const DistanceMatrix&) = default;
};

// ---------------------------------------------------------------------------
// Byte-level helpers

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.append(b, 4);
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline void put_magic(std::string& out, std::string_view magic) { out.append(magic); }

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string_view what) : bytes_(bytes), what_(what) {}

  void expect_magic(std::string_view magic) {
    need(magic.size(), "magic");
    if (bytes_.substr(pos_, magic.size()) != magic)
      throw Error(ErrorCode::kBadMagic, std::string(what_) + ": expected magic '" + std::string(magic) + "'",
                  static_cast<std::int64_t>(pos_));
    pos_ += magic.size();
  }

  void expect_version() {
    const std::size_t at = pos_;
    const std::uint32_t v = u32("version");
    if (v != kFormatVersion)
      throw Error(ErrorCode::kVersionMismatch,
                  std::string(what_) + ": unsupported version " + std::to_string(v), static_cast<std::int64_t>(at));
  }

  std::uint32_t u32(std::string_view field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32(std::string_view field) {
    const std::size_t at = pos_;
    const float f = std::bit_cast<float>(u32(field));
    if (!std::isfinite(f))
      throw Error(ErrorCode::kNonFinite, std::string(what_) + ": non-finite " + std::string(field),
                  static_cast<std::int64_t>(at));
    return f;
  }

  // Checks that `count` items of `size` bytes remain before reading any of them.
  void need_payload(std::uint64_t count, std::uint64_t size, std::string_view field) {
    const std::uint64_t bytes = count * size;
    if (size != 0 && bytes / size != count) need(~std::size_t{0}, field);
    need(static_cast<std::size_t>(bytes), field);
  }

  void expect_end() const {
    if (pos_ != bytes_.size())
      throw Error(ErrorCode::kTrailingBytes,
                  std::string(what_) + ": " + std::to_string(bytes_.size() - pos_) + " trailing bytes",
                  static_cast<std::int64_t>(pos_));
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, std::string_view field) const {
    if (n > bytes_.size() - pos_)
      throw Error(ErrorCode::kTruncated, std::string(what_) + ": truncated while reading " + std::string(field),
                  static_cast<std::int64_t>(pos_));
  }

  std::string_view bytes_;
  std::string_view what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// File helpers

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed for '" + path.string() + "'");
}

// Writes to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error(ErrorCode::kIo, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIo, "rename to '" + path.string() + "' failed: " + ec.message());
}

// ---------------------------------------------------------------------------
// NPFD

inline std::string encode_features(const FeatureDump& f) {
  if (static_cast<std::uint64_t>(f.n) * f.d != f.data.size())
    throw Error(ErrorCode::kDimensionMismatch, "feature dump: n*d does not match data length");
  std::string out;
  out.reserve(16 + 4 * f.data.size());
  detail::put_magic(out, "NPFD");
  detail::put_u32(out, kFormatVersion);
  detail::put_u32(out, f.n);
  detail::put_u32(out, f.d);
  for (float v : f.data) detail::put_f32(out, v);
  return out;
}

inline FeatureDump decode_features(std::string_view bytes) {
  detail::ByteReader r(bytes, "NPFD");
  r.expect_magic("NPFD");
  r.expect_version();
  FeatureDump f;
  f.n = r.u32("n");
  f.d = r.u32("d");
  const std::uint64_t count = static_cast<std::uint64_t>(f.n) * f.d;
  r.need_payload(count, 4, "feature payload");
  f.data.resize(count);
  for (auto& v : f.data) v = r.f32("feature value");
  r.expect_end();
  return f;
}

inline FeatureDump read_feature_dump(const std::filesystem::path& path) { return decode_features(read_file(path)); }
inline void write_feature_dump(const std::filesystem::path& path, const FeatureDump& f) {
  write_file(path, encode_features(f));
}

// ---------------------------------------------------------------------------
// NPHD

inline std::string encode_head(const HeadWeights& h) {
  if (static_cast<std::uint64_t>(h.k) * h.d != h.w.size() || h.bias.size() != h.k)
    throw Error(ErrorCode::kDimensionMismatch, "head: k*d or bias length does not match header");
  std::string out;
  out.reserve(16 + 4 * (h.w.size() + h.bias.size()));
  detail::put_magic(out, "NPHD");
  detail::put_u32(out, kFormatVersion);
  detail::put_u32(out, h.k);
  detail::put_u32(out, h.d);
  for (float v : h.w) detail::put_f32(out, v);
  for (float v : h.bias) detail::put_f32(out, v);
  return out;
}

inline HeadWeights decode_head(std::string_view bytes) {
  detail::ByteReader r(bytes, "NPHD");
  r.expect_magic("NPHD");
  r.expect_version();
  HeadWeights h;
  h.k = r.u32("k");
  h.d = r.u32("d");
  const std::uint64_t count = static_cast<std::uint64_t>(h.k) * h.d;
  r.need_payload(count + h.k, 4, "head payload");
  h.w.resize(count);
  for (auto& v : h.w) v = r.f32("weight");
  h.bias.resize(h.k);
  for (auto& v : h.bias) v = r.f32("bias");
  r.expect_end();
  return h;
}

inline HeadWeights read_head(const std::filesystem::path& path) { return decode_head(read_file(path)); }
inline void write_head(const std::filesystem::path& path, const HeadWeights& h) { write_file(path, encode_head(h)); }

// Throws kDimensionMismatch unless the head's feature dimension matches the dump.
inline void check_head_matches(const HeadWeights& h, const FeatureDump& f) {
  if (h.d != f.d)
    throw Error(ErrorCode::kDimensionMismatch,
                "head dimension " + std::to_string(h.d) + " does not match feature dimension " + std::to_string(f.d));
}

// ---------------------------------------------------------------------------
// NPLB

inline std::string encode_labels(const LabelVector& l) {
  std::string out;
  out.reserve(12 + 4 * l.labels.size());
  detail::put_magic(out, "NPLB");
  detail::put_u32(out, kFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(l.labels.size()));
  for (auto v : l.labels) detail::put_u32(out, v);
  return out;
}

inline LabelVector decode_labels(std::string_view bytes) {
  detail::ByteReader r(bytes, "NPLB");
  r.expect_magic("NPLB");
  r.expect_version();
  const std::uint32_t n = r.u32("n");
  r.need_payload(n, 4, "label payload");
  LabelVector l;
  l.labels.resize(n);
  for (auto& v : l.labels) v = r.u32("label");
  r.expect_end();
  return l;
}

inline LabelVector read_labels(const std::filesystem::path& path) { return decode_labels(read_file(path)); }
inline void write_labels(const std::filesystem::path& path, const LabelVector& l) {
  write_file(path, encode_labels(l));
}

// ---------------------------------------------------------------------------
// NPDM

inline void check_distance_matrix(const DistanceMatrix& m) {
  if (static_cast<std::uint64_t>(m.n) * m.n != m.d.size())
    throw Error(ErrorCode::kDimensionMismatch, "distance matrix: n*n does not match data length");
  for (std::size_t i = 0; i < m.n; ++i) {
    if (m.at(i, i) != 0.0f)
      throw Error(ErrorCode::kInvalidArgument, "distance matrix: non-zero diagonal at " + std::to_string(i));
    for (std::size_t j = 0; j < m.n; ++j) {
      if (m.at(i, j) < 0.0f)
        throw Error(ErrorCode::kInvalidArgument,
                    "distance matrix: negative entry (" + std::to_string(i) + "," + std::to_string(j) + ")");
      if (std::abs(m.at(i, j) - m.at(j, i)) > 1e-6f)
        throw Error(ErrorCode::kInvalidArgument,
                    "distance matrix: asymmetric at (" + std::to_string(i) + "," + std::to_string(j) + ")");
    }
  }
}

inline std::string encode_distance_matrix(const DistanceMatrix& m) {
  check_distance_matrix(m);
  std::string out;
  out.reserve(12 + 4 * m.d.size());
  detail::put_magic(out, "NPDM");
  detail::put_u32(out, kFormatVersion);
  detail::put_u32(out, m.n);
  for (float v : m.d) detail::put_f32(out, v);
  return out;
}

inline DistanceMatrix decode_distance_matrix(std::string_view bytes) {
  detail::ByteReader r(bytes, "NPDM");
  r.expect_magic("NPDM");
  r.expect_version();
  DistanceMatrix m;
  m.n = r.u32("n");
  const std::uint64_t count = static_cast<std::uint64_t>(m.n) * m.n;
  r.need_payload(count, 4, "distance payload");
  m.d.resize(count);
  for (auto& v : m.d) v = r.f32("distance");
  r.expect_end();
  check_distance_matrix(m);
  return m;
}

inline DistanceMatrix read_distance_matrix(const std::filesystem::path& path) {
  return decode_distance_matrix(read_file(path));
}
inline void write_distance_matrix(const std::filesystem::path& path, const DistanceMatrix& m) {
  write_file(path, encode_distance_matrix(m));
}

// ---------------------------------------------------------------------------
// Manifest (JSON array of {"row", "id", "path"?, "class_name"?})

inline nlohmann::json manifest_to_json(const Manifest& m) {
  auto arr = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json j = {{"row", e.row}, {"id", e.id}};
    if (e.path) j["path"] = *e.path;
    if (e.class_name) j["class_name"] = *e.class_name;
    arr.push_back(std::move(j));
  }
  return arr;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorCode::kParse, "manifest: expected a JSON array");
  Manifest m;
  std::set<std::uint32_t> seen;
  for (const auto& o : j) {
    if (!o.is_object() || !o.contains("row") || !o.contains("id") || !o["row"].is_number_unsigned() ||
        !o["id"].is_string())
      throw Error(ErrorCode::kParse, "manifest: each entry needs integer 'row' and string 'id'");
    ManifestEntry e;
    e.row = o["row"].get<std::uint32_t>();
    e.id = o["id"].get<std::string>();
    if (o.contains("path") && !o["path"].is_null()) e.path = o["path"].get<std::string>();
    if (o.contains("class_name") && !o["class_name"].is_null()) e.class_name = o["class_name"].get<std::string>();
    if (!seen.insert(e.row).second)
      throw Error(ErrorCode::kParse, "manifest: duplicate row " + std::to_string(e.row));
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  try {
    return manifest_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, "manifest '" + path.string() + "': " + e.what());
  }
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  write_file(path, manifest_to_json(m).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Bundle validation

struct Finding {
  enum class Severity { kWarning, kError };
  Severity severity = Severity::kError;
  std::string kind;
  std::string message;
};

struct BundleReport {
  std::vector<std::size_t> class_counts;  // |I_k| per class of the head
  bool dimensions_agree = true;
  std::vector<std::uint32_t> degenerate_classes;  // fewer than 2 samples
  std::vector<Finding> findings;

  bool has_errors() const {
    for (const auto& f : findings)
      if (f.severity == Finding::Severity::kError) return true;
    return false;
  }
};

inline BundleReport validate_bundle(const FeatureDump& features, const LabelVector& labels, const HeadWeights& head,
                                    const Manifest* manifest = nullptr) {
  BundleReport rep;
  auto add = [&](Finding::Severity s, std::string kind, std::string msg) {
    rep.findings.push_back({s, std::move(kind), std::move(msg)});
  };

  if (features.d != head.d) {
    rep.dimensions_agree = false;
    add(Finding::Severity::kError, "dimension_mismatch",
        "feature dimension " + std::to_string(features.d) + " != head dimension " + std::to_string(head.d));
  }
  if (labels.n() != features.n) {
    rep.dimensions_agree = false;
    add(Finding::Severity::kError, "row_count_mismatch",
        "labels have " + std::to_string(labels.n()) + " rows, features " + std::to_string(features.n));
  }

  rep.class_counts.assign(head.k, 0);
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const auto y = labels.labels[i];
    if (y >= head.k) {
      add(Finding::Severity::kError, "label_out_of_range",
          "label out of range: row " + std::to_string(i) + " has label " + std::to_string(y) + " >= K=" +
              std::to_string(head.k));
    } else {
      ++rep.class_counts[y];
    }
  }
  for (std::uint32_t c = 0; c < head.k; ++c) {
    if (rep.class_counts[c] >= 2) continue;
    rep.degenerate_classes.push_back(c);
    add(Finding::Severity::kWarning, "degenerate_class",
        rep.class_counts[c] == 0 ? "degenerate class " + std::to_string(c) + ": no samples"
                                 : "degenerate class " + std::to_string(c) + ": covariance is zero (1 sample)");
  }

  if (manifest) {
    for (const auto& e : manifest->entries)
      if (e.row >= features.n)
        add(Finding::Severity::kError, "manifest_row_out_of_range",
            "manifest row " + std::to_string(e.row) + " >= n=" + std::to_string(features.n));
  }
  return rep;
}

inline nlohmann::json to_json(const BundleReport& r) {
  nlohmann::json j;
  j["class_counts"] = r.class_counts;
  j["dimensions_agree"] = r.dimensions_agree;
  j["degenerate_classes"] = r.degenerate_classes;
  auto arr = nlohmann::json::array();
  for (const auto& f : r.findings)
    arr.push_back({{"severity", f.severity == Finding::Severity::kError ? "error" : "warning"},
                   {"kind", f.kind},
                   {"message", f.message}});
  j["findings"] = std::move(arr);
  return j;
}

}  // namespace spur
