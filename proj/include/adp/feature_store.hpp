#pragma once

// ADFR feature records and dataset manifests.
//
// ADFR layout (all integers little-endian):
//   "ADFR"                          magic, 4 bytes
//   u32 version                     = 1
//   u32 flags                       bit0 augmented twin present,
//                                   bit1 anomaly fraction maps present
//   u32 len, bytes                  image_id (UTF-8)
//   u32 len, bytes                  class_id (UTF-8)
//   u8  image_label                 0 normal, 1 abnormal
//   u32 L                           level count
//   L x { u32 H, u32 W, u32 C, H*W*C f32 }           original grids (h, w, c)
//   if bit0: L x { H*W*C f32 }                       augmented grids, same dims
//   if bit1: L x { H*W f32 }                         per-patch anomaly fractions
//
// Anything after the last declared block is an error.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "adp/binary_io.hpp"
#include "adp/errors.hpp"

namespace adp {

inline constexpr std::uint32_t kAdfrVersion = 1;
inline constexpr std::uint32_t kFlagAugmented = 1u << 0;
inline constexpr std::uint32_t kFlagFractions = 1u << 1;

/// One level of patch features: H x W patches of C channels, row-major (h, w, c).
struct FeatureGrid {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::vector<float> values;

  FeatureGrid() = default;
  FeatureGrid(std::uint32_t h, std::uint32_t w, std::uint32_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), values(std::size_t{h} * w * c, fill) {}

  std::size_t patches() const noexcept { return std::size_t{height} * width; }

  std::span<float> patch(std::size_t h, std::size_t w) {
    return {values.data() + (h * width + w) * channels, channels};
  }
  std::span<const float> patch(std::size_t h, std::size_t w) const {
    return {values.data() + (h * width + w) * channels, channels};
  }
  std::span<const float> patch(std::size_t index) const {
    return {values.data() + index * channels, channels};
  }

  bool same_dims(const FeatureGrid& o) const noexcept {
    return height == o.height && width == o.width && channels == o.channels;
  }

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;
};

struct MultiLevelFeatureRecord {
  std::string image_id;
  std::string class_id;
  std::uint8_t image_label = 0;
  std::vector<FeatureGrid> levels;
  std::optional<std::vector<FeatureGrid>> augmented_levels;
  // Per level, H_l * W_l values in [0, 1].
  std::optional<std::vector<std::vector<float>>> anomaly_fractions;

  friend bool operator==(const MultiLevelFeatureRecord&, const MultiLevelFeatureRecord&) = default;
};

/// Throws DataError describing the first violated record invariant.
inline void validate(const MultiLevelFeatureRecord& r) {
  const std::string who = "record '" + r.image_id + "': ";
  if (r.image_label > 1) throw DataError(who + "image_label must be 0 or 1");
  if (r.levels.empty()) throw DataError(who + "no feature levels");
  for (std::size_t l = 0; l < r.levels.size(); ++l) {
    const auto& g = r.levels[l];
    if (g.height == 0 || g.width == 0 || g.channels == 0)
      throw DataError(who + "level " + std::to_string(l) + " has a zero dimension");
    if (g.values.size() != std::size_t{g.height} * g.width * g.channels)
      throw DataError(who + "level " + std::to_string(l) + " value count does not match dims");
    for (float v : g.values)
      if (!std::isfinite(v)) throw DataError(who + "non-finite value in level " + std::to_string(l));
  }
  if (r.augmented_levels) {
    if (r.augmented_levels->size() != r.levels.size())
      throw DataError(who + "augmented level count differs from original");
    for (std::size_t l = 0; l < r.levels.size(); ++l) {
      const auto& a = (*r.augmented_levels)[l];
      if (!a.same_dims(r.levels[l]) || a.values.size() != r.levels[l].values.size())
        throw DataError(who + "augmented level " + std::to_string(l) + " dims differ from original");
      for (float v : a.values)
        if (!std::isfinite(v))
          throw DataError(who + "non-finite value in augmented level " + std::to_string(l));
    }
  }
  if (r.anomaly_fractions) {
    if (r.anomaly_fractions->size() != r.levels.size())
      throw DataError(who + "fraction map count differs from level count");
    for (std::size_t l = 0; l < r.levels.size(); ++l) {
      const auto& f = (*r.anomaly_fractions)[l];
      if (f.size() != r.levels[l].patches())
        throw DataError(who + "fraction map " + std::to_string(l) + " has wrong size");
      for (float v : f) {
        if (!(v >= 0.0f && v <= 1.0f))
          throw DataError(who + "fraction outside [0,1] in level " + std::to_string(l));
        if (r.image_label == 0 && v != 0.0f)
          throw DataError(who + "normal image with non-zero anomaly fraction");
      }
    }
  }
}

inline std::vector<std::uint8_t> encode_record(const MultiLevelFeatureRecord& r) {
  validate(r);
  io::ByteWriter w;
  w.raw("ADFR", 4);
  w.u32(kAdfrVersion);
  std::uint32_t flags = 0;
  if (r.augmented_levels) flags |= kFlagAugmented;
  if (r.anomaly_fractions) flags |= kFlagFractions;
  w.u32(flags);
  w.str(r.image_id);
  w.str(r.class_id);
  w.u8(r.image_label);
  w.u32(static_cast<std::uint32_t>(r.levels.size()));
  for (const auto& g : r.levels) {
    w.u32(g.height);
    w.u32(g.width);
    w.u32(g.channels);
    for (float v : g.values) w.f32(v);
  }
  if (r.augmented_levels)
    for (const auto& g : *r.augmented_levels)
      for (float v : g.values) w.f32(v);
  if (r.anomaly_fractions)
    for (const auto& f : *r.anomaly_fractions)
      for (float v : f) w.f32(v);
  return w.take();
}

inline MultiLevelFeatureRecord decode_record(std::vector<std::uint8_t> bytes) {
  io::ByteReader in(std::move(bytes));
  in.need(4, "magic");
  char magic[4];
  for (char& c : magic) c = static_cast<char>(in.u8("magic"));
  if (std::string(magic, 4) != "ADFR") throw FormatError("bad magic");
  const std::uint32_t version = in.u32("version");
  if (version != kAdfrVersion) throw FormatError("unsupported version " + std::to_string(version));
  const std::uint32_t flags = in.u32("flags");
  if (flags & ~(kFlagAugmented | kFlagFractions))
    throw FormatError("unknown flag bits " + std::to_string(flags));

  MultiLevelFeatureRecord r;
  r.image_id = in.str("image_id");
  r.class_id = in.str("class_id");
  if (!io::valid_utf8(r.image_id)) throw FormatError("image_id is not valid UTF-8");
  if (!io::valid_utf8(r.class_id)) throw FormatError("class_id is not valid UTF-8");
  r.image_label = in.u8("image_label");
  if (r.image_label > 1) throw FormatError("invalid image_label " + std::to_string(r.image_label));
  const std::uint32_t levels = in.u32("level count");
  if (levels == 0) throw FormatError("record has zero levels");
  // Each level header alone takes 12 bytes, which bounds a corrupt count.
  if (levels > in.remaining() / 12) throw FormatError("truncated file: level count " +
                                                       std::to_string(levels) + " exceeds file size");

  auto read_values = [&](std::vector<float>& out, std::uint64_t count, const std::string& what) {
    if (count > in.remaining() / 4) throw FormatError("truncated at " + what);
    out.resize(count);
    in.f32_block(out.data(), count, what);
    for (float v : out)
      if (!std::isfinite(v)) throw FormatError("non-finite value in " + what);
  };

  r.levels.resize(levels);
  for (std::uint32_t l = 0; l < levels; ++l) {
    const std::string lvl = "level " + std::to_string(l);
    FeatureGrid& g = r.levels[l];
    g.height = in.u32(lvl + " height");
    g.width = in.u32(lvl + " width");
    g.channels = in.u32(lvl + " channels");
    if (g.height == 0 || g.width == 0 || g.channels == 0)
      throw FormatError(lvl + " has a zero dimension");
    const std::uint64_t count = std::uint64_t{g.height} * g.width * g.channels;
    read_values(g.values, count, lvl);
  }
  if (flags & kFlagAugmented) {
    r.augmented_levels.emplace(levels);
    for (std::uint32_t l = 0; l < levels; ++l) {
      FeatureGrid& a = (*r.augmented_levels)[l];
      a.height = r.levels[l].height;
      a.width = r.levels[l].width;
      a.channels = r.levels[l].channels;
      read_values(a.values, r.levels[l].values.size(), "augmented level " + std::to_string(l));
    }
  }
  if (flags & kFlagFractions) {
    r.anomaly_fractions.emplace(levels);
    for (std::uint32_t l = 0; l < levels; ++l)
      read_values((*r.anomaly_fractions)[l], r.levels[l].patches(),
                  "fraction map " + std::to_string(l));
  }
  if (in.remaining() != 0)
    throw FormatError("trailing bytes after declared content (" + std::to_string(in.remaining()) +
                      " bytes); flags do not describe the payload");
  try {
    validate(r);
  } catch (const DataError& e) {
    throw FormatError(e.what());
  }
  return r;
}

inline void write_record(const MultiLevelFeatureRecord& record, const std::filesystem::path& path) {
  io::write_file(path, encode_record(record));
}

inline MultiLevelFeatureRecord read_record(const std::filesystem::path& path) {
  try {
    return decode_record(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Manifest: JSON lines, one object per record:
//   {"record_path": "a/b.adfr", "class_id": "bottle", "split": "train", "image_label": 0}
// Relative record paths resolve against the manifest's directory. Blank
// lines are ignored.
// ---------------------------------------------------------------------------

enum class Split { train, reference, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::reference: return "reference";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "reference") return Split::reference;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (allowed: train, reference, test)");
}

struct ManifestEntry {
  std::string record_path;
  std::string class_id;
  Split split = Split::train;
  int image_label = 0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& e) const {
    std::filesystem::path p(e.record_path);
    return p.is_absolute() ? p : base_dir / p;
  }

  std::vector<std::size_t> select(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].split == split) out.push_back(i);
    return out;
  }

  /// Reads the record behind an entry and checks it agrees with the entry.
  MultiLevelFeatureRecord load(std::size_t index) const {
    const ManifestEntry& e = entries.at(index);
    MultiLevelFeatureRecord r = read_record(resolve(e));
    if (r.image_label != e.image_label)
      throw DataError("manifest label " + std::to_string(e.image_label) + " disagrees with record " +
                      e.record_path);
    if (r.class_id != e.class_id)
      throw DataError("manifest class '" + e.class_id + "' disagrees with record " + e.record_path);
    return r;
  }
};

inline Manifest parse_manifest(const std::string& text, std::filesystem::path base_dir = {}) {
  Manifest m;
  m.base_dir = std::move(base_dir);
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "manifest line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where + "malformed JSON");
    }
    ManifestEntry e;
    try {
      e.record_path = j.at("record_path").get<std::string>();
      e.class_id = j.at("class_id").get<std::string>();
      e.split = parse_split(j.at("split").get<std::string>());
      e.image_label = j.at("image_label").get<int>();
    } catch (const ConfigError& err) {
      throw ConfigError(where + err.what());
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where + "missing or mistyped field (need record_path, class_id, split, image_label)");
    }
    if (e.image_label != 0 && e.image_label != 1) throw ConfigError(where + "image_label must be 0 or 1");
    if (!seen.insert(e.record_path).second)
      throw ConfigError(where + "duplicate record_path '" + e.record_path + "'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_manifest(text, path.parent_path());
}

inline std::string format_manifest(const Manifest& m) {
  std::string out;
  for (const auto& e : m.entries) {
    nlohmann::ordered_json j;
    j["record_path"] = e.record_path;
    j["class_id"] = e.class_id;
    j["split"] = split_name(e.split);
    j["image_label"] = e.image_label;
    out += j.dump() + "\n";
  }
  return out;
}

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << format_manifest(m);
}

}  // namespace adp
