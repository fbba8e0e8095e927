#pragma once

// Synthetic feature fixture: Gaussian patch features around a per-class,
// per-position mean, with anomalies drawn as a rectangle of shifted patches.
// Rectangles are snapped to the coarsest grid so every level sees the same
// region. Output is a directory of ADFR records plus manifest.jsonl, and is
// byte-identical for a given spec.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "adp/config.hpp"
#include "adp/errors.hpp"
#include "adp/feature_store.hpp"

namespace adp {

struct SyntheticLevel {
  std::uint32_t height = 0, width = 0, channels = 0;
};

struct SyntheticSpec {
  std::size_t classes = 2;
  std::vector<SyntheticLevel> levels{{8, 8, 16}, {4, 4, 32}};
  std::size_t train_images = 60;  // per class
  double train_anomaly_rate = 0.3;
  std::size_t reference_images = 8;  // per class, all normal
  std::size_t test_images = 32;      // per class
  double test_anomaly_rate = 0.5;
  double sigma = 0.1;           // patch noise std
  double position_spread = 0.3; // std of the per-position mean offsets
  double shift_sigmas = 6.0;    // anomaly shift per channel, in units of sigma
  double jitter = 0.02;         // augmented twin noise std
  std::uint64_t seed = 7;

  void validate() const {
    if (classes < 1) throw ConfigError("synthetic: classes must be >= 1");
    if (levels.empty()) throw ConfigError("synthetic: at least one level required");
    for (const auto& l : levels)
      if (l.height == 0 || l.width == 0 || l.channels == 0) throw ConfigError("synthetic: zero level dimension");
    for (double r : {train_anomaly_rate, test_anomaly_rate})
      if (!(r >= 0 && r <= 1)) throw ConfigError("synthetic: anomaly rates must be in [0, 1]");
    if (!(sigma > 0) || !(shift_sigmas >= 0) || !(jitter >= 0) || !(position_spread >= 0))
      throw ConfigError("synthetic: sigma must be > 0 and spreads >= 0");
  }
};

inline std::string format_levels(const std::vector<SyntheticLevel>& levels) {
  std::string out;
  for (std::size_t i = 0; i < levels.size(); ++i)
    out += (i ? "," : "") + std::to_string(levels[i].height) + "x" + std::to_string(levels[i].width) + "x" +
           std::to_string(levels[i].channels);
  return out;
}

inline std::vector<SyntheticLevel> parse_levels(const std::string& text) {
  std::vector<SyntheticLevel> out;
  for (const auto& item : config_detail::split_list(text)) {
    SyntheticLevel l;
    char x1 = 0, x2 = 0, extra = 0;
    std::istringstream in(item);
    if (!(in >> l.height >> x1 >> l.width >> x2 >> l.channels) || x1 != 'x' || x2 != 'x' || (in >> extra))
      throw ConfigError("synthetic: level '" + item + "' is not HxWxC");
    out.push_back(l);
  }
  return out;
}

inline void set_synthetic_value(SyntheticSpec& s, const std::string& key, const std::string& raw) {
  using config_detail::parse_double;
  using config_detail::parse_uint;
  const std::string v = config_detail::trim(raw);
  if (key == "classes") s.classes = parse_uint(key, v);
  else if (key == "levels") s.levels = parse_levels(v);
  else if (key == "train_images") s.train_images = parse_uint(key, v);
  else if (key == "train_anomaly_rate") s.train_anomaly_rate = parse_double(key, v);
  else if (key == "reference_images") s.reference_images = parse_uint(key, v);
  else if (key == "test_images") s.test_images = parse_uint(key, v);
  else if (key == "test_anomaly_rate") s.test_anomaly_rate = parse_double(key, v);
  else if (key == "sigma") s.sigma = parse_double(key, v);
  else if (key == "position_spread") s.position_spread = parse_double(key, v);
  else if (key == "shift_sigmas") s.shift_sigmas = parse_double(key, v);
  else if (key == "jitter") s.jitter = parse_double(key, v);
  else if (key == "seed") s.seed = parse_uint(key, v);
  else throw ConfigError("unknown synthetic key '" + key + "'");
}

inline SyntheticSpec parse_synthetic_spec(const std::string& text) {
  SyntheticSpec s;
  std::istringstream in(text);
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("synthetic line " + std::to_string(no) + ": expected key = value");
    set_synthetic_value(s, config_detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return s;
}

inline std::string format_synthetic_spec(const SyntheticSpec& s) {
  using config_detail::format_double;
  std::string o;
  o += "classes = " + std::to_string(s.classes) + "\n";
  o += "levels = " + format_levels(s.levels) + "\n";
  o += "train_images = " + std::to_string(s.train_images) + "\n";
  o += "train_anomaly_rate = " + format_double(s.train_anomaly_rate) + "\n";
  o += "reference_images = " + std::to_string(s.reference_images) + "\n";
  o += "test_images = " + std::to_string(s.test_images) + "\n";
  o += "test_anomaly_rate = " + format_double(s.test_anomaly_rate) + "\n";
  o += "sigma = " + format_double(s.sigma) + "\n";
  o += "position_spread = " + format_double(s.position_spread) + "\n";
  o += "shift_sigmas = " + format_double(s.shift_sigmas) + "\n";
  o += "jitter = " + format_double(s.jitter) + "\n";
  o += "seed = " + std::to_string(s.seed) + "\n";
  return o;
}

namespace synth_detail {

// Anomaly rectangle in normalized image coordinates.
struct Rect {
  double top = 0, left = 0, bottom = 0, right = 0;
};

inline double overlap_fraction(const Rect& r, std::size_t h, std::size_t w, std::size_t H, std::size_t W) {
  const double t = double(h) / H, b = double(h + 1) / H, l = double(w) / W, rr = double(w + 1) / W;
  const double dy = std::max(0.0, std::min(b, r.bottom) - std::max(t, r.top));
  const double dx = std::max(0.0, std::min(rr, r.right) - std::max(l, r.left));
  return dy * dx * H * W;
}

inline std::mt19937_64 record_rng(std::uint64_t seed, std::size_t cls, int split, std::size_t index) {
  std::seed_seq seq{seed, std::uint64_t{cls}, std::uint64_t(split), std::uint64_t{index}};
  return std::mt19937_64(seq);
}

}  // namespace synth_detail

/// Generates the fixture; returns the manifest written to out_dir/manifest.jsonl.
inline Manifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  // Coarsest grid decides where rectangles may start and end.
  std::size_t coarse = 0;
  for (std::size_t l = 1; l < spec.levels.size(); ++l)
    if (std::size_t{spec.levels[l].height} * spec.levels[l].width <
        std::size_t{spec.levels[coarse].height} * spec.levels[coarse].width)
      coarse = l;
  const std::size_t CH = spec.levels[coarse].height, CW = spec.levels[coarse].width;

  Manifest manifest;
  manifest.base_dir = out_dir;
  for (std::size_t cls = 0; cls < spec.classes; ++cls) {
    const std::string class_id = "class" + std::to_string(cls);

    // Per-class, per-position means.
    std::vector<std::vector<float>> means;
    {
      auto rng = synth_detail::record_rng(spec.seed, cls, -1, 0);
      std::normal_distribution<double> nd(0.0, 1.0);
      for (const auto& L : spec.levels) {
        std::vector<double> base(L.channels);
        for (auto& v : base) v = nd(rng);
        std::vector<float> m(std::size_t{L.height} * L.width * L.channels);
        for (std::size_t p = 0; p < std::size_t{L.height} * L.width; ++p)
          for (std::size_t c = 0; c < L.channels; ++c)
            m[p * L.channels + c] = static_cast<float>(base[c] + spec.position_spread * nd(rng));
        means.push_back(std::move(m));
      }
    }

    struct SplitPlan {
      Split split;
      std::size_t count;
      double rate;
      bool twin;
    };
    const SplitPlan plans[] = {{Split::train, spec.train_images, spec.train_anomaly_rate, true},
                               {Split::reference, spec.reference_images, 0.0, false},
                               {Split::test, spec.test_images, spec.test_anomaly_rate, false}};
    for (const auto& plan : plans) {
      const auto abnormal_count = static_cast<std::size_t>(std::llround(plan.rate * double(plan.count)));
      for (std::size_t i = 0; i < plan.count; ++i) {
        auto rng = synth_detail::record_rng(spec.seed, cls, static_cast<int>(plan.split), i);
        std::normal_distribution<double> nd(0.0, 1.0);
        MultiLevelFeatureRecord r;
        char idbuf[64];
        std::snprintf(idbuf, sizeof idbuf, "%s_%s_%03zu", class_id.c_str(), split_name(plan.split), i);
        r.image_id = idbuf;
        r.class_id = class_id;
        r.image_label = i < abnormal_count ? 1 : 0;

        synth_detail::Rect rect;
        if (r.image_label) {
          std::uniform_int_distribution<std::size_t> hs(1, std::max<std::size_t>(1, CH / 2));
          std::uniform_int_distribution<std::size_t> ws(1, std::max<std::size_t>(1, CW / 2));
          const std::size_t h = hs(rng), w = ws(rng);
          const std::size_t top = std::uniform_int_distribution<std::size_t>(0, CH - h)(rng);
          const std::size_t left = std::uniform_int_distribution<std::size_t>(0, CW - w)(rng);
          rect = {double(top) / CH, double(left) / CW, double(top + h) / CH, double(left + w) / CW};
        }

        r.anomaly_fractions.emplace();
        for (std::size_t l = 0; l < spec.levels.size(); ++l) {
          const auto& L = spec.levels[l];
          FeatureGrid g(L.height, L.width, L.channels);
          std::vector<float> frac(g.patches(), 0.0f);
          std::vector<double> shift(L.channels, 0.0);
          if (r.image_label) {
            std::bernoulli_distribution sign(0.5);
            for (auto& s : shift) s = (sign(rng) ? 1.0 : -1.0) * spec.shift_sigmas * spec.sigma;
          }
          for (std::size_t h = 0; h < L.height; ++h)
            for (std::size_t w = 0; w < L.width; ++w) {
              const std::size_t p = h * L.width + w;
              const double f = r.image_label ? synth_detail::overlap_fraction(rect, h, w, L.height, L.width) : 0.0;
              frac[p] = static_cast<float>(std::clamp(f, 0.0, 1.0));
              for (std::size_t c = 0; c < L.channels; ++c)
                g.values[p * L.channels + c] =
                    static_cast<float>(means[l][p * L.channels + c] + spec.sigma * nd(rng) + frac[p] * shift[c]);
            }
          r.levels.push_back(std::move(g));
          r.anomaly_fractions->push_back(std::move(frac));
        }
        if (plan.twin) {
          r.augmented_levels = r.levels;
          for (auto& g : *r.augmented_levels)
            for (auto& v : g.values) v = static_cast<float>(v + spec.jitter * nd(rng));
        }

        const std::string rel = (fs::path("records") / class_id / split_name(plan.split) / (r.image_id + ".adfr")).string();
        fs::create_directories((out_dir / rel).parent_path());
        write_record(r, out_dir / rel);
        manifest.entries.push_back({rel, class_id, plan.split, r.image_label});
      }
    }
  }
  save_manifest(manifest, out_dir / "manifest.jsonl");
  return manifest;
}

}  // namespace adp
