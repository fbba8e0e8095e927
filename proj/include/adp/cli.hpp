#pragma once

// The `adp` command line. run() never throws: library errors become a single
// "error: <kind>: <message>" line on the error stream and exit code 1, usage
// problems exit with 2.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "adp/checkpoint.hpp"
#include "adp/config.hpp"
#include "adp/feature_store.hpp"
#include "adp/metrics.hpp"
#include "adp/pipeline.hpp"
#include "adp/pretrainer.hpp"
#include "adp/refmatch.hpp"
#include "adp/residual.hpp"
#include "adp/synthetic.hpp"

namespace adp::cli {

namespace fs = std::filesystem;

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"pretrain", "project", "score", "eval", "match-refs", "synth"};
  return names;
}

inline std::string usage() {
  return "usage: adp <subcommand> [options]\n"
         "subcommands:\n"
         "  pretrain    train projectors on a feature manifest\n"
         "  project     write projected residual features for a manifest\n"
         "  score       score the test split (featurenorm, padim, patchcore)\n"
         "  eval        image AUROC and PRO from a score file\n"
         "  match-refs  rank a reference pool by alignment with a query\n"
         "  synth       generate a synthetic feature fixture\n"
         "run `adp <subcommand> --help` for options\n";
}

inline std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

namespace detail {

struct PretrainArgs {
  std::string manifest, config, out, resume, log;
  std::size_t log_every = 10;
  std::map<std::string, std::string> overrides;  // key -> raw flag value
};

struct ProjectArgs {
  std::string ckpt, manifest, refs, out_dir;
};

struct ScoreArgs {
  std::string method = "featurenorm", ckpt, refs, test, out, aggregate = "max";
  double shrinkage = 0.01, coreset_fraction = 0.1;
  std::size_t topk = 10;
};

struct EvalArgs {
  std::string scores, masks, out;
  double fpr_limit = 0.3, mask_threshold = 0.5;
  std::size_t thresholds = 200;
};

struct MatchArgs {
  std::string pool, query, cache, out, write_manifest, class_id;
  std::size_t k = 8, level = 0, grid = 5, clusters = 5;
  std::uint64_t seed = 42;
};

struct SynthArgs {
  std::string spec, out_dir;
  std::uint64_t seed = SyntheticSpec{}.seed;
};

inline void print_resolved(std::ostream& out, const CLI::App& sub) {
  out << "# resolved " << sub.get_name() << " options\n" << sub.config_to_str(true, false);
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

inline std::string loss_line(const StepLog& s) {
  std::ostringstream o;
  o << "step " << s.step + 1 << " epoch " << s.epoch << " loss " << config_detail::format_double(s.total);
  for (std::size_t l = 0; l < s.levels.size(); ++l)
    o << " | L" << l << " angle " << config_detail::format_double(s.levels[l].angle) << " norm "
      << config_detail::format_double(s.levels[l].norm);
  return o.str();
}

inline int run_pretrain(const PretrainArgs& a, std::ostream& out) {
  TrainConfig cfg;
  std::unique_ptr<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = std::make_unique<Checkpoint>(load_checkpoint(a.resume));
    cfg = resume->config;
    cfg.max_steps = 0;  // the cap that stopped the earlier run does not carry over
  }
  if (!a.config.empty()) cfg = load_config(a.config);
  for (const auto& [key, value] : a.overrides) {
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("--" + key + ": " + e.what());
    }
  }
  cfg.validate();
  out << "# resolved pretrain config\n" << format_config(cfg);
  out << "# manifest = " << a.manifest << "\n# out = " << a.out << "\n";
  if (resume) out << "# resume = " << a.resume << " (step " << resume->step << ")\n";

  const Manifest manifest = load_manifest(a.manifest);
  std::ofstream log;
  if (!a.log.empty()) {
    if (fs::path(a.log).has_parent_path()) fs::create_directories(fs::path(a.log).parent_path());
    log.open(a.log, std::ios::trunc);
    if (!log) throw IoError("cannot write " + a.log);
  }
  PretrainOptions opt;
  opt.checkpoint_path = a.out;
  opt.resume = resume.get();
  opt.on_step = [&](const StepLog& s) {
    if (log) {
      nlohmann::json j{{"step", s.step + 1}, {"epoch", s.epoch}, {"total", s.total}};
      for (const auto& l : s.levels)
        j["levels"].push_back({{"total", l.total}, {"angle", l.angle}, {"norm", l.norm}, {"anchors", l.anchors}});
      log << j.dump() << "\n";
    }
    if (a.log_every > 0 && (s.step + 1) % a.log_every == 0) out << loss_line(s) << "\n";
  };
  const auto result = pretrain(manifest, cfg, opt);
  if (!result.history.empty()) out << "final " << loss_line(result.history.back()) << "\n";
  out << "wrote checkpoint " << a.out << " at step " << result.checkpoint.step << "\n";
  return 0;
}

inline int run_project(const ProjectArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Manifest m = load_manifest(a.manifest);
  const auto sets = load_reference_sets(load_manifest(a.refs));
  const fs::path dir(a.out_dir);
  Manifest written;
  written.base_dir = dir;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto r = m.load(i);
    // A reference never serves as its own neighbour.
    std::vector<const MultiLevelFeatureRecord*> refs;
    for (const auto& ref : references_for(sets, r.class_id))
      if (ref.image_id != r.image_id) refs.push_back(&ref);
    if (refs.empty()) throw DataError("no references left for '" + r.image_id + "'");
    const auto p = project_record(r, build_bank(refs), &ck);
    MultiLevelFeatureRecord o;
    o.image_id = r.image_id;
    o.class_id = r.class_id;
    o.image_label = r.image_label;
    o.levels = p.levels;
    if (r.anomaly_fractions) {
      o.anomaly_fractions.emplace();
      for (std::size_t l : p.source_levels) o.anomaly_fractions->push_back((*r.anomaly_fractions)[l]);
    }
    ManifestEntry e = m.entries[i];
    e.record_path = (fs::path("records") / r.class_id / (r.image_id + ".adfr")).generic_string();
    write_record(o, dir / e.record_path);
    written.entries.push_back(std::move(e));
  }
  save_manifest(written, dir / "manifest.jsonl");
  out << "projected " << written.entries.size() << " records into " << (dir / "manifest.jsonl").string() << "\n";
  return 0;
}

inline int run_score(const ScoreArgs& a, std::ostream& out) {
  ScoreOptions opt;
  opt.method = parse_method(a.method);
  opt.shrinkage = a.shrinkage;
  opt.coreset_fraction = a.coreset_fraction;
  opt.aggregate = parse_aggregate(a.aggregate);
  opt.topk = a.topk;
  if (!(opt.shrinkage >= 0)) throw ConfigError("--shrinkage must be >= 0");
  if (opt.topk < 1) throw ConfigError("--topk must be >= 1");
  std::unique_ptr<Checkpoint> ck;
  if (!a.ckpt.empty()) ck = std::make_unique<Checkpoint>(load_checkpoint(a.ckpt));
  const auto scores = score_manifest(load_manifest(a.test), load_manifest(a.refs), ck.get(), opt);
  write_scores(scores, a.out);
  out << "scored " << scores.size() << " images with " << method_name(opt.method)
      << (ck ? "" : " on raw residuals") << " -> " << a.out << "\n";
  return 0;
}

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  if (a.thresholds < 2) throw ConfigError("--thresholds must be >= 2");
  const auto items = load_eval_items(a.scores, load_manifest(a.masks), a.mask_threshold);
  const auto report = evaluate(items, a.fpr_limit, a.thresholds);
  if (!a.out.empty()) write_text(a.out, report_json(report).dump(2) + "\n");
  for (const auto& c : report.per_class)
    out << "class " << c.class_id << " image_auroc " << json_number(c.image_auroc).dump() << " pro "
        << json_number(c.pro).dump() << "\n";
  out << headline(report) << "\n";
  return 0;
}

inline int run_match(const MatchArgs& a, std::ostream& out) {
  if (a.k < 1) throw ConfigError("--k must be >= 1");
  const Manifest pool_manifest = load_manifest(a.pool);
  const auto query = read_record(a.query);
  const std::string cls = a.class_id.empty() ? query.class_id : a.class_id;
  if (a.level >= query.levels.size())
    throw ConfigError("--level " + std::to_string(a.level) + " out of range for the query");

  // Pool: normal records of the class, query excluded.
  std::vector<std::size_t> entries;
  std::vector<MultiLevelFeatureRecord> records;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < pool_manifest.entries.size(); ++i) {
    const auto& e = pool_manifest.entries[i];
    if (e.class_id != cls || e.image_label != 0 || e.split == Split::test) continue;
    auto r = pool_manifest.load(i);
    if (r.image_id == query.image_id) continue;
    if (a.level >= r.levels.size()) throw DataError("pool record " + e.record_path + " lacks level " + std::to_string(a.level));
    entries.push_back(i);
    ids.push_back(r.image_id);
    records.push_back(std::move(r));
  }
  if (records.empty()) throw DataError("pool has no normal records of class '" + cls + "'");
  std::vector<const FeatureGrid*> grids;
  for (const auto& r : records) grids.push_back(&r.levels[a.level]);

  SignatureCache cache;
  bool cached = false;
  if (!a.cache.empty() && fs::exists(a.cache)) {
    cache = load_signature_cache(a.cache);
    const auto& cb = cache.codebook;
    cached = cache.ids == ids && cb.grid == a.grid && cb.clusters == a.clusters && cb.seed == a.seed;
    if (!cached) out << "# signature cache " << a.cache << " is stale, rebuilding\n";
  }
  if (!cached) {
    cache = SignatureCache{};
    cache.codebook = build_codebook(grids, a.grid, a.clusters, a.seed);
    cache.ids = ids;
    cache.signatures.resize(grids.size());
    parallel_for(grids.size(), 1, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) cache.signatures[i] = signature(*grids[i], cache.codebook);
    });
    if (!a.cache.empty()) save_signature_cache(cache, a.cache);
  }
  const auto result = rank_candidates(signature(query.levels[a.level], cache.codebook), cache.signatures, a.k);

  nlohmann::ordered_json j;
  j["query"] = query.image_id;
  j["class_id"] = cls;
  j["level"] = a.level;
  j["k"] = a.k;
  for (std::size_t r = 0; r < result.ranked.size(); ++r) {
    const auto& c = result.ranked[r];
    const auto& e = pool_manifest.entries[entries[c.index]];
    j["ranked"].push_back({{"rank", r + 1}, {"image_id", ids[c.index]}, {"record_path", e.record_path}, {"degree", c.degree}});
    if (r < a.k) out << r + 1 << " " << ids[c.index] << " " << config_detail::format_double(c.degree) << "\n";
  }
  if (!a.out.empty()) write_text(a.out, j.dump(2) + "\n");

  if (!a.write_manifest.empty()) {
    // Same entries with the class's reference split replaced by the selection.
    std::set<std::size_t> chosen;
    for (std::size_t s : result.selected) chosen.insert(entries[s]);
    Manifest m;
    m.base_dir = fs::path(a.write_manifest).parent_path();
    for (std::size_t i = 0; i < pool_manifest.entries.size(); ++i) {
      ManifestEntry e = pool_manifest.entries[i];
      if (e.class_id == cls && e.split == Split::reference && !chosen.count(i)) continue;
      if (chosen.count(i)) e.split = Split::reference;
      e.record_path = fs::absolute(pool_manifest.resolve(pool_manifest.entries[i])).lexically_normal().string();
      m.entries.push_back(std::move(e));
    }
    save_manifest(m, a.write_manifest);
    out << "wrote manifest " << a.write_manifest << " with " << chosen.size() << " references for class " << cls << "\n";
  }
  return 0;
}

inline int run_synth(const SynthArgs& a, std::ostream& out) {
  SyntheticSpec spec;
  if (!a.spec.empty()) {
    std::ifstream f(a.spec);
    if (!f) throw IoError("cannot open synthetic spec " + a.spec);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    spec = parse_synthetic_spec(text);
  }
  spec.seed = a.seed;
  spec.validate();
  out << "# resolved synth spec\n" << format_synthetic_spec(spec);
  const auto m = generate_synthetic(spec, a.out_dir);
  out << "wrote " << m.entries.size() << " records and " << (fs::path(a.out_dir) / "manifest.jsonl").string() << "\n";
  return 0;
}

}  // namespace detail

/// Runs one invocation; argv[0] is the program name.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  if (argc < 2) {
    err << "error: usage: missing subcommand\n" << usage();
    return 2;
  }
  const std::string first = argv[1];
  if (first == "--help" || first == "-h") {
    out << usage();
    return 0;
  }
  const auto& names = subcommands();
  if (std::find(names.begin(), names.end(), first) == names.end()) {
    err << "error: usage: unknown subcommand '" << one_line(first) << "'\n" << usage();
    return 2;
  }

  CLI::App app{"anomaly representation pretraining on patch features", "adp"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  detail::PretrainArgs pa;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "train projectors on a feature manifest");
  pretrain_cmd->add_option("--manifest", pa.manifest, "feature manifest (JSONL)")->required();
  pretrain_cmd->add_option("--config", pa.config, "training config file (key = value)");
  pretrain_cmd->add_option("--out", pa.out, "checkpoint path")->required();
  pretrain_cmd->add_option("--resume", pa.resume, "checkpoint to continue from");
  pretrain_cmd->add_option("--log", pa.log, "per-step loss log (JSONL)");
  pretrain_cmd->add_option("--log-every", pa.log_every, "print a loss line every N steps (0: final only)");
  const TrainConfig defaults;
  std::map<std::string, std::string> raw_overrides;
  std::vector<std::pair<std::string, CLI::Option*>> config_opts;
  for (const auto& key : config_keys()) {
    auto* o = pretrain_cmd->add_option("--" + key, raw_overrides[key], "config " + key);
    o->default_str(get_config_value(defaults, key));
    config_opts.emplace_back(key, o);
  }

  detail::ProjectArgs pj;
  auto* project_cmd = app.add_subcommand("project", "write projected residual features for a manifest");
  project_cmd->add_option("--ckpt", pj.ckpt, "trained checkpoint")->required();
  project_cmd->add_option("--manifest", pj.manifest, "records to project")->required();
  project_cmd->add_option("--refs", pj.refs, "manifest whose reference split supplies the banks")->required();
  project_cmd->add_option("--out-dir", pj.out_dir, "output directory")->required();

  detail::ScoreArgs sa;
  auto* score_cmd = app.add_subcommand("score", "score the test split of a manifest");
  score_cmd->add_option("--method", sa.method, "featurenorm, padim or patchcore")
      ->check(CLI::IsMember({"featurenorm", "padim", "patchcore"}));
  score_cmd->add_option("--ckpt", sa.ckpt, "trained checkpoint (omit to score raw residuals)");
  score_cmd->add_option("--refs", sa.refs, "manifest whose reference split holds the few-shot references")->required();
  score_cmd->add_option("--test", sa.test, "manifest whose test split is scored")->required();
  score_cmd->add_option("--out", sa.out, "score file (JSONL); maps go next to it")->required();
  score_cmd->add_option("--shrinkage", sa.shrinkage, "covariance shrinkage for padim");
  score_cmd->add_option("--coreset-fraction", sa.coreset_fraction, "coreset fraction for patchcore");
  score_cmd->add_option("--aggregate", sa.aggregate, "image score from the fused map: max or topk_mean")
      ->check(CLI::IsMember({"max", "topk_mean"}));
  score_cmd->add_option("--topk", sa.topk, "patch count for topk_mean");

  detail::EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "image AUROC and PRO from a score file");
  eval_cmd->add_option("--scores", ea.scores, "score file from `score`")->required();
  eval_cmd->add_option("--masks-manifest", ea.masks, "manifest of records carrying anomaly fractions")->required();
  eval_cmd->add_option("--out", ea.out, "JSON report path");
  eval_cmd->add_option("--fpr-limit", ea.fpr_limit, "PRO integration limit");
  eval_cmd->add_option("--thresholds", ea.thresholds, "PRO threshold count");
  eval_cmd->add_option("--mask-threshold", ea.mask_threshold, "patch is anomalous when its fraction exceeds this");

  detail::MatchArgs ma;
  auto* match_cmd = app.add_subcommand("match-refs", "rank a reference pool by alignment with a query");
  match_cmd->add_option("--pool", ma.pool, "manifest of candidate references")->required();
  match_cmd->add_option("--query", ma.query, "query ADFR record")->required();
  match_cmd->add_option("--k", ma.k, "references to select");
  match_cmd->add_option("--level", ma.level, "feature level used for matching");
  match_cmd->add_option("--grid", ma.grid, "cells per side");
  match_cmd->add_option("--clusters", ma.clusters, "k-means centers per cell");
  match_cmd->add_option("--seed", ma.seed, "k-means seed");
  match_cmd->add_option("--class", ma.class_id, "pool class (default: the query's class)");
  match_cmd->add_option("--cache", ma.cache, "signature cache file, reused when it matches the pool");
  match_cmd->add_option("--out", ma.out, "JSON ranking");
  match_cmd->add_option("--write-manifest", ma.write_manifest, "copy of the pool with the selection as references");

  detail::SynthArgs ya;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic feature fixture");
  synth_cmd->add_option("--spec", ya.spec, "synthetic spec file (key = value)");
  synth_cmd->add_option("--out-dir", ya.out_dir, "output directory")->required();
  synth_cmd->add_option("--seed", ya.seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*pretrain_cmd) {
      for (const auto& [key, opt] : config_opts)
        if (opt->count() > 0) pa.overrides[key] = raw_overrides[key];
      return detail::run_pretrain(pa, out);
    }
    if (*project_cmd) {
      detail::print_resolved(out, *project_cmd);
      return detail::run_project(pj, out);
    }
    if (*score_cmd) {
      detail::print_resolved(out, *score_cmd);
      return detail::run_score(sa, out);
    }
    if (*eval_cmd) {
      detail::print_resolved(out, *eval_cmd);
      return detail::run_eval(ea, out);
    }
    if (*match_cmd) {
      detail::print_resolved(out, *match_cmd);
      return detail::run_match(ma, out);
    }
    if (*synth_cmd) return detail::run_synth(ya, out);
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: io: " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 2;
}

}  // namespace adp::cli
