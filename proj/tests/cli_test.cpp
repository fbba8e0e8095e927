#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "adp/cli.hpp"
#include "test_support.hpp"

using namespace adp;
using adp_test::scratch_dir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

// In-process invocation.
Run call(std::vector<std::string> args) {
  args.insert(args.begin(), "adp");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Through the built binary, to check real exit statuses.
int shell(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = std::string(ADP_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  std::string text;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, p)) text.append(buf, n);
  const int status = pclose(p);
  if (output) *output = text;
  return WEXITSTATUS(status);
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.classes = 1;
  s.levels = {{4, 4, 8}, {2, 2, 8}};
  s.train_images = 8;
  s.train_anomaly_rate = 0.5;
  s.reference_images = 4;
  s.test_images = 6;
  return s;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::size_t line_count(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST(Cli, UnknownSubcommandExitsTwoWithUsage) {
  std::string text;
  EXPECT_EQ(shell("frobnicate", &text), 2);
  EXPECT_NE(text.find("usage: adp <subcommand>"), std::string::npos);
  EXPECT_EQ(shell("", &text), 2);
}

TEST(Cli, UnknownFlagRejected) {
  const auto r = call({"eval", "--scores", "a", "--masks-manifest", "b", "--bogus", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: usage: ", 0), 0u);
  EXPECT_EQ(line_count(r.err), 1u);
}

TEST(Cli, HelpListsDefaults) {
  const auto r = call({"pretrain", "--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"--tau TEXT [0.15]", "--delta_r TEXT [0.75]", "--lambda TEXT [1]", "--radius TEXT [0.4]",
                        "--num_refs TEXT [2048]", "--batch_size TEXT [32]", "--epochs TEXT [10]",
                        "--seed TEXT [42]", "--k_choices TEXT [1,4,8]", "--grid_size TEXT [5]",
                        "--num_clusters TEXT [5]", "--top_k TEXT [8]"})
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  EXPECT_NE(r.out.find("[1e-04]"), std::string::npos);
  const auto m = call({"match-refs", "--help"});
  EXPECT_NE(m.out.find("--k UINT [8]"), std::string::npos);
  EXPECT_NE(call({"eval", "--help"}).out.find("--fpr-limit FLOAT [0.3]"), std::string::npos);
  EXPECT_NE(call({"score", "--help"}).out.find("--method TEXT:{featurenorm,padim,patchcore} [featurenorm]"),
            std::string::npos);
}

TEST(Cli, MissingCheckpointIsSingleLineIoError) {
  const auto dir = scratch_dir("cli_missing_ckpt");
  generate_synthetic(small_spec(), dir);
  const auto m = (dir / "manifest.jsonl").string();
  const auto r = call({"score", "--ckpt", (dir / "nope.adck").string(), "--refs", m, "--test", m, "--out",
                       (dir / "s.jsonl").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: io: ", 0), 0u) << r.err;
  EXPECT_EQ(line_count(r.err), 1u);
}

TEST(Cli, MalformedManifestIsConfigError) {
  const auto dir = scratch_dir("cli_bad_manifest");
  write(dir / "m.jsonl", "{\"record_path\": \"x.adfr\"\n");
  const auto r = call({"pretrain", "--manifest", (dir / "m.jsonl").string(), "--out", (dir / "c.adck").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err, "error: config: manifest line 1: malformed JSON\n");
}

TEST(Cli, BadConfigOverrideNamesFlag) {
  const auto dir = scratch_dir("cli_bad_override");
  generate_synthetic(small_spec(), dir);
  const auto r = call({"pretrain", "--manifest", (dir / "manifest.jsonl").string(), "--out",
                       (dir / "c.adck").string(), "--tau", "abc"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: config: --tau: ", 0), 0u) << r.err;
}

TEST(Cli, LevelMismatchBetweenCheckpointAndRecords) {
  const auto dir = scratch_dir("cli_level_mismatch");
  auto spec = small_spec();
  generate_synthetic(spec, dir / "a");
  spec.levels = {{4, 4, 6}, {2, 2, 8}};
  generate_synthetic(spec, dir / "b");
  const auto ma = (dir / "a" / "manifest.jsonl").string(), mb = (dir / "b" / "manifest.jsonl").string();
  ASSERT_EQ(call({"pretrain", "--manifest", ma, "--out", (dir / "c.adck").string(), "--batch_size", "4",
                  "--max_steps", "1", "--num_refs", "4", "--n_heads", "2", "--k_choices", "1"})
                .code,
            0);
  const auto r = call({"score", "--ckpt", (dir / "c.adck").string(), "--refs", mb, "--test", mb, "--out",
                       (dir / "s.jsonl").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: data: checkpoint level 0 does not match", 0), 0u) << r.err;
}

TEST(Cli, PretrainPrintsResolvedConfigAndIsDeterministic) {
  const auto dir = scratch_dir("cli_pretrain");
  generate_synthetic(small_spec(), dir);
  const auto m = (dir / "manifest.jsonl").string();
  write(dir / "train.cfg", "batch_size = 4\nepochs = 2\nnum_refs = 4\nn_heads = 2\nk_choices = 1,2\n");
  const std::vector<std::string> base{"pretrain", "--manifest", m, "--config", (dir / "train.cfg").string(),
                                      "--learning_rate", "0.002"};
  auto a = base, b = base;
  a.insert(a.end(), {"--out", (dir / "a.adck").string(), "--log", (dir / "a.jsonl").string()});
  b.insert(b.end(), {"--out", (dir / "b.adck").string()});
  const auto ra = call(a);
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(call(b).code, 0);
  EXPECT_NE(ra.out.find("learning_rate = 0.002\n"), std::string::npos);
  EXPECT_NE(ra.out.find("batch_size = 4\n"), std::string::npos);
  EXPECT_NE(ra.out.find("tau = 0.15\n"), std::string::npos);
  EXPECT_EQ(io::read_file(dir / "a.adck"), io::read_file(dir / "b.adck"));
  std::ifstream log(dir / "a.jsonl");
  std::string line;
  std::size_t steps = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["step"].get<std::size_t>(), ++steps);
    EXPECT_EQ(j["levels"].size(), 2u);
  }
  EXPECT_EQ(steps, 4u);  // 8 images, batch 4, 2 epochs
  EXPECT_EQ(load_checkpoint(dir / "a.adck").config.learning_rate, 0.002);
}

TEST(Cli, ResumeContinuesToTheRequestedEpochs) {
  const auto dir = scratch_dir("cli_resume");
  generate_synthetic(small_spec(), dir);
  const auto m = (dir / "manifest.jsonl").string();
  const std::vector<std::string> base{"pretrain", "--manifest", m, "--batch_size", "4", "--epochs", "3",
                                      "--num_refs", "4", "--n_heads", "2", "--k_choices", "1,2"};
  auto full = base, part = base;
  full.insert(full.end(), {"--out", (dir / "full.adck").string()});
  part.insert(part.end(), {"--out", (dir / "part.adck").string(), "--max_steps", "3"});
  ASSERT_EQ(call(full).code, 0);
  ASSERT_EQ(call(part).code, 0);
  const auto r = call({"pretrain", "--manifest", m, "--resume", (dir / "part.adck").string(), "--epochs", "3",
                       "--out", (dir / "resumed.adck").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(io::read_file(dir / "full.adck"), io::read_file(dir / "resumed.adck"));
}

TEST(Cli, EvalOnPerfectPredictionFixture) {
  const auto dir = scratch_dir("cli_eval_perfect");
  const auto manifest = generate_synthetic(small_spec(), dir);
  // Score maps equal to the finest-level fractions, image score = label.
  std::vector<ImageScore> scores;
  for (std::size_t i : manifest.select(Split::test)) {
    const auto r = manifest.load(i);
    ImageScore s;
    s.image_id = r.image_id;
    s.class_id = r.class_id;
    s.image_label = r.image_label;
    s.image_score = r.image_label;
    s.fused = ScoreGrid(4, 4);
    for (std::size_t k = 0; k < 16; ++k) s.fused.values[k] = (*r.anomaly_fractions)[0][k] > 0.5;
    scores.push_back(s);
  }
  write_scores(scores, dir / "perfect.jsonl");
  const auto r = call({"eval", "--scores", (dir / "perfect.jsonl").string(), "--masks-manifest",
                       (dir / "manifest.jsonl").string(), "--out", (dir / "report.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("AUROC/PRO: 100.0/100.0\n"), std::string::npos);
  std::ifstream in(dir / "report.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["image_auroc"].get<double>(), 1.0);
  EXPECT_EQ(j["pro"].get<double>(), 1.0);
}

TEST(Cli, ScoreWithoutCheckpointUsesRawResiduals) {
  const auto dir = scratch_dir("cli_score_raw");
  generate_synthetic(small_spec(), dir);
  const auto m = (dir / "manifest.jsonl").string();
  for (const char* method : {"featurenorm", "padim", "patchcore"}) {
    const auto out = (dir / (std::string(method) + ".jsonl")).string();
    const auto r = call({"score", "--method", method, "--refs", m, "--test", m, "--out", out});
    ASSERT_EQ(r.code, 0) << method << ": " << r.err;
    EXPECT_EQ(read_scores(out).size(), 6u);
  }
}

TEST(Cli, SynthIsDeterministicGivenSeed) {
  const auto dir = scratch_dir("cli_synth");
  write(dir / "spec.cfg", format_synthetic_spec(small_spec()));
  for (const char* name : {"a", "b"})
    ASSERT_EQ(call({"synth", "--spec", (dir / "spec.cfg").string(), "--out-dir", (dir / name).string(), "--seed", "5"})
                  .code,
              0);
  ASSERT_EQ(call({"synth", "--spec", (dir / "spec.cfg").string(), "--out-dir", (dir / "c").string(), "--seed", "6"})
                .code,
            0);
  const auto rec = fs::path("records") / "class0" / "test" / "class0_test_000.adfr";
  EXPECT_EQ(io::read_file(dir / "a" / rec), io::read_file(dir / "b" / rec));
  EXPECT_NE(io::read_file(dir / "a" / rec), io::read_file(dir / "c" / rec));
  EXPECT_EQ(io::read_file(dir / "a" / "manifest.jsonl"), io::read_file(dir / "b" / "manifest.jsonl"));
}

TEST(Cli, MatchRefsRanksAndRewritesReferenceSplit) {
  const auto dir = scratch_dir("cli_match");
  generate_synthetic(small_spec(), dir);
  const auto m = (dir / "manifest.jsonl").string();
  const auto query = (dir / "records" / "class0" / "test" / "class0_test_005.adfr").string();
  const std::vector<std::string> args{"match-refs", "--pool", m, "--query", query, "--k", "3", "--grid", "2",
                                      "--cache", (dir / "sig.adsc").string()};
  auto first = args;
  first.insert(first.end(), {"--out", (dir / "rank.json").string(), "--write-manifest",
                             (dir / "out" / "matched.jsonl").string()});
  const auto r1 = call(first);
  ASSERT_EQ(r1.code, 0) << r1.err;
  EXPECT_TRUE(fs::exists(dir / "sig.adsc"));
  const auto r2 = call(args);  // served from the cache
  ASSERT_EQ(r2.code, 0);
  auto tail = [](const std::string& s) { return s.substr(s.find("\n1 ")); };
  EXPECT_EQ(tail(r1.out).substr(0, tail(r2.out).size()), tail(r2.out));

  std::ifstream in(dir / "rank.json");
  const auto j = nlohmann::json::parse(in);
  // Pool: 4 normal train images plus 4 references.
  EXPECT_EQ(j["ranked"].size(), 8u);
  const auto matched = load_manifest(dir / "out" / "matched.jsonl");
  EXPECT_EQ(matched.select(Split::reference).size(), 3u);
  std::size_t chosen_refs = 0;
  for (std::size_t k = 0; k < 3; ++k)
    chosen_refs += j["ranked"][k]["image_id"].get<std::string>().find("_reference_") != std::string::npos;
  EXPECT_EQ(matched.entries.size(), 18u - (4u - chosen_refs));  // unchosen references dropped
  for (std::size_t i : matched.select(Split::reference)) EXPECT_EQ(matched.load(i).image_label, 0);
}

TEST(Cli, ProjectWritesLoadableManifest) {
  const auto dir = scratch_dir("cli_project");
  generate_synthetic(small_spec(), dir);
  const auto m = (dir / "manifest.jsonl").string();
  ASSERT_EQ(call({"pretrain", "--manifest", m, "--out", (dir / "c.adck").string(), "--batch_size", "4",
                  "--max_steps", "2", "--num_refs", "4", "--n_heads", "2", "--hidden_dim", "12",
                  "--k_choices", "1"})
                .code,
            0);
  const auto r = call({"project", "--ckpt", (dir / "c.adck").string(), "--manifest", m, "--refs", m, "--out-dir",
                       (dir / "proj").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto p = load_manifest(dir / "proj" / "manifest.jsonl");
  ASSERT_EQ(p.entries.size(), 18u);
  const auto rec = p.load(0);
  ASSERT_EQ(rec.levels.size(), 2u);
  EXPECT_EQ(rec.levels[0].channels, 12u);
  EXPECT_TRUE(rec.anomaly_fractions.has_value());
}
