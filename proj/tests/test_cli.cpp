#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dplx/cli.hpp"

using namespace dplx;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "dplx_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "dplx");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  ::testing::internal::CaptureStdout();
  ::testing::internal::CaptureStderr();
  const int code = cli::dispatch(static_cast<int>(argv.size()), argv.data());
  std::fflush(stdout);
  Run r{code, ::testing::internal::GetCapturedStdout(), ::testing::internal::GetCapturedStderr()};
  return r;
}

std::vector<json> json_lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);)
    if (!line.empty() && line[0] == '{') out.push_back(json::parse(line));
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

const std::vector<std::string> kTiny = {
    "--set", "model.width=16",      "--set", "model.layers=2",       "--set", "model.heads=2",
    "--set", "train.k1=4",          "--set", "train.k2=3",           "--set", "train.k3=2",
    "--set", "train.batch_tokens=48", "--set", "train.log_interval=1", "--set", "train.eval_interval=0",
    "--set", "diffusion.steps=20",  "--set", "train.record_wallclock=false"};

}  // namespace

// ---------------------------------------------------------------------------
// config

TEST(Config, UnknownKeyIsConfigError) {
  RunConfig c;
  EXPECT_THROW(c.set("model.wdth", "8"), ConfigError);
  EXPECT_THROW(c.set("train.k1", "-3"), ConfigError);
  EXPECT_THROW(c.set("train.lr", "fast"), ConfigError);
  EXPECT_THROW(c.set("diffusion.schedule", "cosine"), ConfigError);
}

TEST(Config, IniRoundTrip) {
  RunConfig c;
  c.set("run.seed", "42");
  c.set("model.width", "48");
  c.set("train.lr", "0.00075");
  c.set("data.difficulty", "shift");
  c.set("diffusion.schedule", "linear");
  const auto path = scratch("ini") / "c.ini";
  c.save(path.string());
  const auto back = RunConfig::from_ini(path.string());
  EXPECT_EQ(back.entries(), c.entries());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.seed, 42u);
}

TEST(Config, HashIgnoresBudgets) {
  RunConfig a, b;
  b.set("train.k1", "17");
  EXPECT_EQ(a.hash(), b.hash());
  b.set("model.layers", "6");
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, EnvironmentSeedIsAFallback) {
  ::setenv("DPLX_SEED", "99", 1);
  RunConfig a;
  a.resolve_seed();
  EXPECT_EQ(a.seed, 99u);
  RunConfig b;
  b.set("run.seed", "5");
  b.resolve_seed();
  EXPECT_EQ(b.seed, 5u);
  ::setenv("DPLX_SEED", "x", 1);
  RunConfig c;
  EXPECT_THROW(c.resolve_seed(), ConfigError);
  ::unsetenv("DPLX_SEED");
}

// ---------------------------------------------------------------------------
// named-tensor files

TEST(Serialize, RoundTripAndWidthConversion) {
  NamedTensors<double> items{{"a", Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6.25})}, {"b.c", Tensor<double>({1}, {-0.5})}};
  std::stringstream ss;
  write_tensors(ss, items);
  const auto back = read_tensors<double>(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].first, "a");
  EXPECT_EQ(back[0].second.shape(), (Shape{2, 3}));
  EXPECT_EQ(back[0].second.data(), items[0].second.data());
  EXPECT_EQ(back[1].first, "b.c");

  std::stringstream again;
  write_tensors(again, items);
  const auto as_float = read_tensors<float>(again);
  EXPECT_FLOAT_EQ(as_float[0].second[5], 6.25f);
}

TEST(Serialize, BadMagicAndTruncation) {
  std::stringstream bad("NOPE1xxxxxxxxxxxx");
  try {
    read_tensors<double>(bad);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  std::stringstream full;
  write_tensors<double>(full, {{"a", Tensor<double>({4}, {1, 2, 3, 4})}});
  std::stringstream cut(full.str().substr(0, full.str().size() - 5));
  EXPECT_THROW(read_tensors<double>(cut), FormatError);
}

// ---------------------------------------------------------------------------
// dispatch

TEST(Cli, UnknownSubcommandIsUsageExit2) {
  const auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  const auto errs = json_lines(r.err);
  ASSERT_FALSE(errs.empty());
  EXPECT_EQ(errs[0]["error"], "usage");
}

TEST(Cli, UnknownFlagIsUsageExit2) {
  EXPECT_EQ(run({"selftest", "--bogus"}).code, 2);
  EXPECT_EQ(run({"sample", "--checkpoint", "x", "--schedule", "cosine"}).code, 2);
}

TEST(Cli, FailureIsMachineReadable) {
  const auto r = run({"eval", "--checkpoint", (scratch("nothing") / "none").string()});
  EXPECT_EQ(r.code, 1);
  const auto errs = json_lines(r.err);
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_EQ(errs[0]["error"], "checkpoint");
}

TEST(Cli, SelftestPasses) {
  const auto r = run({"selftest", "--draws", "4"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, InspectChainIsPalindromic) {
  const auto r = run({"inspect", "--chain", "--layers", "4", "--set", "model.width=16", "--set", "model.heads=2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json_lines(r.out).at(0);
  EXPECT_TRUE(j["palindrome"].get<bool>());
  EXPECT_EQ(j["layers"], 4);
  const auto fwd = j["chain_forward"].get<std::string>();
  EXPECT_EQ(fwd, "fcmffcmffmcffmcf");
  EXPECT_EQ(j["layer_roundtrip_error"].size(), 4u);
  for (auto& e : j["layer_roundtrip_error"]) EXPECT_LE(e.get<double>(), 1e-10);
}

TEST(Cli, InspectPaperPresetCountsParameters) {
  const auto r = run({"inspect", "--preset", "paper-large"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json_lines(r.out).at(0);
  EXPECT_EQ(j["layers"], 18);
  EXPECT_EQ(j["width"], 1024);
  EXPECT_GT(j["parameter_count"].get<double>(), 1e8);
}

TEST(Cli, GenDataWritesSeededJsonl) {
  const auto dir = scratch("gen");
  auto gen = [&](const std::string& name, const std::string& seed) {
    const auto path = (dir / name).string();
    const auto r = run({"gen-data", "--pairs", "120", "--vocab", "9", "--max-len", "7", "--difficulty", "shift",
                        "--seed", seed, "--out", path});
    EXPECT_EQ(r.code, 0) << r.err;
    const auto j = json_lines(r.out).at(0);
    EXPECT_EQ(j["pairs"], 120);
    EXPECT_EQ(j["mapping_violations"], 0);
    return path;
  };
  const auto a = gen("a.jsonl", "3"), b = gen("b.jsonl", "3"), c = gen("c.jsonl", "4");
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_NE(slurp(a), slurp(c));
  const auto pairs = read_corpus(a);
  ASSERT_EQ(pairs.size(), 120u);
  for (auto& p : pairs) {
    EXPECT_LE(p.src.size(), 7u);
    for (int u : p.src) EXPECT_LT(u, 9);
  }
}

TEST(Cli, TrainEvalSampleRoundtrip) {
  const auto dir = scratch("e2e");
  const auto data = (dir / "toy.jsonl").string();
  ASSERT_EQ(run({"gen-data", "--pairs", "300", "--vocab", "6", "--max-len", "6", "--difficulty", "copy", "--out", data})
                .code,
            0);

  std::vector<std::string> args{"train", "--data", data, "--out-dir", (dir / "run").string(), "--seed", "5",
                                "--set", "data.vocab=6", "--set", "data.max_len=6"};
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  const auto tr = run(args);
  ASSERT_EQ(tr.code, 0) << tr.err;
  const auto summary = json_lines(tr.out).at(0);
  EXPECT_EQ(summary["steps"], 9);
  EXPECT_TRUE(fs::exists(dir / "run" / "final" / "model.dplx"));
  EXPECT_TRUE(fs::exists(dir / "run" / "final" / "config.ini"));
  const auto metrics = json_lines(slurp(dir / "run" / "metrics.jsonl"));
  EXPECT_EQ(metrics.size(), 9u);
  const auto csv = slurp(dir / "run" / "metrics.csv");
  EXPECT_EQ(csv.rfind("kind,step,stage,loss", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 10);

  const auto ck = (dir / "run" / "final").string();
  const auto ev = run({"eval", "--checkpoint", ck, "--beam", "3", "--report", (dir / "eval.json").string()});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto rep = json_lines(ev.out).at(0);
  for (auto d : {"fwd", "rev"}) {
    EXPECT_GE(rep[d]["bleu"].get<double>(), 0.0);
    EXPECT_LE(rep[d]["accuracy"].get<double>(), 1.0);
  }
  EXPECT_LE(rep["roundtrip_xyx"]["representation_error"].get<double>(), 1e-4);
  EXPECT_TRUE(fs::exists(dir / "eval.json"));

  const auto sp = run({"sample", "--checkpoint", ck, "--direction", "rev", "--steps", "5", "--schedule", "linear",
                       "--count", "2", "--seed", "9"});
  ASSERT_EQ(sp.code, 0) << sp.err;
  const auto lines = json_lines(sp.out);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0]["units"].size(), lines[0]["reference"].size());
  EXPECT_EQ(lines[0]["representation"].size(), lines[0]["reference"].size());
  EXPECT_EQ(lines[0]["representation"][0].size(), 16u);
  EXPECT_EQ(lines[2]["steps"], 5);
  EXPECT_EQ(lines[2]["schedule"], "linear");
  EXPECT_EQ(sp.out, run({"sample", "--checkpoint", ck, "--direction", "rev", "--steps", "5", "--schedule", "linear",
                         "--count", "2", "--seed", "9"})
                        .out);

  const auto rt = run({"roundtrip", "--checkpoint", ck, "--order", "yxy"});
  ASSERT_EQ(rt.code, 0) << rt.err;
  EXPECT_LE(json_lines(rt.out).at(0)["representation_error"].get<double>(), 1e-4);

  const auto in = run({"inspect", "--checkpoint", ck});
  ASSERT_EQ(in.code, 0) << in.err;
  EXPECT_EQ(json_lines(in.out).at(0)["width"], 16);
}

TEST(Cli, CorruptCheckpointIsFormatError) {
  const auto dir = scratch("corrupt");
  {
    RunConfig c;
    c.set("model.width", "16");
    c.set("model.heads", "2");
    c.save((dir / "config.ini").string());
    std::ofstream(dir / "model.dplx") << "garbage";
  }
  const auto r = run({"roundtrip", "--checkpoint", dir.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json_lines(r.err).at(0)["error"], "format");
}
