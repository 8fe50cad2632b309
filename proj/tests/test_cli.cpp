#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "motionbook/error.hpp"

using namespace motionbook;
using namespace motionbook::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::kUsage;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("motionbook_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(const fs::path& dir, const std::string& args) {
  const auto out = dir / "stdout.txt";
  const auto err = dir / "stderr.txt";
  const std::string cmd = std::string(MOTIONBOOK_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

const char* kTinyConfig = R"({
  "seed": 5,
  "data": {"count": 24},
  "tokenizer": {"channels": [8, 8], "res_blocks": 1, "train": {"epochs": 1, "batch_size": 4}},
  "quantizer": {"kind": "vq", "codebook_size": 32, "latent_dim": 8},
  "lm": {"layers": 1, "heads": 2, "width": 16, "context": 512, "train": {"epochs": 1}}
})";

}  // namespace

TEST_CASE("run config defaults and sections") {
  const auto d = run_config_from_json(json::object());
  CHECK(d.seed == 0);
  CHECK(d.eval_split == "val");
  CHECK(d.templates.empty());

  const auto c = run_config_from_json(json::parse(kTinyConfig));
  CHECK(c.seed == 5);
  CHECK(c.data.count == 24);
  CHECK(c.tokenizer.channels == std::vector<std::size_t>{8, 8});
  CHECK(c.tokenizer.codebook_entries() == 32);
  CHECK(c.tokenizer_train.epochs == 1);
  CHECK(c.lm.width == 16);
  CHECK(c.lm_train.epochs == 1);
}

TEST_CASE("component seeds are forked from the top-level seed") {
  auto a = run_config_from_json(json{{"seed", 11}});
  auto b = run_config_from_json(json{{"seed", 11}});
  CHECK(a.data.seed == b.data.seed);
  CHECK(a.component_seed("tokenizer") == b.component_seed("tokenizer"));
  CHECK(a.data.seed != a.tokenizer_train.seed);
  CHECK(a.tokenizer_train.seed != a.lm_train.seed);
  CHECK(a.lm_train.seed != a.generate.seed);

  b.apply_seed(12);
  CHECK(b.data.seed != a.data.seed);
  b.apply_seed(11);
  CHECK(b.data.seed == a.data.seed);
  CHECK(b.generate.seed == a.generate.seed);
}

TEST_CASE("run config rejects unknown keys and section seeds") {
  CHECK(kind_of([] { run_config_from_json(json{{"sead", 1}}); }) == ErrorKind::kInvalidConfig);
  CHECK(kind_of([] { run_config_from_json(json{{"tokenizer", {{"chanels", {8}}}}}); }) == ErrorKind::kInvalidConfig);
  CHECK(kind_of([] { run_config_from_json(json{{"quantizer", {{"size", 8}}}}); }) == ErrorKind::kInvalidConfig);
  CHECK(kind_of([] { run_config_from_json(json{{"lm", {{"train", {{"warmup", 1}}}}}}); }) ==
        ErrorKind::kInvalidConfig);
  CHECK(kind_of([] { run_config_from_json(json{{"data", {{"seed", 3}}}}); }) == ErrorKind::kInvalidConfig);
  CHECK(kind_of([] { run_config_from_json(json{{"tokenizer", {{"train", {{"seed", 3}}}}}}); }) ==
        ErrorKind::kInvalidConfig);
  CHECK(kind_of([] { run_config_from_json(json{{"metrics", {{"split", "dev"}}}}); }) == ErrorKind::kInvalidConfig);
  CHECK(kind_of([] { run_config_from_json(json{{"seed", "x"}}); }) == ErrorKind::kInvalidConfig);
  CHECK(kind_of([] { load_run_config("/nonexistent/run.json"); }) == ErrorKind::kIo);
}

TEST_CASE("run config json roundtrip") {
  const auto c = run_config_from_json(json::parse(kTinyConfig));
  const auto again = run_config_from_json(to_json(c));
  CHECK(to_json(again) == to_json(c));
  CHECK(again.data.seed == c.data.seed);
}

TEST_CASE("motion embedding is the per-column frame mean") {
  features::MotionSequence m(features::FeatureFormat::kSmplD135, 30, 4);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t d = 0; d < m.width(); ++d) m.at(t, d) = static_cast<float>(t) + 0.5f * static_cast<float>(d % 3);
  }
  const auto e = motion_embedding(m);
  REQUIRE(e.size() == 135);
  CHECK(e[0] == doctest::Approx(1.5));
  CHECK(e[1] == doctest::Approx(2.0));
  CHECK(e[5] == doctest::Approx(2.5));
}

TEST_CASE("token manifest roundtrip") {
  TempDir dir("manifest");
  const std::vector<TokenEntry> entries = {{"a person walks", "tokens/a.motk", "train"},
                                           {"a person jumps", "tokens/b.motk", "test"}};
  write_token_manifest(dir.path / "manifest.json", entries);
  const auto back = read_token_manifest(dir.path / "manifest.json");
  REQUIRE(back.size() == 2);
  CHECK(back[1].caption == "a person jumps");
  CHECK(back[1].motion_token_file == "tokens/b.motk");
  CHECK(back[1].split == "test");

  write_token_manifest(dir.path / "empty.json", {});
  CHECK(kind_of([&] { read_token_manifest(dir.path / "empty.json"); }) == ErrorKind::kEmptyManifest);
  CHECK(kind_of([&] { read_token_manifest(dir.path / "missing.json"); }) == ErrorKind::kIo);
}

TEST_CASE("cli exit codes and error json") {
  TempDir dir("cli_errors");

  auto r = run_cli(dir.path, "");
  CHECK(r.code == 1);
  CHECK(json::parse(r.err)["category"] == "usage");

  r = run_cli(dir.path, "gen-data --out x --frobnicate");
  CHECK(r.code == 1);

  const auto missing = (dir.path / "missing.ckpt").string();
  r = run_cli(dir.path, "encode --tokenizer " + missing + " --in x --out y");
  CHECK(r.code == 2);
  const auto err = json::parse(r.err);
  CHECK(err["error"] == "IoError");
  CHECK(err["category"] == "data");
  CHECK(err["message"].get<std::string>().find(missing) != std::string::npos);

  std::ofstream(dir.path / "bad.json") << R"({"tokenizer": {"nope": 1}})";
  r = run_cli(dir.path, "gen-data --config " + (dir.path / "bad.json").string() + " --out " + (dir.path / "c").string());
  CHECK(r.code == 1);
  CHECK(json::parse(r.err)["error"] == "InvalidConfig");

  r = run_cli(dir.path, "--help");
  CHECK(r.code == 0);
  CHECK(r.out.find("train-tokenizer") != std::string::npos);
}

TEST_CASE("cli pipeline end to end") {
  TempDir dir("cli_pipeline");
  const auto p = [&](const char* name) { return (dir.path / name).string(); };
  std::ofstream(dir.path / "run.json") << kTinyConfig;
  const std::string cfg = "--config " + p("run.json");

  auto r = run_cli(dir.path, "gen-data " + cfg + " --out " + p("corpus"));
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["sequences"] == 24);
  const auto first_manifest = slurp(dir.path / "corpus/manifest.json");

  r = run_cli(dir.path, "gen-data " + cfg + " --out " + p("corpus2"));
  REQUIRE(r.code == 0);
  CHECK(slurp(dir.path / "corpus2/manifest.json") == first_manifest);

  r = run_cli(dir.path, "train-tokenizer " + cfg + " --corpus " + p("corpus") + " --out " + p("tok"));
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir.path / "tok/tokenizer.ckpt"));
  CHECK(fs::exists(dir.path / "tok/report.csv"));
  CHECK(fs::exists(dir.path / "tok/train_usage.csv"));

  r = run_cli(dir.path, "encode --tokenizer " + p("tok/tokenizer.ckpt") + " --in " + p("corpus") + " --out " + p("tokens"));
  REQUIRE(r.code == 0);
  CHECK(read_token_manifest(dir.path / "tokens/manifest.json").size() == 24);

  r = run_cli(dir.path, "codebook-stats --tokens " + p("tokens") + " --split all --out " + p("usage.csv"));
  REQUIRE(r.code == 0);
  const auto stats = json::parse(r.out);
  CHECK(stats["codebook_size"] == 32);
  CHECK(stats["utilization"].get<double>() > 0.0);
  CHECK(stats["utilization"].get<double>() <= 1.0);

  r = run_cli(dir.path, "train-lm " + cfg + " --tokens " + p("tokens") + " --out " + p("lm"));
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir.path / "lm/lm.ckpt"));
  CHECK(fs::exists(dir.path / "lm/loss.csv"));

  r = run_cli(dir.path, "generate " + cfg + " --lm " + p("lm/lm.ckpt") + " --tokenizer " + p("tok/tokenizer.ckpt") +
                            " --text \"a person walks\" --max-len 44 --out " + p("one.motk"));
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir.path / "one.motk"));

  r = run_cli(dir.path, "decode --tokenizer " + p("tok/tokenizer.ckpt") + " --in " + p("one.motk") + " --out " +
                            p("one.motb"));
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["frames"].get<int>() % 4 == 0);

  r = run_cli(dir.path, "eval-recon " + cfg + " --tokenizer " + p("tok/tokenizer.ckpt") + " --corpus " + p("corpus") +
                            " --split all --out " + p("recon.json"));
  REQUIRE(r.code == 0);
  const auto recon = json::parse(slurp(dir.path / "recon.json"));
  CHECK(recon["mpjpe_mm"].get<double>() > 0.0);
  CHECK(std::isfinite(recon["fid"].get<double>()));

  // A tokenizer with another codebook size cannot drive this language model.
  std::ofstream(dir.path / "other.json") << R"({"seed": 5, "data": {"count": 24},
    "tokenizer": {"channels": [8, 8], "res_blocks": 1, "train": {"epochs": 1, "batch_size": 4}},
    "quantizer": {"kind": "vq", "codebook_size": 64, "latent_dim": 8}})";
  r = run_cli(dir.path, "train-tokenizer --config " + p("other.json") + " --corpus " + p("corpus") + " --out " + p("tok64"));
  REQUIRE(r.code == 0);
  r = run_cli(dir.path, "generate " + cfg + " --lm " + p("lm/lm.ckpt") + " --tokenizer " + p("tok64/tokenizer.ckpt") +
                            " --text walk --out " + p("x.motk"));
  CHECK(r.code == 2);
  CHECK(json::parse(r.err)["error"] == "VocabMismatch");
}
