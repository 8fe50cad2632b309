#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "motionbook/data.hpp"
#include "motionbook/lm.hpp"
#include "motionbook/tokenizer.hpp"

namespace motionbook::cli {

// Sections: seed, data, tokenizer (+ "train"), quantizer, lm (+ "train",
// "generate", "templates"), metrics. Component seeds are forked from the
// top-level seed by fixed labels, so sections may not carry their own.
struct RunConfig {
  std::uint64_t seed = 0;
  data::SyntheticConfig data;
  tok::TokenizerConfig tokenizer;
  tok::TrainOptions tokenizer_train;
  lm::LMConfig lm;
  lm::LMTrainOptions lm_train;
  lm::GenerateParams generate;
  std::string templates;  // empty: no instruction templating
  std::string eval_split = "val";

  // Re-derives every component seed from `seed`.
  void apply_seed(std::uint64_t s);
  std::uint64_t component_seed(const char* label) const;
};

RunConfig run_config_from_json(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);  // empty path: defaults
nlohmann::json to_json(const RunConfig& cfg);

// Sequence-level feature for FID: the per-column mean over frames.
std::vector<double> motion_embedding(const features::MotionSequence& m);

// Token corpus manifest: JSON list of {caption, motion_token_file, split}.
struct TokenEntry {
  std::string caption;
  std::string motion_token_file;  // relative to the manifest directory
  std::string split;
};
void write_token_manifest(const std::filesystem::path& path, const std::vector<TokenEntry>& entries);
std::vector<TokenEntry> read_token_manifest(const std::filesystem::path& path);

// Runs one subcommand. Errors are printed to stderr as one JSON line and
// mapped to exit codes: 1 usage, 2 data, 3 numerical.
int run(int argc, char** argv);

}  // namespace motionbook::cli
