#include "cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Dense>

#include "motionbook/error.hpp"
#include "motionbook/features.hpp"
#include "motionbook/metrics.hpp"
#include "motionbook/nn/runtime.hpp"
#include "motionbook/quantizers.hpp"
#include "motionbook/rng.hpp"

namespace motionbook::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config ----

namespace {

void reject_unknown(const json& doc, std::initializer_list<const char*> known, const std::string& what) {
  require(doc.is_object(), ErrorKind::kInvalidConfig, what + " must be an object");
  for (const auto& [key, value] : doc.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) fail(ErrorKind::kInvalidConfig, "unknown " + what + " key '" + key + "'");
  }
}

void reject_seed(const json& doc, const std::string& what) {
  if (doc.is_object() && doc.contains("seed")) {
    fail(ErrorKind::kInvalidConfig, what + " may not set a seed; use the top-level seed");
  }
}

template <typename V>
void read_if(const json& doc, const char* key, V& out) {
  if (doc.contains(key)) out = doc[key].get<V>();
}

}  // namespace

std::uint64_t RunConfig::component_seed(const char* label) const { return Rng(seed).fork(label).seed(); }

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  data.seed = component_seed("data");
  tokenizer_train.seed = component_seed("tokenizer-train");
  lm_train.seed = component_seed("lm-train");
  generate.seed = component_seed("generate");
}

RunConfig run_config_from_json(const json& doc) {
  reject_unknown(doc, {"seed", "data", "tokenizer", "quantizer", "lm", "metrics"}, "run config");
  RunConfig cfg;
  try {
    read_if(doc, "seed", cfg.seed);
    if (doc.contains("data")) {
      reject_seed(doc["data"], "data");
      cfg.data = data::synthetic_config_from_json(doc["data"]);
    }

    json tok = json::object();
    if (doc.contains("tokenizer")) {
      const auto& t = doc["tokenizer"];
      reject_unknown(t, {"format", "layout", "partition", "alpha", "channels", "res_blocks", "recon_weight",
                         "velocity_weight", "train"},
                     "tokenizer");
      for (const auto& [k, v] : t.items()) {
        if (k != "train") tok[k] = v;
      }
      if (t.contains("train")) {
        reject_seed(t["train"], "tokenizer.train");
        cfg.tokenizer_train = tok::train_options_from_json(t["train"]);
      }
    }
    if (doc.contains("quantizer")) {
      const auto& q = doc["quantizer"];
      reject_unknown(q, {"kind", "lfq", "codebook_size", "latent_dim", "rvq_depth", "vq_decay"}, "quantizer");
      for (const auto& [k, v] : q.items()) tok[k == "kind" ? "quantizer" : k] = v;
    }
    cfg.tokenizer = tok::tokenizer_config_from_json(tok);

    if (doc.contains("lm")) {
      const auto& l = doc["lm"];
      reject_unknown(l, {"layers", "heads", "width", "context", "dropout", "train", "generate", "templates"}, "lm");
      json model = json::object();
      for (const auto& [k, v] : l.items()) {
        if (k != "train" && k != "generate" && k != "templates") model[k] = v;
      }
      cfg.lm = lm::lm_config_from_json(model);
      if (l.contains("train")) {
        const auto& t = l["train"];
        reject_unknown(t, {"epochs", "batch_size", "lr"}, "lm.train");
        read_if(t, "epochs", cfg.lm_train.epochs);
        read_if(t, "batch_size", cfg.lm_train.batch_size);
        read_if(t, "lr", cfg.lm_train.lr);
      }
      if (l.contains("generate")) {
        const auto& g = l["generate"];
        reject_unknown(g, {"temperature", "top_k", "max_len"}, "lm.generate");
        read_if(g, "temperature", cfg.generate.temperature);
        read_if(g, "top_k", cfg.generate.top_k);
        read_if(g, "max_len", cfg.generate.max_len);
      }
      read_if(l, "templates", cfg.templates);
    }
    if (doc.contains("metrics")) {
      const auto& m = doc["metrics"];
      reject_unknown(m, {"split"}, "metrics");
      read_if(m, "split", cfg.eval_split);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("run config: ") + e.what());
  }
  require(cfg.eval_split == "train" || cfg.eval_split == "val" || cfg.eval_split == "test", ErrorKind::kInvalidConfig,
          "metrics.split must be train, val or test");
  require(cfg.lm_train.epochs >= 1 && cfg.lm_train.batch_size >= 1 && cfg.lm_train.lr > 0, ErrorKind::kInvalidConfig,
          "lm.train needs epochs >= 1, batch_size >= 1 and lr > 0");
  require(cfg.generate.temperature >= 0, ErrorKind::kInvalidConfig, "lm.generate.temperature must be >= 0");
  cfg.apply_seed(cfg.seed);
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  if (path.empty()) return run_config_from_json(json::object());
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kInvalidConfig, path.string() + ": " + e.what());
  }
  return run_config_from_json(doc);
}

json to_json(const RunConfig& cfg) {
  auto data = data::to_json(cfg.data);
  data.erase("seed");
  auto all = tok::to_json(cfg.tokenizer);
  json tokenizer, quantizer;
  for (const auto& [k, v] : all.items()) {
    if (k == "quantizer") quantizer["kind"] = v;
    else if (k == "lfq" || k == "codebook_size" || k == "latent_dim" || k == "rvq_depth" || k == "vq_decay") quantizer[k] = v;
    else tokenizer[k] = v;
  }
  tokenizer["train"] = tok::to_json(cfg.tokenizer_train);
  tokenizer["train"].erase("seed");
  auto lmj = lm::to_json(cfg.lm);
  lmj["train"] = {{"epochs", cfg.lm_train.epochs}, {"batch_size", cfg.lm_train.batch_size}, {"lr", cfg.lm_train.lr}};
  lmj["generate"] = {{"temperature", cfg.generate.temperature},
                     {"top_k", cfg.generate.top_k},
                     {"max_len", cfg.generate.max_len}};
  lmj["templates"] = cfg.templates;
  return {{"seed", cfg.seed},
          {"data", data},
          {"tokenizer", tokenizer},
          {"quantizer", quantizer},
          {"lm", lmj},
          {"metrics", {{"split", cfg.eval_split}}}};
}

std::vector<double> motion_embedding(const features::MotionSequence& m) {
  require(m.frames() > 0, ErrorKind::kTooShort, "empty motion has no embedding");
  std::vector<double> e(m.width(), 0.0);
  for (std::size_t t = 0; t < m.frames(); ++t) {
    for (std::size_t d = 0; d < m.width(); ++d) e[d] += m.at(t, d);
  }
  for (auto& v : e) v /= static_cast<double>(m.frames());
  return e;
}

void write_token_manifest(const fs::path& path, const std::vector<TokenEntry>& entries) {
  json doc = json::array();
  for (const auto& e : entries) {
    doc.push_back({{"caption", e.caption}, {"motion_token_file", e.motion_token_file}, {"split", e.split}});
  }
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

std::vector<TokenEntry> read_token_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read token manifest " + path.string());
  std::vector<TokenEntry> out;
  try {
    const auto doc = json::parse(in);
    require(doc.is_array(), ErrorKind::kInvalidConfig, path.string() + " is not a token manifest (expected a list)");
    for (const auto& e : doc) {
      TokenEntry t;
      t.caption = e.at("caption").get<std::string>();
      t.motion_token_file = e.at("motion_token_file").get<std::string>();
      t.split = e.value("split", "train");
      out.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kInvalidConfig, path.string() + ": " + e.what());
  }
  if (out.empty()) fail(ErrorKind::kEmptyManifest, path.string() + " has no entries");
  return out;
}

// ---- subcommands ----

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, const std::string& out_help) {
  sub->add_option("--config", c.config, "Run config JSON (sections seed, data, tokenizer, quantizer, lm, metrics)");
  sub->add_option("--seed", c.seed, "Top-level seed, overrides the config");
  sub->add_option("--out", c.out, out_help)->required();
}

RunConfig resolve(const Common& c) {
  auto cfg = load_run_config(c.config);
  if (c.seed) cfg.apply_seed(*c.seed);
  return cfg;
}

void need(const fs::path& p) {
  if (!fs::exists(p)) fail(ErrorKind::kIo, "missing input file " + p.string());
}

void emit(const json& j) { std::cout << j.dump() << std::endl; }

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string stem_of(const std::string& rel) { return fs::path(rel).stem().string(); }

bool is_dir_input(const fs::path& p) { return fs::is_directory(p); }

data::Corpus load_corpus(const fs::path& dir) {
  need(dir / "manifest.json");
  return data::read_corpus(dir);
}

std::vector<std::size_t> split_indices(const data::Manifest& m, const std::string& split) {
  if (split == "all") {
    std::vector<std::size_t> all(m.entries.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  require(split == "train" || split == "val" || split == "test", ErrorKind::kUsage,
          "--split must be train, val, test or all");
  return m.indices(split);
}

tok::Tokenizer load_tokenizer(const fs::path& p) {
  need(p);
  return tok::Tokenizer::load(p);
}

lm::MotionLM load_lm(const fs::path& p) {
  need(p);
  return lm::MotionLM::load(p);
}

void check_vocab(const lm::MotionLM& model, const tok::Tokenizer& tk) {
  if (model.vocab().motion_codes() != tk.config().codebook_entries()) {
    fail(ErrorKind::kVocabMismatch, "language model has " + std::to_string(model.vocab().motion_codes()) +
                                        " motion tokens, tokenizer has " +
                                        std::to_string(tk.config().codebook_entries()));
  }
}

Eigen::MatrixXd embeddings(const std::vector<const features::MotionSequence*>& ms) {
  require(!ms.empty(), ErrorKind::kEmptyDataset, "no motions to embed");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(ms.size()), static_cast<Eigen::Index>(ms.front()->width()));
  for (std::size_t i = 0; i < ms.size(); ++i) {
    require(ms[i]->width() == ms.front()->width(), ErrorKind::kDimensionMismatch, "motions differ in feature width");
    const auto e = motion_embedding(*ms[i]);
    for (std::size_t d = 0; d < e.size(); ++d) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = e[d];
  }
  return x;
}

double fid_between(const std::vector<const features::MotionSequence*>& a,
                   const std::vector<const features::MotionSequence*>& b) {
  require(a.size() >= 2 && b.size() >= 2, ErrorKind::kTooFewSamples, "FID needs at least two motions per set");
  return metrics::fid(metrics::fit_gaussian(embeddings(a)), metrics::fit_gaussian(embeddings(b)));
}

std::vector<std::uint64_t> parse_sizes(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorKind::kUsage, "--sizes expects comma-separated integers, got '" + s + "'");
    }
  }
  return out;
}

std::vector<std::string> parse_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string zero_pad(std::size_t i, int width = 5) {
  auto s = std::to_string(i);
  return std::string(s.size() < static_cast<std::size_t>(width) ? width - s.size() : 0, '0') + s;
}

// Generated streams are cut to whole token rows; a stream shorter than one
// row is padded with code 0.
tok::TokenGrid to_grid(std::vector<std::uint32_t> codes, const tok::Tokenizer& tk) {
  const auto cols = tk.token_columns();
  const auto rows = codes.size() / cols;
  codes.resize(std::max<std::size_t>(rows, 1) * cols, 0);
  return {codes.size() / cols, cols, tk.config().codebook_entries(), std::move(codes)};
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"motionbook: motion tokenizer and motion language model toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Common c;
  std::string in, corpus_dir, tokenizer_path, lm_path, tokens_dir, split, text, captions, generated, to_format,
      templates, init, families = "lfq-2d,vq-1d", sizes = "256,1024,4096,16384", motion_emb, text_emb;
  std::optional<std::size_t> count, epochs, batch_size, top_k, max_len, limit;
  std::optional<double> lr, temperature;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus (MOTB files + manifest.json)");
  add_common(gen, c, "Output corpus directory");
  gen->add_option("--count", count, "Number of sequences, overrides data.count");

  auto* convert = app.add_subcommand("convert", "Convert a MOTB file between feature formats");
  convert->add_option("--in", in, "Input MOTB file (SMPL-family format)")->required();
  convert->add_option("--to", to_format, "Target format: smpl-d130, smpl-d135, smpl-d263, smpl-d268, h3d-d263")->required();
  convert->add_option("--out", c.out, "Output MOTB file")->required();

  auto* train_tok = app.add_subcommand("train-tokenizer", "Train a tokenizer on a corpus' train split");
  add_common(train_tok, c, "Output directory (tokenizer.ckpt, report.csv, train_usage.csv, report.json)");
  train_tok->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  train_tok->add_option("--epochs", epochs, "Overrides tokenizer.train.epochs");
  train_tok->add_option("--batch-size", batch_size, "Overrides tokenizer.train.batch_size");
  train_tok->add_option("--lr", lr, "Overrides tokenizer.train.lr");

  auto* encode = app.add_subcommand("encode", "Tokenize a MOTB file or every entry of a corpus");
  encode->add_option("--tokenizer", tokenizer_path, "Tokenizer checkpoint")->required();
  encode->add_option("--in", in, "MOTB file or corpus directory")->required();
  encode->add_option("--out", c.out, "MOTK file, or directory for tokens/ + manifest.json")->required();

  auto* decode = app.add_subcommand("decode", "Detokenize a MOTK file or a token directory");
  decode->add_option("--tokenizer", tokenizer_path, "Tokenizer checkpoint")->required();
  decode->add_option("--in", in, "MOTK file or token directory (manifest.json)")->required();
  decode->add_option("--out", c.out, "MOTB file, or corpus directory for motions/ + manifest.json")->required();

  auto* train_lm = app.add_subcommand("train-lm", "Train the motion language model on a token directory");
  add_common(train_lm, c, "Output directory (lm.ckpt, loss.csv)");
  train_lm->add_option("--tokens", tokens_dir, "Token directory written by encode")->required();
  train_lm->add_option("--split", split, "Split to train on: train (default), val, test or all");
  train_lm->add_option("--templates", templates, "Instruction templates file, overrides lm.templates");
  train_lm->add_option("--init", init, "Continue from this checkpoint (second training stage)");
  train_lm->add_option("--epochs", epochs, "Overrides lm.train.epochs");

  auto* generate = app.add_subcommand("generate", "Generate motion tokens from text");
  add_common(generate, c, "MOTK file (--text) or output token directory (--captions)");
  generate->add_option("--lm", lm_path, "Language model checkpoint")->required();
  generate->add_option("--tokenizer", tokenizer_path, "Tokenizer checkpoint (vocabulary check, row width)")->required();
  generate->add_option("--text", text, "Description to condition on");
  generate->add_option("--captions", captions, "Corpus or token directory whose captions are used as prompts");
  generate->add_option("--split", split, "Split of --captions to use (default test)");
  generate->add_option("--limit", limit, "Use at most this many captions");
  generate->add_option("--templates", templates, "Wrap each caption in the first template of this file");
  generate->add_option("--temperature", temperature, "0 = greedy");
  generate->add_option("--top-k", top_k, "Sample among the k most likely tokens (0 = all)");
  generate->add_option("--max-len", max_len, "Maximum number of motion tokens");

  auto* eval = app.add_subcommand("eval-recon", "Reconstruction MPJPE and FID, or FID of a generated set");
  add_common(eval, c, "Report JSON");
  eval->add_option("--corpus", corpus_dir, "Reference corpus directory")->required();
  eval->add_option("--tokenizer", tokenizer_path, "Tokenizer checkpoint (reconstruction mode)");
  eval->add_option("--generated", generated, "Decoded corpus directory (generation mode)");
  eval->add_option("--split", split, "Reference split, overrides metrics.split");

  auto* retrieval = app.add_subcommand("retrieval-eval", "R-Precision and MMDist from MEMB embedding files");
  retrieval->add_option("--motion", motion_emb, "Motion embeddings (MEMB)")->required();
  retrieval->add_option("--text", text_emb, "Text embeddings (MEMB), row-aligned with --motion")->required();
  retrieval->add_option("--out", c.out, "Report JSON")->required();

  auto* stats = app.add_subcommand("codebook-stats", "Token usage histogram, utilization and perplexity");
  stats->add_option("--out", c.out, "Usage CSV (code,count)")->required();
  stats->add_option("--tokenizer", tokenizer_path, "Tokenizer checkpoint (with --corpus)");
  stats->add_option("--corpus", corpus_dir, "Corpus directory (with --tokenizer)");
  stats->add_option("--tokens", tokens_dir, "Token directory (alternative to --tokenizer/--corpus)");
  stats->add_option("--split", split, "Split to count: train (default), val, test or all");

  auto* sweep = app.add_subcommand("sweep", "Codebook utilization sweep over quantizer families and sizes");
  add_common(sweep, c, "Sweep CSV (family,K,utilization,perplexity,val_mpjpe)");
  sweep->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  sweep->add_option("--families", families, "Comma-separated: lfq-2d, lfq-1d, vq-1d, rvq-1d")->capture_default_str();
  sweep->add_option("--sizes", sizes, "Comma-separated ascending codebook sizes")->capture_default_str();
  sweep->add_option("--epochs", epochs, "Overrides tokenizer.train.epochs");

  auto report_error = [](ErrorKind kind, std::string_view category, const std::string& message) {
    std::cerr << json{{"error", std::string(error_kind_name(kind))}, {"category", category}, {"message", message}}.dump()
              << std::endl;
  };

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) return app.exit(e);
      fail(ErrorKind::kUsage, e.what());
    }
    nn::configure_runtime();
    const fs::path out = c.out;

    if (gen->parsed()) {
      auto cfg = resolve(c);
      if (count) cfg.data.count = *count;
      cfg.data.validate();
      const auto corpus = data::gen_synthetic(cfg.data);
      data::write_corpus(out, corpus);
      emit({{"sequences", corpus.motions.size()},
            {"train", corpus.manifest.indices("train").size()},
            {"val", corpus.manifest.indices("val").size()},
            {"test", corpus.manifest.indices("test").size()}});
    } else if (convert->parsed()) {
      need(in);
      const auto m = data::read_motion(in);
      const auto fmt = features::parse_format(to_format);
      if (!features::is_smpl_family(m.format())) {
        fail(ErrorKind::kUnsupportedFormat,
             std::string(features::format_name(m.format())) + " cannot be decoded to poses; convert from an SMPL format");
      }
      const auto converted = features::encode_format(features::decode_pose_stream(m, Eigen::Vector2d::Zero()), fmt);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      data::write_motion(out, converted);
      emit({{"frames", converted.frames()}, {"width", converted.width()}, {"format", std::string(features::format_name(fmt))}});
    } else if (train_tok->parsed()) {
      auto cfg = resolve(c);
      if (epochs) cfg.tokenizer_train.epochs = *epochs;
      if (batch_size) cfg.tokenizer_train.batch_size = *batch_size;
      if (lr) cfg.tokenizer_train.lr = *lr;
      const auto corpus = load_corpus(corpus_dir);
      auto tcfg = cfg.tokenizer;
      tcfg.format = corpus.manifest.format;
      tok::Tokenizer tk(tcfg, cfg.component_seed("tokenizer"));
      const auto report = tok::train_tokenizer(tk, corpus, cfg.tokenizer_train);
      fs::create_directories(out);
      tk.save(out / "tokenizer.ckpt");
      tok::write_report_csv(out / "report.csv", report);
      quant::write_usage_csv(out / "train_usage.csv", report.train_usage);
      const json summary = {{"epochs", report.epochs.size()},
                            {"final_recon", report.epochs.back().recon},
                            {"train_utilization", report.train_utilization},
                            {"train_perplexity", report.train_perplexity},
                            {"val_mpjpe", std::isfinite(report.val_mpjpe) ? json(report.val_mpjpe) : json(nullptr)}};
      write_json(out / "report.json", summary);
      emit(summary);
    } else if (encode->parsed()) {
      const auto tk = load_tokenizer(tokenizer_path);
      need(in);
      if (is_dir_input(in)) {
        const auto corpus = load_corpus(in);
        fs::create_directories(out / "tokens");
        std::vector<TokenEntry> entries;
        for (std::size_t i = 0; i < corpus.motions.size(); ++i) {
          const auto& e = corpus.manifest.entries[i];
          const auto rel = "tokens/" + stem_of(e.path) + ".motk";
          tok::write_tokens(out / rel, tk.tokenize(corpus.motions[i]));
          entries.push_back({e.caption, rel, e.split});
        }
        write_token_manifest(out / "manifest.json", entries);
        emit({{"sequences", entries.size()}, {"columns", tk.token_columns()}});
      } else {
        const auto grid = tk.tokenize(data::read_motion(in));
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        tok::write_tokens(out, grid);
        emit({{"time", grid.time}, {"columns", grid.columns}, {"tokens", grid.codes.size()}});
      }
    } else if (decode->parsed()) {
      const auto tk = load_tokenizer(tokenizer_path);
      need(in);
      if (is_dir_input(in)) {
        const auto entries = read_token_manifest(fs::path(in) / "manifest.json");
        data::Corpus corpus;
        corpus.manifest.format = tk.config().format;
        for (const auto& e : entries) {
          need(fs::path(in) / e.motion_token_file);
          corpus.motions.push_back(tk.detokenize(tok::read_tokens(fs::path(in) / e.motion_token_file)));
          data::ManifestEntry me;
          me.path = "motions/" + stem_of(e.motion_token_file) + ".motb";
          me.caption = e.caption;
          me.split = e.split;
          corpus.manifest.entries.push_back(me);
        }
        corpus.manifest.validate();
        data::write_corpus(out, corpus);
        emit({{"sequences", corpus.motions.size()}});
      } else {
        const auto m = tk.detokenize(tok::read_tokens(in));
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        data::write_motion(out, m);
        emit({{"frames", m.frames()}, {"width", m.width()}});
      }
    } else if (train_lm->parsed()) {
      auto cfg = resolve(c);
      if (epochs) cfg.lm_train.epochs = *epochs;
      if (!templates.empty()) cfg.templates = templates;
      const fs::path dir = tokens_dir;
      const auto entries = read_token_manifest(dir / "manifest.json");
      const std::string use = split.empty() ? "train" : split;
      std::vector<std::string> tmpl;
      if (!cfg.templates.empty()) {
        need(cfg.templates);
        tmpl = lm::load_templates(cfg.templates);
      }
      Rng pick = Rng(cfg.lm_train.seed).fork("templates");
      std::optional<std::uint64_t> K;
      std::vector<std::pair<std::string, std::vector<std::uint32_t>>> rows;
      for (const auto& e : entries) {
        if (use != "all" && e.split != use) continue;
        need(dir / e.motion_token_file);
        const auto grid = tok::read_tokens(dir / e.motion_token_file);
        if (K && *K != grid.codebook_size) {
          fail(ErrorKind::kVocabMismatch, e.motion_token_file + " uses K=" + std::to_string(grid.codebook_size) +
                                              ", earlier files use K=" + std::to_string(*K));
        }
        K = grid.codebook_size;
        std::string desc = e.caption;
        if (!tmpl.empty()) desc = lm::apply_template(tmpl[static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(tmpl.size()) - 1))], e.caption);
        rows.emplace_back(std::move(desc), grid.codes);
      }
      if (rows.empty()) fail(ErrorKind::kEmptyDataset, "no token files in split '" + use + "'");
      std::optional<lm::MotionLM> model;
      if (!init.empty()) {
        model.emplace(load_lm(init));
        if (model->vocab().motion_codes() != *K) {
          fail(ErrorKind::kVocabMismatch, "checkpoint " + init + " has " + std::to_string(model->vocab().motion_codes()) +
                                              " motion tokens, token files use " + std::to_string(*K));
        }
      } else {
        model.emplace(cfg.lm, lm::Vocab(static_cast<std::uint32_t>(*K)), cfg.component_seed("lm"));
      }
      std::vector<lm::LMExample> examples;
      for (const auto& [desc, codes] : rows) examples.push_back(lm::build_example(model->vocab(), desc, codes));
      const auto curve = lm::train_lm(*model, examples, cfg.lm_train);
      fs::create_directories(out);
      model->save(out / "lm.ckpt");
      lm::write_loss_csv(out / "loss.csv", curve);
      const auto ev = lm::evaluate_lm(*model, examples);
      emit({{"examples", examples.size()}, {"final_loss", curve.back().loss}, {"train_accuracy", ev.accuracy}});
    } else if (generate->parsed()) {
      auto cfg = resolve(c);
      if (temperature) cfg.generate.temperature = *temperature;
      if (top_k) cfg.generate.top_k = *top_k;
      if (max_len) cfg.generate.max_len = *max_len;
      const auto model = load_lm(lm_path);
      const auto tk = load_tokenizer(tokenizer_path);
      check_vocab(model, tk);
      std::string wrap;
      if (!templates.empty()) {
        need(templates);
        wrap = lm::load_templates(templates).front();
      }
      auto prompt = [&](const std::string& caption) { return wrap.empty() ? caption : lm::apply_template(wrap, caption); };
      if (text.empty() == captions.empty()) fail(ErrorKind::kUsage, "generate needs exactly one of --text or --captions");
      if (!text.empty()) {
        const auto codes = lm::generate(model, prompt(text), cfg.generate);
        const auto grid = to_grid(codes, tk);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        tok::write_tokens(out, grid);
        emit({{"generated", codes.size()}, {"time", grid.time}});
      } else {
        const fs::path src = captions;
        need(src / "manifest.json");
        std::ifstream mf(src / "manifest.json");
        json doc;
        try {
          doc = json::parse(mf);
        } catch (const json::exception& e) {
          fail(ErrorKind::kInvalidConfig, (src / "manifest.json").string() + ": " + e.what());
        }
        std::vector<std::pair<std::string, std::string>> caps;  // caption, split
        if (doc.is_array()) {
          for (const auto& e : read_token_manifest(src / "manifest.json")) caps.emplace_back(e.caption, e.split);
        } else {
          for (const auto& e : data::manifest_from_json(doc).entries) caps.emplace_back(e.caption, e.split);
        }
        const std::string use = split.empty() ? "test" : split;
        std::vector<TokenEntry> entries;
        fs::create_directories(out / "tokens");
        std::size_t i = 0;
        for (const auto& [caption, s] : caps) {
          if (use != "all" && s != use) continue;
          if (limit && entries.size() >= *limit) break;
          auto params = cfg.generate;
          params.seed = Rng(cfg.generate.seed).fork(i++).seed();
          const auto grid = to_grid(lm::generate(model, prompt(caption), params), tk);
          const auto rel = "tokens/gen_" + zero_pad(entries.size()) + ".motk";
          tok::write_tokens(out / rel, grid);
          entries.push_back({caption, rel, s});
        }
        if (entries.empty()) fail(ErrorKind::kEmptyDataset, "no captions in split '" + use + "'");
        write_token_manifest(out / "manifest.json", entries);
        emit({{"sequences", entries.size()}});
      }
    } else if (eval->parsed()) {
      auto cfg = resolve(c);
      const std::string use = split.empty() ? cfg.eval_split : split;
      const auto corpus = load_corpus(corpus_dir);
      const auto idx = split_indices(corpus.manifest, use);
      if (idx.empty()) fail(ErrorKind::kEmptyDataset, "split '" + use + "' of " + corpus_dir + " is empty");
      std::vector<const features::MotionSequence*> ref;
      for (auto i : idx) ref.push_back(&corpus.motions[i]);
      json report;
      if (!generated.empty()) {
        const auto gen_corpus = load_corpus(generated);
        std::vector<const features::MotionSequence*> gen_set;
        for (const auto& m : gen_corpus.motions) gen_set.push_back(&m);
        report = {{"mode", "generated"},
                  {"reference", ref.size()},
                  {"generated", gen_set.size()},
                  {"fid", fid_between(gen_set, ref)}};
      } else {
        if (tokenizer_path.empty()) fail(ErrorKind::kUsage, "eval-recon needs --tokenizer or --generated");
        const auto tk = load_tokenizer(tokenizer_path);
        std::vector<features::MotionSequence> recon;
        for (const auto* m : ref) recon.push_back(tk.detokenize(tk.tokenize(*m), m->fps()));
        std::vector<const features::MotionSequence*> rec;
        for (const auto& m : recon) rec.push_back(&m);
        report = {{"mode", "reconstruction"},
                  {"split", use},
                  {"sequences", ref.size()},
                  {"mpjpe_mm", tok::reconstruction_mpjpe(tk, corpus, idx)},
                  {"fid", fid_between(rec, ref)}};
      }
      write_json(out, report);
      emit(report);
    } else if (retrieval->parsed()) {
      need(motion_emb);
      need(text_emb);
      const Eigen::MatrixXd m = metrics::read_embeddings(motion_emb).cast<double>();
      const Eigen::MatrixXd t = metrics::read_embeddings(text_emb).cast<double>();
      const auto r = metrics::retrieval_metrics(metrics::make_retrieval_batches(m, t));
      const json report = {{"r1", r.r1}, {"r2", r.r2}, {"r3", r.r3}, {"mm_dist", r.mm_dist}, {"batches", r.batches}};
      write_json(out, report);
      emit(report);
    } else if (stats->parsed()) {
      const std::string use = split.empty() ? "train" : split;
      quant::Histogram hist;
      if (!tokens_dir.empty()) {
        const fs::path dir = tokens_dir;
        for (const auto& e : read_token_manifest(dir / "manifest.json")) {
          if (use != "all" && e.split != use) continue;
          need(dir / e.motion_token_file);
          const auto g = tok::read_tokens(dir / e.motion_token_file);
          if (hist.empty()) hist.assign(g.codebook_size, 0);
          if (hist.size() != g.codebook_size) fail(ErrorKind::kVocabMismatch, "token files disagree on K");
          for (auto code : g.codes) ++hist[code];
        }
      } else {
        if (tokenizer_path.empty() || corpus_dir.empty()) {
          fail(ErrorKind::kUsage, "codebook-stats needs --tokens, or --tokenizer with --corpus");
        }
        const auto tk = load_tokenizer(tokenizer_path);
        const auto corpus = load_corpus(corpus_dir);
        hist = tok::token_usage(tk, corpus, split_indices(corpus.manifest, use));
      }
      const auto s = quant::codebook_stats(hist);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      quant::write_usage_csv(out, hist);
      emit({{"codebook_size", hist.size()}, {"utilization", s.utilization}, {"perplexity", s.perplexity}});
    } else if (sweep->parsed()) {
      auto cfg = resolve(c);
      if (epochs) cfg.tokenizer_train.epochs = *epochs;
      const auto corpus = load_corpus(corpus_dir);
      auto base = cfg.tokenizer;
      base.format = corpus.manifest.format;
      const auto rows = tok::utilization_sweep(corpus, parse_list(families), parse_sizes(sizes), base, cfg.tokenizer_train);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      tok::write_sweep_csv(out, rows);
      json j = json::array();
      for (const auto& r : rows) {
        j.push_back({{"family", r.family}, {"K", r.codebook_size}, {"utilization", r.utilization}, {"perplexity", r.perplexity}});
      }
      emit(j);
    }
    return 0;
  } catch (const Error& e) {
    const auto cat = e.category();
    report_error(e.kind(), cat == ErrorCategory::kUsage ? "usage" : cat == ErrorCategory::kData ? "data" : "numerical", e.what());
    return cat == ErrorCategory::kUsage ? 1 : cat == ErrorCategory::kData ? 2 : 3;
  } catch (const fs::filesystem_error& e) {
    report_error(ErrorKind::kIo, "data", e.what());
    return 2;
  } catch (const json::exception& e) {
    report_error(ErrorKind::kInvalidConfig, "usage", e.what());
    return 1;
  } catch (const std::bad_alloc&) {
    report_error(ErrorKind::kIo, "data", "out of memory");
    return 2;
  }
}

}  // namespace motionbook::cli
