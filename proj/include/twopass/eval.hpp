#pragma once

// Perplexity, parameter-matched baselines and the strategy comparison.

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "twopass/model.hpp"
#include "twopass/trainer.hpp"

namespace twopass {

/// exp(Σ sentence NLL / Σ sentence lengths), lengths counting EOS.
/// Throws DataError on an empty set.
template <typename T>
double corpus_perplexity(const LanguageModel<T>& model, std::span<const Sentence> data,
                         std::size_t batch_tokens = 4096);

struct BaselineMatch {
  std::size_t hidden = 0;
  std::size_t two_pass_params = 0;
  std::size_t baseline_params = 0;
  double relative_gap = 0;  // (baseline − two_pass) / two_pass
};

/// Smallest hidden size, a multiple of lcm(heads, 2), whose single-pass
/// parameter count reaches the two-pass total. Filter, heads and layers are
/// kept; only the hidden size grows.
BaselineMatch match_baseline(const ModelConfig& two_pass_cfg);

/// Published LM1B perplexities (65,536-word vocabulary, base-size models).
/// Shown next to desk-scale results for orientation only.
struct ReferenceRow {
  std::string_view name;
  double train, valid, test;
};
std::span<const ReferenceRow> reference_perplexities();

struct PerplexityRow {
  std::string name;  // "odd first", ..., "baseline", "enhanced baseline"
  bool failed = false;
  std::string error;
  double train = 0, valid = 0, test = 0;
  double lr = 0;
  std::size_t hidden = 0;
  std::size_t parameters = 0;
  std::vector<LogRow> curve;  // of the selected lr
};

struct PerplexityReport {
  std::vector<PerplexityRow> rows;  // worst to best on validation, failures first
  std::vector<std::string> conventions;
  std::string config_hash;
  std::string header;  // effective configuration, version

  std::string to_text() const;
  std::string to_csv() const;
  std::string curves_svg() const;
};

/// Sorts rows worst-to-best by validation perplexity, failed rows first.
void sort_rows(std::vector<PerplexityRow>& rows);

struct ExperimentSpec {
  std::filesystem::path train_path;
  std::filesystem::path test_path;
  std::filesystem::path vocab_path;    // optional; built from train_path when empty
  std::filesystem::path lexicon_path;  // needed by function/content first
  std::size_t max_vocab = 2000;
  std::size_t max_len = 64;
  std::size_t valid_every = 6;  // every sixth training sentence is held out

  ModelConfig model;  // vocab_size filled in from the vocabulary
  SupportMode support = SupportMode::full;
  Precision precision = Precision::f32;
  TrainConfig train;
  std::vector<double> lr_grid = {1e-3, 3e-4, 1e-4};
  /// Training sentences scored for the train column; 0 means all.
  std::size_t eval_train_sentences = 0;
  /// Run names: the five strategies, "baseline", "enhanced_baseline".
  std::vector<std::string> runs;
  /// Per-run overrides from [run.<name>] sections, as raw key/value pairs.
  std::map<std::string, std::map<std::string, std::string>> overrides;

  /// Reads an INI file. Relative paths resolve against the file's directory.
  static ExperimentSpec load(const std::filesystem::path& path);
  static ExperimentSpec parse(std::istream& in, const std::filesystem::path& base_dir = {});
  /// Canonical key=value text; its CRC-32 is the report's config hash.
  std::string canonical() const;
};

/// Applies one `key = value` setting to model/train fields. Returns false for
/// unknown keys.
bool apply_setting(ModelConfig& model, TrainConfig& train, SupportMode& support,
                   const std::string& key, const std::string& value);

/// Trains every requested run over the lr grid, keeps the best validation
/// run per model, scores train/valid/test and writes report.csv,
/// report.txt and curves.svg into out_dir.
PerplexityReport run_comparison(const ExperimentSpec& spec, const std::filesystem::path& out_dir);

}  // namespace twopass
