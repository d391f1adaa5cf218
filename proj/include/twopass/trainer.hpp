#pragma once

// ADAM training with token-count batching, validation tracking,
// checkpointing and exact resume.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "twopass/checkpoint.hpp"
#include "twopass/model.hpp"
#include "twopass/template.hpp"

namespace twopass {

struct AdamConfig {
  double beta1 = 0.85;
  double beta2 = 0.997;
  double eps = 1e-6;
};

template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// One bias-corrected ADAM update from the gradient buffers of `params`.
/// Throws NumericError naming the first parameter with a non-finite
/// gradient; nothing is modified in that case. A positive clip_norm rescales
/// the global gradient norm down to it first.
template <typename T>
void adam_step(ParameterList<T>& params, AdamState<T>& state, double lr,
               const AdamConfig& cfg = {}, double clip_norm = 0.0);

struct LrSchedule {
  enum class Kind { constant, inverse_sqrt };
  Kind kind = Kind::inverse_sqrt;
  double lr = 1e-3;
  std::size_t warmup = 400;

  /// Rate for 0-based step `step`. inverse_sqrt rises linearly to `lr` over
  /// `warmup` steps and then decays as lr·√(warmup/s), with s = step + 1.
  double at(std::uint64_t step) const;
};

struct TrainConfig {
  LrSchedule schedule;
  AdamConfig adam;
  std::size_t batch_tokens = 4096;  // padded tokens per batch
  std::uint64_t max_steps = 1000;
  std::uint64_t seed = 1;
  std::uint64_t eval_every = 100;   // 0: only at the end
  double clip_norm = 0.0;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  /// Validation sentences scored per evaluation; 0 means all.
  std::size_t eval_sentences = 0;
  /// Stops after the first validation whose loss falls below this; 0 = off.
  double stop_below = 0.0;

  void validate(std::size_t max_len) const;
  std::string serialize() const;
};

/// Checkpoint directory from TWOPASS_CHECKPOINT_DIR, if set.
std::filesystem::path checkpoint_dir_from_env();

/// Sentence indices grouped into batches for one epoch: shuffle under
/// (seed, epoch), stable-sort by length, cut where count × longest would
/// exceed batch_tokens, then shuffle the batch order.
std::vector<std::vector<std::size_t>> make_batches(std::span<const TemplatedSentence> data,
                                                   std::size_t batch_tokens, std::uint64_t seed,
                                                   std::uint64_t epoch = 0);

Batch gather_batch(std::span<const TemplatedSentence> data, std::span<const std::size_t> indices);

struct LogRow {
  std::uint64_t step = 0;
  double train_loss = 0;
  std::optional<double> valid_loss;
  double lr = 0;
  double wall_ms = 0;
};

/// `step,train_loss,valid_loss,lr,wall_ms` with a header line.
std::string format_log(std::span<const LogRow> rows);

struct TrainResult {
  std::vector<LogRow> log;
  double best_valid_loss = 0;
  std::uint64_t best_step = 0;
  std::uint64_t steps = 0;
};

/// Corpus-level loss: Σ NLL / Σ lengths, in nats per token.
template <typename T>
double corpus_loss(const LanguageModel<T>& model, std::span<const TemplatedSentence> data,
                   std::size_t batch_tokens = 4096);

template <typename T>
class Trainer {
 public:
  Trainer(LanguageModel<T>& model, TrainConfig cfg, const Vocab* vocab = nullptr);

  /// Trains until max_steps. The model ends holding the parameters with the
  /// best validation loss. On a non-finite loss or gradient the current
  /// (last good) state is checkpointed as last_good.ckpt and NumericError
  /// is rethrown.
  TrainResult run(std::span<const TemplatedSentence> train,
                  std::span<const TemplatedSentence> valid);

  /// Restores parameters, optimizer state, data cursor and rng.
  void resume(const Checkpoint& c);
  Checkpoint checkpoint() const;

  std::uint64_t step() const { return step_; }
  const AdamState<T>& adam() const { return adam_; }

 private:
  void save(const std::string& name) const;
  double validate(std::span<const TemplatedSentence> valid) const;

  LanguageModel<T>& model_;
  TrainConfig cfg_;
  const Vocab* vocab_;
  AdamState<T> adam_;
  std::uint64_t step_ = 0;
  std::uint64_t epoch_ = 0;
  std::uint64_t cursor_ = 0;  // batches consumed in the current epoch
  std::mt19937_64 rng_;       // dropout
  double best_valid_ = 0;
  std::uint64_t best_step_ = 0;
  bool has_best_ = false;
  std::vector<std::vector<T>> best_params_;
};

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace twopass
