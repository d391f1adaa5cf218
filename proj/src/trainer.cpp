#include "twopass/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "twopass/error.hpp"
#include "twopass/io.hpp"

namespace twopass {

template <typename T>
void adam_step(ParameterList<T>& params, AdamState<T>& state, double lr, const AdamConfig& cfg,
               double clip_norm) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), T(0));
      state.v.emplace_back(p.tensor.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state has " + std::to_string(state.m.size()) +
                     " slots for " + std::to_string(params.size()) + " parameters");
  }
  double sq = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.tensor.numel() != state.m[i].size() || p.tensor.numel() != state.v[i].size()) {
      throw ShapeError("adam_step: state shape mismatch for " + p.name);
    }
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter " + p.name);
      }
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  double factor = 1.0;
  if (clip_norm > 0 && std::sqrt(sq) > clip_norm) factor = clip_norm / std::sqrt(sq);

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].tensor.values();
    auto grad = params[i].tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = static_cast<double>(grad[j]) * factor;
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * g;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / c1;
      const double vhat = vj / c2;
      theta[j] = static_cast<T>(static_cast<double>(theta[j]) -
                                lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

double LrSchedule::at(std::uint64_t step) const {
  if (kind == Kind::constant) return lr;
  const double s = static_cast<double>(step + 1);
  if (warmup == 0) return lr / std::sqrt(s);
  const double w = static_cast<double>(warmup);
  return lr * std::min(s / w, std::sqrt(w / s));
}

void TrainConfig::validate(std::size_t max_len) const {
  if (batch_tokens < max_len) {
    throw UsageError("train: batch_tokens " + std::to_string(batch_tokens) +
                     " is below max_len " + std::to_string(max_len));
  }
  if (max_steps == 0) throw UsageError("train: max_steps must be positive");
  if (!(schedule.lr >= 0)) throw UsageError("train: lr must be non-negative");
  if (clip_norm < 0) throw UsageError("train: clip_norm must be non-negative");
}

std::string TrainConfig::serialize() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "schedule=%s\nlr=%.17g\nwarmup=%zu\nbeta1=%.17g\nbeta2=%.17g\neps=%.17g\n"
                "batch_tokens=%zu\nmax_steps=%llu\nseed=%llu\neval_every=%llu\nclip_norm=%.17g\n"
                "eval_sentences=%zu\nstop_below=%.17g\n",
                schedule.kind == LrSchedule::Kind::constant ? "constant" : "inverse_sqrt",
                schedule.lr, schedule.warmup, adam.beta1, adam.beta2, adam.eps, batch_tokens,
                static_cast<unsigned long long>(max_steps), static_cast<unsigned long long>(seed),
                static_cast<unsigned long long>(eval_every), clip_norm, eval_sentences, stop_below);
  return buf;
}

std::filesystem::path checkpoint_dir_from_env() {
  const char* dir = std::getenv("TWOPASS_CHECKPOINT_DIR");
  return dir ? std::filesystem::path(dir) : std::filesystem::path();
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const TemplatedSentence> data,
                                                   std::size_t batch_tokens, std::uint64_t seed,
                                                   std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data[a].source_len() < data[b].source_len();
  });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  for (std::size_t idx : order) {
    const std::size_t len = data[idx].source_len();  // sorted: the longest so far
    if (!cur.empty() && (cur.size() + 1) * len > batch_tokens) {
      batches.push_back(std::move(cur));
      cur.clear();
    }
    cur.push_back(idx);
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

Batch gather_batch(std::span<const TemplatedSentence> data, std::span<const std::size_t> indices) {
  std::vector<TemplatedSentence> picked;
  picked.reserve(indices.size());
  for (std::size_t i : indices) picked.push_back(data[i]);
  return make_batch(picked);
}

std::string format_log(std::span<const LogRow> rows) {
  std::string out = "step,train_loss,valid_loss,lr,wall_ms\n";
  char buf[192];
  for (const auto& r : rows) {
    char valid[48] = "";
    if (r.valid_loss) std::snprintf(valid, sizeof valid, "%.9g", *r.valid_loss);
    std::snprintf(buf, sizeof buf, "%llu,%.9g,%s,%.9g,%.1f\n",
                  static_cast<unsigned long long>(r.step), r.train_loss, valid, r.lr, r.wall_ms);
    out += buf;
  }
  return out;
}

template <typename T>
double corpus_loss(const LanguageModel<T>& model, std::span<const TemplatedSentence> data,
                   std::size_t batch_tokens) {
  if (data.empty()) throw DataError("corpus_loss: no sentences");
  // Batches in length order; per-sentence sums are independent of grouping.
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data[a].source_len() < data[b].source_len();
  });
  double nll = 0;
  std::size_t tokens = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::vector<std::size_t> group;
    while (i < order.size()) {
      const std::size_t len = data[order[i]].source_len();
      if (!group.empty() && (group.size() + 1) * len > batch_tokens) break;
      group.push_back(order[i++]);
    }
    Tape<T> tape(false);
    const Batch b = gather_batch(data, group);
    const auto r = model.forward(tape, b);
    for (std::size_t g = 0; g < group.size(); ++g) nll -= r.logp1[g] + r.logp2[g];
    tokens += b.tokens;
  }
  return nll / static_cast<double>(tokens);
}

template <typename T>
Trainer<T>::Trainer(LanguageModel<T>& model, TrainConfig cfg, const Vocab* vocab)
    : model_(model), cfg_(std::move(cfg)), vocab_(vocab), rng_(cfg_.seed ^ 0x9e3779b97f4a7c15ULL) {
  cfg_.validate(model_.config().max_len);
  if (!cfg_.checkpoint_dir.empty() && vocab_ == nullptr) {
    throw UsageError("train: checkpointing needs the vocabulary");
  }
}

template <typename T>
double Trainer<T>::validate(std::span<const TemplatedSentence> valid) const {
  if (cfg_.eval_sentences > 0 && cfg_.eval_sentences < valid.size()) {
    valid = valid.first(cfg_.eval_sentences);
  }
  return corpus_loss(model_, valid, cfg_.batch_tokens);
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  if (vocab_ == nullptr) throw UsageError("checkpoint: trainer has no vocabulary");
  Checkpoint c = make_checkpoint(model_, *vocab_);
  c.header["step"] = std::to_string(step_);
  c.header["epoch"] = std::to_string(epoch_);
  c.header["cursor"] = std::to_string(cursor_);
  c.header["adam_step"] = std::to_string(adam_.step);
  std::ostringstream rng;
  rng << rng_;
  c.header["rng"] = rng.str();
  if (has_best_) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", best_valid_);
    c.header["best_valid_loss"] = buf;
    c.header["best_step"] = std::to_string(best_step_);
  }
  std::istringstream train(cfg_.serialize());
  for (std::string l; std::getline(train, l);) {
    const auto eq = l.find('=');
    c.header["train." + l.substr(0, eq)] = l.substr(eq + 1);
  }
  const auto& params = model_.parameters();
  for (std::size_t i = 0; i < adam_.m.size(); ++i) {
    c.adam_m.push_back(to_blob<T>(params[i].name, adam_.m[i], params[i].tensor.shape()));
    c.adam_v.push_back(to_blob<T>(params[i].name, adam_.v[i], params[i].tensor.shape()));
  }
  return c;
}

template <typename T>
void Trainer<T>::resume(const Checkpoint& c) {
  restore_parameters(model_, c);
  step_ = c.get_u64("step");
  epoch_ = c.get_u64("epoch");
  cursor_ = c.get_u64("cursor");
  adam_ = {};
  adam_.step = c.get_u64("adam_step");
  for (const auto& b : c.adam_m) adam_.m.push_back(from_blob<T>(b));
  for (const auto& b : c.adam_v) adam_.v.push_back(from_blob<T>(b));
  std::istringstream rng(c.get("rng"));
  rng >> rng_;
  has_best_ = c.has("best_valid_loss");
  if (has_best_) {
    best_valid_ = c.get_double("best_valid_loss");
    best_step_ = c.get_u64("best_step");
  }
  best_params_.clear();
}

template <typename T>
void Trainer<T>::save(const std::string& name) const {
  if (cfg_.checkpoint_dir.empty()) return;
  std::filesystem::create_directories(cfg_.checkpoint_dir);
  save_checkpoint(cfg_.checkpoint_dir / name, checkpoint());
}

template <typename T>
TrainResult Trainer<T>::run(std::span<const TemplatedSentence> train,
                            std::span<const TemplatedSentence> valid) {
  if (train.empty()) throw DataError("train: no training sentences");
  if (valid.empty()) valid = train;
  auto& params = model_.parameters();
  const auto start = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
        .count();
  };
  auto snapshot_best = [&] {
    best_params_.clear();
    for (const auto& p : params) best_params_.emplace_back(p.tensor.values().begin(),
                                                           p.tensor.values().end());
  };

  TrainResult result;
  auto plan = make_batches(train, cfg_.batch_tokens, cfg_.seed, epoch_);
  const RunContext ctx{model_.config().dropout, &rng_};
  while (step_ < cfg_.max_steps) {
    if (cursor_ >= plan.size()) {
      ++epoch_;
      cursor_ = 0;
      plan = make_batches(train, cfg_.batch_tokens, cfg_.seed, epoch_);
    }
    const Batch batch = gather_batch(train, plan[cursor_]);
    const double lr = cfg_.schedule.at(step_);
    LogRow row;
    row.step = step_;
    row.lr = lr;
    try {
      for (auto& p : params) p.tensor.zero_grad();
      Tape<T> tape;
      auto r = model_.forward(tape, batch, ctx);
      row.train_loss = static_cast<double>(r.loss.item());
      if (!std::isfinite(row.train_loss)) {
        throw NumericError("non-finite training loss at step " + std::to_string(step_));
      }
      tape.backward(r.loss);
      adam_step(params, adam_, lr, cfg_.adam, cfg_.clip_norm);
    } catch (const NumericError& e) {
      spdlog::error("{}; saving last good state", e.what());
      save("last_good.ckpt");
      throw;
    }
    ++step_;
    ++cursor_;
    const bool eval_now =
        step_ == cfg_.max_steps || (cfg_.eval_every > 0 && step_ % cfg_.eval_every == 0);
    if (eval_now) {
      const double v = validate(valid);
      row.valid_loss = v;
      if (!has_best_ || v < best_valid_) {
        has_best_ = true;
        best_valid_ = v;
        best_step_ = step_;
        snapshot_best();
        save("best.ckpt");
      }
      save("latest.ckpt");
      spdlog::debug("step {} train {:.4f} valid {:.4f} lr {:.2e}", step_, row.train_loss, v, lr);
    }
    row.wall_ms = elapsed_ms();
    result.log.push_back(row);
    if (row.valid_loss && *row.valid_loss < cfg_.stop_below) break;
  }

  if (!best_params_.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::copy(best_params_[i].begin(), best_params_[i].end(), params[i].tensor.values().begin());
    }
  } else if (has_best_ && !cfg_.checkpoint_dir.empty() &&
             std::filesystem::exists(cfg_.checkpoint_dir / "best.ckpt")) {
    restore_parameters(model_, load_checkpoint(cfg_.checkpoint_dir / "best.ckpt"));
  }
  result.best_valid_loss = best_valid_;
  result.best_step = best_step_;
  result.steps = step_;
  return result;
}

template void adam_step<float>(ParameterList<float>&, AdamState<float>&, double,
                               const AdamConfig&, double);
template void adam_step<double>(ParameterList<double>&, AdamState<double>&, double,
                                const AdamConfig&, double);
template double corpus_loss<float>(const LanguageModel<float>&, std::span<const TemplatedSentence>,
                                   std::size_t);
template double corpus_loss<double>(const LanguageModel<double>&,
                                    std::span<const TemplatedSentence>, std::size_t);
template class Trainer<float>;
template class Trainer<double>;

}  // namespace twopass
