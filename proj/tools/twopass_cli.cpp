// Command-line front end: vocabulary, partitions, training, scoring,
// comparison, sampling and the enumeration oracle.
//
// Exit status: 0 success, 1 usage error, 2 data error, 3 numeric abort.

#include <omp.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "twopass/checkpoint.hpp"
#include "twopass/corpus.hpp"
#include "twopass/error.hpp"
#include "twopass/eval.hpp"
#include "twopass/io.hpp"
#include "twopass/model.hpp"
#include "twopass/oracle.hpp"
#include "twopass/partition.hpp"
#include "twopass/template.hpp"
#include "twopass/trainer.hpp"

namespace fs = std::filesystem;
using namespace twopass;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// Effective configuration and version, written next to each artifact.
void write_run_record(const fs::path& artifact, const CLI::App& cmd) {
  std::string text = "# " + std::string(cmd.get_name()) + " " + std::string(version_string()) +
                     "\n" + cmd.config_to_str(true, false);
  write_atomic(fs::path(artifact.string() + ".cfg"), text);
  spdlog::info("effective configuration:\n{}", text);
}

struct ModelFlags {
  std::string kind = "two_pass";
  std::size_t hidden = 64, filter = 256, heads = 2, layers = 2, max_len = 64;
  double dropout = 0.0;
  std::string support = "full";
  std::string precision = "f32";
  bool enhanced = false;
  bool renormalize = false;

  void add(CLI::App* app) {
    app->add_option("--model", kind, "two_pass or baseline")
        ->check(CLI::IsMember({"two_pass", "baseline"}))
        ->capture_default_str();
    app->add_option("--hidden", hidden, "hidden size")->capture_default_str();
    app->add_option("--filter", filter, "feed-forward inner size")->capture_default_str();
    app->add_option("--heads", heads, "attention heads")->capture_default_str();
    app->add_option("--layers", layers, "layers per stack")->capture_default_str();
    app->add_option("--max-len", max_len, "maximum sentence length, EOS included")
        ->capture_default_str();
    app->add_option("--dropout", dropout, "dropout rate")->capture_default_str();
    app->add_option("--support", support, "softmax support: full or renormalized")
        ->check(CLI::IsMember({"full", "renormalized"}))
        ->capture_default_str();
    app->add_option("--precision", precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    app->add_flag("--renormalize-support", renormalize, "same as --support renormalized");
    app->add_flag("--enhanced", enhanced,
                  "baseline only: widen hidden until parameters match the two-pass model");
  }

  ModelConfig config(std::size_t vocab_size) const {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.hidden = hidden;
    c.filter = filter;
    c.heads = heads;
    c.layers = layers;
    c.max_len = max_len;
    c.dropout = dropout;
    if (enhanced) {
      if (kind != "baseline") throw UsageError("--enhanced applies to --model baseline only");
      c.hidden = match_baseline(c).hidden;
    }
    return c;
  }
};

struct TrainFlags {
  double lr = 1e-3;
  std::string schedule = "inverse_sqrt";
  std::size_t warmup = 400;
  std::size_t batch_tokens = 4096;
  std::uint64_t max_steps = 1000;
  std::uint64_t seed = 1;
  std::uint64_t eval_every = 100;
  double clip_norm = 0.0;
  double beta1 = 0.85, beta2 = 0.997, eps = 1e-6;
  std::size_t eval_sentences = 0;
  double stop_below = 0.0;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "peak learning rate")->capture_default_str();
    app->add_option("--schedule", schedule, "constant or inverse_sqrt")
        ->check(CLI::IsMember({"constant", "inverse_sqrt"}))
        ->capture_default_str();
    app->add_option("--warmup", warmup, "warmup steps")->capture_default_str();
    app->add_option("--batch-tokens", batch_tokens, "padded tokens per batch")
        ->capture_default_str();
    app->add_option("--max-steps", max_steps, "optimizer steps")->capture_default_str();
    app->add_option("--seed", seed, "random seed")->capture_default_str();
    app->add_option("--eval-every", eval_every, "steps between validations")
        ->capture_default_str();
    app->add_option("--clip-norm", clip_norm, "global gradient norm clip, 0 = off")
        ->capture_default_str();
    app->add_option("--beta1", beta1)->capture_default_str();
    app->add_option("--beta2", beta2)->capture_default_str();
    app->add_option("--eps", eps)->capture_default_str();
    app->add_option("--eval-sentences", eval_sentences,
                    "validation sentences per evaluation, 0 = all")
        ->capture_default_str();
    app->add_option("--stop-below", stop_below, "stop once validation loss is below this, 0 = off")
        ->capture_default_str();
  }

  TrainConfig config() const {
    TrainConfig c;
    c.schedule.lr = lr;
    c.schedule.kind =
        schedule == "constant" ? LrSchedule::Kind::constant : LrSchedule::Kind::inverse_sqrt;
    c.schedule.warmup = warmup;
    c.batch_tokens = batch_tokens;
    c.max_steps = max_steps;
    c.seed = seed;
    c.eval_every = eval_every;
    c.clip_norm = clip_norm;
    c.adam = {beta1, beta2, eps};
    c.eval_sentences = eval_sentences;
    c.stop_below = stop_below;
    return c;
  }
};

std::vector<Sentence> read_corpus(const fs::path& path, const Vocab& vocab, std::size_t max_len) {
  EncodeOptions eo;
  eo.max_len = max_len;
  eo.lowercase = vocab.meta().lowercase;
  auto loaded = load_sentences(path, vocab, eo);
  return std::move(loaded.sentences);
}

template <typename T>
void train_impl(const ModelFlags& mf, const TrainFlags& tf, const Vocab& vocab,
                const std::string& partition_path, const fs::path& train_path,
                const std::string& valid_path, const fs::path& out_dir,
                const std::string& resume_path) {
  const auto sentences = read_corpus(train_path, vocab, mf.max_len);
  DatasetSplit split;
  if (valid_path.empty()) {
    split = split_train_valid(sentences, 6);
  } else {
    split.train = sentences;
    split.valid = read_corpus(valid_path, vocab, mf.max_len);
  }
  std::unique_ptr<LanguageModel<T>> model;
  TrainConfig tc = tf.config();
  tc.checkpoint_dir = out_dir;
  std::optional<Checkpoint> resume;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    model = model_from_checkpoint<T>(*resume, vocab);
  } else {
    VocabPartition partition;
    if (mf.kind == "two_pass") {
      if (partition_path.empty()) throw UsageError("train: --partition is required for two_pass");
      partition = VocabPartition::load(partition_path, vocab);
    }
    const SupportMode support =
        mf.renormalize ? SupportMode::renormalized : parse_support_mode(mf.support);
    model = make_model<T>(mf.kind, mf.config(vocab.size()), partition, support, tf.seed);
  }
  spdlog::info("{} model, {} parameters, partition {}", model->kind(), model->parameter_count(),
               to_string(model->partition().strategy()));
  const auto train = split_all(split.train, model->partition());
  const auto valid = split_all(split.valid, model->partition());
  Trainer<T> trainer(*model, tc, &vocab);
  if (resume) trainer.resume(*resume);
  const auto result = trainer.run(train, valid);
  write_atomic(out_dir / "train_log.csv", format_log(result.log));
  Checkpoint final_ckpt = make_checkpoint(*model, vocab);
  final_ckpt.header["best_step"] = std::to_string(result.best_step);
  save_checkpoint(out_dir / "model.ckpt", final_ckpt);
  std::printf("best validation loss %.6f nats/token at step %llu (perplexity %.4f)\n",
              result.best_valid_loss, static_cast<unsigned long long>(result.best_step),
              std::exp(result.best_valid_loss));
}

template <typename T>
void evaluate_impl(const Checkpoint& ckpt, const Vocab& vocab, const fs::path& corpus,
                   const std::string& scores_path, std::size_t batch_tokens) {
  auto model = model_from_checkpoint<T>(ckpt, vocab);
  const auto sentences = read_corpus(corpus, vocab, model->config().max_len);
  const auto scores = score_sentences(*model, std::span<const Sentence>(sentences), batch_tokens);
  double nll = 0;
  std::size_t tokens = 0;
  for (const auto& s : scores) {
    nll -= s.logp1 + s.logp2;
    tokens += s.source_len;
  }
  if (tokens == 0) throw DataError("evaluate: no sentences in " + corpus.string());
  if (!scores_path.empty()) write_atomic(scores_path, format_scores(scores));
  std::printf("sentences %zu\ntokens %zu (EOS included)\nloss %.6f nats/token\nperplexity %.4f\n"
              "support %s\n",
              scores.size(), tokens, nll / static_cast<double>(tokens),
              std::exp(nll / static_cast<double>(tokens)), std::string(to_string(model->support())).c_str());
}

template <typename T>
void sample_impl(const Checkpoint& ckpt, const Vocab& vocab, std::size_t count,
                 std::uint64_t seed, std::size_t max_len, const std::string& out_path) {
  auto model = model_from_checkpoint<T>(ckpt, vocab);
  Sampler<T> sampler(*model, max_len == 0 ? model->config().max_len : max_len);
  std::mt19937_64 rng(seed);
  std::string out;
  for (std::size_t i = 0; i < count; ++i) out += describe_sample(sampler.draw(rng), vocab) + "\n";
  if (out_path.empty()) {
    std::fputs(out.c_str(), stdout);
  } else {
    write_atomic(out_path, out);
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Two-pass language model toolkit"};
  app.set_version_flag("--version", std::string(version_string()));
  app.set_config("--config", "", "key=value configuration file ([subcommand] sections)");
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error")
      ->capture_default_str();

  // build-vocab
  auto* bv = app.add_subcommand("build-vocab", "count a training corpus into vocab.txt");
  fs::path bv_corpus, bv_out = "vocab.txt";
  VocabOptions bv_opts;
  bool bv_keep_case = false;
  bv->add_option("--corpus", bv_corpus, "one sentence per line")->required();
  bv->add_option("--out", bv_out, "output vocab.txt (vocab.meta written alongside)")
      ->capture_default_str();
  bv->add_option("--max-vocab", bv_opts.max_vocab, "ordinary tokens kept")->capture_default_str();
  bv->add_option("--max-len", bv_opts.max_len, "longest sentence kept, EOS included")
      ->capture_default_str();
  bv->add_flag("--keep-case", bv_keep_case, "do not lowercase");

  // make-lexicon-check
  auto* lc = app.add_subcommand("make-lexicon-check",
                                "validate a POS lexicon against a vocabulary");
  fs::path lc_lexicon, lc_vocab;
  std::size_t lc_top = 200;
  lc->add_option("--lexicon", lc_lexicon, "token<TAB>tag file")->required();
  lc->add_option("--vocab", lc_vocab, "vocab.txt")->required();
  lc->add_option("--top", lc_top, "report untagged tokens among the N most frequent")
      ->capture_default_str();

  // partition
  auto* pa = app.add_subcommand("partition", "split the vocabulary into two passes");
  std::string pa_strategy;
  fs::path pa_vocab, pa_lexicon, pa_train, pa_out = "partition.txt";
  std::optional<std::size_t> pa_cutoff;
  pa->add_option("--strategy", pa_strategy,
                 "common_first, rare_first, function_first, content_first, odd_first, all_first")
      ->required();
  pa->add_option("--vocab", pa_vocab, "vocab.txt")->required();
  pa->add_option("--lexicon", pa_lexicon, "POS lexicon (function/content first)");
  pa->add_option("--train", pa_train, "training corpus (balanced frequency cutoff)");
  pa->add_option("--cutoff", pa_cutoff, "explicit frequency cutoff rank");
  pa->add_option("--out", pa_out, "output partition.txt")->capture_default_str();

  // preprocess
  auto* pp = app.add_subcommand("preprocess", "write template<TAB>fills lines");
  fs::path pp_vocab, pp_partition, pp_corpus, pp_out = "preprocessed.tsv";
  std::size_t pp_max_len = 64;
  pp->add_option("--vocab", pp_vocab, "vocab.txt")->required();
  pp->add_option("--partition", pp_partition, "partition.txt")->required();
  pp->add_option("--corpus", pp_corpus, "one sentence per line")->required();
  pp->add_option("--max-len", pp_max_len, "longest sentence kept")->capture_default_str();
  pp->add_option("--out", pp_out, "output file")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train a two-pass or baseline model");
  ModelFlags tr_model;
  TrainFlags tr_train;
  fs::path tr_vocab, tr_corpus, tr_out;
  std::string tr_partition, tr_valid, tr_resume;
  tr->add_option("--vocab", tr_vocab, "vocab.txt")->required();
  tr->add_option("--train", tr_corpus, "training corpus")->required();
  tr->add_option("--valid", tr_valid, "validation corpus (default: every 6th training line)");
  tr->add_option("--partition", tr_partition, "partition.txt (two_pass)");
  tr->add_option("--out-dir", tr_out,
                 "checkpoints and logs (default: $TWOPASS_CHECKPOINT_DIR, else ./run)");
  tr->add_option("--resume", tr_resume, "checkpoint to continue from");
  tr_model.add(tr);
  tr_train.add(tr);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "corpus perplexity and per-sentence scores");
  fs::path ev_ckpt, ev_vocab, ev_corpus;
  std::string ev_scores, ev_precision;
  std::size_t ev_batch = 4096;
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--vocab", ev_vocab, "vocab.txt")->required();
  ev->add_option("--corpus", ev_corpus, "sentences to score")->required();
  ev->add_option("--scores", ev_scores, "write logp1<TAB>logp2<TAB>loss<TAB>len per sentence");
  ev->add_option("--batch-tokens", ev_batch)->capture_default_str();
  ev->add_option("--precision", ev_precision, "override: f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));

  // compare
  auto* cm = app.add_subcommand("compare", "train all strategies and baselines, write a report");
  fs::path cm_spec, cm_out = "report";
  cm->add_option("--spec", cm_spec, "experiment spec (INI)")->required();
  cm->add_option("--out-dir", cm_out, "report directory")->capture_default_str();

  // sample
  auto* sa = app.add_subcommand("sample", "ancestral samples from a checkpoint");
  fs::path sa_ckpt, sa_vocab;
  std::size_t sa_count = 10, sa_max_len = 0;
  std::uint64_t sa_seed = 1;
  std::string sa_out;
  sa->add_option("--checkpoint", sa_ckpt)->required();
  sa->add_option("--vocab", sa_vocab)->required();
  sa->add_option("--count", sa_count)->capture_default_str();
  sa->add_option("--seed", sa_seed)->capture_default_str();
  sa->add_option("--max-len", sa_max_len, "0 = model max_len")->capture_default_str();
  sa->add_option("--out", sa_out, "output file (default stdout)");

  // oracle
  auto* orc = app.add_subcommand("oracle", "exhaustive exactness checks on a micro model");
  MicroConfig mc;
  std::string orc_out = "oracle-report.txt", orc_support = "renormalized";
  orc->add_option("--vocab-size", mc.vocab_size, "sentence-legal symbols incl. EOS and UNK")
      ->capture_default_str();
  orc->add_option("--max-len", mc.max_len, "longest sentence, EOS included")
      ->capture_default_str();
  orc->add_option("--hidden", mc.hidden)->capture_default_str();
  orc->add_option("--filter", mc.filter)->capture_default_str();
  orc->add_option("--heads", mc.heads)->capture_default_str();
  orc->add_option("--layers", mc.layers)->capture_default_str();
  orc->add_option("--seed", mc.seed)->capture_default_str();
  orc->add_option("--out", orc_out)->capture_default_str();

  // inspect-checkpoint
  auto* ic = app.add_subcommand("inspect-checkpoint", "print a checkpoint header");
  fs::path ic_path;
  ic->add_option("checkpoint,--checkpoint", ic_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  spdlog::set_default_logger(spdlog::stderr_color_mt("twopass"));
  spdlog::set_level(spdlog::level::from_str(log_level));

  if (*bv) {
    bv_opts.lowercase = !bv_keep_case;
    const Vocab v = build_vocab(bv_corpus, bv_opts);
    v.save(bv_out);
    write_run_record(bv_out, *bv);
    std::printf("vocab %zu ids (%zu ordinary), %llu sentences, %llu tokens, checksum %s\n",
                v.size(), v.size() - kNumSpecials,
                static_cast<unsigned long long>(v.meta().sentences),
                static_cast<unsigned long long>(v.meta().tokens), hex32(v.checksum()).c_str());
  } else if (*lc) {
    const Vocab v = Vocab::load(lc_vocab);
    const PosLexicon lex = PosLexicon::load(lc_lexicon);
    std::size_t tagged = 0, function = 0;
    std::string untagged;
    const auto ranked = v.ranked();
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const auto& tok = v.token(ranked[r]);
      if (lex.tag(tok)) ++tagged;
      if (lex.is_function_word(tok)) ++function;
      if (!lex.tag(tok) && r < lc_top && ranked[r] != kUnk) untagged += " " + tok;
    }
    std::printf("lexicon entries %zu (duplicates %zu)\nvocab tokens tagged %zu of %zu\n"
                "function words %zu, content words %zu\nuntagged among top %zu:%s\n",
                lex.size(), lex.duplicates(), tagged, ranked.size(), function,
                ranked.size() - function, lc_top, untagged.empty() ? " none" : untagged.c_str());
  } else if (*pa) {
    const Vocab v = Vocab::load(pa_vocab);
    const Strategy s = parse_strategy(pa_strategy);
    std::optional<PosLexicon> lex;
    if (!pa_lexicon.empty()) lex = PosLexicon::load(pa_lexicon);
    std::vector<Sentence> train;
    if (!pa_train.empty()) train = read_corpus(pa_train, v, v.meta().max_len);
    const auto part = make_partition(s, v, train, lex ? &*lex : nullptr, pa_cutoff);
    part.save(pa_out, v);
    write_run_record(pa_out, *pa);
    std::printf("%s: %zu first-pass, %zu second-pass ids%s\n", std::string(to_string(s)).c_str(),
                part.first_pass_ids().size(), part.second_pass_ids().size(),
                part.cutoff() ? (", cutoff " + std::to_string(*part.cutoff())).c_str() : "");
  } else if (*pp) {
    const Vocab v = Vocab::load(pp_vocab);
    const auto part = VocabPartition::load(pp_partition, v);
    const auto sentences = read_corpus(pp_corpus, v, pp_max_len);
    const auto data = split_all(sentences, part);
    std::ostringstream out;
    write_preprocessed(out, data, v);
    write_atomic(pp_out, out.str());
    write_run_record(pp_out, *pp);
    std::printf("%zu sentences written\n", data.size());
  } else if (*tr) {
    const Vocab v = Vocab::load(tr_vocab);
    if (tr_out.empty()) tr_out = checkpoint_dir_from_env();
    if (tr_out.empty()) tr_out = "run";
    fs::create_directories(tr_out);
    write_run_record(tr_out / "train", *tr);
    if (tr_model.precision == "f64") {
      train_impl<double>(tr_model, tr_train, v, tr_partition, tr_corpus, tr_valid, tr_out,
                         tr_resume);
    } else {
      train_impl<float>(tr_model, tr_train, v, tr_partition, tr_corpus, tr_valid, tr_out,
                        tr_resume);
    }
  } else if (*ev) {
    const Vocab v = Vocab::load(ev_vocab);
    const Checkpoint c = load_checkpoint(ev_ckpt);
    const std::string prec = ev_precision.empty() ? c.get("precision") : ev_precision;
    if (prec == "f64") {
      evaluate_impl<double>(c, v, ev_corpus, ev_scores, ev_batch);
    } else {
      evaluate_impl<float>(c, v, ev_corpus, ev_scores, ev_batch);
    }
  } else if (*cm) {
    const auto spec = ExperimentSpec::load(cm_spec);
    fs::create_directories(cm_out);
    write_run_record(cm_out / "compare", *cm);
    const auto report = run_comparison(spec, cm_out);
    std::fputs(report.to_text().c_str(), stdout);
  } else if (*sa) {
    const Vocab v = Vocab::load(sa_vocab);
    const Checkpoint c = load_checkpoint(sa_ckpt);
    if (c.get("precision") == "f64") {
      sample_impl<double>(c, v, sa_count, sa_seed, sa_max_len, sa_out);
    } else {
      sample_impl<float>(c, v, sa_count, sa_seed, sa_max_len, sa_out);
    }
  } else if (*orc) {
    omp_set_num_threads(1);
    const auto report = run_oracle(mc);
    write_atomic(orc_out, report.text);
    std::fputs(report.text.c_str(), stdout);
    return report.pass ? kOk : kNumeric;
  } else if (*ic) {
    std::fputs(describe_checkpoint(load_checkpoint(ic_path)).c_str(), stdout);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  retain_large_allocations();
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    spdlog::error("usage: {}", e.what());
    return kUsage;
  } catch (const NumericError& e) {
    spdlog::error("numeric: {}", e.what());
    return kNumeric;
  } catch (const DataError& e) {
    spdlog::error("data: {}", e.what());
    return kData;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kData;
  }
}
