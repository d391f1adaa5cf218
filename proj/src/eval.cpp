#include "twopass/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <spdlog/spdlog.h>

#include "twopass/error.hpp"
#include "twopass/io.hpp"

namespace twopass {

template <typename T>
double corpus_perplexity(const LanguageModel<T>& model, std::span<const Sentence> data,
                         std::size_t batch_tokens) {
  if (data.empty()) throw DataError("perplexity: no sentences");
  const auto scores = score_sentences(model, data, batch_tokens);
  double nll = 0;
  std::size_t tokens = 0;
  for (const auto& s : scores) {
    nll -= s.logp1 + s.logp2;
    tokens += s.source_len;
  }
  return std::exp(nll / static_cast<double>(tokens));
}

BaselineMatch match_baseline(const ModelConfig& cfg) {
  const std::size_t step = std::lcm(std::max<std::size_t>(cfg.heads, 1), std::size_t{2});
  BaselineMatch m;
  m.two_pass_params = two_pass_parameter_count(cfg);
  ModelConfig b = cfg;
  b.hidden = std::max(step, (cfg.hidden / step) * step);
  while (baseline_parameter_count(b) < m.two_pass_params) b.hidden += step;
  // Walk back down in case the starting point already overshot.
  while (b.hidden > step) {
    ModelConfig smaller = b;
    smaller.hidden -= step;
    if (baseline_parameter_count(smaller) < m.two_pass_params) break;
    b = smaller;
  }
  m.hidden = b.hidden;
  m.baseline_params = baseline_parameter_count(b);
  m.relative_gap = (static_cast<double>(m.baseline_params) -
                    static_cast<double>(m.two_pass_params)) /
                   static_cast<double>(m.two_pass_params);
  return m;
}

std::span<const ReferenceRow> reference_perplexities() {
  static constexpr std::array<ReferenceRow, 7> rows = {{
      {"odd first", 39.925, 45.377, 45.196},
      {"rare first", 38.283, 43.293, 43.077},
      {"content first", 38.321, 42.564, 42.394},
      {"common first", 36.525, 41.018, 40.895},
      {"function first", 36.126, 40.246, 40.085},
      {"baseline", 38.668, 41.888, 41.721},
      {"enhanced baseline", 35.945, 39.845, 39.726},
  }};
  return rows;
}

void sort_rows(std::vector<PerplexityRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const PerplexityRow& a, const PerplexityRow& b) {
    if (a.failed != b.failed) return a.failed;
    if (a.failed) return false;
    return a.valid > b.valid;
  });
}

// ------------------------------------------------------------ report output

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pad(std::string s, std::size_t width, bool left = true) {
  if (s.size() >= width) return s;
  return left ? s + std::string(width - s.size(), ' ') : std::string(width - s.size(), ' ') + s;
}

const ReferenceRow* reference_for(const std::string& name) {
  for (const auto& r : reference_perplexities()) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::string display_name(const std::string& run) {
  std::string s = run;
  std::replace(s.begin(), s.end(), '_', ' ');
  return s;
}

}  // namespace

std::string PerplexityReport::to_text() const {
  std::ostringstream out;
  out << header;
  out << "config_hash: " << config_hash << "\n\n";
  out << pad("model", 20) << pad("train", 12, false) << pad("valid", 12, false)
      << pad("test", 12, false) << pad("lr", 10, false) << pad("hidden", 8, false)
      << pad("params", 12, false) << "\n";
  for (const auto& r : rows) {
    out << pad(r.name, 20);
    if (r.failed) {
      out << "  FAILED: " << r.error << "\n";
      continue;
    }
    out << pad(fmt("%.3f", r.train), 12, false) << pad(fmt("%.3f", r.valid), 12, false)
        << pad(fmt("%.3f", r.test), 12, false) << pad(fmt("%.0e", r.lr), 10, false)
        << pad(std::to_string(r.hidden), 8, false) << pad(std::to_string(r.parameters), 12, false)
        << "\n";
  }
  out << "\nconventions:\n";
  for (const auto& c : conventions) out << "  - " << c << "\n";

  out << "\nreference perplexities (LM1B, 65,536-word vocabulary, base-size models;\n"
         "different corpus and scale, shown for orientation, not compared numerically):\n";
  out << pad("model", 20) << pad("train", 12, false) << pad("valid", 12, false)
      << pad("test", 12, false) << "\n";
  for (const auto& r : reference_perplexities()) {
    out << pad(std::string(r.name), 20) << pad(fmt("%.3f", r.train), 12, false)
        << pad(fmt("%.3f", r.valid), 12, false) << pad(fmt("%.3f", r.test), 12, false) << "\n";
  }

  std::vector<const PerplexityRow*> two_pass;
  for (const auto& r : rows) {
    if (!r.failed && r.name.find("baseline") == std::string::npos) two_pass.push_back(&r);
  }
  out << "\nordering of the two-pass strategies on validation:\n";
  if (two_pass.size() >= 2) {
    out << "  this run:  best " << two_pass.back()->name << ", worst " << two_pass.front()->name
        << "\n";
  } else {
    out << "  this run:  fewer than two two-pass rows\n";
  }
  out << "  reference: best function first, worst odd first\n";
  return out.str();
}

std::string PerplexityReport::to_csv() const {
  std::string out =
      "model,status,train_ppl,valid_ppl,test_ppl,lr,hidden,parameters,reference_valid_ppl,"
      "reference_test_ppl\n";
  for (const auto& r : rows) {
    const auto* ref = reference_for(r.name);
    out += r.name + "," + (r.failed ? "failed" : "ok") + ",";
    if (r.failed) {
      out += ",,,,,,";
    } else {
      out += fmt("%.6f", r.train) + "," + fmt("%.6f", r.valid) + "," + fmt("%.6f", r.test) + "," +
             fmt("%g", r.lr) + "," + std::to_string(r.hidden) + "," +
             std::to_string(r.parameters) + ",";
    }
    out += ref ? fmt("%.3f", ref->valid) + "," + fmt("%.3f", ref->test) : std::string(",");
    out += "\n";
  }
  return out;
}

std::string PerplexityReport::curves_svg() const {
  constexpr double W = 720, H = 420, L = 60, R = 200, Tm = 20, B = 40;
  static constexpr std::array<const char*, 8> colors = {
      "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"};
  double max_step = 1, lo = INFINITY, hi = -INFINITY;
  for (const auto& r : rows) {
    for (const auto& p : r.curve) {
      if (!p.valid_loss) continue;
      max_step = std::max(max_step, static_cast<double>(p.step + 1));
      lo = std::min(lo, *p.valid_loss);
      hi = std::max(hi, *p.valid_loss);
    }
  }
  if (!(hi > lo)) {
    lo = std::isfinite(lo) ? lo - 1 : 0;
    hi = lo + 2;
  }
  auto x = [&](double s) { return L + (W - L - R) * s / max_step; };
  auto y = [&](double v) { return Tm + (H - Tm - B) * (hi - v) / (hi - lo); };
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << (W - R + L) / 2 << "\" y=\"" << H - 8
      << "\" text-anchor=\"middle\">step</text>\n";
  out << "<text x=\"14\" y=\"" << (H - B + Tm) / 2 << "\" transform=\"rotate(-90 14 "
      << (H - B + Tm) / 2 << ")\" text-anchor=\"middle\">validation loss (nats/token)</text>\n";
  out << "<text x=\"" << L - 4 << "\" y=\"" << y(hi) + 4 << "\" text-anchor=\"end\">"
      << fmt("%.2f", hi) << "</text>\n";
  out << "<text x=\"" << L - 4 << "\" y=\"" << y(lo) + 4 << "\" text-anchor=\"end\">"
      << fmt("%.2f", lo) << "</text>\n";
  out << "<text x=\"" << x(max_step) << "\" y=\"" << H - B + 14 << "\" text-anchor=\"end\">"
      << fmt("%.0f", max_step) << "</text>\n";
  std::size_t k = 0;
  for (const auto& r : rows) {
    const char* color = colors[k % colors.size()];
    std::string pts;
    for (const auto& p : r.curve) {
      if (!p.valid_loss) continue;
      pts += fmt("%.2f", x(static_cast<double>(p.step + 1))) + "," + fmt("%.2f", y(*p.valid_loss)) +
             " ";
    }
    if (!pts.empty()) {
      out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\""
          << pts << "\"/>\n";
    }
    const double ly = Tm + 16.0 * static_cast<double>(k);
    out << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30
        << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << W - R + 36 << "\" y=\"" << ly + 4 << "\">" << r.name
        << (r.failed ? " (failed)" : "") << "</text>\n";
    ++k;
  }
  out << "</svg>\n";
  return out.str();
}

// ------------------------------------------------------------ experiment spec

namespace {

std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::logic_error&) {
    throw UsageError("setting " + key + ": expected a non-negative integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw UsageError("setting " + key + ": expected a number, got '" + v + "'");
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> grid;
  for (const auto& item : split_list(s)) grid.push_back(to_double("lr_grid", item));
  if (grid.empty()) throw UsageError("lr_grid: empty");
  return grid;
}

Precision parse_precision(const std::string& s) {
  if (s == "f32" || s == "32") return Precision::f32;
  if (s == "f64" || s == "64") return Precision::f64;
  throw UsageError("precision: expected f32 or f64, got '" + s + "'");
}

}  // namespace

bool apply_setting(ModelConfig& model, TrainConfig& train, SupportMode& support,
                   const std::string& key, const std::string& value) {
  if (key == "hidden") model.hidden = to_size(key, value);
  else if (key == "filter") model.filter = to_size(key, value);
  else if (key == "heads") model.heads = to_size(key, value);
  else if (key == "layers") model.layers = to_size(key, value);
  else if (key == "dropout") model.dropout = to_double(key, value);
  else if (key == "support") support = parse_support_mode(value);
  else if (key == "lr") train.schedule.lr = to_double(key, value);
  else if (key == "warmup") train.schedule.warmup = to_size(key, value);
  else if (key == "schedule") {
    if (value == "constant") train.schedule.kind = LrSchedule::Kind::constant;
    else if (value == "inverse_sqrt") train.schedule.kind = LrSchedule::Kind::inverse_sqrt;
    else throw UsageError("schedule: expected constant or inverse_sqrt, got '" + value + "'");
  }
  else if (key == "beta1") train.adam.beta1 = to_double(key, value);
  else if (key == "beta2") train.adam.beta2 = to_double(key, value);
  else if (key == "eps") train.adam.eps = to_double(key, value);
  else if (key == "batch_tokens") train.batch_tokens = to_size(key, value);
  else if (key == "max_steps") train.max_steps = to_size(key, value);
  else if (key == "seed") train.seed = to_size(key, value);
  else if (key == "eval_every") train.eval_every = to_size(key, value);
  else if (key == "clip_norm") train.clip_norm = to_double(key, value);
  else if (key == "eval_sentences") train.eval_sentences = to_size(key, value);
  else if (key == "stop_below") train.stop_below = to_double(key, value);
  else return false;
  return true;
}

ExperimentSpec ExperimentSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open experiment spec " + path.string());
  return parse(in, path.parent_path());
}

ExperimentSpec ExperimentSpec::parse(std::istream& in, const std::filesystem::path& base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw UsageError(std::string("experiment spec: ") + e.what());
  }
  ExperimentSpec spec;
  spec.model = ModelConfig::desk(0);
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw UsageError("experiment spec: key '" + section + "' outside a section");
    }
    for (const auto& [key, node] : body) {
      const std::string value = node.data();
      if (section == "corpus") {
        if (key == "train") spec.train_path = resolve(value);
        else if (key == "test") spec.test_path = resolve(value);
        else if (key == "vocab") spec.vocab_path = resolve(value);
        else if (key == "lexicon") spec.lexicon_path = resolve(value);
        else if (key == "max_vocab") spec.max_vocab = to_size(key, value);
        else if (key == "max_len") spec.max_len = to_size(key, value);
        else if (key == "valid_every") spec.valid_every = to_size(key, value);
        else throw UsageError("experiment spec: unknown key corpus." + key);
      } else if (section == "model" || section == "train") {
        if (key == "precision") spec.precision = parse_precision(value);
        else if (key == "lr_grid") spec.lr_grid = parse_grid(value);
        else if (key == "eval_train_sentences") spec.eval_train_sentences = to_size(key, value);
        else if (!apply_setting(spec.model, spec.train, spec.support, key, value)) {
          throw UsageError("experiment spec: unknown key " + section + "." + key);
        }
      } else if (section == "runs") {
        if (key == "names") spec.runs = split_list(value);
        else throw UsageError("experiment spec: unknown key runs." + key);
      } else if (section.rfind("run.", 0) == 0) {
        spec.overrides[section.substr(4)][key] = value;
      } else {
        throw UsageError("experiment spec: unknown section [" + section + "]");
      }
    }
  }
  if (spec.train_path.empty()) throw UsageError("experiment spec: corpus.train is required");
  if (spec.runs.empty()) {
    spec.runs = {"odd_first", "rare_first", "content_first", "common_first",
                 "function_first", "baseline", "enhanced_baseline"};
  }
  for (const auto& r : spec.runs) {
    if (r != "baseline" && r != "enhanced_baseline") parse_strategy(r);
  }
  for (const auto& [name, kv] : spec.overrides) {
    if (std::find(spec.runs.begin(), spec.runs.end(), name) == spec.runs.end()) {
      throw UsageError("experiment spec: [run." + name + "] names no listed run");
    }
  }
  spec.model.max_len = spec.max_len;
  return spec;
}

std::string ExperimentSpec::canonical() const {
  std::ostringstream out;
  out << "train_path=" << train_path.string() << "\ntest_path=" << test_path.string()
      << "\nvocab_path=" << vocab_path.string() << "\nlexicon_path=" << lexicon_path.string()
      << "\nmax_vocab=" << max_vocab << "\nmax_len=" << max_len << "\nvalid_every=" << valid_every
      << "\n";
  out << model.serialize() << "support=" << to_string(support)
      << "\nprecision=" << (precision == Precision::f32 ? "f32" : "f64") << "\n";
  out << train.serialize();
  out << "lr_grid=";
  for (std::size_t i = 0; i < lr_grid.size(); ++i) out << (i ? "," : "") << fmt("%g", lr_grid[i]);
  out << "\neval_train_sentences=" << eval_train_sentences << "\nruns=";
  for (std::size_t i = 0; i < runs.size(); ++i) out << (i ? "," : "") << runs[i];
  out << "\n";
  for (const auto& [name, kv] : overrides) {
    for (const auto& [k, v] : kv) out << "run." << name << "." << k << "=" << v << "\n";
  }
  return out.str();
}

// ------------------------------------------------------------ comparison

namespace {

struct Corpus {
  Vocab vocab;
  DatasetSplit split;
  std::optional<PosLexicon> lexicon;
};

Corpus prepare(const ExperimentSpec& spec) {
  Corpus c;
  if (!spec.vocab_path.empty()) {
    c.vocab = Vocab::load(spec.vocab_path);
  } else {
    VocabOptions vo;
    vo.max_vocab = spec.max_vocab;
    vo.max_len = spec.max_len;
    c.vocab = build_vocab(spec.train_path, vo);
  }
  EncodeOptions eo;
  eo.max_len = spec.max_len;
  auto loaded = load_sentences(spec.train_path, c.vocab, eo);
  c.split = split_train_valid(std::move(loaded.sentences), spec.valid_every);
  if (!spec.test_path.empty()) c.split.test = load_sentences(spec.test_path, c.vocab, eo).sentences;
  if (!spec.lexicon_path.empty()) c.lexicon = PosLexicon::load(spec.lexicon_path);
  spdlog::info("corpus: {} train, {} valid, {} test sentences, vocab {}", c.split.train.size(),
               c.split.valid.size(), c.split.test.size(), c.vocab.size());
  return c;
}

std::vector<Sentence> head(const std::vector<Sentence>& v, std::size_t n) {
  if (n == 0 || n >= v.size()) return v;
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n)};
}

template <typename T>
PerplexityRow run_one(const std::string& run, const ExperimentSpec& spec, const Corpus& corpus) {
  PerplexityRow row;
  row.name = display_name(run);
  ModelConfig mcfg = spec.model;
  mcfg.vocab_size = corpus.vocab.size();
  TrainConfig tcfg = spec.train;
  SupportMode support = spec.support;
  std::vector<double> grid = spec.lr_grid;
  if (auto it = spec.overrides.find(run); it != spec.overrides.end()) {
    for (const auto& [k, v] : it->second) {
      if (k == "lr_grid") grid = parse_grid(v);
      else if (!apply_setting(mcfg, tcfg, support, k, v)) {
        throw UsageError("experiment spec: unknown key run." + run + "." + k);
      }
    }
  }

  std::string kind = "two_pass";
  VocabPartition partition;
  if (run == "baseline" || run == "enhanced_baseline") {
    kind = "baseline";
    if (run == "enhanced_baseline") {
      const auto m = match_baseline(mcfg);
      spdlog::info("enhanced baseline: hidden {} ({} vs {} parameters, gap {:.4f})", m.hidden,
                   m.baseline_params, m.two_pass_params, m.relative_gap);
      mcfg.hidden = m.hidden;
    }
  } else {
    const Strategy s = parse_strategy(run);
    partition = make_partition(s, corpus.vocab, corpus.split.train,
                               corpus.lexicon ? &*corpus.lexicon : nullptr);
  }
  row.hidden = mcfg.hidden;

  std::unique_ptr<LanguageModel<T>> best;
  double best_valid = INFINITY;
  std::string last_error;
  for (double lr : grid) {
    tcfg.schedule.lr = lr;
    try {
      auto model = make_model<T>(kind, mcfg, partition, support, tcfg.seed);
      const auto train = split_all(corpus.split.train, model->partition());
      const auto valid = split_all(corpus.split.valid, model->partition());
      Trainer<T> trainer(*model, tcfg, &corpus.vocab);
      auto result = trainer.run(train, valid);
      spdlog::info("{} lr {:g}: best validation loss {:.4f} at step {}", row.name, lr,
                   result.best_valid_loss, result.best_step);
      if (result.best_valid_loss < best_valid) {
        best_valid = result.best_valid_loss;
        best = std::move(model);
        row.lr = lr;
        row.curve = std::move(result.log);
      }
    } catch (const std::exception& e) {
      last_error = e.what();
      spdlog::warn("{} lr {:g} failed: {}", row.name, lr, e.what());
    }
  }
  if (!best) {
    row.failed = true;
    row.error = last_error.empty() ? "no run completed" : last_error;
    return row;
  }
  row.parameters = best->parameter_count();
  row.train = corpus_perplexity(*best, std::span<const Sentence>(head(corpus.split.train,
                                                                       spec.eval_train_sentences)),
                                tcfg.batch_tokens);
  row.valid = corpus_perplexity(*best, std::span<const Sentence>(corpus.split.valid),
                                tcfg.batch_tokens);
  row.test = corpus.split.test.empty()
                 ? NAN
                 : corpus_perplexity(*best, std::span<const Sentence>(corpus.split.test),
                                     tcfg.batch_tokens);
  spdlog::info("{}: perplexity train {:.3f} valid {:.3f} test {:.3f}", row.name, row.train,
               row.valid, row.test);
  return row;
}

}  // namespace

PerplexityReport run_comparison(const ExperimentSpec& spec, const std::filesystem::path& out_dir) {
  const Corpus corpus = prepare(spec);
  PerplexityReport report;
  report.config_hash = hex32(crc32(spec.canonical()));
  for (const auto& run : spec.runs) {
    PerplexityRow row;
    try {
      row = spec.precision == Precision::f32 ? run_one<float>(run, spec, corpus)
                                             : run_one<double>(run, spec, corpus);
    } catch (const std::exception& e) {
      row.name = display_name(run);
      row.failed = true;
      row.error = e.what();
      spdlog::error("{} failed: {}", row.name, e.what());
    }
    report.rows.push_back(std::move(row));
  }
  sort_rows(report.rows);

  report.header = "# two-pass language model comparison\n# version: " +
                  std::string(version_string()) + "\n# train: " + spec.train_path.string() +
                  "\n# test: " + spec.test_path.string() + "\n# sentences: " +
                  std::to_string(corpus.split.train.size()) + " train, " +
                  std::to_string(corpus.split.valid.size()) + " valid, " +
                  std::to_string(corpus.split.test.size()) + " test; vocab " +
                  std::to_string(corpus.vocab.size()) + " ids\n";
  report.conventions = {
      "perplexity = exp(total NLL / total tokens) over each split (token-weighted, not a mean "
      "of per-sentence perplexities)",
      "every sentence contributes its length including one EOS to the token count",
      "two-pass NLL = -(log p1(template) + log p2(fills | template)); only placeholder "
      "positions count in the second pass",
      std::string("softmax support: ") + std::string(to_string(spec.support)),
      "rows sorted worst to best on validation perplexity; failed runs listed first",
      "each row uses the learning rate with the best validation loss from the grid; the model "
      "kept is the best validation checkpoint of that run",
      spec.eval_train_sentences == 0
          ? std::string("train column scored on all training sentences")
          : "train column scored on the first " + std::to_string(spec.eval_train_sentences) +
                " training sentences",
  };

  std::filesystem::create_directories(out_dir);
  write_atomic(out_dir / "report.csv", report.to_csv());
  write_atomic(out_dir / "report.txt", report.to_text());
  write_atomic(out_dir / "curves.svg", report.curves_svg());
  return report;
}

template double corpus_perplexity<float>(const LanguageModel<float>&, std::span<const Sentence>,
                                         std::size_t);
template double corpus_perplexity<double>(const LanguageModel<double>&, std::span<const Sentence>,
                                          std::size_t);

}  // namespace twopass
