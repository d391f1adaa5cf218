#include "twopass/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "twopass/error.hpp"

namespace twopass {

void MicroConfig::validate() const {
  if (vocab_size < 3 || model_vocab() > 8) {
    throw UsageError("oracle: vocab_size must be in [3, 5] so that at most 8 ids exist, got " +
                     std::to_string(vocab_size));
  }
  if (max_len < 1 || max_len > 5) {
    throw UsageError("oracle: max_len must be in [1, 5], got " + std::to_string(max_len));
  }
  model_config().validate();
}

ModelConfig MicroConfig::model_config() const {
  ModelConfig c;
  c.vocab_size = model_vocab();
  c.hidden = hidden;
  c.filter = filter;
  c.heads = heads;
  c.layers = layers;
  c.max_len = max_len;
  return c;
}

Vocab micro_vocab(const MicroConfig& mc) {
  std::vector<std::pair<std::string, std::uint64_t>> counts;
  const std::size_t words = mc.vocab_size - 2;
  for (std::size_t i = 0; i < words; ++i) {
    counts.emplace_back(std::string(1, static_cast<char>('a' + i)), 10 * (words - i) + 10);
  }
  return Vocab::from_counts(std::move(counts), 5);
}

PosLexicon micro_lexicon(const Vocab& vocab) {
  std::string tsv;
  for (std::size_t id = kNumSpecials; id < vocab.size(); ++id) {
    const auto& w = vocab.token(static_cast<TokenId>(id));
    tsv += w + "\t" + (w == "a" ? "DT" : "NN") + "\n";
  }
  return PosLexicon::parse(tsv, "<micro>");
}

VocabPartition micro_partition(const MicroConfig& mc, const Vocab& vocab, Strategy strategy) {
  (void)mc;
  const PosLexicon lex = micro_lexicon(vocab);
  const std::size_t cutoff = std::max<std::size_t>(1, vocab.ranked().size() / 2);
  return make_partition(strategy, vocab, {}, &lex, cutoff);
}

std::vector<std::vector<TokenId>> enumerate_sequences(std::vector<TokenId> symbols,
                                                      std::size_t max_len, std::size_t limit) {
  std::sort(symbols.begin(), symbols.end());
  symbols.erase(std::unique(symbols.begin(), symbols.end()), symbols.end());
  symbols.erase(std::remove(symbols.begin(), symbols.end(), kEos), symbols.end());
  double count = 0;
  for (std::size_t n = 0; n < max_len; ++n) count += std::pow(double(symbols.size()), double(n));
  if (count > static_cast<double>(limit)) {
    throw UsageError("enumeration of " + std::to_string(static_cast<long long>(count)) +
                     " sequences exceeds the limit of " + std::to_string(limit));
  }
  // EOS (id 2) sorts below every word id, so placing the EOS-terminated
  // sequence before its extensions gives lexicographic order.
  std::vector<std::vector<TokenId>> out;
  std::vector<TokenId> prefix;
  std::function<void()> rec = [&] {
    prefix.push_back(kEos);
    out.push_back(prefix);
    prefix.pop_back();
    if (prefix.size() + 1 >= max_len) return;
    for (TokenId s : symbols) {
      prefix.push_back(s);
      rec();
      prefix.pop_back();
    }
  };
  if (max_len > 0) rec();
  return out;
}

std::vector<Sentence> enumerate_sentences(const MicroConfig& mc, const Vocab& vocab) {
  mc.validate();
  std::vector<TokenId> words;
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    const auto t = static_cast<TokenId>(id);
    if (t != kEos && vocab.is_sentence_legal(t)) words.push_back(t);
  }
  std::vector<Sentence> out;
  for (auto& ids : enumerate_sequences(words, mc.max_len)) {
    Sentence s;
    for (TokenId t : ids) {
      if (t != kEos) s.surface.push_back(vocab.token(t));
    }
    s.ids = std::move(ids);
    out.push_back(std::move(s));
  }
  return out;
}

MassReport total_mass(const LanguageModel<double>& m, const MicroConfig& mc, const Vocab& vocab) {
  MassReport r;
  const auto sentences = enumerate_sentences(mc, vocab);
  r.sentences = sentences.size();

  // Direct: one batched teacher-forced pass per sentence.
  const auto scores = score_sentences(m, std::span<const Sentence>(sentences));
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const double p = std::exp(scores[i].logp1 + scores[i].logp2);
    r.direct += p;
    r.table.emplace_back(sentences[i].ids, p);
  }

  // Factorized: walk the template tree with single-step p1 conditionals,
  // then the fill tree of each template with single-step p2 conditionals.
  const auto& part = m.partition();
  std::vector<TokenId> first_symbols;
  for (TokenId id = 0; id < static_cast<TokenId>(vocab.size()); ++id) {
    if (id != kEos && part.is_first_pass(id)) first_symbols.push_back(id);
  }
  if (part.has_second_pass()) first_symbols.push_back(kPlaceholder);
  std::sort(first_symbols.begin(), first_symbols.end());
  const auto second_symbols = part.second_pass_ids();

  std::vector<std::pair<std::vector<TokenId>, double>> templates;  // template, chain log p1
  std::vector<TokenId> prefix;
  std::function<void(double)> walk = [&](double lp) {
    const auto dist = m.next_template_logprobs(prefix);
    prefix.push_back(kEos);
    templates.emplace_back(prefix, lp + dist[kEos]);
    prefix.pop_back();
    for (TokenId s : first_symbols) {
      if (prefix.size() + 1 >= mc.max_len) {
        r.tail += std::exp(lp + dist[s]);
        continue;
      }
      prefix.push_back(s);
      walk(lp + dist[s]);
      prefix.pop_back();
    }
  };
  walk(0.0);
  r.templates = templates.size();

  std::vector<TemplatedSentence> batch;
  for (const auto& [t, lp] : templates) {
    TemplatedSentence ts{t, {}};
    for (TokenId id : t) {
      if (id == kPlaceholder) ts.fills.push_back(second_symbols.front());
    }
    batch.push_back(std::move(ts));
  }
  Tape<double> tape(false, kernels::Backend::serial);
  const auto batched = m.forward(tape, make_batch(batch));
  for (std::size_t i = 0; i < templates.size(); ++i) {
    r.chain_rule_gap = std::max(r.chain_rule_gap, std::abs(batched.logp1[i] - templates[i].second));
  }

  for (const auto& [t, lp1] : templates) {
    double inner = 0;
    std::vector<TokenId> y = t;
    std::function<void(std::size_t, double)> fill = [&](std::size_t pos, double lp) {
      while (pos < y.size() && t[pos] != kPlaceholder) ++pos;
      if (pos == y.size()) {
        inner += std::exp(lp);
        return;
      }
      const auto dist = m.next_fill_logprobs(t, std::span<const TokenId>(y.data(), pos));
      for (TokenId s : second_symbols) {
        y[pos] = s;
        fill(pos + 1, lp + dist[s]);
      }
      y[pos] = kPlaceholder;
    };
    fill(0, 0.0);
    r.factorized += std::exp(lp1) * inner;
  }
  return r;
}

BijectionReport bijection_audit(std::span<const Sentence> sentences,
                                const VocabPartition& partition, const SplitFn& split) {
  BijectionReport r;
  std::map<std::pair<std::vector<TokenId>, std::vector<TokenId>>, std::vector<TokenId>> seen;
  auto fail = [&](const std::string& why) {
    r.pass = false;
    ++r.failures;
    if (r.first_failure.empty()) r.first_failure = why;
  };
  for (const auto& y : sentences) {
    ++r.checked;
    const TemplatedSentence t = split ? split(y, partition) : split_sentence(y, partition);
    const auto [it, fresh] = seen.try_emplace({t.tmpl, t.fills}, y.ids);
    if (!fresh && it->second != y.ids) {
      fail("duplicate (template, fills) pair for sentence " + std::to_string(r.checked - 1));
      continue;
    }
    try {
      if (reconstruct(t, partition).ids != y.ids) {
        fail("reconstruct differs for sentence " + std::to_string(r.checked - 1));
      }
    } catch (const DataError& e) {
      fail(std::string("reconstruct rejected sentence ") + std::to_string(r.checked - 1) + ": " +
           e.what());
    }
  }
  return r;
}

VocabPartition random_partition(std::size_t vocab_size, std::mt19937_64& rng) {
  std::vector<std::uint8_t> first(vocab_size, 0);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t id = 0; id < vocab_size; ++id) {
    const auto t = static_cast<TokenId>(id);
    if (t >= kNumSpecials || t == kUnk) first[id] = coin(rng) ? 1 : 0;
  }
  return VocabPartition(Strategy::odd_first, std::move(first));
}

namespace {

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

std::string full_num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.15f", v);
  return buf;
}

}  // namespace

OracleReport run_oracle(const MicroConfig& mc) {
  mc.validate();
  OracleReport rep;
  std::ostringstream out;
  auto check = [&](bool ok, const std::string& what) {
    out << (ok ? "PASS  " : "FAIL  ") << what << "\n";
    rep.pass = rep.pass && ok;
  };
  const Vocab vocab = micro_vocab(mc);
  const auto sentences = enumerate_sentences(mc, vocab);
  out << "# micro oracle\n# vocab_size=" << mc.vocab_size << " (model ids " << mc.model_vocab()
      << ") max_len=" << mc.max_len << " hidden=" << mc.hidden << " filter=" << mc.filter
      << " heads=" << mc.heads << " layers=" << mc.layers << " seed=" << mc.seed
      << " precision=f64\n# sentences enumerated: " << sentences.size() << "\n\n";

  for (Strategy s : split_strategies()) {
    const auto part = micro_partition(mc, vocab, s);
    const auto b = bijection_audit(sentences, part);
    check(b.pass, "bijection " + std::string(to_string(s)) + ": " + std::to_string(b.checked) +
                      " sentences" + (b.pass ? "" : " (" + b.first_failure + ")"));
  }
  {
    const auto part = micro_partition(mc, vocab, Strategy::odd_first);
    const SplitFn drop_placeholder = [](const Sentence& y, const VocabPartition& p) {
      auto t = split_sentence(y, p);
      auto it = std::find(t.tmpl.begin(), t.tmpl.end(), kPlaceholder);
      if (it != t.tmpl.end()) t.tmpl.erase(it);
      return t;
    };
    const auto b = bijection_audit(sentences, part, drop_placeholder);
    check(!b.pass, "corrupted splitter (placeholder dropped) is detected: " +
                       std::to_string(b.failures) + " failures");
  }
  {
    std::mt19937_64 rng(mc.seed);
    std::size_t failures = 0;
    const std::size_t trials = 10000;
    for (std::size_t i = 0; i < trials; ++i) {
      MicroConfig r = mc;
      r.vocab_size = 3 + rng() % 3;
      r.max_len = 1 + rng() % mc.max_len;
      const Vocab v = micro_vocab(r);
      const auto sents = enumerate_sentences(r, v);
      if (!bijection_audit(sents, random_partition(v.size(), rng)).pass) ++failures;
    }
    check(failures == 0, "bijection over " + std::to_string(trials) +
                             " random partitions of random micro vocabularies: " +
                             std::to_string(failures) + " failures");
  }
  out << "\n";

  const ModelConfig cfg = mc.model_config();
  for (SupportMode mode : {SupportMode::renormalized, SupportMode::full}) {
    for (Strategy s : split_strategies()) {
      TwoPassModel<double> model(cfg, micro_partition(mc, vocab, s), mode, mc.seed);
      const auto r = total_mass(model, mc, vocab);
      const std::string tag = std::string(to_string(mode)) + " " + std::string(to_string(s));
      out << "# " << tag << ": direct " << full_num(r.direct) << ", factorized "
          << full_num(r.factorized) << ", tail " << full_num(r.tail) << ", "
          << r.templates << " templates\n";
      check(std::abs(r.direct - r.factorized) <= 1e-9,
            tag + ": direct vs factorized gap " + num(std::abs(r.direct - r.factorized)) +
                " <= 1e-9");
      if (mode == SupportMode::renormalized) {
        check(std::abs(r.direct + r.tail - 1.0) <= 1e-9,
              tag + ": mass + tail - 1 = " + num(r.direct + r.tail - 1.0) + " within 1e-9");
      } else {
        check(r.direct <= 1.0 + 1e-12, tag + ": mass " + full_num(r.direct) + " <= 1 + 1e-12");
      }
      check(r.chain_rule_gap <= 1e-10,
            tag + ": chain-rule gap " + num(r.chain_rule_gap) + " <= 1e-10");
    }
  }
  out << "\n";

  for (SupportMode mode : {SupportMode::renormalized, SupportMode::full}) {
    TwoPassModel<double> two(cfg, partition_all_first(vocab), mode, mc.seed);
    BaselineModel<double> base(cfg, mode, mc.seed);
    const auto a = total_mass(two, mc, vocab);
    const auto b = total_mass(base, mc, vocab);
    bool same = a.table.size() == b.table.size();
    for (std::size_t i = 0; same && i < a.table.size(); ++i) {
      same = a.table[i] == b.table[i];
    }
    check(same && a.direct == b.direct,
          std::string(to_string(mode)) + ": all-first two-pass equals baseline bit for bit (mass " +
              full_num(a.direct) + ")");
  }
  out << "\nverdict: " << (rep.pass ? "PASS" : "FAIL") << "\n";
  rep.text = out.str();
  return rep;
}

}  // namespace twopass
