// Command-line front end. Exit codes: 0 ok, 1 usage, 2 data format, 3 numeric.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "synfuse/synfuse.hpp"

using namespace synfuse;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

RunConfig load_config(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : RunConfig::load_file(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path);
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    text::strip_cr(line);
    out.push_back(text::normalize_whitespace(line));
  }
  while (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

/// Annotated TSV when the path ends in .tsv, otherwise one plain sentence per line.
std::vector<AnnotatedSentence> read_sources(const std::string& path) {
  if (std::filesystem::path(path).extension() == ".tsv") return read_annotated_file(path);
  std::vector<AnnotatedSentence> out;
  for (const auto& line : read_lines(path)) out.push_back(from_plain_text(line));
  return out;
}

void print_seed(const RunConfig& cfg) { std::cerr << "seed=" << cfg.seed << " config=" << cfg.fingerprint() << '\n'; }

std::vector<ParallelExample> generate(const std::string& kind, std::size_t n, std::uint64_t seed) {
  if (kind == "translation") return toy::make_toy_translation(n, seed);
  if (kind == "homograph") {
    std::vector<ParallelExample> out;
    for (auto& ex : toy::make_homograph_corpus(n, seed)) out.push_back(std::move(ex.pair));
    return out;
  }
  throw UsageError("unknown toy corpus kind " + kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synfuse: syntax-infused Transformer and BERT-style classifier toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "key=value run configuration");
  app.add_option("--seed", g.seed, "seed overriding the config");

  // bpe-learn
  auto* bpe = app.add_subcommand("bpe-learn", "learn BPE merges from plain-text corpora");
  std::vector<std::string> bpe_corpus;
  std::size_t bpe_merges = 0;
  std::string bpe_out, bpe_vocab;
  bpe->add_option("--corpus", bpe_corpus, "plain-text file(s), one sentence per line")->required();
  bpe->add_option("--merges", bpe_merges, "number of merges")->required();
  bpe->add_option("--out", bpe_out, "merges file")->required();
  bpe->add_option("--vocab", bpe_vocab, "also write the shared vocabulary");

  // annotate
  auto* ann = app.add_subcommand("annotate", "subword features for an annotated TSV");
  std::string ann_in, ann_merges, ann_out;
  ann->add_option("--in", ann_in, "annotated TSV")->required();
  ann->add_option("--merges", ann_merges, "merges file")->required();
  ann->add_option("--out", ann_out, "subword<TAB>pos<TAB>case<TAB>postag output")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a translation model");
  std::string tr_corpus, tr_ckpt;
  std::optional<std::size_t> tr_steps;
  tr->add_option("--corpus", tr_corpus, "parallel corpus prefix (<p>.src.tsv, <p>.tgt.txt)");
  tr->add_option("--checkpoint", tr_ckpt, "output checkpoint");
  tr->add_option("--steps", tr_steps, "training steps");

  // translate
  auto* trans = app.add_subcommand("translate", "greedy-decode source sentences");
  std::string trans_ckpt, trans_in, trans_out;
  std::size_t trans_len = 0;
  std::size_t trans_threads = 0;
  trans->add_option("--checkpoint", trans_ckpt)->required();
  trans->add_option("--in", trans_in, ".tsv annotated or plain text")->required();
  trans->add_option("--out", trans_out, "hypotheses (stdout if omitted)");
  trans->add_option("--max-len", trans_len, "decode budget (config max_decode_len if 0)");
  trans->add_option("--threads", trans_threads, "decoding threads (config threads if 0)");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "corpus BLEU of a checkpoint or of hypothesis files");
  std::string ev_ckpt, ev_corpus, ev_hyp, ev_ref, ev_out;
  ev->add_option("--checkpoint", ev_ckpt);
  ev->add_option("--corpus", ev_corpus, "parallel corpus prefix");
  ev->add_option("--hyp", ev_hyp, "hypotheses file");
  ev->add_option("--ref", ev_ref, "references file");
  ev->add_option("--out", ev_out, "per-sentence report");

  // sweep
  auto* sw = app.add_subcommand("sweep", "baseline vs syntax BLEU over training-data fractions");
  std::string sw_corpus, sw_test, sw_out, sw_fractions;
  sw->add_option("--corpus", sw_corpus, "training corpus prefix");
  sw->add_option("--test", sw_test, "test corpus prefix")->required();
  sw->add_option("--fractions", sw_fractions, "comma list (config sweep_fractions if omitted)");
  sw->add_option("--out", sw_out, "table path (stdout if omitted)");

  // attn-export
  auto* at = app.add_subcommand("attn-export", "cross-attention heatmap for one source sentence");
  std::string at_ckpt, at_in, at_out;
  std::size_t at_index = 0;
  bool at_per_head = false;
  at->add_option("--checkpoint", at_ckpt)->required();
  at->add_option("--in", at_in, ".tsv annotated or plain text")->required();
  at->add_option("--index", at_index, "0-based sentence index");
  at->add_option("--out", at_out, ".svg or .pgm")->required();
  at->add_flag("--per-head", at_per_head, "one map per (layer, head)");

  // finetune-cls
  auto* ft = app.add_subcommand("finetune-cls", "fine-tune the sentence classifier");
  std::string ft_train, ft_pos, ft_ckpt, ft_valid, ft_valid_pos;
  ft->add_option("--train", ft_train, "label<TAB>sentence_a[<TAB>sentence_b]");
  ft->add_option("--pos", ft_pos, "parallel annotated TSV");
  ft->add_option("--checkpoint", ft_ckpt, "output checkpoint");
  ft->add_option("--valid", ft_valid);
  ft->add_option("--valid-pos", ft_valid_pos);

  // classify
  auto* cl = app.add_subcommand("classify", "predict labels");
  std::string cl_ckpt, cl_in, cl_pos, cl_out;
  cl->add_option("--checkpoint", cl_ckpt)->required();
  cl->add_option("--in", cl_in, "labeled file (label column may be '?')")->required();
  cl->add_option("--pos", cl_pos, "parallel annotated TSV");
  cl->add_option("--out", cl_out, "label<TAB>probabilities (stdout if omitted)");

  // gen-toy
  auto* gen = app.add_subcommand("gen-toy", "write a synthetic corpus");
  std::string gen_kind = "translation", gen_out;
  std::size_t gen_n = 100;
  gen->add_option("--kind", gen_kind, "translation | homograph | classification");
  gen->add_option("--n", gen_n, "number of examples");
  gen->add_option("--out", gen_out, "output prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::usage);
  }

  try {
    if (bpe->parsed()) {
      std::vector<std::string> lines;
      for (const auto& p : bpe_corpus) {
        auto more = read_lines(p);
        lines.insert(lines.end(), more.begin(), more.end());
      }
      const MergeTable merges = learn_bpe(lines, bpe_merges);
      merges.save_file(bpe_out);
      if (!bpe_vocab.empty()) {
        std::vector<std::vector<std::string>> seg;
        for (const auto& l : lines) seg.push_back(encode_sentence(l, merges));
        build_vocab(seg).save_file(bpe_vocab);
      }
      std::cerr << "learned " << merges.size() << " merges\n";
    } else if (ann->parsed()) {
      const MergeTable merges = MergeTable::load_file(ann_merges);
      const PosTagSet tags = PosTagSet::universal();
      std::vector<AnnotatedSentence> out;
      for (auto& s : read_annotated_file(ann_in)) out.push_back(annotate(std::move(s), merges, tags));
      auto f = open_out(ann_out);
      write_subword_features(f, out, tags);
    } else if (tr->parsed()) {
      RunConfig cfg = load_config(g);
      if (!tr_corpus.empty()) cfg.corpus = tr_corpus;
      if (!tr_ckpt.empty()) cfg.checkpoint = tr_ckpt;
      if (tr_steps) cfg.steps = *tr_steps;
      print_seed(cfg);
      train(cfg);
      std::cerr << "wrote " << cfg.checkpoint << '\n';
    } else if (trans->parsed()) {
      const RunConfig cfg = load_config(g);
      const TranslationSystem sys = TranslationSystem::load(trans_ckpt);
      const auto sources = read_sources(trans_in);
      const auto hyps = sys.translate_all(sources, trans_len ? trans_len : cfg.max_decode_len,
                                          trans_threads ? trans_threads : cfg.threads);
      std::ofstream file;
      if (!trans_out.empty()) file = open_out(trans_out);
      std::ostream& out = trans_out.empty() ? std::cout : file;
      for (const auto& h : hyps) out << h << '\n';
    } else if (ev->parsed()) {
      const RunConfig cfg = load_config(g);
      std::vector<std::string> hyps, refs;
      if (!ev_hyp.empty() || !ev_ref.empty()) {
        if (ev_hyp.empty() || ev_ref.empty()) throw UsageError("evaluate needs both --hyp and --ref");
        hyps = read_lines(ev_hyp);
        refs = read_lines(ev_ref);
      } else {
        if (ev_ckpt.empty() || ev_corpus.empty()) throw UsageError("evaluate needs --checkpoint and --corpus");
        const TranslationSystem sys = TranslationSystem::load(ev_ckpt);
        std::vector<AnnotatedSentence> sources;
        for (auto& ex : read_parallel(ev_corpus)) {
          sources.push_back(std::move(ex.source));
          refs.push_back(std::move(ex.target));
        }
        hyps = sys.translate_all(sources, cfg.max_decode_len, cfg.threads);
      }
      EvalReport report = evaluate_bleu(hyps, refs);
      report.fingerprint = cfg.fingerprint();
      std::cout << std::fixed << std::setprecision(6) << "bleu\t" << report.bleu << "\nbleu100\t" << std::setprecision(2)
                << 100.0 * report.bleu << "\nsentences\t" << hyps.size() << "\nseed\t" << cfg.seed << "\nconfig\t"
                << report.fingerprint << '\n';
      if (!ev_out.empty()) {
        auto f = open_out(ev_out);
        f << "# seed=" << cfg.seed << " config=" << report.fingerprint << '\n';
        f << "index\thyp_len\tref_len\tm1\tt1\tm2\tt2\tm3\tt3\tm4\tt4\thypothesis\n";
        for (std::size_t i = 0; i < hyps.size(); ++i) {
          const auto& s = report.sentences[i];
          f << i << '\t' << s.hyp_length << '\t' << s.ref_length;
          for (std::size_t n = 0; n < kBleuOrder; ++n) f << '\t' << s.matches[n] << '\t' << s.totals[n];
          f << '\t' << hyps[i] << '\n';
        }
      }
    } else if (sw->parsed()) {
      RunConfig cfg = load_config(g);
      if (!sw_corpus.empty()) cfg.corpus = sw_corpus;
      if (cfg.corpus.empty()) throw UsageError("sweep needs a training corpus (--corpus or config)");
      std::vector<double> fractions = cfg.sweep_fractions;
      if (!sw_fractions.empty()) {
        fractions = KeyValues::parse("f=" + sw_fractions).get_doubles("f", {});
        cfg.sweep_fractions = fractions;
        cfg.validate();
      }
      print_seed(cfg);
      const auto rows = sweep(cfg, fractions, read_parallel(cfg.corpus), read_parallel(sw_test));
      std::ofstream file;
      if (!sw_out.empty()) file = open_out(sw_out);
      write_sweep_table(sw_out.empty() ? std::cout : file, rows, cfg);
    } else if (at->parsed()) {
      load_config(g);
      const TranslationSystem sys = TranslationSystem::load(at_ckpt);
      const auto sources = read_sources(at_in);
      if (at_index >= sources.size()) throw UsageError("--index beyond the input");
      const RunConfig cfg = load_config(g);
      const auto result = sys.translate_ids(sources[at_index], cfg.max_decode_len, true);
      const AnnotatedSentence src = sys.annotate_source(sources[at_index]);
      std::vector<std::string> tgt = sys.vocab().symbols(result.ids);
      std::size_t rows = 0;
      for (const auto& r : result.records) {
        if (r.kind == AttentionKind::cross) rows = r.rows;
      }
      if (rows > tgt.size()) tgt.emplace_back(kSpecialSymbols[Vocab::eos_id]);
      const auto files = export_attention(result.records, src.subwords, tgt, at_out,
                                          at_per_head ? HeatmapMode::per_head : HeatmapMode::last_layer_mean);
      for (const auto& f : files) std::cerr << "wrote " << f << '\n';
      std::cout << sys.detokenize(result.ids) << '\n';
    } else if (ft->parsed()) {
      RunConfig cfg = load_config(g);
      if (!ft_train.empty()) cfg.cls_train = ft_train;
      if (!ft_pos.empty()) cfg.cls_train_pos = ft_pos;
      if (!ft_valid.empty()) cfg.cls_valid = ft_valid;
      if (!ft_valid_pos.empty()) cfg.cls_valid_pos = ft_valid_pos;
      if (!ft_ckpt.empty()) cfg.checkpoint = ft_ckpt;
      if (cfg.cls_train.empty()) throw UsageError("finetune-cls needs --train or cls.train");
      print_seed(cfg);
      const auto train_data = read_labeled(cfg.cls_train, cfg.cls_train_pos);
      std::vector<double> losses;
      const ClassifierSystem sys = finetune_classifier(train_data, cfg, cfg.bert, &losses);
      for (std::size_t e = 0; e < losses.size(); ++e) std::cerr << "epoch " << e + 1 << " loss " << losses[e] << '\n';
      std::cout << "train_accuracy\t" << sys.accuracy(train_data) << '\n';
      if (!cfg.cls_valid.empty()) {
        std::cout << "valid_accuracy\t" << sys.accuracy(read_labeled(cfg.cls_valid, cfg.cls_valid_pos)) << '\n';
      }
      sys.save(cfg.checkpoint);
    } else if (cl->parsed()) {
      load_config(g);
      const ClassifierSystem sys = ClassifierSystem::load(cl_ckpt);
      const auto data = read_labeled(cl_in, cl_pos);
      std::ofstream file;
      if (!cl_out.empty()) file = open_out(cl_out);
      std::ostream& out = cl_out.empty() ? std::cout : file;
      std::size_t known = 0, correct = 0;
      for (const auto& ex : data) {
        const auto probs = classify(sys.input(ex), sys.model());
        const auto best = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        out << sys.labels()[best];
        for (double p : probs) out << '\t' << std::setprecision(6) << p;
        out << '\n';
        if (std::find(sys.labels().begin(), sys.labels().end(), ex.label) != sys.labels().end()) {
          ++known;
          correct += sys.labels()[best] == ex.label ? 1 : 0;
        }
      }
      if (known > 0) std::cerr << "accuracy " << static_cast<double>(correct) / static_cast<double>(known) << '\n';
    } else if (gen->parsed()) {
      const std::uint64_t seed = g.seed.value_or(load_config(g).seed);
      if (gen_kind == "classification") {
        std::vector<LabeledText> texts;
        for (auto& ex : toy::make_pos_classification(gen_n, seed, true)) {
          texts.push_back({ex.label, std::move(ex.a), std::move(ex.b)});
        }
        write_labeled(gen_out + ".cls.tsv", gen_out + ".pos.tsv", texts);
      } else {
        write_parallel(gen_out, generate(gen_kind, gen_n, seed));
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::usage);
  }
  return 0;
}
