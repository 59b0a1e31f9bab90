#pragma once

// Training orchestration: configuration, corpus preparation, batching,
// training loops, BLEU evaluation, data-fraction sweeps, attention heatmaps
// and self-contained checkpoints.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "synfuse/bert.hpp"
#include "synfuse/bleu.hpp"
#include "synfuse/bpe.hpp"
#include "synfuse/checkpoint.hpp"
#include "synfuse/config.hpp"
#include "synfuse/error.hpp"
#include "synfuse/optim.hpp"
#include "synfuse/rng.hpp"
#include "synfuse/syntax.hpp"
#include "synfuse/transformer.hpp"

namespace synfuse {

struct RunConfig {
  std::string corpus;      // prefix of <corpus>.src.tsv / <corpus>.tgt.txt
  std::string valid;       // optional held-out prefix for periodic BLEU
  std::string merges;      // optional merges file; learned when empty
  std::string checkpoint = "model.ckpt";
  std::string loss_curve;  // CSV path; empty = <checkpoint>.loss.csv
  ModelConfig model{};
  BertConfig bert{};
  std::size_t steps = 1000;
  std::size_t batch_tokens = 512;
  std::size_t accumulation = 2;
  std::size_t eval_every = 0;
  std::size_t bpe_merges = 300;
  std::size_t warmup = 400;
  std::size_t max_decode_len = 64;
  std::size_t threads = 1;
  std::uint64_t seed = 1;
  double data_fraction = 1.0;
  double lr_factor = 2.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.998;
  double adam_eps = 1e-9;
  std::vector<double> sweep_fractions = {0.1, 0.25, 0.5, 1.0};
  // sentence classification
  std::string cls_train;
  std::string cls_train_pos;
  std::string cls_valid;
  std::string cls_valid_pos;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;

  void validate() const {
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw UsageError("data_fraction must be in (0, 1]");
    if (accumulation == 0) throw UsageError("accumulation must be at least 1");
    if (batch_tokens == 0 || batch_size == 0) throw UsageError("batch sizes must be positive");
    for (double f : sweep_fractions) {
      if (!(f > 0.0 && f <= 1.0)) throw UsageError("sweep fractions must be in (0, 1]");
    }
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set_string("corpus", corpus);
    kv.set_string("valid", valid);
    kv.set_string("merges", merges);
    kv.set_string("checkpoint", checkpoint);
    kv.set_string("loss_curve", loss_curve);
    model.write(kv);
    bert.write(kv);
    kv.set_size("steps", steps);
    kv.set_size("batch_tokens", batch_tokens);
    kv.set_size("accumulation", accumulation);
    kv.set_size("eval_every", eval_every);
    kv.set_size("bpe_merges", bpe_merges);
    kv.set_size("warmup", warmup);
    kv.set_size("max_decode_len", max_decode_len);
    kv.set_size("threads", threads);
    kv.set_size("seed", seed);
    kv.set_double("data_fraction", data_fraction);
    kv.set_double("lr_factor", lr_factor);
    kv.set_double("adam.beta1", adam_beta1);
    kv.set_double("adam.beta2", adam_beta2);
    kv.set_double("adam.eps", adam_eps);
    std::ostringstream fr;
    fr.precision(17);
    for (std::size_t i = 0; i < sweep_fractions.size(); ++i) fr << (i ? "," : "") << sweep_fractions[i];
    kv.set_string("sweep_fractions", fr.str());
    kv.set_string("cls.train", cls_train);
    kv.set_string("cls.train_pos", cls_train_pos);
    kv.set_string("cls.valid", cls_valid);
    kv.set_string("cls.valid_pos", cls_valid_pos);
    kv.set_size("epochs", epochs);
    kv.set_size("batch_size", batch_size);
    return kv;
  }

  /// Unknown keys are rejected so that typos do not silently fall back.
  static RunConfig from_kv(const KeyValues& kv) {
    const RunConfig defaults;
    const auto known = defaults.to_kv();
    for (const auto& [k, v] : kv.values()) {
      if (!known.has(k)) throw UsageError("unknown config key " + k);
    }
    RunConfig c;
    c.corpus = kv.get("corpus", c.corpus);
    c.valid = kv.get("valid", c.valid);
    c.merges = kv.get("merges", c.merges);
    c.checkpoint = kv.get("checkpoint", c.checkpoint);
    c.loss_curve = kv.get("loss_curve", c.loss_curve);
    c.model = ModelConfig::read(kv);
    c.bert = BertConfig::read(kv);
    c.steps = kv.get_size("steps", c.steps);
    c.batch_tokens = kv.get_size("batch_tokens", c.batch_tokens);
    c.accumulation = kv.get_size("accumulation", c.accumulation);
    c.eval_every = kv.get_size("eval_every", c.eval_every);
    c.bpe_merges = kv.get_size("bpe_merges", c.bpe_merges);
    c.warmup = kv.get_size("warmup", c.warmup);
    c.max_decode_len = kv.get_size("max_decode_len", c.max_decode_len);
    c.threads = kv.get_size("threads", c.threads);
    c.seed = kv.get_size("seed", c.seed);
    c.data_fraction = kv.get_double("data_fraction", c.data_fraction);
    c.lr_factor = kv.get_double("lr_factor", c.lr_factor);
    c.adam_beta1 = kv.get_double("adam.beta1", c.adam_beta1);
    c.adam_beta2 = kv.get_double("adam.beta2", c.adam_beta2);
    c.adam_eps = kv.get_double("adam.eps", c.adam_eps);
    c.sweep_fractions = kv.get_doubles("sweep_fractions", c.sweep_fractions);
    c.cls_train = kv.get("cls.train", c.cls_train);
    c.cls_train_pos = kv.get("cls.train_pos", c.cls_train_pos);
    c.cls_valid = kv.get("cls.valid", c.cls_valid);
    c.cls_valid_pos = kv.get("cls.valid_pos", c.cls_valid_pos);
    c.epochs = kv.get_size("epochs", c.epochs);
    c.batch_size = kv.get_size("batch_size", c.batch_size);
    c.validate();
    return c;
  }

  static RunConfig load_file(const std::string& path) { return from_kv(KeyValues::load_file(path)); }

  /// Short hex digest of the serialized configuration.
  std::string fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : to_kv().serialize()) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
  }

  Adam make_optimizer(std::size_t d_model) const {
    return Adam(adam_beta1, adam_beta2, adam_eps, NoamSchedule{lr_factor, d_model, warmup});
  }
};

/// Seeded sample of ceil(fraction * n) items, returned in corpus order.
/// For a fixed seed, smaller fractions select subsets of larger ones.
template <typename T>
std::vector<T> subsample(const std::vector<T>& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw UsageError("subsample fraction must be in (0, 1]");
  const std::size_t n = corpus.size();
  const auto k = std::min<std::size_t>(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  order.resize(k);
  std::sort(order.begin(), order.end());
  std::vector<T> out;
  out.reserve(k);
  for (auto i : order) out.push_back(corpus[i]);
  return out;
}

/// Learned segmentation state plus model: everything needed to translate.
class TranslationSystem {
 public:
  TranslationSystem(MergeTable merges, Vocab vocab, PosTagSet tagset, ModelConfig cfg, std::uint64_t seed)
      : merges_(std::move(merges)),
        vocab_(std::move(vocab)),
        tagset_(std::move(tagset)),
        model_(with_sizes(cfg, vocab_, tagset_), seed) {}

  const MergeTable& merges() const { return merges_; }
  const Vocab& vocab() const { return vocab_; }
  const PosTagSet& tagset() const { return tagset_; }
  TransformerModel& model() { return model_; }
  const TransformerModel& model() const { return model_; }
  KeyValues& manifest() { return manifest_; }
  const KeyValues& manifest() const { return manifest_; }

  AnnotatedSentence annotate_source(const AnnotatedSentence& s) const { return annotate(s, merges_, tagset_); }

  TrainingPair encode(const ParallelExample& ex) const {
    const AnnotatedSentence src = annotate_source(ex.source);
    return {vocab_.ids(src.subwords), src.features, vocab_.ids(encode_sentence(ex.target, merges_))};
  }

  std::string detokenize(std::span<const int> ids) const {
    const auto syms = vocab_.symbols(ids);
    return decode(syms);
  }

  DecodeResult translate_ids(const AnnotatedSentence& source, std::size_t max_len, bool capture = false) const {
    const AnnotatedSentence src = annotate_source(source);
    return greedy_decode(vocab_.ids(src.subwords), src.features, model_, max_len, capture);
  }

  std::string translate(const AnnotatedSentence& source, std::size_t max_len) const {
    return detokenize(translate_ids(source, max_len).ids);
  }

  /// Decode every sentence, fanning out over `threads` workers. Output order
  /// follows the input.
  std::vector<std::string> translate_all(std::span<const AnnotatedSentence> sources, std::size_t max_len,
                                         std::size_t threads = 1) const {
    std::vector<std::string> out(sources.size());
    std::atomic<std::size_t> next{0};
    const auto work = [&] {
      for (std::size_t i = next++; i < sources.size(); i = next++) out[i] = translate(sources[i], max_len);
    };
    threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(sources.size(), 1));
    if (threads == 1) {
      work();
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
      for (auto& t : pool) t.join();
    }
    return out;
  }

  void save(const std::string& path) const {
    CheckpointBlob blob;
    KeyValues manifest = manifest_;
    manifest.set_string("kind", "translation");
    model_.config().write(manifest);
    blob.sections["manifest"] = manifest.serialize();
    std::ostringstream merges, vocab;
    merges_.save(merges);
    vocab_.save(vocab);
    blob.sections["merges"] = merges.str();
    blob.sections["vocab"] = vocab.str();
    blob.sections["tagset"] = tagset_.serialize();
    blob.tensors = export_parameters(model_.params());
    save_blob(path, blob);
  }

  static TranslationSystem load(const std::string& path) {
    const CheckpointBlob blob = load_blob(path);
    const auto section = [&](const std::string& name) -> const std::string& {
      auto it = blob.sections.find(name);
      if (it == blob.sections.end()) throw DataFormatError("checkpoint has no " + name + " section");
      return it->second;
    };
    const KeyValues manifest = KeyValues::parse(section("manifest"));
    if (manifest.get("kind", "") != "translation") throw DataFormatError("not a translation checkpoint");
    std::istringstream merges(section("merges")), vocab(section("vocab"));
    TranslationSystem sys(MergeTable::load(merges), Vocab::load(vocab), PosTagSet::deserialize(section("tagset")),
                          ModelConfig::read(manifest), 0);
    import_parameters(sys.model_.params(), blob.tensors);
    sys.manifest_ = manifest;
    return sys;
  }

 private:
  static ModelConfig with_sizes(ModelConfig cfg, const Vocab& v, const PosTagSet& t) {
    cfg.vocab_size = v.size();
    cfg.pos_vocab = t.size();
    return cfg;
  }

  MergeTable merges_;
  Vocab vocab_;
  PosTagSet tagset_;
  TransformerModel model_;
  KeyValues manifest_;
};

/// Segmentation shared by a family of runs: merges learned on both sides of
/// the training data and one vocabulary over both.
struct SharedSegmentation {
  MergeTable merges;
  Vocab vocab;
  PosTagSet tagset = PosTagSet::universal();
};

inline SharedSegmentation learn_segmentation(std::span<const ParallelExample> data, std::size_t num_merges,
                                             const MergeTable* fixed_merges = nullptr) {
  SharedSegmentation seg;
  if (fixed_merges != nullptr) {
    seg.merges = *fixed_merges;
  } else {
    std::vector<std::string> text;
    text.reserve(2 * data.size());
    for (const auto& ex : data) {
      text.push_back(ex.source.surface_text());
      text.push_back(ex.target);
    }
    seg.merges = learn_bpe(text, num_merges);
  }
  std::vector<std::vector<std::string>> segmented;
  segmented.reserve(2 * data.size());
  for (const auto& ex : data) {
    segmented.push_back(encode_sentence(ex.source.surface_text(), seg.merges));
    segmented.push_back(encode_sentence(ex.target, seg.merges));
  }
  seg.vocab = build_vocab(segmented);
  return seg;
}

/// Endless stream of token-bounded batches; reshuffled every epoch.
class BatchStream {
 public:
  BatchStream(const std::vector<TrainingPair>& data, std::size_t batch_tokens, std::uint64_t seed)
      : data_(data), batch_tokens_(batch_tokens), rng_(seed) {
    if (data_.empty()) throw UsageError("no training data");
  }

  std::vector<TrainingPair> next() {
    std::vector<TrainingPair> batch;
    std::size_t tokens = 0;
    while (true) {
      if (cursor_ >= order_.size()) reshuffle();
      const auto& ex = data_[order_[cursor_]];
      const std::size_t t = ex.target.size() + 1;
      if (!batch.empty() && tokens + t > batch_tokens_) break;
      batch.push_back(ex);
      tokens += t;
      ++cursor_;
      if (cursor_ >= order_.size()) break;
    }
    return batch;
  }

 private:
  void reshuffle() {
    order_.resize(data_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    cursor_ = 0;
  }

  const std::vector<TrainingPair>& data_;
  std::size_t batch_tokens_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;
  double nll = 0.0;
  std::optional<double> bleu;
};

struct TrainingLog {
  std::vector<CurvePoint> curve;
  std::optional<std::size_t> first_step_below;  // first step with nll < stop threshold check
};

inline double corpus_bleu(const TranslationSystem& sys, std::span<const ParallelExample> data, std::size_t max_len,
                          std::size_t threads = 1) {
  std::vector<AnnotatedSentence> sources;
  std::vector<std::string> refs;
  for (const auto& ex : data) {
    sources.push_back(ex.source);
    refs.push_back(ex.target);
  }
  return bleu(sys.translate_all(sources, max_len, threads), refs);
}

/// Callback invoked after every train_step; return false to stop early.
using StepObserver = std::function<bool(std::size_t step, const StepResult&)>;

/// Run cfg.steps train_step calls on `train`. BLEU on `valid` is recorded
/// every cfg.eval_every steps when both are set.
inline TrainingLog train_model(TranslationSystem& sys, const std::vector<ParallelExample>& train, const RunConfig& cfg,
                               std::span<const ParallelExample> valid = {}, const StepObserver& observer = {}) {
  std::vector<TrainingPair> pairs;
  pairs.reserve(train.size());
  for (const auto& ex : train) pairs.push_back(sys.encode(ex));
  BatchStream batches(pairs, cfg.batch_tokens, Rng::splitmix(cfg.seed ^ 0xBA7C4ULL));
  Adam optimizer = cfg.make_optimizer(sys.model().config().d_model);
  GradAccumulator accumulator(cfg.accumulation);
  Rng dropout_rng(Rng::splitmix(cfg.seed ^ 0xD209ULL));
  TrainingLog log;
  sys.model().params().zero_grad();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto batch = batches.next();
    const StepResult r = train_step(batch, sys.model(), optimizer, accumulator, dropout_rng);
    CurvePoint point{step, r.loss, r.nll, std::nullopt};
    if (cfg.eval_every > 0 && !valid.empty() && step % cfg.eval_every == 0) {
      point.bleu = corpus_bleu(sys, valid, cfg.max_decode_len, cfg.threads);
    }
    log.curve.push_back(point);
    if (observer && !observer(step, r)) break;
  }
  return log;
}

inline void write_loss_curve(const std::string& path, const TrainingLog& log, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write loss curve " + path);
  out << "# seed=" << cfg.seed << " config=" << cfg.fingerprint() << '\n';
  out << "step,train_loss,eval_bleu\n";
  out.precision(10);
  for (const auto& p : log.curve) {
    out << p.step << ',' << p.loss << ',';
    if (p.bleu) out << *p.bleu;
    out << '\n';
  }
}

/// Prepare segmentation, build a model for `model_cfg`, train and return it.
inline TranslationSystem build_and_train(const std::vector<ParallelExample>& train, const RunConfig& cfg,
                                         const ModelConfig& model_cfg, const SharedSegmentation& seg,
                                         TrainingLog* log_out = nullptr, std::span<const ParallelExample> valid = {}) {
  TranslationSystem sys(seg.merges, seg.vocab, seg.tagset, model_cfg, cfg.seed);
  sys.manifest() = cfg.to_kv();
  TrainingLog log = train_model(sys, train, cfg, valid);
  if (log_out != nullptr) *log_out = std::move(log);
  return sys;
}

/// End-to-end training from files named in the config. Writes the checkpoint
/// and loss curve; returns the trained system.
inline TranslationSystem train(const RunConfig& cfg) {
  if (cfg.corpus.empty()) throw UsageError("config key 'corpus' is required for training");
  const auto full = read_parallel(cfg.corpus);
  std::optional<MergeTable> merges;
  if (!cfg.merges.empty() && std::filesystem::exists(cfg.merges)) merges = MergeTable::load_file(cfg.merges);
  const SharedSegmentation seg = learn_segmentation(full, cfg.bpe_merges, merges ? &*merges : nullptr);
  const auto data = subsample(full, cfg.data_fraction, cfg.seed);
  std::vector<ParallelExample> valid;
  if (!cfg.valid.empty()) valid = read_parallel(cfg.valid);
  TrainingLog log;
  TranslationSystem sys = build_and_train(data, cfg, cfg.model, seg, &log, valid);
  sys.save(cfg.checkpoint);
  write_loss_curve(cfg.loss_curve.empty() ? cfg.checkpoint + ".loss.csv" : cfg.loss_curve, log, cfg);
  return sys;
}

struct SweepRow {
  double fraction = 0.0;
  std::size_t train_pairs = 0;
  double baseline_bleu = 0.0;
  double syntax_bleu = 0.0;
};

/// Train a baseline (all D dims for words, no features) and the
/// syntax-infused model on each data fraction with identical samples, seeds
/// and step counts; report test BLEU for both.
inline std::vector<SweepRow> sweep(const RunConfig& cfg, const std::vector<double>& fractions,
                                   const std::vector<ParallelExample>& train, std::span<const ParallelExample> test) {
  const SharedSegmentation seg = learn_segmentation(train, cfg.bpe_merges);
  std::vector<SweepRow> rows;
  for (double f : fractions) {
    const auto sample = subsample(train, f, cfg.seed);
    SweepRow row{f, sample.size(), 0.0, 0.0};
    {
      const TranslationSystem base = build_and_train(sample, cfg, cfg.model.baseline(), seg);
      row.baseline_bleu = corpus_bleu(base, test, cfg.max_decode_len, cfg.threads);
    }
    {
      const TranslationSystem syn = build_and_train(sample, cfg, cfg.model, seg);
      row.syntax_bleu = corpus_bleu(syn, test, cfg.max_decode_len, cfg.threads);
    }
    rows.push_back(row);
  }
  return rows;
}

/// Tab-separated table: one row per fraction, BLEU in [0,1] and in points.
inline void write_sweep_table(std::ostream& out, const std::vector<SweepRow>& rows, const RunConfig& cfg) {
  out << "# seed=" << cfg.seed << " steps=" << cfg.steps << " d_model=" << cfg.model.d_model
      << " feature_dim=" << cfg.model.feature_dim << " config=" << cfg.fingerprint() << '\n';
  out << "fraction\ttrain_pairs\tbaseline_bleu\tsyntax_bleu\tbaseline_bleu100\tsyntax_bleu100\n";
  out << std::fixed;
  for (const auto& r : rows) {
    out << std::setprecision(4) << r.fraction << '\t' << r.train_pairs << '\t' << std::setprecision(6)
        << r.baseline_bleu << '\t' << r.syntax_bleu << '\t' << std::setprecision(2) << 100.0 * r.baseline_bleu << '\t'
        << 100.0 * r.syntax_bleu << '\n';
  }
}

enum class HeatmapMode { last_layer_mean, per_head };

struct Heatmap {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<double> weights;  // rows x cols

  double at(std::size_t r, std::size_t c) const { return weights[r * col_labels.size() + c]; }
};

/// Cross-attention maps: head average of the last decoder layer, or one map
/// per (layer, head).
inline std::vector<std::pair<std::string, Heatmap>> cross_attention_maps(const std::vector<AttentionRecord>& records,
                                                                         const std::vector<std::string>& src,
                                                                         const std::vector<std::string>& tgt,
                                                                         HeatmapMode mode) {
  std::vector<const AttentionRecord*> cross;
  std::size_t last_layer = 0;
  for (const auto& r : records) {
    if (r.kind != AttentionKind::cross) continue;
    if (r.rows != tgt.size() || r.cols != src.size()) {
      throw ShapeError("attention record " + std::to_string(r.rows) + "x" + std::to_string(r.cols) +
                       " does not match labels " + std::to_string(tgt.size()) + "x" + std::to_string(src.size()));
    }
    cross.push_back(&r);
    last_layer = std::max(last_layer, r.layer);
  }
  if (cross.empty()) throw UsageError("no cross-attention records to export");
  std::vector<std::pair<std::string, Heatmap>> out;
  if (mode == HeatmapMode::per_head) {
    for (const auto* r : cross) {
      out.push_back({"L" + std::to_string(r->layer) + "_H" + std::to_string(r->head), Heatmap{tgt, src, r->weights}});
    }
    return out;
  }
  Heatmap mean{tgt, src, std::vector<double>(tgt.size() * src.size(), 0.0)};
  std::size_t count = 0;
  for (const auto* r : cross) {
    if (r->layer != last_layer) continue;
    for (std::size_t i = 0; i < mean.weights.size(); ++i) mean.weights[i] += r->weights[i];
    ++count;
  }
  for (auto& w : mean.weights) w /= static_cast<double>(count);
  out.push_back({"mean", std::move(mean)});
  return out;
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

}  // namespace detail

/// SVG heatmap: rows are target subwords, columns source subwords, darker
/// cells carry more weight.
inline void write_svg_heatmap(std::ostream& out, const Heatmap& map) {
  constexpr int cell = 28, left = 110, top = 110;
  const auto rows = map.row_labels.size(), cols = map.col_labels.size();
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + cell * static_cast<int>(cols) + 10
      << "\" height=\"" << top + cell * static_cast<int>(rows) + 10 << "\" font-family=\"monospace\" font-size=\"11\">\n";
  for (std::size_t c = 0; c < cols; ++c) {
    const int x = left + cell * static_cast<int>(c) + cell / 2;
    out << "  <text x=\"" << x << "\" y=\"" << top - 6 << "\" transform=\"rotate(-60 " << x << ' ' << top - 6
        << ")\">" << detail::xml_escape(map.col_labels[c]) << "</text>\n";
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = top + cell * static_cast<int>(r);
    out << "  <text x=\"" << left - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
        << detail::xml_escape(map.row_labels[r]) << "</text>\n";
    for (std::size_t c = 0; c < cols; ++c) {
      const double w = std::clamp(map.at(r, c), 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - w)));
      out << "  <rect x=\"" << left + cell * static_cast<int>(c) << "\" y=\"" << y << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"rgb(" << shade << ',' << shade << ',' << shade
          << ")\" stroke=\"#ccc\"><title>" << std::setprecision(4) << w << "</title></rect>\n";
    }
  }
  out << "</svg>\n";
}

/// Plain PGM (P2), one cell per weight scaled up by `cell` pixels. Black = 1.
inline void write_pgm_heatmap(std::ostream& out, const Heatmap& map, int cell = 8) {
  const auto rows = map.row_labels.size(), cols = map.col_labels.size();
  out << "P2\n# rows: " << text::join(map.row_labels) << "\n# cols: " << text::join(map.col_labels) << '\n'
      << cols * static_cast<std::size_t>(cell) << ' ' << rows * static_cast<std::size_t>(cell) << "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (int py = 0; py < cell; ++py) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double w = std::clamp(map.at(r, c), 0.0, 1.0);
        const long shade = std::lround(255.0 * (1.0 - w));
        for (int px = 0; px < cell; ++px) out << shade << ' ';
      }
      out << '\n';
    }
  }
}

/// Write heatmaps to `path` (SVG, or PGM when the extension is .pgm). Per-head
/// maps go to <stem>_L<layer>_H<head><ext>. Returns the files written.
inline std::vector<std::string> export_attention(const std::vector<AttentionRecord>& records,
                                                 const std::vector<std::string>& src_subwords,
                                                 const std::vector<std::string>& tgt_subwords, const std::string& path,
                                                 HeatmapMode mode = HeatmapMode::last_layer_mean) {
  const std::filesystem::path p(path);
  const bool pgm = p.extension() == ".pgm";
  std::vector<std::string> written;
  for (const auto& [name, map] : cross_attention_maps(records, src_subwords, tgt_subwords, mode)) {
    std::filesystem::path target = p;
    if (mode == HeatmapMode::per_head) {
      target = p.parent_path() / (p.stem().string() + "_" + name + p.extension().string());
    }
    std::ofstream out(target);
    if (!out) throw UsageError("cannot write heatmap " + target.string());
    if (pgm) {
      write_pgm_heatmap(out, map);
    } else {
      write_svg_heatmap(out, map);
    }
    written.push_back(target.string());
  }
  return written;
}

// ---------------------------------------------------------------------------
// Sentence classification

struct LabeledText {
  std::string label;
  AnnotatedSentence a;
  std::optional<AnnotatedSentence> b;
};

/// "label<TAB>sentence_a[<TAB>sentence_b]" per line. POS comes from a
/// parallel annotated-TSV holding one block per sentence in file order
/// (a then b for pairs); without it, the fallback tagger is used.
inline std::vector<LabeledText> read_labeled(const std::string& path, const std::string& pos_path = "") {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  std::vector<LabeledText> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    text::strip_cr(line);
    if (text::trim(line).empty()) continue;
    auto cols = text::split(line, '\t');
    if (cols.size() < 2 || cols.size() > 3) throw DataFormatError("expected label<TAB>sentence_a[<TAB>sentence_b]", lineno);
    if (cols[0].empty() || text::trim(cols[1]).empty()) throw DataFormatError("empty label or sentence", lineno);
    LabeledText ex;
    ex.label = cols[0];
    ex.a = from_plain_text(cols[1]);
    if (cols.size() == 3 && !text::trim(cols[2]).empty()) ex.b = from_plain_text(cols[2]);
    out.push_back(std::move(ex));
  }
  if (pos_path.empty()) return out;
  const auto tagged = read_annotated_file(pos_path);
  std::size_t k = 0;
  const auto take = [&](AnnotatedSentence& s, std::size_t example) {
    if (k >= tagged.size()) throw DataFormatError("POS file has too few sentences for example " + std::to_string(example + 1));
    const auto& t = tagged[k++];
    if (t.words.size() != s.words.size()) {
      throw DataFormatError("POS block " + std::to_string(k) + " has " + std::to_string(t.words.size()) +
                            " tokens, sentence has " + std::to_string(s.words.size()));
    }
    for (std::size_t i = 0; i < t.words.size(); ++i) {
      if (t.words[i].surface != s.words[i].surface) {
        throw DataFormatError("POS block " + std::to_string(k) + " token '" + t.words[i].surface +
                              "' does not match '" + s.words[i].surface + "'");
      }
    }
    s = t;
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    take(out[i].a, i);
    if (out[i].b) take(*out[i].b, i);
  }
  if (k != tagged.size()) throw DataFormatError("POS file has more sentences than the labeled file");
  return out;
}

inline void write_labeled(const std::string& path, const std::string& pos_path, std::span<const LabeledText> data) {
  std::ofstream out(path);
  std::ofstream pos(pos_path);
  if (!out || !pos) throw UsageError("cannot write labeled data");
  for (const auto& ex : data) {
    out << ex.label << '\t' << ex.a.surface_text();
    if (ex.b) out << '\t' << ex.b->surface_text();
    out << '\n';
    std::vector<AnnotatedSentence> blocks = {ex.a};
    if (ex.b) blocks.push_back(*ex.b);
    write_annotated(pos, blocks);
  }
}

class ClassifierSystem {
 public:
  ClassifierSystem(MergeTable merges, Vocab vocab, PosTagSet tagset, std::vector<std::string> labels, BertConfig cfg,
                   std::uint64_t seed)
      : merges_(std::move(merges)),
        vocab_(std::move(vocab)),
        tagset_(std::move(tagset)),
        labels_(std::move(labels)),
        model_(with_sizes(cfg, vocab_, tagset_, labels_), seed) {}

  const BertModel& model() const { return model_; }
  BertModel& model() { return model_; }
  const std::vector<std::string>& labels() const { return labels_; }
  const Vocab& vocab() const { return vocab_; }
  KeyValues& manifest() { return manifest_; }

  BertSequence sequence(const AnnotatedSentence& s) const {
    const AnnotatedSentence a = annotate(s, merges_, tagset_);
    BertSequence out{vocab_.ids(a.subwords), {}};
    for (const auto& f : a.features) out.pos_ids.push_back(f.pos_id);
    return out;
  }

  BertInput input(const LabeledText& ex) const {
    std::optional<BertSequence> b;
    if (ex.b) b = sequence(*ex.b);
    return build_input(sequence(ex.a), b, model_.config().max_positions, tagset_.unknown_id());
  }

  int label_id(const std::string& label) const {
    auto it = std::find(labels_.begin(), labels_.end(), label);
    if (it == labels_.end()) throw DataFormatError("unknown label " + label);
    return static_cast<int>(it - labels_.begin());
  }

  std::string predict(const LabeledText& ex) const {
    const auto probs = classify(input(ex), model_);
    return labels_[static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin())];
  }

  double accuracy(std::span<const LabeledText> data) const {
    if (data.empty()) return 0.0;
    std::size_t ok = 0;
    for (const auto& ex : data) ok += predict(ex) == ex.label ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(data.size());
  }

  void save(const std::string& path) const {
    CheckpointBlob blob;
    KeyValues manifest = manifest_;
    manifest.set_string("kind", "classifier");
    manifest.set_string("labels", text::join(labels_, ","));
    model_.config().write(manifest);
    blob.sections["manifest"] = manifest.serialize();
    std::ostringstream merges, vocab;
    merges_.save(merges);
    vocab_.save(vocab);
    blob.sections["merges"] = merges.str();
    blob.sections["vocab"] = vocab.str();
    blob.sections["tagset"] = tagset_.serialize();
    blob.tensors = export_parameters(model_.params());
    save_blob(path, blob);
  }

  static ClassifierSystem load(const std::string& path) {
    const CheckpointBlob blob = load_blob(path);
    const auto section = [&](const std::string& name) -> const std::string& {
      auto it = blob.sections.find(name);
      if (it == blob.sections.end()) throw DataFormatError("checkpoint has no " + name + " section");
      return it->second;
    };
    const KeyValues manifest = KeyValues::parse(section("manifest"));
    if (manifest.get("kind", "") != "classifier") throw DataFormatError("not a classifier checkpoint");
    std::istringstream merges(section("merges")), vocab(section("vocab"));
    ClassifierSystem sys(MergeTable::load(merges), Vocab::load(vocab), PosTagSet::deserialize(section("tagset")),
                         text::split(manifest.require("labels"), ','), BertConfig::read(manifest), 0);
    import_parameters(sys.model_.params(), blob.tensors);
    sys.manifest_ = manifest;
    return sys;
  }

 private:
  static BertConfig with_sizes(BertConfig cfg, const Vocab& v, const PosTagSet& t, const std::vector<std::string>& l) {
    cfg.vocab_size = v.size();
    cfg.pos_vocab = t.size();
    cfg.num_classes = l.size();
    return cfg;
  }

  MergeTable merges_;
  Vocab vocab_;
  PosTagSet tagset_;
  std::vector<std::string> labels_;
  BertModel model_;
  KeyValues manifest_;
};

/// Learn segmentation and labels from `train`, then fine-tune for cfg.epochs
/// over shuffled mini-batches of cfg.batch_size.
inline ClassifierSystem finetune_classifier(const std::vector<LabeledText>& train, const RunConfig& cfg,
                                            const BertConfig& bert_cfg, std::vector<double>* epoch_losses = nullptr) {
  if (train.empty()) throw UsageError("no classification training data");
  std::vector<std::string> text;
  std::set<std::string> labels;
  for (const auto& ex : train) {
    text.push_back(ex.a.surface_text());
    if (ex.b) text.push_back(ex.b->surface_text());
    labels.insert(ex.label);
  }
  if (labels.size() < 2) throw DataFormatError("classification data needs at least two labels");
  MergeTable merges = learn_bpe(text, cfg.bpe_merges);
  std::vector<std::vector<std::string>> segmented;
  for (const auto& t : text) segmented.push_back(encode_sentence(t, merges));
  Vocab vocab = build_vocab(segmented);
  ClassifierSystem sys(std::move(merges), std::move(vocab), PosTagSet::universal(),
                       std::vector<std::string>(labels.begin(), labels.end()), bert_cfg, cfg.seed);
  sys.manifest() = cfg.to_kv();

  std::vector<LabeledInput> inputs;
  for (const auto& ex : train) inputs.push_back({sys.input(ex), sys.label_id(ex.label)});
  Adam optimizer = cfg.make_optimizer(bert_cfg.d_model);
  Rng order_rng(Rng::splitmix(cfg.seed ^ 0xC1A55ULL));
  Rng dropout_rng(Rng::splitmix(cfg.seed ^ 0xD209ULL));
  std::vector<std::size_t> order(inputs.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<LabeledInput> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) batch.push_back(inputs[order[i]]);
      total += finetune_step(batch, sys.model(), optimizer, dropout_rng);
      ++batches;
    }
    if (epoch_losses != nullptr) epoch_losses->push_back(total / static_cast<double>(batches));
  }
  return sys;
}

}  // namespace synfuse
