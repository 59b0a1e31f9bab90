#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "synfuse/harness.hpp"
#include "synfuse/toy_data.hpp"

using namespace synfuse;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  const fs::path dir = fs::path(::testing::TempDir()) / "synfuse_harness";
  fs::create_directories(dir);
  return (dir / name).string();
}

RunConfig small_run() {
  RunConfig cfg;
  cfg.model.d_model = 16;
  cfg.model.feature_dim = 4;
  cfg.model.layers = 1;
  cfg.model.heads = 2;
  cfg.model.ffn_width = 32;
  cfg.steps = 30;
  cfg.batch_tokens = 120;
  cfg.bpe_merges = 60;
  cfg.warmup = 20;
  cfg.max_decode_len = 20;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(RunConfig, KeyValueRoundtripAndFingerprint) {
  RunConfig cfg = small_run();
  cfg.sweep_fractions = {0.2, 1.0};
  cfg.seed = 99;
  const RunConfig back = RunConfig::from_kv(KeyValues::parse(cfg.to_kv().serialize()));
  EXPECT_EQ(back.to_kv().serialize(), cfg.to_kv().serialize());
  EXPECT_EQ(back.fingerprint(), cfg.fingerprint());
  RunConfig other = cfg;
  other.seed = 100;
  EXPECT_NE(other.fingerprint(), cfg.fingerprint());
}

TEST(RunConfig, UnknownKeyAndBadFractionRejected) {
  EXPECT_THROW(RunConfig::from_kv(KeyValues::parse("stpes=10\n")), UsageError);
  EXPECT_THROW(RunConfig::from_kv(KeyValues::parse("data_fraction=0\n")), UsageError);
  EXPECT_THROW(RunConfig::from_kv(KeyValues::parse("data_fraction=1.5\n")), UsageError);
  EXPECT_NO_THROW(RunConfig::from_kv(KeyValues::parse("# comment\nsteps=10\nmodel.d_model=32\n")));
}

TEST(Subsample, CeilCountIdentityAndNesting) {
  std::vector<int> corpus(101);
  for (int i = 0; i < 101; ++i) corpus[static_cast<std::size_t>(i)] = i;
  EXPECT_EQ(subsample(corpus, 1.0, 3), corpus);
  EXPECT_EQ(subsample(corpus, 0.1, 3).size(), 11u);
  EXPECT_EQ(subsample(corpus, 0.25, 3).size(), 26u);
  EXPECT_EQ(subsample(corpus, 0.1, 3), subsample(corpus, 0.1, 3));
  EXPECT_NE(subsample(corpus, 0.1, 3), subsample(corpus, 0.1, 4));
  const auto small = subsample(corpus, 0.1, 5);
  const auto mid = subsample(corpus, 0.5, 5);
  for (int v : small) EXPECT_NE(std::find(mid.begin(), mid.end(), v), mid.end());
  EXPECT_THROW(subsample(corpus, 0.0, 1), UsageError);
}

TEST(Checkpoint, TranslationSystemRoundtrip) {
  const auto data = toy::make_toy_translation(40, 3);
  RunConfig cfg = small_run();
  const auto seg = learn_segmentation(data, cfg.bpe_merges);
  TrainingLog log;
  const TranslationSystem sys = build_and_train(data, cfg, cfg.model, seg, &log);
  EXPECT_EQ(log.curve.size(), cfg.steps);
  const std::string path = temp_path("roundtrip.ckpt");
  sys.save(path);
  const TranslationSystem back = TranslationSystem::load(path);
  EXPECT_EQ(back.merges(), sys.merges());
  EXPECT_EQ(back.vocab(), sys.vocab());
  EXPECT_EQ(back.tagset(), sys.tagset());
  ASSERT_EQ(back.model().params().size(), sys.model().params().size());
  for (std::size_t i = 0; i < sys.model().params().size(); ++i) {
    const auto& a = sys.model().params().tensors()[i];
    const auto& b = back.model().params().tensors()[i];
    ASSERT_EQ(a.shape(), b.shape());
    EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)), 0)
        << sys.model().params().names()[i];
  }
  const auto inputs = toy::make_toy_translation(20, 77);
  for (const auto& ex : inputs) {
    EXPECT_EQ(back.translate_ids(ex.source, 20).ids, sys.translate_ids(ex.source, 20).ids);
  }
  EXPECT_EQ(back.manifest().get("seed", ""), std::to_string(cfg.seed));
}

TEST(Checkpoint, KindMismatchIsDataFormatError) {
  const auto data = toy::make_toy_translation(10, 3);
  RunConfig cfg = small_run();
  const auto seg = learn_segmentation(data, cfg.bpe_merges);
  const TranslationSystem sys(seg.merges, seg.vocab, seg.tagset, cfg.model, 1);
  const std::string path = temp_path("kind.ckpt");
  sys.save(path);
  EXPECT_THROW(ClassifierSystem::load(path), DataFormatError);
}

TEST(Training, DeterministicUnderFixedSeed) {
  const auto data = toy::make_toy_translation(30, 4);
  RunConfig cfg = small_run();
  cfg.steps = 12;
  const auto seg = learn_segmentation(data, cfg.bpe_merges);
  TrainingLog a, b;
  build_and_train(data, cfg, cfg.model, seg, &a);
  build_and_train(data, cfg, cfg.model, seg, &b);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
}

TEST(Training, ParallelEvaluationMatchesSerial) {
  const auto data = toy::make_toy_translation(24, 5);
  RunConfig cfg = small_run();
  const auto seg = learn_segmentation(data, cfg.bpe_merges);
  const TranslationSystem sys = build_and_train(data, cfg, cfg.model, seg);
  EXPECT_EQ(corpus_bleu(sys, data, 20, 1), corpus_bleu(sys, data, 20, 4));
}

TEST(Training, LossCurveFile) {
  const auto data = toy::make_toy_translation(20, 6);
  RunConfig cfg = small_run();
  cfg.steps = 4;
  cfg.eval_every = 2;
  const auto seg = learn_segmentation(data, cfg.bpe_merges);
  TrainingLog log;
  TranslationSystem sys(seg.merges, seg.vocab, seg.tagset, cfg.model, cfg.seed);
  log = train_model(sys, data, cfg, data);
  const std::string path = temp_path("curve.csv");
  write_loss_curve(path, log, cfg);
  const auto lines = text::split(slurp(path), '\n');
  ASSERT_GE(lines.size(), 6u);
  EXPECT_EQ(lines[0].rfind("# seed=1", 0), 0u);
  EXPECT_EQ(lines[1], "step,train_loss,eval_bleu");
  EXPECT_EQ(text::split(lines[2], ',').size(), 3u);
  EXPECT_EQ(lines[2].back(), ',');
  EXPECT_NE(lines[3].back(), ',');
}

TEST(Sweep, TableShapeAndFairness) {
  const auto data = toy::make_toy_translation(40, 7);
  const auto test = toy::make_toy_translation(8, 8);
  RunConfig cfg = small_run();
  cfg.steps = 6;
  const auto rows = sweep(cfg, {0.5, 1.0}, data, test);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].train_pairs, 20u);
  EXPECT_EQ(rows[1].train_pairs, 40u);
  std::ostringstream out;
  write_sweep_table(out, rows, cfg);
  const auto lines = text::split(out.str(), '\n');
  EXPECT_EQ(lines[1], "fraction\ttrain_pairs\tbaseline_bleu\tsyntax_bleu\tbaseline_bleu100\tsyntax_bleu100");
  EXPECT_EQ(text::split(lines[2], '\t').size(), 6u);
  EXPECT_NE(lines[0].find("seed=1"), std::string::npos);
  // both arms share D
  EXPECT_EQ(cfg.model.baseline().d_model, cfg.model.d_model);
}

TEST(Heatmap, SvgAndPgmExport) {
  AttentionRecord r0{0, 0, AttentionKind::cross, 2, 3, {0.2, 0.3, 0.5, 1.0, 0.0, 0.0}};
  AttentionRecord r1{1, 0, AttentionKind::cross, 2, 3, {0.0, 1.0, 0.0, 0.5, 0.5, 0.0}};
  AttentionRecord r2{1, 1, AttentionKind::cross, 2, 3, {1.0, 0.0, 0.0, 0.5, 0.0, 0.5}};
  AttentionRecord self{1, 0, AttentionKind::encoder_self, 3, 3, std::vector<double>(9, 1.0 / 3)};
  const std::vector<AttentionRecord> recs = {r0, r1, r2, self};
  const std::vector<std::string> src = {"Bw", "elle</w>", "<&>"}, tgt = {"Bwelle</w>", "</s>"};
  const auto maps = cross_attention_maps(recs, src, tgt, HeatmapMode::last_layer_mean);
  ASSERT_EQ(maps.size(), 1u);
  EXPECT_DOUBLE_EQ(maps[0].second.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(maps[0].second.at(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(maps[0].second.at(1, 2), 0.25);
  EXPECT_EQ(cross_attention_maps(recs, src, tgt, HeatmapMode::per_head).size(), 3u);

  const auto svg = export_attention(recs, src, tgt, temp_path("map.svg"));
  ASSERT_EQ(svg.size(), 1u);
  const std::string body = slurp(svg[0]);
  EXPECT_NE(body.find("<svg"), std::string::npos);
  EXPECT_NE(body.find("&lt;&amp;&gt;"), std::string::npos);
  EXPECT_NE(body.find("Bwelle&lt;/w&gt;"), std::string::npos);
  EXPECT_EQ(std::count(body.begin(), body.end(), '\n') > 6, true);

  const auto pgm = export_attention(recs, src, tgt, temp_path("map.pgm"), HeatmapMode::per_head);
  ASSERT_EQ(pgm.size(), 3u);
  EXPECT_NE(pgm[0].find("map_L0_H0.pgm"), std::string::npos);
  EXPECT_EQ(slurp(pgm[0]).substr(0, 3), "P2\n");
  EXPECT_THROW(export_attention(recs, src, {"one"}, temp_path("bad.svg")), ShapeError);
}

TEST(Labeled, ReadWithParallelPos) {
  const auto data = toy::make_pos_classification(6, 2, true);
  std::vector<LabeledText> texts;
  for (const auto& ex : data) texts.push_back({ex.label, ex.a, ex.b});
  const std::string path = temp_path("cls.tsv"), pos = temp_path("cls.pos.tsv");
  write_labeled(path, pos, texts);
  const auto back = read_labeled(path, pos);
  ASSERT_EQ(back.size(), texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    EXPECT_EQ(back[i].label, texts[i].label);
    ASSERT_TRUE(back[i].b.has_value());
    for (std::size_t k = 0; k < texts[i].a.words.size(); ++k) EXPECT_EQ(back[i].a.words[k].pos, texts[i].a.words[k].pos);
  }
  {
    std::ofstream bad(path, std::ios::app);
    bad << "onlylabel\n";
  }
  try {
    read_labeled(path, pos);
    FAIL();
  } catch (const DataFormatError& e) {
    EXPECT_EQ(e.line(), texts.size() + 1);
  }
}

TEST(Classifier, FinetuneSaveLoadClassify) {
  const auto data = toy::make_pos_classification(64, 3, false);
  std::vector<LabeledText> texts;
  for (const auto& ex : data) texts.push_back({ex.label, ex.a, ex.b});
  RunConfig cfg = small_run();
  cfg.epochs = 2;
  cfg.batch_size = 16;
  BertConfig bc;
  bc.layers = 1;
  bc.d_model = 16;
  bc.pos_dim = 16;
  bc.heads = 2;
  bc.ffn_width = 16;
  std::vector<double> losses;
  const ClassifierSystem sys = finetune_classifier(texts, cfg, bc, &losses);
  EXPECT_EQ(losses.size(), 2u);
  EXPECT_EQ(sys.labels(), (std::vector<std::string>{"noun", "verb"}));
  const std::string path = temp_path("cls.ckpt");
  sys.save(path);
  const ClassifierSystem back = ClassifierSystem::load(path);
  for (const auto& t : texts) {
    EXPECT_EQ(classify(back.input(t), back.model()), classify(sys.input(t), sys.model()));
  }
  EXPECT_EQ(back.accuracy(texts), sys.accuracy(texts));
}
