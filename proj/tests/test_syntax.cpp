#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "synfuse/syntax.hpp"
#include "synfuse/toy_data.hpp"

using namespace synfuse;

namespace {

Segmentation seg_of(std::vector<std::string> parts) {
  Segmentation s;
  for (const auto& p : parts) s.word += p;
  s.end_of_word.assign(parts.size(), false);
  s.end_of_word.back() = true;
  s.subwords = std::move(parts);
  return s;
}

std::string letters(const std::vector<SubwordPosition>& tags) {
  std::string out;
  for (auto t : tags) out += position_letter(t);
  return out;
}

}  // namespace

TEST(TagSet, UniversalWithUnknownFirst) {
  const PosTagSet t = PosTagSet::universal();
  EXPECT_EQ(t.size(), 18u);
  EXPECT_EQ(t.tag(0), "UNK_POS");
  EXPECT_EQ(t.unknown_id(), 0);
  EXPECT_EQ(t.id("NOUN"), t.id("NOUN"));
  EXPECT_NE(t.id("NOUN"), 0);
  EXPECT_EQ(t.id("NOT-A-TAG"), 0);
  for (int i = 0; i < static_cast<int>(t.size()); ++i) EXPECT_EQ(t.id(t.tag(i)), i);
  EXPECT_EQ(PosTagSet::deserialize(t.serialize()), t);
}

TEST(PropagatePos, BroadcastToEverySubword) {
  using V = std::vector<std::string>;
  EXPECT_EQ(propagate_pos("NOUN", seg_of({"sun", "sh", "ine"})), (V{"NOUN", "NOUN", "NOUN"}));
  EXPECT_EQ(propagate_pos("VERB", seg_of({"run"})), (V{"VERB"}));
  EXPECT_EQ(propagate_pos("ADJ", seg_of({"un", "believ", "able"})), (V{"ADJ", "ADJ", "ADJ"}));
}

TEST(CaseFeature, FirstCharacterOnly) {
  EXPECT_EQ(case_feature("Bwelle"), 1);
  EXPECT_EQ(case_feature("father"), 0);
  EXPECT_EQ(case_feature("42"), 0);
  EXPECT_EQ(case_feature("."), 0);
  EXPECT_EQ(case_feature("Éclair"), 1);
  EXPECT_EQ(case_feature("éclair"), 0);
  EXPECT_EQ(case_feature("Москва"), 1);
  EXPECT_EQ(case_feature("ωmega"), 0);
  EXPECT_EQ(case_feature("Ωmega"), 1);
  EXPECT_EQ(case_feature("iPhone"), 0);
}

TEST(SubwordTags, BmeoGrammar) {
  EXPECT_EQ(letters(subword_position_tags(seg_of({"sun", "sh", "ine"}))), "BME");
  EXPECT_EQ(letters(subword_position_tags(seg_of({"run"}))), "O");
  EXPECT_EQ(letters(subword_position_tags(seg_of({"lo", "wer"}))), "BE");
  EXPECT_EQ(letters(subword_position_tags(seg_of({"a", "b", "c", "d", "e"}))), "BMMME");
}

TEST(FallbackPos, RuleTable) {
  EXPECT_EQ(fallback_pos("."), "PUNCT");
  EXPECT_EQ(fallback_pos("1984"), "NUM");
  EXPECT_EQ(fallback_pos("the"), "DET");
  EXPECT_EQ(fallback_pos("Bwelle"), "PROPN");
  EXPECT_EQ(fallback_pos("running"), "VERB");
  EXPECT_EQ(fallback_pos("beautiful"), "ADJ");
  EXPECT_EQ(fallback_pos("table"), "NOUN");
}

TEST(ReadAnnotated, BlocksAndUnknownTags) {
  std::stringstream in("The\tDET\ndog\tNOUN\n\n\nruns\tVERB\nfast\tXYZ\n");
  const auto s = read_annotated(in);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].words.size(), 2u);
  EXPECT_EQ(s[1].words[1].pos, "XYZ");
  const auto a = annotate(s[1], MergeTable{}, PosTagSet::universal());
  EXPECT_EQ(a.features.back().pos_id, 0);
}

TEST(ReadAnnotated, WrongColumnCountReportsLine) {
  std::stringstream in("The\tDET\ndog\tNOUN\textra\n");
  try {
    read_annotated(in);
    FAIL();
  } catch (const DataFormatError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(ReadAnnotated, MixingTaggedAndUntaggedIsError) {
  std::stringstream in("The\tDET\ndog\n");
  EXPECT_THROW(read_annotated(in), DataFormatError);
}

TEST(ReadAnnotated, UntaggedFileUsesFallback) {
  std::stringstream in("Anna\nsees\n.\n");
  const auto s = read_annotated(in);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].words[0].pos, "PROPN");
  EXPECT_EQ(s[0].words[2].pos, "PUNCT");
}

TEST(ReadAnnotated, WriteReadRoundtrip) {
  const auto data = toy::make_toy_translation(20, 3);
  std::vector<AnnotatedSentence> src;
  for (const auto& ex : data) src.push_back(ex.source);
  std::stringstream buf;
  write_annotated(buf, src);
  const auto back = read_annotated(buf);
  ASSERT_EQ(back.size(), src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    ASSERT_EQ(back[i].words.size(), src[i].words.size());
    for (std::size_t k = 0; k < src[i].words.size(); ++k) {
      EXPECT_EQ(back[i].words[k].surface, src[i].words[k].surface);
      EXPECT_EQ(back[i].words[k].pos, src[i].words[k].pos);
    }
  }
}

TEST(Annotate, AlignmentBroadcastAndGrammarOverCorpus) {
  const auto data = toy::make_toy_translation(300, 4);
  std::vector<std::string> text;
  for (const auto& ex : data) text.push_back(ex.source.surface_text());
  const MergeTable merges = learn_bpe(text, 60);
  const PosTagSet tags = PosTagSet::universal();
  const std::regex grammar("O|BM*E");
  for (const auto& ex : data) {
    const AnnotatedSentence a = annotate(ex.source, merges, tags);
    ASSERT_EQ(a.features.size(), a.subwords.size());
    ASSERT_EQ(a.word_index.size(), a.subwords.size());
    std::size_t i = 0;
    for (std::size_t w = 0; w < a.words.size(); ++w) {
      std::string pattern;
      const int pos = tags.id(a.words[w].pos);
      const int cas = case_feature(a.words[w].surface);
      std::string joined;
      for (; i < a.subwords.size() && a.word_index[i] == w; ++i) {
        EXPECT_EQ(a.features[i].pos_id, pos);
        EXPECT_EQ(a.features[i].case_id, cas);
        pattern += position_letter(a.features[i].position);
        joined += a.subwords[i];
      }
      EXPECT_TRUE(std::regex_match(pattern, grammar)) << pattern;
      EXPECT_EQ(decode(std::vector<std::string>{joined}), a.words[w].surface);
    }
    EXPECT_EQ(i, a.subwords.size());
  }
}

TEST(Annotate, SubwordFeatureDump) {
  AnnotatedSentence s;
  s.words = {{"Sunshine", "NOUN"}, {"!", "PUNCT"}};
  const MergeTable t({{"S", "u"}, {"Su", "n"}, {"s", "h"}, {"i", "n"}, {"in", "e"}});
  const auto a = annotate(s, t, PosTagSet::universal());
  std::stringstream out;
  write_subword_features(out, std::vector<AnnotatedSentence>{a}, PosTagSet::universal());
  EXPECT_EQ(out.str(), "Sun\tNOUN\t1\tB\nsh\tNOUN\t1\tM\nine</w>\tNOUN\t1\tE\n!</w>\tPUNCT\t0\tO\n\n");
}

TEST(Parallel, FileRoundtripAndCountCheck) {
  const auto data = toy::make_toy_translation(10, 5);
  const std::string prefix = ::testing::TempDir() + "/par";
  write_parallel(prefix, data);
  const auto back = read_parallel(prefix);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(back[i].target, data[i].target);
  {
    std::ofstream extra(prefix + ".tgt.txt", std::ios::app);
    extra << "one more\n";
  }
  EXPECT_THROW(read_parallel(prefix), DataFormatError);
}
