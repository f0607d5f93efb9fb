#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <unistd.h>

#include "ffkv/corpus.hpp"
#include "ffkv/error.hpp"
#include "ffkv/io.hpp"
#include "ffkv/rng.hpp"

namespace ffkv {
namespace {

namespace fs = std::filesystem;

std::string collapse_spaces(std::string_view s) {
    std::string out;
    bool space = false;
    for (char c : s) {
        if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
            space = true;
            continue;
        }
        if (space && !out.empty()) out += ' ';
        space = false;
        out += c;
    }
    return out;
}

std::vector<std::string> sentences_of(std::string_view text) {
    std::vector<std::string> out;
    for (const auto& s : segment_sentences(text)) out.push_back(collapse_spaces(text.substr(s.begin, s.end - s.begin)));
    return out;
}

TEST(VocabTest, FrequencyOrderThenLexicographic) {
    const std::vector<std::string> texts{"a a b"};
    const Vocab v = Vocab::build(texts, 10);
    EXPECT_LT(v.id("a"), v.id("b"));
    EXPECT_EQ(v.id("a"), kReservedTokens);
    const std::vector<std::string> ties{"b a c"};
    const Vocab t = Vocab::build(ties, 10);
    EXPECT_LT(t.id("a"), t.id("b"));
    EXPECT_LT(t.id("b"), t.id("c"));
}

TEST(VocabTest, ReservedIds) {
    const Vocab v;
    EXPECT_EQ(v.token(kPadId), "<pad>");
    EXPECT_EQ(v.token(kUnkId), "<unk>");
    EXPECT_EQ(v.token(kEosId), "<eos>");
}

TEST(VocabTest, TruncationMapsRestToUnk) {
    const std::vector<std::string> texts{"t0 t1 t2 t3 t4 t5 t6 t7 t8 t9"};
    const Vocab v = Vocab::build(texts, 4);
    EXPECT_EQ(v.size(), kReservedTokens + 4);
    const auto ids = v.encode(texts[0]);
    EXPECT_EQ(std::count(ids.begin(), ids.end(), kUnkId), 6);
    EXPECT_EQ(v.count(kUnkId), 6u);
}

TEST(VocabTest, EncodeDecodeRoundTrip) {
    const std::vector<std::string> texts{"the cat sat on the mat ."};
    const Vocab v = Vocab::build(texts, 100);
    EXPECT_EQ(v.decode(v.encode(texts[0])), texts[0]);
    EXPECT_EQ(v.decode(v.encode("the dog")), "the <unk>");
    EXPECT_EQ(v.encode(v.decode(v.encode("the dog"))), v.encode("the dog"));
}

TEST(VocabTest, EmptyCorpusIsFatal) {
    const std::vector<std::string> none;
    EXPECT_THROW(Vocab::build(none, 10), InputError);
    const std::vector<std::string> blank{"   \n "};
    EXPECT_THROW(Vocab::build(blank, 10), InputError);
}

TEST(VocabTest, TsvRoundTrip) {
    const std::vector<std::string> texts{"x y y z z z"};
    const Vocab v = Vocab::build(texts, 2);
    const fs::path p = fs::temp_directory_path() / ("ffkv_vocab_" + std::to_string(::getpid()) + ".tsv");
    v.save_tsv(p);
    EXPECT_EQ(read_file(p).substr(0, 13), "<pad>\t0\t0\n<un");
    EXPECT_TRUE(Vocab::load_tsv(p) == v);
    write_file_atomic(p, "<pad>\t0\t0\n<unk>\t2\t0\n");
    EXPECT_THROW(Vocab::load_tsv(p), InputError);
    fs::remove(p);
}

TEST(Tokenizer, WordsAndPunctuation) {
    EXPECT_EQ(tokenize("Hello, world!"), (std::vector<std::string>{"Hello", ",", "world", "!"}));
    EXPECT_EQ(tokenize("it's 3.5"), (std::vector<std::string>{"it", "'", "s", "3", ".", "5"}));
    EXPECT_EQ(tokenize("no <unk> here"), (std::vector<std::string>{"no", "<unk>", "here"}));
    EXPECT_TRUE(tokenize(" \n\t").empty());
}

TEST(Segmentation, TwoSimpleSentences) {
    EXPECT_EQ(sentences_of("I ran. She ran."), (std::vector<std::string>{"I ran.", "She ran."}));
}

TEST(Segmentation, AbbreviationDoesNotSplit) {
    EXPECT_EQ(sentences_of("Dr. Smith ran."), (std::vector<std::string>{"Dr. Smith ran."}));
}

TEST(Segmentation, LowercaseContinuationDoesNotSplit) {
    EXPECT_EQ(sentences_of("It was late. then it rained."), (std::vector<std::string>{"It was late. then it rained."}));
    EXPECT_EQ(sentences_of("Go! Now? Yes."), (std::vector<std::string>{"Go!", "Now?", "Yes."}));
    EXPECT_TRUE(sentences_of("").empty());
}

TEST(Segmentation, MatchesHandLabeledFixture) {
    const std::string text = read_file(fs::path(FFKV_FIXTURE_DIR) / "segmentation.txt");
    std::istringstream labels(read_file(fs::path(FFKV_FIXTURE_DIR) / "segmentation_labels.txt"));
    std::vector<std::string> expected;
    for (std::string line; std::getline(labels, line);) expected.push_back(line);
    ASSERT_EQ(expected.size(), 20u);
    EXPECT_EQ(sentences_of(text), expected);
}

TEST(Segmentation, BoundariesFallBetweenTokens) {
    Rng rng(4);
    const char* pieces[] = {"Dr.", "he", "She", "ran", ".", "!", "?", "\"", "(", ")", "J.", "3.5", "A", "I", "etc.", "\n"};
    for (int trial = 0; trial < 200; ++trial) {
        std::string text;
        for (int i = 0; i < 30; ++i) {
            text += pieces[rng.below(std::size(pieces))];
            if (rng.below(3) != 0) text += ' ';
        }
        const auto toks = tokenize_spans(text);
        std::vector<TextSpan> rebuilt;
        std::size_t prev_end = 0;
        for (const auto& s : segment_sentences(text)) {
            EXPECT_GE(s.begin, prev_end);
            prev_end = s.end;
            for (const auto& t : tokenize_spans(std::string_view(text).substr(s.begin, s.end - s.begin))) {
                rebuilt.push_back({t.begin + s.begin, t.end + s.begin});
            }
        }
        EXPECT_EQ(rebuilt, toks) << text;
    }
}

TEST(CorpusTest, SpansOrderedAndTokensInRange) {
    const auto p = prepare_corpus({read_file(fs::path(FFKV_FIXTURE_DIR) / "segmentation.txt"), "A b. C d."}, 30, 8, 0.0);
    const auto& c = p.corpus;
    ASSERT_EQ(c.sentences().size(), 22u);
    for (std::size_t i = 0; i < c.sentences().size(); ++i) {
        const auto& s = c.sentences()[i];
        for (TokenId t : s.tokens) EXPECT_LT(t, c.vocab().size());
        EXPECT_LE(s.tokens.size(), 8u);
        if (i > 0 && c.sentences()[i - 1].document == s.document) {
            EXPECT_LE(c.sentences()[i - 1].span.end, s.span.begin);
        }
    }
    EXPECT_TRUE(c.sentences()[0].truncated);
    EXPECT_EQ(c.sentences()[0].tokens.size(), 8u);
    EXPECT_FALSE(c.sentences()[3].truncated);
}

TEST(Prefixes, ThreeWordSentence) {
    const auto p = prepare_corpus({"I love dogs"}, 10, 10, 0.0);
    const auto prefixes = enumerate_prefixes(p.corpus);
    ASSERT_EQ(prefixes.size(), 3u);
    EXPECT_EQ(p.corpus.prefix_text(prefixes[0]), "I");
    EXPECT_EQ(p.corpus.prefix_text(prefixes[1]), "I love");
    EXPECT_EQ(p.corpus.prefix_text(prefixes[2]), "I love dogs");
    EXPECT_EQ(prefixes[0].next_token, p.corpus.vocab().id("love"));
    EXPECT_EQ(prefixes[1].next_token, p.corpus.vocab().id("dogs"));
    EXPECT_EQ(prefixes[2].next_token, kEosId);
}

TEST(Prefixes, EmptyAndArithmetic) {
    const auto q = prepare_corpus({"A b c d e"}, 10, 10, 0.0);
    const std::vector<std::size_t> none;
    EXPECT_TRUE(enumerate_prefixes(q.corpus, none).empty());

    const auto five = prepare_corpus({"A", "A b", "A b c", "A b c d", "A b c d e"}, 10, 10, 0.0);
    ASSERT_EQ(five.corpus.sentences().size(), 5u);
    EXPECT_EQ(enumerate_prefixes(five.corpus).size(), 15u);
}

TEST(Prefixes, CountAndNextTokenProperties) {
    const std::string text = read_file(fs::path(FFKV_DATA_DIR) / "kjv_desk.txt").substr(0, 60000);
    const auto p = prepare_corpus(split_documents(text), 300, 64, 0.1);
    const auto prefixes = enumerate_prefixes(p.corpus);
    std::size_t total = 0;
    for (const auto& s : p.corpus.sentences()) total += s.tokens.size();
    EXPECT_EQ(prefixes.size(), total);
    for (const auto& pr : prefixes) {
        const auto& toks = p.corpus.sentences()[pr.sentence_id].tokens;
        ASSERT_GE(pr.end_index, 1u);
        ASSERT_LE(pr.end_index, toks.size());
        if (pr.end_index < toks.size()) {
            EXPECT_EQ(pr.next_token, toks[pr.end_index]);
        }
        else EXPECT_EQ(pr.next_token, kEosId);
    }
    for (const auto& s : p.corpus.sentences()) {
        EXPECT_EQ(p.corpus.vocab().encode(p.corpus.vocab().decode(s.tokens)), s.tokens);
    }
}

TEST(Split, FinalFractionIsValidation) {
    const auto s = split_sentences(10, 0.1);
    EXPECT_EQ(s.train.size(), 9u);
    EXPECT_EQ(s.validation, std::vector<std::size_t>{9});
    EXPECT_THROW(split_sentences(10, 1.0), InputError);
    EXPECT_TRUE(split_sentences(10, 0.0).validation.empty());
}

TEST(Split, VocabularyComesFromTrainingOnly) {
    const auto p = prepare_corpus({"Alpha beta. Alpha beta. Alpha beta. Gamma delta."}, 10, 10, 0.25);
    ASSERT_EQ(p.split.validation, std::vector<std::size_t>{3});
    EXPECT_EQ(p.corpus.vocab().id("Gamma"), kUnkId);
    EXPECT_NE(p.corpus.vocab().id("Alpha"), kUnkId);
}

TEST(Documents, BlankLinesAndDirectories) {
    EXPECT_EQ(split_documents("one\ntwo\n\n\nthree\n").size(), 2u);
    const fs::path dir = fs::temp_directory_path() / ("ffkv_docs_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    write_file_atomic(dir / "b.txt", "second");
    write_file_atomic(dir / "a.txt", "first\n\nmiddle");
    const auto docs = load_documents(dir);
    ASSERT_EQ(docs.size(), 3u);
    EXPECT_EQ(docs[0].substr(0, 5), "first");
    EXPECT_EQ(docs[2].substr(0, 6), "second");
    EXPECT_THROW(load_documents(dir / "missing"), InputError);
    fs::remove_all(dir);
}

}  // namespace
}  // namespace ffkv
