#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ffkv/model.hpp"

namespace ffkv {

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr std::size_t kReservedTokens = 3;

struct TextSpan {
    std::size_t begin = 0;  // byte offsets, half open
    std::size_t end = 0;
    bool operator==(const TextSpan&) const = default;
};

/// Word-level tokenizer: maximal runs of ASCII letters/digits (and non-ASCII
/// bytes) form words; the reserved markers <pad>, <unk> and <eos> are single
/// tokens; every other non-space byte is its own token.
std::vector<TextSpan> tokenize_spans(std::string_view text);
std::vector<std::string> tokenize(std::string_view text);

/// Rule-based splitter. A sentence ends at '.', '!' or '?' (plus any attached
/// closing quotes or brackets) when whitespace and then an uppercase letter or
/// digit follow, unless the word before a '.' is a known abbreviation or a
/// single-letter initial. Boundaries always fall between tokens.
std::vector<TextSpan> segment_sentences(std::string_view text);

class Vocab {
public:
    Vocab();

    /// Keeps the `max_vocab` most frequent tokens (ties lexicographic) after the
    /// reserved pad/unk/eos ids; everything else encodes as unk.
    static Vocab build(std::span<const std::string> texts, std::size_t max_vocab);

    std::size_t size() const noexcept { return tokens_.size(); }
    TokenId id(std::string_view token) const;
    const std::string& token(TokenId id) const { return tokens_.at(id); }
    std::uint64_t count(TokenId id) const { return counts_.at(id); }

    std::vector<TokenId> encode(std::string_view text) const;
    /// Tokens joined by single spaces.
    std::string decode(std::span<const TokenId> ids) const;

    /// The `n` most frequent non-reserved tokens.
    std::vector<TokenId> most_frequent(std::size_t n) const;

    /// TSV lines `token<TAB>id<TAB>count`, in id order.
    void save_tsv(const std::filesystem::path& path) const;
    static Vocab load_tsv(const std::filesystem::path& path);

    bool operator==(const Vocab& o) const { return tokens_ == o.tokens_ && counts_ == o.counts_; }

private:
    void add(std::string token, std::uint64_t count);

    std::vector<std::string> tokens_;
    std::vector<std::uint64_t> counts_;
    std::unordered_map<std::string, TokenId> index_;
};

struct Sentence {
    std::size_t document = 0;
    TextSpan span;                // within the document's text
    std::vector<TokenId> tokens;  // truncated to max_seq_len
    bool truncated = false;
};

/// A prefix x_1..x_j of a sentence; `end_index` is j (1-based length).
struct Prefix {
    std::size_t sentence_id = 0;
    std::size_t end_index = 0;
    TokenId next_token = kEosId;  // token j+1, or eos at the sentence end
    bool operator==(const Prefix&) const = default;
};

class Corpus {
public:
    Corpus() = default;
    /// Segments and encodes every document. Sentences longer than `max_len`
    /// tokens keep their first `max_len` tokens.
    static Corpus build(std::vector<std::string> documents, Vocab vocab, std::size_t max_len);

    const std::vector<std::string>& documents() const noexcept { return documents_; }
    const std::vector<Sentence>& sentences() const noexcept { return sentences_; }
    const Vocab& vocab() const noexcept { return vocab_; }
    std::size_t max_len() const noexcept { return max_len_; }

    std::span<const TokenId> prefix_tokens(const Prefix& p) const;
    std::string prefix_text(const Prefix& p) const;

private:
    std::vector<std::string> documents_;
    std::vector<Sentence> sentences_;
    Vocab vocab_;
    std::size_t max_len_ = 0;
};

/// Contiguous split: the final `val_fraction` of sentences is validation.
struct CorpusSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

CorpusSplit split_sentences(std::size_t n_sentences, double val_fraction);

/// Sentence texts of every document, in order (input to Vocab::build).
std::vector<std::string> sentence_texts(std::span<const std::string> documents);

struct PreparedCorpus {
    Corpus corpus;
    CorpusSplit split;
};

/// Builds the vocabulary from the training split only, then encodes everything.
PreparedCorpus prepare_corpus(std::vector<std::string> documents, std::size_t max_vocab, std::size_t max_len,
                              double val_fraction);
PreparedCorpus prepare_corpus(std::vector<std::string> documents, Vocab vocab, std::size_t max_len,
                              double val_fraction);

/// n prefixes per sentence of n tokens, in corpus order.
std::vector<Prefix> enumerate_prefixes(const Corpus& corpus, std::span<const std::size_t> sentence_ids);
std::vector<Prefix> enumerate_prefixes(const Corpus& corpus);

/// A file (documents separated by blank lines) or a directory of such files,
/// read in lexicographic path order.
std::vector<std::string> load_documents(const std::filesystem::path& path);
std::vector<std::string> split_documents(std::string_view text);

}  // namespace ffkv
