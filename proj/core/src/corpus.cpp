#include "ffkv/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "ffkv/error.hpp"

namespace ffkv {

namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool is_word(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c >= 0x80;
}

bool is_terminator(std::string_view tok) { return tok == "." || tok == "!" || tok == "?"; }

bool is_closer(std::string_view tok) { return tok == "\"" || tok == "'" || tok == ")" || tok == "]"; }

bool is_opener(std::string_view tok) { return tok == "\"" || tok == "'" || tok == "(" || tok == "["; }

bool starts_upper_or_digit(std::string_view tok) {
    const unsigned char c = static_cast<unsigned char>(tok.front());
    return (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
}

// "<pad>", "<unk>" and "<eos>" read back as single tokens.
std::size_t reserved_length(std::string_view rest) {
    for (std::string_view r : {"<pad>", "<unk>", "<eos>"}) {
        if (rest.substr(0, r.size()) == r) {
            return r.size();
        }
    }
    return 0;
}

const std::set<std::string_view>& abbreviations() {
    static const std::set<std::string_view> list = {
        "Mr", "Mrs", "Ms", "Dr", "Prof", "St", "Jr", "Sr", "Gen", "Col", "Capt", "Lt", "Sgt", "Rev", "Hon",
        "Mt", "No", "Vol", "vs", "etc", "Inc", "Ltd", "Co", "Corp", "Dept", "Univ", "approx", "Jan", "Feb",
        "Mar", "Apr", "Jun", "Jul", "Aug", "Sep", "Sept", "Oct", "Nov", "Dec", "cf", "al", "Fig", "Eq",
    };
    return list;
}

}  // namespace

std::vector<TextSpan> tokenize_spans(std::string_view text) {
    std::vector<TextSpan> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (is_space(c)) {
            ++i;
        } else if (const std::size_t r = reserved_length(text.substr(i)); r > 0) {
            out.push_back({i, i + r});
            i += r;
        } else if (is_word(c)) {
            std::size_t j = i + 1;
            while (j < text.size() && is_word(static_cast<unsigned char>(text[j]))) {
                ++j;
            }
            out.push_back({i, j});
            i = j;
        } else {
            out.push_back({i, i + 1});
            ++i;
        }
    }
    return out;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    for (const auto& s : tokenize_spans(text)) {
        out.emplace_back(text.substr(s.begin, s.end - s.begin));
    }
    return out;
}

std::vector<TextSpan> segment_sentences(std::string_view text) {
    const auto toks = tokenize_spans(text);
    auto tok = [&](std::size_t i) { return text.substr(toks[i].begin, toks[i].end - toks[i].begin); };
    auto gap_before = [&](std::size_t i) { return i > 0 && toks[i].begin > toks[i - 1].end; };

    std::vector<TextSpan> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (!is_terminator(tok(i))) {
            continue;
        }
        if (tok(i) == "." && i > 0 && !gap_before(i)) {
            const auto prev = tok(i - 1);
            const bool initial = prev.size() == 1 && prev[0] >= 'A' && prev[0] <= 'Z' && prev != "I";
            if (initial || abbreviations().count(prev)) {
                continue;
            }
        }
        std::size_t last = i;
        while (last + 1 < toks.size() && !gap_before(last + 1) &&
               (is_closer(tok(last + 1)) || is_terminator(tok(last + 1)))) {
            ++last;
        }
        const std::size_t next = last + 1;
        bool boundary = next >= toks.size();
        if (!boundary && gap_before(next)) {
            if (starts_upper_or_digit(tok(next))) {
                boundary = true;
            } else if (is_opener(tok(next)) && next + 1 < toks.size() && starts_upper_or_digit(tok(next + 1))) {
                boundary = true;
            }
        }
        if (boundary) {
            out.push_back({toks[start].begin, toks[last].end});
            start = next;
            i = last;
        }
    }
    if (start < toks.size()) {
        out.push_back({toks[start].begin, toks.back().end});
    }
    return out;
}

Vocab::Vocab() {
    add("<pad>", 0);
    add("<unk>", 0);
    add("<eos>", 0);
}

void Vocab::add(std::string token, std::uint64_t count) {
    const auto id = static_cast<TokenId>(tokens_.size());
    if (!index_.emplace(token, id).second) {
        throw InputError("duplicate vocabulary token '" + token + "'");
    }
    tokens_.push_back(std::move(token));
    counts_.push_back(count);
}

Vocab Vocab::build(std::span<const std::string> texts, std::size_t max_vocab) {
    std::map<std::string, std::uint64_t> freq;
    std::uint64_t total = 0;
    for (const auto& t : texts) {
        for (auto& tok : tokenize(t)) {
            if (reserved_length(tok) == tok.size()) {
                continue;
            }
            ++freq[std::move(tok)];
            ++total;
        }
    }
    if (total == 0) {
        throw InputError("cannot build a vocabulary from an empty corpus");
    }
    std::vector<std::pair<std::string, std::uint64_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    std::uint64_t unk = 0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (i < max_vocab) {
            v.add(ranked[i].first, ranked[i].second);
        } else {
            unk += ranked[i].second;
        }
    }
    v.counts_[kUnkId] = unk;
    return v;
}

TokenId Vocab::id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& s : tokenize_spans(text)) {
        ids.push_back(id(text.substr(s.begin, s.end - s.begin)));
    }
    return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) {
            out += ' ';
        }
        out += token(ids[i]);
    }
    return out;
}

std::vector<TokenId> Vocab::most_frequent(std::size_t n) const {
    std::vector<TokenId> ids;
    for (TokenId i = kReservedTokens; i < tokens_.size(); ++i) {
        ids.push_back(i);
    }
    std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) { return counts_[a] > counts_[b]; });
    if (ids.size() > n) {
        ids.resize(n);
    }
    return ids;
}

void Vocab::save_tsv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError("cannot write vocabulary file '" + path.string() + "'");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        out << tokens_[i] << '\t' << i << '\t' << counts_[i] << '\n';
    }
}

Vocab Vocab::load_tsv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot read vocabulary file '" + path.string() + "'");
    }
    Vocab v;
    v.tokens_.clear();
    v.counts_.clear();
    v.index_.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) {
            throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected token<TAB>id<TAB>count");
        }
        const auto id = std::stoull(line.substr(t1 + 1, t2 - t1 - 1));
        if (id != v.tokens_.size()) {
            throw InputError(path.string() + ":" + std::to_string(lineno) + ": ids must be dense and ordered");
        }
        v.add(line.substr(0, t1), std::stoull(line.substr(t2 + 1)));
    }
    if (v.size() < kReservedTokens || v.token(kPadId) != "<pad>" || v.token(kUnkId) != "<unk>" ||
        v.token(kEosId) != "<eos>") {
        throw InputError(path.string() + ": missing reserved tokens <pad>, <unk>, <eos>");
    }
    return v;
}

Corpus Corpus::build(std::vector<std::string> documents, Vocab vocab, std::size_t max_len) {
    if (max_len < 1) {
        throw InputError("max_len must be at least 1");
    }
    Corpus c;
    c.documents_ = std::move(documents);
    c.vocab_ = std::move(vocab);
    c.max_len_ = max_len;
    for (std::size_t d = 0; d < c.documents_.size(); ++d) {
        const std::string_view text = c.documents_[d];
        for (const auto& span : segment_sentences(text)) {
            Sentence s;
            s.document = d;
            s.span = span;
            s.tokens = c.vocab_.encode(text.substr(span.begin, span.end - span.begin));
            if (s.tokens.empty()) {
                continue;
            }
            if (s.tokens.size() > max_len) {
                s.tokens.resize(max_len);
                s.truncated = true;
            }
            c.sentences_.push_back(std::move(s));
        }
    }
    return c;
}

std::span<const TokenId> Corpus::prefix_tokens(const Prefix& p) const {
    const auto& toks = sentences_.at(p.sentence_id).tokens;
    if (p.end_index < 1 || p.end_index > toks.size()) {
        throw InputError("prefix end_index out of range");
    }
    return std::span<const TokenId>(toks).first(p.end_index);
}

std::string Corpus::prefix_text(const Prefix& p) const { return vocab_.decode(prefix_tokens(p)); }

CorpusSplit split_sentences(std::size_t n_sentences, double val_fraction) {
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
        throw InputError("val_fraction must lie in [0, 1)");
    }
    const auto n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(n_sentences)));
    CorpusSplit s;
    for (std::size_t i = 0; i < n_sentences; ++i) {
        (i + n_val < n_sentences ? s.train : s.validation).push_back(i);
    }
    return s;
}

std::vector<std::string> sentence_texts(std::span<const std::string> documents) {
    std::vector<std::string> out;
    for (const auto& doc : documents) {
        for (const auto& span : segment_sentences(doc)) {
            out.push_back(doc.substr(span.begin, span.end - span.begin));
        }
    }
    return out;
}

PreparedCorpus prepare_corpus(std::vector<std::string> documents, std::size_t max_vocab, std::size_t max_len,
                              double val_fraction) {
    const auto texts = sentence_texts(documents);
    // The vocabulary sees the same sentences that Corpus::build keeps (non-empty ones).
    std::vector<std::string> nonempty;
    for (const auto& t : texts) {
        if (!tokenize_spans(t).empty()) {
            nonempty.push_back(t);
        }
    }
    const auto split = split_sentences(nonempty.size(), val_fraction);
    std::vector<std::string> train_texts;
    for (auto i : split.train) {
        train_texts.push_back(nonempty[i]);
    }
    Vocab vocab = Vocab::build(train_texts, max_vocab);
    return prepare_corpus(std::move(documents), std::move(vocab), max_len, val_fraction);
}

PreparedCorpus prepare_corpus(std::vector<std::string> documents, Vocab vocab, std::size_t max_len,
                              double val_fraction) {
    PreparedCorpus p;
    p.corpus = Corpus::build(std::move(documents), std::move(vocab), max_len);
    p.split = split_sentences(p.corpus.sentences().size(), val_fraction);
    return p;
}

std::vector<Prefix> enumerate_prefixes(const Corpus& corpus, std::span<const std::size_t> sentence_ids) {
    std::vector<Prefix> out;
    for (const auto sid : sentence_ids) {
        const auto& toks = corpus.sentences().at(sid).tokens;
        for (std::size_t j = 1; j <= toks.size(); ++j) {
            out.push_back(Prefix{sid, j, j < toks.size() ? toks[j] : kEosId});
        }
    }
    return out;
}

std::vector<Prefix> enumerate_prefixes(const Corpus& corpus) {
    std::vector<std::size_t> all(corpus.sentences().size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    return enumerate_prefixes(corpus, all);
}

std::vector<std::string> split_documents(std::string_view text) {
    std::vector<std::string> docs;
    std::string current;
    std::size_t pos = 0;
    bool pending_blank = false;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        const auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        const bool blank = std::all_of(line.begin(), line.end(), [](char c) { return is_space(static_cast<unsigned char>(c)); });
        if (blank) {
            pending_blank = true;
        } else {
            if (pending_blank && !current.empty()) {
                docs.push_back(std::move(current));
                current.clear();
            }
            pending_blank = false;
            if (!current.empty()) {
                current += '\n';
            }
            current += line;
        }
        if (nl == std::string_view::npos) {
            break;
        }
        pos = nl + 1;
    }
    if (!current.empty()) {
        docs.push_back(std::move(current));
    }
    return docs;
}

std::vector<std::string> load_documents(const std::filesystem::path& path) {
    auto read = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) {
            throw InputError("cannot read corpus file '" + p.string() + "'");
        }
        return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    if (!std::filesystem::exists(path)) {
        throw InputError("corpus path '" + path.string() + "' does not exist");
    }
    std::vector<std::string> docs;
    if (std::filesystem::is_directory(path)) {
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(path)) {
            if (e.is_regular_file()) {
                files.push_back(e.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            for (auto& d : split_documents(read(f))) {
                docs.push_back(std::move(d));
            }
        }
    } else {
        docs = split_documents(read(path));
    }
    if (docs.empty()) {
        throw InputError("corpus '" + path.string() + "' contains no text");
    }
    return docs;
}

}  // namespace ffkv
