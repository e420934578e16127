#include "ealm/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "ealm/errors.hpp"

namespace ealm {

uint64_t fnv1a(const void* data, size_t len, uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; i++) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

const char* kReserved[3] = {"<s>", "<unk>", "<pad>"};

std::string escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case ' ': out += "\\s"; break;
            case '\t': out += "\\t"; break;
            case '\n': out += "\\n"; break;
            default: out += c;
        }
    }
    return out;
}

std::string unescape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (size_t i = 0; i < s.size(); i++) {
        if (s[i] == '\\' && i + 1 < s.size()) {
            i++;
            switch (s[i]) {
                case '\\': out += '\\'; break;
                case 's': out += ' '; break;
                case 't': out += '\t'; break;
                case 'n': out += '\n'; break;
                default: throw IoError("vocabulary: bad escape sequence");
            }
        } else {
            out += s[i];
        }
    }
    return out;
}

}  // namespace

std::vector<std::string> Vocabulary::pretokenize(const std::string& text) {
    std::vector<std::string> pieces;
    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        if (text[i] != ' ') {
            size_t j = i;
            while (j < n && text[j] != ' ') j++;
            pieces.push_back(text.substr(i, j - i));
            i = j;
        } else if (i + 1 < n && text[i + 1] != ' ') {
            size_t j = i + 1;
            while (j < n && text[j] != ' ') j++;
            pieces.push_back(text.substr(i, j - i));
            i = j;
        } else {
            pieces.push_back(" ");
            i++;
        }
    }
    return pieces;
}

Vocabulary Vocabulary::train_bpe(const std::vector<std::string>& corpus, int target_size) {
    if (corpus.empty()) throw ConfigError("train_bpe: corpus is empty");

    // piece frequencies; each piece starts as a sequence of 1-char symbols
    std::map<std::string, int64_t> piece_freq;
    std::set<std::string> alphabet;
    for (const auto& line : corpus) {
        for (auto& piece : pretokenize(line)) {
            piece_freq[piece]++;
            for (char c : piece) alphabet.insert(std::string(1, c));
        }
    }
    if (target_size < static_cast<int>(alphabet.size()))
        throw ConfigError("train_bpe: target size " + std::to_string(target_size) +
                          " is below alphabet size " + std::to_string(alphabet.size()));

    struct Word {
        std::vector<std::string> symbols;
        int64_t freq;
    };
    std::vector<Word> words;
    for (auto& [piece, freq] : piece_freq) {
        Word w;
        w.freq = freq;
        for (char c : piece) w.symbols.push_back(std::string(1, c));
        words.push_back(std::move(w));
    }

    std::vector<std::pair<std::string, std::string>> merges;
    const int n_merges = target_size - static_cast<int>(alphabet.size());
    for (int m = 0; m < n_merges; m++) {
        std::map<std::pair<std::string, std::string>, int64_t> pair_freq;
        for (const auto& w : words)
            for (size_t i = 0; i + 1 < w.symbols.size(); i++)
                pair_freq[{w.symbols[i], w.symbols[i + 1]}] += w.freq;
        if (pair_freq.empty()) break;
        // ordered map: the first entry holding the max count wins ties
        std::pair<std::string, std::string> best;
        int64_t best_count = 0;
        for (const auto& [pr, cnt] : pair_freq) {
            if (cnt > best_count) {
                best_count = cnt;
                best = pr;
            }
        }
        merges.push_back(best);
        const std::string joined = best.first + best.second;
        for (auto& w : words) {
            std::vector<std::string> out;
            out.reserve(w.symbols.size());
            for (size_t i = 0; i < w.symbols.size(); i++) {
                if (i + 1 < w.symbols.size() && w.symbols[i] == best.first &&
                    w.symbols[i + 1] == best.second) {
                    out.push_back(joined);
                    i++;
                } else {
                    out.push_back(w.symbols[i]);
                }
            }
            w.symbols = std::move(out);
        }
    }

    Vocabulary v;
    for (const char* r : kReserved) v.tokens_.push_back(r);
    for (const auto& c : alphabet) v.tokens_.push_back(c);
    for (const auto& [a, b] : merges) {
        std::string joined = a + b;
        if (std::find(v.tokens_.begin(), v.tokens_.end(), joined) == v.tokens_.end())
            v.tokens_.push_back(joined);
    }
    v.merges_ = std::move(merges);
    v.index();
    return v;
}

Vocabulary Vocabulary::train_bpe_merges(const std::vector<std::string>& corpus, int n_merges) {
    if (n_merges < 0) throw ConfigError("train_bpe: merge count must be non-negative");
    std::set<char> alphabet;
    for (const auto& line : corpus)
        for (char c : line) alphabet.insert(c);
    return train_bpe(corpus, static_cast<int>(alphabet.size()) + n_merges);
}

void Vocabulary::index() {
    token_ids_.clear();
    for (size_t i = 0; i < tokens_.size(); i++) token_ids_[tokens_[i]] = static_cast<TokenId>(i);
    merge_rank_.clear();
    for (size_t i = 0; i < merges_.size(); i++) merge_rank_[merges_[i]] = static_cast<int>(i);
    piece_cache_.clear();
}

std::vector<TokenId> Vocabulary::encode_piece(const std::string& piece) const {
    auto it = piece_cache_.find(piece);
    if (it != piece_cache_.end()) return it->second;

    std::vector<std::string> symbols;
    for (char c : piece) symbols.push_back(std::string(1, c));
    // repeatedly apply the lowest-ranked merge present anywhere in the piece
    while (symbols.size() > 1) {
        int best_rank = -1;
        for (size_t i = 0; i + 1 < symbols.size(); i++) {
            auto mit = merge_rank_.find({symbols[i], symbols[i + 1]});
            if (mit != merge_rank_.end() && (best_rank < 0 || mit->second < best_rank))
                best_rank = mit->second;
        }
        if (best_rank < 0) break;
        const auto& pr = merges_[best_rank];
        const std::string joined = pr.first + pr.second;
        std::vector<std::string> out;
        out.reserve(symbols.size());
        for (size_t i = 0; i < symbols.size(); i++) {
            if (i + 1 < symbols.size() && symbols[i] == pr.first && symbols[i + 1] == pr.second) {
                out.push_back(joined);
                i++;
            } else {
                out.push_back(symbols[i]);
            }
        }
        symbols = std::move(out);
    }

    std::vector<TokenId> ids;
    for (const auto& s : symbols) {
        auto tit = token_ids_.find(s);
        if (tit != token_ids_.end()) {
            ids.push_back(tit->second);
        } else {
            // off-alphabet characters degrade to <unk> per character
            for (size_t i = 0; i < s.size(); i++) ids.push_back(kUnk);
        }
    }
    piece_cache_[piece] = ids;
    return ids;
}

std::vector<TokenId> Vocabulary::encode(const std::string& text) const {
    return encode_with_offsets(text, nullptr);
}

std::vector<TokenId> Vocabulary::encode_with_offsets(
    const std::string& text, std::vector<std::pair<int, int>>* offsets) const {
    std::vector<TokenId> ids;
    if (offsets) offsets->clear();
    int pos = 0;
    for (const auto& piece : pretokenize(text)) {
        auto piece_ids = encode_piece(piece);
        if (offsets) {
            int p = pos;
            for (TokenId id : piece_ids) {
                int len = (id == kUnk) ? 1 : static_cast<int>(tokens_[id].size());
                offsets->push_back({p, p + len});
                p += len;
            }
        }
        ids.insert(ids.end(), piece_ids.begin(), piece_ids.end());
        pos += static_cast<int>(piece.size());
    }
    return ids;
}

std::string Vocabulary::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (id < 0 || id >= size()) throw UsageError("decode: token id out of range");
        out += tokens_[id];
    }
    return out;
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || id >= size()) throw UsageError("token: id out of range");
    return tokens_[id];
}

std::string Vocabulary::serialize() const {
    std::ostringstream os;
    os << "ealm-vocab v1\n";
    os << "tokens " << tokens_.size() << "\n";
    for (const auto& t : tokens_) os << escape(t) << "\n";
    os << "merges " << merges_.size() << "\n";
    for (const auto& [a, b] : merges_) os << escape(a) << "\t" << escape(b) << "\n";
    return os.str();
}

Vocabulary Vocabulary::deserialize(const std::string& body) {
    std::istringstream is(body);
    std::string line;
    if (!std::getline(is, line) || line != "ealm-vocab v1")
        throw IoError("vocabulary: bad or missing header");
    Vocabulary v;
    size_t n_tokens = 0, n_merges = 0;
    if (!(is >> line >> n_tokens) || line != "tokens") throw IoError("vocabulary: bad token count");
    std::getline(is, line);
    for (size_t i = 0; i < n_tokens; i++) {
        if (!std::getline(is, line)) throw IoError("vocabulary: truncated token list");
        v.tokens_.push_back(unescape(line));
    }
    if (!(is >> line >> n_merges) || line != "merges") throw IoError("vocabulary: bad merge count");
    std::getline(is, line);
    for (size_t i = 0; i < n_merges; i++) {
        if (!std::getline(is, line)) throw IoError("vocabulary: truncated merge list");
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw IoError("vocabulary: malformed merge line");
        v.merges_.push_back({unescape(line.substr(0, tab)), unescape(line.substr(tab + 1))});
    }
    for (int i = 0; i < 3; i++)
        if (v.tokens_.size() <= static_cast<size_t>(i) || v.tokens_[i] != kReserved[i])
            throw IoError("vocabulary: reserved tokens missing");
    v.index();
    return v;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("vocabulary: cannot write " + path);
    f << serialize();
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("vocabulary: cannot read " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return deserialize(os.str());
}

uint64_t Vocabulary::content_hash() const {
    std::string body = serialize();
    return fnv1a(body.data(), body.size());
}

}  // namespace ealm
