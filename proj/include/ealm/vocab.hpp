#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ealm {

using TokenId = int;

// Subword inventory built by byte-pair merges over character sequences.
// Ids are dense; 0..2 are reserved for <s>, <unk>, <pad>. Text is split
// into pieces (a word with its leading space, or a bare space run) and
// merges never cross piece boundaries, so decode(encode(s)) == s for any
// string over the training alphabet.
class Vocabulary {
public:
    static constexpr TokenId kBos = 0;
    static constexpr TokenId kUnk = 1;
    static constexpr TokenId kPad = 2;

    // Greedy highest-frequency pair merges until the non-reserved vocabulary
    // (alphabet + merged tokens) reaches target_size. Ties break on the
    // lexicographically smallest pair. target_size below the alphabet size
    // is a config error.
    static Vocabulary train_bpe(const std::vector<std::string>& corpus, int target_size);

    // convenience: target size = alphabet of the corpus + n_merges
    static Vocabulary train_bpe_merges(const std::vector<std::string>& corpus, int n_merges);

    std::vector<TokenId> encode(const std::string& text) const;
    // also reports the [start, end) character range each token covers
    std::vector<TokenId> encode_with_offsets(const std::string& text,
                                             std::vector<std::pair<int, int>>* offsets) const;
    std::string decode(const std::vector<TokenId>& ids) const;

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(TokenId id) const;
    TokenId bos() const { return kBos; }
    int merge_count() const { return static_cast<int>(merges_.size()); }

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);
    std::string serialize() const;
    static Vocabulary deserialize(const std::string& body);

    // stable digest of the full inventory + merge list, recorded in model
    // checkpoints so a model is never run against the wrong tokenizer
    uint64_t content_hash() const;

    bool operator==(const Vocabulary& o) const {
        return tokens_ == o.tokens_ && merges_ == o.merges_;
    }

    // exposed for tests: split into pieces whose concatenation is the input
    static std::vector<std::string> pretokenize(const std::string& text);

private:
    std::vector<std::string> tokens_;
    std::map<std::string, TokenId> token_ids_;
    std::vector<std::pair<std::string, std::string>> merges_;
    std::map<std::pair<std::string, std::string>, int> merge_rank_;
    mutable std::unordered_map<std::string, std::vector<TokenId>> piece_cache_;

    void index();
    std::vector<TokenId> encode_piece(const std::string& piece) const;
};

uint64_t fnv1a(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace ealm
