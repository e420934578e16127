#pragma once

#include <string>
#include <vector>

#include "ealm/checkpoint.hpp"
#include "ealm/optim.hpp"
#include "ealm/textdata.hpp"
#include "ealm/transformer.hpp"

namespace ealm {

struct PretrainedConfig {
    int n_layers = 2;
    int d_model = 64;
    int d_ff = 128;
    int n_heads = 4;
    double dropout = 0.1;
    int max_positions = 32;
    int vocab_size = 0;

    void validate() const {
        if (d_model % n_heads != 0)
            throw ConfigError("pretrained config: d_model not divisible by n_heads");
        if (n_layers < 1 || vocab_size < 4 || max_positions < 2)
            throw ConfigError("pretrained config: bad dimensions");
    }

    void to_meta(Checkpoint& ck) const {
        ck.set_meta("n_layers", std::to_string(n_layers));
        ck.set_meta("d_model", std::to_string(d_model));
        ck.set_meta("d_ff", std::to_string(d_ff));
        ck.set_meta("n_heads", std::to_string(n_heads));
        ck.set_meta("dropout", std::to_string(dropout));
        ck.set_meta("max_positions", std::to_string(max_positions));
        ck.set_meta("vocab_size", std::to_string(vocab_size));
    }

    static PretrainedConfig from_meta(const Checkpoint& ck) {
        PretrainedConfig c;
        c.n_layers = std::stoi(ck.meta("n_layers"));
        c.d_model = std::stoi(ck.meta("d_model"));
        c.d_ff = std::stoi(ck.meta("d_ff"));
        c.n_heads = std::stoi(ck.meta("n_heads"));
        c.dropout = std::stod(ck.meta("dropout"));
        c.max_positions = std::stoi(ck.meta("max_positions"));
        c.vocab_size = std::stoi(ck.meta("vocab_size"));
        return c;
    }
};

// Multi-layer decoder with global causal self-attention and trainable
// absolute positional embeddings. Output projection has no bias; input and
// output embeddings are separate tensors, both exported for sharing.
template <class Real>
class PretrainedLM {
public:
    PretrainedConfig cfg;
    ParamRegistry<Real> params;
    Tensor<Real> tok_emb, pos_emb, wo;
    std::vector<TransformerLayer<Real>> layers;
    Tensor<Real> lnf_g, lnf_b;

    PretrainedLM(const PretrainedConfig& c, Rng* init_rng, bool trainable = true) : cfg(c) {
        cfg.validate();
        const double sd = 0.02;
        tok_emb = params.create({cfg.vocab_size, cfg.d_model}, "tok_emb", init_rng, sd, trainable);
        pos_emb = params.create({cfg.max_positions, cfg.d_model}, "pos_emb", init_rng, sd,
                                trainable);
        layers.resize(cfg.n_layers);
        for (int i = 0; i < cfg.n_layers; i++)
            layers[i].build(params, "layer" + std::to_string(i), cfg.d_model, cfg.n_heads,
                            cfg.d_ff, 0, init_rng, trainable);
        lnf_g = params.create_filled({1, cfg.d_model}, "lnf_g", Real(1), trainable);
        lnf_b = params.create({1, cfg.d_model}, "lnf_b", nullptr, 0, trainable);
        wo = params.create({cfg.d_model, cfg.vocab_size}, "wo", init_rng, sd, trainable);
    }

    struct Out {
        Tensor<Real> states;  // T x d, final layer after norm
        Tensor<Real> logits;  // T x |V|
        bool truncated = false;
    };

    Out forward(std::vector<TokenId> ids, bool train, Rng& rng) const {
        Out out;
        if (static_cast<int>(ids.size()) > cfg.max_positions) {
            ids.resize(cfg.max_positions);
            out.truncated = true;
        }
        if (ids.empty()) throw UsageError("pretrained forward: empty input");
        const int t = static_cast<int>(ids.size());
        Tensor<Real> h = add(gather_rows(tok_emb, ids), row_slice(pos_emb, 0, t));
        Tensor<Real> mask = causal_mask<Real>(t);
        for (const auto& layer : layers)
            h = layer.forward(h, mask, nullptr, cfg.dropout, train, rng);
        out.states = layer_norm(h, lnf_g, lnf_b);
        out.logits = matmul(out.states, wo);
        return out;
    }

    uint64_t shared_embed_hash() const { return params.hash_of({"tok_emb", "wo"}); }

    Checkpoint to_checkpoint(uint64_t vocab_hash, uint64_t seed, int64_t tokens_seen) const {
        Checkpoint ck;
        ck.kind = "pretrained";
        cfg.to_meta(ck);
        ck.set_meta("vocab_hash", hash_hex(vocab_hash));
        ck.set_meta("seed", std::to_string(seed));
        ck.set_meta("tokens_seen", std::to_string(tokens_seen));
        params.save_into(ck);
        ck.set_meta("shared_embed_hash", hash_hex(shared_embed_hash()));
        return ck;
    }

    static PretrainedLM from_checkpoint(const Checkpoint& ck, bool trainable) {
        if (ck.kind != "pretrained")
            throw ContractError("expected a pretrained checkpoint, got kind '" + ck.kind + "'");
        PretrainedLM lm(PretrainedConfig::from_meta(ck), nullptr, trainable);
        lm.params.load_from(ck);
        return lm;
    }
};

struct TrainStats {
    int64_t tokens_seen = 0;
    double first_epoch_loss = 0;
    double last_epoch_loss = 0;
    std::vector<double> epoch_losses;
};

// Next-token training over <s>-prefixed utterances: teacher forcing,
// gradients accumulated over grad_accum utterances per optimizer step.
template <class Real>
TrainStats pretrain(PretrainedLM<Real>& model, const std::vector<Utterance>& corpus,
                    const LrSchedule& sched, uint64_t seed, int epochs, int grad_accum) {
    if (corpus.empty()) throw ConfigError("pretrain: empty corpus");
    if (grad_accum < 1) throw ConfigError("pretrain: grad_accum must be positive");
    for (const auto& u : corpus)
        for (TokenId id : u.tokens)
            if (id < 0 || id >= model.cfg.vocab_size)
                throw ConfigError("pretrain: corpus token id outside the model vocabulary");
    AdamW<Real> opt(model.params.trainable());
    Rng order_rng = Rng(seed).derive(1);
    Rng drop_rng = Rng(seed).derive(2);

    TrainStats stats;
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); i++) order[i] = i;

    for (int epoch = 0; epoch < epochs; epoch++) {
        order_rng.shuffle(order);
        double epoch_loss = 0;
        int64_t epoch_tokens = 0;
        int pending = 0;
        for (size_t idx : order) {
            const Utterance& u = corpus[idx];
            if (u.tokens.size() < 2) continue;
            auto out = model.forward(u.tokens, true, drop_rng);
            const int t = out.logits.rows();
            std::vector<TokenId> targets(u.tokens.begin() + 1, u.tokens.begin() + t);
            Tensor<Real> ce = cross_entropy(row_slice(out.logits, 0, t - 1), targets);
            epoch_loss += ce.item() * targets.size();
            epoch_tokens += targets.size();
            backward(scale(ce, 1.0 / grad_accum));
            stats.tokens_seen += targets.size();
            if (++pending == grad_accum) {
                opt.step(sched.at(stats.tokens_seen));
                opt.zero_grad();
                pending = 0;
            }
        }
        if (pending > 0) {
            opt.step(sched.at(stats.tokens_seen));
            opt.zero_grad();
        }
        stats.epoch_losses.push_back(epoch_tokens ? epoch_loss / epoch_tokens : 0);
    }
    if (!stats.epoch_losses.empty()) {
        stats.first_epoch_loss = stats.epoch_losses.front();
        stats.last_epoch_loss = stats.epoch_losses.back();
    }
    return stats;
}

}  // namespace ealm
