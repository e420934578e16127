#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "ealm/entity.hpp"
#include "ealm/eval.hpp"
#include "ealm/pretrained.hpp"

using namespace ealm;

namespace {

Vocabulary tiny_vocab() {
    return Vocabulary::train_bpe({"play a sky full of stars by coldplay", "call mom now",
                                  "what time is it", "turn the volume up", "zanri kalo mita",
                                  "vosu dane peri", "shaka brulo stone"},
                                 64);
}

std::vector<Utterance> tiny_corpus(const Vocabulary& v) {
    Corpus c;
    c.lines.push_back({"play a sky full of stars", {}});
    c.lines.push_back({"call mom now", {}});
    c.lines.push_back({"what time is it", {}});
    c.lines.push_back({"turn the volume up", {}});
    c.lines.push_back({"play stars by coldplay", {}});
    c.lines.push_back({"call mom", {}});
    c.lines.push_back({"what is the time", {}});
    c.lines.push_back({"play it now", {}});
    c.lines.push_back({"turn it up", {}});
    c.lines.push_back({"play a song", {}});
    return tokenize_corpus(v, c, 32);
}

PretrainedConfig small_cfg(int vocab_size) {
    PretrainedConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.d_ff = 64;
    cfg.n_heads = 4;
    cfg.dropout = 0.1;
    cfg.max_positions = 32;
    cfg.vocab_size = vocab_size;
    return cfg;
}

LrSchedule fast_schedule() {
    LrSchedule s;
    s.lr_start = 1e-4;
    s.lr_max = 3e-3;
    s.lr_end = 1e-4;
    s.warmup_tokens = 200;
    s.decay_interval_tokens = 100000;
    return s;
}

}  // namespace

TEST_CASE("pretrained forward shapes and normalization") {
    Vocabulary v = tiny_vocab();
    Rng init(3);
    PretrainedLM<double> lm(small_cfg(v.size()), &init);
    Rng rng(0);
    auto out = lm.forward({v.bos()}, false, rng);
    CHECK(out.logits.rows() == 1);
    CHECK(out.logits.cols() == v.size());
    TensorD p = softmax(out.logits, 1);
    double sum = 0;
    for (double x : p.value()) sum += x;
    CHECK(std::fabs(sum - 1.0) < 1e-6);
}

TEST_CASE("pretrained causality: appending a token leaves earlier states unchanged") {
    Vocabulary v = tiny_vocab();
    Rng init(5);
    PretrainedLM<double> lm(small_cfg(v.size()), &init);
    Rng rng(0);
    std::vector<TokenId> ids = v.encode("play a sky full");
    ids.insert(ids.begin(), v.bos());
    auto short_out = lm.forward(ids, false, rng);
    std::vector<TokenId> longer = ids;
    longer.push_back(ids.back());
    auto long_out = lm.forward(longer, false, rng);
    for (int i = 0; i < short_out.states.rows(); i++)
        for (int j = 0; j < short_out.states.cols(); j++)
            CHECK(std::fabs(short_out.states.at(i, j) - long_out.states.at(i, j)) <= 1e-6);
}

TEST_CASE("pretrained causality under input perturbation") {
    Vocabulary v = tiny_vocab();
    Rng init(6);
    PretrainedLM<double> lm(small_cfg(v.size()), &init);
    Rng rng(0);
    std::vector<TokenId> ids = {v.bos(), 5, 6, 7, 8};
    auto a = lm.forward(ids, false, rng);
    std::vector<TokenId> perturbed = ids;
    perturbed[3] = 9;  // position 3 changed: logits at positions < 3 must not move
    auto b = lm.forward(perturbed, false, rng);
    for (int i = 0; i < 3; i++)
        for (int j = 0; j < a.logits.cols(); j++)
            CHECK(std::fabs(a.logits.at(i, j) - b.logits.at(i, j)) <= 1e-9);
}

TEST_CASE("zero output path gives the uniform distribution and ln|V| loss") {
    Vocabulary v = tiny_vocab();
    Rng init(7);
    PretrainedLM<double> lm(small_cfg(v.size()), &init);
    std::fill(lm.wo.value().begin(), lm.wo.value().end(), 0.0);
    Rng rng(0);
    std::vector<TokenId> ids = {v.bos(), 4, 5};
    auto out = lm.forward(ids, false, rng);
    std::vector<TokenId> targets = {4, 5};
    double loss = cross_entropy(row_slice(out.logits, 0, 2), targets).item();
    CHECK(loss == doctest::Approx(std::log(static_cast<double>(v.size()))).epsilon(1e-9));
}

TEST_CASE("pretraining lowers held-in perplexity and is bitwise deterministic") {
    Vocabulary v = tiny_vocab();
    auto corpus = tiny_corpus(v);

    auto run = [&](uint64_t seed) {
        Rng init = Rng(seed).derive(0);
        PretrainedLM<float> lm(small_cfg(v.size()), &init);
        EvalReport before = evaluate_pretrained(lm, corpus, "held-in");
        pretrain(lm, corpus, fast_schedule(), seed, 3, 2);
        EvalReport after = evaluate_pretrained(lm, corpus, "held-in");
        CHECK(after.all.perplexity() < before.all.perplexity());
        return lm.to_checkpoint(v.content_hash(), seed, 0);
    };
    Checkpoint a = run(11);
    Checkpoint b = run(11);
    auto ba = a.serialize(), bb = b.serialize();
    REQUIRE(ba.size() == bb.size());
    CHECK(std::memcmp(ba.data(), bb.data(), ba.size()) == 0);
}

TEST_CASE("memorization micro-test: 2-layer model fits 10 lines below ppl 1.3") {
    // ten fixed utterances; lengths keep the unavoidable ln(10) of
    // line-identity entropy amortized well under the 1.3 target
    Corpus c;
    c.lines.push_back({"play a sky full of stars by coldplay right now please", {}});
    c.lines.push_back({"call mom now and tell her that i will be late", {}});
    c.lines.push_back({"what time is it in the morning over there today", {}});
    c.lines.push_back({"turn the volume up a little bit more for me", {}});
    c.lines.push_back({"skip this track and put on the next one instead", {}});
    c.lines.push_back({"pause the music until i am back in the room", {}});
    c.lines.push_back({"resume playback of the album i was listening to", {}});
    c.lines.push_back({"cancel my alarm for tomorrow morning at seven thirty", {}});
    c.lines.push_back({"stop the timer i set for the pasta earlier", {}});
    c.lines.push_back({"queue up kalo mita and zanri vosu after this", {}});
    std::vector<std::string> lines;
    for (const auto& u : c.lines) lines.push_back(u.text);
    Vocabulary v = Vocabulary::train_bpe(lines, 96);
    auto corpus = tokenize_corpus(v, c, 32);

    Rng init(17);
    PretrainedLM<float> lm(small_cfg(v.size()), &init);
    LrSchedule s = fast_schedule();
    s.lr_max = 4e-3;
    pretrain(lm, corpus, s, 17, 150, 2);
    EvalReport rep = evaluate_pretrained(lm, corpus, "memorize");
    CHECK(rep.all.perplexity() < 1.3);
}

TEST_CASE("pretrained checkpoint round-trip reproduces the forward pass") {
    Vocabulary v = tiny_vocab();
    Rng init(23);
    PretrainedLM<float> lm(small_cfg(v.size()), &init);
    Checkpoint ck = lm.to_checkpoint(v.content_hash(), 23, 0);
    PretrainedLM<float> lm2 = PretrainedLM<float>::from_checkpoint(ck, false);
    Rng rng(0);
    std::vector<TokenId> ids = {v.bos(), 3, 9, 12};
    auto a = lm.forward(ids, false, rng);
    auto b = lm2.forward(ids, false, rng);
    CHECK(std::memcmp(a.logits.value().data(), b.logits.value().data(),
                      a.logits.size() * sizeof(float)) == 0);
    // loaded-for-composition models are frozen
    CHECK(lm2.params.trainable().empty());
}

TEST_CASE("pretrain rejects a corpus tokenized with the wrong vocabulary") {
    Vocabulary v = tiny_vocab();
    Rng init(43);
    PretrainedConfig cfg = small_cfg(8);  // much smaller vocab than the corpus ids
    PretrainedLM<float> lm(cfg, &init);
    auto corpus = tiny_corpus(v);
    CHECK_THROWS_AS(pretrain(lm, corpus, fast_schedule(), 1, 1, 1), ConfigError);
}

TEST_CASE("overlength input truncates with a warning flag") {
    Vocabulary v = tiny_vocab();
    PretrainedConfig cfg = small_cfg(v.size());
    cfg.max_positions = 4;
    Rng init(29);
    PretrainedLM<double> lm(cfg, &init);
    Rng rng(0);
    auto out = lm.forward({0, 5, 6, 7, 8, 9}, false, rng);
    CHECK(out.truncated);
    CHECK(out.states.rows() == 4);
}

// ---- entity model ----

namespace {

EntityConfig entity_cfg(int vocab_size, int k = 4) {
    EntityConfig cfg;
    cfg.entity_type = "song";
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.d_ff = 64;
    cfg.n_heads = 4;
    cfg.dropout = 0.1;
    cfg.k = k;
    cfg.vocab_size = vocab_size;
    return cfg;
}

}  // namespace

TEST_CASE("masking equivalence: forward_multi rows equal independent truncated forwards") {
    Rng meta(101);
    for (int trial = 0; trial < 12; trial++) {
        const int k = 1 + static_cast<int>(meta.uniform_below(4));
        EntityConfig cfg = entity_cfg(40, k);
        Rng init = meta.derive(trial);
        EntityLM<double> lm(cfg, &init);
        // shared embeddings are zero-initialized by default; randomize them
        Rng emb = meta.derive(1000 + trial);
        for (auto& x : lm.tok_emb.value()) x = emb.gaussian(0, 0.5);

        const int hist_len = static_cast<int>(meta.uniform_below(k + 3));
        std::vector<TokenId> history(hist_len);
        for (auto& id : history) id = 3 + static_cast<int>(meta.uniform_below(37));

        Rng rng(0);
        TensorD multi = lm.forward_multi(0, history, false, rng);
        REQUIRE(multi.rows() == k + 1);
        const int m = std::min<int>(k, hist_len);
        for (int l = 0; l <= k; l++) {
            const int l_eff = std::min(l, m);
            std::vector<TokenId> ctx(history.end() - l_eff, history.end());
            TensorD single = lm.forward_single(0, ctx, false, rng);
            for (int j = 0; j < multi.cols(); j++)
                CHECK(std::fabs(multi.at(l, j) - single.at(0, j)) <= 1e-6);
        }
    }
}

TEST_CASE("k=0 entity model emits the <s>-only encoding") {
    EntityConfig cfg = entity_cfg(20, 0);
    Rng init(31);
    EntityLM<double> lm(cfg, &init);
    Rng emb(77);
    for (auto& x : lm.tok_emb.value()) x = emb.gaussian(0, 0.5);
    Rng rng(0);
    TensorD multi = lm.forward_multi(0, {5, 6, 7}, false, rng);
    REQUIRE(multi.rows() == 1);
    TensorD single = lm.forward_single(0, {}, false, rng);
    for (int j = 0; j < multi.cols(); j++)
        CHECK(std::fabs(multi.at(0, j) - single.at(0, j)) <= 1e-9);
}

TEST_CASE("relative positions: only the last k history tokens matter") {
    EntityConfig cfg = entity_cfg(40, 3);
    Rng init(37);
    EntityLM<double> lm(cfg, &init);
    Rng emb(78);
    for (auto& x : lm.tok_emb.value()) x = emb.gaussian(0, 0.5);
    Rng rng(0);
    std::vector<TokenId> long_history = {9, 8, 7, 11, 12, 13};
    std::vector<TokenId> window(long_history.end() - 3, long_history.end());
    TensorD a = lm.forward_multi(0, long_history, false, rng);
    TensorD b = lm.forward_multi(0, window, false, rng);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); i++)
        CHECK(a.value()[i] == doctest::Approx(b.value()[i]).epsilon(1e-12));
}

namespace {

struct EntityFixture {
    Vocabulary vocab;
    Checkpoint pre_ck;

    EntityFixture() : vocab(tiny_vocab()) {
        PretrainedConfig pcfg = small_cfg(vocab.size());
        Rng init(41);
        PretrainedLM<float> pre(pcfg, &init);
        pre_ck = pre.to_checkpoint(vocab.content_hash(), 41, 0);
    }
};

}  // namespace

TEST_CASE("entity training freezes shared embeddings bit-for-bit and learns") {
    EntityFixture fx;
    Catalogue cat{"song", {}};
    for (const char* s : {"zanri kalo", "mita vosu", "dane peri", "shaka brulo", "stone kalo",
                          "kalo mita", "vosu zanri", "peri dane"})
        cat.entries.push_back({s, 1.0});

    EntityConfig cfg = entity_cfg(fx.vocab.size());
    cfg.d_model = 32;
    EntityTrainOptions opt;
    opt.n_samples = 400;
    opt.schedule = fast_schedule();
    opt.seed = 43;

    // perplexity under the untrained model
    Rng init0 = Rng(opt.seed).derive(11);
    EntityLM<float> untrained(cfg, &init0, true);
    untrained.adopt_shared_embeddings(fx.pre_ck);
    double before = 0;
    for (const auto& e : cat.entries) before += untrained.surface_nll(fx.vocab, e.surface);

    Checkpoint ck = train_entity_model<float>(cat, fx.vocab, fx.pre_ck, cfg, opt);

    // freeze contract: byte-identical shared embeddings
    const auto& pre_emb = fx.pre_ck.blob("tok_emb").bytes;
    const auto& ent_emb = ck.blob("tok_emb").bytes;
    REQUIRE(pre_emb.size() == ent_emb.size());
    CHECK(std::memcmp(pre_emb.data(), ent_emb.data(), pre_emb.size()) == 0);
    const auto& pre_wo = fx.pre_ck.blob("wo").bytes;
    const auto& ent_wo = ck.blob("wo").bytes;
    CHECK(std::memcmp(pre_wo.data(), ent_wo.data(), pre_wo.size()) == 0);
    CHECK(ck.meta("shared_embed_hash") == fx.pre_ck.meta("shared_embed_hash"));
    CHECK(ck.blob("tok_emb").frozen);
    CHECK(ck.blob("wo").frozen);

    EntityLM<float> trained = EntityLM<float>::from_checkpoint(ck, false);
    double after = 0;
    for (const auto& e : cat.entries) after += trained.surface_nll(fx.vocab, e.surface);
    CHECK(after < before);
}

TEST_CASE("popularity weighting steers entity perplexity") {
    EntityFixture fx;
    std::vector<std::string> half1 = {"zanri kalo", "mita vosu", "dane peri", "kalo kalo"};
    std::vector<std::string> half2 = {"shaka brulo", "stone mita", "peri zanri", "vosu vosu"};

    auto make_cat = [&](double w1, double w2) {
        Catalogue c{"song", {}};
        for (const auto& s : half1) c.entries.push_back({s, w1});
        for (const auto& s : half2) c.entries.push_back({s, w2});
        return c;
    };
    EntityConfig cfg = entity_cfg(fx.vocab.size());
    cfg.d_model = 32;
    EntityTrainOptions opt;
    opt.n_samples = 600;
    opt.schedule = fast_schedule();
    opt.seed = 47;

    auto mean_nll = [&](const EntityLM<float>& lm, const std::vector<std::string>& set) {
        double s = 0;
        for (const auto& e : set) s += lm.surface_nll(fx.vocab, e);
        return s / set.size();
    };

    Checkpoint ck_a = train_entity_model<float>(make_cat(9, 1), fx.vocab, fx.pre_ck, cfg, opt);
    EntityLM<float> model_a = EntityLM<float>::from_checkpoint(ck_a, false);
    CHECK(mean_nll(model_a, half1) < mean_nll(model_a, half2));

    Checkpoint ck_b = train_entity_model<float>(make_cat(1, 9), fx.vocab, fx.pre_ck, cfg, opt);
    EntityLM<float> model_b = EntityLM<float>::from_checkpoint(ck_b, false);
    CHECK(mean_nll(model_b, half2) < mean_nll(model_b, half1));
}

TEST_CASE("retraining with additions places them at the top ranks and learns them") {
    EntityFixture fx;
    Catalogue cat{"song", {}};
    for (int i = 0; i < 40; i++)
        cat.entries.push_back({"kalo mita " + std::to_string(i % 10), 100.0 / (i + 1)});
    // distinct surfaces
    cat.entries.clear();
    const char* words[] = {"zanri", "kalo", "mita", "vosu", "dane", "peri", "shaka", "brulo"};
    for (int i = 0; i < 8; i++)
        for (int j = 0; j < 5; j++)
            cat.entries.push_back({std::string(words[i]) + " " + words[(i + j + 1) % 8],
                                   100.0 / (i * 5 + j + 1)});

    EntityConfig cfg = entity_cfg(fx.vocab.size());
    cfg.d_model = 32;
    EntityTrainOptions opt;
    opt.n_samples = 500;
    opt.schedule = fast_schedule();
    opt.seed = 53;

    Checkpoint old_ck = train_entity_model<float>(cat, fx.vocab, fx.pre_ck, cfg, opt);
    EntityLM<float> old_model = EntityLM<float>::from_checkpoint(old_ck, false);

    std::vector<std::string> additions = {"stone stone kalo", "brulo dane mita"};
    RetrainResult rr = retrain_with_additions<float>(cat, additions, fx.vocab, fx.pre_ck, cfg, opt);
    CHECK(rr.skipped.empty());
    EntityLM<float> new_model = EntityLM<float>::from_checkpoint(rr.checkpoint, false);

    for (const auto& s : additions)
        CHECK(new_model.surface_nll(fx.vocab, s) < old_model.surface_nll(fx.vocab, s));

    // empty additions with the same seed reproduce plain retraining exactly
    RetrainResult rr2 = retrain_with_additions<float>(cat, {}, fx.vocab, fx.pre_ck, cfg, opt);
    auto a = rr2.checkpoint.serialize(), b = old_ck.serialize();
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size()) == 0);

    // untokenizable additions: reported per entity when skipping, error otherwise
    std::vector<std::string> bad = {"ZZZ###", "zanri kalo"};
    CHECK_THROWS_AS(
        retrain_with_additions<float>(cat, bad, fx.vocab, fx.pre_ck, cfg, opt, 0.05, false),
        ConfigError);
    RetrainResult rr3 =
        retrain_with_additions<float>(cat, bad, fx.vocab, fx.pre_ck, cfg, opt, 0.05, true);
    REQUIRE(rr3.skipped.size() == 1);
    CHECK(rr3.skipped[0] == "ZZZ###");
}

TEST_CASE("entity training rejects empty catalogues and vocab mismatches") {
    EntityFixture fx;
    EntityConfig cfg = entity_cfg(fx.vocab.size());
    EntityTrainOptions opt;
    opt.n_samples = 10;
    opt.schedule = fast_schedule();

    Catalogue empty{"song", {}};
    CHECK_THROWS_AS(train_entity_model<float>(empty, fx.vocab, fx.pre_ck, cfg, opt), ConfigError);

    Vocabulary other = Vocabulary::train_bpe({"different corpus entirely"}, 30);
    Catalogue cat{"song", {{"zanri", 1.0}}};
    CHECK_THROWS_AS(train_entity_model<float>(cat, other, fx.pre_ck, cfg, opt), ContractError);
}
