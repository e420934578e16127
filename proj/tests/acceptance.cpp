// Acceptance suite: one test case per acceptance criterion, each printing a
// single PASS/FAIL line. The desk-scale experiments (criteria 7-9) share
// pipeline artifacts through a lazily built fixture.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>

#include "ealm/pipeline.hpp"
#include "support/gradcheck.hpp"

using namespace ealm;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Criterion {
    int id;
    std::string label;
    bool ok = true;
    std::string detail;
    Clock::time_point start = Clock::now();

    Criterion(int id_, std::string label_) : id(id_), label(std::move(label_)) {}

    void expect(bool cond, const std::string& what) {
        if (!cond) {
            if (!detail.empty()) detail += "; ";
            detail += what;
            ok = false;
        }
    }

    void note(const std::string& what) {
        if (!detail.empty()) detail += "; ";
        detail += what;
    }

    double seconds() const { return std::chrono::duration<double>(Clock::now() - start).count(); }

    void finish() {
        std::printf("%s criterion %d: %s (%.1fs)%s%s%s\n", ok ? "PASS" : "FAIL", id,
                    label.c_str(), seconds(), detail.empty() ? "" : " [", detail.c_str(),
                    detail.empty() ? "" : "]");
        std::fflush(stdout);
        CHECK_MESSAGE(ok, "criterion ", id, ": ", detail);
    }
};

// shared desk-scale artifacts for the experiment criteria
struct ExperimentFixture {
    DeskConfig cfg;
    DeskArtifacts seed_a, seed_b;
    TailEval tail_a, tail_b;
    double pipeline_seconds = 0;

    ExperimentFixture() {
        auto t0 = Clock::now();
        seed_a = run_desk_pipeline(cfg, 1);
        seed_b = run_desk_pipeline(cfg, 2);
        tail_a = evaluate_tail(seed_a);
        tail_b = evaluate_tail(seed_b);
        pipeline_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    }
};

ExperimentFixture& fixture() {
    static ExperimentFixture fx;
    return fx;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE_MESSAGE(f.good(), "missing file ", path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("criterion 1: gradient oracle") {
    Criterion c(1, "autodiff vs central finite differences, every op, rel err < 1e-4");
    ealm_test::Rng rng(0xACCE01);
    int graphs = 0;
    double worst = 0;
    for (int round = 0; round < 2; round++) {
        for (auto& gc : ealm_test::op_graph_cases()) {
            auto res = ealm_test::grad_check(gc, rng, 1e-5, 1e-4);
            graphs++;
            worst = std::max(worst, res.worst_rel);
            c.expect(res.ok, gc.name + " rel err " + std::to_string(res.worst_rel));
        }
    }
    c.expect(graphs >= 20, "fewer than 20 graphs");
    c.note(std::to_string(graphs) + " graphs, worst rel " + std::to_string(worst));
    c.expect(c.seconds() < 60.0, "runtime over 1 minute");
    c.finish();
}

TEST_CASE("criterion 2: masking-equivalence oracle") {
    Criterion c(2, "forward_multi rows equal independent truncated forwards within 1e-6");
    Rng meta(0xACCE02);
    double worst = 0;
    for (int trial = 0; trial < 100; trial++) {
        const int k = 1 + static_cast<int>(meta.uniform_below(4));
        EntityConfig ecfg;
        ecfg.entity_type = "probe";
        ecfg.n_layers = 1 + static_cast<int>(meta.uniform_below(2));
        ecfg.d_model = 16;
        ecfg.d_ff = 32;
        ecfg.n_heads = 2;
        ecfg.k = k;
        ecfg.vocab_size = 30;
        Rng init = meta.derive(trial);
        EntityLM<double> lm(ecfg, &init);
        Rng emb = meta.derive(5000 + trial);
        for (auto& x : lm.tok_emb.value()) x = emb.gaussian(0, 0.5);

        const int hist_len = static_cast<int>(meta.uniform_below(k + 3));
        std::vector<TokenId> history(hist_len);
        for (auto& id : history) id = 3 + static_cast<int>(meta.uniform_below(27));

        Rng rng(0);
        TensorD multi = lm.forward_multi(0, history, false, rng);
        const int m = std::min<int>(k, hist_len);
        for (int l = 0; l <= k; l++) {
            const int l_eff = std::min(l, m);
            std::vector<TokenId> ctx(history.end() - l_eff, history.end());
            TensorD single = lm.forward_single(0, ctx, false, rng);
            for (int j = 0; j < multi.cols(); j++)
                worst = std::max(worst, std::fabs(multi.at(l, j) - single.at(0, j)));
        }
    }
    c.expect(worst <= 1e-6, "worst deviation " + std::to_string(worst));
    c.note("100 trials, worst " + std::to_string(worst));
    c.expect(c.seconds() < 60.0, "runtime over 1 minute");
    c.finish();
}

TEST_CASE("criterion 3: normalization suite") {
    Criterion c(3, "pcontext, pfusion and final distributions sum to 1 +- 1e-6");
    Rng meta(0xACCE03);
    const int d = 24, k = 4, vocab = 50;
    double worst = 0;
    int compositions = 0;
    for (int layer_draw = 0; layer_draw < 50; layer_draw++) {
        FusionConfig fc;
        fc.d_model = d;
        fc.d_ff = 48;
        fc.n_heads = 2;
        fc.k = k;
        fc.vocab_size = vocab;
        Rng init = meta.derive(layer_draw);
        FusionLayer<double> fus(fc, {"a", "b"}, &init);
        Rng data = meta.derive(9000 + layer_draw);
        Rng rng(0);
        for (int i = 0; i < 20; i++) {
            auto rand_mat = [&](int r, int cdim) {
                std::vector<double> v(static_cast<size_t>(r) * cdim);
                for (auto& x : v) x = data.gaussian(0, 1.5);
                return TensorD::from_data({r, cdim}, std::move(v));
            };
            TensorD h_ctx = rand_mat(1, d);
            std::vector<TensorD> outputs{rand_mat(1, d)};
            double local_worst = 0;
            for (int e = 0; e < 2; e++) {
                auto mixed = fus.mix(rand_mat(k + 1, d), h_ctx, e + 1, false, rng);
                double s = 0;
                for (double v : mixed.pcontext.value()) s += v;
                local_worst = std::max(local_worst, std::fabs(s - 1.0));
                outputs.push_back(mixed.o);
            }
            auto fused = fus.fuse(concat_rows(outputs), h_ctx, false, rng);
            double s = 0;
            for (double v : fused.pfusion.value()) s += v;
            local_worst = std::max(local_worst, std::fabs(s - 1.0));

            TensorD probs = softmax(matmul(fused.h, rand_mat(d, vocab)), 1);
            s = 0;
            for (double v : probs.value()) s += v;
            local_worst = std::max(local_worst, std::fabs(s - 1.0));
            worst = std::max(worst, local_worst);
            compositions++;
        }
    }
    c.expect(compositions >= 1000, "fewer than 1000 compositions");
    c.expect(worst <= 1e-6, "worst deviation " + std::to_string(worst));
    c.note(std::to_string(compositions) + " compositions, worst " + std::to_string(worst));
    c.expect(c.seconds() < 60.0, "runtime over 1 minute");
    c.finish();
}

namespace {

// random frozen components assembled through checkpoints, double precision
struct EndpointRig {
    Vocabulary vocab;
    Checkpoint pre_ck;
    std::vector<Checkpoint> ent_cks;
    Checkpoint fus_ck;

    EndpointRig(uint64_t seed, std::vector<std::string> types) {
        vocab = Vocabulary::train_bpe(
            {"play a sky full of stars by coldplay", "call mom now", "queue it up"}, 48);
        PretrainedConfig pc;
        pc.n_layers = 2;
        pc.d_model = 32;
        pc.d_ff = 64;
        pc.n_heads = 4;
        pc.vocab_size = vocab.size();
        Rng pinit = Rng(seed).derive(1);
        PretrainedLM<double> pre(pc, &pinit);
        pre_ck = pre.to_checkpoint(vocab.content_hash(), seed, 0);
        for (size_t i = 0; i < types.size(); i++) {
            EntityConfig ec;
            ec.entity_type = types[i];
            ec.n_layers = 1;
            ec.d_model = 32;
            ec.d_ff = 64;
            ec.n_heads = 4;
            ec.k = 4;
            ec.vocab_size = vocab.size();
            Rng einit = Rng(seed).derive(100 + i);
            EntityLM<double> ent(ec, &einit);
            ent.adopt_shared_embeddings(pre_ck);
            ent_cks.push_back(ent.to_checkpoint(vocab.content_hash(), seed, 0));
        }
        FusionConfig fc;
        fc.d_model = 32;
        fc.d_ff = 64;
        fc.n_heads = 4;
        fc.k = 4;
        fc.vocab_size = vocab.size();
        Rng finit = Rng(seed).derive(2);
        FusionLayer<double> fus(fc, types, &finit);
        fus_ck = fus.to_checkpoint(vocab.content_hash(), seed, {});
    }
};

}  // namespace

TEST_CASE("criterion 4: endpoint and reduction checks") {
    Criterion c(4, "N=0 and one-hot pfusion reproduce the pre-trained LM; no-op swap exact");

    std::vector<TokenId> tokens = {0, 5, 9, 13, 7, 11};

    {
        EndpointRig rig(0xACCE04, {});
        auto lm = EntityAwareLM<double>::compose(rig.pre_ck, rig.ent_cks, rig.fus_ck);
        PretrainedLM<double> pre = PretrainedLM<double>::from_checkpoint(rig.pre_ck, false);
        Rng rng(0);
        auto out = pre.forward(tokens, false, rng);
        std::vector<TokenId> targets(tokens.begin() + 1, tokens.end());
        double pre_nll =
            cross_entropy(row_slice(out.logits, 0, out.logits.rows() - 1), targets).item() *
            targets.size();
        UtteranceEval ev = lm.eval_utterance(tokens, nullptr, nullptr);
        c.expect(std::fabs(ev.nll - pre_nll) <= 1e-6,
                 "N=0 deviation " + std::to_string(std::fabs(ev.nll - pre_nll)));
    }

    {
        EndpointRig rig(0xACCE05, {"song", "person"});
        auto lm = EntityAwareLM<double>::compose(rig.pre_ck, rig.ent_cks, rig.fus_ck);
        PretrainedLM<double> pre = PretrainedLM<double>::from_checkpoint(rig.pre_ck, false);
        Rng rng(0);
        auto out = pre.forward(tokens, false, rng);
        std::vector<TokenId> targets(tokens.begin() + 1, tokens.end());
        double pre_nll =
            cross_entropy(row_slice(out.logits, 0, out.logits.rows() - 1), targets).item() *
            targets.size();
        std::vector<double> onehot = {1.0, 0.0, 0.0};
        UtteranceEval ev = lm.eval_utterance(tokens, nullptr, nullptr, false, &onehot);
        c.expect(std::fabs(ev.nll - pre_nll) <= 1e-6,
                 "one-hot deviation " + std::to_string(std::fabs(ev.nll - pre_nll)));

        // identical-checkpoint swap leaves every output bit-identical
        UtteranceEval before = lm.eval_utterance(tokens, nullptr, nullptr, true);
        lm.swap_entity("song", rig.ent_cks[0]);
        UtteranceEval after = lm.eval_utterance(tokens, nullptr, nullptr, true);
        c.expect(before.nll == after.nll, "no-op swap changed the NLL");
        for (size_t i = 0; i < before.trace.size(); i++)
            for (size_t j = 0; j < before.trace[i].pfusion.size(); j++)
                c.expect(before.trace[i].pfusion[j] == after.trace[i].pfusion[j],
                         "no-op swap changed pfusion");
    }
    c.finish();
}

TEST_CASE("criterion 5: freeze contracts") {
    Criterion c(5, "shared embeddings and all frozen tensors bitwise intact after training");
    Vocabulary vocab = Vocabulary::train_bpe(
        {"play zanri kalo mita", "call vosu dane", "what time is it", "peri shaka brulo"}, 64);
    PretrainedConfig pc;
    pc.n_layers = 1;
    pc.d_model = 32;
    pc.d_ff = 64;
    pc.n_heads = 4;
    pc.vocab_size = vocab.size();
    Rng pinit(0xACCE06);
    PretrainedLM<float> pre(pc, &pinit);
    Checkpoint pre_ck = pre.to_checkpoint(vocab.content_hash(), 6, 0);

    // entity training: byte-compare the shared embeddings afterwards
    Catalogue cat{"song", {}};
    for (const char* s : {"zanri kalo", "mita vosu", "dane peri", "shaka brulo"})
        cat.entries.push_back({s, 1.0});
    EntityConfig ec;
    ec.entity_type = "song";
    ec.n_layers = 1;
    ec.d_model = 32;
    ec.d_ff = 64;
    ec.n_heads = 4;
    ec.k = 4;
    ec.vocab_size = vocab.size();
    EntityTrainOptions eo;
    eo.n_samples = 150;
    eo.schedule = LrSchedule{1e-4, 2e-3, 1e-4, 64, 100000, 0.9};
    eo.seed = 6;
    Checkpoint ent_ck = train_entity_model<float>(cat, vocab, pre_ck, ec, eo);
    for (const char* name : {"tok_emb", "wo"}) {
        const auto& a = pre_ck.blob(name).bytes;
        const auto& b = ent_ck.blob(name).bytes;
        c.expect(a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size()) == 0,
                 std::string("entity training changed ") + name);
        c.expect(ent_ck.blob(name).frozen, std::string(name) + " not flagged frozen");
    }

    // fusion training: every pretrained/entity tensor byte-identical afterwards
    FusionConfig fc;
    fc.d_model = 32;
    fc.d_ff = 64;
    fc.n_heads = 4;
    fc.k = 4;
    fc.vocab_size = vocab.size();
    Rng finit = Rng(6).derive(2);
    FusionLayer<float> fus(fc, {"song"}, &finit);
    Checkpoint fresh = fus.to_checkpoint(vocab.content_hash(), 6, {});
    EntityAwareLM<float> lm = EntityAwareLM<float>::compose(pre_ck, {ent_ck}, fresh, true);
    Corpus fus_corpus;
    fus_corpus.lines.push_back({"play zanri kalo", {}});
    fus_corpus.lines.push_back({"call vosu dane", {}});
    fus_corpus.lines.push_back({"what time is it", {}});
    FusionTrainOptions fo;
    fo.epochs = 2;
    fo.schedule = LrSchedule{1e-4, 1e-3, 1e-4, 32, 100000, 0.9};
    fo.seed = 6;
    train_fusion(lm, tokenize_corpus(vocab, fus_corpus, 32), fo);
    for (const auto& [name, t] : lm.pretrained.params.items()) {
        const auto& orig = pre_ck.blob(name).bytes;
        c.expect(orig.size() == t.size() * sizeof(float) &&
                     std::memcmp(orig.data(), t.value().data(), orig.size()) == 0,
                 "fusion training changed pretrained." + name);
    }
    for (const auto& [name, t] : lm.entities[0].params.items()) {
        const auto& orig = ent_ck.blob(name).bytes;
        c.expect(orig.size() == t.size() * sizeof(float) &&
                     std::memcmp(orig.data(), t.value().data(), orig.size()) == 0,
                 "fusion training changed entity." + name);
    }
    c.finish();
}

TEST_CASE("criterion 6: entity-context enumeration matches the worked table") {
    Criterion c(6, "k=4 contexts for 'play a sky full of stars by coldplay'");

    // word-level ids: <s>=0, then one id per word
    // 0:<s> 1:play 2:a 3:sky 4:full 5:of 6:stars 7:by 8:coldplay
    std::vector<TokenId> words = {0, 1, 2, 3, 4, 5, 6, 7, 8};
    const int k = 4;

    // expected contexts per predicted position, <s>-anchored, l = 0..min(k,t-1)
    std::vector<std::vector<std::vector<TokenId>>> expected = {
        {{0}},                                            // play
        {{0}, {0, 1}},                                    // a
        {{0}, {0, 2}, {0, 1, 2}},                         // sky
        {{0}, {0, 3}, {0, 2, 3}, {0, 1, 2, 3}},           // full
        {{0}, {0, 4}, {0, 3, 4}, {0, 2, 3, 4}, {0, 1, 2, 3, 4}},  // of
        {{0}, {0, 5}, {0, 4, 5}, {0, 3, 4, 5}, {0, 2, 3, 4, 5}},  // stars
        {{0}, {0, 6}, {0, 5, 6}, {0, 4, 5, 6}, {0, 3, 4, 5, 6}},  // by
        {{0}, {0, 7}, {0, 6, 7}, {0, 5, 6, 7}, {0, 4, 5, 6, 7}},  // coldplay
    };

    for (int t = 1; t <= 8; t++) {
        auto ctxs = enumerate_entity_contexts(words, t, k);
        const auto& exp = expected[t - 1];
        c.expect(ctxs.size() == exp.size(),
                 "position " + std::to_string(t) + ": wrong context count");
        for (size_t l = 0; l < std::min(ctxs.size(), exp.size()); l++) {
            c.expect(ctxs[l] == exp[l], "position " + std::to_string(t) + " context l=" +
                                            std::to_string(l) + " mismatch");
            c.expect(!ctxs[l].empty() && ctxs[l][0] == 0,
                     "context not <s>-anchored at position " + std::to_string(t));
        }
    }

    // the column for "full": contexts start at sky / a / play moving down
    // the rows, all anchored at <s>
    auto full_ctxs = enumerate_entity_contexts(words, 4, k);
    c.expect(full_ctxs[1][1] == 3 && full_ctxs[2][1] == 2 && full_ctxs[3][1] == 1,
             "'full' column start tokens do not match the table");
    c.finish();
}

TEST_CASE("criterion 7: desk-scale tail experiment") {
    Criterion c(7, "EALM tail-set perplexity reduction > 5% over 2 seeds");
    ExperimentFixture& fx = fixture();
    c.expect(fx.seed_a.corpus_tokens > 40000 && fx.seed_a.corpus_tokens < 62000,
             "corpus size off target: " + std::to_string(fx.seed_a.corpus_tokens));
    const double mean_tail = 0.5 * (fx.tail_a.tail_reduction + fx.tail_b.tail_reduction);
    c.note("tail reductions " + std::to_string(fx.tail_a.tail_reduction) + " / " +
           std::to_string(fx.tail_b.tail_reduction) + ", mean " + std::to_string(mean_tail));
    c.expect(mean_tail > 0.05, "mean tail reduction below 5%");
    c.expect(fx.pipeline_seconds < 1800.0, "pipeline runtime over 30 minutes");
    c.note("pipeline " + std::to_string(static_cast<int>(fx.pipeline_seconds)) + "s");
    c.finish();
}

TEST_CASE("fusion direction: routed entity mass rises inside entity spans") {
    // trained fusion puts more pfusion mass on an entity model at in-entity
    // positions than at carrier positions, measured on a held-out set
    ExperimentFixture& fx = fixture();
    EntityAwareLM<PReal> lm =
        EntityAwareLM<PReal>::compose(fx.seed_a.pre_ck, fx.seed_a.ent_cks, fx.seed_a.fus_ck);
    ComposeCache<PReal> cache;
    int routed_models = 0;
    for (const auto& type : fx.seed_a.entity_types) {
        MassSplit ms = pfusion_mass_split(lm, fx.seed_a.testsets.at("seen"), type, &cache);
        REQUIRE(ms.in_entity_count > 0);
        REQUIRE(ms.carrier_count > 0);
        const double inside = ms.in_entity_mass / ms.in_entity_count;
        const double carrier = ms.carrier_mass / ms.carrier_count;
        MESSAGE("mass[", type, "] in-entity ", inside, " carrier ", carrier);
        if (inside > 1e-4) {  // the fusion layer actually routes to this model
            routed_models++;
            CHECK(inside > carrier);
        }
    }
    CHECK(routed_models >= 1);
}

TEST_CASE("criterion 8: hot-swap experiment") {
    Criterion c(8, "new-entity reduction strictly increases; general degradation < 2%");
    ExperimentFixture& fx = fixture();
    auto t0 = Clock::now();
    SwapEval sa = run_swap_experiment(fx.cfg, fx.seed_a, "", 101);
    SwapEval sb = run_swap_experiment(fx.cfg, fx.seed_b, "", 102);
    double secs = std::chrono::duration<double>(Clock::now() - t0).count();

    for (const auto* s : {&sa, &sb}) {
        c.expect(s->new_reduction_after > s->new_reduction_before,
                 "new-set reduction did not strictly increase (" + s->swapped_type + ")");
        c.expect(s->general_degradation < 0.02,
                 "general degradation " + std::to_string(s->general_degradation));
    }
    c.note("swapped " + sa.swapped_type + "/" + sb.swapped_type + ", new " +
           std::to_string(sa.new_reduction_before) + "->" +
           std::to_string(sa.new_reduction_after) + " and " +
           std::to_string(sb.new_reduction_before) + "->" +
           std::to_string(sb.new_reduction_after));
    c.expect(secs < 900.0, "incremental runtime over 15 minutes");
    c.finish();
}

TEST_CASE("criterion 9: catalogue-fraction study") {
    Criterion c(9, "tail-new reduction non-decreasing across 25/50/100% catalogues");
    ExperimentFixture& fx = fixture();
    auto t0 = Clock::now();
    FractionEval fe = run_fraction_study(fx.cfg, fx.seed_a, {0.25, 0.5, 1.0}, 201);
    double secs = std::chrono::duration<double>(Clock::now() - t0).count();

    // rows: entity25, retrained25, retrained50, retrained100
    REQUIRE(fe.rows.size() == 4);
    const double r25 = fe.rows[1].tailnew_reduction;
    const double r50 = fe.rows[2].tailnew_reduction;
    const double r100 = fe.rows[3].tailnew_reduction;
    c.note("tailnew " + std::to_string(r25) + " -> " + std::to_string(r50) + " -> " +
           std::to_string(r100) + ", general noise band " + std::to_string(fe.noise_band));
    c.expect(r50 >= r25, "50% slice below 25% slice");
    c.expect(r100 >= r50, "100% slice below 50% slice");
    c.expect(secs < 1800.0, "incremental runtime over 30 minutes");
    c.finish();
}

TEST_CASE("criterion 10: CLI determinism") {
    Criterion c(10, "identical config and seed give bitwise-identical artifacts");
    const std::string cli = EALM_CLI_PATH;
    fs::path base = fs::temp_directory_path() / "ealm_accept_determinism";
    fs::remove_all(base);
    fs::create_directories(base);

    KeyValue gen;
    gen.set("synth", "true");
    gen.set_i64("synth.entities_per_type", 40);
    gen.set_i64("synth.ooc_per_type", 10);
    gen.set_i64("synth.novel_per_type", 8);
    gen.set_i64("n_utterances", 200);
    gen.save((base / "gen.cfg").string());

    auto run_all = [&](const std::string& dir) {
        fs::create_directories(dir);
        auto run = [&](const std::string& sub, const std::string& cfg_path) {
            std::string cmd = cli + " " + sub + " --config " + cfg_path + " --seed 7 --out-dir " +
                              dir + " > /dev/null 2>&1";
            return std::system(cmd.c_str());
        };
        REQUIRE(run("gen-corpus", (base / "gen.cfg").string()) == 0);

        KeyValue tok;
        tok.set("corpus", dir + "/corpus.txt");
        tok.set("catalogue.song", dir + "/catalogue.song.tsv");
        tok.set("catalogue.person", dir + "/catalogue.person.tsv");
        tok.set_i64("merges", 96);
        tok.save(dir + "/tok.cfg");
        REQUIRE(run("tokenizer-train", dir + "/tok.cfg") == 0);

        KeyValue pre;
        pre.set("vocab", dir + "/vocab.txt");
        pre.set("corpus", dir + "/corpus.txt");
        pre.set_i64("d_model", 32);
        pre.set_i64("d_ff", 64);
        pre.set_i64("epochs", 1);
        pre.save(dir + "/pre.cfg");
        REQUIRE(run("pretrain", dir + "/pre.cfg") == 0);

        KeyValue ent;
        ent.set("vocab", dir + "/vocab.txt");
        ent.set("pretrained", dir + "/pretrained.ckpt");
        ent.set("catalogue", dir + "/catalogue.song.tsv");
        ent.set("entity_type", "song");
        ent.set_i64("samples", 120);
        ent.set("out", "entity.song.ckpt");
        ent.save(dir + "/ent.cfg");
        REQUIRE(run("train-entity", dir + "/ent.cfg") == 0);

        KeyValue fus;
        fus.set("vocab", dir + "/vocab.txt");
        fus.set("pretrained", dir + "/pretrained.ckpt");
        fus.set("entity.song", dir + "/entity.song.ckpt");
        fus.set("corpus", dir + "/corpus.txt");
        fus.set_f64("fraction", 0.25);
        fus.set_i64("epochs", 1);
        fus.save(dir + "/fus.cfg");
        REQUIRE(run("train-fusion", dir + "/fus.cfg") == 0);

        KeyValue ev;
        ev.set("vocab", dir + "/vocab.txt");
        ev.set("model", "ealm");
        ev.set("manifest", dir + "/ealm.manifest");
        ev.set("testset", dir + "/corpus.txt");
        ev.set("spans", dir + "/corpus.spans.tsv");
        ev.set("out", "report.tsv");
        ev.save(dir + "/ev.cfg");
        REQUIRE(run("eval", dir + "/ev.cfg") == 0);

        KeyValue tr;
        tr.set("manifest", dir + "/ealm.manifest");
        tr.set("utterance", "play something");
        tr.save(dir + "/tr.cfg");
        REQUIRE(run("trace", dir + "/tr.cfg") == 0);
    };

    const std::string d1 = (base / "run1").string(), d2 = (base / "run2").string();
    run_all(d1);
    run_all(d2);
    for (const char* name :
         {"corpus.txt", "corpus.spans.tsv", "vocab.txt", "pretrained.ckpt", "entity.song.ckpt",
          "fusion.ckpt", "report.tsv", "report.tsv.nll.tsv", "trace.tsv", "trace.tsv.full.tsv"}) {
        // manifests embed absolute paths, so compare everything else
        std::string a = slurp(d1 + "/" + name), b = slurp(d2 + "/" + name);
        c.expect(a == b, std::string(name) + " differs between identical runs");
    }
    fs::remove_all(base);
    c.finish();
}
