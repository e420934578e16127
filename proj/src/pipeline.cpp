#include "ealm/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "ealm/errors.hpp"

namespace ealm {

namespace {

std::string join_path(const std::string& dir, const std::string& name) {
    if (name.empty()) throw ConfigError("empty output file name");
    if (dir.empty() || name.front() == '/') return name;
    return (std::filesystem::path(dir) / name).string();
}

void log_line(bool verbose, const std::string& msg) {
    if (verbose) std::cerr << "[ealm] " << msg << "\n";
}

std::vector<std::string> split_list(const std::string& s, char sep = ';') {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= s.size()) {
        size_t end = s.find(sep, start);
        if (end == std::string::npos) end = s.size();
        std::string item = s.substr(start, end - start);
        if (!item.empty()) out.push_back(item);
        start = end + 1;
        if (end == s.size()) break;
    }
    return out;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    for (const auto& l : lines) f << l << "\n";
}

LrSchedule schedule_from_kv(const KeyValue& cfg, const LrSchedule& defaults) {
    LrSchedule s = defaults;
    s.lr_start = cfg.f64_or("lr.start", s.lr_start);
    s.lr_max = cfg.f64_or("lr.max", s.lr_max);
    s.lr_end = cfg.f64_or("lr.end", s.lr_end);
    s.warmup_tokens = cfg.i64_or("lr.warmup_tokens", s.warmup_tokens);
    s.decay_interval_tokens = cfg.i64_or("lr.decay_interval_tokens", s.decay_interval_tokens);
    s.decay_factor = cfg.f64_or("lr.decay_factor", s.decay_factor);
    return s;
}

}  // namespace

// ---- desk pipeline ----

DeskArtifacts run_desk_pipeline(const DeskConfig& cfg, uint64_t seed, bool verbose) {
    DeskArtifacts art;
    Rng root(seed);

    SynthWorldConfig wc = cfg.world;
    wc.seed = root.derive(1).seed();
    art.world = make_synth_world(wc);
    for (const auto& [type, cat] : art.world.catalogues) art.entity_types.push_back(type);

    auto pools = art.world.text_pools(cfg.coverage);
    art.pre_corpus = generate_corpus(art.world.templates, pools,
                                     {cfg.corpus_utterances, cfg.slot_rate},
                                     root.derive(2).seed());

    // tokenizer text: corpus lines plus every catalogue surface, so held-out
    // entities tokenize into learned subwords without ever entering LM text
    std::vector<std::string> bpe_text;
    for (const auto& u : art.pre_corpus.lines) bpe_text.push_back(u.text);
    for (const auto& [type, cat] : art.world.catalogues)
        for (const auto& e : cat.entries) bpe_text.push_back(e.surface);
    art.vocab = Vocabulary::train_bpe_merges(bpe_text, cfg.bpe_merges);
    log_line(verbose, "vocabulary size " + std::to_string(art.vocab.size()));

    art.pre_tokens = tokenize_corpus(art.vocab, art.pre_corpus, cfg.max_len);
    for (const auto& u : art.pre_tokens)
        art.corpus_tokens += static_cast<int64_t>(u.tokens.size()) - 1;
    log_line(verbose, "corpus tokens " + std::to_string(art.corpus_tokens));

    // stage 1: pre-trained LM
    PretrainedConfig pc;
    pc.n_layers = cfg.pre_layers;
    pc.d_model = cfg.d_model;
    pc.d_ff = cfg.d_ff;
    pc.n_heads = cfg.n_heads;
    pc.dropout = cfg.pre_dropout;
    pc.max_positions = cfg.max_len;
    pc.vocab_size = art.vocab.size();
    Rng pre_init = root.derive(10);
    PretrainedLM<PReal> pre(pc, &pre_init);
    TrainStats ps = pretrain(pre, art.pre_tokens, cfg.pre_sched, root.derive(11).seed(),
                             cfg.pre_epochs, cfg.pre_accum);
    art.pre_ck = pre.to_checkpoint(art.vocab.content_hash(), seed, ps.tokens_seen);
    log_line(verbose, "pretrain loss " + std::to_string(ps.first_epoch_loss) + " -> " +
                          std::to_string(ps.last_epoch_loss));

    // stage 2: entity models, one per catalogue
    for (size_t i = 0; i < art.entity_types.size(); i++) {
        const std::string& type = art.entity_types[i];
        EntityConfig ec;
        ec.entity_type = type;
        ec.n_layers = cfg.ent_layers;
        ec.d_model = cfg.d_model;
        ec.d_ff = cfg.d_ff;
        ec.n_heads = cfg.n_heads;
        ec.dropout = cfg.ent_dropout;
        ec.k = cfg.k;
        ec.vocab_size = art.vocab.size();
        ec.max_entity_tokens = cfg.max_len;
        EntityTrainOptions eo;
        eo.n_samples = cfg.ent_samples;
        eo.grad_accum = cfg.ent_accum;
        eo.schedule = cfg.ent_sched;
        eo.seed = root.derive(20 + i).seed();
        art.ent_cks.push_back(
            train_entity_model<PReal>(art.world.catalogues.at(type), art.vocab, art.pre_ck, ec, eo));
        log_line(verbose, "entity model trained: " + type);
    }

    // stage 3: fusion layer on a corpus subset
    {
        std::vector<size_t> order(art.pre_tokens.size());
        for (size_t i = 0; i < order.size(); i++) order[i] = i;
        Rng subset_rng = root.derive(30);
        subset_rng.shuffle(order);
        size_t keep = std::max<size_t>(1, static_cast<size_t>(cfg.fusion_fraction * order.size()));
        for (size_t i = 0; i < keep; i++) art.fusion_tokens.push_back(art.pre_tokens[order[i]]);

        FusionConfig fc;
        fc.d_model = cfg.d_model;
        fc.d_ff = cfg.d_ff;
        fc.n_heads = cfg.n_heads;
        fc.max_positions = cfg.max_len;
        fc.k = cfg.k;
        fc.dropout = cfg.fus_dropout;
        fc.dropout_entity = cfg.fus_dropout_entity;
        fc.vocab_size = art.vocab.size();
        Rng fus_init = root.derive(31);
        FusionLayer<PReal> fus(fc, art.entity_types, &fus_init);
        Checkpoint fresh = fus.to_checkpoint(art.vocab.content_hash(), seed, {});
        EntityAwareLM<PReal> lm = EntityAwareLM<PReal>::compose(art.pre_ck, art.ent_cks, fresh, true);
        FusionTrainOptions fo;
        fo.epochs = cfg.fus_epochs;
        fo.grad_accum = cfg.fus_accum;
        fo.schedule = cfg.fus_sched;
        fo.seed = root.derive(32).seed();
        art.fus_ck = train_fusion(lm, art.fusion_tokens, fo);
        log_line(verbose, "fusion trained on " + std::to_string(art.fusion_tokens.size()) +
                              " utterances");
    }

    // test sets: general (same distribution), entity-seen, entity-tail
    auto gen_testset = [&](const std::map<std::string, Catalogue>& p, double slot_rate,
                           uint64_t tag, const std::vector<std::string>* templates =
                                             nullptr) {
        Corpus c = generate_corpus(templates ? *templates : art.world.templates, p,
                                   {cfg.test_utterances, slot_rate}, root.derive(tag).seed());
        return tokenize_corpus(art.vocab, c, cfg.max_len);
    };
    art.testsets["general"] = gen_testset(pools, cfg.slot_rate, 50);
    art.testsets["seen"] = gen_testset(art.world.uniform_pools(art.world.seen), 1.0, 51);
    art.testsets["tail"] = gen_testset(art.world.uniform_pools(art.world.heldout), 1.0, 52);
    art.testsets["new"] = gen_testset(art.world.uniform_pools(art.world.novel), 1.0, 53);
    return art;
}

TailEval evaluate_tail(const DeskArtifacts& art, bool verbose) {
    TailEval ev;
    PretrainedLM<PReal> pre = PretrainedLM<PReal>::from_checkpoint(art.pre_ck, false);
    EntityAwareLM<PReal> lm = EntityAwareLM<PReal>::compose(art.pre_ck, art.ent_cks, art.fus_ck);
    ComposeCache<PReal> cache;

    ev.pre_general = evaluate_pretrained(pre, art.testsets.at("general"), "general");
    ev.pre_seen = evaluate_pretrained(pre, art.testsets.at("seen"), "entity-seen");
    ev.pre_tail = evaluate_pretrained(pre, art.testsets.at("tail"), "entity-tail");
    ev.ealm_general = evaluate_ealm(lm, art.testsets.at("general"), "general", &cache);
    ev.ealm_seen = evaluate_ealm(lm, art.testsets.at("seen"), "entity-seen", &cache);
    ev.ealm_tail = evaluate_ealm(lm, art.testsets.at("tail"), "entity-tail", &cache);

    ev.general_reduction = ev.ealm_general.relative_reduction_vs(ev.pre_general);
    ev.seen_reduction = ev.ealm_seen.relative_reduction_vs(ev.pre_seen);
    ev.tail_reduction = ev.ealm_tail.relative_reduction_vs(ev.pre_tail);
    log_line(verbose, "reduction general " + std::to_string(ev.general_reduction) + " seen " +
                          std::to_string(ev.seen_reduction) + " tail " +
                          std::to_string(ev.tail_reduction));
    return ev;
}

SwapEval run_swap_experiment(const DeskConfig& cfg, const DeskArtifacts& art,
                             std::string entity_type, uint64_t seed, double top_rank_fraction,
                             bool verbose) {
    SwapEval ev;
    Rng root(seed);

    if (entity_type.empty()) {
        // pick the entity model the trained fusion layer actually routes to,
        // measured as mean in-entity pfusion mass on the entity-seen set
        EntityAwareLM<PReal> probe = EntityAwareLM<PReal>::compose(art.pre_ck, art.ent_cks, art.fus_ck);
        ComposeCache<PReal> cache;
        double best = -1;
        for (const auto& type : art.entity_types) {
            MassSplit ms = pfusion_mass_split(probe, art.testsets.at("seen"), type, &cache);
            double mean = ms.in_entity_count ? ms.in_entity_mass / ms.in_entity_count : 0;
            log_line(verbose, "in-entity routing mass " + type + ": " + std::to_string(mean));
            if (mean > best) {
                best = mean;
                entity_type = type;
            }
        }
        log_line(verbose, "swap target: " + entity_type);
    }
    ev.swapped_type = entity_type;

    // test set targeting the swapped type's novel entities; other slots come
    // from seen entities
    std::map<std::string, Catalogue> pools;
    for (const auto& [type, names] : art.world.seen) {
        std::map<std::string, std::vector<std::string>> one{{type, names}};
        pools[type] = art.world.uniform_pools(one).at(type);
    }
    {
        std::map<std::string, std::vector<std::string>> one{
            {entity_type, art.world.novel.at(entity_type)}};
        pools[entity_type] = art.world.uniform_pools(one).at(entity_type);
    }
    std::vector<std::string> templates;
    for (const auto& t : art.world.templates)
        if (t.find("{" + entity_type + "}") != std::string::npos) templates.push_back(t);
    if (templates.empty())
        throw ConfigError("swap experiment: no template mentions {" + entity_type + "}");
    Corpus new_corpus = generate_corpus(templates, pools, {cfg.test_utterances, 1.0},
                                        root.derive(60).seed());
    std::vector<Utterance> new_testset = tokenize_corpus(art.vocab, new_corpus, cfg.max_len);

    // retrain with additions at the top popularity ranks
    EntityConfig ec;
    ec.entity_type = entity_type;
    ec.n_layers = cfg.ent_layers;
    ec.d_model = cfg.d_model;
    ec.d_ff = cfg.d_ff;
    ec.n_heads = cfg.n_heads;
    ec.dropout = cfg.ent_dropout;
    ec.k = cfg.k;
    ec.vocab_size = art.vocab.size();
    ec.max_entity_tokens = cfg.max_len;
    EntityTrainOptions eo;
    eo.n_samples = cfg.ent_samples;
    eo.grad_accum = cfg.ent_accum;
    eo.schedule = cfg.ent_sched;
    eo.seed = root.derive(61).seed();
    RetrainResult rr = retrain_with_additions<PReal>(
        art.world.catalogues.at(entity_type), art.world.novel.at(entity_type), art.vocab,
        art.pre_ck, ec, eo, top_rank_fraction, true);
    ev.skipped_additions = rr.skipped;
    log_line(verbose, "retrained " + entity_type + " with " +
                          std::to_string(art.world.novel.at(entity_type).size()) + " additions");

    PretrainedLM<PReal> pre = PretrainedLM<PReal>::from_checkpoint(art.pre_ck, false);
    EvalReport pre_new = evaluate_pretrained(pre, new_testset, "entity-new");
    EvalReport pre_general = evaluate_pretrained(pre, art.testsets.at("general"), "general");

    EntityAwareLM<PReal> before = EntityAwareLM<PReal>::compose(art.pre_ck, art.ent_cks, art.fus_ck);
    ComposeCache<PReal> cache_before;
    EvalReport ealm_new_before = evaluate_ealm(before, new_testset, "entity-new", &cache_before);
    EvalReport ealm_general_before =
        evaluate_ealm(before, art.testsets.at("general"), "general", &cache_before);

    EntityAwareLM<PReal> after = EntityAwareLM<PReal>::compose(art.pre_ck, art.ent_cks, art.fus_ck);
    after.swap_entity(entity_type, rr.checkpoint);
    ComposeCache<PReal> cache_after;
    EvalReport ealm_new_after = evaluate_ealm(after, new_testset, "entity-new", &cache_after);
    EvalReport ealm_general_after =
        evaluate_ealm(after, art.testsets.at("general"), "general", &cache_after);

    ev.new_reduction_before = ealm_new_before.relative_reduction_vs(pre_new);
    ev.new_reduction_after = ealm_new_after.relative_reduction_vs(pre_new);
    ev.general_reduction_before = ealm_general_before.relative_reduction_vs(pre_general);
    ev.general_reduction_after = ealm_general_after.relative_reduction_vs(pre_general);
    ev.general_degradation =
        (ealm_general_after.all.perplexity() - ealm_general_before.all.perplexity()) /
        ealm_general_before.all.perplexity();
    log_line(verbose, "new-set reduction " + std::to_string(ev.new_reduction_before) + " -> " +
                          std::to_string(ev.new_reduction_after) + ", general degradation " +
                          std::to_string(ev.general_degradation));
    return ev;
}

FractionEval run_fraction_study(const DeskConfig& cfg, const DeskArtifacts& art,
                                const std::vector<double>& fractions, uint64_t seed,
                                bool verbose) {
    if (fractions.empty()) throw ConfigError("fraction study: no fractions");
    for (double f : fractions)
        if (f <= 0.0 || f > 1.0) throw ConfigError("fraction study: fractions must be in (0, 1]");
    std::vector<double> fr = fractions;
    std::sort(fr.begin(), fr.end());
    const double f0 = fr.front();
    Rng root(seed);

    // tail-new test set: held-out entities outside the top-f0 slice
    std::map<std::string, std::vector<std::string>> tailnew;
    for (const auto& [type, cat] : art.world.catalogues) {
        Catalogue top = cat.top_fraction(f0);
        std::set<std::string> top_set;
        for (const auto& e : top.entries) top_set.insert(e.surface);
        for (const auto& s : art.world.heldout.at(type))
            if (!top_set.count(s)) tailnew[type].push_back(s);
        if (tailnew[type].empty())
            throw ConfigError("fraction study: empty tail-new slice for '" + type + "'");
    }
    Corpus tailnew_corpus =
        generate_corpus(art.world.templates, art.world.uniform_pools(tailnew),
                        {cfg.test_utterances, 1.0}, root.derive(70).seed());
    std::vector<Utterance> tailnew_testset = tokenize_corpus(art.vocab, tailnew_corpus, cfg.max_len);

    auto train_set = [&](double fraction, uint64_t seed_tag) {
        std::vector<Checkpoint> cks;
        for (size_t i = 0; i < art.entity_types.size(); i++) {
            const std::string& type = art.entity_types[i];
            EntityConfig ec;
            ec.entity_type = type;
            ec.n_layers = cfg.ent_layers;
            ec.d_model = cfg.d_model;
            ec.d_ff = cfg.d_ff;
            ec.n_heads = cfg.n_heads;
            ec.dropout = cfg.ent_dropout;
            ec.k = cfg.k;
            ec.vocab_size = art.vocab.size();
            ec.max_entity_tokens = cfg.max_len;
            EntityTrainOptions eo;
            eo.n_samples = cfg.ent_samples;
            eo.grad_accum = cfg.ent_accum;
            eo.schedule = cfg.ent_sched;
            eo.seed = root.derive(seed_tag * 100 + i).seed();
            cks.push_back(train_entity_model<PReal>(art.world.catalogues.at(type).top_fraction(fraction),
                                                    art.vocab, art.pre_ck, ec, eo));
        }
        return cks;
    };

    log_line(verbose, "training entity sets");
    std::vector<Checkpoint> entity_f0 = train_set(f0, 80);
    std::vector<std::pair<std::string, std::vector<Checkpoint>>> retrained;
    for (size_t i = 0; i < fr.size(); i++) {
        std::ostringstream label;
        label << "retrained" << static_cast<int>(fr[i] * 100 + 0.5);
        retrained.push_back({label.str(), train_set(fr[i], 90 + i)});
    }

    // fusion trained on the smallest-fraction models
    FusionConfig fc;
    fc.d_model = cfg.d_model;
    fc.d_ff = cfg.d_ff;
    fc.n_heads = cfg.n_heads;
    fc.max_positions = cfg.max_len;
    fc.k = cfg.k;
    fc.dropout = cfg.fus_dropout;
    fc.dropout_entity = cfg.fus_dropout_entity;
    fc.vocab_size = art.vocab.size();
    Rng fus_init = root.derive(71);
    FusionLayer<PReal> fus(fc, art.entity_types, &fus_init);
    Checkpoint fresh = fus.to_checkpoint(art.vocab.content_hash(), seed, {});
    EntityAwareLM<PReal> trainee = EntityAwareLM<PReal>::compose(art.pre_ck, entity_f0, fresh, true);
    FusionTrainOptions fo;
    fo.epochs = cfg.fus_epochs;
    fo.grad_accum = cfg.fus_accum;
    fo.schedule = cfg.fus_sched;
    fo.seed = root.derive(72).seed();
    Checkpoint fus_ck = train_fusion(trainee, art.fusion_tokens, fo);
    log_line(verbose, "fusion trained on the " + std::to_string(f0) + " models");

    PretrainedLM<PReal> pre = PretrainedLM<PReal>::from_checkpoint(art.pre_ck, false);
    EvalReport pre_general = evaluate_pretrained(pre, art.testsets.at("general"), "general");
    EvalReport pre_tailnew = evaluate_pretrained(pre, tailnew_testset, "entity-tail-new");

    FractionEval out;
    auto measure = [&](const std::string& label, double fraction,
                       const std::vector<Checkpoint>& set) {
        EntityAwareLM<PReal> lm = EntityAwareLM<PReal>::compose(art.pre_ck, entity_f0, fus_ck);
        for (size_t i = 0; i < art.entity_types.size(); i++)
            lm.swap_entity(art.entity_types[i], set[i]);
        ComposeCache<PReal> cache;
        EvalReport g = evaluate_ealm(lm, art.testsets.at("general"), "general", &cache);
        EvalReport t = evaluate_ealm(lm, tailnew_testset, "entity-tail-new", &cache);
        FractionRow row;
        row.fraction = fraction;
        row.label = label;
        row.general_reduction = g.relative_reduction_vs(pre_general);
        row.tailnew_reduction = t.relative_reduction_vs(pre_tailnew);
        log_line(verbose, label + ": general " + std::to_string(row.general_reduction) +
                              " tailnew " + std::to_string(row.tailnew_reduction));
        return row;
    };

    {
        // the fusion-training models themselves (no swap at all)
        EntityAwareLM<PReal> lm = EntityAwareLM<PReal>::compose(art.pre_ck, entity_f0, fus_ck);
        ComposeCache<PReal> cache;
        EvalReport g = evaluate_ealm(lm, art.testsets.at("general"), "general", &cache);
        EvalReport t = evaluate_ealm(lm, tailnew_testset, "entity-tail-new", &cache);
        FractionRow row;
        row.fraction = f0;
        std::ostringstream label;
        label << "entity" << static_cast<int>(f0 * 100 + 0.5);
        row.label = label.str();
        row.general_reduction = g.relative_reduction_vs(pre_general);
        row.tailnew_reduction = t.relative_reduction_vs(pre_tailnew);
        out.rows.push_back(row);
        log_line(verbose, row.label + ": general " + std::to_string(row.general_reduction) +
                              " tailnew " + std::to_string(row.tailnew_reduction));
    }
    for (size_t i = 0; i < fr.size(); i++)
        out.rows.push_back(measure(retrained[i].first, fr[i], retrained[i].second));

    out.noise_band = std::fabs(out.rows[0].general_reduction - out.rows[1].general_reduction);
    return out;
}

// ---- manifest ----

void EalmManifest::save(const std::string& path) const {
    KeyValue kv;
    kv.set("vocab", vocab_path);
    kv.set("pretrained", pretrained_path);
    for (const auto& [type, p] : entity_paths) kv.set("entity." + type, p);
    kv.set("fusion", fusion_path);
    kv.save(path);
}

EalmManifest EalmManifest::load(const std::string& path) {
    KeyValue kv = KeyValue::load(path);
    EalmManifest m;
    m.vocab_path = kv.str("vocab");
    m.pretrained_path = kv.str("pretrained");
    for (const auto& [type, p] : kv.with_prefix("entity")) m.entity_paths.push_back({type, p});
    m.fusion_path = kv.str("fusion");
    return m;
}

EntityAwareLM<PReal> load_ealm(const EalmManifest& manifest, bool fusion_trainable) {
    Checkpoint pre = Checkpoint::load(manifest.pretrained_path);
    std::vector<Checkpoint> ents;
    for (const auto& [type, path] : manifest.entity_paths) {
        Checkpoint ck = Checkpoint::load(path);
        if (ck.meta("entity_type") != type)
            throw ContractError("manifest entity '" + type + "' points at a checkpoint for '" +
                                ck.meta("entity_type") + "'");
        ents.push_back(std::move(ck));
    }
    Checkpoint fus = Checkpoint::load(manifest.fusion_path);
    return EntityAwareLM<PReal>::compose(pre, ents, fus, fusion_trainable);
}

// ---- CLI stages ----

void stage_tokenizer_train(const KeyValue& cfg, const std::string& out_dir) {
    std::vector<std::string> text;
    for (const auto& path : split_list(cfg.str("corpus")))
        for (auto& line : read_lines(path)) text.push_back(std::move(line));
    for (const auto& [type, path] : cfg.with_prefix("catalogue")) {
        Catalogue cat = Catalogue::load(path, type);
        for (const auto& e : cat.entries) text.push_back(e.surface);
    }
    Vocabulary vocab = Vocabulary::train_bpe_merges(text, static_cast<int>(cfg.i64_or("merges", 512)));
    vocab.save(join_path(out_dir, cfg.str_or("out", "vocab.txt")));
}

void stage_gen_corpus(const KeyValue& cfg, uint64_t seed, const std::string& out_dir) {
    CorpusGenConfig gc;
    gc.n_utterances = static_cast<int>(cfg.i64_or("n_utterances", 1000));
    gc.slot_rate = cfg.f64_or("slot_rate", 0.8);

    if (cfg.flag_or("synth", false)) {
        SynthWorldConfig wc;
        if (cfg.has("synth.entity_types")) wc.entity_types = split_list(cfg.str("synth.entity_types"));
        wc.entities_per_type = static_cast<int>(cfg.i64_or("synth.entities_per_type", 500));
        wc.heldout_fraction = cfg.f64_or("synth.heldout_fraction", 0.3);
        wc.ooc_per_type = static_cast<int>(cfg.i64_or("synth.ooc_per_type", 120));
        wc.novel_per_type = static_cast<int>(cfg.i64_or("synth.novel_per_type", 60));
        wc.seed = seed;
        SynthWorld world = make_synth_world(wc);

        Corpus corpus = generate_corpus(world.templates, world.text_pools(cfg.f64_or("coverage", 0.55)),
                                        gc, Rng(seed).derive(2).seed());
        const std::string corpus_path = join_path(out_dir, cfg.str_or("out_corpus", "corpus.txt"));
        const std::string spans_path = join_path(out_dir, cfg.str_or("out_spans", "corpus.spans.tsv"));
        corpus.save(corpus_path, spans_path);

        KeyValue wm;
        wm.set("corpus", corpus_path);
        wm.set("spans", spans_path);
        write_lines(join_path(out_dir, "templates.txt"), world.templates);
        wm.set("templates", join_path(out_dir, "templates.txt"));
        for (const auto& [type, cat] : world.catalogues) {
            const std::string cpath = join_path(out_dir, "catalogue." + type + ".tsv");
            cat.save(cpath);
            wm.set("catalogue." + type, cpath);
            write_lines(join_path(out_dir, "heldout." + type + ".txt"), world.heldout.at(type));
            wm.set("heldout." + type, join_path(out_dir, "heldout." + type + ".txt"));
            write_lines(join_path(out_dir, "novel." + type + ".txt"), world.novel.at(type));
            wm.set("novel." + type, join_path(out_dir, "novel." + type + ".txt"));
        }
        wm.set("seed", std::to_string(seed));
        wm.save(join_path(out_dir, "world.manifest"));
        return;
    }

    std::vector<std::string> templates = read_lines(cfg.str("templates"));
    std::map<std::string, Catalogue> pools;
    for (const auto& [type, path] : cfg.with_prefix("catalogue"))
        pools[type] = Catalogue::load(path, type);
    Corpus corpus = generate_corpus(templates, pools, gc, seed);
    corpus.save(join_path(out_dir, cfg.str_or("out_corpus", "corpus.txt")),
                join_path(out_dir, cfg.str_or("out_spans", "corpus.spans.tsv")));
}

void stage_pretrain(const KeyValue& cfg, uint64_t seed, const std::string& out_dir) {
    Vocabulary vocab = Vocabulary::load(cfg.str("vocab"));
    Corpus corpus = Corpus::load(cfg.str("corpus"), cfg.str_or("spans", ""));
    PretrainedConfig pc;
    pc.n_layers = static_cast<int>(cfg.i64_or("n_layers", 2));
    pc.d_model = static_cast<int>(cfg.i64_or("d_model", 64));
    pc.d_ff = static_cast<int>(cfg.i64_or("d_ff", 128));
    pc.n_heads = static_cast<int>(cfg.i64_or("n_heads", 4));
    pc.dropout = cfg.f64_or("dropout", 0.1);
    pc.max_positions = static_cast<int>(cfg.i64_or("max_positions", 32));
    pc.vocab_size = vocab.size();
    auto tokens = tokenize_corpus(vocab, corpus, pc.max_positions);

    Rng init = Rng(seed).derive(10);
    PretrainedLM<PReal> lm(pc, &init);
    LrSchedule sched = schedule_from_kv(cfg, DeskConfig{}.pre_sched);
    TrainStats ts = pretrain(lm, tokens, sched, Rng(seed).derive(11).seed(),
                             static_cast<int>(cfg.i64_or("epochs", 4)),
                             static_cast<int>(cfg.i64_or("grad_accum", 2)));
    Checkpoint ck = lm.to_checkpoint(vocab.content_hash(), seed, ts.tokens_seen);
    ck.save(join_path(out_dir, cfg.str_or("out", "pretrained.ckpt")));
}

void stage_train_entity(const KeyValue& cfg, uint64_t seed, const std::string& out_dir) {
    Vocabulary vocab = Vocabulary::load(cfg.str("vocab"));
    Checkpoint pre_ck = Checkpoint::load(cfg.str("pretrained"));
    const std::string type = cfg.str("entity_type");
    Catalogue cat = Catalogue::load(cfg.str("catalogue"), type);

    EntityConfig ec;
    ec.entity_type = type;
    ec.n_layers = static_cast<int>(cfg.i64_or("n_layers", 2));
    ec.d_model = std::stoi(pre_ck.meta("d_model"));
    ec.d_ff = static_cast<int>(cfg.i64_or("d_ff", 128));
    ec.n_heads = static_cast<int>(cfg.i64_or("n_heads", 4));
    ec.dropout = cfg.f64_or("dropout", 0.1);
    ec.k = static_cast<int>(cfg.i64_or("k", 4));
    if (ec.k < 1) throw ConfigError("train-entity: k must be at least 1");
    ec.vocab_size = vocab.size();
    ec.max_entity_tokens = static_cast<int>(cfg.i64_or("max_entity_tokens", 32));

    EntityTrainOptions eo;
    eo.n_samples = static_cast<int>(cfg.i64_or("samples", 5000));
    eo.grad_accum = static_cast<int>(cfg.i64_or("grad_accum", 2));
    eo.schedule = schedule_from_kv(cfg, DeskConfig{}.ent_sched);
    eo.seed = seed;

    Checkpoint ck;
    if (cfg.has("additions")) {
        std::vector<std::string> additions = read_lines(cfg.str("additions"));
        RetrainResult rr = retrain_with_additions<PReal>(
            cat, additions, vocab, pre_ck, ec, eo, cfg.f64_or("top_rank_fraction", 0.05),
            cfg.flag_or("skip_untokenizable", false));
        for (const auto& s : rr.skipped)
            std::cerr << "skipped untokenizable entity: " << s << "\n";
        ck = std::move(rr.checkpoint);
    } else {
        ck = train_entity_model<PReal>(cat, vocab, pre_ck, ec, eo);
    }
    ck.save(join_path(out_dir, cfg.str_or("out", "entity." + type + ".ckpt")));
}

void stage_train_fusion(const KeyValue& cfg, uint64_t seed, const std::string& out_dir) {
    Vocabulary vocab = Vocabulary::load(cfg.str("vocab"));
    const std::string pre_path = cfg.str("pretrained");
    Checkpoint pre_ck = Checkpoint::load(pre_path);
    std::vector<std::string> types;
    std::vector<Checkpoint> ent_cks;
    std::vector<std::pair<std::string, std::string>> ent_paths;
    for (const auto& [type, path] : cfg.with_prefix("entity")) {
        types.push_back(type);
        ent_paths.push_back({type, path});
        ent_cks.push_back(Checkpoint::load(path));
    }

    Corpus corpus = Corpus::load(cfg.str("corpus"), cfg.str_or("spans", ""));
    const int max_len = std::stoi(pre_ck.meta("max_positions"));
    auto all_tokens = tokenize_corpus(vocab, corpus, max_len);
    std::vector<Utterance> subset;
    {
        double fraction = cfg.f64_or("fraction", 0.08);
        std::vector<size_t> order(all_tokens.size());
        for (size_t i = 0; i < order.size(); i++) order[i] = i;
        Rng r = Rng(seed).derive(30);
        r.shuffle(order);
        size_t keep = std::max<size_t>(1, static_cast<size_t>(fraction * order.size()));
        for (size_t i = 0; i < keep; i++) subset.push_back(all_tokens[order[i]]);
    }

    FusionConfig fc;
    fc.d_model = std::stoi(pre_ck.meta("d_model"));
    fc.d_ff = static_cast<int>(cfg.i64_or("d_ff", std::stoi(pre_ck.meta("d_ff"))));
    fc.n_heads = static_cast<int>(cfg.i64_or("n_heads", std::stoi(pre_ck.meta("n_heads"))));
    fc.max_positions = max_len;
    fc.k = ent_cks.empty() ? static_cast<int>(cfg.i64_or("k", 4))
                           : std::stoi(ent_cks[0].meta("k"));
    fc.dropout = cfg.f64_or("dropout", 0.1);
    fc.dropout_entity = cfg.f64_or("dropout_entity", 0.25);
    fc.vocab_size = vocab.size();

    Rng init = Rng(seed).derive(31);
    FusionLayer<PReal> fus(fc, types, &init);
    Checkpoint fresh = fus.to_checkpoint(vocab.content_hash(), seed, {});
    EntityAwareLM<PReal> lm = EntityAwareLM<PReal>::compose(pre_ck, ent_cks, fresh, true);

    FusionTrainOptions fo;
    fo.epochs = static_cast<int>(cfg.i64_or("epochs", 4));
    fo.grad_accum = static_cast<int>(cfg.i64_or("grad_accum", 2));
    fo.schedule = schedule_from_kv(cfg, DeskConfig{}.fus_sched);
    fo.seed = Rng(seed).derive(32).seed();
    Checkpoint fus_ck = train_fusion(lm, subset, fo);
    const std::string fus_path = join_path(out_dir, cfg.str_or("out", "fusion.ckpt"));
    fus_ck.save(fus_path);

    EalmManifest manifest;
    manifest.vocab_path = cfg.str("vocab");
    manifest.pretrained_path = pre_path;
    manifest.entity_paths = ent_paths;
    manifest.fusion_path = fus_path;
    manifest.save(join_path(out_dir, cfg.str_or("out_manifest", "ealm.manifest")));
}

void stage_eval(const KeyValue& cfg, uint64_t seed, const std::string& out_dir) {
    Vocabulary vocab = Vocabulary::load(cfg.str("vocab"));
    Corpus corpus = Corpus::load(cfg.str("testset"), cfg.str_or("spans", ""));
    const std::string model = cfg.str_or("model", "ealm");
    EvalReport report;
    int max_len = static_cast<int>(cfg.i64_or("max_len", 32));

    if (model == "pretrained") {
        Checkpoint pre_ck = Checkpoint::load(cfg.str("pretrained"));
        if (pre_ck.meta("vocab_hash") != hash_hex(vocab.content_hash()))
            throw ContractError("eval: tokenizer hash does not match the model checkpoint");
        max_len = std::stoi(pre_ck.meta("max_positions"));
        PretrainedLM<PReal> lm = PretrainedLM<PReal>::from_checkpoint(pre_ck, false);
        report = evaluate_pretrained(lm, tokenize_corpus(vocab, corpus, max_len),
                                     cfg.str_or("testset_name", "testset"));
        report.checkpoint_hashes.push_back({"pretrained", hash_hex(pre_ck.content_hash())});
    } else if (model == "ealm") {
        EalmManifest manifest = EalmManifest::load(cfg.str("manifest"));
        EntityAwareLM<PReal> lm = load_ealm(manifest);
        if (lm.vocab_hash != vocab.content_hash())
            throw ContractError("eval: tokenizer hash does not match the model checkpoints");
        max_len = lm.pretrained.cfg.max_positions;
        ComposeCache<PReal> cache;
        report = evaluate_ealm(lm, tokenize_corpus(vocab, corpus, max_len),
                               cfg.str_or("testset_name", "testset"), &cache);
    } else {
        throw ConfigError("eval: model must be 'pretrained' or 'ealm'");
    }
    report.seed = seed;

    if (cfg.has("baseline")) {
        EvalReport base = EvalReport::load(cfg.str("baseline"));
        report.save(join_path(out_dir, cfg.str_or("out", "report.tsv")), &base);
    } else {
        report.save(join_path(out_dir, cfg.str_or("out", "report.tsv")));
    }
}

void stage_swap(const KeyValue& cfg, const std::string& out_dir) {
    EalmManifest manifest = EalmManifest::load(cfg.str("manifest"));
    const std::string type = cfg.str("entity_type");
    const std::string new_path = cfg.str("checkpoint");

    // full contract validation by actually composing with the replacement
    EntityAwareLM<PReal> lm = load_ealm(manifest);
    Checkpoint new_ck = Checkpoint::load(new_path);
    lm.swap_entity(type, new_ck);

    bool found = false;
    for (auto& [t, path] : manifest.entity_paths) {
        if (t == type) {
            path = new_path;
            found = true;
        }
    }
    if (!found) throw ContractError("swap: manifest has no entity model of type '" + type + "'");
    manifest.save(join_path(out_dir, cfg.str_or("out", "ealm.manifest")));
}

namespace {

DeskConfig desk_config_from_kv(const KeyValue& cfg) {
    DeskConfig dc;
    if (cfg.has("world.entity_types")) dc.world.entity_types = split_list(cfg.str("world.entity_types"));
    dc.world.entities_per_type =
        static_cast<int>(cfg.i64_or("world.entities_per_type", dc.world.entities_per_type));
    dc.world.heldout_fraction = cfg.f64_or("world.heldout_fraction", dc.world.heldout_fraction);
    dc.world.ooc_per_type = static_cast<int>(cfg.i64_or("world.ooc_per_type", dc.world.ooc_per_type));
    dc.world.novel_per_type =
        static_cast<int>(cfg.i64_or("world.novel_per_type", dc.world.novel_per_type));
    dc.corpus_utterances = static_cast<int>(cfg.i64_or("corpus_utterances", dc.corpus_utterances));
    dc.slot_rate = cfg.f64_or("slot_rate", dc.slot_rate);
    dc.coverage = cfg.f64_or("coverage", dc.coverage);
    dc.bpe_merges = static_cast<int>(cfg.i64_or("bpe_merges", dc.bpe_merges));
    dc.max_len = static_cast<int>(cfg.i64_or("max_len", dc.max_len));
    dc.pre_layers = static_cast<int>(cfg.i64_or("pre.n_layers", dc.pre_layers));
    dc.d_model = static_cast<int>(cfg.i64_or("d_model", dc.d_model));
    dc.d_ff = static_cast<int>(cfg.i64_or("d_ff", dc.d_ff));
    dc.n_heads = static_cast<int>(cfg.i64_or("n_heads", dc.n_heads));
    dc.pre_epochs = static_cast<int>(cfg.i64_or("pre.epochs", dc.pre_epochs));
    dc.ent_layers = static_cast<int>(cfg.i64_or("entity.n_layers", dc.ent_layers));
    dc.k = static_cast<int>(cfg.i64_or("k", dc.k));
    dc.ent_samples = static_cast<int>(cfg.i64_or("entity.samples", dc.ent_samples));
    dc.fus_epochs = static_cast<int>(cfg.i64_or("fusion.epochs", dc.fus_epochs));
    dc.fusion_fraction = cfg.f64_or("fusion.fraction", dc.fusion_fraction);
    dc.test_utterances = static_cast<int>(cfg.i64_or("test_utterances", dc.test_utterances));
    return dc;
}

}  // namespace

void stage_fraction_study(const KeyValue& cfg, uint64_t seed, const std::string& out_dir) {
    DeskConfig dc = desk_config_from_kv(cfg);
    std::vector<double> fractions;
    for (const auto& f : split_list(cfg.str_or("fractions", "0.25;0.5;1.0")))
        fractions.push_back(std::stod(f));

    DeskArtifacts art = run_desk_pipeline(dc, seed, cfg.flag_or("verbose", false));
    FractionEval fe = run_fraction_study(dc, art, fractions, Rng(seed).derive(7).seed(),
                                         cfg.flag_or("verbose", false));

    std::ofstream f(join_path(out_dir, cfg.str_or("out", "fraction_study.tsv")), std::ios::binary);
    if (!f) throw IoError("fraction-study: cannot write output");
    f << "# ealm-fraction-study v1\n# seed " << seed << "\n";
    f << "# noise_band_general " << fe.noise_band << "\n";
    f << "set\tfraction\tgeneral_reduction\ttailnew_reduction\n";
    f.precision(17);
    for (const auto& row : fe.rows)
        f << row.label << "\t" << row.fraction << "\t" << row.general_reduction << "\t"
          << row.tailnew_reduction << "\n";
}

void stage_trace(const KeyValue& cfg, const std::string& out_dir) {
    EalmManifest manifest = EalmManifest::load(cfg.str("manifest"));
    Vocabulary vocab = Vocabulary::load(manifest.vocab_path);
    EntityAwareLM<PReal> lm = load_ealm(manifest);
    RawUtterance raw{cfg.str("utterance"), {}};
    Utterance u = tokenize_utterance(vocab, raw, lm.pretrained.cfg.max_positions);
    ComposeCache<PReal> cache;
    UtteranceEval ev = lm.eval_utterance(u.tokens, &vocab, &cache, true);
    write_trace(ev.trace, lm.fusion.entity_types, lm.fusion.cfg.k,
                join_path(out_dir, cfg.str_or("out", "trace.tsv")));
}

}  // namespace ealm
