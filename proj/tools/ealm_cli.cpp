// Command-line front end: one subcommand per pipeline stage. Every
// subcommand takes --config (key = value text), --seed and --out-dir;
// failures print a single "<error-class>: <message>" line and exit nonzero.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <string>

#include "ealm/config.hpp"
#include "ealm/errors.hpp"
#include "ealm/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    uint64_t seed = 1;
    bool seed_given = false;
    std::string out_dir = ".";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "key = value config file")->required();
    cmd->add_option("--seed", args.seed, "random seed (overrides the config's seed)")
        ->each([&args](const std::string&) { args.seed_given = true; });
    cmd->add_option("--out-dir", args.out_dir, "directory for output files");
}

ealm::KeyValue load_config(CommonArgs& args) {
    ealm::KeyValue cfg = ealm::KeyValue::load(args.config_path);
    if (!args.seed_given && cfg.has("seed"))
        args.seed = static_cast<uint64_t>(cfg.i64("seed"));
    std::filesystem::create_directories(args.out_dir);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"entity-aware language model pipeline"};
    app.require_subcommand(1);

    CommonArgs args;
    auto* tok = app.add_subcommand("tokenizer-train", "train the byte-pair vocabulary");
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic corpus with gold spans");
    auto* pre = app.add_subcommand("pretrain", "train the pre-trained LM");
    auto* ent = app.add_subcommand("train-entity", "train one entity model on a catalogue");
    auto* fus = app.add_subcommand("train-fusion", "train the contextual fusion layer");
    auto* evl = app.add_subcommand("eval", "teacher-forced perplexity report");
    auto* swp = app.add_subcommand("swap", "hot-swap one entity checkpoint in a manifest");
    auto* frs = app.add_subcommand("fraction-study", "catalogue-fraction continual-learning study");
    auto* trc = app.add_subcommand("trace", "emit interpolation-probability trace for an utterance");
    for (auto* cmd : {tok, gen, pre, ent, fus, evl, swp, frs, trc}) add_common(cmd, args);

    CLI11_PARSE(app, argc, argv);

    try {
        ealm::KeyValue cfg = load_config(args);
        if (tok->parsed()) ealm::stage_tokenizer_train(cfg, args.out_dir);
        if (gen->parsed()) ealm::stage_gen_corpus(cfg, args.seed, args.out_dir);
        if (pre->parsed()) ealm::stage_pretrain(cfg, args.seed, args.out_dir);
        if (ent->parsed()) ealm::stage_train_entity(cfg, args.seed, args.out_dir);
        if (fus->parsed()) ealm::stage_train_fusion(cfg, args.seed, args.out_dir);
        if (evl->parsed()) ealm::stage_eval(cfg, args.seed, args.out_dir);
        if (swp->parsed()) ealm::stage_swap(cfg, args.out_dir);
        if (frs->parsed()) ealm::stage_fraction_study(cfg, args.seed, args.out_dir);
        if (trc->parsed()) ealm::stage_trace(cfg, args.out_dir);
    } catch (const std::exception& e) {
        std::cerr << ealm::error_class(e) << ": " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
