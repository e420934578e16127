#include "ealm/report.hpp"

#include <fstream>
#include <sstream>

#include "ealm/errors.hpp"

namespace ealm {

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

void EvalReport::save(const std::string& path, const EvalReport* baseline) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("report: cannot write " + path);
    f << "# ealm-report v1\n";
    f << "# testset " << testset_name << "\n";
    f << "# model " << model_name << "\n";
    f << "# seed " << seed << "\n";
    for (const auto& [name, hash] : checkpoint_hashes) f << "# checkpoint " << name << " " << hash << "\n";
    if (baseline) f << "# baseline " << baseline->model_name << "\n";
    f << "slice\tutterances\ttokens\ttotal_nll\tperplexity";
    if (baseline) f << "\treduction_vs_baseline";
    f << "\n";
    auto row = [&](const std::string& name, const SliceStats& s, const SliceStats* bs) {
        f << name << "\t" << s.n_utterances << "\t" << s.n_tokens << "\t" << fmt(s.total_nll)
          << "\t" << fmt(s.perplexity());
        if (baseline) {
            if (bs && bs->n_tokens > 0)
                f << "\t" << fmt((bs->perplexity() - s.perplexity()) / bs->perplexity());
            else
                f << "\t-";
        }
        f << "\n";
    };
    row("ALL", all, baseline ? &baseline->all : nullptr);
    for (const auto& [type, s] : per_type) {
        const SliceStats* bs = nullptr;
        if (baseline) {
            auto it = baseline->per_type.find(type);
            if (it != baseline->per_type.end()) bs = &it->second;
        }
        row("type:" + type, s, bs);
    }

    std::ofstream nf(path + ".nll.tsv", std::ios::binary);
    if (!nf) throw IoError("report: cannot write " + path + ".nll.tsv");
    nf << "line_no\ttokens\tnll\n";
    for (const auto& [line_no, tokens, nll] : per_utterance)
        nf << line_no << "\t" << tokens << "\t" << fmt(nll) << "\n";
}

void write_trace(const std::vector<PositionTrace>& trace,
                 const std::vector<std::string>& entity_types, int k, const std::string& path) {
    auto write = [&](const std::string& out_path, int precision) {
        std::ofstream f(out_path, std::ios::binary);
        if (!f) throw IoError("trace: cannot write " + out_path);
        f << "token\tpfusion:pretrained";
        for (const auto& t : entity_types) f << "\tpfusion:" << t;
        for (const auto& t : entity_types)
            for (int l = 0; l <= k; l++) f << "\tpcontext:" << t << ":l" << l;
        f << "\n";
        f << std::fixed;
        f.precision(precision);
        for (const auto& row : trace) {
            f << row.token;
            for (double v : row.pfusion) f << "\t" << v;
            for (const auto& pc : row.pcontext)
                for (double v : pc) f << "\t" << v;
            f << "\n";
        }
    };
    write(path, 2);
    write(path + ".full.tsv", 17);
}

EvalReport EvalReport::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("report: cannot read " + path);
    EvalReport r;
    std::string line;
    bool header_seen = false;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream is(line.substr(1));
            std::string tag;
            is >> tag;
            if (tag == "testset") is >> r.testset_name;
            else if (tag == "model") is >> r.model_name;
            else if (tag == "seed") is >> r.seed;
            else if (tag == "checkpoint") {
                std::string name, hash;
                is >> name >> hash;
                r.checkpoint_hashes.push_back({name, hash});
            }
            continue;
        }
        if (!header_seen) {  // column header
            header_seen = true;
            continue;
        }
        std::istringstream is(line);
        std::string slice;
        SliceStats s;
        double ppl;
        if (!(is >> slice >> s.n_utterances >> s.n_tokens >> s.total_nll >> ppl))
            throw IoError("report: malformed row in " + path);
        if (slice == "ALL")
            r.all = s;
        else if (slice.rfind("type:", 0) == 0)
            r.per_type[slice.substr(5)] = s;
        else
            throw IoError("report: unknown slice '" + slice + "'");
    }
    return r;
}

}  // namespace ealm
