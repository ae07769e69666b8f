#include "lorashear/corpus.hpp"

#include <array>
#include <functional>
#include <random>
#include <set>

#include "lorashear/error.hpp"

namespace lorashear {

const std::string& vocabulary() {
    static const std::string v = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOP0123456789 .;=>()[]{}<";
    return v;
}

int encode_char(char c) {
    static const auto table = [] {
        std::array<int, 256> t{};
        t.fill(-1);
        for (std::size_t i = 0; i < vocabulary().size(); ++i) t[static_cast<unsigned char>(vocabulary()[i])] = static_cast<int>(i);
        return t;
    }();
    const int id = table[static_cast<unsigned char>(c)];
    if (id < 0) throw FormatError(std::string("character '") + c + "' is outside the vocabulary");
    return id;
}

Sequence encode(const std::string& text) {
    Sequence out;
    out.reserve(text.size());
    for (char c : text) out.push_back(encode_char(c));
    return out;
}

std::string decode(const Sequence& tokens) {
    std::string out;
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocabulary().size()) throw FormatError("token id out of range");
        out.push_back(vocabulary()[static_cast<std::size_t>(t)]);
    }
    return out;
}

std::string phase_name(Phase p) { return p == Phase::kPretraining ? "pretraining" : "instruct"; }

namespace {

using Rng = std::mt19937_64;

std::size_t pick(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

// Fixed sparse transition table: each context has a few weighted successors.
// Built from a constant seed so the language itself never changes.
struct MarkovTable {
    std::string alphabet;
    std::size_t order = 1;
    std::vector<std::vector<std::size_t>> next;

    MarkovTable(std::string alpha, std::size_t ord, std::size_t fanout, std::uint64_t seed)
        : alphabet(std::move(alpha)), order(ord) {
        Rng rng(seed);
        std::size_t contexts = 1;
        for (std::size_t i = 0; i < order; ++i) contexts *= alphabet.size();
        next.resize(contexts);
        for (auto& succ : next) {
            for (std::size_t k = 0; k < fanout; ++k) succ.push_back(pick(rng, alphabet.size()));
        }
    }

    std::string stream(std::size_t n, Rng& rng) const {
        static constexpr std::array<double, 4> kWeights = {0.55, 0.25, 0.15, 0.05};
        std::discrete_distribution<std::size_t> choose(kWeights.begin(), kWeights.begin() + next[0].size());
        std::vector<std::size_t> ctx(order);
        for (auto& c : ctx) c = pick(rng, alphabet.size());
        std::string out;
        while (out.size() < n) {
            std::size_t key = 0;
            for (auto c : ctx) key = key * alphabet.size() + c;
            const std::size_t sym = next[key][choose(rng)];
            out.push_back(alphabet[sym]);
            ctx.erase(ctx.begin());
            ctx.push_back(sym);
        }
        return out;
    }
};

std::string markov1(std::size_t n, Rng& rng) {
    static const MarkovTable table("abcdefghijklmnopqrstuvwxyz ", 1, 4, 0x6d61726b31);
    return table.stream(n, rng);
}

std::string markov2(std::size_t n, Rng& rng) {
    static const MarkovTable table("abcdefghijklmnop.", 2, 3, 0x6d61726b32);
    return table.stream(n, rng);
}

std::string dyck(std::size_t n, Rng& rng) {
    static const std::string open = "([{<";
    static const std::string close = ")]}>";
    std::string out;
    std::vector<std::size_t> stack;
    std::bernoulli_distribution push(0.55);
    while (out.size() < n) {
        if (stack.empty() || (stack.size() < 6 && push(rng))) {
            const std::size_t k = pick(rng, open.size());
            stack.push_back(k);
            out.push_back(open[k]);
        } else {
            out.push_back(close[stack.back()]);
            stack.pop_back();
        }
    }
    return out;
}

std::string counting(std::size_t n, Rng& rng) {
    std::size_t v = pick(rng, 5000);
    std::string out;
    while (out.size() < n) out += std::to_string(v++) + " ";
    return out;
}

std::string word(Rng& rng, const std::string& alphabet) {
    const std::size_t len = 3 + pick(rng, 3);
    std::string w;
    for (std::size_t i = 0; i < len; ++i) w.push_back(alphabet[pick(rng, alphabet.size())]);
    return w;
}

std::string reverse_task(std::size_t n, Rng& rng) {
    std::string out;
    while (out.size() < n) {
        const std::string w = word(rng, "abcdefghijklmnopqrstuvwxyz");
        out += w + ">" + std::string(w.rbegin(), w.rend()) + ";";
    }
    return out;
}

std::string upper_task(std::size_t n, Rng& rng) {
    std::string out;
    while (out.size() < n) {
        const std::string w = word(rng, "abcdefghijklmnop");
        std::string up = w;
        for (auto& c : up) c = static_cast<char>(c - 'a' + 'A');
        out += w + "=" + up + ".";
    }
    return out;
}

struct Language {
    const char* name;
    Phase phase;
    std::function<std::string(std::size_t, Rng&)> gen;
};

const std::vector<Language>& languages() {
    static const std::vector<Language> langs = {
        {"markov1", Phase::kPretraining, markov1}, {"markov2", Phase::kPretraining, markov2},
        {"dyck", Phase::kPretraining, dyck},       {"counting", Phase::kPretraining, counting},
        {"reverse", Phase::kInstruct, reverse_task}, {"upper", Phase::kInstruct, upper_task},
    };
    return langs;
}

const Language& language(const std::string& name) {
    for (const auto& l : languages()) {
        if (l.name == name) return l;
    }
    throw ConfigError("unknown corpus source '" + name + "'");
}

// Windows start at a random offset into a longer stream so sequences do not
// all begin at a unit boundary.
std::string window(const Language& lang, std::size_t n, Rng& rng) {
    const std::string s = lang.gen(n + 8, rng);
    return s.substr(pick(rng, 8), n);
}

}  // namespace

std::vector<std::string> source_names() {
    std::vector<std::string> out;
    for (const auto& l : languages()) out.emplace_back(l.name);
    return out;
}

Phase source_phase(const std::string& name) { return language(name).phase; }

std::string sample_text(const std::string& source, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    return window(language(source), n, rng);
}

SourceTaggedCorpus generate_corpus(const CorpusConfig& config, std::uint64_t seed) {
    if (config.seq_len < 2) throw ConfigError("corpus.seq_len must be at least 2");
    if (config.train_per_source == 0 || config.val_per_source == 0) {
        throw ConfigError("corpus.train_per_source and corpus.val_per_source must be positive");
    }
    SourceTaggedCorpus corpus;
    std::set<std::string> seen;
    const auto& langs = languages();
    for (std::size_t li = 0; li < langs.size(); ++li) {
        Rng rng(seed * 0x9E3779B97F4A7C15ULL + li + 1);
        Source src{langs[li].name, langs[li].phase, {}, {}};
        const std::size_t want = config.train_per_source + config.val_per_source;
        std::size_t attempts = 0;
        while (src.train.size() + src.val.size() < want) {
            if (++attempts > 50 * want) throw ConfigError("corpus: cannot draw enough distinct sequences for " + src.name);
            std::string text = window(langs[li], config.seq_len, rng);
            if (!seen.insert(text).second) continue;
            auto& pool = src.val.size() < config.val_per_source ? src.val : src.train;
            pool.push_back(encode(text));
        }
        corpus.sources.push_back(std::move(src));
    }
    return corpus;
}

std::vector<std::size_t> SourceTaggedCorpus::phase_sources(Phase p) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        if (sources[i].phase == p) out.push_back(i);
    }
    return out;
}

const Source& SourceTaggedCorpus::source(const std::string& name) const {
    for (const auto& s : sources) {
        if (s.name == name) return s;
    }
    throw ConfigError("corpus has no source '" + name + "'");
}

std::vector<Sequence> SourceTaggedCorpus::pooled_train(Phase p) const {
    std::vector<Sequence> out;
    for (auto i : phase_sources(p)) out.insert(out.end(), sources[i].train.begin(), sources[i].train.end());
    return out;
}

std::vector<Sequence> SourceTaggedCorpus::pooled_val(Phase p) const {
    std::vector<Sequence> out;
    for (auto i : phase_sources(p)) out.insert(out.end(), sources[i].val.begin(), sources[i].val.end());
    return out;
}

std::vector<Sequence> SourceTaggedCorpus::all_train() const {
    std::vector<Sequence> out;
    for (const auto& s : sources) out.insert(out.end(), s.train.begin(), s.train.end());
    return out;
}

std::vector<Sequence> SourceTaggedCorpus::all_val() const {
    std::vector<Sequence> out;
    for (const auto& s : sources) out.insert(out.end(), s.val.begin(), s.val.end());
    return out;
}

nlohmann::json corpus_to_json(const SourceTaggedCorpus& corpus) {
    using nlohmann::json;
    json sources = json::array();
    for (const auto& s : corpus.sources) {
        json train = json::array();
        json val = json::array();
        for (const auto& q : s.train) train.push_back(decode(q));
        for (const auto& q : s.val) val.push_back(decode(q));
        sources.push_back({{"name", s.name}, {"phase", phase_name(s.phase)}, {"train", train}, {"val", val}});
    }
    return json{{"schema_version", 1}, {"vocabulary", vocabulary()}, {"sources", sources}};
}

SourceTaggedCorpus corpus_from_json(const nlohmann::json& j) {
    SourceTaggedCorpus corpus;
    try {
        if (j.at("schema_version").get<int>() != 1) throw FormatError("corpus: unsupported schema version");
        if (j.at("vocabulary").get<std::string>() != vocabulary()) throw FormatError("corpus: vocabulary mismatch");
        for (const auto& sj : j.at("sources")) {
            Source s;
            s.name = sj.at("name").get<std::string>();
            const auto phase = sj.at("phase").get<std::string>();
            if (phase != "pretraining" && phase != "instruct") throw FormatError("corpus: bad phase '" + phase + "'");
            s.phase = phase == "pretraining" ? Phase::kPretraining : Phase::kInstruct;
            for (const auto& t : sj.at("train")) s.train.push_back(encode(t.get<std::string>()));
            for (const auto& t : sj.at("val")) s.val.push_back(encode(t.get<std::string>()));
            corpus.sources.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corpus: malformed JSON: ") + e.what());
    }
    return corpus;
}

}  // namespace lorashear
