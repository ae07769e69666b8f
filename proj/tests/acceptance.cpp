// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failing criteria.

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "alloc_oracle.hpp"
#include "erase_oracle.hpp"
#include "gradcheck.hpp"
#include "lorashear/compressor.hpp"
#include "lorashear/config.hpp"
#include "lorashear/eval.hpp"
#include "lorashear/knowledge.hpp"
#include "lorashear/lhspg.hpp"
#include "lorashear/pipeline.hpp"
#include "lorashear/train.hpp"
#include "model_util.hpp"
#include "run_util.hpp"
#include "toy_groups_oracle.hpp"

using namespace lorashear;
using namespace lorashear::testing;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Analysis {
    TraceGraph graph;
    NodeGroups node_groups;
    GroupSet groups;
};

Analysis analyze(const LoraModel& m) {
    Analysis a;
    a.graph = build_trace_graph(m);
    a.node_groups = discover_node_groups(a.graph, mark_composed_spans(a.graph));
    a.groups = partition_variables(a.graph, a.node_groups);
    return a;
}

bool bit_equal(const LoraModel& a, const LoraModel& b) {
    auto ta = named_tensors(const_cast<LoraModel&>(a)), tb = named_tensors(const_cast<LoraModel&>(b));
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i].name != tb[i].name || ta[i].tensor->shape() != tb[i].tensor->shape()) return false;
        const auto &x = ta[i].tensor->data(), &y = tb[i].tensor->data();
        if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

bool is_head(const Group& g) { return g.slices.front().tensor.find(".attn.") != std::string::npos; }
std::size_t block_of(const Group& g) {
    const auto& t = g.slices.front().tensor;
    return std::stoul(t.substr(7, t.find('.', 7) - 7));
}

// A briefly trained toy model with a short corpus, shared by criteria 4-6.
struct Warm {
    LoraModel model;
    SourceTaggedCorpus corpus;
};

const Warm& warm() {
    static const Warm w = [] {
        Warm w;
        CorpusConfig cc;
        cc.train_per_source = 64;
        cc.val_per_source = 8;
        cc.seq_len = 33;
        w.corpus = generate_corpus(cc, 21);
        w.model = build_model(toy_config(21));
        TrainConfig tc;
        tc.steps = 150;
        tc.lr = 3e-3;
        tc.optimizer.kind = OptimizerKind::kAdamW;
        tc.seed = 21;
        train(w.model, Trainable::kBase, w.corpus.all_train(), tc);
        return w;
    }();
    return w;
}

Outcome gradients() {
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(5);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), c = random_tensor({4, 2}, rng);
    Tensor sq = random_tensor({4, 4}, rng), gain = random_tensor({4}, rng), table = random_tensor({6, 4}, rng);
    const std::vector<int> ids = {5, 0, 5}, targets = {1, 3, 0};
    using Fn = std::function<Var(Tape&, std::vector<Var>&)>;
    const std::vector<std::tuple<std::string, std::vector<Tensor*>, Fn>> ops = {
        {"matmul", {&a, &c}, [](Tape& t, auto& v) { return weighted_sum(t, t.matmul(v[0], v[1]), 1); }},
        {"linear", {&a, &b}, [](Tape& t, auto& v) { return weighted_sum(t, t.linear(v[0], v[1]), 2); }},
        {"add,mul", {&a, &b}, [](Tape& t, auto& v) { return weighted_sum(t, t.mul(t.add(v[0], v[1]), v[0]), 3); }},
        {"scale,silu", {&a}, [](Tape& t, auto& v) { return weighted_sum(t, t.silu(t.scale(v[0], 1.7)), 4); }},
        {"softmax", {&a}, [](Tape& t, auto& v) { return weighted_sum(t, t.softmax(v[0]), 5); }},
        {"causal_softmax", {&sq}, [](Tape& t, auto& v) { return weighted_sum(t, t.causal_softmax(v[0]), 6); }},
        {"rmsnorm", {&a, &gain}, [](Tape& t, auto& v) { return weighted_sum(t, t.rmsnorm(v[0], v[1], 1e-6), 7); }},
        {"embedding", {&table}, [&](Tape& t, auto& v) { return weighted_sum(t, t.embedding(v[0], ids), 8); }},
        {"slice,concat", {&a, &b},
         [](Tape& t, auto& v) {
             std::vector<Var> parts = {t.slice_cols(v[0], 1, 2), v[1], t.slice_cols(v[0], 0, 1)};
             return weighted_sum(t, t.concat_cols(parts), 9);
         }},
        {"cross_entropy", {&a}, [&](Tape& t, auto& v) { return t.cross_entropy(v[0], targets); }},
    };
    double worst = 0.0;
    for (const auto& [name, inputs, fn] : ops) {
        const double e = gradcheck(inputs, fn);
        o.require(e < 1e-4, name);
        worst = std::max(worst, e);
    }
    LoraModel m = build_model(toy_config(2));
    randomize_lora(m, 2, 0.2);
    set_trainable(m, Trainable::kAll);
    std::vector<std::vector<int>> batch = {random_tokens(6, 64, rng), random_tokens(4, 64, rng)};
    std::vector<Tensor*> params;
    for (auto& nt : named_tensors(m)) params.push_back(nt.tensor);
    const double model_err = gradcheck(params, [&](Tape& t, std::vector<Var>&) { return batch_loss(t, m, batch); });
    o.require(model_err < 1e-4, "toy model loss");
    const double secs = seconds_since(t0);
    o.require(secs < 60.0, "runtime");
    o.detail << "ops max rel err " << worst << ", toy-model loss max rel err " << model_err << " over "
             << parameter_count(m) << " parameters, " << secs << " s";
    return o;
}

Outcome dependency_oracle() {
    Outcome o;
    const auto cfg = toy_config();
    const Analysis a = analyze(build_model(cfg));
    const auto expected = expected_toy_basic_groups(cfg.layers, cfg.heads, cfg.mlp_dim);
    const auto basic = a.node_groups.basic();
    bool same = basic.size() == expected.size();
    for (std::size_t i = 0; same && i < expected.size(); ++i) {
        std::vector<std::pair<std::string, Axis>> params;
        for (const auto& mem : basic[i]->members)
            if (!a.graph.node(mem.node).param.empty()) params.push_back({a.graph.node(mem.node).param, mem.axis});
        std::sort(params.begin(), params.end());
        same = basic[i]->name == expected[i].name && basic[i]->prunable == expected[i].prunable &&
               basic[i]->structure_count() == expected[i].structures && params == expected[i].params;
    }
    o.require(same, "node groups");
    auto sorted = [](std::vector<Slice> v) {
        std::sort(v.begin(), v.end(), [](const Slice& x, const Slice& y) {
            return std::tie(x.tensor, x.axis, x.begin) < std::tie(y.tensor, y.axis, y.begin);
        });
        return v;
    };
    const auto slices = expected_toy_group_slices(cfg.layers, cfg.heads, cfg.head_dim(), cfg.mlp_dim);
    bool groups_same = a.groups.groups.size() == slices.size();
    for (std::size_t i = 0; groups_same && i < slices.size(); ++i)
        groups_same = sorted(a.groups.groups[i].slices) == sorted(slices[i]);
    o.require(groups_same, "group slices");
    const std::size_t want = cfg.layers * (cfg.mlp_dim + cfg.heads);
    o.require(a.groups.prunable_ids().size() == want, "prunable count");
    o.detail << basic.size() << " basic node groups, " << a.groups.groups.size() << " groups, prunable "
             << a.groups.prunable_ids().size() << " (expected " << want << ")";
    return o;
}

Outcome removal_soundness() {
    Outcome o;
    const auto cfg = toy_config(3);
    LoraModel m = build_model(cfg);
    randomize_lora(m, 5);
    const Analysis a = analyze(m);
    std::vector<std::size_t> ids = a.groups.prunable_ids();
    std::mt19937_64 rng(2024);
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(20);
    const auto tokens = random_tokens(24, cfg.vocab, rng);
    double worst = 0.0;
    for (auto id : ids) {
        LoraModel z = m;
        zero_group(z, a.groups.groups[id]);
        worst = std::max(worst, max_abs_diff(forward(z, tokens), forward(erase_groups(m, a.groups, {id}), tokens)));
    }
    LoraModel z = m;
    for (auto id : ids) zero_group(z, a.groups.groups[id]);
    const double joint = max_abs_diff(forward(z, tokens), forward(erase_groups(m, a.groups, ids), tokens));
    o.require(worst < 1e-9 && joint < 1e-9, "tolerance");
    o.detail << "20 groups, max abs diff " << worst << " individually, " << joint << " jointly";
    return o;
}

Outcome knowledge_restore() {
    Outcome o;
    const Warm& w = warm();
    LoraModel m = w.model;
    randomize_lora(m, 8, 0.05);
    const LoraModel pristine = m;
    const Analysis a = analyze(m);
    const auto eval = w.corpus.pooled_val(Phase::kPretraining);
    const double full = perplexity(m, eval);
    const std::vector<double> ratios = {0.25, 0.5};
    std::size_t probes = 0, identical = 0, library_equal = 0;
    for (std::size_t ng = 0; ng < a.node_groups.groups.size(); ++ng) {
        const auto r = probe_deviation(m, a.groups, ng, ratios, eval, full, saliency_proxy("effective_l2"),
                                       [&](LoraModel& now) { identical += bit_equal(now, pristine); });
        ++probes;
        library_equal += r.hash_before == r.hash_after;
    }
    o.require(identical == probes && library_equal == probes, "restore");
    o.detail << probes << " node groups probed, " << identical << " bit-identical restores, " << library_equal
             << " matching hashes";
    return o;
}

void lhspg_at(Outcome& o, double ratio) {
    const Warm& w = warm();
    LoraModel m = w.model;
    Analysis a = analyze(m);
    KnowledgeConfig kc;
    const auto eval = w.corpus.pooled_val(Phase::kPretraining);
    analyze_knowledge(m, a.groups, a.node_groups, kc, eval);
    const std::size_t prunable = a.groups.prunable_ids().size();
    const std::size_t k = derive_target(ratio, prunable);
    const auto unprunable = a.groups.ids_with(GroupStatus::kUnprunable);
    LhspgConfig c;
    c.warmup_steps = 30;
    c.periods = 5;
    c.period_steps = 10;
    c.target = k;
    c.seed = 3;
    std::vector<std::vector<double>> last;
    bool have_last = false;
    std::size_t changed_outside_merge = 0, frames = 0;
    const auto res = run_lhspg(m, a.groups, c, w.corpus.pooled_train(Phase::kPretraining),
                               [&](const StepRecord& r, const LoraModel& now) {
                                   if (r.phase != "prune") return;
                                   std::vector<std::vector<double>> vals;
                                   for (auto id : unprunable) vals.push_back(group_values(now, a.groups.groups[id]));
                                   if (have_last && !r.merged && vals != last) ++changed_outside_merge;
                                   last = std::move(vals);
                                   have_last = true;
                                   ++frames;
                               });
    std::size_t warm_changed = 0;
    for (auto id : unprunable)
        warm_changed += group_values(res.after_warmup, a.groups.groups[id]) != group_values(w.model, a.groups.groups[id]);
    const std::size_t zero = count_zero_groups(m, a.groups);
    o.require(zero == k, "cardinality at " + std::to_string(ratio));
    o.require(changed_outside_merge == 0 && warm_changed == 0, "unprunable isolation at " + std::to_string(ratio));
    o.detail << "ratio " << ratio << ": K=" << k << " of " << prunable << ", zero groups " << zero << ", "
             << unprunable.size() << " unprunable groups untouched outside merges over " << frames << " steps; ";
}

Outcome lhspg_cardinality() {
    Outcome o;
    lhspg_at(o, 0.2);
    lhspg_at(o, 0.5);
    return o;
}

Outcome merge_identity() {
    Outcome o;
    const Warm& w = warm();
    LoraModel m = w.model;
    Analysis a = analyze(m);
    LhspgConfig c;
    c.warmup_steps = 40;
    c.periods = 1;
    c.period_steps = 1;
    c.seed = 4;
    const LoraModel warmed = run_lhspg(m, a.groups, c, w.corpus.all_train()).after_warmup;
    std::mt19937_64 rng(9);
    double worst = 0.0;
    LhspgState st;
    for (int trial = 0; trial < 2; ++trial) {
        LoraModel before = warmed;
        if (trial == 1) {
            // redundant groups already zeroed in both weights and adaptor slices
            for (std::size_t id = 0; id < 136; id += 9) {
                zero_group(before, a.groups.groups[id]);
                st.redundant.push_back(id);
            }
        }
        LoraModel after = before;
        end_of_period_merge(after, st, a.groups);
        for (int s = 0; s < 10; ++s) {
            const auto t = random_tokens(1 + rng() % 32, 64, rng);
            worst = std::max(worst, max_abs_diff(forward(before, t), forward(after, t)));
        }
    }
    o.require(worst < 1e-9, "tolerance");
    o.detail << "max abs logit change " << worst << " over 20 sequences";
    return o;
}

Outcome compression_equivalence() {
    Outcome o;
    for (double ratio : {0.2, 0.5}) {
        const auto cfg = toy_config(11);
        LoraModel m = build_model(cfg);
        randomize_lora(m, 6, 0.2);
        Analysis a = analyze(m);
        std::vector<std::size_t> ids = a.groups.prunable_ids();
        std::mt19937_64 rng(77);
        std::shuffle(ids.begin(), ids.end(), rng);
        ids.resize(static_cast<std::size_t>(std::llround(ratio * ids.size())));
        LoraModel z = m;
        for (auto id : ids) {
            zero_group(z, a.groups.groups[id]);
            a.groups.groups[id].status = GroupStatus::kRedundant;
        }
        const LoraModel c = apply_compression(m, plan_compression(m, a.groups, a.graph, a.node_groups));
        double worst = 0.0;
        for (int s = 0; s < 100; ++s) {
            const auto t = random_tokens(1 + rng() % cfg.max_seq, cfg.vocab, rng);
            worst = std::max(worst, max_abs_diff(forward(z, t), forward(c, t)));
        }
        std::vector<std::size_t> heads(cfg.layers, cfg.heads), neurons(cfg.layers, cfg.mlp_dim);
        for (auto id : ids) (is_head(a.groups.groups[id]) ? heads : neurons)[block_of(a.groups.groups[id])]--;
        const std::size_t d = cfg.hidden, r = cfg.rank, hd = cfg.hidden / cfg.heads;
        std::size_t closed = 2 * cfg.vocab * d + cfg.max_seq * d + d;
        for (std::size_t b = 0; b < cfg.layers; ++b) {
            const std::size_t q = heads[b] * hd, n = neurons[b];
            closed += 2 * d + 3 * (q * d + r * d + q * r) + (d * q + r * q + d * r);
            closed += 2 * (n * d + r * d + n * r) + (d * n + r * n + d * r);
        }
        std::size_t counted = 0;
        for (const auto& nt : named_tensors(const_cast<LoraModel&>(c))) counted += nt.tensor->data().size();
        o.require(worst < 1e-9, "logits at " + std::to_string(ratio));
        o.require(counted == closed, "parameter count at " + std::to_string(ratio));
        o.detail << "ratio " << ratio << ": max abs diff " << worst << " over 100 sequences, parameters " << counted
                 << " of " << parameter_count(m) << " (closed form " << closed << "); ";
    }
    return o;
}

struct SeedRun {
    std::uint64_t seed = 0;
    fs::path dir;
    double seconds = 0.0;
};

std::vector<SeedRun>& seed_runs() {
    static std::vector<SeedRun> runs = [] {
        std::vector<SeedRun> out;
        for (std::uint64_t s = 1; s <= 5; ++s) {
            PipelineConfig cfg;
            cfg.seed = s;
            SeedRun r{s, fresh_dir("accept_seed" + std::to_string(s))};
            const auto t0 = Clock::now();
            run_all(cfg, r.dir);
            r.seconds = seconds_since(t0);
            out.push_back(r);
        }
        return out;
    }();
    return runs;
}

nlohmann::json summary(const fs::path& dir, const std::string& stage) {
    return nlohmann::json::parse(slurp(dir / "manifests" / (stage + ".json"))).at("summary");
}

Outcome knowledge_transfer() {
    Outcome o;
    std::size_t wins = 0;
    double slowest = 0.0;
    for (const auto& r : seed_runs()) {
        const auto s = summary(r.dir, "prune");
        const double lh = s.at("heldout_loss_lhspg"), os = s.at("heldout_loss_one_shot");
        wins += lh <= os;
        slowest = std::max(slowest, r.seconds);
        o.detail << "seed " << r.seed << " " << lh << " vs " << os << "; ";
    }
    o.require(wins >= 4, "wins");
    o.require(slowest < 1800.0, "runtime");
    o.detail << wins << "/5 seeds with LHSPG <= one-shot held-out loss, slowest run " << slowest << " s";
    return o;
}

Outcome recovery_efficacy() {
    Outcome o;
    std::size_t wins = 0, rounds = 0, exact = 0;
    for (const auto& r : seed_runs()) {
        const auto s = summary(r.dir, "recover");
        const double pre = s.at("pre_mean_perplexity"), post = s.at("post_mean_perplexity");
        wins += post < pre;
        const auto cfg = nlohmann::json::parse(slurp(r.dir / "config.json")).at("recovery");
        std::istringstream log(slurp(r.dir / "recovery_log.jsonl"));
        for (std::string line; std::getline(log, line);) {
            if (line.empty()) continue;
            const auto rec = nlohmann::json::parse(line);
            ++rounds;
            const auto want = oracle_allocation(rec.at("degradation").get<std::vector<double>>(),
                                                cfg.at("budget").get<std::size_t>(), cfg.at("floor").get<double>());
            exact += rec.at("allocation").get<std::vector<std::size_t>>() == want &&
                     rec.at("subset_histogram").get<std::vector<std::size_t>>() == want;
        }
        o.detail << "seed " << r.seed << " " << pre << " -> " << post << "; ";
    }
    o.require(wins >= 4, "wins");
    o.require(rounds > 0 && exact == rounds, "allocations");
    o.detail << wins << "/5 seeds improved, " << exact << "/" << rounds << " rounds with exact allocations";
    return o;
}

Outcome determinism() {
    Outcome o;
    const auto& first = seed_runs().front();
    PipelineConfig cfg;
    cfg.seed = first.seed;
    const fs::path again = fresh_dir("accept_repeat");
    run_all(cfg, again);
    const auto a = tree(first.dir), b = tree(again);
    std::size_t differ = 0;
    for (const auto& [name, bytes] : a) differ += !b.contains(name) || b.at(name) != bytes;
    o.require(a.size() == b.size() && differ == 0, "bytes");
    o.detail << a.size() << " files compared, " << differ << " differ";
    fs::remove_all(again);
    return o;
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient correctness", gradients},
        {"dependency oracle", dependency_oracle},
        {"removal soundness", removal_soundness},
        {"knowledge-analysis restore", knowledge_restore},
        {"LHSPG cardinality", lhspg_cardinality},
        {"merge identity", merge_identity},
        {"compression equivalence", compression_equivalence},
        {"knowledge transfer", knowledge_transfer},
        {"recovery efficacy", recovery_efficacy},
        {"determinism", determinism},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << " [exception: " << e.what() << "]";
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << i + 1 << ". " << criteria[i].first << ": " << o.detail.str()
                  << std::endl;
    }
    for (const auto& r : seed_runs()) fs::remove_all(r.dir);
    std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
    return failed;
}
