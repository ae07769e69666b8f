#include "lorashear/graph.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <queue>

#include "lorashear/error.hpp"

namespace lorashear {

namespace {

constexpr std::pair<OpKind, const char*> kKindNames[] = {
    {OpKind::kLinear, "linear"},   {OpKind::kLoraA, "lora_A"},   {OpKind::kLoraB, "lora_B"},
    {OpKind::kAdd, "add"},         {OpKind::kMul, "mul"},        {OpKind::kRmsnorm, "rmsnorm"},
    {OpKind::kSoftmax, "softmax"}, {OpKind::kSilu, "silu"},      {OpKind::kEmbedding, "embedding"},
    {OpKind::kHead, "head"},       {OpKind::kReshape, "reshape"},
};

}  // namespace

std::string op_kind_name(OpKind kind) {
    for (auto [k, n] : kKindNames) {
        if (k == kind) return n;
    }
    return "?";
}

OpKind parse_op_kind(const std::string& name) {
    for (auto [k, n] : kKindNames) {
        if (name == n) return k;
    }
    throw StructureError("unknown operator kind '" + name + "'");
}

std::vector<std::pair<std::size_t, std::size_t>> TraceGraph::edges() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& n : nodes) {
        for (auto i : n.inputs) out.emplace_back(i, n.id);
    }
    return out;
}

std::vector<std::vector<std::size_t>> TraceGraph::consumers() const {
    std::vector<std::vector<std::size_t>> out(nodes.size());
    for (const auto& n : nodes) {
        for (auto i : n.inputs) out[i].push_back(n.id);
    }
    return out;
}

std::vector<std::size_t> TraceGraph::topological_order() const {
    std::vector<std::size_t> indeg(nodes.size(), 0);
    for (const auto& n : nodes) indeg[n.id] = n.inputs.size();
    const auto cons = consumers();
    std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
    for (const auto& n : nodes) {
        if (indeg[n.id] == 0) ready.push(n.id);
    }
    std::vector<std::size_t> order;
    while (!ready.empty()) {
        const std::size_t u = ready.top();
        ready.pop();
        order.push_back(u);
        for (auto v : cons[u]) {
            if (--indeg[v] == 0) ready.push(v);
        }
    }
    if (order.size() != nodes.size()) throw StructureError("trace graph contains a cycle");
    return order;
}

namespace {

class GraphBuilder {
   public:
    explicit GraphBuilder(const LoraModel& model) : model_(model) {}

    std::size_t add(OpKind kind, std::string name, std::string module, std::vector<std::size_t> inputs,
                    std::string detail = {}, std::string param = {}) {
        TraceNode n;
        n.id = g_.nodes.size();
        n.kind = kind;
        n.name = std::move(name);
        n.module = std::move(module);
        n.inputs = std::move(inputs);
        n.detail = std::move(detail);
        if (!param.empty()) {
            const Tensor* t = find_tensor(model_, param);
            if (!t) throw StructureError("trace: model has no parameter " + param);
            n.param_shape = t->shape();
            n.param = std::move(param);
        }
        g_.nodes.push_back(std::move(n));
        return g_.nodes.back().id;
    }

    TraceNode& last() { return g_.nodes.back(); }

    std::size_t lora_linear(const std::string& path, const LoraLinear& l, std::size_t input) {
        const std::size_t host = add(OpKind::kLinear, path, path, {input}, {}, path + ".weight");
        if (!l.has_lora()) return host;
        const std::size_t a = add(OpKind::kLoraA, path + ".lora_A", path, {input}, {}, path + ".lora_A");
        const std::size_t b = add(OpKind::kLoraB, path + ".lora_B", path, {a}, {}, path + ".lora_B");
        last().scale = l.gamma;
        return add(OpKind::kAdd, path + ".add", path, {host, b}, "lora");
    }

    TraceGraph finish(std::size_t sink) {
        g_.sink = sink;
        for (const auto& n : g_.nodes) {
            std::string m = n.module;
            g_.module_tree["model"].push_back(n.id);
            if (m == "model") continue;
            std::size_t pos = 0;
            while (true) {
                pos = m.find('.', pos);
                g_.module_tree[m.substr(0, pos)].push_back(n.id);
                if (pos == std::string::npos) break;
                ++pos;
            }
        }
        return std::move(g_);
    }

   private:
    const LoraModel& model_;
    TraceGraph g_;
};

}  // namespace

TraceGraph build_trace_graph(const LoraModel& model) {
    GraphBuilder gb(model);
    const std::size_t tok = gb.add(OpKind::kEmbedding, "tok_emb", "tok_emb", {}, "token", "tok_emb");
    const std::size_t pos = gb.add(OpKind::kEmbedding, "pos_emb", "pos_emb", {}, "position", "pos_emb");
    std::size_t h = gb.add(OpKind::kAdd, "embed.add", "model", {tok, pos}, "embed");
    const std::size_t hd = model.config.head_dim();
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        const auto& blk = model.blocks[b];
        const std::string p = "blocks." + std::to_string(b);
        if (blk.attn.heads() > 0) {
            const std::string a = p + ".attn";
            const std::size_t nrm =
                gb.add(OpKind::kRmsnorm, p + ".attn_norm", p + ".attn_norm", {h}, {}, p + ".attn_norm");
            const std::size_t q = gb.lora_linear(a + ".q_proj", blk.attn.q, nrm);
            const std::size_t k = gb.lora_linear(a + ".k_proj", blk.attn.k, nrm);
            const std::size_t v = gb.lora_linear(a + ".v_proj", blk.attn.v, nrm);
            std::size_t split[3];
            const char* names[3] = {"q", "k", "v"};
            const std::size_t srcs[3] = {q, k, v};
            for (int i = 0; i < 3; ++i) {
                split[i] = gb.add(OpKind::kReshape, a + ".split_" + names[i], a, {srcs[i]}, "split_heads");
                gb.last().heads = blk.attn.heads();
                gb.last().head_dim = hd;
            }
            const std::size_t qk = gb.add(OpKind::kMul, a + ".scores", a, {split[0], split[1]}, "qk");
            gb.last().heads = blk.attn.heads();
            gb.last().head_dim = hd;
            gb.last().scale = 1.0 / std::sqrt(static_cast<double>(hd));
            const std::size_t sm = gb.add(OpKind::kSoftmax, a + ".softmax", a, {qk}, "causal");
            gb.last().heads = blk.attn.heads();
            const std::size_t av = gb.add(OpKind::kMul, a + ".context", a, {sm, split[2]}, "av");
            gb.last().heads = blk.attn.heads();
            gb.last().head_dim = hd;
            const std::size_t merge = gb.add(OpKind::kReshape, a + ".merge_heads", a, {av}, "merge_heads");
            gb.last().heads = blk.attn.heads();
            gb.last().head_dim = hd;
            const std::size_t o = gb.lora_linear(a + ".o_proj", blk.attn.o, merge);
            h = gb.add(OpKind::kAdd, p + ".attn_residual", p, {h, o}, "residual");
        }
        if (blk.mlp.width() > 0) {
            const std::string m = p + ".mlp";
            const std::size_t nrm = gb.add(OpKind::kRmsnorm, p + ".mlp_norm", p + ".mlp_norm", {h}, {}, p + ".mlp_norm");
            const std::size_t gate = gb.lora_linear(m + ".gate_proj", blk.mlp.gate, nrm);
            const std::size_t up = gb.lora_linear(m + ".up_proj", blk.mlp.up, nrm);
            const std::size_t act = gb.add(OpKind::kSilu, m + ".act", m, {gate});
            const std::size_t prod = gb.add(OpKind::kMul, m + ".gate_up", m, {act, up}, "gate_up");
            const std::size_t down = gb.lora_linear(m + ".down_proj", blk.mlp.down, prod);
            h = gb.add(OpKind::kAdd, p + ".mlp_residual", p, {h, down}, "residual");
        }
    }
    const std::size_t fn = gb.add(OpKind::kRmsnorm, "final_norm", "final_norm", {h}, {}, "final_norm");
    const std::size_t head = gb.add(OpKind::kHead, "head", "head", {fn}, {}, "head.weight");
    return gb.finish(head);
}

std::vector<ComposedSpan> mark_composed_spans(const TraceGraph& graph) {
    const auto cons = graph.consumers();
    std::vector<ComposedSpan> spans;
    for (const auto& n : graph.nodes) {
        if (n.kind == OpKind::kLoraB) {
            if (n.inputs.size() != 1 || graph.node(n.inputs[0]).kind != OpKind::kLoraA) {
                throw StructureError("orphan lora_B node '" + n.name + "' without a lora_A producer");
            }
            continue;
        }
        if (n.kind != OpKind::kLoraA) continue;
        std::optional<std::size_t> b;
        for (auto c : cons[n.id]) {
            if (graph.node(c).kind == OpKind::kLoraB) {
                if (b) throw StructureError("lora_A node '" + n.name + "' feeds more than one lora_B");
                b = c;
            }
        }
        if (!b) throw StructureError("orphan lora_A node '" + n.name + "' without a lora_B consumer");
        if (n.inputs.size() != 1) throw StructureError("lora_A node '" + n.name + "' must have one input");
        // The host is the linear reading the same input whose output joins
        // lora_B at a common add.
        std::optional<std::size_t> host;
        for (auto merge : cons[*b]) {
            const auto& m = graph.node(merge);
            if (m.kind != OpKind::kAdd) continue;
            for (auto in : m.inputs) {
                const auto& cand = graph.node(in);
                if (cand.kind == OpKind::kLinear && cand.inputs == n.inputs) host = in;
            }
        }
        if (!host) throw StructureError("LoRA span at '" + n.name + "' has no host linear");
        spans.push_back(ComposedSpan{n.module, *host, n.id, *b});
    }
    return spans;
}

Tensor execute_graph(const TraceGraph& graph, const LoraModel& model, std::span<const int> tokens) {
    check_tokens(model, tokens);
    std::vector<std::optional<Tensor>> val(graph.nodes.size());
    auto in = [&](const TraceNode& n, std::size_t i) -> const Tensor& { return *val[n.inputs.at(i)]; };
    auto param = [&](const TraceNode& n) -> const Tensor& {
        const Tensor* t = find_tensor(model, n.param);
        if (!t) throw StructureError("graph references missing parameter " + n.param);
        return *t;
    };
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    const std::size_t T = tokens.size();
    for (auto id : graph.topological_order()) {
        const TraceNode& n = graph.node(id);
        switch (n.kind) {
            case OpKind::kEmbedding:
                val[id] = kernels::embedding(param(n), n.detail == "position" ? std::span<const int>(positions) : tokens);
                break;
            case OpKind::kAdd:
                val[id] = kernels::add(in(n, 0), in(n, 1));
                break;
            case OpKind::kRmsnorm:
                val[id] = kernels::rmsnorm(in(n, 0), param(n), model.config.norm_eps);
                break;
            case OpKind::kLinear:
            case OpKind::kLoraA:
            case OpKind::kHead:
                val[id] = kernels::matmul_nt(in(n, 0), param(n));
                break;
            case OpKind::kLoraB:
                val[id] = kernels::scale(kernels::matmul_nt(in(n, 0), param(n)), n.scale);
                break;
            case OpKind::kSilu:
                val[id] = kernels::silu(in(n, 0));
                break;
            case OpKind::kReshape:
                // Head split/merge is a relabelling of the channel axis.
                val[id] = in(n, 0);
                break;
            case OpKind::kSoftmax: {
                std::vector<Tensor> parts;
                for (std::size_t h = 0; h < n.heads; ++h) {
                    parts.push_back(kernels::causal_softmax_rows(kernels::slice_rows(in(n, 0), h * T, T)));
                }
                val[id] = kernels::concat_rows(parts);
                break;
            }
            case OpKind::kMul: {
                if (n.detail == "qk") {
                    std::vector<Tensor> parts;
                    for (std::size_t h = 0; h < n.heads; ++h) {
                        parts.push_back(kernels::scale(
                            kernels::matmul_nt(kernels::slice_cols(in(n, 0), h * n.head_dim, n.head_dim),
                                               kernels::slice_cols(in(n, 1), h * n.head_dim, n.head_dim)),
                            n.scale));
                    }
                    val[id] = kernels::concat_rows(parts);
                } else if (n.detail == "av") {
                    std::vector<Tensor> parts;
                    for (std::size_t h = 0; h < n.heads; ++h) {
                        parts.push_back(kernels::matmul(kernels::slice_rows(in(n, 0), h * T, T),
                                                        kernels::slice_cols(in(n, 1), h * n.head_dim, n.head_dim)));
                    }
                    val[id] = kernels::concat_cols(parts);
                } else {
                    val[id] = kernels::mul(in(n, 0), in(n, 1));
                }
                break;
            }
        }
    }
    return *val[graph.sink];
}

nlohmann::json graph_to_json(const TraceGraph& graph, const std::vector<ComposedSpan>& spans) {
    using nlohmann::json;
    json nodes = json::array();
    for (const auto& n : graph.nodes) {
        json j = {{"id", n.id},         {"kind", op_kind_name(n.kind)}, {"name", n.name},
                  {"module", n.module}, {"inputs", n.inputs}};
        if (!n.param.empty()) {
            j["param"] = n.param;
            j["param_shape"] = n.param_shape;
        }
        if (!n.detail.empty()) j["detail"] = n.detail;
        if (n.heads) j["heads"] = n.heads;
        if (n.head_dim) j["head_dim"] = n.head_dim;
        nodes.push_back(std::move(j));
    }
    json edges = json::array();
    for (auto [a, b] : graph.edges()) edges.push_back({a, b});
    json sp = json::array();
    for (const auto& s : spans) {
        sp.push_back({{"path", s.path}, {"host", s.host}, {"lora_A", s.lora_A}, {"lora_B", s.lora_B}});
    }
    return json{{"schema_version", 1}, {"nodes", nodes}, {"edges", edges},
                {"spans", sp},         {"sink", graph.sink}, {"module_tree", graph.module_tree}};
}

}  // namespace lorashear
