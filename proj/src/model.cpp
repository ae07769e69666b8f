#include "lorashear/model.hpp"

#include <cmath>
#include <random>

#include "lorashear/error.hpp"

namespace lorashear {

void ModelConfig::validate() const {
    if (vocab == 0 || hidden == 0 || layers == 0 || heads == 0 || mlp_dim == 0 || max_seq == 0) {
        throw ConfigError("model: vocab, hidden, layers, heads, mlp_dim and max_seq must be positive");
    }
    if (hidden % heads != 0) {
        throw ConfigError("model: hidden " + std::to_string(hidden) + " not divisible by heads " +
                          std::to_string(heads));
    }
    if (rank > 0) {
        const std::size_t smallest = std::min(hidden, mlp_dim);
        if (rank >= smallest) {
            throw ConfigError("model: LoRA rank " + std::to_string(rank) + " must be below min(out, in) = " +
                              std::to_string(smallest));
        }
    }
    if (!(gamma_lora > 0.0)) throw ConfigError("model: gamma_lora must be positive");
    if (!(norm_eps >= 0.0)) throw ConfigError("model: norm_eps must be nonnegative");
}

Tensor LoraLinear::effective_weight() const {
    if (!has_lora()) return weight;
    return kernels::add(weight, kernels::scale(kernels::matmul(lora_B, lora_A), gamma));
}

void LoraLinear::merge() {
    if (!has_lora()) return;
    weight = kernels::add(weight, kernels::scale(kernels::matmul(lora_B, lora_A), gamma));
    lora_B.fill(0.0);
}

namespace {

class Init {
   public:
    explicit Init(std::uint64_t seed) : rng_(seed) {}

    Tensor gaussian(Shape shape, double std) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> dist(0.0, 1.0);
        for (auto& v : t.data()) v = dist(rng_) * std;
        return t;
    }

   private:
    std::mt19937_64 rng_;
};

LoraLinear make_linear(Init& init, std::size_t out, std::size_t in, std::size_t rank, double gamma,
                       double weight_std) {
    LoraLinear l;
    l.weight = init.gaussian({out, in}, weight_std);
    l.gamma = gamma;
    if (rank > 0) {
        l.lora_A = init.gaussian({rank, in}, 1.0 / std::sqrt(static_cast<double>(in)));
        l.lora_B = Tensor({out, rank});
    }
    return l;
}

Tensor ones(std::size_t n) {
    Tensor t({n});
    t.fill(1.0);
    return t;
}

}  // namespace

LoraModel build_model(const ModelConfig& config) {
    config.validate();
    Init init(config.seed);
    LoraModel m;
    m.config = config;
    const std::size_t d = config.hidden;
    const double residual_std = 1.0 / std::sqrt(static_cast<double>(d) * 2.0 * static_cast<double>(config.layers));
    m.tok_emb = init.gaussian({config.vocab, d}, 0.5);
    m.pos_emb = init.gaussian({config.max_seq, d}, 0.1);
    for (std::size_t b = 0; b < config.layers; ++b) {
        Block blk;
        blk.attn_norm = ones(d);
        const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
        blk.attn.q = make_linear(init, d, d, config.rank, config.gamma_lora, in_std);
        blk.attn.k = make_linear(init, d, d, config.rank, config.gamma_lora, in_std);
        blk.attn.v = make_linear(init, d, d, config.rank, config.gamma_lora, in_std);
        blk.attn.o = make_linear(init, d, d, config.rank, config.gamma_lora, residual_std);
        for (std::size_t h = 0; h < config.heads; ++h) blk.attn.kept_heads.push_back(static_cast<std::int64_t>(h));
        blk.mlp_norm = ones(d);
        blk.mlp.gate = make_linear(init, config.mlp_dim, d, config.rank, config.gamma_lora, in_std);
        blk.mlp.up = make_linear(init, config.mlp_dim, d, config.rank, config.gamma_lora, in_std);
        blk.mlp.down = make_linear(init, d, config.mlp_dim, config.rank, config.gamma_lora,
                                   1.0 / std::sqrt(static_cast<double>(config.mlp_dim) * 2.0 *
                                                   static_cast<double>(config.layers)));
        for (std::size_t j = 0; j < config.mlp_dim; ++j) blk.mlp.kept_neurons.push_back(static_cast<std::int64_t>(j));
        m.blocks.push_back(std::move(blk));
    }
    m.final_norm = ones(d);
    m.head = init.gaussian({config.vocab, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    return m;
}

namespace {

template <class Model, class Named>
void collect_tensors(Model& model, std::vector<Named>& out) {
    out.push_back({"tok_emb", &model.tok_emb});
    out.push_back({"pos_emb", &model.pos_emb});
    auto add_linear = [&](const std::string& path, auto& l) {
        out.push_back({path + ".weight", &l.weight});
        if (l.has_lora()) {
            out.push_back({path + ".lora_A", &l.lora_A});
            out.push_back({path + ".lora_B", &l.lora_B});
        }
    };
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        auto& blk = model.blocks[b];
        const std::string p = "blocks." + std::to_string(b);
        out.push_back({p + ".attn_norm", &blk.attn_norm});
        add_linear(p + ".attn.q_proj", blk.attn.q);
        add_linear(p + ".attn.k_proj", blk.attn.k);
        add_linear(p + ".attn.v_proj", blk.attn.v);
        add_linear(p + ".attn.o_proj", blk.attn.o);
        out.push_back({p + ".mlp_norm", &blk.mlp_norm});
        add_linear(p + ".mlp.gate_proj", blk.mlp.gate);
        add_linear(p + ".mlp.up_proj", blk.mlp.up);
        add_linear(p + ".mlp.down_proj", blk.mlp.down);
    }
    out.push_back({"final_norm", &model.final_norm});
    out.push_back({"head.weight", &model.head});
}

}  // namespace

std::vector<NamedTensor> named_tensors(LoraModel& model) {
    std::vector<NamedTensor> out;
    collect_tensors(model, out);
    return out;
}

std::vector<ConstNamedTensor> named_tensors(const LoraModel& model) {
    std::vector<ConstNamedTensor> out;
    collect_tensors(model, out);
    return out;
}

std::vector<NamedLinear> lora_linears(LoraModel& model) {
    std::vector<NamedLinear> out;
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        auto& blk = model.blocks[b];
        const std::string p = "blocks." + std::to_string(b);
        out.push_back({p + ".attn.q_proj", &blk.attn.q});
        out.push_back({p + ".attn.k_proj", &blk.attn.k});
        out.push_back({p + ".attn.v_proj", &blk.attn.v});
        out.push_back({p + ".attn.o_proj", &blk.attn.o});
        out.push_back({p + ".mlp.gate_proj", &blk.mlp.gate});
        out.push_back({p + ".mlp.up_proj", &blk.mlp.up});
        out.push_back({p + ".mlp.down_proj", &blk.mlp.down});
    }
    return out;
}

Tensor* find_tensor(LoraModel& model, const std::string& name) {
    for (auto& nt : named_tensors(model)) {
        if (nt.name == name) return nt.tensor;
    }
    return nullptr;
}

const Tensor* find_tensor(const LoraModel& model, const std::string& name) {
    for (auto& nt : named_tensors(model)) {
        if (nt.name == name) return nt.tensor;
    }
    return nullptr;
}

std::size_t parameter_count(const LoraModel& model) {
    std::size_t n = 0;
    for (const auto& nt : named_tensors(model)) n += nt.tensor->numel();
    return n;
}

void set_trainable(LoraModel& model, Trainable mode) {
    for (auto& nt : named_tensors(model)) {
        const bool is_lora = nt.name.ends_with(".lora_A") || nt.name.ends_with(".lora_B");
        bool on = false;
        if (mode == Trainable::kAll) on = true;
        if (mode == Trainable::kLoraOnly) on = is_lora;
        if (mode == Trainable::kBase) on = !is_lora;
        nt.tensor->set_requires_grad(on);
        if (!on) nt.tensor->clear_grad();
    }
}

std::vector<Tensor*> trainable_tensors(LoraModel& model) {
    std::vector<Tensor*> out;
    for (auto& nt : named_tensors(model)) {
        if (nt.tensor->requires_grad()) out.push_back(nt.tensor);
    }
    return out;
}

void zero_grads(LoraModel& model) {
    for (auto* t : trainable_tensors(model)) t->zero_grad();
}

void merge_lora(LoraModel& model) {
    for (auto& nl : lora_linears(model)) nl.linear->merge();
}

void check_tokens(const LoraModel& model, std::span<const int> tokens) {
    if (tokens.empty()) throw ShapeError("forward: empty token sequence");
    if (tokens.size() > model.config.max_seq) {
        throw ShapeError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                         std::to_string(model.config.max_seq));
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= model.config.vocab) {
            throw ShapeError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(model.config.vocab));
        }
    }
}

namespace {

// Plain evaluation: values are Tensors.
struct KernelBackend {
    using Value = Tensor;
    Value param(const Tensor& t) { return t; }
    Value embedding(const Value& table, std::span<const int> ids) { return kernels::embedding(table, ids); }
    Value add(const Value& a, const Value& b) { return kernels::add(a, b); }
    Value mul(const Value& a, const Value& b) { return kernels::mul(a, b); }
    Value scale(const Value& a, double s) { return kernels::scale(a, s); }
    Value silu(const Value& a) { return kernels::silu(a); }
    Value rmsnorm(const Value& x, const Value& g, double eps) { return kernels::rmsnorm(x, g, eps); }
    Value linear(const Value& x, const Value& w) { return kernels::matmul_nt(x, w); }
    Value matmul(const Value& a, const Value& b) { return kernels::matmul(a, b); }
    Value causal_softmax(const Value& a) { return kernels::causal_softmax_rows(a); }
    Value slice_cols(const Value& a, std::size_t b, std::size_t n) { return kernels::slice_cols(a, b, n); }
    Value concat_cols(const std::vector<Value>& parts) { return kernels::concat_cols(parts); }
};

struct TapeBackend {
    using Value = Var;
    Tape& tape;
    // Parameters are bound by reference; forward() only hands in mutable
    // model tensors, so the const_cast never writes through a const object.
    Value param(const Tensor& t) { return tape.parameter(const_cast<Tensor&>(t)); }
    Value embedding(Value table, std::span<const int> ids) { return tape.embedding(table, ids); }
    Value add(Value a, Value b) { return tape.add(a, b); }
    Value mul(Value a, Value b) { return tape.mul(a, b); }
    Value scale(Value a, double s) { return tape.scale(a, s); }
    Value silu(Value a) { return tape.silu(a); }
    Value rmsnorm(Value x, Value g, double eps) { return tape.rmsnorm(x, g, eps); }
    Value linear(Value x, Value w) { return tape.linear(x, w); }
    Value matmul(Value a, Value b) { return tape.matmul(a, b); }
    Value causal_softmax(Value a) { return tape.causal_softmax(a); }
    Value slice_cols(Value a, std::size_t b, std::size_t n) { return tape.slice_cols(a, b, n); }
    Value concat_cols(const std::vector<Value>& parts) { return tape.concat_cols(parts); }
};

template <class Backend>
typename Backend::Value lora_linear(Backend& be, const typename Backend::Value& x, const LoraLinear& l) {
    auto y = be.linear(x, be.param(l.weight));
    if (!l.has_lora()) return y;
    auto a = be.linear(x, be.param(l.lora_A));
    auto b = be.scale(be.linear(a, be.param(l.lora_B)), l.gamma);
    return be.add(y, b);
}

template <class Backend>
typename Backend::Value forward_impl(Backend& be, const LoraModel& m, std::span<const int> tokens) {
    using V = typename Backend::Value;
    check_tokens(m, tokens);
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    V h = be.add(be.embedding(be.param(m.tok_emb), tokens), be.embedding(be.param(m.pos_emb), positions));
    const std::size_t hd = m.config.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (const auto& blk : m.blocks) {
        if (blk.attn.heads() > 0) {
            V a = be.rmsnorm(h, be.param(blk.attn_norm), m.config.norm_eps);
            V q = lora_linear(be, a, blk.attn.q);
            V k = lora_linear(be, a, blk.attn.k);
            V v = lora_linear(be, a, blk.attn.v);
            std::vector<V> outs;
            for (std::size_t i = 0; i < blk.attn.heads(); ++i) {
                V s = be.scale(be.linear(be.slice_cols(q, i * hd, hd), be.slice_cols(k, i * hd, hd)), inv_sqrt);
                outs.push_back(be.matmul(be.causal_softmax(s), be.slice_cols(v, i * hd, hd)));
            }
            h = be.add(h, lora_linear(be, be.concat_cols(outs), blk.attn.o));
        }
        if (blk.mlp.width() > 0) {
            V x = be.rmsnorm(h, be.param(blk.mlp_norm), m.config.norm_eps);
            V g = lora_linear(be, x, blk.mlp.gate);
            V u = lora_linear(be, x, blk.mlp.up);
            h = be.add(h, lora_linear(be, be.mul(be.silu(g), u), blk.mlp.down));
        }
    }
    h = be.rmsnorm(h, be.param(m.final_norm), m.config.norm_eps);
    return be.linear(h, be.param(m.head));
}

}  // namespace

Tensor forward(const LoraModel& model, std::span<const int> tokens) {
    KernelBackend be;
    return forward_impl(be, model, tokens);
}

Var forward(Tape& tape, LoraModel& model, std::span<const int> tokens) {
    TapeBackend be{tape};
    return forward_impl(be, model, tokens);
}

Var batch_loss(Tape& tape, LoraModel& model, std::span<const std::vector<int>> sequences) {
    if (sequences.empty()) throw ConfigError("batch_loss: empty batch");
    Var total{};
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        const auto& s = sequences[i];
        if (s.size() < 2) throw ShapeError("batch_loss: sequences need at least two tokens");
        std::span<const int> all(s);
        Var logits = forward(tape, model, all.first(s.size() - 1));
        Var loss = tape.cross_entropy(logits, all.subspan(1));
        total = i == 0 ? loss : tape.add(total, loss);
    }
    return tape.scale(total, 1.0 / static_cast<double>(sequences.size()));
}

}  // namespace lorashear
