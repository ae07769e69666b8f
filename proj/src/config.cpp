#include "lorashear/config.hpp"

#include <cmath>
#include <set>

#include "lorashear/error.hpp"

namespace lorashear {

void PipelineConfig::validate() const {
    try {
        model.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    if (model.vocab != vocabulary().size()) {
        throw ConfigError("model.vocab must equal the corpus vocabulary size " + std::to_string(vocabulary().size()));
    }
    if (corpus.seq_len < 2 || corpus.seq_len - 1 > model.max_seq) {
        throw ConfigError("corpus.seq_len must lie in [2, model.max_seq + 1]");
    }
    if (corpus.train_per_source == 0 || corpus.val_per_source == 0) {
        throw ConfigError("corpus.train_per_source and corpus.val_per_source must be positive");
    }
    if (pretrain.batch == 0) throw ConfigError("pretrain.batch must be positive");
    if (!(pretrain.lr > 0.0)) throw ConfigError("pretrain.lr must be positive");
    if (knowledge_eval == 0) throw ConfigError("knowledge.eval_sequences must be positive");
    if (!(pruning_ratio >= 0.0 && pruning_ratio <= 1.0)) throw ConfigError("pruning_ratio must lie in [0, 1]");
    knowledge.validate();
    lhspg.validate();
    recovery.validate();
    if (model.rank == 0) throw ConfigError("model.rank must be positive: pruning and recovery train LoRA factors");
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& stage) {
    // splitmix64 over the seed mixed with an FNV-1a hash of the stage name
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : stage) h = (h ^ c) * 0x100000001b3ULL;
    std::uint64_t z = seed + h + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return (z ^ (z >> 31)) >> 1;  // keep it representable as a signed JSON integer
}

PipelineConfig resolve_seeds(PipelineConfig c) {
    c.model.seed = derive_seed(c.seed, "model");
    c.lhspg.seed = derive_seed(c.seed, "lhspg");
    c.recovery.seed = derive_seed(c.seed, "recovery");
    return c;
}

std::size_t derive_target(double ratio, std::size_t prunable) {
    return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(prunable)));
}

namespace {

using nlohmann::json;

json optimizer_json(const OptimizerConfig& o) {
    return {{"kind", optimizer_name(o.kind)},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"eps", o.eps},
            {"weight_decay", o.weight_decay}};
}

class Section {
   public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <typename T>
    void read(const std::string& key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        const std::string p = path_ + "." + key;
        if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) throw ConfigError(p + ": expected a boolean");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!it->is_string()) throw ConfigError(p + ": expected a string");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!it->is_number()) throw ConfigError(p + ": expected a number");
        } else if constexpr (std::is_integral_v<T>) {
            if (!it->is_number_integer() || (it->is_number_integer() && !it->is_number_unsigned() && it->get<long long>() < 0)) {
                throw ConfigError(p + ": expected a nonnegative integer");
            }
        } else {
            if (!it->is_array()) throw ConfigError(p + ": expected an array");
            for (const auto& v : *it) {
                if (!v.is_number()) throw ConfigError(p + ": expected an array of numbers");
            }
        }
        out = it->get<T>();
    }

    Section child(const std::string& key) {
        seen_.insert(key);
        static const json empty = json::object();
        auto it = j_.find(key);
        return Section(it == j_.end() ? empty : *it, path_ + "." + key);
    }

    void optimizer(OptimizerConfig& o) {
        Section s = child("optimizer");
        std::string kind = optimizer_name(o.kind);
        s.read("kind", kind);
        try {
            o.kind = parse_optimizer(kind);
        } catch (const Error&) {
            throw ConfigError(s.path_ + ".kind: expected \"sgd\" or \"adamw\"");
        }
        s.read("beta1", o.beta1);
        s.read("beta2", o.beta2);
        s.read("eps", o.eps);
        s.read("weight_decay", o.weight_decay);
        s.finish();
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.contains(k)) throw ConfigError(path_ + "." + k + ": unknown key");
        }
    }

   private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

nlohmann::json config_to_json(const PipelineConfig& c) {
    return json{
        {"schema_version", 1},
        {"seed", c.seed},
        {"model",
         {{"vocab", c.model.vocab},
          {"hidden", c.model.hidden},
          {"layers", c.model.layers},
          {"heads", c.model.heads},
          {"mlp_dim", c.model.mlp_dim},
          {"rank", c.model.rank},
          {"gamma_lora", c.model.gamma_lora},
          {"max_seq", c.model.max_seq},
          {"norm_eps", c.model.norm_eps}}},
        {"corpus",
         {{"train_per_source", c.corpus.train_per_source},
          {"val_per_source", c.corpus.val_per_source},
          {"seq_len", c.corpus.seq_len}}},
        {"pretrain",
         {{"steps", c.pretrain.steps},
          {"batch", c.pretrain.batch},
          {"lr", c.pretrain.lr},
          {"cosine", c.pretrain.cosine},
          {"optimizer", optimizer_json(c.pretrain.optimizer)}}},
        {"knowledge",
         {{"ratios", c.knowledge.ratios},
          {"gamma_unprunable", c.knowledge.gamma_unprunable},
          {"saliency", c.knowledge.saliency},
          {"eval_sequences", c.knowledge_eval}}},
        {"pruning_ratio", c.pruning_ratio},
        {"lhspg",
         {{"lr", c.lhspg.lr},
          {"warmup_steps", c.lhspg.warmup_steps},
          {"periods", c.lhspg.periods},
          {"period_steps", c.lhspg.period_steps},
          {"eps_hs", c.lhspg.eps_hs},
          {"saliency", c.lhspg.saliency},
          {"batch", c.lhspg.batch},
          {"cosine", c.lhspg.cosine},
          {"optimizer", optimizer_json(c.lhspg.optimizer)}}},
        {"recovery",
         {{"budget", c.recovery.budget},
          {"floor", c.recovery.floor},
          {"lr", c.recovery.lr},
          {"steps_per_round", c.recovery.steps_per_round},
          {"batch", c.recovery.batch},
          {"patience", c.recovery.patience},
          {"tol", c.recovery.tol},
          {"max_rounds", c.recovery.max_rounds},
          {"optimizer", optimizer_json(c.recovery.optimizer)}}},
    };
}

PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    Section root(j, "config");
    int version = 1;
    root.read("schema_version", version);
    if (version != 1) throw ConfigError("config.schema_version: unsupported version " + std::to_string(version));
    root.read("seed", c.seed);
    {
        Section s = root.child("model");
        s.read("vocab", c.model.vocab);
        s.read("hidden", c.model.hidden);
        s.read("layers", c.model.layers);
        s.read("heads", c.model.heads);
        s.read("mlp_dim", c.model.mlp_dim);
        s.read("rank", c.model.rank);
        s.read("gamma_lora", c.model.gamma_lora);
        s.read("max_seq", c.model.max_seq);
        s.read("norm_eps", c.model.norm_eps);
        s.finish();
    }
    {
        Section s = root.child("corpus");
        s.read("train_per_source", c.corpus.train_per_source);
        s.read("val_per_source", c.corpus.val_per_source);
        s.read("seq_len", c.corpus.seq_len);
        s.finish();
    }
    {
        Section s = root.child("pretrain");
        s.read("steps", c.pretrain.steps);
        s.read("batch", c.pretrain.batch);
        s.read("lr", c.pretrain.lr);
        s.read("cosine", c.pretrain.cosine);
        s.optimizer(c.pretrain.optimizer);
        s.finish();
    }
    {
        Section s = root.child("knowledge");
        s.read("ratios", c.knowledge.ratios);
        s.read("gamma_unprunable", c.knowledge.gamma_unprunable);
        s.read("saliency", c.knowledge.saliency);
        s.read("eval_sequences", c.knowledge_eval);
        s.finish();
    }
    root.read("pruning_ratio", c.pruning_ratio);
    {
        Section s = root.child("lhspg");
        s.read("lr", c.lhspg.lr);
        s.read("warmup_steps", c.lhspg.warmup_steps);
        s.read("periods", c.lhspg.periods);
        s.read("period_steps", c.lhspg.period_steps);
        s.read("eps_hs", c.lhspg.eps_hs);
        s.read("saliency", c.lhspg.saliency);
        s.read("batch", c.lhspg.batch);
        s.read("cosine", c.lhspg.cosine);
        s.optimizer(c.lhspg.optimizer);
        s.finish();
    }
    {
        Section s = root.child("recovery");
        s.read("budget", c.recovery.budget);
        s.read("floor", c.recovery.floor);
        s.read("lr", c.recovery.lr);
        s.read("steps_per_round", c.recovery.steps_per_round);
        s.read("batch", c.recovery.batch);
        s.read("patience", c.recovery.patience);
        s.read("tol", c.recovery.tol);
        s.read("max_rounds", c.recovery.max_rounds);
        s.optimizer(c.recovery.optimizer);
        s.finish();
    }
    root.finish();
    c.validate();
    return c;
}

}  // namespace lorashear
