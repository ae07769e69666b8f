#include "lorashear/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "lorashear/error.hpp"

namespace lorashear {

namespace {

enum class DType : std::uint8_t { kF64 = 0, kI64 = 1 };

struct Entry {
    std::string name;
    DType dtype = DType::kF64;
    Shape shape;
    std::vector<std::uint64_t> words;  // raw 8-byte payload
};

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
   public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
    std::uint32_t u32() {
        const char* p = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        const char* p = take(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return v;
    }
    std::string str(std::size_t n) { return std::string(take(n), n); }
    std::size_t pos() const { return pos_; }
    void seek(std::size_t p) {
        if (p > bytes_.size()) throw FormatError("checkpoint: offset beyond end of file");
        pos_ = p;
    }

   private:
    const char* take(std::size_t n) {
        if (n > bytes_.size() - pos_) throw FormatError("checkpoint: truncated file");
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }

    const std::string& bytes_;
    std::size_t pos_ = 0;
};

Entry f64_entry(const std::string& name, const Tensor& t) {
    Entry e{name, DType::kF64, t.shape(), {}};
    e.words.reserve(t.numel());
    for (double v : t.data()) e.words.push_back(std::bit_cast<std::uint64_t>(v));
    return e;
}

Entry i64_entry(const std::string& name, const std::vector<std::int64_t>& values) {
    Entry e{name, DType::kI64, {values.size()}, {}};
    for (auto v : values) e.words.push_back(static_cast<std::uint64_t>(v));
    return e;
}

}  // namespace

std::string serialize_checkpoint(const LoraModel& model) {
    const auto& c = model.config;
    std::vector<Entry> entries;
    entries.push_back(i64_entry("meta.config", {static_cast<std::int64_t>(c.vocab), static_cast<std::int64_t>(c.hidden),
                                                static_cast<std::int64_t>(c.layers), static_cast<std::int64_t>(c.heads),
                                                static_cast<std::int64_t>(c.mlp_dim), static_cast<std::int64_t>(c.rank),
                                                static_cast<std::int64_t>(c.max_seq),
                                                static_cast<std::int64_t>(c.seed)}));
    entries.push_back(f64_entry("meta.scalars", Tensor({2}, {c.gamma_lora, c.norm_eps})));
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        const std::string p = "blocks." + std::to_string(b);
        entries.push_back(i64_entry(p + ".attn.kept_heads", model.blocks[b].attn.kept_heads));
        entries.push_back(i64_entry(p + ".mlp.kept_neurons", model.blocks[b].mlp.kept_neurons));
    }
    for (const auto& nt : named_tensors(model)) entries.push_back(f64_entry(nt.name, *nt.tensor));

    std::string out(kCheckpointMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(entries.size()));
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out += e.name;
        put_u8(out, static_cast<std::uint8_t>(e.dtype));
        put_u8(out, static_cast<std::uint8_t>(e.shape.size()));
        for (auto s : e.shape) put_u64(out, s);
        put_u64(out, offset);
        offset += 8 * e.words.size();
    }
    for (const auto& e : entries) {
        for (auto w : e.words) put_u64(out, w);
    }
    return out;
}

LoraModel deserialize_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw FormatError("checkpoint: bad magic (expected LSHR)");
    }
    r.str(4);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32();
    struct Meta {
        DType dtype;
        Shape shape;
        std::uint64_t offset;
    };
    std::map<std::string, Meta> table;
    std::vector<std::string> order;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = r.u32();
        std::string name = r.str(len);
        const auto dtype = r.u8();
        if (dtype > 1) throw FormatError("checkpoint: unknown dtype for " + name);
        const auto ndim = r.u8();
        Shape shape(ndim);
        for (auto& s : shape) s = r.u64();
        const std::uint64_t off = r.u64();
        if (table.contains(name)) throw FormatError("checkpoint: duplicate tensor " + name);
        table[name] = Meta{static_cast<DType>(dtype), std::move(shape), off};
        order.push_back(std::move(name));
    }
    const std::size_t payload = r.pos();
    std::uint64_t expected_end = 0;
    for (const auto& [name, m] : table) {
        const std::uint64_t end = m.offset + 8 * shape_numel(m.shape);
        if (end > bytes.size() - payload) throw FormatError("checkpoint: truncated payload for " + name);
        expected_end = std::max(expected_end, end);
    }
    if (payload + expected_end != bytes.size()) throw FormatError("checkpoint: trailing or missing payload bytes");

    std::map<std::string, bool> used;
    auto words = [&](const std::string& name, DType dtype) {
        auto it = table.find(name);
        if (it == table.end()) throw FormatError("checkpoint: missing tensor " + name);
        if (it->second.dtype != dtype) throw FormatError("checkpoint: wrong dtype for " + name);
        used[name] = true;
        r.seek(payload + it->second.offset);
        std::vector<std::uint64_t> w(shape_numel(it->second.shape));
        for (auto& x : w) x = r.u64();
        return std::make_pair(it->second.shape, std::move(w));
    };
    auto ints = [&](const std::string& name) {
        auto [shape, w] = words(name, DType::kI64);
        if (shape.size() != 1) throw FormatError("checkpoint: " + name + " must be a vector");
        std::vector<std::int64_t> out;
        for (auto x : w) out.push_back(static_cast<std::int64_t>(x));
        return out;
    };
    auto tensor = [&](const std::string& name, const Shape& expected) {
        auto [shape, w] = words(name, DType::kF64);
        if (shape != expected) {
            throw FormatError("checkpoint: tensor " + name + " has shape " + shape_str(shape) + ", expected " +
                              shape_str(expected));
        }
        std::vector<double> data;
        data.reserve(w.size());
        for (auto x : w) data.push_back(std::bit_cast<double>(x));
        return Tensor(shape, std::move(data));
    };

    const auto cfg = ints("meta.config");
    if (cfg.size() != 8) throw FormatError("checkpoint: meta.config must hold 8 values");
    for (auto v : cfg) {
        if (v < 0) throw FormatError("checkpoint: negative configuration value");
    }
    const Tensor scalars = tensor("meta.scalars", {2});
    LoraModel m;
    ModelConfig& c = m.config;
    c.vocab = static_cast<std::size_t>(cfg[0]);
    c.hidden = static_cast<std::size_t>(cfg[1]);
    c.layers = static_cast<std::size_t>(cfg[2]);
    c.heads = static_cast<std::size_t>(cfg[3]);
    c.mlp_dim = static_cast<std::size_t>(cfg[4]);
    c.rank = static_cast<std::size_t>(cfg[5]);
    c.max_seq = static_cast<std::size_t>(cfg[6]);
    c.seed = static_cast<std::uint64_t>(cfg[7]);
    c.gamma_lora = scalars[0];
    c.norm_eps = scalars[1];
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: invalid model configuration: ") + e.what());
    }
    const std::size_t d = c.hidden;
    const std::size_t hd = c.head_dim();
    const std::size_t r_ = c.rank;
    auto linear = [&](const std::string& path, std::size_t out, std::size_t in) {
        LoraLinear l;
        l.gamma = c.gamma_lora;
        l.weight = tensor(path + ".weight", {out, in});
        if (r_ > 0) {
            l.lora_A = tensor(path + ".lora_A", {r_, in});
            l.lora_B = tensor(path + ".lora_B", {out, r_});
        }
        return l;
    };
    m.tok_emb = tensor("tok_emb", {c.vocab, d});
    m.pos_emb = tensor("pos_emb", {c.max_seq, d});
    for (std::size_t b = 0; b < c.layers; ++b) {
        const std::string p = "blocks." + std::to_string(b);
        Block blk;
        blk.attn.kept_heads = ints(p + ".attn.kept_heads");
        blk.mlp.kept_neurons = ints(p + ".mlp.kept_neurons");
        const std::size_t qd = blk.attn.heads() * hd;
        const std::size_t w = blk.mlp.width();
        blk.attn_norm = tensor(p + ".attn_norm", {d});
        blk.attn.q = linear(p + ".attn.q_proj", qd, d);
        blk.attn.k = linear(p + ".attn.k_proj", qd, d);
        blk.attn.v = linear(p + ".attn.v_proj", qd, d);
        blk.attn.o = linear(p + ".attn.o_proj", d, qd);
        blk.mlp_norm = tensor(p + ".mlp_norm", {d});
        blk.mlp.gate = linear(p + ".mlp.gate_proj", w, d);
        blk.mlp.up = linear(p + ".mlp.up_proj", w, d);
        blk.mlp.down = linear(p + ".mlp.down_proj", d, w);
        m.blocks.push_back(std::move(blk));
    }
    m.final_norm = tensor("final_norm", {d});
    m.head = tensor("head.weight", {c.vocab, d});
    for (const auto& name : order) {
        if (!used.contains(name)) throw FormatError("checkpoint: unexpected tensor " + name);
    }
    return m;
}

void save_checkpoint(const LoraModel& model, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(model);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw StageError("cannot open " + path.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw StageError("failed writing " + path.string());
}

LoraModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw StageError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize_checkpoint(ss.str());
}

}  // namespace lorashear
