#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lorashear/tape.hpp"
#include "lorashear/tensor.hpp"

namespace lorashear {

struct ModelConfig {
    std::size_t vocab = 64;
    std::size_t hidden = 32;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t mlp_dim = 64;
    std::size_t rank = 4;  // 0 disables LoRA
    double gamma_lora = 1.0;
    std::size_t max_seq = 32;
    double norm_eps = 1e-6;
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return hidden / heads; }
    void validate() const;
};

// Frozen host weight plus a low-rank adaptor: y = W h + gamma * B (A h).
struct LoraLinear {
    Tensor weight;  // [out, in]
    Tensor lora_A;  // [r, in]
    Tensor lora_B;  // [out, r]
    double gamma = 1.0;

    bool has_lora() const { return lora_A.dim() == 2; }
    std::size_t out_features() const { return weight.rows(); }
    std::size_t in_features() const { return weight.cols(); }
    std::size_t rank() const { return has_lora() ? lora_A.rows() : 0; }

    // W + gamma * B A
    Tensor effective_weight() const;
    // W <- W + gamma * B A, B <- 0.
    void merge();
};

struct Attention {
    LoraLinear q, k, v, o;
    // Original head index of every surviving head.
    std::vector<std::int64_t> kept_heads;
    std::size_t heads() const { return kept_heads.size(); }
};

struct Mlp {
    LoraLinear gate, up, down;
    // Original neuron index of every surviving intermediate neuron.
    std::vector<std::int64_t> kept_neurons;
    std::size_t width() const { return kept_neurons.size(); }
};

struct Block {
    Tensor attn_norm;
    Attention attn;
    Tensor mlp_norm;
    Mlp mlp;
};

struct LoraModel {
    ModelConfig config;
    Tensor tok_emb;  // [V, d]
    Tensor pos_emb;  // [max_seq, d]
    std::vector<Block> blocks;
    Tensor final_norm;
    Tensor head;  // [V, d], never carries LoRA
};

struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

struct ConstNamedTensor {
    std::string name;
    const Tensor* tensor;
};

struct NamedLinear {
    std::string path;  // e.g. "blocks.0.attn.q_proj"
    LoraLinear* linear;
};

// kBase trains everything except the LoRA factors.
enum class Trainable { kNone, kLoraOnly, kBase, kAll };

LoraModel build_model(const ModelConfig& config);

// Deterministic enumeration of every parameter tensor in the model.
std::vector<NamedTensor> named_tensors(LoraModel& model);
std::vector<ConstNamedTensor> named_tensors(const LoraModel& model);
std::vector<NamedLinear> lora_linears(LoraModel& model);
Tensor* find_tensor(LoraModel& model, const std::string& name);
const Tensor* find_tensor(const LoraModel& model, const std::string& name);

std::size_t parameter_count(const LoraModel& model);
void set_trainable(LoraModel& model, Trainable mode);
std::vector<Tensor*> trainable_tensors(LoraModel& model);
void zero_grads(LoraModel& model);
void merge_lora(LoraModel& model);

void check_tokens(const LoraModel& model, std::span<const int> tokens);

// Logits [T, V] for one sequence.
Tensor forward(const LoraModel& model, std::span<const int> tokens);
Var forward(Tape& tape, LoraModel& model, std::span<const int> tokens);

// Mean next-token loss over a batch of (T+1)-token sequences, recorded on the
// tape; the returned Var is the scalar loss.
Var batch_loss(Tape& tape, LoraModel& model, std::span<const std::vector<int>> sequences);

}  // namespace lorashear
