#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lorashear/tensor.hpp"

namespace lorashear {

// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = 0;
};

// Reverse-mode autodiff tape. Operations are recorded in execution order, so
// the record order is already a topological order for the backward sweep.
//
// Parameters are bound by reference: the bound Tensor must outlive the tape
// (or the next reset()). Gradients of bound tensors with requires_grad are
// accumulated additively into Tensor::grad; zeroing them is the caller's job.
class Tape {
   public:
    Var parameter(Tensor& t);
    Var constant(Tensor t);

    Var matmul(Var a, Var b);
    // x[T,in] * w[out,in]^T
    Var linear(Var x, Var w);
    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var silu(Var a);
    Var softmax(Var a);
    Var causal_softmax(Var a);
    Var rmsnorm(Var x, Var gain, double eps);
    Var embedding(Var table, std::span<const int> ids);
    Var slice_cols(Var a, std::size_t begin, std::size_t len);
    Var concat_cols(std::span<const Var> parts);
    Var cross_entropy(Var logits, std::span<const int> targets);

    const Tensor& value(Var v) const;
    // Gradient of the last backward() w.r.t. v; empty if v did not need one.
    std::span<const double> grad(Var v) const;
    bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

    void backward(Var loss);
    void reset();
    std::size_t size() const { return nodes_.size(); }

   private:
    struct Node {
        std::string op;
        Tensor owned;
        Tensor* bound = nullptr;
        std::vector<std::size_t> inputs;
        bool needs_grad = false;
        std::vector<double> grad;
        std::function<void(Tape&, std::size_t)> backward;
    };

    Var push(std::string op, Tensor value, std::vector<std::size_t> inputs,
             std::function<void(Tape&, std::size_t)> backward);
    std::vector<double>& grad_buffer(std::size_t id);
    void accumulate(std::size_t id, const Tensor& g);
    void check_inputs(std::span<const std::size_t> inputs, const char* op) const;

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

}  // namespace lorashear
