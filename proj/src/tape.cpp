#include "lorashear/tape.hpp"

#include <cmath>

#include "lorashear/error.hpp"

namespace lorashear {

namespace {

Tensor as_tensor(const Shape& shape, const std::vector<double>& g) { return Tensor(shape, g); }

}  // namespace

Var Tape::push(std::string op, Tensor value, std::vector<std::size_t> inputs,
               std::function<void(Tape&, std::size_t)> backward) {
    if (backward_done_) throw StateError(op + ": recording on a tape that already ran backward; reset() first");
    Node n;
    n.op = std::move(op);
    n.owned = std::move(value);
    n.inputs = std::move(inputs);
    for (auto i : n.inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

void Tape::check_inputs(std::span<const std::size_t> inputs, const char* op) const {
    for (auto i : inputs) {
        if (i >= nodes_.size()) throw StateError(std::string(op) + ": variable from a different tape");
        kernels::check_finite(value(Var{i}), op);
    }
}

const Tensor& Tape::value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.bound ? *n.bound : n.owned;
}

std::span<const double> Tape::grad(Var v) const { return nodes_.at(v.id).grad; }

std::vector<double>& Tape::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(Var{id}).numel(), 0.0);
    return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
    if (!nodes_[id].needs_grad) return;
    auto& buf = grad_buffer(id);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

Var Tape::parameter(Tensor& t) {
    if (backward_done_) throw StateError("parameter: tape already ran backward; reset() first");
    Node n;
    n.op = "parameter";
    n.bound = &t;
    n.needs_grad = t.requires_grad();
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Var Tape::constant(Tensor t) { return push("constant", std::move(t), {}, nullptr); }

Var Tape::matmul(Var a, Var b) {
    check_inputs(std::vector<std::size_t>{a.id, b.id}, "matmul");
    return push("matmul", kernels::matmul(value(a), value(b)), {a.id, b.id}, [](Tape& tp, std::size_t self) {
        const Node& n = tp.nodes_[self];
        const Tensor g = as_tensor(n.owned.shape(), n.grad);
        const Tensor& av = tp.value(Var{n.inputs[0]});
        const Tensor& bv = tp.value(Var{n.inputs[1]});
        if (tp.nodes_[n.inputs[0]].needs_grad) tp.accumulate(n.inputs[0], kernels::matmul_nt(g, bv));
        if (tp.nodes_[n.inputs[1]].needs_grad) tp.accumulate(n.inputs[1], kernels::matmul_tn(av, g));
    });
}

Var Tape::linear(Var x, Var w) {
    check_inputs(std::vector<std::size_t>{x.id, w.id}, "linear");
    return push("linear", kernels::matmul_nt(value(x), value(w)), {x.id, w.id}, [](Tape& tp, std::size_t self) {
        const Node& n = tp.nodes_[self];
        const Tensor g = as_tensor(n.owned.shape(), n.grad);
        const Tensor& xv = tp.value(Var{n.inputs[0]});
        const Tensor& wv = tp.value(Var{n.inputs[1]});
        if (tp.nodes_[n.inputs[0]].needs_grad) tp.accumulate(n.inputs[0], kernels::matmul(g, wv));
        if (tp.nodes_[n.inputs[1]].needs_grad) tp.accumulate(n.inputs[1], kernels::matmul_tn(g, xv));
    });
}

Var Tape::add(Var a, Var b) {
    check_inputs(std::vector<std::size_t>{a.id, b.id}, "add");
    return push("add", kernels::add(value(a), value(b)), {a.id, b.id}, [](Tape& tp, std::size_t self) {
        const Node& n = tp.nodes_[self];
        const Tensor g = as_tensor(n.owned.shape(), n.grad);
        tp.accumulate(n.inputs[0], g);
        tp.accumulate(n.inputs[1], g);
    });
}

Var Tape::mul(Var a, Var b) {
    check_inputs(std::vector<std::size_t>{a.id, b.id}, "mul");
    return push("mul", kernels::mul(value(a), value(b)), {a.id, b.id}, [](Tape& tp, std::size_t self) {
        const Node& n = tp.nodes_[self];
        const Tensor g = as_tensor(n.owned.shape(), n.grad);
        const Tensor& av = tp.value(Var{n.inputs[0]});
        const Tensor& bv = tp.value(Var{n.inputs[1]});
        if (tp.nodes_[n.inputs[0]].needs_grad) tp.accumulate(n.inputs[0], kernels::mul(g, bv));
        if (tp.nodes_[n.inputs[1]].needs_grad) tp.accumulate(n.inputs[1], kernels::mul(g, av));
    });
}

Var Tape::scale(Var a, double s) {
    check_inputs(std::vector<std::size_t>{a.id}, "scale");
    return push("scale", kernels::scale(value(a), s), {a.id}, [s](Tape& tp, std::size_t self) {
        const Node& n = tp.nodes_[self];
        tp.accumulate(n.inputs[0], kernels::scale(as_tensor(n.owned.shape(), n.grad), s));
    });
}

Var Tape::silu(Var a) {
    check_inputs(std::vector<std::size_t>{a.id}, "silu");
    return push("silu", kernels::silu(value(a)), {a.id}, [](Tape& tp, std::size_t self) {
        const Node& n = tp.nodes_[self];
        const Tensor& x = tp.value(Var{n.inputs[0]});
        Tensor g(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x[i]));
            g[i] = n.grad[i] * s * (1.0 + x[i] * (1.0 - s));
        }
        tp.accumulate(n.inputs[0], g);
    });
}

namespace {

Tensor softmax_backward(const Tensor& y, std::span<const double> gy) {
    Tensor g(y.shape());
    for (std::size_t i = 0; i < y.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j) dot += gy[i * y.cols() + j] * y.at(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) g.at(i, j) = y.at(i, j) * (gy[i * y.cols() + j] - dot);
    }
    return g;
}

}  // namespace

Var Tape::softmax(Var a) {
    check_inputs(std::vector<std::size_t>{a.id}, "softmax");
    return push("softmax", kernels::softmax_rows(value(a)), {a.id}, [](Tape& tp, std::size_t self) {
        const Node& n = tp.nodes_[self];
        tp.accumulate(n.inputs[0], softmax_backward(n.owned, n.grad));
    });
}

Var Tape::causal_softmax(Var a) {
    check_inputs(std::vector<std::size_t>{a.id}, "causal_softmax");
    // Masked entries are exactly zero in the output, so the plain softmax
    // backward already yields zero gradient for them.
    return push("causal_softmax", kernels::causal_softmax_rows(value(a)), {a.id}, [](Tape& tp, std::size_t self) {
        const Node& n = tp.nodes_[self];
        tp.accumulate(n.inputs[0], softmax_backward(n.owned, n.grad));
    });
}

Var Tape::rmsnorm(Var x, Var gain, double eps) {
    check_inputs(std::vector<std::size_t>{x.id, gain.id}, "rmsnorm");
    return push("rmsnorm", kernels::rmsnorm(value(x), value(gain), eps), {x.id, gain.id},
                [eps](Tape& tp, std::size_t self) {
                    const Node& n = tp.nodes_[self];
                    const Tensor& xv = tp.value(Var{n.inputs[0]});
                    const Tensor& gv = tp.value(Var{n.inputs[1]});
                    const std::size_t d = xv.cols();
                    Tensor gx(xv.shape());
                    Tensor gg(gv.shape());
                    for (std::size_t i = 0; i < xv.rows(); ++i) {
                        double ms = 0.0;
                        for (std::size_t j = 0; j < d; ++j) ms += xv.at(i, j) * xv.at(i, j);
                        ms /= static_cast<double>(d);
                        const double inv = 1.0 / std::sqrt(ms + eps);
                        double dot = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                            const double gy = n.grad[i * d + j];
                            gg[j] += gy * xv.at(i, j) * inv;
                            dot += gy * gv[j] * xv.at(i, j);
                        }
                        const double c = inv * inv * inv / static_cast<double>(d) * dot;
                        for (std::size_t j = 0; j < d; ++j) {
                            gx.at(i, j) = inv * n.grad[i * d + j] * gv[j] - xv.at(i, j) * c;
                        }
                    }
                    tp.accumulate(n.inputs[0], gx);
                    tp.accumulate(n.inputs[1], gg);
                });
}

Var Tape::embedding(Var table, std::span<const int> ids) {
    check_inputs(std::vector<std::size_t>{table.id}, "embedding");
    std::vector<int> idv(ids.begin(), ids.end());
    return push("embedding", kernels::embedding(value(table), ids), {table.id},
                [idv = std::move(idv)](Tape& tp, std::size_t self) {
                    const Node& n = tp.nodes_[self];
                    const Tensor& tv = tp.value(Var{n.inputs[0]});
                    const std::size_t d = tv.cols();
                    Tensor g(tv.shape());
                    for (std::size_t t = 0; t < idv.size(); ++t) {
                        const std::size_t r = static_cast<std::size_t>(idv[t]);
                        for (std::size_t j = 0; j < d; ++j) g.at(r, j) += n.grad[t * d + j];
                    }
                    tp.accumulate(n.inputs[0], g);
                });
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t len) {
    check_inputs(std::vector<std::size_t>{a.id}, "slice_cols");
    return push("slice_cols", kernels::slice_cols(value(a), begin, len), {a.id},
                [begin, len](Tape& tp, std::size_t self) {
                    const Node& n = tp.nodes_[self];
                    const Tensor& av = tp.value(Var{n.inputs[0]});
                    Tensor g(av.shape());
                    for (std::size_t i = 0; i < av.rows(); ++i)
                        for (std::size_t j = 0; j < len; ++j) g.at(i, begin + j) = n.grad[i * len + j];
                    tp.accumulate(n.inputs[0], g);
                });
}

Var Tape::concat_cols(std::span<const Var> parts) {
    std::vector<std::size_t> ids;
    std::vector<Tensor> vals;
    for (auto p : parts) {
        ids.push_back(p.id);
        vals.push_back(value(p));
    }
    check_inputs(ids, "concat_cols");
    return push("concat_cols", kernels::concat_cols(vals), ids, [](Tape& tp, std::size_t self) {
        const Node& n = tp.nodes_[self];
        const std::size_t total = n.owned.cols();
        std::size_t off = 0;
        for (auto in : n.inputs) {
            const Tensor& pv = tp.value(Var{in});
            Tensor g(pv.shape());
            for (std::size_t i = 0; i < pv.rows(); ++i)
                for (std::size_t j = 0; j < pv.cols(); ++j) g.at(i, j) = n.grad[i * total + off + j];
            tp.accumulate(in, g);
            off += pv.cols();
        }
    });
}

Var Tape::cross_entropy(Var logits, std::span<const int> targets) {
    check_inputs(std::vector<std::size_t>{logits.id}, "cross_entropy");
    std::vector<int> tv(targets.begin(), targets.end());
    const double loss = kernels::cross_entropy(value(logits), targets);
    return push("cross_entropy", Tensor::scalar(loss), {logits.id}, [tv = std::move(tv)](Tape& tp, std::size_t self) {
        const Node& n = tp.nodes_[self];
        const Tensor& lv = tp.value(Var{n.inputs[0]});
        Tensor g = kernels::softmax_rows(lv);
        const double s = n.grad[0] / static_cast<double>(lv.rows());
        for (std::size_t t = 0; t < lv.rows(); ++t) {
            g.at(t, static_cast<std::size_t>(tv[t])) -= 1.0;
            for (std::size_t j = 0; j < lv.cols(); ++j) g.at(t, j) *= s;
        }
        tp.accumulate(n.inputs[0], g);
    });
}

void Tape::backward(Var loss) {
    if (backward_done_) throw StateError("backward: called twice without reset()");
    if (nodes_.empty()) throw StateError("backward: empty tape");
    if (value(loss).numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(value(loss).shape()));
    backward_done_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.bound) {
            if (n.bound->requires_grad()) n.bound->accumulate_grad(n.grad);
            continue;
        }
        if (n.backward) n.backward(*this, i);
    }
}

void Tape::reset() {
    nodes_.clear();
    backward_done_ = false;
}

}  // namespace lorashear
