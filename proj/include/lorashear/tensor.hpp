#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace lorashear {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major f64 tensor. Zero-sized dimensions are permitted so that a
// fully pruned sub-block can still be represented.
class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v);

    const Shape& shape() const { return shape_; }
    std::size_t dim() const { return shape_.size(); }
    std::size_t size(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const { return data_.size(); }
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.at(1); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    double item() const;

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    bool has_grad() const { return grad_set_; }
    std::span<const double> grad() const { return grad_; }
    std::span<double> grad() { return grad_; }
    void accumulate_grad(std::span<const double> g);
    // Zero the gradient buffer in place (allocating it if absent).
    void zero_grad();
    void clear_grad();

    void fill(double v);

   private:
    Shape shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    bool grad_set_ = false;
    std::vector<double> grad_;
};

// Exact value comparison (== per element, shapes equal).
bool same_values(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Forward kernels shared by the tape, the plain model forward, and the graph
// executor. Sharing them is what makes the three paths bit-identical.
namespace kernels {

void check_finite(const Tensor& t, const char* op);

Tensor matmul(const Tensor& a, const Tensor& b);      // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);   // [m,k] x [n,k]^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);   // [k,m]^T x [k,n]
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor silu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
// Softmax of a square [T,T] score matrix where row i only sees columns j <= i.
Tensor causal_softmax_rows(const Tensor& a);
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t len);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t len);
// Mean token cross-entropy of logits [T,V] against targets.
double cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace kernels

}  // namespace lorashear
