#include "lorashear/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "lorashear/error.hpp"

namespace lorashear {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
    }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return data_[0];
}

void Tensor::accumulate_grad(std::span<const double> g) {
    if (g.size() != data_.size()) throw ShapeError("gradient size mismatch for tensor " + shape_str(shape_));
    if (!grad_set_) {
        grad_.assign(g.begin(), g.end());
        grad_set_ = true;
        return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) grad_[i] += g[i];
}

void Tensor::zero_grad() {
    grad_.assign(data_.size(), 0.0);
    grad_set_ = true;
}

void Tensor::clear_grad() {
    grad_.clear();
    grad_.shrink_to_fit();
    grad_set_ = false;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool same_values(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (!(a[i] == b[i])) return false;
    }
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

namespace kernels {

namespace {

void require_2d(const Tensor& t, const char* op) {
    if (t.dim() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input value");
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* o = &out.data()[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            const double* brow = &b.data()[p * n];
            for (std::size_t j = 0; j < n; ++j) o[j] += av * brow[j];
        }
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_nt");
    require_2d(b, "matmul_nt");
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &a.data()[i * k];
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = &b.data()[j * k];
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            out.at(i, j) = s;
        }
    }
    return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_tn");
    require_2d(b, "matmul_tn");
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: inner dimensions disagree " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
    }
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    Tensor out({m, n});
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = &a.data()[p * m];
        const double* brow = &b.data()[p * n];
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* o = &out.data()[i * n];
            for (std::size_t j = 0; j < n; ++j) o[j] += av * brow[j];
        }
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    Tensor out({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

Tensor silu(const Tensor& a) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] / (1.0 + std::exp(-a[i]));
    return out;
}

Tensor softmax_rows(const Tensor& a) {
    require_2d(a, "softmax");
    Tensor out(a.shape());
    const std::size_t n = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, a.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out.at(i, j) = std::exp(a.at(i, j) - mx);
            sum += out.at(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    return out;
}

Tensor causal_softmax_rows(const Tensor& a) {
    require_2d(a, "causal_softmax");
    if (a.rows() != a.cols()) throw ShapeError("causal_softmax: expected square scores, got " + shape_str(a.shape()));
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, a.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            out.at(i, j) = std::exp(a.at(i, j) - mx);
            sum += out.at(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) out.at(i, j) /= sum;
    }
    return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    require_2d(x, "rmsnorm");
    if (gain.numel() != x.cols()) {
        throw ShapeError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match input " + shape_str(x.shape()));
    }
    Tensor out(x.shape());
    const std::size_t d = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += x.at(i, j) * x.at(i, j);
        ms /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(ms + eps);
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) * inv * gain[j];
    }
    return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    require_2d(table, "embedding");
    const std::size_t d = table.cols();
    Tensor out({ids.size(), d});
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= table.rows()) {
            throw ShapeError("embedding: id " + std::to_string(ids[t]) + " out of range for table " +
                             shape_str(table.shape()));
        }
        const double* row = &table.data()[static_cast<std::size_t>(ids[t]) * d];
        std::copy(row, row + d, &out.data()[t * d]);
    }
    return out;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t len) {
    require_2d(a, "slice_cols");
    if (begin + len > a.cols()) throw ShapeError("slice_cols: range exceeds " + shape_str(a.shape()));
    Tensor out({a.rows(), len});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < len; ++j) out.at(i, j) = a.at(i, begin + j);
    return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t len) {
    require_2d(a, "slice_rows");
    if (begin + len > a.rows()) throw ShapeError("slice_rows: range exceeds " + shape_str(a.shape()));
    const std::size_t n = a.cols();
    std::vector<double> data(a.data().begin() + begin * n, a.data().begin() + (begin + len) * n);
    return Tensor({len, n}, std::move(data));
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = parts[0].rows();
    std::size_t n = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p.rows() != m) throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
        n += p.cols();
    }
    Tensor out({m, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
        off += p.cols();
    }
    return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = parts[0].cols();
    std::size_t m = 0;
    std::vector<double> data;
    for (const auto& p : parts) {
        require_2d(p, "concat_rows");
        if (p.cols() != n) throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
        m += p.rows();
        data.insert(data.end(), p.data().begin(), p.data().end());
    }
    return Tensor({m, n}, std::move(data));
}

double cross_entropy(const Tensor& logits, std::span<const int> targets) {
    require_2d(logits, "cross_entropy");
    if (targets.size() != logits.rows()) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
    }
    const std::size_t v = logits.cols();
    double total = 0.0;
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= v) {
            throw ShapeError("cross_entropy: target " + std::to_string(targets[t]) + " out of range");
        }
        double mx = -INFINITY;
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits.at(t, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) sum += std::exp(logits.at(t, j) - mx);
        total += std::log(sum) + mx - logits.at(t, static_cast<std::size_t>(targets[t]));
    }
    return total / static_cast<double>(logits.rows());
}

}  // namespace kernels

}  // namespace lorashear
