#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lara/core.hpp"

namespace lara {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// Reverse-mode tape node. `data` is shared so views (reshape) alias storage;
// every node owns its gradient buffer.
struct TensorNode {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::vector<double> grad;
    bool needs_grad = false;
    bool is_leaf = false;
    int64_t id = 0;
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;

    int64_t size() const { return static_cast<int64_t>(data->size()); }
    void ensure_grad() {
        if (grad.size() != data->size()) grad.assign(data->size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value);
    static Tensor from_vector(const Shape& shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim(int i) const;
    int64_t numel() const { return node_->size(); }
    bool requires_grad() const { return node_ && node_->needs_grad; }

    std::vector<double>& value() { return *node_->data; }
    const std::vector<double>& value() const { return *node_->data; }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;

    double item() const;
    double at(std::initializer_list<int64_t> idx) const;

    // Reverse pass from this node. A non-scalar root requires an explicit seed.
    void backward() const;
    void backward(const std::vector<double>& seed) const;
    void zero_grad();

    NodePtr node() const { return node_; }

private:
    NodePtr node_;
};

NodePtr make_node(const Shape& shape);
int64_t next_node_id();

// --- elementwise / broadcast binary ops (numpy-style right-aligned broadcasting)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// --- unary
Tensor exp_(const Tensor& a);
Tensor log_(const Tensor& a);
Tensor sqrt_(const Tensor& a);
Tensor abs_(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// --- shape ops
Tensor reshape(const Tensor& a, const Shape& shape);       // aliases storage
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor transpose2d(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
// Row gather on a [N, C] view of `a`; index -1 yields a zero row. Backward scatter-adds.
Tensor take_rows(const Tensor& a, std::shared_ptr<std::vector<int64_t>> indices, int64_t row_width);
Tensor repeat_rows(const Tensor& a, int64_t times);  // [N,C] -> [N*times, C], row-interleaved

// --- matmul
Tensor matmul(const Tensor& a, const Tensor& b);   // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);      // [b,m,k] x [b,k,n]
// y = S * x for a fixed sparse row-major matrix (CSR); linear in x.
struct SparseMatrix {
    int64_t rows = 0, cols = 0;
    std::vector<int64_t> row_offsets;  // rows+1
    std::vector<int64_t> col_indices;
    std::vector<double> weights;
};
Tensor sparse_matmul(const std::shared_ptr<SparseMatrix>& s, const Tensor& x);

// --- reductions / normalization
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
Tensor softmax_last(const Tensor& a);
// mask is per-element (broadcast over the leading dims of `a` is not supported:
// mask.shape == a.shape), entries in {0,1}. Fully masked rows produce zeros.
Tensor masked_softmax_last(const Tensor& a, const std::shared_ptr<std::vector<double>>& mask);
Tensor layer_norm_last(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor rows_scale(const Tensor& a, const std::shared_ptr<std::vector<double>>& per_row);  // constant gate

// Bilinear sampling of map [H,W,C] at continuous pixel coords uv [N,2]
// (pixel (ix,iy) has center (ix+0.5, iy+0.5)). Out-of-lattice taps read zero.
// Differentiable in both map and uv.
Tensor bilinear_sample(const Tensor& map, const Tensor& uv);

// --- gradient checking -------------------------------------------------------
struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int64_t worst_index = -1;
};
struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool passed(double tol) const { return max_rel_err < tol; }
};
struct NamedTensor {
    std::string name;
    Tensor tensor;
};
// Central differences with step h against the tape's analytic gradients.
// rel err = |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params,
                           double h = 1e-4, double tol = 1e-3);

}  // namespace lara
