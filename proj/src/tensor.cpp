#include "lara/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include <cblas.h>

namespace lara {

namespace {
std::atomic<int64_t> g_node_counter{0};

inline double sigmoid_s(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

int64_t next_node_id() { return ++g_node_counter; }

NodePtr make_node(const Shape& shape) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data = std::make_shared<std::vector<double>>(static_cast<size_t>(numel(shape)), 0.0);
    n->id = next_node_id();
    return n;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    auto n = make_node(shape);
    n->needs_grad = requires_grad;
    n->is_leaf = true;
    return Tensor(n);
}

Tensor Tensor::full(const Shape& shape, double value) {
    auto n = make_node(shape);
    std::fill(n->data->begin(), n->data->end(), value);
    n->is_leaf = true;
    return Tensor(n);
}

Tensor Tensor::from_vector(const Shape& shape, std::vector<double> values, bool requires_grad) {
    check(lara::numel(shape) == static_cast<int64_t>(values.size()),
          "from_vector: shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
              " values");
    auto n = make_node(shape);
    *n->data = std::move(values);
    n->needs_grad = requires_grad;
    n->is_leaf = true;
    return Tensor(n);
}

Tensor Tensor::scalar(double value) { return from_vector({1}, {value}); }

int64_t Tensor::dim(int i) const {
    if (i < 0) i += static_cast<int>(node_->shape.size());
    return node_->shape[static_cast<size_t>(i)];
}

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

double Tensor::item() const {
    check(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements, expected 1");
    return (*node_->data)[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    const Shape& s = node_->shape;
    check(idx.size() == s.size(), "at: rank mismatch");
    int64_t flat = 0;
    size_t k = 0;
    for (int64_t i : idx) {
        flat = flat * s[k] + i;
        ++k;
    }
    return (*node_->data)[static_cast<size_t>(flat)];
}

void Tensor::zero_grad() {
    if (node_) node_->grad.assign(node_->data->size(), 0.0);
}

namespace {

void topo_collect(const NodePtr& root, std::vector<NodePtr>& order) {
    // Nodes get monotonically increasing ids and parents always precede
    // children, so sorting the reachable set by id descending is a valid
    // reverse topological order.
    std::unordered_set<TensorNode*> seen;
    std::vector<NodePtr> stack{root};
    while (!stack.empty()) {
        NodePtr n = stack.back();
        stack.pop_back();
        if (!n->needs_grad || !seen.insert(n.get()).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p);
    }
    std::sort(order.begin(), order.end(), [](const NodePtr& a, const NodePtr& b) { return a->id > b->id; });
}

void run_backward(const NodePtr& root, const std::vector<double>& seed) {
    check(seed.size() == root->data->size(), "backward: seed size mismatch");
    std::vector<NodePtr> order;
    topo_collect(root, order);
    root->ensure_grad();
    for (size_t i = 0; i < seed.size(); ++i) root->grad[i] += seed[i];
    for (const auto& n : order) {
        if (n->backward_fn) n->backward_fn(*n);
    }
}

}  // namespace

void Tensor::backward() const {
    check(defined(), "backward: undefined tensor");
    if (!node_->needs_grad) return;
    check(numel() == 1, "backward on a non-scalar root requires an explicit seed (numel=" +
                            std::to_string(numel()) + ")");
    run_backward(node_, {1.0});
}

void Tensor::backward(const std::vector<double>& seed) const {
    check(defined(), "backward: undefined tensor");
    if (!node_->needs_grad) return;
    run_backward(node_, seed);
}

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

namespace {

struct BroadcastPlan {
    Shape out;
    std::vector<int64_t> stride_a, stride_b;  // element strides per out dim (0 where broadcast)
    bool same_shape = false;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out = a;
        plan.same_shape = true;
        return plan;
    }
    size_t rank = std::max(a.size(), b.size());
    plan.out.resize(rank);
    std::vector<int64_t> ash(rank, 1), bsh(rank, 1);
    std::copy(a.begin(), a.end(), ash.begin() + static_cast<int64_t>(rank - a.size()));
    std::copy(b.begin(), b.end(), bsh.begin() + static_cast<int64_t>(rank - b.size()));
    for (size_t i = 0; i < rank; ++i) {
        if (ash[i] == bsh[i]) {
            plan.out[i] = ash[i];
        } else if (ash[i] == 1 || bsh[i] == 1) {
            plan.out[i] = std::max(ash[i], bsh[i]);
        } else {
            fail(std::string(op) + ": shapes not broadcast-compatible: " + shape_str(a) + " vs " +
                 shape_str(b));
        }
    }
    auto strides_for = [&](const std::vector<int64_t>& sh) {
        std::vector<int64_t> st(rank, 0);
        int64_t s = 1;
        for (int64_t i = static_cast<int64_t>(rank) - 1; i >= 0; --i) {
            st[static_cast<size_t>(i)] = (sh[static_cast<size_t>(i)] == 1) ? 0 : s;
            s *= sh[static_cast<size_t>(i)];
        }
        return st;
    };
    plan.stride_a = strides_for(ash);
    plan.stride_b = strides_for(bsh);
    return plan;
}

template <class FwdFn>
void broadcast_apply(const BroadcastPlan& plan, const std::vector<double>& a, const std::vector<double>& b,
                     std::vector<double>& out, FwdFn fn, std::vector<int64_t>* idx_a = nullptr,
                     std::vector<int64_t>* idx_b = nullptr) {
    const int64_t n = numel(plan.out);
    const size_t rank = plan.out.size();
    std::vector<int64_t> counter(rank, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        out[static_cast<size_t>(lin)] = fn(a[static_cast<size_t>(ia)], b[static_cast<size_t>(ib)]);
        if (idx_a) (*idx_a)[static_cast<size_t>(lin)] = ia;
        if (idx_b) (*idx_b)[static_cast<size_t>(lin)] = ib;
        for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
            size_t du = static_cast<size_t>(d);
            ++counter[du];
            ia += plan.stride_a[du];
            ib += plan.stride_b[du];
            if (counter[du] < plan.out[du]) break;
            ia -= plan.stride_a[du] * plan.out[du];
            ib -= plan.stride_b[du] * plan.out[du];
            counter[du] = 0;
        }
    }
}

bool any_needs_grad(const Tensor& a, const Tensor& b) {
    return a.requires_grad() || b.requires_grad();
}

Tensor binary_op(const Tensor& at, const Tensor& bt, const char* name,
                 double (*fwd)(double, double),
                 void (*bwd)(double a, double b, double g, double& da, double& db)) {
    auto a = at.node();
    auto b = bt.node();
    BroadcastPlan plan = plan_broadcast(a->shape, b->shape, name);
    auto out = make_node(plan.out);
    const auto& av = *a->data;
    const auto& bv = *b->data;
    auto& ov = *out->data;
    if (plan.same_shape) {
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
    } else {
        broadcast_apply(plan, av, bv, ov, fwd);
    }
    if (any_needs_grad(at, bt)) {
        out->needs_grad = true;
        out->parents = {a, b};
        out->backward_fn = [a, b, plan, fwd, bwd](TensorNode& self) {
            const auto& av2 = *a->data;
            const auto& bv2 = *b->data;
            double* ga = nullptr;
            double* gb = nullptr;
            if (a->needs_grad) {
                a->ensure_grad();
                ga = a->grad.data();
            }
            if (b->needs_grad) {
                b->ensure_grad();
                gb = b->grad.data();
            }
            if (plan.same_shape) {
                for (size_t i = 0; i < self.grad.size(); ++i) {
                    double da = 0, db = 0;
                    bwd(av2[i], bv2[i], self.grad[i], da, db);
                    if (ga) ga[i] += da;
                    if (gb) gb[i] += db;
                }
            } else {
                const int64_t n = numel(plan.out);
                const size_t rank = plan.out.size();
                std::vector<int64_t> counter(rank, 0);
                int64_t ia = 0, ib = 0;
                for (int64_t lin = 0; lin < n; ++lin) {
                    double da = 0, db = 0;
                    bwd(av2[static_cast<size_t>(ia)], bv2[static_cast<size_t>(ib)],
                        self.grad[static_cast<size_t>(lin)], da, db);
                    if (ga) ga[ia] += da;
                    if (gb) gb[ib] += db;
                    for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
                        size_t du = static_cast<size_t>(d);
                        ++counter[du];
                        ia += plan.stride_a[du];
                        ib += plan.stride_b[du];
                        if (counter[du] < plan.out[du]) break;
                        ia -= plan.stride_a[du] * plan.out[du];
                        ib -= plan.stride_b[du] * plan.out[du];
                        counter[du] = 0;
                    }
                }
            }
        };
    }
    return Tensor(out);
}

Tensor unary_op(const Tensor& at, double (*fwd)(double), double (*dfd)(double x, double y)) {
    auto a = at.node();
    auto out = make_node(a->shape);
    const auto& av = *a->data;
    auto& ov = *out->data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i]);
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        NodePtr out_weak = out;
        out->backward_fn = [a, dfd](TensorNode& self) {
            a->ensure_grad();
            const auto& av2 = *a->data;
            const auto& ov2 = *self.data;
            for (size_t i = 0; i < self.grad.size(); ++i) {
                a->grad[i] += self.grad[i] * dfd(av2[i], ov2[i]);
            }
        };
    }
    return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                     [](double, double, double g, double& da, double& db) {
                         da = g;
                         db = g;
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                     [](double, double, double g, double& da, double& db) {
                         da = g;
                         db = -g;
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                     [](double x, double y, double g, double& da, double& db) {
                         da = g * y;
                         db = g * x;
                     });
}

Tensor divide(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "divide", [](double x, double y) { return x / y; },
                     [](double x, double y, double g, double& da, double& db) {
                         da = g / y;
                         db = -g * x / (y * y);
                     });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& at, double s) {
    auto a = at.node();
    auto out = make_node(a->shape);
    const auto& av = *a->data;
    auto& ov = *out->data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + s;
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a](TensorNode& self) {
            a->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
        };
    }
    return Tensor(out);
}

Tensor mul_scalar(const Tensor& at, double s) {
    auto a = at.node();
    auto out = make_node(a->shape);
    const auto& av = *a->data;
    auto& ov = *out->data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a, s](TensorNode& self) {
            a->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * s;
        };
    }
    return Tensor(out);
}

Tensor exp_(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_(const Tensor& a) {
    return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt_(const Tensor& a) {
    return unary_op(a, [](double x) { return std::sqrt(x); },
                    [](double, double y) { return 0.5 / (y > 0 ? y : 1e-300); });
}

Tensor abs_(const Tensor& a) {
    return unary_op(a, [](double x) { return std::fabs(x); },
                    [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, [](double x) { return sigmoid_s(x); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_(const Tensor& a) {
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
    return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                    [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    return unary_op(a,
                    [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                    [](double x, double) {
                        double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                        return cdf + x * pdf;
                    });
}

Tensor clamp(const Tensor& at, double lo, double hi) {
    auto a = at.node();
    auto out = make_node(a->shape);
    const auto& av = *a->data;
    auto& ov = *out->data;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::min(hi, std::max(lo, av[i]));
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a, lo, hi](TensorNode& self) {
            a->ensure_grad();
            const auto& av2 = *a->data;
            for (size_t i = 0; i < self.grad.size(); ++i) {
                if (av2[i] > lo && av2[i] < hi) a->grad[i] += self.grad[i];
            }
        };
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& at, const Shape& shape) {
    auto a = at.node();
    check(numel(shape) == a->size(), "reshape: cannot view " + shape_str(a->shape) + " as " +
                                         shape_str(shape));
    auto out = std::make_shared<TensorNode>();
    out->shape = shape;
    out->data = a->data;  // alias
    out->id = next_node_id();
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a](TensorNode& self) {
            a->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
        };
    }
    return Tensor(out);
}

Tensor permute(const Tensor& at, const std::vector<int>& perm) {
    auto a = at.node();
    const Shape& s = a->shape;
    check(perm.size() == s.size(), "permute: perm rank mismatch");
    const size_t rank = s.size();
    Shape out_shape(rank);
    for (size_t i = 0; i < rank; ++i) out_shape[i] = s[static_cast<size_t>(perm[i])];
    // strides of input
    std::vector<int64_t> in_stride(rank, 1);
    for (int64_t i = static_cast<int64_t>(rank) - 2; i >= 0; --i)
        in_stride[static_cast<size_t>(i)] = in_stride[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];
    std::vector<int64_t> gather_stride(rank);
    for (size_t i = 0; i < rank; ++i) gather_stride[i] = in_stride[static_cast<size_t>(perm[i])];

    auto out = make_node(out_shape);
    const auto& av = *a->data;
    auto& ov = *out->data;
    const int64_t n = out->size();
    std::vector<int64_t> counter(rank, 0);
    int64_t src = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        ov[static_cast<size_t>(lin)] = av[static_cast<size_t>(src)];
        for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
            size_t du = static_cast<size_t>(d);
            ++counter[du];
            src += gather_stride[du];
            if (counter[du] < out_shape[du]) break;
            src -= gather_stride[du] * out_shape[du];
            counter[du] = 0;
        }
    }
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a, out_shape, gather_stride, rank](TensorNode& self) {
            a->ensure_grad();
            const int64_t n2 = static_cast<int64_t>(self.grad.size());
            std::vector<int64_t> counter2(rank, 0);
            int64_t src = 0;
            for (int64_t lin = 0; lin < n2; ++lin) {
                a->grad[static_cast<size_t>(src)] += self.grad[static_cast<size_t>(lin)];
                for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
                    size_t du = static_cast<size_t>(d);
                    ++counter2[du];
                    src += gather_stride[du];
                    if (counter2[du] < out_shape[du]) break;
                    src -= gather_stride[du] * out_shape[du];
                    counter2[du] = 0;
                }
            }
        };
    }
    return Tensor(out);
}

Tensor transpose2d(const Tensor& a) {
    check(a.shape().size() == 2, "transpose2d: expected rank-2, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    check(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    const size_t rank = s0.size();
    if (axis < 0) axis += static_cast<int>(rank);
    check(axis >= 0 && axis < static_cast<int>(rank), "concat: bad axis");
    Shape out_shape = s0;
    int64_t total_axis = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        check(s.size() == rank, "concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
        for (size_t d = 0; d < rank; ++d) {
            if (static_cast<int>(d) != axis)
                check(s[d] == s0[d], "concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
        }
        total_axis += s[static_cast<size_t>(axis)];
    }
    out_shape[static_cast<size_t>(axis)] = total_axis;

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < rank; ++d) inner *= s0[d];

    auto out = make_node(out_shape);
    auto& ov = *out->data;
    bool needs = false;
    std::vector<NodePtr> parent_nodes;
    for (const auto& p : parts) {
        parent_nodes.push_back(p.node());
        needs = needs || p.requires_grad();
    }
    int64_t axis_off = 0;
    for (const auto& pn : parent_nodes) {
        const int64_t alen = pn->shape[static_cast<size_t>(axis)];
        const auto& pv = *pn->data;
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(ov.data() + (o * total_axis + axis_off) * inner, pv.data() + o * alen * inner,
                        static_cast<size_t>(alen * inner) * sizeof(double));
        }
        axis_off += alen;
    }
    if (needs) {
        out->needs_grad = true;
        out->parents = parent_nodes;
        out->backward_fn = [parent_nodes, outer, inner, total_axis, axis](TensorNode& self) {
            int64_t off = 0;
            for (const auto& pn : parent_nodes) {
                const int64_t alen = pn->shape[static_cast<size_t>(axis)];
                if (pn->needs_grad) {
                    pn->ensure_grad();
                    for (int64_t o = 0; o < outer; ++o) {
                        const double* g = self.grad.data() + (o * total_axis + off) * inner;
                        double* dst = pn->grad.data() + o * alen * inner;
                        for (int64_t i = 0; i < alen * inner; ++i) dst[i] += g[i];
                    }
                }
                off += alen;
            }
        };
    }
    return Tensor(out);
}

Tensor slice(const Tensor& at, int axis, int64_t start, int64_t len) {
    auto a = at.node();
    const Shape& s = a->shape;
    const size_t rank = s.size();
    if (axis < 0) axis += static_cast<int>(rank);
    check(axis >= 0 && axis < static_cast<int>(rank), "slice: bad axis");
    const int64_t alen = s[static_cast<size_t>(axis)];
    check(start >= 0 && len >= 0 && start + len <= alen,
          "slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
              ") out of bounds for axis length " + std::to_string(alen));
    Shape out_shape = s;
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < rank; ++d) inner *= s[d];

    auto out = make_node(out_shape);
    const auto& av = *a->data;
    auto& ov = *out->data;
    for (int64_t o = 0; o < outer; ++o) {
        std::memcpy(ov.data() + o * len * inner, av.data() + (o * alen + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(double));
    }
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a, outer, inner, alen, start, len](TensorNode& self) {
            a->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
                const double* g = self.grad.data() + o * len * inner;
                double* dst = a->grad.data() + (o * alen + start) * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
            }
        };
    }
    return Tensor(out);
}

Tensor take_rows(const Tensor& at, std::shared_ptr<std::vector<int64_t>> indices, int64_t row_width) {
    auto a = at.node();
    check(a->size() % row_width == 0, "take_rows: size not divisible by row width");
    const int64_t n_rows = a->size() / row_width;
    const int64_t m = static_cast<int64_t>(indices->size());
    auto out = make_node({m, row_width});
    const auto& av = *a->data;
    auto& ov = *out->data;
    for (int64_t r = 0; r < m; ++r) {
        int64_t src = (*indices)[static_cast<size_t>(r)];
        if (src < 0) continue;  // zero row
        check(src < n_rows, "take_rows: index " + std::to_string(src) + " out of range");
        std::memcpy(ov.data() + r * row_width, av.data() + src * row_width,
                    static_cast<size_t>(row_width) * sizeof(double));
    }
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a, indices, row_width, m](TensorNode& self) {
            a->ensure_grad();
            for (int64_t r = 0; r < m; ++r) {
                int64_t src = (*indices)[static_cast<size_t>(r)];
                if (src < 0) continue;
                const double* g = self.grad.data() + r * row_width;
                double* dst = a->grad.data() + src * row_width;
                for (int64_t i = 0; i < row_width; ++i) dst[i] += g[i];
            }
        };
    }
    return Tensor(out);
}

Tensor repeat_rows(const Tensor& at, int64_t times) {
    const Shape& s = at.shape();
    check(s.size() == 2, "repeat_rows: expected [N, C]");
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(static_cast<size_t>(s[0] * times));
    for (int64_t r = 0; r < s[0]; ++r)
        for (int64_t t = 0; t < times; ++t) idx->push_back(r);
    return take_rows(at, idx, s[1]);
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {
void dgemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const double* A, int64_t lda,
           const double* B, int64_t ldb, double beta, double* C, int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, A,
                static_cast<int>(lda), B, static_cast<int>(ldb), beta, C, static_cast<int>(ldc));
}
}  // namespace

Tensor matmul(const Tensor& at, const Tensor& bt) {
    auto a = at.node();
    auto b = bt.node();
    check(a->shape.size() == 2 && b->shape.size() == 2,
          "matmul: expected rank-2 operands, got " + shape_str(a->shape) + " and " + shape_str(b->shape));
    const int64_t m = a->shape[0], k = a->shape[1], k2 = b->shape[0], n = b->shape[1];
    check(k == k2, "matmul: inner dimensions differ: " + shape_str(a->shape) + " x " + shape_str(b->shape));
    auto out = make_node({m, n});
    dgemm(false, false, m, n, k, 1.0, a->data->data(), k, b->data->data(), n, 0.0, out->data->data(), n);
    if (any_needs_grad(at, bt)) {
        out->needs_grad = true;
        out->parents = {a, b};
        out->backward_fn = [a, b, m, n, k](TensorNode& self) {
            if (a->needs_grad) {
                a->ensure_grad();
                dgemm(false, true, m, k, n, 1.0, self.grad.data(), n, b->data->data(), n, 1.0,
                      a->grad.data(), k);
            }
            if (b->needs_grad) {
                b->ensure_grad();
                dgemm(true, false, k, n, m, 1.0, a->data->data(), k, self.grad.data(), n, 1.0,
                      b->grad.data(), n);
            }
        };
    }
    return Tensor(out);
}

Tensor bmm(const Tensor& at, const Tensor& bt) {
    auto a = at.node();
    auto b = bt.node();
    check(a->shape.size() == 3 && b->shape.size() == 3, "bmm: expected rank-3 operands");
    const int64_t bs = a->shape[0], m = a->shape[1], k = a->shape[2], n = b->shape[2];
    check(b->shape[0] == bs && b->shape[1] == k,
          "bmm: shape mismatch " + shape_str(a->shape) + " x " + shape_str(b->shape));
    auto out = make_node({bs, m, n});
    for (int64_t i = 0; i < bs; ++i) {
        dgemm(false, false, m, n, k, 1.0, a->data->data() + i * m * k, k, b->data->data() + i * k * n, n,
              0.0, out->data->data() + i * m * n, n);
    }
    if (any_needs_grad(at, bt)) {
        out->needs_grad = true;
        out->parents = {a, b};
        out->backward_fn = [a, b, bs, m, n, k](TensorNode& self) {
            for (int64_t i = 0; i < bs; ++i) {
                const double* g = self.grad.data() + i * m * n;
                if (a->needs_grad) {
                    a->ensure_grad();
                    dgemm(false, true, m, k, n, 1.0, g, n, b->data->data() + i * k * n, n, 1.0,
                          a->grad.data() + i * m * k, k);
                }
                if (b->needs_grad) {
                    b->ensure_grad();
                    dgemm(true, false, k, n, m, 1.0, a->data->data() + i * m * k, k, g, n, 1.0,
                          b->grad.data() + i * k * n, n);
                }
            }
        };
    }
    return Tensor(out);
}

Tensor sparse_matmul(const std::shared_ptr<SparseMatrix>& s, const Tensor& xt) {
    auto x = xt.node();
    check(x->shape.size() == 2 && x->shape[0] == s->cols,
          "sparse_matmul: x shape " + shape_str(x->shape) + " incompatible with " +
              std::to_string(s->cols) + " columns");
    const int64_t c = x->shape[1];
    auto out = make_node({s->rows, c});
    const auto& xv = *x->data;
    auto& ov = *out->data;
    for (int64_t r = 0; r < s->rows; ++r) {
        double* dst = ov.data() + r * c;
        for (int64_t e = s->row_offsets[static_cast<size_t>(r)]; e < s->row_offsets[static_cast<size_t>(r) + 1]; ++e) {
            const double w = s->weights[static_cast<size_t>(e)];
            const double* src = xv.data() + s->col_indices[static_cast<size_t>(e)] * c;
            for (int64_t j = 0; j < c; ++j) dst[j] += w * src[j];
        }
    }
    if (xt.requires_grad()) {
        out->needs_grad = true;
        out->parents = {x};
        out->backward_fn = [x, s, c](TensorNode& self) {
            x->ensure_grad();
            for (int64_t r = 0; r < s->rows; ++r) {
                const double* g = self.grad.data() + r * c;
                for (int64_t e = s->row_offsets[static_cast<size_t>(r)]; e < s->row_offsets[static_cast<size_t>(r) + 1]; ++e) {
                    const double w = s->weights[static_cast<size_t>(e)];
                    double* dst = x->grad.data() + s->col_indices[static_cast<size_t>(e)] * c;
                    for (int64_t j = 0; j < c; ++j) dst[j] += w * g[j];
                }
            }
        };
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// reductions / normalization
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& at) {
    auto a = at.node();
    auto out = make_node({1});
    double s = 0;
    for (double v : *a->data) s += v;
    (*out->data)[0] = s;
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a](TensorNode& self) {
            a->ensure_grad();
            const double g = self.grad[0];
            for (auto& gv : a->grad) gv += g;
        };
    }
    return Tensor(out);
}

Tensor mean_all(const Tensor& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& at, int axis) {
    auto a = at.node();
    const Shape& s = a->shape;
    const size_t rank = s.size();
    if (axis < 0) axis += static_cast<int>(rank);
    check(axis >= 0 && axis < static_cast<int>(rank), "sum_axis: bad axis");
    int64_t outer = 1, inner = 1;
    const int64_t alen = s[static_cast<size_t>(axis)];
    for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < rank; ++d) inner *= s[d];
    Shape out_shape;
    for (size_t d = 0; d < rank; ++d)
        if (static_cast<int>(d) != axis) out_shape.push_back(s[d]);
    if (out_shape.empty()) out_shape = {1};
    auto out = make_node(out_shape);
    const auto& av = *a->data;
    auto& ov = *out->data;
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t x = 0; x < alen; ++x) {
            const double* src = av.data() + (o * alen + x) * inner;
            double* dst = ov.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a, outer, inner, alen](TensorNode& self) {
            a->ensure_grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t x = 0; x < alen; ++x) {
                    const double* g = self.grad.data() + o * inner;
                    double* dst = a->grad.data() + (o * alen + x) * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
                }
        };
    }
    return Tensor(out);
}

Tensor mean_axis(const Tensor& a, int axis) {
    int ax = axis < 0 ? axis + static_cast<int>(a.shape().size()) : axis;
    const double n = static_cast<double>(a.shape()[static_cast<size_t>(ax)]);
    return mul_scalar(sum_axis(a, axis), 1.0 / n);
}

Tensor softmax_last(const Tensor& at) {
    auto a = at.node();
    const Shape& s = a->shape;
    const int64_t cols = s.back();
    const int64_t rows = a->size() / cols;
    auto out = make_node(s);
    const auto& av = *a->data;
    auto& ov = *out->data;
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * cols;
        double* y = ov.data() + r * cols;
        double mx = x[0];
        for (int64_t i = 1; i < cols; ++i) mx = std::max(mx, x[i]);
        double z = 0;
        for (int64_t i = 0; i < cols; ++i) {
            y[i] = std::exp(x[i] - mx);
            z += y[i];
        }
        for (int64_t i = 0; i < cols; ++i) y[i] /= z;
    }
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a, rows, cols](TensorNode& self) {
            a->ensure_grad();
            const auto& yv = *self.data;
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = yv.data() + r * cols;
                const double* g = self.grad.data() + r * cols;
                double dotgy = 0;
                for (int64_t i = 0; i < cols; ++i) dotgy += g[i] * y[i];
                double* dst = a->grad.data() + r * cols;
                for (int64_t i = 0; i < cols; ++i) dst[i] += y[i] * (g[i] - dotgy);
            }
        };
    }
    return Tensor(out);
}

Tensor masked_softmax_last(const Tensor& at, const std::shared_ptr<std::vector<double>>& mask) {
    auto a = at.node();
    check(mask->size() == a->data->size(), "masked_softmax_last: mask size mismatch");
    const Shape& s = a->shape;
    const int64_t cols = s.back();
    const int64_t rows = a->size() / cols;
    auto out = make_node(s);
    const auto& av = *a->data;
    auto& ov = *out->data;
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * cols;
        const double* m = mask->data() + r * cols;
        double* y = ov.data() + r * cols;
        double mx = -1e300;
        bool any = false;
        for (int64_t i = 0; i < cols; ++i)
            if (m[i] > 0.5) {
                mx = std::max(mx, x[i]);
                any = true;
            }
        if (!any) continue;  // fully masked row stays zero
        double z = 0;
        for (int64_t i = 0; i < cols; ++i) {
            y[i] = m[i] > 0.5 ? std::exp(x[i] - mx) : 0.0;
            z += y[i];
        }
        for (int64_t i = 0; i < cols; ++i) y[i] /= z;
    }
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a, rows, cols](TensorNode& self) {
            a->ensure_grad();
            const auto& yv = *self.data;
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = yv.data() + r * cols;
                const double* g = self.grad.data() + r * cols;
                double dotgy = 0;
                for (int64_t i = 0; i < cols; ++i) dotgy += g[i] * y[i];
                double* dst = a->grad.data() + r * cols;
                for (int64_t i = 0; i < cols; ++i) dst[i] += y[i] * (g[i] - dotgy);
            }
        };
    }
    return Tensor(out);
}

Tensor layer_norm_last(const Tensor& at, const Tensor& gamma, const Tensor& beta, double eps) {
    auto a = at.node();
    const Shape& s = a->shape;
    const int64_t cols = s.back();
    const int64_t rows = a->size() / cols;
    const bool affine = gamma.defined();
    if (affine) {
        check(gamma.numel() == cols && beta.numel() == cols,
              "layer_norm: affine params must have " + std::to_string(cols) + " elements");
    }
    auto out = make_node(s);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    auto normed = std::make_shared<std::vector<double>>(a->data->size());
    const auto& av = *a->data;
    auto& ov = *out->data;
    const double* gv = affine ? gamma.value().data() : nullptr;
    const double* bv = affine ? beta.value().data() : nullptr;
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * cols;
        double mean = 0;
        for (int64_t i = 0; i < cols; ++i) mean += x[i];
        mean /= static_cast<double>(cols);
        double var = 0;
        for (int64_t i = 0; i < cols; ++i) {
            const double d = x[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = is;
        double* y = ov.data() + r * cols;
        double* nm = normed->data() + r * cols;
        for (int64_t i = 0; i < cols; ++i) {
            nm[i] = (x[i] - mean) * is;
            y[i] = affine ? nm[i] * gv[i] + bv[i] : nm[i];
        }
    }
    const bool needs = at.requires_grad() || (affine && (gamma.requires_grad() || beta.requires_grad()));
    if (needs) {
        out->needs_grad = true;
        out->parents = {a};
        NodePtr gn = affine ? gamma.node() : nullptr;
        NodePtr bn = affine ? beta.node() : nullptr;
        if (gn) out->parents.push_back(gn);
        if (bn) out->parents.push_back(bn);
        out->backward_fn = [a, gn, bn, rows, cols, inv_std, normed](TensorNode& self) {
            const double* gw = gn ? gn->data->data() : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                const double* g = self.grad.data() + r * cols;
                const double* nm = normed->data() + r * cols;
                const double is = (*inv_std)[static_cast<size_t>(r)];
                if (gn && gn->needs_grad) {
                    gn->ensure_grad();
                    for (int64_t i = 0; i < cols; ++i) gn->grad[static_cast<size_t>(i)] += g[i] * nm[i];
                }
                if (bn && bn->needs_grad) {
                    bn->ensure_grad();
                    for (int64_t i = 0; i < cols; ++i) bn->grad[static_cast<size_t>(i)] += g[i];
                }
                if (a->needs_grad) {
                    a->ensure_grad();
                    double sum_h = 0, sum_hn = 0;
                    for (int64_t i = 0; i < cols; ++i) {
                        const double h = gw ? g[i] * gw[i] : g[i];
                        sum_h += h;
                        sum_hn += h * nm[i];
                    }
                    const double inv_cols = 1.0 / static_cast<double>(cols);
                    double* dst = a->grad.data() + r * cols;
                    for (int64_t i = 0; i < cols; ++i) {
                        const double h = gw ? g[i] * gw[i] : g[i];
                        dst[i] += is * (h - sum_h * inv_cols - nm[i] * sum_hn * inv_cols);
                    }
                }
            }
        };
    }
    return Tensor(out);
}

Tensor rows_scale(const Tensor& at, const std::shared_ptr<std::vector<double>>& per_row) {
    auto a = at.node();
    const Shape& s = a->shape;
    check(s.size() == 2, "rows_scale: expected [N, C]");
    const int64_t n = s[0], c = s[1];
    check(static_cast<int64_t>(per_row->size()) == n, "rows_scale: per-row size mismatch");
    auto out = make_node(s);
    const auto& av = *a->data;
    auto& ov = *out->data;
    for (int64_t r = 0; r < n; ++r) {
        const double w = (*per_row)[static_cast<size_t>(r)];
        for (int64_t i = 0; i < c; ++i) ov[static_cast<size_t>(r * c + i)] = av[static_cast<size_t>(r * c + i)] * w;
    }
    if (at.requires_grad()) {
        out->needs_grad = true;
        out->parents = {a};
        out->backward_fn = [a, per_row, n, c](TensorNode& self) {
            a->ensure_grad();
            for (int64_t r = 0; r < n; ++r) {
                const double w = (*per_row)[static_cast<size_t>(r)];
                for (int64_t i = 0; i < c; ++i)
                    a->grad[static_cast<size_t>(r * c + i)] += self.grad[static_cast<size_t>(r * c + i)] * w;
            }
        };
    }
    return Tensor(out);
}

Tensor bilinear_sample(const Tensor& map_t, const Tensor& uv_t) {
    auto map = map_t.node();
    auto uv = uv_t.node();
    check(map->shape.size() == 3, "bilinear_sample: map must be [H, W, C]");
    check(uv->shape.size() == 2 && uv->shape[1] == 2, "bilinear_sample: uv must be [N, 2]");
    const int64_t h = map->shape[0], w = map->shape[1], c = map->shape[2];
    const int64_t n = uv->shape[0];
    auto out = make_node({n, c});
    const auto& mv = *map->data;
    const auto& uvv = *uv->data;
    auto& ov = *out->data;

    auto corners = [&](double u, double v, int64_t& x0, int64_t& y0, double& fx, double& fy) {
        // continuous coords relative to pixel centers
        const double gx = u - 0.5;
        const double gy = v - 0.5;
        x0 = static_cast<int64_t>(std::floor(gx));
        y0 = static_cast<int64_t>(std::floor(gy));
        fx = gx - static_cast<double>(x0);
        fy = gy - static_cast<double>(y0);
    };
    auto tap = [&](int64_t y, int64_t x) -> const double* {
        if (x < 0 || x >= w || y < 0 || y >= h) return nullptr;
        return mv.data() + (y * w + x) * c;
    };
    for (int64_t i = 0; i < n; ++i) {
        int64_t x0, y0;
        double fx, fy;
        corners(uvv[static_cast<size_t>(2 * i)], uvv[static_cast<size_t>(2 * i + 1)], x0, y0, fx, fy);
        const double w00 = (1 - fx) * (1 - fy), w10 = fx * (1 - fy), w01 = (1 - fx) * fy, w11 = fx * fy;
        const double* p00 = tap(y0, x0);
        const double* p10 = tap(y0, x0 + 1);
        const double* p01 = tap(y0 + 1, x0);
        const double* p11 = tap(y0 + 1, x0 + 1);
        double* dst = ov.data() + i * c;
        for (int64_t j = 0; j < c; ++j) {
            double acc = 0;
            if (p00) acc += w00 * p00[j];
            if (p10) acc += w10 * p10[j];
            if (p01) acc += w01 * p01[j];
            if (p11) acc += w11 * p11[j];
            dst[j] = acc;
        }
    }
    if (map_t.requires_grad() || uv_t.requires_grad()) {
        out->needs_grad = true;
        out->parents = {map, uv};
        out->backward_fn = [map, uv, h, w, c, n, corners](TensorNode& self) {
            const auto& mv2 = *map->data;
            const auto& uvv2 = *uv->data;
            double* gm = nullptr;
            double* guv = nullptr;
            if (map->needs_grad) {
                map->ensure_grad();
                gm = map->grad.data();
            }
            if (uv->needs_grad) {
                uv->ensure_grad();
                guv = uv->grad.data();
            }
            auto tap2 = [&](int64_t y, int64_t x) -> int64_t {
                if (x < 0 || x >= w || y < 0 || y >= h) return -1;
                return (y * w + x) * c;
            };
            for (int64_t i = 0; i < n; ++i) {
                int64_t x0, y0;
                double fx, fy;
                corners(uvv2[static_cast<size_t>(2 * i)], uvv2[static_cast<size_t>(2 * i + 1)], x0, y0, fx, fy);
                const int64_t o00 = tap2(y0, x0), o10 = tap2(y0, x0 + 1), o01 = tap2(y0 + 1, x0),
                              o11 = tap2(y0 + 1, x0 + 1);
                const double* g = self.grad.data() + i * c;
                double du = 0, dv = 0;
                for (int64_t j = 0; j < c; ++j) {
                    const double v00 = o00 >= 0 ? mv2[static_cast<size_t>(o00 + j)] : 0.0;
                    const double v10 = o10 >= 0 ? mv2[static_cast<size_t>(o10 + j)] : 0.0;
                    const double v01 = o01 >= 0 ? mv2[static_cast<size_t>(o01 + j)] : 0.0;
                    const double v11 = o11 >= 0 ? mv2[static_cast<size_t>(o11 + j)] : 0.0;
                    if (gm) {
                        if (o00 >= 0) gm[o00 + j] += g[j] * (1 - fx) * (1 - fy);
                        if (o10 >= 0) gm[o10 + j] += g[j] * fx * (1 - fy);
                        if (o01 >= 0) gm[o01 + j] += g[j] * (1 - fx) * fy;
                        if (o11 >= 0) gm[o11 + j] += g[j] * fx * fy;
                    }
                    du += g[j] * ((v10 - v00) * (1 - fy) + (v11 - v01) * fy);
                    dv += g[j] * ((v01 - v00) * (1 - fx) + (v11 - v10) * fx);
                }
                if (guv) {
                    guv[2 * i] += du;
                    guv[2 * i + 1] += dv;
                }
            }
        };
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params,
                           double h, double /*tol*/) {
    GradCheckReport report;
    Tensor loss = f();
    check(loss.numel() == 1, "grad_check: f must be scalar-valued");
    check(std::isfinite(loss.item()), "grad_check: f is not finite at the base point");
    for (const auto& p : params) const_cast<Tensor&>(p.tensor).zero_grad();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p.tensor.grad());

    for (size_t pi = 0; pi < params.size(); ++pi) {
        GradCheckEntry entry;
        entry.name = params[pi].name;
        auto& vals = const_cast<Tensor&>(params[pi].tensor).value();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double fp = f().item();
            vals[i] = orig - h;
            const double fm = f().item();
            vals[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                fail("grad_check: non-finite value when perturbing " + entry.name + "[" +
                     std::to_string(i) + "]");
            }
            const double num = (fp - fm) / (2 * h);
            const double ana = analytic[pi][i];
            const double rel = std::fabs(ana - num) / std::max({std::fabs(ana), std::fabs(num), 1e-8});
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = static_cast<int64_t>(i);
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace lara
