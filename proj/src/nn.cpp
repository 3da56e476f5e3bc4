#include "lara/nn.hpp"

#include <atomic>
#include <cmath>
#include <map>
#include <mutex>

namespace lara {

Tensor ParamStore::create(const std::string& name, const Shape& shape) {
    Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
    register_tensor(name, t);
    return t;
}

void ParamStore::register_tensor(const std::string& name, const Tensor& t) {
    check(index_.find(name) == index_.end(), "ParamStore: duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back({name, t});
}

Tensor ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "ParamStore: unknown parameter '" + name + "'");
    return params_[it->second].tensor;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

double trunc_normal(RandomStream& rng, double sigma) {
    for (;;) {
        double x = rng.normal();
        if (std::fabs(x) <= 2.0) return x * sigma;
    }
}

void fill_trunc_normal(Tensor t, RandomStream& rng, double sigma) {
    for (auto& v : t.value()) v = trunc_normal(rng, sigma);
}

Linear::Linear(ParamStore& store, const std::string& prefix, int64_t in_dim, int64_t out_dim,
               RandomStream& rng, bool zero_weights)
    : in(in_dim), out(out_dim) {
    weight = store.create(prefix + ".weight", {in_dim, out_dim});
    bias = store.create(prefix + ".bias", {out_dim});
    if (!zero_weights) fill_trunc_normal(weight, rng, 0.02);
}

Tensor Linear::apply(const Tensor& x) const {
    const Shape& s = x.shape();
    check(s.back() == in, "Linear: input width " + std::to_string(s.back()) + " != " + std::to_string(in));
    if (s.size() == 2) return add(matmul(x, weight), bias);
    Shape flat{x.numel() / in, in};
    Tensor y = add(matmul(reshape(x, flat), weight), bias);
    Shape out_shape = s;
    out_shape.back() = out;
    return reshape(y, out_shape);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& prefix, int64_t dim) {
    gamma = store.create(prefix + ".gamma", {dim});
    beta = store.create(prefix + ".beta", {dim});
    std::fill(gamma.value().begin(), gamma.value().end(), 1.0);
}

Tensor LayerNorm::apply(const Tensor& x) const { return layer_norm_last(x, gamma, beta, eps); }

namespace {
std::atomic<int64_t> g_attention_scores{0};
}

int64_t attention_score_count() { return g_attention_scores.load(); }
void reset_attention_score_count() { g_attention_scores.store(0); }

CrossAttention::CrossAttention(ParamStore& store, const std::string& prefix, int64_t q_dim,
                               int64_t kv_dim, int64_t dim, int n_heads, RandomStream& rng)
    : model_dim(dim), heads(n_heads) {
    check(dim % n_heads == 0, "CrossAttention: head count " + std::to_string(n_heads) +
                                  " does not divide model width " + std::to_string(dim));
    q_proj = Linear(store, prefix + ".q_proj", q_dim, dim, rng);
    k_proj = Linear(store, prefix + ".k_proj", kv_dim, dim, rng);
    v_proj = Linear(store, prefix + ".v_proj", kv_dim, dim, rng);
    out_proj = Linear(store, prefix + ".out_proj", dim, dim, rng);
}

Tensor CrossAttention::apply(const Tensor& q_tokens, const Tensor& kv_tokens,
                             const std::shared_ptr<std::vector<double>>& key_mask) const {
    const Shape& qs = q_tokens.shape();
    const Shape& ks = kv_tokens.shape();
    check(qs.size() == 3 && ks.size() == 3, "CrossAttention: expected [B, T, C] tokens");
    check(qs[0] == ks[0], "CrossAttention: batch mismatch");
    const int64_t b = qs[0], tq = qs[1], tk = ks[1];
    const int64_t dh = model_dim / heads;

    auto split_heads = [&](const Tensor& x, int64_t t) {
        // [B, T, C] -> [B*heads, T, dh]
        Tensor r = reshape(x, {b, t, heads, dh});
        r = permute(r, {0, 2, 1, 3});
        return reshape(r, {b * heads, t, dh});
    };
    Tensor q = split_heads(q_proj.apply(q_tokens), tq);
    Tensor k = split_heads(k_proj.apply(kv_tokens), tk);
    Tensor v = split_heads(v_proj.apply(kv_tokens), tk);

    Tensor scores = mul_scalar(bmm(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    g_attention_scores.fetch_add(b * tq * tk);

    Tensor att;
    if (key_mask) {
        check(static_cast<int64_t>(key_mask->size()) == b * tk, "CrossAttention: key mask must be [B, Tk]");
        auto full = std::make_shared<std::vector<double>>(static_cast<size_t>(b * heads * tq * tk));
        for (int64_t i = 0; i < b; ++i)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t t = 0; t < tq; ++t)
                    for (int64_t j = 0; j < tk; ++j)
                        (*full)[static_cast<size_t>((((i * heads + h) * tq) + t) * tk + j)] =
                            (*key_mask)[static_cast<size_t>(i * tk + j)];
        att = masked_softmax_last(scores, full);
    } else {
        att = softmax_last(scores);
    }
    Tensor ctx = bmm(att, v);  // [B*heads, Tq, dh]
    ctx = reshape(ctx, {b, heads, tq, dh});
    ctx = permute(ctx, {0, 2, 1, 3});
    ctx = reshape(ctx, {b, tq, model_dim});
    return out_proj.apply(ctx);
}

Mlp::Mlp(ParamStore& store, const std::string& prefix, int64_t dim, int64_t hidden, int64_t out,
         RandomStream& rng, bool zero_output) {
    fc1 = Linear(store, prefix + ".fc1", dim, hidden, rng);
    fc2 = Linear(store, prefix + ".fc2", hidden, out, rng, /*zero_weights=*/zero_output);
}

Tensor Mlp::apply(const Tensor& x) const { return fc2.apply(gelu(fc1.apply(x))); }

namespace {

// Cached neighbor tables for cubic grids, keyed by side length.
std::mutex g_idx_mutex;
std::map<int64_t, std::shared_ptr<std::vector<int64_t>>> g_conv_idx;
std::map<int64_t, std::shared_ptr<std::vector<int64_t>>> g_upsample_idx;

std::shared_ptr<std::vector<int64_t>> conv3_neighbor_indices(int64_t w) {
    std::lock_guard<std::mutex> lock(g_idx_mutex);
    auto it = g_conv_idx.find(w);
    if (it != g_conv_idx.end()) return it->second;
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(static_cast<size_t>(w * w * w * 27));
    for (int64_t z = 0; z < w; ++z)
        for (int64_t y = 0; y < w; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t dz = -1; dz <= 1; ++dz)
                    for (int64_t dy = -1; dy <= 1; ++dy)
                        for (int64_t dx = -1; dx <= 1; ++dx) {
                            const int64_t zz = z + dz, yy = y + dy, xx = x + dx;
                            const bool in = zz >= 0 && zz < w && yy >= 0 && yy < w && xx >= 0 && xx < w;
                            idx->push_back(in ? (zz * w + yy) * w + xx : -1);
                        }
    g_conv_idx[w] = idx;
    return idx;
}

std::shared_ptr<std::vector<int64_t>> upsample2_indices(int64_t w) {
    std::lock_guard<std::mutex> lock(g_idx_mutex);
    auto it = g_upsample_idx.find(w);
    if (it != g_upsample_idx.end()) return it->second;
    auto idx = std::make_shared<std::vector<int64_t>>();
    const int64_t w2 = 2 * w;
    idx->reserve(static_cast<size_t>(w2 * w2 * w2));
    for (int64_t z = 0; z < w2; ++z)
        for (int64_t y = 0; y < w2; ++y)
            for (int64_t x = 0; x < w2; ++x) {
                const int64_t src = ((z / 2) * w + (y / 2)) * w + (x / 2);
                const int64_t slot = ((z % 2) * 2 + (y % 2)) * 2 + (x % 2);
                idx->push_back(src * 8 + slot);
            }
    g_upsample_idx[w] = idx;
    return idx;
}

}  // namespace

Conv3d::Conv3d(ParamStore& store, const std::string& prefix, int64_t in_ch, int64_t out_ch,
               RandomStream& rng)
    : in(in_ch), out(out_ch) {
    weight = store.create(prefix + ".weight", {27 * in_ch, out_ch});
    bias = store.create(prefix + ".bias", {out_ch});
    fill_trunc_normal(weight, rng, 0.02);
}

Tensor Conv3d::apply(const Tensor& x, int64_t side) const {
    check(x.shape().size() == 2 && x.shape()[0] == side * side * side && x.shape()[1] == in,
          "Conv3d: expected [" + std::to_string(side * side * side) + ", " + std::to_string(in) +
              "], got " + shape_str(x.shape()));
    auto idx = conv3_neighbor_indices(side);
    Tensor patches = take_rows(x, idx, in);                         // [V*27, Cin]
    patches = reshape(patches, {side * side * side, 27 * in});      // [V, 27*Cin]
    return add(matmul(patches, weight), bias);
}

ConvTranspose3d::ConvTranspose3d(ParamStore& store, const std::string& prefix, int64_t in_ch,
                                 int64_t out_ch, RandomStream& rng)
    : in(in_ch), out(out_ch) {
    weight = store.create(prefix + ".weight", {in_ch, 8 * out_ch});
    bias = store.create(prefix + ".bias", {out_ch});
    fill_trunc_normal(weight, rng, 0.02);
}

Tensor ConvTranspose3d::apply(const Tensor& x, int64_t side) const {
    check(x.shape().size() == 2 && x.shape()[0] == side * side * side && x.shape()[1] == in,
          "ConvTranspose3d: expected [" + std::to_string(side * side * side) + ", " +
              std::to_string(in) + "], got " + shape_str(x.shape()));
    Tensor blocks = matmul(x, weight);                              // [V, 8*Cout]
    blocks = reshape(blocks, {x.shape()[0] * 8, out});              // [V*8, Cout]
    Tensor y = take_rows(blocks, upsample2_indices(side), out);     // [(2W)^3, Cout]
    return add(y, bias);
}

void AdamW::step(std::vector<NamedTensor>& params) {
    check(cfg_.lr > 0, "AdamW: learning rate must be positive, got " + std::to_string(cfg_.lr));
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : params) {
        auto& theta = p.tensor.value();
        const auto& g = p.tensor.grad();
        auto& m = m_[p.name];
        auto& v = v_[p.name];
        if (m.size() != theta.size()) m.assign(theta.size(), 0.0);
        if (v.size() != theta.size()) v.assign(theta.size(), 0.0);
        for (size_t i = 0; i < theta.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta[i]);
        }
    }
}

double cosine_lr(int64_t step, int64_t total, double lr0, double lr_min) {
    check(lr0 > 0, "cosine_lr: lr0 must be positive");
    check(total > 0, "cosine_lr: total must be positive");
    const double s = static_cast<double>(std::min(step, total));
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(M_PI * s / static_cast<double>(total)));
}

}  // namespace lara
