#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "lara/tensor.hpp"

namespace lara {

// Named parameter registry; names are unique slash-free dotted paths.
class ParamStore {
public:
    Tensor create(const std::string& name, const Shape& shape);
    void register_tensor(const std::string& name, const Tensor& t);
    const std::vector<NamedTensor>& params() const { return params_; }
    std::vector<NamedTensor>& params() { return params_; }
    Tensor find(const std::string& name) const;
    void zero_grad();
    int64_t total_elements() const;

private:
    std::vector<NamedTensor> params_;
    std::unordered_map<std::string, size_t> index_;
};

double trunc_normal(RandomStream& rng, double sigma);                  // resamples beyond 2 sigma
void fill_trunc_normal(Tensor t, RandomStream& rng, double sigma = 0.02);

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
    int64_t in = 0, out = 0;

    Linear() = default;
    Linear(ParamStore& store, const std::string& prefix, int64_t in_dim, int64_t out_dim,
           RandomStream& rng, bool zero_weights = false);
    Tensor apply(const Tensor& x) const;  // [..., in] -> [..., out]
};

struct LayerNorm {
    Tensor gamma, beta;
    double eps = 1e-5;

    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& prefix, int64_t dim);
    Tensor apply(const Tensor& x) const;
};

// Multi-head scaled-dot-product cross-attention. Queries come from one token
// set, keys/values from another; q [B,Tq,Cq], kv [B,Tk,Ckv] -> [B,Tq,C].
struct CrossAttention {
    Linear q_proj, k_proj, v_proj, out_proj;
    int64_t model_dim = 0;
    int heads = 0;

    CrossAttention() = default;
    CrossAttention(ParamStore& store, const std::string& prefix, int64_t q_dim, int64_t kv_dim,
                   int64_t dim, int n_heads, RandomStream& rng);
    // key_mask: optional [B, Tk] 0/1 vector; fully masked rows yield zero output.
    Tensor apply(const Tensor& q_tokens, const Tensor& kv_tokens,
                 const std::shared_ptr<std::vector<double>>& key_mask = nullptr) const;
};

// Running count of attention score entries (pairs of query and key tokens),
// used to document the grouped-attention cost model.
int64_t attention_score_count();
void reset_attention_score_count();

struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(ParamStore& store, const std::string& prefix, int64_t dim, int64_t hidden, int64_t out,
        RandomStream& rng, bool zero_output = false);
    Tensor apply(const Tensor& x) const;
};

// 3x3x3 convolution, stride 1, zero padding, on channel-last cubic volumes
// given as [W^3, C] row-major over (z, y, x).
struct Conv3d {
    Tensor weight;  // [27*Cin, Cout]
    Tensor bias;    // [Cout]
    int64_t in = 0, out = 0;

    Conv3d() = default;
    Conv3d(ParamStore& store, const std::string& prefix, int64_t in_ch, int64_t out_ch, RandomStream& rng);
    Tensor apply(const Tensor& x, int64_t side) const;
};

// Transposed 3D convolution, kernel 2, stride 2: [W^3, Cin] -> [(2W)^3, Cout].
struct ConvTranspose3d {
    Tensor weight;  // [Cin, 8*Cout]
    Tensor bias;    // [Cout]
    int64_t in = 0, out = 0;

    ConvTranspose3d() = default;
    ConvTranspose3d(ParamStore& store, const std::string& prefix, int64_t in_ch, int64_t out_ch,
                    RandomStream& rng);
    Tensor apply(const Tensor& x, int64_t side) const;
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(std::vector<NamedTensor>& params);
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    const AdamWConfig& config() const { return cfg_; }

    int64_t step_count() const { return t_; }
    // Moment buffers keyed by parameter name, for checkpointing.
    std::unordered_map<std::string, std::vector<double>>& first_moments() { return m_; }
    std::unordered_map<std::string, std::vector<double>>& second_moments() { return v_; }
    void set_step_count(int64_t t) { t_ = t; }

private:
    AdamWConfig cfg_;
    int64_t t_ = 0;
    std::unordered_map<std::string, std::vector<double>> m_, v_;
};

// lr at `step` of a single cosine decay over `total` steps: lr(0) = lr0, lr(total) = lr_min.
double cosine_lr(int64_t step, int64_t total, double lr0, double lr_min = 0.0);

}  // namespace lara
