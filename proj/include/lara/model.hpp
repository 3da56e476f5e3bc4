#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "lara/camera.hpp"
#include "lara/imageio.hpp"
#include "lara/nn.hpp"
#include "lara/rasterizer.hpp"
#include "lara/tensor.hpp"

namespace lara {

struct ModelConfig {
    int views = 4;            // M input views
    int patch = 8;            // encoder patch size
    int enc_dim = 48;         // O, feature-volume channels
    int enc_blocks = 1;       // encoder self-attention blocks
    int embed_dim = 48;       // C, embedding-volume channels
    int gauss_dim = 32;       // B, Gaussian-volume channels
    int feat_res = 8;         // W_f
    int embed_res = 8;        // W_e (Gaussian volume is 2*W_e)
    int groups = 4;           // G per axis
    int layers = 2;           // group attention layers
    int heads = 4;
    int prims_per_voxel = 1;  // K
    double offset_radius = 0; // r in scene units; 0 -> 1.5 voxels of the Gaussian grid
    int sh_order = 2;
    int mlp_ratio = 4;
    int fine_dim = 32;
    int fine_heads = 2;
    int image_size = 64;
    double fine_cull_alpha = 1e-3;  // coarse-opacity active-set threshold; 0 disables

    int gauss_res() const { return 2 * embed_res; }
    int sh_coeffs() const { return sh_order == 0 ? 1 : 9; }
    int head_size() const { return 10 + 3 * sh_coeffs(); }  // offset 3 + opacity + quat 4 + scale 2 + sh
    double resolved_offset_radius() const;
    double voxel_size() const { return 1.0 / gauss_res(); }

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

struct GaussianVolume {
    Tensor data;  // [W_g^3, B]
    VoxelGrid grid;
};

struct CoarsePrimitives {
    Tensor position;  // [N, 3]
    Tensor rotation;  // [N, 4] raw quaternions (normalized by the rasterizer)
    Tensor scale;     // [N, 2]
    Tensor opacity;   // [N]
    Tensor sh;        // [N, 3*nb]
};

struct PointFeatureSet {
    Tensor tokens;                                  // [N, M, 8]
    std::shared_ptr<std::vector<double>> validity;  // [N, M] 0/1 mask
};

class LaraModel {
public:
    LaraModel(const ModelConfig& cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // images: M tensors [H, W, 3] (constants). Produces the Gaussian volume.
    GaussianVolume reconstruct(const std::vector<Tensor>& images, const std::vector<Camera>& cams);

    CoarsePrimitives decode_coarse(const GaussianVolume& volume) const;

    PointFeatureSet sample_point_features(const Tensor& positions, const std::vector<Tensor>& source_images,
                                          const std::vector<RenderResult>& coarse_renders,
                                          const std::vector<Camera>& cams) const;

    // Residual SH for the active set (coarse opacity above the cull threshold);
    // culled or fully masked primitives keep the coarse SH exactly.
    Tensor decode_fine(const GaussianVolume& volume, const CoarsePrimitives& coarse,
                       const std::vector<Tensor>& source_images,
                       const std::vector<RenderResult>& coarse_renders,
                       const std::vector<Camera>& cams) const;

    // encoder stages, exposed for tests
    Tensor encode_images(const std::vector<Tensor>& images) const;          // [M, T, O]
    Tensor modulate(const Tensor& tokens, const std::vector<Camera>& cams) const;
    std::vector<Tensor> lift_to_volumes(const Tensor& tokens, const std::vector<Camera>& cams) const;
    Tensor run_group_layers(const std::vector<Tensor>& feature_volumes);    // [W_e^3, C]

    int64_t reconstruct_count() const { return reconstruct_count_; }

    void load_parameters(const std::vector<std::pair<std::string, Tensor>>& tensors);

    // group bookkeeping, exposed for tests
    static std::shared_ptr<std::vector<int64_t>> group_unfold_indices(int side, int groups);
    static std::shared_ptr<std::vector<int64_t>> group_fold_indices(int side, int groups);

    Tensor embedding_volume() const { return embedding_; }

private:
    struct EncoderBlock {
        LayerNorm ln_attn, ln_mlp;
        CrossAttention attn;
        Mlp mlp;
    };
    struct GroupLayer {
        LayerNorm ln_q, ln_mlp, ln_conv;
        CrossAttention attn;
        Mlp mlp;
        Conv3d conv;
    };

    Tensor plucker_tokens(const Camera& cam) const;  // [T, 6] constants

    ModelConfig cfg_;
    ParamStore store_;
    Linear patch_embed_;
    Tensor pos_embed_;
    std::vector<EncoderBlock> enc_blocks_;
    Linear mod_fc1_, mod_fc2_;
    Tensor embedding_;  // [W_e^3, C]
    std::vector<GroupLayer> layers_;
    ConvTranspose3d upsample_;
    Mlp coarse_head_;
    Linear fine_q_;
    CrossAttention fine_attn_;
    LayerNorm fine_ln_;
    Mlp fine_head_;
    int64_t reconstruct_count_ = 0;
};

// Per-voxel activation map shared by the decoder and the direct-fit path:
// raw [V*K, head] -> primitives with positions clamped to the offset ball.
CoarsePrimitives activate_primitives(const Tensor& raw, const VoxelGrid& grid, int prims_per_voxel,
                                     double offset_radius, int sh_coeffs);

std::vector<Gaussian2D> primitives_to_gaussians(const CoarsePrimitives& prims, const Tensor& sh_override);

}  // namespace lara
