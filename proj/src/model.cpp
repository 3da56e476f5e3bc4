#include "lara/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

namespace lara {

double ModelConfig::resolved_offset_radius() const {
    return offset_radius > 0 ? offset_radius : 1.5 * voxel_size();
}

void ModelConfig::validate() const {
    check(views >= 1, "config: views must be >= 1");
    check(image_size % patch == 0, "config: image size " + std::to_string(image_size) +
                                       " not divisible by patch " + std::to_string(patch));
    check(feat_res % groups == 0, "config: groups " + std::to_string(groups) +
                                      " does not divide feature resolution " + std::to_string(feat_res));
    check(embed_res % groups == 0, "config: groups " + std::to_string(groups) +
                                       " does not divide embedding resolution " + std::to_string(embed_res));
    check(embed_dim % heads == 0, "config: heads must divide embedding width");
    check(fine_dim % fine_heads == 0, "config: fine heads must divide fine width");
    check(sh_order == 0 || sh_order == 2, "config: sh_order must be 0 or 2");
    check(layers >= 1 && prims_per_voxel >= 1, "config: layers and K must be positive");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"M", views},        {"patch", patch},          {"O", enc_dim},
            {"C", embed_dim},    {"B", gauss_dim},          {"W_f", feat_res},
            {"W_e", embed_res},  {"G", groups},             {"layers", layers},
            {"heads", heads},    {"K", prims_per_voxel},    {"r", offset_radius},
            {"sh_order", sh_order}, {"mlp_ratio", mlp_ratio}, {"enc_blocks", enc_blocks},
            {"fine_dim", fine_dim}, {"fine_heads", fine_heads}, {"image_size", image_size},
            {"fine_cull_alpha", fine_cull_alpha}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.views = j.value("M", c.views);
    c.patch = j.value("patch", c.patch);
    c.enc_dim = j.value("O", c.enc_dim);
    c.embed_dim = j.value("C", c.embed_dim);
    c.gauss_dim = j.value("B", c.gauss_dim);
    c.feat_res = j.value("W_f", c.feat_res);
    c.embed_res = j.value("W_e", c.embed_res);
    c.groups = j.value("G", c.groups);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.prims_per_voxel = j.value("K", c.prims_per_voxel);
    c.offset_radius = j.value("r", c.offset_radius);
    c.sh_order = j.value("sh_order", c.sh_order);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.enc_blocks = j.value("enc_blocks", c.enc_blocks);
    c.fine_dim = j.value("fine_dim", c.fine_dim);
    c.fine_heads = j.value("fine_heads", c.fine_heads);
    c.image_size = j.value("image_size", c.image_size);
    c.fine_cull_alpha = j.value("fine_cull_alpha", c.fine_cull_alpha);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

LaraModel::LaraModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    RandomStream rng(seed);
    const int64_t tokens = static_cast<int64_t>(cfg.image_size / cfg.patch) * (cfg.image_size / cfg.patch);
    patch_embed_ = Linear(store_, "encoder.patch_embed", cfg.patch * cfg.patch * 3, cfg.enc_dim, rng);
    pos_embed_ = store_.create("encoder.pos_embed", {tokens, cfg.enc_dim});
    fill_trunc_normal(pos_embed_, rng, 0.02);
    for (int b = 0; b < cfg.enc_blocks; ++b) {
        const std::string p = "encoder.block" + std::to_string(b);
        EncoderBlock blk;
        blk.ln_attn = LayerNorm(store_, p + ".ln_attn", cfg.enc_dim);
        blk.attn = CrossAttention(store_, p + ".attn", cfg.enc_dim, cfg.enc_dim, cfg.enc_dim,
                                  std::max(1, cfg.heads / 2), rng);
        blk.ln_mlp = LayerNorm(store_, p + ".ln_mlp", cfg.enc_dim);
        blk.mlp = Mlp(store_, p + ".mlp", cfg.enc_dim, cfg.enc_dim * cfg.mlp_ratio, cfg.enc_dim, rng);
        enc_blocks_.push_back(std::move(blk));
    }
    mod_fc1_ = Linear(store_, "modulator.fc1", 6, cfg.enc_dim, rng);
    mod_fc2_ = Linear(store_, "modulator.fc2", cfg.enc_dim, 2 * cfg.enc_dim, rng, /*zero_weights=*/true);

    embedding_ = store_.create("embedding_volume", {static_cast<int64_t>(cfg.embed_res) * cfg.embed_res * cfg.embed_res,
                                                    cfg.embed_dim});
    fill_trunc_normal(embedding_, rng, 0.02);

    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l);
        GroupLayer layer;
        layer.ln_q = LayerNorm(store_, p + ".ln_q", cfg.embed_dim);
        layer.attn = CrossAttention(store_, p + ".attn", cfg.embed_dim, cfg.enc_dim, cfg.embed_dim,
                                    cfg.heads, rng);
        layer.ln_mlp = LayerNorm(store_, p + ".ln_mlp", cfg.embed_dim);
        layer.mlp = Mlp(store_, p + ".mlp", cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio, cfg.embed_dim, rng);
        layer.ln_conv = LayerNorm(store_, p + ".ln_conv", cfg.embed_dim);
        layer.conv = Conv3d(store_, p + ".conv", cfg.embed_dim, cfg.embed_dim, rng);
        layers_.push_back(std::move(layer));
    }
    upsample_ = ConvTranspose3d(store_, "upsample", cfg.embed_dim, cfg.gauss_dim, rng);

    coarse_head_ = Mlp(store_, "coarse_head", cfg.gauss_dim, 2 * cfg.gauss_dim,
                       static_cast<int64_t>(cfg.prims_per_voxel) * cfg.head_size(), rng);
    // head bias init: small initial footprints and opacity, frames near identity
    {
        auto& bias = coarse_head_.fc2.bias.value();
        for (int k = 0; k < cfg.prims_per_voxel; ++k) {
            const int64_t base = static_cast<int64_t>(k) * cfg.head_size();
            bias[static_cast<size_t>(base + 3)] = -2.0;  // opacity logit
            bias[static_cast<size_t>(base + 4)] = 1.0;   // quaternion w
            bias[static_cast<size_t>(base + 8)] = -2.0;  // scale logits
            bias[static_cast<size_t>(base + 9)] = -2.0;
        }
    }

    fine_q_ = Linear(store_, "fine.q_embed", cfg.gauss_dim, cfg.gauss_dim, rng);
    fine_attn_ = CrossAttention(store_, "fine.attn", cfg.gauss_dim, 8, cfg.fine_dim, cfg.fine_heads, rng);
    fine_ln_ = LayerNorm(store_, "fine.ln", cfg.fine_dim);
    fine_head_ = Mlp(store_, "fine.head", cfg.fine_dim, 2 * cfg.fine_dim, 3 * cfg.sh_coeffs(), rng,
                     /*zero_output=*/true);
}

void LaraModel::load_parameters(const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::map<std::string, Tensor> by_name(tensors.begin(), tensors.end());
    for (auto& p : store_.params()) {
        auto it = by_name.find(p.name);
        check(it != by_name.end(), "load_parameters: checkpoint is missing '" + p.name + "'");
        check(it->second.shape() == p.tensor.shape(),
              "load_parameters: shape mismatch for '" + p.name + "': expected " +
                  shape_str(p.tensor.shape()) + ", got " + shape_str(it->second.shape()));
        p.tensor.value() = it->second.value();
    }
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

namespace {

std::mutex g_patch_mutex;
std::map<std::tuple<int, int>, std::shared_ptr<std::vector<int64_t>>> g_patch_idx;

std::shared_ptr<std::vector<int64_t>> patch_indices(int image_size, int patch) {
    std::lock_guard<std::mutex> lock(g_patch_mutex);
    auto key = std::make_tuple(image_size, patch);
    auto it = g_patch_idx.find(key);
    if (it != g_patch_idx.end()) return it->second;
    auto idx = std::make_shared<std::vector<int64_t>>();
    const int tokens_side = image_size / patch;
    idx->reserve(static_cast<size_t>(image_size) * image_size);
    for (int ti = 0; ti < tokens_side; ++ti)
        for (int tj = 0; tj < tokens_side; ++tj)
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    idx->push_back(static_cast<int64_t>(ti * patch + py) * image_size + tj * patch + px);
    g_patch_idx[key] = idx;
    return idx;
}

}  // namespace

Tensor LaraModel::encode_images(const std::vector<Tensor>& images) const {
    check(!images.empty(), "encode_images: need at least one view");
    const int64_t hw = cfg_.image_size;
    const int64_t tokens_side = hw / cfg_.patch;
    const int64_t tokens = tokens_side * tokens_side;
    auto idx = patch_indices(cfg_.image_size, cfg_.patch);

    std::vector<Tensor> per_view;
    for (const auto& img : images) {
        check(img.shape() == Shape({hw, hw, 3}),
              "encode_images: image must be [" + std::to_string(hw) + ", " + std::to_string(hw) +
                  ", 3], got " + shape_str(img.shape()));
        Tensor pix = reshape(img, {hw * hw, 3});
        Tensor patches = take_rows(pix, idx, 3);                               // [T*p^2, 3]
        patches = reshape(patches, {tokens, static_cast<int64_t>(cfg_.patch) * cfg_.patch * 3});
        Tensor tok = add(patch_embed_.apply(patches), pos_embed_);             // [T, O]
        per_view.push_back(reshape(tok, {1, tokens, cfg_.enc_dim}));
    }
    Tensor x = per_view.size() == 1 ? per_view[0] : concat(per_view, 0);  // [M, T, O]
    for (const auto& blk : enc_blocks_) {
        Tensor q = blk.ln_attn.apply(x);
        x = add(x, blk.attn.apply(q, q));
        x = add(x, blk.mlp.apply(blk.ln_mlp.apply(x)));
    }
    return x;
}

Tensor LaraModel::plucker_tokens(const Camera& cam) const {
    const int64_t tokens_side = cfg_.image_size / cfg_.patch;
    std::vector<double> vals;
    vals.reserve(static_cast<size_t>(tokens_side * tokens_side * 6));
    for (int64_t i = 0; i < tokens_side; ++i)
        for (int64_t j = 0; j < tokens_side; ++j) {
            const double u = (static_cast<double>(j) + 0.5) * cfg_.patch;
            const double v = (static_cast<double>(i) + 0.5) * cfg_.patch;
            const PluckerRay ray = plucker_ray(cam, u, v);
            vals.insert(vals.end(), {ray.d.x, ray.d.y, ray.d.z, ray.m.x, ray.m.y, ray.m.z});
        }
    return Tensor::from_vector({tokens_side * tokens_side, 6}, std::move(vals));
}

Tensor LaraModel::modulate(const Tensor& tokens, const std::vector<Camera>& cams) const {
    const Shape& s = tokens.shape();
    check(s.size() == 3 && s[0] == static_cast<int64_t>(cams.size()),
          "modulate: tokens must be [M, T, O] with one camera per view");
    std::vector<Tensor> rays;
    for (const auto& cam : cams) rays.push_back(reshape(plucker_tokens(cam), {1, s[1], 6}));
    Tensor ray_map = rays.size() == 1 ? rays[0] : concat(rays, 0);  // [M, T, 6]
    Tensor cond = mod_fc2_.apply(gelu(mod_fc1_.apply(ray_map)));    // [M, T, 2O]
    Tensor gamma = slice(cond, 2, 0, cfg_.enc_dim);
    Tensor beta = slice(cond, 2, cfg_.enc_dim, cfg_.enc_dim);
    Tensor normed = layer_norm_last(tokens, Tensor(), Tensor());
    return add(mul(normed, add_scalar(gamma, 1.0)), beta);
}

std::vector<Tensor> LaraModel::lift_to_volumes(const Tensor& tokens, const std::vector<Camera>& cams) const {
    const Shape& s = tokens.shape();
    const int64_t tokens_side = cfg_.image_size / cfg_.patch;
    VoxelGrid grid{cfg_.feat_res, {-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}};
    std::vector<Tensor> volumes;
    for (size_t m = 0; m < cams.size(); ++m) {
        auto lift = build_lift_matrix(cams[m], grid, tokens_side, tokens_side, cfg_.patch);
        Tensor view_tokens = reshape(slice(tokens, 0, static_cast<int64_t>(m), 1), {s[1], s[2]});
        volumes.push_back(lift_features(view_tokens, lift));  // [W_f^3, O]
    }
    return volumes;
}

// ---------------------------------------------------------------------------
// group attention
// ---------------------------------------------------------------------------

namespace {
std::mutex g_group_mutex;
std::map<std::tuple<int, int, bool>, std::shared_ptr<std::vector<int64_t>>> g_group_idx;
}  // namespace

std::shared_ptr<std::vector<int64_t>> LaraModel::group_unfold_indices(int side, int groups) {
    check(groups >= 1 && side % groups == 0, "group_unfold: G=" + std::to_string(groups) +
                                                 " does not divide W=" + std::to_string(side));
    std::lock_guard<std::mutex> lock(g_group_mutex);
    auto key = std::make_tuple(side, groups, false);
    auto it = g_group_idx.find(key);
    if (it != g_group_idx.end()) return it->second;
    const int bs = side / groups;
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(static_cast<size_t>(side) * side * side);
    for (int gz = 0; gz < groups; ++gz)
        for (int gy = 0; gy < groups; ++gy)
            for (int gx = 0; gx < groups; ++gx)
                for (int lz = 0; lz < bs; ++lz)
                    for (int ly = 0; ly < bs; ++ly)
                        for (int lx = 0; lx < bs; ++lx)
                            idx->push_back((static_cast<int64_t>(gz * bs + lz) * side + (gy * bs + ly)) * side +
                                           (gx * bs + lx));
    g_group_idx[key] = idx;
    return idx;
}

std::shared_ptr<std::vector<int64_t>> LaraModel::group_fold_indices(int side, int groups) {
    auto unfold = group_unfold_indices(side, groups);
    std::lock_guard<std::mutex> lock(g_group_mutex);
    auto key = std::make_tuple(side, groups, true);
    auto it = g_group_idx.find(key);
    if (it != g_group_idx.end()) return it->second;
    auto fold = std::make_shared<std::vector<int64_t>>(unfold->size());
    for (size_t i = 0; i < unfold->size(); ++i)
        (*fold)[static_cast<size_t>((*unfold)[i])] = static_cast<int64_t>(i);
    g_group_idx[key] = fold;
    return fold;
}

Tensor LaraModel::run_group_layers(const std::vector<Tensor>& feature_volumes) {
    const int64_t g3 = static_cast<int64_t>(cfg_.groups) * cfg_.groups * cfg_.groups;
    const int64_t tq = static_cast<int64_t>(cfg_.embed_res / cfg_.groups);
    const int64_t tq3 = tq * tq * tq;
    const int64_t tf = static_cast<int64_t>(cfg_.feat_res / cfg_.groups);
    const int64_t tf3 = tf * tf * tf;

    auto unfold_e = group_unfold_indices(cfg_.embed_res, cfg_.groups);
    auto fold_e = group_fold_indices(cfg_.embed_res, cfg_.groups);
    auto unfold_f = group_unfold_indices(cfg_.feat_res, cfg_.groups);

    // spatially corresponding groups pair by index; different resolutions align
    // by normalized extent because both grids share the canonical bbox
    std::vector<Tensor> grouped_feats;
    for (const auto& vf : feature_volumes) {
        check(vf.shape() == Shape({static_cast<int64_t>(cfg_.feat_res) * cfg_.feat_res * cfg_.feat_res,
                                   cfg_.enc_dim}),
              "run_group_layers: feature volume shape " + shape_str(vf.shape()));
        grouped_feats.push_back(reshape(take_rows(vf, unfold_f, cfg_.enc_dim), {g3, tf3, cfg_.enc_dim}));
    }
    Tensor kv = grouped_feats.size() == 1 ? grouped_feats[0] : concat(grouped_feats, 1);  // [G^3, M*tf^3, O]

    Tensor v = embedding_;
    for (const auto& layer : layers_) {
        Tensor grouped = reshape(take_rows(v, unfold_e, cfg_.embed_dim), {g3, tq3, cfg_.embed_dim});
        Tensor attn_out = layer.attn.apply(layer.ln_q.apply(grouped), kv);
        grouped = add(grouped, attn_out);
        grouped = add(grouped, layer.mlp.apply(layer.ln_mlp.apply(grouped)));
        Tensor folded = take_rows(reshape(grouped, {g3 * tq3, cfg_.embed_dim}), fold_e, cfg_.embed_dim);
        v = add(folded, layer.conv.apply(layer.ln_conv.apply(folded), cfg_.embed_res));
    }
    return v;
}

GaussianVolume LaraModel::reconstruct(const std::vector<Tensor>& images, const std::vector<Camera>& cams) {
    check(!images.empty() && images.size() == cams.size(),
          "reconstruct: need matching image and camera lists (M >= 1)");
    Tensor tokens = encode_images(images);
    tokens = modulate(tokens, cams);
    std::vector<Tensor> volumes = lift_to_volumes(tokens, cams);
    Tensor v = run_group_layers(volumes);
    GaussianVolume out;
    out.data = upsample_.apply(v, cfg_.embed_res);
    out.grid = VoxelGrid{cfg_.gauss_res(), {-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}};
    ++reconstruct_count_;
    return out;
}

// ---------------------------------------------------------------------------
// decoding
// ---------------------------------------------------------------------------

CoarsePrimitives activate_primitives(const Tensor& raw, const VoxelGrid& grid, int prims_per_voxel,
                                     double offset_radius, int sh_coeffs) {
    const int64_t head = 10 + 3 * static_cast<int64_t>(sh_coeffs);
    check(raw.shape().size() == 2 && raw.shape()[1] == head,
          "activate_primitives: raw must be [N, " + std::to_string(head) + "]");
    const int64_t n = raw.shape()[0];
    check(n == grid.count() * prims_per_voxel, "activate_primitives: count mismatch");

    std::vector<double> centers(static_cast<size_t>(n) * 3);
    for (int64_t v = 0; v < grid.count(); ++v) {
        const Vec3 c = grid.center(v);
        for (int k = 0; k < prims_per_voxel; ++k) {
            const int64_t i = v * prims_per_voxel + k;
            centers[static_cast<size_t>(3 * i)] = c.x;
            centers[static_cast<size_t>(3 * i + 1)] = c.y;
            centers[static_cast<size_t>(3 * i + 2)] = c.z;
        }
    }
    CoarsePrimitives out;
    Tensor delta = add_scalar(mul_scalar(sigmoid(slice(raw, 1, 0, 3)), 2.0), -1.0);
    out.position = add(mul_scalar(delta, offset_radius), Tensor::from_vector({n, 3}, std::move(centers)));
    out.opacity = reshape(sigmoid(slice(raw, 1, 3, 1)), {n});
    out.rotation = slice(raw, 1, 4, 4);
    out.scale = mul_scalar(sigmoid(slice(raw, 1, 8, 2)), 2.0 * grid.voxel_size());
    out.sh = slice(raw, 1, 10, 3 * static_cast<int64_t>(sh_coeffs));
    return out;
}

CoarsePrimitives LaraModel::decode_coarse(const GaussianVolume& volume) const {
    check(volume.data.shape() == Shape({volume.grid.count(), cfg_.gauss_dim}),
          "decode_coarse: volume shape " + shape_str(volume.data.shape()) + " does not match config B=" +
              std::to_string(cfg_.gauss_dim));
    Tensor raw = coarse_head_.apply(volume.data);  // [V, K*head]
    raw = reshape(raw, {volume.grid.count() * cfg_.prims_per_voxel, static_cast<int64_t>(cfg_.head_size())});
    return activate_primitives(raw, volume.grid, cfg_.prims_per_voxel, cfg_.resolved_offset_radius(),
                               cfg_.sh_coeffs());
}

PointFeatureSet LaraModel::sample_point_features(const Tensor& positions,
                                                 const std::vector<Tensor>& source_images,
                                                 const std::vector<RenderResult>& coarse_renders,
                                                 const std::vector<Camera>& cams) const {
    const int64_t n = positions.shape()[0];
    const size_t m = cams.size();
    check(source_images.size() == m && coarse_renders.size() == m,
          "sample_point_features: need one source image and coarse render per input view");

    PointFeatureSet out;
    out.validity = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * m, 0.0);
    std::vector<Tensor> per_view;
    for (size_t vi = 0; vi < m; ++vi) {
        const Camera& cam = cams[vi];
        const int64_t h = cam.height, w = cam.width;
        // camera-frame coordinates
        std::vector<double> rot(9), tr(3);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) rot[static_cast<size_t>(c * 3 + r)] = cam.rot[static_cast<size_t>(r * 3 + c)];
        Tensor rot_t = Tensor::from_vector({3, 3}, rot);  // transposed: p_cam = p * R^T
        Tensor trans = Tensor::from_vector({3}, {cam.trans.x, cam.trans.y, cam.trans.z});
        Tensor pc = add(matmul(positions, rot_t), trans);  // [N, 3]
        Tensor z = slice(pc, 1, 2, 1);                     // [N, 1]
        Tensor z_safe = clamp(z, 1e-4, 1e9);
        Tensor u = add_scalar(divide(mul_scalar(slice(pc, 1, 0, 1), cam.fx), z_safe), cam.cx);
        Tensor v = add_scalar(divide(mul_scalar(slice(pc, 1, 1, 1), cam.fy), z_safe), cam.cy);
        Tensor uv = concat({u, v}, 1);  // [N, 2]

        // validity from forward values
        const auto& zv = z.value();
        const auto& uvv = uv.value();
        auto row_valid = std::make_shared<std::vector<double>>(static_cast<size_t>(n), 0.0);
        for (int64_t i = 0; i < n; ++i) {
            const bool ok = zv[static_cast<size_t>(i)] > 1e-4 && uvv[static_cast<size_t>(2 * i)] >= 0 &&
                            uvv[static_cast<size_t>(2 * i)] < w && uvv[static_cast<size_t>(2 * i + 1)] >= 0 &&
                            uvv[static_cast<size_t>(2 * i + 1)] < h;
            if (ok) {
                (*row_valid)[static_cast<size_t>(i)] = 1.0;
                (*out.validity)[static_cast<size_t>(i) * m + vi] = 1.0;
            }
        }

        const RenderResult& cr = coarse_renders[vi];
        Tensor stack = concat({source_images[vi], cr.rgb, reshape(cr.depth, {h, w, 1}),
                               reshape(cr.alpha, {h, w, 1})},
                              2);  // [H, W, 8]
        Tensor sampled = bilinear_sample(stack, uv);  // [N, 8]
        // displacement feature |D_hat - z_p| replaces the raw sampled depth
        Tensor disp = abs_(sub(slice(sampled, 1, 6, 1), z_safe));
        Tensor token = concat({slice(sampled, 1, 0, 6), disp, slice(sampled, 1, 7, 1)}, 1);
        token = rows_scale(token, row_valid);  // zero invalid projections
        per_view.push_back(reshape(token, {n, 1, 8}));
    }
    out.tokens = per_view.size() == 1 ? per_view[0] : concat(per_view, 1);  // [N, M, 8]
    return out;
}

Tensor LaraModel::decode_fine(const GaussianVolume& volume, const CoarsePrimitives& coarse,
                              const std::vector<Tensor>& source_images,
                              const std::vector<RenderResult>& coarse_renders,
                              const std::vector<Camera>& cams) const {
    const int64_t n = coarse.position.shape()[0];
    const int64_t m = static_cast<int64_t>(cams.size());
    const int64_t nsh = 3 * static_cast<int64_t>(cfg_.sh_coeffs());

    // active set: coarse opacity above the cull threshold
    auto active = std::make_shared<std::vector<int64_t>>();
    auto full_map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n), -1);
    const auto& op = coarse.opacity.value();
    for (int64_t i = 0; i < n; ++i) {
        if (op[static_cast<size_t>(i)] > cfg_.fine_cull_alpha) {
            (*full_map)[static_cast<size_t>(i)] = static_cast<int64_t>(active->size());
            active->push_back(i);
        }
    }
    if (active->empty()) return coarse.sh;
    const int64_t na = static_cast<int64_t>(active->size());

    Tensor pos_active = take_rows(coarse.position, active, 3);
    PointFeatureSet feats = sample_point_features(pos_active, source_images, coarse_renders, cams);

    // query = the owning voxel's feature vector
    auto voxel_idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(na));
    for (int64_t j = 0; j < na; ++j)
        (*voxel_idx)[static_cast<size_t>(j)] = (*active)[static_cast<size_t>(j)] / cfg_.prims_per_voxel;
    Tensor query = fine_q_.apply(take_rows(volume.data, voxel_idx, cfg_.gauss_dim));  // [Na, B]
    query = reshape(query, {na, 1, cfg_.gauss_dim});

    Tensor ctx = fine_attn_.apply(query, feats.tokens, feats.validity);  // [Na, 1, fine_dim]
    Tensor res = fine_head_.apply(fine_ln_.apply(reshape(ctx, {na, cfg_.fine_dim})));

    // fully masked primitives take zero residual
    auto any_valid = std::make_shared<std::vector<double>>(static_cast<size_t>(na), 0.0);
    for (int64_t j = 0; j < na; ++j)
        for (int64_t vi = 0; vi < m; ++vi)
            if ((*feats.validity)[static_cast<size_t>(j * m + vi)] > 0.5) {
                (*any_valid)[static_cast<size_t>(j)] = 1.0;
                break;
            }
    res = rows_scale(res, any_valid);

    Tensor res_full = take_rows(res, full_map, nsh);  // culled rows are zero
    return add(coarse.sh, res_full);
}

std::vector<Gaussian2D> primitives_to_gaussians(const CoarsePrimitives& prims, const Tensor& sh_override) {
    const int64_t n = prims.position.shape()[0];
    const Tensor& sh = sh_override.defined() ? sh_override : prims.sh;
    const int64_t nsh = sh.shape()[1];
    std::vector<Gaussian2D> out(static_cast<size_t>(n));
    const auto& pv = prims.position.value();
    const auto& qv = prims.rotation.value();
    const auto& sv = prims.scale.value();
    const auto& av = prims.opacity.value();
    const auto& shv = sh.value();
    for (int64_t i = 0; i < n; ++i) {
        Gaussian2D& g = out[static_cast<size_t>(i)];
        g.position = {pv[static_cast<size_t>(3 * i)], pv[static_cast<size_t>(3 * i + 1)],
                      pv[static_cast<size_t>(3 * i + 2)]};
        double qn = 0;
        for (int k = 0; k < 4; ++k) {
            g.rotation[static_cast<size_t>(k)] = qv[static_cast<size_t>(4 * i + k)];
            qn += g.rotation[static_cast<size_t>(k)] * g.rotation[static_cast<size_t>(k)];
        }
        qn = std::sqrt(qn);
        check(qn > 1e-12, "primitives_to_gaussians: zero quaternion");
        for (int k = 0; k < 4; ++k) g.rotation[static_cast<size_t>(k)] /= qn;
        g.scale_u = sv[static_cast<size_t>(2 * i)];
        g.scale_v = sv[static_cast<size_t>(2 * i + 1)];
        g.opacity = av[static_cast<size_t>(i)];
        for (int64_t k = 0; k < nsh && k < 27; ++k)
            g.sh[static_cast<size_t>(k)] = shv[static_cast<size_t>(nsh * i + k)];
    }
    return out;
}

}  // namespace lara
