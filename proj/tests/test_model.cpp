#include <doctest.h>

#include <cmath>

#include "lara/model.hpp"
#include "lara/pipeline.hpp"
#include "support/oracles.hpp"

using namespace lara;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.views = 2;
    cfg.patch = 8;
    cfg.enc_dim = 16;
    cfg.enc_blocks = 1;
    cfg.embed_dim = 16;
    cfg.gauss_dim = 12;
    cfg.feat_res = 4;
    cfg.embed_res = 4;
    cfg.groups = 2;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.prims_per_voxel = 1;
    cfg.sh_order = 2;
    cfg.mlp_ratio = 2;
    cfg.fine_dim = 8;
    cfg.fine_heads = 2;
    cfg.image_size = 32;
    return cfg;
}

std::vector<Tensor> random_images(RandomStream& rng, int count, int size) {
    std::vector<Tensor> images;
    for (int i = 0; i < count; ++i) {
        std::vector<double> v(static_cast<size_t>(size) * size * 3);
        for (auto& x : v) x = rng.uniform(0, 1);
        images.push_back(Tensor::from_vector({size, size, 3}, v));
    }
    return images;
}

std::vector<Camera> ring_cameras(int count, int size) {
    std::vector<Camera> cams;
    for (int i = 0; i < count; ++i) {
        const double az = 2 * M_PI * i / count + 0.3;
        const Vec3 pos{2.3 * std::cos(az), 2.3 * std::sin(az), 0.9};
        cams.push_back(look_at_camera(pos, {0, 0, 0}, {0, 0, 1}, 0.9 * size, size, size));
    }
    return cams;
}

void zero_tensor(Tensor t) { std::fill(t.value().begin(), t.value().end(), 0.0); }

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config();
    cfg.groups = 3;  // does not divide 4
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("does not divide"), std::runtime_error);
    cfg = tiny_config();
    cfg.image_size = 33;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("patch"), std::runtime_error);
    cfg = tiny_config();
    cfg.sh_order = 1;
    CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
    // json round trip
    cfg = tiny_config();
    ModelConfig back = ModelConfig::from_json(cfg.to_json());
    CHECK(back.embed_res == cfg.embed_res);
    CHECK(back.fine_cull_alpha == cfg.fine_cull_alpha);
}

TEST_CASE("encoder: determinism and token grid shape") {
    LaraModel model(tiny_config(), 9);
    RandomStream rng(1);
    auto images = random_images(rng, 2, 32);
    Tensor t1 = model.encode_images({images[0], images[1]});
    CHECK(t1.shape() == Shape({2, 16, 16}));  // 32/8 = 4 -> 16 tokens per view
    Tensor t2 = model.encode_images({images[0], images[1]});
    for (size_t i = 0; i < t1.value().size(); ++i) CHECK(t1.value()[i] == t2.value()[i]);

    // identical images give identical token grids
    Tensor t3 = model.encode_images({images[0], images[0]});
    for (int64_t t = 0; t < 16; ++t)
        for (int64_t c = 0; c < 16; ++c) CHECK(t3.at({0, t, c}) == t3.at({1, t, c}));

    // resolution not divisible by patch
    std::vector<double> bad(31 * 31 * 3, 0.5);
    CHECK_THROWS_AS(model.encode_images({Tensor::from_vector({31, 31, 3}, bad)}), std::runtime_error);
}

TEST_CASE("modulation: zero net is identity over LN; ray-invariant under motion along the ray") {
    ModelConfig cfg = tiny_config();
    LaraModel model(cfg, 11);
    RandomStream rng(2);
    auto images = random_images(rng, 1, 32);
    auto cams = ring_cameras(1, 32);
    Tensor tokens = model.encode_images({images[0]});

    // modulator output layer is zero-initialized: identity modulation
    Tensor modded = model.modulate(tokens, {cams[0]});
    Tensor plain = layer_norm_last(tokens, Tensor(), Tensor());
    for (size_t i = 0; i < modded.value().size(); ++i)
        CHECK(modded.value()[i] == doctest::Approx(plain.value()[i]).epsilon(1e-12));

    // randomize the modulation net, then move the camera along one token's ray
    auto& w = model.params();
    RandomStream wrng(3);
    fill_trunc_normal(w.find("modulator.fc2.weight"), wrng, 0.05);
    const int64_t token = 5;  // row 1, col 1 of the 4x4 grid
    const double u = (1 + 0.5) * 8, v = (1 + 0.5) * 8;
    PluckerRay ray = plucker_ray(cams[0], u, v);
    Camera moved = cams[0];
    // translate the camera center by t along the token ray (same rotation)
    const Vec3 new_center = cams[0].center() + ray.d * 0.4;
    moved.trans = moved.rotate_to_camera(-new_center);
    Tensor m1 = model.modulate(tokens, {cams[0]});
    Tensor m2 = model.modulate(tokens, {moved});
    for (int64_t c = 0; c < 16; ++c)
        CHECK(m1.at({0, token, c}) == doctest::Approx(m2.at({0, token, c})).epsilon(1e-9));
}

TEST_CASE("group unfold/fold: block arithmetic and exact inverse") {
    auto idx = LaraModel::group_unfold_indices(4, 2);
    CHECK(idx->size() == 64);
    // first group must be the contiguous 2x2x2 block at the origin corner
    std::vector<int64_t> first(idx->begin(), idx->begin() + 8);
    std::vector<int64_t> expect{0, 1, 4, 5, 16, 17, 20, 21};
    CHECK(first == expect);

    auto fold = LaraModel::group_fold_indices(4, 2);
    RandomStream rng(5);
    std::vector<double> v(64 * 3);
    for (auto& x : v) x = rng.normal();
    Tensor vol = Tensor::from_vector({64, 3}, v);
    Tensor round = take_rows(take_rows(vol, idx, 3), fold, 3);
    for (size_t i = 0; i < v.size(); ++i) CHECK(round.value()[i] == v[i]);

    CHECK_THROWS_WITH_AS(LaraModel::group_unfold_indices(4, 3), doctest::Contains("divide"),
                         std::runtime_error);

    // paper-scale arithmetic: W_e=32, G=16 -> 4096 groups of 8 tokens
    auto big = LaraModel::group_unfold_indices(32, 16);
    CHECK(big->size() == 32 * 32 * 32);
    // tokens 0..7 belong to the first 2x2x2 block
    for (int i = 0; i < 8; ++i) CHECK((*big)[static_cast<size_t>(i)] < 2 + 32 * 2 + 32 * 32 * 2);
    // W_f=16, G=16 -> one token per group per view
    auto feat = LaraModel::group_unfold_indices(16, 16);
    CHECK(feat->size() == 16 * 16 * 16);
}

TEST_CASE("group attention with zero sublayer weights is the identity on the embedding") {
    ModelConfig cfg = tiny_config();
    LaraModel model(cfg, 13);
    auto& store = model.params();
    for (const std::string stem : {"layer0.attn.q_proj", "layer0.attn.k_proj", "layer0.attn.v_proj",
                                   "layer0.attn.out_proj", "layer0.mlp.fc1", "layer0.mlp.fc2",
                                   "layer0.conv"}) {
        zero_tensor(store.find(stem + ".weight"));
        zero_tensor(store.find(stem + ".bias"));
    }
    RandomStream rng(7);
    std::vector<Tensor> feats;
    for (int m = 0; m < 2; ++m) {
        std::vector<double> v(static_cast<size_t>(4 * 4 * 4) * 16);
        for (auto& x : v) x = rng.normal();
        feats.push_back(Tensor::from_vector({64, 16}, v));
    }
    Tensor out = model.run_group_layers(feats);
    const Tensor embed = model.embedding_volume();
    for (size_t i = 0; i < embed.value().size(); ++i) CHECK(out.value()[i] == embed.value()[i]);
}

TEST_CASE("attention score accounting matches the grouped cost model") {
    ModelConfig cfg = tiny_config();
    LaraModel model(cfg, 17);
    RandomStream rng(19);
    std::vector<Tensor> feats;
    for (int m = 0; m < 3; ++m) {
        std::vector<double> v(static_cast<size_t>(64) * 16);
        for (auto& x : v) x = rng.normal();
        feats.push_back(Tensor::from_vector({64, 16}, v));
    }
    reset_attention_score_count();
    model.run_group_layers(feats);
    const int64_t g3 = 8;           // 2^3 groups
    const int64_t tq3 = 8;          // (4/2)^3 embedding tokens per group
    const int64_t tf3 = 8;          // (4/2)^3 feature tokens per group per view
    const int64_t expected = cfg.layers * g3 * tq3 * (3 * tf3);
    CHECK(attention_score_count() == expected);
}

TEST_CASE("reconstruct: shape, determinism, view-order invariance") {
    ModelConfig cfg = tiny_config();
    LaraModel model(cfg, 23);
    RandomStream rng(29);
    auto images = random_images(rng, 2, 32);
    auto cams = ring_cameras(2, 32);

    GaussianVolume v1 = model.reconstruct({images[0], images[1]}, {cams[0], cams[1]});
    CHECK(v1.data.shape() == Shape({8 * 8 * 8, 12}));
    CHECK(v1.grid.side == 8);
    GaussianVolume v2 = model.reconstruct({images[0], images[1]}, {cams[0], cams[1]});
    for (size_t i = 0; i < v1.data.value().size(); ++i)
        CHECK(v1.data.value()[i] == v2.data.value()[i]);

    GaussianVolume v3 = model.reconstruct({images[1], images[0]}, {cams[1], cams[0]});
    double worst = 0;
    for (size_t i = 0; i < v1.data.value().size(); ++i)
        worst = std::max(worst, std::fabs(v1.data.value()[i] - v3.data.value()[i]));
    CHECK(worst < 1e-6);
    CHECK(model.reconstruct_count() == 3);
}

TEST_CASE("decode_coarse activations: center at zero logits, ball boundary at saturation") {
    VoxelGrid grid{2, {-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}};
    const int64_t n = 8;
    const double r = 0.1;
    std::vector<double> raw(static_cast<size_t>(n) * 37, 0.0);
    for (int64_t i = 0; i < n; ++i) raw[static_cast<size_t>(i * 37 + 4)] = 1.0;  // unit quaternion w
    Tensor rt = Tensor::from_vector({n, 37}, raw);
    CoarsePrimitives prims = activate_primitives(rt, grid, 1, r, 9);
    for (int64_t i = 0; i < n; ++i) {
        const Vec3 c = grid.center(i);
        CHECK(prims.position.at({i, 0}) == doctest::Approx(c.x));  // zero logits keep the center
        CHECK(prims.opacity.value()[static_cast<size_t>(i)] == doctest::Approx(0.5));
        CHECK(prims.scale.at({i, 0}) == doctest::Approx(grid.voxel_size()));  // 0.5 * s_max
    }

    // saturated offsets reach the radius-r ball boundary
    std::vector<double> sat(static_cast<size_t>(n) * 37, 0.0);
    for (int64_t i = 0; i < n; ++i) {
        sat[static_cast<size_t>(i * 37)] = 50.0;    // +x
        sat[static_cast<size_t>(i * 37 + 1)] = -50.0;  // -y
        sat[static_cast<size_t>(i * 37 + 4)] = 1.0;
    }
    CoarsePrimitives sp = activate_primitives(Tensor::from_vector({n, 37}, sat), grid, 1, r, 9);
    CHECK(sp.position.at({0, 0}) == doctest::Approx(grid.center(0).x + r).epsilon(1e-9));
    CHECK(sp.position.at({0, 1}) == doctest::Approx(grid.center(0).y - r).epsilon(1e-9));

    // every decoded position stays within r of its voxel center
    RandomStream rng(31);
    std::vector<double> rnd(static_cast<size_t>(n) * 37);
    for (auto& x : rnd) x = rng.normal() * 3;
    for (int64_t i = 0; i < n; ++i) rnd[static_cast<size_t>(i * 37 + 4)] += 2.0;
    CoarsePrimitives rp = activate_primitives(Tensor::from_vector({n, 37}, rnd), grid, 1, r, 9);
    for (int64_t i = 0; i < n; ++i) {
        const Vec3 c = grid.center(i);
        const Vec3 p{rp.position.at({i, 0}), rp.position.at({i, 1}), rp.position.at({i, 2})};
        CHECK(norm(p - c) <= r * std::sqrt(3.0) + 1e-12);
        for (int k = 0; k < 3; ++k) CHECK(std::fabs(p[k] - c[k]) <= r + 1e-12);
    }
}

TEST_CASE("decode_coarse is voxel-local: permuting voxels permutes outputs") {
    ModelConfig cfg = tiny_config();
    LaraModel model(cfg, 37);
    RandomStream rng(41);
    GaussianVolume vol;
    vol.grid = VoxelGrid{8, {-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}};
    std::vector<double> data(static_cast<size_t>(512) * 12);
    for (auto& x : data) x = rng.normal();
    vol.data = Tensor::from_vector({512, 12}, data);
    CoarsePrimitives a = model.decode_coarse(vol);

    // reversed voxel order
    std::vector<double> rev(data.size());
    for (int64_t v = 0; v < 512; ++v)
        for (int64_t c = 0; c < 12; ++c)
            rev[static_cast<size_t>(v * 12 + c)] = data[static_cast<size_t>((511 - v) * 12 + c)];
    GaussianVolume vol2 = vol;
    vol2.data = Tensor::from_vector({512, 12}, rev);
    CoarsePrimitives b = model.decode_coarse(vol2);
    for (int64_t v = 0; v < 512; ++v)
        for (int64_t c = 0; c < 27; ++c)
            CHECK(a.sh.at({v, c}) == b.sh.at({511 - v, c}));
}

TEST_CASE("fine decode: zero residual at init, masked fallback, culling identity") {
    ModelConfig cfg = tiny_config();
    cfg.fine_cull_alpha = 1e-3;
    LaraModel model(cfg, 43);
    RandomStream rng(47);

    GaussianVolume vol;
    vol.grid = VoxelGrid{8, {-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}};
    std::vector<double> data(static_cast<size_t>(512) * 12);
    for (auto& x : data) x = rng.normal();
    vol.data = Tensor::from_vector({512, 12}, data);
    CoarsePrimitives coarse = model.decode_coarse(vol);

    auto cams = ring_cameras(2, 32);
    auto images = random_images(rng, 2, 32);
    RasterizeConfig rcfg = default_raster_config(cfg);
    std::vector<RenderResult> renders;
    for (const auto& cam : cams)
        renders.push_back(rasterize(coarse.position, coarse.rotation, coarse.scale, coarse.opacity,
                                    coarse.sh, cam, rcfg));

    // zero-initialized fine output layer: sh_fine == sh_coarse exactly
    Tensor fine = model.decode_fine(vol, coarse, images, renders, cams);
    for (size_t i = 0; i < fine.value().size(); ++i) CHECK(fine.value()[i] == coarse.sh.value()[i]);

    // randomize the output layer; culling off must agree with culling on
    fill_trunc_normal(model.params().find("fine.head.fc2.weight"), rng, 0.1);
    Tensor with_cull = model.decode_fine(vol, coarse, images, renders, cams);

    ModelConfig cfg2 = cfg;
    cfg2.fine_cull_alpha = 0.0;  // keep everything
    LaraModel model2(cfg2, 43);
    // mirror weights
    std::vector<std::pair<std::string, Tensor>> params;
    for (const auto& p : model.params().params()) params.emplace_back(p.name, p.tensor);
    model2.load_parameters(params);
    Tensor no_cull = model2.decode_fine(vol, coarse, images, renders, cams);
    const auto& op = coarse.opacity.value();
    for (int64_t i = 0; i < 512; ++i) {
        if (op[static_cast<size_t>(i)] <= cfg.fine_cull_alpha) continue;  // culled rows keep coarse sh
        for (int64_t c = 0; c < 27; ++c)
            CHECK(with_cull.at({i, c}) == doctest::Approx(no_cull.at({i, c})).epsilon(1e-12));
    }

    // cameras looking away: all projections invalid -> zero residual
    std::vector<Camera> away;
    for (const auto& cam : cams) {
        const Vec3 c = cam.center();
        away.push_back(look_at_camera(c, c * 2.0, {0, 0, 1}, cam.fx, cam.width, cam.height));
    }
    std::vector<RenderResult> away_renders;
    for (const auto& cam : away)
        away_renders.push_back(rasterize(coarse.position, coarse.rotation, coarse.scale, coarse.opacity,
                                         coarse.sh, cam, rcfg));
    Tensor masked = model.decode_fine(vol, coarse, images, away_renders, away);
    for (size_t i = 0; i < masked.value().size(); ++i) CHECK(masked.value()[i] == coarse.sh.value()[i]);
}

TEST_CASE("fine-render loss gradient w.r.t. coarse sh covers direct and residual paths") {
    ModelConfig cfg = tiny_config();
    cfg.embed_res = 2;  // Gaussian grid 4^3 = 64 primitives
    cfg.feat_res = 2;
    cfg.groups = 1;
    cfg.image_size = 16;
    cfg.patch = 8;
    LaraModel model(cfg, 53);
    RandomStream rng(59);
    fill_trunc_normal(model.params().find("fine.head.fc2.weight"), rng, 0.1);

    GaussianVolume vol;
    vol.grid = VoxelGrid{4, {-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}};
    std::vector<double> data(static_cast<size_t>(64) * 12);
    for (auto& x : data) x = rng.normal();
    vol.data = Tensor::from_vector({64, 12}, data);

    // leaf splat parameters; sh_coarse is the checked input
    const int64_t n = 64;
    std::vector<double> pv, qv, sv, av, shv;
    for (int64_t v = 0; v < n; ++v) {
        const Vec3 c = vol.grid.center(v);
        pv.insert(pv.end(), {c.x, c.y, c.z});
        qv.insert(qv.end(), {1.0 + 0.1 * rng.normal(), 0.1 * rng.normal(), 0.1 * rng.normal(),
                             0.1 * rng.normal()});
        sv.insert(sv.end(), {0.12, 0.12});
        av.push_back(rng.uniform(0.2, 0.7));
        for (int c2 = 0; c2 < 3; ++c2) {
            shv.push_back(rng.uniform(-0.2, 0.2));
            for (int l = 1; l < 9; ++l) shv.push_back(rng.uniform(-0.03, 0.03));
        }
    }
    Tensor p = Tensor::from_vector({n, 3}, pv);
    Tensor q = Tensor::from_vector({n, 4}, qv);
    Tensor s = Tensor::from_vector({n, 2}, sv);
    Tensor a = Tensor::from_vector({n}, av);
    Tensor sh_coarse = Tensor::from_vector({n, 27}, shv, true);

    auto cams = ring_cameras(2, 16);
    auto images = random_images(rng, 2, 16);
    RasterizeConfig rcfg = default_raster_config(cfg);
    rcfg.g_cutoff = 0;
    rcfg.stop_transmittance = 0;
    std::vector<double> tv(16 * 16 * 3);
    for (auto& x : tv) x = rng.uniform(0, 1);
    Tensor target = Tensor::from_vector({16, 16, 3}, tv);

    auto f = [&]() {
        CoarsePrimitives prims;
        prims.position = p;
        prims.rotation = q;
        prims.scale = s;
        prims.opacity = a;
        prims.sh = sh_coarse;
        std::vector<RenderResult> renders;
        for (const auto& cam : cams)
            renders.push_back(rasterize(prims.position, prims.rotation, prims.scale, prims.opacity,
                                        prims.sh, cam, rcfg));
        Tensor sh_fine = model.decode_fine(vol, prims, images, renders, cams);
        RenderResult fine = rasterize(prims.position, prims.rotation, prims.scale, prims.opacity, sh_fine,
                                      cams[0], rcfg);
        return mse_loss(fine.rgb, target);
    };
    auto report = grad_check(f, {{"sh_coarse", sh_coarse}}, 1e-4);
    CHECK(report.max_rel_err < 1e-3);
}
