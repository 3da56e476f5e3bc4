#include "lara/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_map>

namespace lara {

#include "mc_tables.inc"

std::vector<Camera> orbit_trajectory(const std::vector<double>& elevations_deg, int views_per_ring,
                                     double radius, const Vec3& look_at, double focal, int width,
                                     int height) {
    check(radius > 0, "orbit_trajectory: radius must be positive");
    check(views_per_ring > 0, "orbit_trajectory: views_per_ring must be positive");
    std::vector<Camera> cams;
    for (double elev : elevations_deg) {
        const double el = elev * M_PI / 180.0;
        for (int i = 0; i < views_per_ring; ++i) {
            const double az = 2.0 * M_PI * i / views_per_ring;
            const Vec3 pos = look_at + Vec3{radius * std::cos(el) * std::cos(az),
                                            radius * std::cos(el) * std::sin(az), radius * std::sin(el)};
            cams.push_back(look_at_camera(pos, look_at, {0, 0, 1}, focal, width, height));
        }
    }
    return cams;
}

TsdfVolume::TsdfVolume(int64_t res, double trunc_dist, const Vec3& lo_, const Vec3& hi_)
    : resolution(res), lo(lo_), hi(hi_), trunc(trunc_dist) {
    check(res > 1, "TsdfVolume: resolution must exceed 1");
    check(trunc > voxel_size() * 0.999, "TsdfVolume: truncation " + std::to_string(trunc) +
                                            " must exceed the voxel size " + std::to_string(voxel_size()));
    const size_t n = static_cast<size_t>(res) * res * res;
    tsdf.assign(n, 1.0f);
    weight.assign(n, 0.0f);
    rgb.assign(n * 3, 0.0f);
}

Vec3 TsdfVolume::voxel_center(int64_t x, int64_t y, int64_t z) const {
    const double s = voxel_size();
    return {lo.x + (static_cast<double>(x) + 0.5) * s, lo.y + (static_cast<double>(y) + 0.5) * s,
            lo.z + (static_cast<double>(z) + 0.5) * s};
}

void tsdf_integrate(TsdfVolume& volume, const Image& depth, const Image& rgb, const Image& alpha,
                    const Camera& cam) {
    check(depth.width == cam.width && depth.height == cam.height, "tsdf_integrate: depth size mismatch");
    const int64_t res = volume.resolution;
    parallel_chunks(res, 4, [&](int64_t z0, int64_t z1) {
        for (int64_t z = z0; z < z1; ++z)
            for (int64_t y = 0; y < res; ++y)
                for (int64_t x = 0; x < res; ++x) {
                    const Vec3 p = volume.voxel_center(x, y, z);
                    const Projection pr = project_point(p, cam);
                    if (!pr.in_front) continue;
                    const int px = static_cast<int>(std::floor(pr.u));
                    const int py = static_cast<int>(std::floor(pr.v));
                    if (px < 0 || px >= cam.width || py < 0 || py >= cam.height) continue;
                    if (alpha.at(py, px, 0) < 0.5) continue;
                    const double d = depth.at(py, px, 0);
                    if (d <= 0) continue;
                    const double sdf = d - pr.depth;
                    if (sdf <= -volume.trunc) continue;
                    const double t = std::clamp(sdf / volume.trunc, -1.0, 1.0);
                    const int64_t idx = volume.index(x, y, z);
                    const float w_old = volume.weight[static_cast<size_t>(idx)];
                    const float w_new = w_old + 1.0f;
                    volume.tsdf[static_cast<size_t>(idx)] =
                        (volume.tsdf[static_cast<size_t>(idx)] * w_old + static_cast<float>(t)) / w_new;
                    for (int c = 0; c < 3; ++c) {
                        const double cv = rgb.channels == 3 ? rgb.at(py, px, c) : rgb.at(py, px, 0);
                        volume.rgb[static_cast<size_t>(3 * idx + c)] =
                            (volume.rgb[static_cast<size_t>(3 * idx + c)] * w_old + static_cast<float>(cv)) /
                            w_new;
                    }
                    volume.weight[static_cast<size_t>(idx)] = w_new;
                }
    });
}

// ---------------------------------------------------------------------------
// marching cubes
// ---------------------------------------------------------------------------

namespace {

// corner offsets matching the lookup tables
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 0, 1}, {0, 0, 1},
                               {0, 1, 0}, {1, 1, 0}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdgeEnds[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                  {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

struct EdgeKey {
    int64_t a, b;  // corner grid indices, a < b
    bool operator==(const EdgeKey& o) const { return a == o.a && b == o.b; }
};
struct EdgeKeyHash {
    size_t operator()(const EdgeKey& k) const {
        return std::hash<int64_t>()(k.a * 0x9E3779B97F4A7C15LL + k.b);
    }
};

struct FieldView {
    const std::vector<float>* values;
    const std::vector<float>* weights;  // may be null (analytic fields)
    int64_t res;

    float value(int64_t x, int64_t y, int64_t z) const {
        return (*values)[static_cast<size_t>((z * res + y) * res + x)];
    }
    bool valid(int64_t x, int64_t y, int64_t z) const {
        if (!weights) return true;
        return (*weights)[static_cast<size_t>((z * res + y) * res + x)] > 0;
    }
};

TriangleMesh run_marching_cubes(const FieldView& field, const Vec3& lo, double cell,
                                const std::vector<float>* rgb) {
    TriangleMesh mesh;
    std::unordered_map<EdgeKey, int, EdgeKeyHash> edge_vertex;
    const int64_t res = field.res;
    const int64_t cells = res - 1;

    auto corner_index = [&](int64_t x, int64_t y, int64_t z) { return (z * res + y) * res + x; };
    auto corner_pos = [&](int64_t x, int64_t y, int64_t z) {
        return Vec3{lo.x + (static_cast<double>(x) + 0.5) * cell, lo.y + (static_cast<double>(y) + 0.5) * cell,
                    lo.z + (static_cast<double>(z) + 0.5) * cell};
    };
    auto sample_color = [&](const Vec3& p) -> Vec3 {
        if (!rgb) return {0.7, 0.7, 0.7};
        // trilinear over corner colors, weight-aware
        const double gx = std::clamp((p.x - lo.x) / cell - 0.5, 0.0, static_cast<double>(res - 1));
        const double gy = std::clamp((p.y - lo.y) / cell - 0.5, 0.0, static_cast<double>(res - 1));
        const double gz = std::clamp((p.z - lo.z) / cell - 0.5, 0.0, static_cast<double>(res - 1));
        const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(gx), res - 2);
        const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(gy), res - 2);
        const int64_t z0 = std::min<int64_t>(static_cast<int64_t>(gz), res - 2);
        const double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0),
                     fz = gz - static_cast<double>(z0);
        Vec3 acc{};
        double wacc = 0;
        for (int dz = 0; dz <= 1; ++dz)
            for (int dy = 0; dy <= 1; ++dy)
                for (int dx = 0; dx <= 1; ++dx) {
                    if (!field.valid(x0 + dx, y0 + dy, z0 + dz)) continue;
                    const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                    const int64_t ci = corner_index(x0 + dx, y0 + dy, z0 + dz);
                    acc += Vec3{(*rgb)[static_cast<size_t>(3 * ci)], (*rgb)[static_cast<size_t>(3 * ci + 1)],
                                (*rgb)[static_cast<size_t>(3 * ci + 2)]} *
                           w;
                    wacc += w;
                }
        return wacc > 1e-9 ? acc / wacc : Vec3{0.7, 0.7, 0.7};
    };

    float vals[8];
    int64_t cidx[8];
    int edge_verts[12];
    for (int64_t z = 0; z < cells; ++z)
        for (int64_t y = 0; y < cells; ++y)
            for (int64_t x = 0; x < cells; ++x) {
                bool all_valid = true;
                for (int c = 0; c < 8 && all_valid; ++c) {
                    const int64_t cx = x + kCorner[c][0], cy = y + kCorner[c][1], cz = z + kCorner[c][2];
                    all_valid = field.valid(cx, cy, cz);
                    vals[c] = field.value(cx, cy, cz);
                    cidx[c] = corner_index(cx, cy, cz);
                }
                if (!all_valid) continue;
                int cube = 0;
                for (int c = 0; c < 8; ++c)
                    if (vals[c] < 0) cube |= (1 << c);
                const int edges = kMcEdgeTable[cube];
                if (edges == 0) continue;
                for (int e = 0; e < 12; ++e) {
                    if (!(edges & (1 << e))) continue;
                    const int a = kEdgeEnds[e][0], b = kEdgeEnds[e][1];
                    EdgeKey key{std::min(cidx[a], cidx[b]), std::max(cidx[a], cidx[b])};
                    auto it = edge_vertex.find(key);
                    if (it != edge_vertex.end()) {
                        edge_verts[e] = it->second;
                        continue;
                    }
                    const double va = vals[a], vb = vals[b];
                    double t = 0.5;
                    if (std::fabs(vb - va) > 1e-12) t = std::clamp(-va / (vb - va), 0.0, 1.0);
                    const Vec3 pa = corner_pos(x + kCorner[a][0], y + kCorner[a][1], z + kCorner[a][2]);
                    const Vec3 pb = corner_pos(x + kCorner[b][0], y + kCorner[b][1], z + kCorner[b][2]);
                    const Vec3 p = pa + (pb - pa) * t;
                    const int vi = static_cast<int>(mesh.vertices.size());
                    mesh.vertices.push_back(p);
                    mesh.colors.push_back(sample_color(p));
                    edge_vertex.emplace(key, vi);
                    edge_verts[e] = vi;
                }
                for (const int* t = kMcTriTable[cube]; *t != -1; t += 3) {
                    const int i0 = edge_verts[*t], i1 = edge_verts[*(t + 1)], i2 = edge_verts[*(t + 2)];
                    if (i0 == i1 || i1 == i2 || i0 == i2) continue;  // degenerate
                    mesh.faces.push_back({i0, i1, i2});
                }
            }
    return mesh;
}

}  // namespace

TriangleMesh extract_mesh(const TsdfVolume& volume) {
    FieldView field{&volume.tsdf, &volume.weight, volume.resolution};
    return run_marching_cubes(field, volume.lo, volume.voxel_size(), &volume.rgb);
}

TriangleMesh marching_cubes(const std::vector<float>& values, int64_t resolution, const Vec3& lo,
                            const Vec3& hi) {
    check(static_cast<int64_t>(values.size()) == resolution * resolution * resolution,
          "marching_cubes: field size mismatch");
    FieldView field{&values, nullptr, resolution};
    return run_marching_cubes(field, lo, (hi.x - lo.x) / static_cast<double>(resolution), nullptr);
}

void write_ply(const std::string& path, const TriangleMesh& mesh) {
    std::ofstream f(path);
    check(f.good(), "write_ply: cannot open '" + path + "'");
    f << "ply\nformat ascii 1.0\n";
    f << "element vertex " << mesh.vertices.size() << "\n";
    f << "property float x\nproperty float y\nproperty float z\n";
    f << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    f << "element face " << mesh.faces.size() << "\n";
    f << "property list uchar int vertex_indices\nend_header\n";
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        const Vec3& v = mesh.vertices[i];
        const Vec3 c = i < mesh.colors.size() ? mesh.colors[i] : Vec3{0.7, 0.7, 0.7};
        f << v.x << " " << v.y << " " << v.z << " " << static_cast<int>(std::lround(std::clamp(c.x, 0.0, 1.0) * 255))
          << " " << static_cast<int>(std::lround(std::clamp(c.y, 0.0, 1.0) * 255)) << " "
          << static_cast<int>(std::lround(std::clamp(c.z, 0.0, 1.0) * 255)) << "\n";
    }
    for (const auto& t : mesh.faces) f << "3 " << t[0] << " " << t[1] << " " << t[2] << "\n";
    check(f.good(), "write_ply: write failed");
}

void write_obj(const std::string& path, const TriangleMesh& mesh) {
    std::ofstream f(path);
    check(f.good(), "write_obj: cannot open '" + path + "'");
    for (const auto& v : mesh.vertices) f << "v " << v.x << " " << v.y << " " << v.z << "\n";
    for (const auto& t : mesh.faces) f << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
    check(f.good(), "write_obj: write failed");
}

bool mesh_is_watertight(const TriangleMesh& mesh) {
    if (mesh.faces.empty()) return false;
    std::unordered_map<EdgeKey, int, EdgeKeyHash> edge_count;
    for (const auto& t : mesh.faces) {
        for (int e = 0; e < 3; ++e) {
            const int a = t[static_cast<size_t>(e)];
            const int b = t[static_cast<size_t>((e + 1) % 3)];
            EdgeKey key{std::min(a, b), std::max(a, b)};
            ++edge_count[key];
        }
    }
    for (const auto& [key, count] : edge_count)
        if (count != 2) return false;
    return true;
}

}  // namespace lara
