#pragma once

#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lara {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

[[noreturn]] void fail(const std::string& msg);

inline void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

// Fixed-chunk parallel loop. Chunk c covers [c*chunk_size, min((c+1)*chunk_size, n)).
// Chunks never share output, so results are independent of the active thread count.
void parallel_chunks(int64_t n, int64_t chunk_size, const std::function<void(int64_t, int64_t)>& body);

void set_num_threads(int n);
int num_threads();

// Counter-based RNG (splitmix64). The full state is one 64-bit word, which keeps
// checkpoint resume and stream splitting trivial.
class RandomStream {
public:
    explicit RandomStream(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64();
    double uniform();                        // [0, 1)
    double uniform(double lo, double hi);
    double normal();                         // Box-Muller, no cached spare
    int64_t uniform_int(int64_t n);          // [0, n)
    RandomStream split(uint64_t tag);        // independent child stream

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }
    double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
double norm(const Vec3& a);
Vec3 normalized(const Vec3& a);

}  // namespace lara
