#include "lara/core.hpp"

#include <atomic>
#include <cmath>
#include <thread>

namespace lara {

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void fail(const std::string& msg) { throw std::runtime_error(msg); }

namespace {
int g_num_threads = []() {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}();
}  // namespace

void set_num_threads(int n) { g_num_threads = n < 1 ? 1 : n; }
int num_threads() { return g_num_threads; }

void parallel_chunks(int64_t n, int64_t chunk_size, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    if (chunk_size < 1) chunk_size = 1;
    const int64_t n_chunks = (n + chunk_size - 1) / chunk_size;
    const int workers = static_cast<int>(std::min<int64_t>(g_num_threads, n_chunks));
    if (workers <= 1) {
        for (int64_t c = 0; c < n_chunks; ++c) body(c * chunk_size, std::min(n, (c + 1) * chunk_size));
        return;
    }
    std::atomic<int64_t> next{0};
    auto worker = [&]() {
        for (;;) {
            int64_t c = next.fetch_add(1);
            if (c >= n_chunks) break;
            body(c * chunk_size, std::min(n, (c + 1) * chunk_size));
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int i = 0; i < workers - 1; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
}

namespace {
inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}
}  // namespace

uint64_t RandomStream::next_u64() { return splitmix64(state_); }

double RandomStream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RandomStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RandomStream::normal() {
    // Box-Muller; draws two uniforms every call so the stream position is
    // a pure function of the call count.
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int64_t RandomStream::uniform_int(int64_t n) {
    if (n <= 0) fail("uniform_int: n must be positive");
    return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
}

RandomStream RandomStream::split(uint64_t tag) {
    uint64_t s = state_ ^ (0xA24BAED4963EE407ULL + tag * 0x9FB21C651E98DF25ULL);
    splitmix64(s);
    return RandomStream(s);
}

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 normalized(const Vec3& a) {
    double n = norm(a);
    if (n <= 0) fail("normalized: zero vector");
    return a / n;
}

}  // namespace lara
