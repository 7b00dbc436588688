#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace afdet {

// Thrown on precondition violations (bad shapes, invalid arguments, bad config).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown on runtime failures (I/O, malformed files, incompatible checkpoints).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

// 64-bit FNV-1a, used for config hashing and RNG stream derivation.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic random source. xoshiro256** seeded through splitmix64, with
// hand-rolled distributions so streams are bit-identical across platforms and
// standard-library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  // Derives an independent substream from (seed, tag, indices...).
  static Rng stream(std::uint64_t seed, const std::string& tag,
                    std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t h = fnv1a64(tag);
    h = fnv1a64(&seed, sizeof seed, h);
    h = fnv1a64(&a, sizeof a, h);
    h = fnv1a64(&b, sizeof b, h);
    return Rng(h);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    require(lo <= hi, "uniform_int: empty range");
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_u64());  // full range
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller (one value per call; pair not cached so the
  // stream stays position-independent).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
  }

  // Beta(a, a) via the gamma ratio; shapes a = k + 0.5 with integer k are
  // composed from chi-square halves and exponentials, which covers the
  // defaults used here (a = 1.5) without a rejection loop.
  double beta_symmetric(double a) {
    const double g1 = gamma_half_int(a);
    const double g2 = gamma_half_int(a);
    const double s = g1 + g2;
    if (s <= 0.0) return 0.5;
    return g1 / s;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  // Gamma(a, 1) for a that is a multiple of 0.5: sum of Exp(1) draws plus an
  // optional Z^2/2 term.
  double gamma_half_int(double a) {
    require(a > 0, "gamma shape must be positive");
    double g = 0.0;
    double rem = a;
    while (rem >= 1.0) {
      double u = uniform();
      while (u <= 0.0) u = uniform();
      g += -std::log(u);
      rem -= 1.0;
    }
    if (rem > 0.25) {  // remaining 0.5
      const double z = normal();
      g += 0.5 * z * z;
    }
    return g;
  }

  std::uint64_t s_[4];
};

// Worker cap from AFDET_THREADS; defaults to 1 for reproducibility.
inline int worker_count() {
  if (const char* env = std::getenv("AFDET_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

// Runs fn(i) for i in [0, n). With more than one worker the index space is
// split into contiguous chunks; callers must write to disjoint outputs.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn, int workers = worker_count()) {
  if (n <= 0) return;
  if (workers <= 1 || n == 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int used = static_cast<int>(std::min<std::int64_t>(workers, n));
  std::vector<std::thread> threads;
  threads.reserve(used);
  const std::int64_t chunk = (n + used - 1) / used;
  for (int w = 0; w < used; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    threads.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : threads) t.join();
}

}  // namespace afdet
