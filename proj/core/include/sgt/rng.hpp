#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace sgt {

// Seeded RNG with all derived draws implemented locally, so a seed pins
// every stream bit-exactly (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next() { return eng_(); }

  // [0,1), 53-bit resolution
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller with cached spare
  double normal(double mu = 0.0, double sigma = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mu + sigma * spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return mu + sigma * (r * std::cos(a));
  }

  // [0,n); modulo bias is negligible for desk-scale n
  int64_t below(int64_t n) { return int64_t(next() % uint64_t(n)); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
      std::swap(v[size_t(i)], v[size_t(below(i + 1))]);
    }
  }

  std::vector<double> normal_vec(size_t n, double sigma = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal(0.0, sigma);
    return v;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sgt
