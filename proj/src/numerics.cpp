#include "eco/numerics.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

namespace eco {

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor<double> finite_difference_grad(
    const std::function<double(const Tensor<double>&)>& f,
    const Tensor<double>& x, double h) {
  if (!(h > 0.0)) throw ConfigError("finite difference step must be positive");
  Tensor<double> grad(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double plus = f(probe);
    probe[i] = orig - h;
    const double minus = f(probe);
    probe[i] = orig;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw OracleError("non-finite function value at coordinate " +
                        std::to_string(i));
    }
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(std::span<const double> analytic,
                          std::span<const double> numeric, double floor) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("gradient lengths differ: " +
                         std::to_string(analytic.size()) + " vs " +
                         std::to_string(numeric.size()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t i = counter_++;
  return splitmix64(splitmix64(seed_) ^ (i * 0xD1B54A32D192ED03ULL));
}

double SeededRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t SeededRng::uniform_index(std::uint64_t n) {
  if (n == 0) throw ConfigError("uniform_index over an empty range");
  // Rejection keeps the result exactly uniform.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double SeededRng::gaussian(double mean, double std) {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + std * r * std::cos(2.0 * std::numbers::pi * u2);
}

SeededRng SeededRng::derive(std::uint64_t stream) const {
  return SeededRng(splitmix64(seed_ ^ splitmix64(stream + 0x5851F42D4C957F2DULL)));
}

void Hasher::update(const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    state_ ^= p[i];
    state_ *= 1099511628211ULL;
  }
}

void Hasher::update_u64(std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  update(bytes, 8);
}

void Hasher::update_string(const std::string& s) {
  update_u64(s.size());
  update(s.data(), s.size());
}

std::string hash_to_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t hash_from_hex(const std::string& hex) {
  if (hex.size() != 16 ||
      hex.find_first_not_of("0123456789abcdef") != std::string::npos) {
    throw ConfigError("malformed hash '" + hex + "'");
  }
  return std::stoull(hex, nullptr, 16);
}

void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::thread> workers;
  workers.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w) {
    const std::size_t begin = w * chunk, end = std::min(n, begin + chunk);
    workers.emplace_back([&, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::size_t default_thread_count() {
  const char* env = std::getenv("ECO_THREADS");
  if (env == nullptr) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return 1;
  return static_cast<std::size_t>(v);
}

}  // namespace eco
