// Compares the OpenMP kernels against the serial reference: wall time and
// bitwise equality of results.

#include <chrono>
#include <cstring>
#include <iostream>
#include <vector>

#include "finedeb/common.hpp"
#include "finedeb/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace finedeb;
using Clock = std::chrono::steady_clock;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <typename F>
double time_ms(F&& f, int reps) {
  const auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) f();
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() /
         reps;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::cout << "OpenMP threads: " << omp_get_max_threads() << "\n";
#else
  std::cout << "OpenMP: disabled\n";
#endif
  Rng rng(7);
  const int reps = 5;
  bool all_equal = true;

  for (std::size_t dim : {64u, 128u, 256u, 512u}) {
    kernels::MatDims d{dim * 4, dim, dim};
    auto a = random_vec(d.m * d.k, rng);
    auto b = random_vec(d.k * d.n, rng);
    std::vector<double> c_serial(d.m * d.n), c_par(d.m * d.n);
    const double ts = time_ms(
        [&] { kernels::serial::matmul_nn(a.data(), b.data(), c_serial.data(), d); },
        reps);
    const double tp = time_ms(
        [&] { kernels::par::matmul_nn(a.data(), b.data(), c_par.data(), d); }, reps);
    const bool eq = bitwise_equal(c_serial, c_par);
    all_equal = all_equal && eq;
    std::cout << "matmul " << d.m << "x" << d.k << "x" << d.n << "  serial "
              << ts << " ms  omp " << tp << " ms  speedup " << ts / tp
              << (eq ? "  (bitwise equal)" : "  (MISMATCH)") << "\n";
  }

  {
    const std::size_t rows = 4096, cols = 256;
    auto x = random_vec(rows * cols, rng);
    std::vector<double> ys(rows * cols), yp(rows * cols);
    const double ts = time_ms(
        [&] { kernels::serial::softmax_rows(x.data(), nullptr, ys.data(), rows, cols); },
        reps);
    const double tp = time_ms(
        [&] { kernels::par::softmax_rows(x.data(), nullptr, yp.data(), rows, cols); },
        reps);
    const bool eq = bitwise_equal(ys, yp);
    all_equal = all_equal && eq;
    std::cout << "softmax " << rows << "x" << cols << "  serial " << ts
              << " ms  omp " << tp << " ms  speedup " << ts / tp
              << (eq ? "  (bitwise equal)" : "  (MISMATCH)") << "\n";
  }

  {
    const std::size_t rows = 4096, cols = 256;
    auto x = random_vec(rows * cols, rng);
    auto gain = random_vec(cols, rng);
    auto bias = random_vec(cols, rng);
    std::vector<double> ys(rows * cols), yp(rows * cols);
    const double ts = time_ms(
        [&] {
          kernels::serial::layer_norm_rows(x.data(), gain.data(), bias.data(),
                                           ys.data(), nullptr, nullptr, rows,
                                           cols, 1e-5);
        },
        reps);
    const double tp = time_ms(
        [&] {
          kernels::par::layer_norm_rows(x.data(), gain.data(), bias.data(),
                                        yp.data(), nullptr, nullptr, rows, cols,
                                        1e-5);
        },
        reps);
    const bool eq = bitwise_equal(ys, yp);
    all_equal = all_equal && eq;
    std::cout << "layer_norm " << rows << "x" << cols << "  serial " << ts
              << " ms  omp " << tp << " ms  speedup " << ts / tp
              << (eq ? "  (bitwise equal)" : "  (MISMATCH)") << "\n";
  }

  if (!all_equal) {
    std::cerr << "kernel mismatch between serial and OpenMP paths\n";
    return 1;
  }
  return 0;
}
