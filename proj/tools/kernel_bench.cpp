// Compares the serial reference kernels against the OpenMP builds: checks
// bit-identical outputs, then reports GFLOP/s for each at training-relevant
// shapes.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "ovlw/kernels.hpp"
#include "ovlw/rng.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<double> random_vec(size_t n, ovlw::Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

struct Shape {
    int64_t m, k, n;
};

template <typename F>
double time_best_of(F&& fn, int reps) {
    double best = 1e30;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = Clock::now();
        fn();
        best = std::min(best, seconds_since(t0));
    }
    return best;
}

// kind: 0=nn (out m x n), 1=nt (B is n x k, out m x n), 2=tn (out k x n).
void bench_matmul(const char* name, int kind,
                  void (*serial_fn)(const double*, const double*, double*, int64_t, int64_t, int64_t),
                  void (*par_fn)(const double*, const double*, double*, int64_t, int64_t, int64_t),
                  const Shape& s, ovlw::Rng& rng) {
    const auto a = random_vec(static_cast<size_t>(s.m) * s.k, rng);
    const size_t b_elems = kind == 2 ? static_cast<size_t>(s.m) * s.n : static_cast<size_t>(s.k) * s.n;
    const auto b = random_vec(b_elems, rng);
    const int64_t out_rows = kind == 2 ? s.k : s.m;
    std::vector<double> c_ser(static_cast<size_t>(out_rows) * s.n), c_par(c_ser.size());

    serial_fn(a.data(), b.data(), c_ser.data(), s.m, s.k, s.n);
    par_fn(a.data(), b.data(), c_par.data(), s.m, s.k, s.n);
    const bool identical = std::memcmp(c_ser.data(), c_par.data(), c_ser.size() * sizeof(double)) == 0;

    const double flops = 2.0 * s.m * s.k * s.n;
    const double t_ser = time_best_of([&] { serial_fn(a.data(), b.data(), c_ser.data(), s.m, s.k, s.n); }, 5);
    const double t_par = time_best_of([&] { par_fn(a.data(), b.data(), c_par.data(), s.m, s.k, s.n); }, 5);

    std::printf("%-10s m=%-5lld k=%-5lld n=%-5lld  serial %7.2f GF/s  omp %7.2f GF/s  speedup %.2fx  %s\n",
                name, static_cast<long long>(s.m), static_cast<long long>(s.k), static_cast<long long>(s.n),
                flops / t_ser * 1e-9, flops / t_par * 1e-9, t_ser / t_par,
                identical ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
    int64_t scale = 1;
    if (argc > 1) scale = std::max<int64_t>(1, std::atoll(argv[1]));

#ifdef _OPENMP
    std::printf("OpenMP enabled, max threads = %d\n", omp_get_max_threads());
#else
    std::printf("OpenMP not enabled in this build\n");
#endif

    ovlw::Rng rng(1234);
    const std::vector<Shape> shapes = {
        {256, 256, 256},
        {256, 256, 512 * scale},
        {1024, 256, 256},
        {128, 768, 96},
        {1600, 192, 192},
    };
    for (const auto& s : shapes) {
        bench_matmul("matmul_nn", 0, ovlw::kern::serial::matmul_nn, ovlw::kern::matmul_nn, s, rng);
        bench_matmul("matmul_nt", 1, ovlw::kern::serial::matmul_nt, ovlw::kern::matmul_nt, s, rng);
        bench_matmul("matmul_tn", 2, ovlw::kern::serial::matmul_tn, ovlw::kern::matmul_tn, s, rng);
    }

    // softmax / layernorm bandwidth check
    {
        const int64_t rows = 4096, n = 256;
        ovlw::Rng r2(99);
        const auto x = random_vec(static_cast<size_t>(rows) * n, r2);
        std::vector<double> y(x.size());
        const double t = time_best_of(
            [&] { ovlw::kern::softmax_rows(x.data(), nullptr, 1, y.data(), rows, n); }, 5);
        std::printf("softmax_rows rows=%lld n=%lld  %7.2f Melem/s\n", static_cast<long long>(rows),
                    static_cast<long long>(n), rows * n / t * 1e-6);
    }
    return 0;
}
