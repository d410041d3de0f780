// Serial reference vs OpenMP kernels on 64x64 and 48^3 grids.

#include <benchmark/benchmark.h>

#include "morphldm/kernels.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace morphldm::kernels;

namespace {

GridShape grid(int dims, int64_t side) {
    GridShape g;
    g.dims = dims;
    for (int d = 0; d < dims; ++d) g.size[size_t(d)] = side;
    return g;
}

struct Inputs {
    GridShape shape;
    int64_t batch = 8;
    std::vector<float> image, disp, out, grad_out, grad_image, grad_disp;

    explicit Inputs(const benchmark::State& st) : shape(grid(int(st.range(0)), st.range(1))) {
        const int64_t v = shape.voxels();
        std::mt19937 rng(7);
        std::uniform_real_distribution<float> u(0.f, 1.f), d(-3.f, 3.f);
        image.resize(size_t(batch * v));
        disp.resize(size_t(batch * shape.dims * v));
        for (auto& x : image) x = u(rng);
        for (auto& x : disp) x = d(rng);
        out.resize(image.size());
        grad_out.assign(image.size(), 1.f);
        grad_image.resize(image.size());
        grad_disp.resize(disp.size());
    }
    void count(benchmark::State& st) const { st.SetItemsProcessed(st.iterations() * batch * shape.voxels()); }
};

template <bool Par>
void BM_warp_forward(benchmark::State& st) {
    Inputs in(st);
    for (auto _ : st) {
        if constexpr (Par)
            parallel::warp_forward(in.image.data(), in.disp.data(), in.out.data(), in.batch, 1, in.shape);
        else
            serial::warp_forward(in.image.data(), in.disp.data(), in.out.data(), in.batch, 1, in.shape);
        benchmark::DoNotOptimize(in.out.data());
    }
    in.count(st);
}

template <bool Par>
void BM_warp_backward(benchmark::State& st) {
    Inputs in(st);
    for (auto _ : st) {
        auto f = Par ? parallel::warp_backward<float> : serial::warp_backward<float>;
        f(in.image.data(), in.disp.data(), in.grad_out.data(), in.grad_image.data(), in.grad_disp.data(), in.batch, 1,
          in.shape);
        benchmark::DoNotOptimize(in.grad_disp.data());
    }
    in.count(st);
}

template <bool Par>
void BM_gradient_penalty(benchmark::State& st) {
    Inputs in(st);
    for (auto _ : st) {
        auto f = Par ? parallel::gradient_penalty_forward<float> : serial::gradient_penalty_forward<float>;
        benchmark::DoNotOptimize(f(in.disp.data(), in.batch, in.shape));
    }
    in.count(st);
}

template <bool Par>
void BM_jacobian(benchmark::State& st) {
    Inputs in(st);
    for (auto _ : st) {
        auto f = Par ? parallel::jacobian_determinant<float> : serial::jacobian_determinant<float>;
        f(in.disp.data(), in.out.data(), in.batch, in.shape);
        benchmark::DoNotOptimize(in.out.data());
    }
    in.count(st);
}

template <bool Par>
void BM_gaussian_valid(benchmark::State& st) {
    const GridShape shape = grid(int(st.range(0)), st.range(1));
    std::vector<double> img(size_t(shape.voxels())), out(img.size());
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& x : img) x = u(rng);
    std::vector<double> taps(11);
    double s = 0;
    for (int i = 0; i < 11; ++i) s += taps[size_t(i)] = std::exp(-(i - 5) * (i - 5) / 4.5);
    for (auto& t : taps) t /= s;
    for (auto _ : st) {
        auto f = Par ? parallel::gaussian_filter_valid : serial::gaussian_filter_valid;
        f(img.data(), out.data(), shape, taps.data(), 11);
        benchmark::DoNotOptimize(out.data());
    }
    st.SetItemsProcessed(st.iterations() * shape.voxels());
}

void sizes(benchmark::internal::Benchmark* b) { b->Args({2, 64})->Args({3, 48})->Unit(benchmark::kMicrosecond); }

}  // namespace

BENCHMARK(BM_warp_forward<false>)->Name("warp_forward/serial")->Apply(sizes);
BENCHMARK(BM_warp_forward<true>)->Name("warp_forward/omp")->Apply(sizes);
BENCHMARK(BM_warp_backward<false>)->Name("warp_backward/serial")->Apply(sizes);
BENCHMARK(BM_warp_backward<true>)->Name("warp_backward/omp")->Apply(sizes);
BENCHMARK(BM_gradient_penalty<false>)->Name("gradient_penalty/serial")->Apply(sizes);
BENCHMARK(BM_gradient_penalty<true>)->Name("gradient_penalty/omp")->Apply(sizes);
BENCHMARK(BM_jacobian<false>)->Name("jacobian/serial")->Apply(sizes);
BENCHMARK(BM_jacobian<true>)->Name("jacobian/omp")->Apply(sizes);
BENCHMARK(BM_gaussian_valid<false>)->Name("gaussian_valid/serial")->Apply(sizes);
BENCHMARK(BM_gaussian_valid<true>)->Name("gaussian_valid/omp")->Apply(sizes);

BENCHMARK_MAIN();
