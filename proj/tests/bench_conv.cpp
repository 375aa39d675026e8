// throughput probe for the conv path; not registered with ctest
#include <chrono>
#include <cstdio>

#include "sdseg/ops.hpp"

using namespace sdseg;

static double bench(int B, int C, int H, int Cout, int iters, bool backward) {
    Rng rng(1);
    Tensorf x = Tensorf::randn({B, C, H, H}, rng);
    x.set_requires_grad(true);
    Tensorf w = Tensorf::randn({Cout, C, 3, 3}, rng);
    w.set_requires_grad(true);
    Tensorf b = Tensorf::zeros({Cout});
    b.set_requires_grad(true);

    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; ++i) {
        Tensorf y = conv2d(x, w, b, 1, 1);
        if (backward) {
            Tensorf loss = mean_all(y);
            loss.backward();
            x.zero_grad();
            w.zero_grad();
            b.zero_grad();
        }
    }
    auto t1 = std::chrono::steady_clock::now();
    double secs = std::chrono::duration<double>(t1 - t0).count();
    double macs = 2.0 * B * Cout * H * H * C * 9.0 * iters;  // fwd flops
    if (backward) macs *= 3.0;
    return macs / secs / 1e9;
}

int main() {
    std::printf("fwd  B4 C32 64x64 -> 32: %.1f GFLOP/s\n", bench(4, 32, 64, 32, 30, false));
    std::printf("f+b  B4 C32 64x64 -> 32: %.1f GFLOP/s\n", bench(4, 32, 64, 32, 15, true));
    std::printf("fwd  B4 C128 8x8 -> 128: %.1f GFLOP/s\n", bench(4, 128, 8, 128, 400, false));
    std::printf("f+b  B4 C128 8x8 -> 128: %.1f GFLOP/s\n", bench(4, 128, 8, 128, 200, true));
    std::printf("fwd  B4 C64 16x16 -> 128: %.1f GFLOP/s\n", bench(4, 64, 16, 128, 300, false));
    std::printf("f+b  B4 C64 16x16 -> 128: %.1f GFLOP/s\n", bench(4, 64, 16, 128, 150, true));
    std::printf("fwd  B1 C32 64x64 -> 32: %.1f GFLOP/s\n", bench(1, 32, 64, 32, 40, false));
    return 0;
}
