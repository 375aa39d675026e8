#include "sdseg/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace sdseg {

namespace kernels {

namespace {
std::atomic<int> g_threads{0};
}

void set_threads(int n) { g_threads.store(n > 0 ? n : 0); }

int threads() {
    int t = g_threads.load();
    if (t > 0) return t;
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// Serial kernel: each C element is produced by one fixed-order k loop, so
// results never depend on how callers split work across threads.
template <class R>
void gemm_acc(const R* a, const R* b, R* c, int m, int k, int n) {
    constexpr int MR = 4;
    const int NC = 4096 / static_cast<int>(sizeof(R));
    for (int m0 = 0; m0 < m; m0 += MR) {
        const int mr = std::min(MR, m - m0);
        for (int n0 = 0; n0 < n; n0 += NC) {
            const int nc = std::min(NC, n - n0);
            if (mr == MR) {
                R* c0 = c + static_cast<std::int64_t>(m0 + 0) * n + n0;
                R* c1 = c + static_cast<std::int64_t>(m0 + 1) * n + n0;
                R* c2 = c + static_cast<std::int64_t>(m0 + 2) * n + n0;
                R* c3 = c + static_cast<std::int64_t>(m0 + 3) * n + n0;
                for (int kk = 0; kk < k; ++kk) {
                    const R a0 = a[static_cast<std::int64_t>(m0 + 0) * k + kk];
                    const R a1 = a[static_cast<std::int64_t>(m0 + 1) * k + kk];
                    const R a2 = a[static_cast<std::int64_t>(m0 + 2) * k + kk];
                    const R a3 = a[static_cast<std::int64_t>(m0 + 3) * k + kk];
                    const R* bp = b + static_cast<std::int64_t>(kk) * n + n0;
                    for (int j = 0; j < nc; ++j) {
                        const R bj = bp[j];
                        c0[j] += a0 * bj;
                        c1[j] += a1 * bj;
                        c2[j] += a2 * bj;
                        c3[j] += a3 * bj;
                    }
                }
            } else {
                for (int mi = 0; mi < mr; ++mi) {
                    R* cr = c + static_cast<std::int64_t>(m0 + mi) * n + n0;
                    for (int kk = 0; kk < k; ++kk) {
                        const R av = a[static_cast<std::int64_t>(m0 + mi) * k + kk];
                        const R* bp = b + static_cast<std::int64_t>(kk) * n + n0;
                        for (int j = 0; j < nc; ++j) cr[j] += av * bp[j];
                    }
                }
            }
        }
    }
}

// C[M,Q] += A[M,N] * B[Q,N]^T, contraction over the shared last dim. Fixed
// 8-lane accumulators per output element keep results thread-count invariant.
template <class R>
void gemm_abt(const R* a, const R* b, R* c, int m, int q, int n);

#if defined(__AVX2__) && defined(__FMA__)
namespace {

inline float hsum8(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    __m128 s = _mm_add_ps(lo, hi);
    s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
    return _mm_cvtss_f32(s);
}

// panel [k x 16] contiguous in k for prefetch-friendly streaming
void pack_panel16(const float* b, int n, int k, int n0, float* bp) {
    for (int kk = 0; kk < k; ++kk) {
        const float* src = b + static_cast<std::int64_t>(kk) * n + n0;
        _mm256_storeu_ps(bp, _mm256_loadu_ps(src));
        _mm256_storeu_ps(bp + 8, _mm256_loadu_ps(src + 8));
        bp += 16;
    }
}

void micro6x16(const float* a, int lda, const float* bp, int k, float* c, int ldc) {
    __m256 acc[6][2];
    for (int i = 0; i < 6; ++i) {
        acc[i][0] = _mm256_loadu_ps(c + static_cast<std::int64_t>(i) * ldc);
        acc[i][1] = _mm256_loadu_ps(c + static_cast<std::int64_t>(i) * ldc + 8);
    }
    for (int kk = 0; kk < k; ++kk) {
        const __m256 b0 = _mm256_loadu_ps(bp);
        const __m256 b1 = _mm256_loadu_ps(bp + 8);
        bp += 16;
        for (int i = 0; i < 6; ++i) {
            const __m256 av = _mm256_set1_ps(a[static_cast<std::int64_t>(i) * lda + kk]);
            acc[i][0] = _mm256_fmadd_ps(av, b0, acc[i][0]);
            acc[i][1] = _mm256_fmadd_ps(av, b1, acc[i][1]);
        }
    }
    for (int i = 0; i < 6; ++i) {
        _mm256_storeu_ps(c + static_cast<std::int64_t>(i) * ldc, acc[i][0]);
        _mm256_storeu_ps(c + static_cast<std::int64_t>(i) * ldc + 8, acc[i][1]);
    }
}

void micro1x16(const float* a, const float* bp, int k, float* c) {
    __m256 a0 = _mm256_loadu_ps(c);
    __m256 a1 = _mm256_loadu_ps(c + 8);
    for (int kk = 0; kk < k; ++kk) {
        const __m256 av = _mm256_set1_ps(a[kk]);
        a0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp), a0);
        a1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp + 8), a1);
        bp += 16;
    }
    _mm256_storeu_ps(c, a0);
    _mm256_storeu_ps(c + 8, a1);
}

thread_local std::vector<float> g_packbuf;

// C[:, n0:n0+nb] += A * B[:, n0:n0+nb]; callers may split n across threads
void gemm_acc_f32_block(const float* a, const float* b, float* c, int m, int k, int n,
                        int n0, int nb) {
    const int nb16 = nb & ~15;
    if (nb16 > 0) {
        g_packbuf.resize(static_cast<size_t>(k) * 16);
        float* bp = g_packbuf.data();
        for (int j = 0; j < nb16; j += 16) {
            pack_panel16(b, n, k, n0 + j, bp);
            int m0 = 0;
            for (; m0 + 6 <= m; m0 += 6)
                micro6x16(a + static_cast<std::int64_t>(m0) * k, k, bp, k,
                          c + static_cast<std::int64_t>(m0) * n + n0 + j, n);
            for (; m0 < m; ++m0)
                micro1x16(a + static_cast<std::int64_t>(m0) * k, bp, k,
                          c + static_cast<std::int64_t>(m0) * n + n0 + j);
        }
    }
    // scalar tail columns
    for (int j = nb16; j < nb; ++j) {
        const int col = n0 + j;
        for (int m0 = 0; m0 < m; ++m0) {
            float s = c[static_cast<std::int64_t>(m0) * n + col];
            const float* ar = a + static_cast<std::int64_t>(m0) * k;
            for (int kk = 0; kk < k; ++kk) s += ar[kk] * b[static_cast<std::int64_t>(kk) * n + col];
            c[static_cast<std::int64_t>(m0) * n + col] = s;
        }
    }
}

void gemm_acc_f32(const float* a, const float* b, float* c, int m, int k, int n) {
    constexpr int NB = 256;
    for (int n0 = 0; n0 < n; n0 += NB)
        gemm_acc_f32_block(a, b, c, m, k, n, n0, std::min(NB, n - n0));
}

// 4x2 tile of dot products over one column chunk, 8-wide accumulation
void gemm_abt_f32_chunk(const float* a, const float* b, float* c, int m, int q, std::int64_t ldn,
                        int n) {
    const int nv = n & ~7;
    int i0 = 0;
    for (; i0 + 4 <= m; i0 += 4) {
        const float* a0 = a + static_cast<std::int64_t>(i0) * ldn;
        const float* a1 = a0 + ldn;
        const float* a2 = a1 + ldn;
        const float* a3 = a2 + ldn;
        int j0 = 0;
        for (; j0 + 2 <= q; j0 += 2) {
            const float* b0 = b + static_cast<std::int64_t>(j0) * ldn;
            const float* b1 = b0 + ldn;
            __m256 s00 = _mm256_setzero_ps(), s01 = _mm256_setzero_ps();
            __m256 s10 = _mm256_setzero_ps(), s11 = _mm256_setzero_ps();
            __m256 s20 = _mm256_setzero_ps(), s21 = _mm256_setzero_ps();
            __m256 s30 = _mm256_setzero_ps(), s31 = _mm256_setzero_ps();
            for (int t = 0; t < nv; t += 8) {
                const __m256 vb0 = _mm256_loadu_ps(b0 + t);
                const __m256 vb1 = _mm256_loadu_ps(b1 + t);
                const __m256 va0 = _mm256_loadu_ps(a0 + t);
                const __m256 va1 = _mm256_loadu_ps(a1 + t);
                const __m256 va2 = _mm256_loadu_ps(a2 + t);
                const __m256 va3 = _mm256_loadu_ps(a3 + t);
                s00 = _mm256_fmadd_ps(va0, vb0, s00);
                s01 = _mm256_fmadd_ps(va0, vb1, s01);
                s10 = _mm256_fmadd_ps(va1, vb0, s10);
                s11 = _mm256_fmadd_ps(va1, vb1, s11);
                s20 = _mm256_fmadd_ps(va2, vb0, s20);
                s21 = _mm256_fmadd_ps(va2, vb1, s21);
                s30 = _mm256_fmadd_ps(va3, vb0, s30);
                s31 = _mm256_fmadd_ps(va3, vb1, s31);
            }
            float r[8] = {hsum8(s00), hsum8(s01), hsum8(s10), hsum8(s11),
                          hsum8(s20), hsum8(s21), hsum8(s30), hsum8(s31)};
            for (int t = nv; t < n; ++t) {
                r[0] += a0[t] * b0[t];
                r[1] += a0[t] * b1[t];
                r[2] += a1[t] * b0[t];
                r[3] += a1[t] * b1[t];
                r[4] += a2[t] * b0[t];
                r[5] += a2[t] * b1[t];
                r[6] += a3[t] * b0[t];
                r[7] += a3[t] * b1[t];
            }
            c[static_cast<std::int64_t>(i0 + 0) * q + j0] += r[0];
            c[static_cast<std::int64_t>(i0 + 0) * q + j0 + 1] += r[1];
            c[static_cast<std::int64_t>(i0 + 1) * q + j0] += r[2];
            c[static_cast<std::int64_t>(i0 + 1) * q + j0 + 1] += r[3];
            c[static_cast<std::int64_t>(i0 + 2) * q + j0] += r[4];
            c[static_cast<std::int64_t>(i0 + 2) * q + j0 + 1] += r[5];
            c[static_cast<std::int64_t>(i0 + 3) * q + j0] += r[6];
            c[static_cast<std::int64_t>(i0 + 3) * q + j0 + 1] += r[7];
        }
        for (; j0 < q; ++j0) {
            const float* b0 = b + static_cast<std::int64_t>(j0) * ldn;
            const float* rows[4] = {a0, a1, a2, a3};
            for (int i = 0; i < 4; ++i) {
                __m256 s = _mm256_setzero_ps();
                for (int t = 0; t < nv; t += 8)
                    s = _mm256_fmadd_ps(_mm256_loadu_ps(rows[i] + t), _mm256_loadu_ps(b0 + t), s);
                float r = hsum8(s);
                for (int t = nv; t < n; ++t) r += rows[i][t] * b0[t];
                c[static_cast<std::int64_t>(i0 + i) * q + j0] += r;
            }
        }
    }
    for (; i0 < m; ++i0) {
        const float* ar = a + static_cast<std::int64_t>(i0) * ldn;
        for (int j0 = 0; j0 < q; ++j0) {
            const float* br = b + static_cast<std::int64_t>(j0) * ldn;
            __m256 s = _mm256_setzero_ps();
            for (int t = 0; t < nv; t += 8)
                s = _mm256_fmadd_ps(_mm256_loadu_ps(ar + t), _mm256_loadu_ps(br + t), s);
            float r = hsum8(s);
            for (int t = nv; t < n; ++t) r += ar[t] * br[t];
            c[static_cast<std::int64_t>(i0) * q + j0] += r;
        }
    }
}


void gemm_abt_f32(const float* a, const float* b, float* c, int m, int q, int n) {
    gemm_abt_f32_chunk(a, b, c, m, q, n, n);
}

}  // namespace

template <>
void gemm_acc<float>(const float* a, const float* b, float* c, int m, int k, int n) {
    gemm_acc_f32(a, b, c, m, k, n);
}

template <>
void gemm_acc_block<float>(const float* a, const float* b, float* c, int m, int k, int n,
                           int n0, int nb) {
    gemm_acc_f32_block(a, b, c, m, k, n, n0, nb);
}

template <>
void gemm_abt<float>(const float* a, const float* b, float* c, int m, int q, int n) {
    gemm_abt_f32(a, b, c, m, q, n);
}
#endif  // __AVX2__ && __FMA__

template <class R>
void gemm_acc_block(const R* a, const R* b, R* c, int m, int k, int n, int n0, int nb) {
    for (int m0 = 0; m0 < m; ++m0) {
        R* cr = c + static_cast<std::int64_t>(m0) * n;
        const R* ar = a + static_cast<std::int64_t>(m0) * k;
        for (int kk = 0; kk < k; ++kk) {
            const R av = ar[kk];
            const R* bp = b + static_cast<std::int64_t>(kk) * n;
            for (int j = n0; j < n0 + nb; ++j) cr[j] += av * bp[j];
        }
    }
}

template <class R>
void gemm_abt(const R* a, const R* b, R* c, int m, int q, int n) {
    const int nv = n & ~7;
    for (int i = 0; i < m; ++i) {
        const R* ar = a + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < q; ++j) {
            const R* br = b + static_cast<std::int64_t>(j) * n;
            R acc[8] = {R(0), R(0), R(0), R(0), R(0), R(0), R(0), R(0)};
            for (int t = 0; t < nv; t += 8)
                for (int l = 0; l < 8; ++l) acc[l] += ar[t + l] * br[t + l];
            R s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
            for (int t = nv; t < n; ++t) s += ar[t] * br[t];
            c[static_cast<std::int64_t>(i) * q + j] += s;
        }
    }
}

#if !(defined(__AVX2__) && defined(__FMA__))
template void gemm_acc<float>(const float*, const float*, float*, int, int, int);
template void gemm_acc_block<float>(const float*, const float*, float*, int, int, int, int, int);
template void gemm_abt<float>(const float*, const float*, float*, int, int, int);
#endif
template void gemm_acc<double>(const double*, const double*, double*, int, int, int);
template void gemm_acc_block<double>(const double*, const double*, double*, int, int, int, int, int);
template void gemm_abt<double>(const double*, const double*, double*, int, int, int);

namespace {

// fixed 8-lane accumulation pattern; deterministic, vectorizable without
// reassociation licenses
template <class R>
R dot(const R* x, const R* y, int n) {
    R acc[8] = {R(0), R(0), R(0), R(0), R(0), R(0), R(0), R(0)};
    int i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) acc[l] += x[i + l] * y[i + l];
    R tail = R(0);
    for (; i < n; ++i) tail += x[i] * y[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <class R>
void axpy(R a, const R* x, R* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace
}  // namespace kernels

namespace {

using kernels::axpy;
using kernels::dot;

template <class R>
std::shared_ptr<Node<R>> alloc_node(const Shape& shape) {
    auto n = std::make_shared<Node<R>>();
    n->shape = shape;
    n->value.resize(static_cast<size_t>(shape_numel(shape)));
    return n;
}

template <class R>
Tensor<R> wrap(std::shared_ptr<Node<R>> n) {
    Tensor<R> t;
    t.node() = std::move(n);
    return t;
}

template <class R>
std::vector<R>& ensure_grad(const std::shared_ptr<Node<R>>& p) {
    if (p->grad.empty()) p->grad.assign(p->value.size(), R(0));
    return p->grad;
}

template <class R>
void attach(Tensor<R>& out, std::vector<std::shared_ptr<Node<R>>> parents,
            std::function<void(Node<R>&)> bw) {
    if (!grad_enabled()) return;
    bool any = false;
    for (auto& p : parents)
        if (p->requires_grad) { any = true; break; }
    if (!any) return;
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backward_fn = std::move(bw);
}

template <class R>
void im2col(const R* x, int cin, int h, int w, int k, int stride, int pad, int ho, int wo, R* col) {
    const int rows = cin * k * k;
    for (int r = 0; r < rows; ++r) {
        const int kw = r % k;
        const int kh = (r / k) % k;
        const int c = r / (k * k);
        const R* xc = x + static_cast<std::int64_t>(c) * h * w;
        R* cr = col + static_cast<std::int64_t>(r) * ho * wo;
        for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride - pad + kh;
            R* dst = cr + static_cast<std::int64_t>(oh) * wo;
            if (ih < 0 || ih >= h) {
                std::memset(dst, 0, sizeof(R) * static_cast<size_t>(wo));
                continue;
            }
            const R* src = xc + static_cast<std::int64_t>(ih) * w;
            if (stride == 1) {
                const int iw0 = -pad + kw;
                int ow = 0;
                for (; ow < wo && iw0 + ow < 0; ++ow) dst[ow] = R(0);
                const int owe = std::min(wo, w - iw0);
                if (owe > ow) {
                    std::memcpy(dst + ow, src + iw0 + ow, sizeof(R) * static_cast<size_t>(owe - ow));
                    ow = owe;
                }
                for (; ow < wo; ++ow) dst[ow] = R(0);
            } else {
                for (int ow = 0; ow < wo; ++ow) {
                    const int iw = ow * stride - pad + kw;
                    dst[ow] = (iw >= 0 && iw < w) ? src[iw] : R(0);
                }
            }
        }
    }
}

template <class R>
void col2im_acc(const R* col, int cin, int h, int w, int k, int stride, int pad, int ho, int wo, R* dx) {
    const int rows = cin * k * k;
    for (int r = 0; r < rows; ++r) {
        const int kw = r % k;
        const int kh = (r / k) % k;
        const int c = r / (k * k);
        R* xc = dx + static_cast<std::int64_t>(c) * h * w;
        const R* cr = col + static_cast<std::int64_t>(r) * ho * wo;
        for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride - pad + kh;
            if (ih < 0 || ih >= h) continue;
            R* dst = xc + static_cast<std::int64_t>(ih) * w;
            const R* src = cr + static_cast<std::int64_t>(oh) * wo;
            for (int ow = 0; ow < wo; ++ow) {
                const int iw = ow * stride - pad + kw;
                if (iw >= 0 && iw < w) dst[iw] += src[ow];
            }
        }
    }
}

struct ConvDims {
    int b, cin, h, w, cout, k, stride, pad, ho, wo;
    std::int64_t colsz() const { return static_cast<std::int64_t>(cin) * k * k * ho * wo; }
    bool direct() const { return k == 1 && stride == 1 && pad == 0; }
};

template <class R>
ConvDims conv_check(const Tensor<R>& input, const Tensor<R>& weight, const Tensor<R>& bias,
                    int stride, int pad) {
    if (input.ndim() != 4) throw std::invalid_argument("conv2d: input must be [B,Cin,H,W]");
    if (weight.ndim() != 4) throw std::invalid_argument("conv2d: weight must be [Cout,Cin,k,k]");
    ConvDims d{};
    d.b = input.dim(0);
    d.cin = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.cout = weight.dim(0);
    d.k = weight.dim(2);
    d.stride = stride;
    d.pad = pad;
    if (weight.dim(3) != d.k) throw std::invalid_argument("conv2d: non-square kernel");
    if (d.k != 1 && d.k != 3) throw std::invalid_argument("conv2d: kernel size must be 1 or 3");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
    if (pad < 0) throw std::invalid_argument("conv2d: negative pad");
    if (weight.dim(1) != d.cin)
        throw std::invalid_argument("conv2d: channel mismatch, input " + std::to_string(d.cin) +
                                    " vs weight " + std::to_string(weight.dim(1)));
    if (bias.numel() != d.cout) throw std::invalid_argument("conv2d: bias size mismatch");
    d.ho = (d.h + 2 * pad - d.k) / stride + 1;
    d.wo = (d.w + 2 * pad - d.k) / stride + 1;
    if (d.ho < 1 || d.wo < 1) throw std::invalid_argument("conv2d: empty output");
    return d;
}

}  // namespace

template <class R>
Tensor<R> conv2d(const Tensor<R>& input, const Tensor<R>& weight, const Tensor<R>& bias,
                 int stride, int pad) {
    const ConvDims d = conv_check(input, weight, bias, stride, pad);
    auto out = alloc_node<R>(Shape{d.b, d.cout, d.ho, d.wo});

    const R* x = input.data().data();
    const R* wgt = weight.data().data();
    const R* bs = bias.data().data();
    const std::int64_t n = static_cast<std::int64_t>(d.ho) * d.wo;
    const int kdim = d.cin * d.k * d.k;
    const std::int64_t xsz = static_cast<std::int64_t>(d.cin) * d.h * d.w;

    std::vector<R> colbuf;
    if (!d.direct()) colbuf.resize(static_cast<size_t>(d.b) * d.colsz());

    const int nt = kernels::threads();
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1 && d.b > 1)
    for (int b = 0; b < d.b; ++b) {
        if (!d.direct())
            im2col(x + b * xsz, d.cin, d.h, d.w, d.k, d.stride, d.pad, d.ho, d.wo,
                   colbuf.data() + b * d.colsz());
    }

    const int nb = 256;
    const int nblocks = static_cast<int>((n + nb - 1) / nb);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
    for (int task = 0; task < d.b * nblocks; ++task) {
        const int b = task / nblocks;
        const int n0 = (task % nblocks) * nb;
        const int nc = std::min<int>(nb, static_cast<int>(n) - n0);
        R* ob = out->value.data() + static_cast<std::int64_t>(b) * d.cout * n;
        for (int m = 0; m < d.cout; ++m)
            std::fill(ob + m * n + n0, ob + m * n + n0 + nc, bs[m]);
        const R* col = d.direct() ? x + b * xsz : colbuf.data() + b * d.colsz();
        kernels::gemm_acc_block(wgt, col, ob, d.cout, kdim, static_cast<int>(n), n0, nc);
    }

    Tensor<R> res = wrap(std::move(out));
    attach<R>(res, {input.node(), weight.node(), bias.node()}, [d](Node<R>& nd) {
        const auto& pin = nd.parents[0];
        const auto& pw = nd.parents[1];
        const auto& pb = nd.parents[2];
        const R* x = pin->value.data();
        const R* wgt = pw->value.data();
        const R* gy = nd.grad.data();
        const std::int64_t hw = static_cast<std::int64_t>(d.ho) * d.wo;
        const int kdim = d.cin * d.k * d.k;
        const std::int64_t xsz = static_cast<std::int64_t>(d.cin) * d.h * d.w;
        const std::int64_t ysz = static_cast<std::int64_t>(d.cout) * hw;
        const int nt = kernels::threads();

        if (pb->requires_grad) {
            auto& gb = ensure_grad(pb);
            for (int b = 0; b < d.b; ++b)
                for (int c = 0; c < d.cout; ++c) {
                    const R* row = gy + b * ysz + c * hw;
                    R s = 0;
                    for (std::int64_t i = 0; i < hw; ++i) s += row[i];
                    gb[c] += s;
                }
        }

        // col is recomputed from the saved input rather than kept from forward
        std::vector<R> colbuf;
        if ((pw->requires_grad || pin->requires_grad) && !d.direct()) {
            colbuf.resize(static_cast<size_t>(d.b) * d.colsz());
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1 && d.b > 1)
            for (int b = 0; b < d.b; ++b)
                im2col(x + b * xsz, d.cin, d.h, d.w, d.k, d.stride, d.pad, d.ho, d.wo,
                       colbuf.data() + b * d.colsz());
        }

        if (pw->requires_grad) {
            auto& gw = ensure_grad(pw);
            // per-image partials, then a fixed-order reduction over b
            std::vector<R> partial(static_cast<size_t>(d.b) * d.cout * kdim, R(0));
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1 && d.b > 1)
            for (int b = 0; b < d.b; ++b) {
                const R* col = d.direct() ? x + b * xsz : colbuf.data() + b * d.colsz();
                R* pw_b = partial.data() + static_cast<std::int64_t>(b) * d.cout * kdim;
                kernels::gemm_abt(gy + b * ysz, col, pw_b, d.cout, kdim, static_cast<int>(hw));
            }
            for (int b = 0; b < d.b; ++b) {
                const R* pw_b = partial.data() + static_cast<std::int64_t>(b) * d.cout * kdim;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(d.cout) * kdim; ++i)
                    gw[i] += pw_b[i];
            }
        }

        if (pin->requires_grad) {
            auto& gx = ensure_grad(pin);
            std::vector<R> wt(static_cast<size_t>(kdim) * d.cout);
            for (int m = 0; m < d.cout; ++m)
                for (int q = 0; q < kdim; ++q)
                    wt[static_cast<std::int64_t>(q) * d.cout + m] = wgt[static_cast<std::int64_t>(m) * kdim + q];
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1 && d.b > 1)
            for (int b = 0; b < d.b; ++b) {
                if (d.direct()) {
                    // gx[b] += W^T * gy[b]
                    kernels::gemm_acc(wt.data(), gy + b * ysz, gx.data() + b * xsz, d.cin, d.cout,
                                      static_cast<int>(hw));
                } else {
                    std::vector<R> gcol(static_cast<size_t>(d.colsz()), R(0));
                    kernels::gemm_acc(wt.data(), gy + b * ysz, gcol.data(), kdim, d.cout,
                                      static_cast<int>(hw));
                    col2im_acc(gcol.data(), d.cin, d.h, d.w, d.k, d.stride, d.pad, d.ho, d.wo,
                               gx.data() + b * xsz);
                }
            }
        }
    });
    return res;
}

template <class R>
Tensor<R> group_norm(const Tensor<R>& x, int groups, const Tensor<R>& gamma,
                     const Tensor<R>& beta, R eps) {
    if (x.ndim() != 4) throw std::invalid_argument("group_norm: expected [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (groups <= 0 || C % groups != 0)
        throw std::invalid_argument("group_norm: channels " + std::to_string(C) +
                                    " not divisible by groups " + std::to_string(groups));
    if (gamma.numel() != C || beta.numel() != C)
        throw std::invalid_argument("group_norm: affine param size mismatch");

    const int cpg = C / groups;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t gsz = cpg * hw;
    auto out = alloc_node<R>(x.shape());

    auto means = std::make_shared<std::vector<R>>(static_cast<size_t>(B) * groups);
    auto rstds = std::make_shared<std::vector<R>>(static_cast<size_t>(B) * groups);

    const R* xv = x.data().data();
    const R* gv = gamma.data().data();
    const R* bv = beta.data().data();
    const int nt = kernels::threads();
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1 && B * groups > 1)
    for (int bg = 0; bg < B * groups; ++bg) {
        const int b = bg / groups;
        const int g = bg % groups;
        const R* xp = xv + (static_cast<std::int64_t>(b) * C + g * cpg) * hw;
        R mean = 0;
        for (std::int64_t i = 0; i < gsz; ++i) mean += xp[i];
        mean /= static_cast<R>(gsz);
        R var = 0;
        for (std::int64_t i = 0; i < gsz; ++i) {
            const R dv = xp[i] - mean;
            var += dv * dv;
        }
        var /= static_cast<R>(gsz);
        const R rstd = R(1) / std::sqrt(var + eps);
        (*means)[bg] = mean;
        (*rstds)[bg] = rstd;
        R* op = out->value.data() + (static_cast<std::int64_t>(b) * C + g * cpg) * hw;
        for (int ci = 0; ci < cpg; ++ci) {
            const R gm = gv[g * cpg + ci];
            const R bt = bv[g * cpg + ci];
            const R* xr = xp + ci * hw;
            R* orow = op + ci * hw;
            for (std::int64_t i = 0; i < hw; ++i) orow[i] = (xr[i] - mean) * rstd * gm + bt;
        }
    }

    Tensor<R> res = wrap(std::move(out));
    attach<R>(res, {x.node(), gamma.node(), beta.node()},
              [B, C, groups, cpg, hw, gsz, means, rstds](Node<R>& nd) {
                  const auto& px = nd.parents[0];
                  const auto& pg = nd.parents[1];
                  const auto& pb = nd.parents[2];
                  const R* xv = px->value.data();
                  const R* gv = pg->value.data();
                  const R* gy = nd.grad.data();
                  const bool need_x = px->requires_grad;
                  const bool need_g = pg->requires_grad;
                  const bool need_b = pb->requires_grad;
                  R* gx = need_x ? ensure_grad(px).data() : nullptr;
                  R* gg = need_g ? ensure_grad(pg).data() : nullptr;
                  R* gb = need_b ? ensure_grad(pb).data() : nullptr;
                  const int nt = kernels::threads();
                  // one thread per group: each owns its channel slice of gg/gb
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1 && groups > 1)
                  for (int g = 0; g < groups; ++g) {
                      for (int b = 0; b < B; ++b) {
                          const int bg = b * groups + g;
                          const R mean = (*means)[bg];
                          const R rstd = (*rstds)[bg];
                          const std::int64_t base = (static_cast<std::int64_t>(b) * C + g * cpg) * hw;
                          const R* xp = xv + base;
                          const R* dyp = gy + base;
                          if (need_g || need_b) {
                              for (int ci = 0; ci < cpg; ++ci) {
                                  const R* xr = xp + ci * hw;
                                  const R* dyr = dyp + ci * hw;
                                  R sg = 0, sb = 0;
                                  for (std::int64_t i = 0; i < hw; ++i) {
                                      sb += dyr[i];
                                      sg += dyr[i] * (xr[i] - mean) * rstd;
                                  }
                                  if (need_g) gg[g * cpg + ci] += sg;
                                  if (need_b) gb[g * cpg + ci] += sb;
                              }
                          }
                          if (need_x) {
                              R s1 = 0, s2 = 0;
                              for (int ci = 0; ci < cpg; ++ci) {
                                  const R gm = gv[g * cpg + ci];
                                  const R* xr = xp + ci * hw;
                                  const R* dyr = dyp + ci * hw;
                                  for (std::int64_t i = 0; i < hw; ++i) {
                                      const R dxh = dyr[i] * gm;
                                      s1 += dxh;
                                      s2 += dxh * (xr[i] - mean) * rstd;
                                  }
                              }
                              s1 /= static_cast<R>(gsz);
                              s2 /= static_cast<R>(gsz);
                              R* gxp = gx + base;
                              for (int ci = 0; ci < cpg; ++ci) {
                                  const R gm = gv[g * cpg + ci];
                                  const R* xr = xp + ci * hw;
                                  const R* dyr = dyp + ci * hw;
                                  R* gxr = gxp + ci * hw;
                                  for (std::int64_t i = 0; i < hw; ++i) {
                                      const R xh = (xr[i] - mean) * rstd;
                                      gxr[i] += rstd * (dyr[i] * gm - s1 - xh * s2);
                                  }
                              }
                          }
                      }
                  }
              });
    return res;
}

template <class R>
Tensor<R> to_tokens(const Tensor<R>& x) {
    if (x.ndim() != 4) throw std::invalid_argument("to_tokens: expected [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t T = static_cast<std::int64_t>(H) * W;
    auto out = alloc_node<R>(Shape{B, static_cast<int>(T), C});
    const R* xv = x.data().data();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const R* src = xv + (static_cast<std::int64_t>(b) * C + c) * T;
            R* dst = out->value.data() + static_cast<std::int64_t>(b) * T * C + c;
            for (std::int64_t t = 0; t < T; ++t) dst[t * C] = src[t];
        }
    Tensor<R> res = wrap(std::move(out));
    attach<R>(res, {x.node()}, [B, C, T](Node<R>& nd) {
        const auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        auto& g = ensure_grad(p);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                R* dst = g.data() + (static_cast<std::int64_t>(b) * C + c) * T;
                const R* src = nd.grad.data() + static_cast<std::int64_t>(b) * T * C + c;
                for (std::int64_t t = 0; t < T; ++t) dst[t] += src[t * C];
            }
    });
    return res;
}

template <class R>
Tensor<R> from_tokens(const Tensor<R>& t, int H, int W) {
    if (t.ndim() != 3) throw std::invalid_argument("from_tokens: expected [B,T,C]");
    const int B = t.dim(0), C = t.dim(2);
    const std::int64_t T = t.dim(1);
    if (T != static_cast<std::int64_t>(H) * W)
        throw std::invalid_argument("from_tokens: token count != H*W");
    auto out = alloc_node<R>(Shape{B, C, H, W});
    const R* tv = t.data().data();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            R* dst = out->value.data() + (static_cast<std::int64_t>(b) * C + c) * T;
            const R* src = tv + static_cast<std::int64_t>(b) * T * C + c;
            for (std::int64_t i = 0; i < T; ++i) dst[i] = src[i * C];
        }
    Tensor<R> res = wrap(std::move(out));
    attach<R>(res, {t.node()}, [B, C, T](Node<R>& nd) {
        const auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        auto& g = ensure_grad(p);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const R* src = nd.grad.data() + (static_cast<std::int64_t>(b) * C + c) * T;
                R* dst = g.data() + static_cast<std::int64_t>(b) * T * C + c;
                for (std::int64_t i = 0; i < T; ++i) dst[i * C] += src[i];
            }
    });
    return res;
}

template <class R>
Tensor<R> token_linear(const Tensor<R>& x, const Tensor<R>& w) {
    if (x.ndim() != 3 || w.ndim() != 2) throw std::invalid_argument("token_linear: bad ranks");
    const int B = x.dim(0), T = x.dim(1), K = x.dim(2);
    const int E = w.dim(0);
    if (w.dim(1) != K) throw std::invalid_argument("token_linear: inner dim mismatch");
    auto out = alloc_node<R>(Shape{B, T, E});
    const R* xv = x.data().data();
    const R* wv = w.data().data();
    for (std::int64_t bt = 0; bt < static_cast<std::int64_t>(B) * T; ++bt) {
        const R* xr = xv + bt * K;
        R* orow = out->value.data() + bt * E;
        for (int e = 0; e < E; ++e) orow[e] = dot(wv + static_cast<std::int64_t>(e) * K, xr, K);
    }
    Tensor<R> res = wrap(std::move(out));
    attach<R>(res, {x.node(), w.node()}, [B, T, K, E](Node<R>& nd) {
        const auto& px = nd.parents[0];
        const auto& pw = nd.parents[1];
        const R* gy = nd.grad.data();
        if (px->requires_grad) {
            auto& gx = ensure_grad(px);
            const R* wv = pw->value.data();
            for (std::int64_t bt = 0; bt < static_cast<std::int64_t>(B) * T; ++bt) {
                const R* gr = gy + bt * E;
                R* dst = gx.data() + bt * K;
                for (int e = 0; e < E; ++e) axpy(gr[e], wv + static_cast<std::int64_t>(e) * K, dst, K);
            }
        }
        if (pw->requires_grad) {
            auto& gw = ensure_grad(pw);
            const R* xv = px->value.data();
            for (std::int64_t bt = 0; bt < static_cast<std::int64_t>(B) * T; ++bt) {
                const R* gr = gy + bt * E;
                const R* xr = xv + bt * K;
                for (int e = 0; e < E; ++e) axpy(gr[e], xr, gw.data() + static_cast<std::int64_t>(e) * K, K);
            }
        }
    });
    return res;
}

template <class R>
Tensor<R> linear(const Tensor<R>& x, const Tensor<R>& w, const Tensor<R>& b) {
    if (x.ndim() != 2 || w.ndim() != 2) throw std::invalid_argument("linear: bad ranks");
    const int B = x.dim(0), K = x.dim(1), E = w.dim(0);
    if (w.dim(1) != K || b.numel() != E) throw std::invalid_argument("linear: dim mismatch");
    auto out = alloc_node<R>(Shape{B, E});
    const R* xv = x.data().data();
    const R* wv = w.data().data();
    const R* bv = b.data().data();
    for (int i = 0; i < B; ++i) {
        const R* xr = xv + static_cast<std::int64_t>(i) * K;
        R* orow = out->value.data() + static_cast<std::int64_t>(i) * E;
        for (int e = 0; e < E; ++e) orow[e] = dot(wv + static_cast<std::int64_t>(e) * K, xr, K) + bv[e];
    }
    Tensor<R> res = wrap(std::move(out));
    attach<R>(res, {x.node(), w.node(), b.node()}, [B, K, E](Node<R>& nd) {
        const auto& px = nd.parents[0];
        const auto& pw = nd.parents[1];
        const auto& pb = nd.parents[2];
        const R* gy = nd.grad.data();
        if (px->requires_grad) {
            auto& gx = ensure_grad(px);
            const R* wv = pw->value.data();
            for (int i = 0; i < B; ++i)
                for (int e = 0; e < E; ++e)
                    axpy(gy[static_cast<std::int64_t>(i) * E + e], wv + static_cast<std::int64_t>(e) * K,
                         gx.data() + static_cast<std::int64_t>(i) * K, K);
        }
        if (pw->requires_grad) {
            auto& gw = ensure_grad(pw);
            const R* xv = px->value.data();
            for (int i = 0; i < B; ++i)
                for (int e = 0; e < E; ++e)
                    axpy(gy[static_cast<std::int64_t>(i) * E + e], xv + static_cast<std::int64_t>(i) * K,
                         gw.data() + static_cast<std::int64_t>(e) * K, K);
        }
        if (pb->requires_grad) {
            auto& gb = ensure_grad(pb);
            for (int i = 0; i < B; ++i)
                for (int e = 0; e < E; ++e) gb[e] += gy[static_cast<std::int64_t>(i) * E + e];
        }
    });
    return res;
}

template <class R>
Tensor<R> bmm_nt(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw std::invalid_argument("bmm_nt: shape mismatch");
    const int B = a.dim(0), T1 = a.dim(1), T2 = b.dim(1), D = a.dim(2);
    auto out = alloc_node<R>(Shape{B, T1, T2});
    const R* av = a.data().data();
    const R* bv = b.data().data();
    for (int i = 0; i < B; ++i)
        for (int t1 = 0; t1 < T1; ++t1) {
            const R* ar = av + (static_cast<std::int64_t>(i) * T1 + t1) * D;
            R* orow = out->value.data() + (static_cast<std::int64_t>(i) * T1 + t1) * T2;
            for (int t2 = 0; t2 < T2; ++t2)
                orow[t2] = dot(ar, bv + (static_cast<std::int64_t>(i) * T2 + t2) * D, D);
        }
    Tensor<R> res = wrap(std::move(out));
    attach<R>(res, {a.node(), b.node()}, [B, T1, T2, D](Node<R>& nd) {
        const auto& pa = nd.parents[0];
        const auto& pb = nd.parents[1];
        const R* gs = nd.grad.data();
        if (pa->requires_grad) {
            auto& ga = ensure_grad(pa);
            const R* bv = pb->value.data();
            for (int i = 0; i < B; ++i)
                for (int t1 = 0; t1 < T1; ++t1) {
                    R* dst = ga.data() + (static_cast<std::int64_t>(i) * T1 + t1) * D;
                    const R* gr = gs + (static_cast<std::int64_t>(i) * T1 + t1) * T2;
                    for (int t2 = 0; t2 < T2; ++t2)
                        axpy(gr[t2], bv + (static_cast<std::int64_t>(i) * T2 + t2) * D, dst, D);
                }
        }
        if (pb->requires_grad) {
            auto& gb = ensure_grad(pb);
            const R* av = pa->value.data();
            for (int i = 0; i < B; ++i)
                for (int t1 = 0; t1 < T1; ++t1) {
                    const R* ar = av + (static_cast<std::int64_t>(i) * T1 + t1) * D;
                    const R* gr = gs + (static_cast<std::int64_t>(i) * T1 + t1) * T2;
                    for (int t2 = 0; t2 < T2; ++t2)
                        axpy(gr[t2], ar, gb.data() + (static_cast<std::int64_t>(i) * T2 + t2) * D, D);
                }
        }
    });
    return res;
}

template <class R>
Tensor<R> bmm_nn(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw std::invalid_argument("bmm_nn: shape mismatch");
    const int B = a.dim(0), T1 = a.dim(1), T2 = a.dim(2), D = b.dim(2);
    auto out = alloc_node<R>(Shape{B, T1, D});
    const R* av = a.data().data();
    const R* bv = b.data().data();
    for (int i = 0; i < B; ++i)
        for (int t1 = 0; t1 < T1; ++t1) {
            const R* ar = av + (static_cast<std::int64_t>(i) * T1 + t1) * T2;
            R* orow = out->value.data() + (static_cast<std::int64_t>(i) * T1 + t1) * D;
            for (int t2 = 0; t2 < T2; ++t2)
                axpy(ar[t2], bv + (static_cast<std::int64_t>(i) * T2 + t2) * D, orow, D);
        }
    Tensor<R> res = wrap(std::move(out));
    attach<R>(res, {a.node(), b.node()}, [B, T1, T2, D](Node<R>& nd) {
        const auto& pa = nd.parents[0];
        const auto& pb = nd.parents[1];
        const R* go = nd.grad.data();
        if (pa->requires_grad) {
            auto& ga = ensure_grad(pa);
            const R* bv = pb->value.data();
            for (int i = 0; i < B; ++i)
                for (int t1 = 0; t1 < T1; ++t1) {
                    const R* gr = go + (static_cast<std::int64_t>(i) * T1 + t1) * D;
                    R* dst = ga.data() + (static_cast<std::int64_t>(i) * T1 + t1) * T2;
                    for (int t2 = 0; t2 < T2; ++t2)
                        dst[t2] += dot(gr, bv + (static_cast<std::int64_t>(i) * T2 + t2) * D, D);
                }
        }
        if (pb->requires_grad) {
            auto& gb = ensure_grad(pb);
            const R* av = pa->value.data();
            for (int i = 0; i < B; ++i)
                for (int t1 = 0; t1 < T1; ++t1) {
                    const R* ar = av + (static_cast<std::int64_t>(i) * T1 + t1) * T2;
                    const R* gr = go + (static_cast<std::int64_t>(i) * T1 + t1) * D;
                    for (int t2 = 0; t2 < T2; ++t2)
                        axpy(ar[t2], gr, gb.data() + (static_cast<std::int64_t>(i) * T2 + t2) * D, D);
                }
        }
    });
    return res;
}

template <class R>
Tensor<R> softmax_lastdim(const Tensor<R>& x) {
    const int D = x.shape().back();
    const std::int64_t rows = x.numel() / D;
    auto out = alloc_node<R>(x.shape());
    const R* xv = x.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const R* xr = xv + r * D;
        R* orow = out->value.data() + r * D;
        R mx = xr[0];
        for (int i = 1; i < D; ++i) mx = std::max(mx, xr[i]);
        R sum = 0;
        for (int i = 0; i < D; ++i) {
            orow[i] = std::exp(xr[i] - mx);
            sum += orow[i];
        }
        const R inv = R(1) / sum;
        for (int i = 0; i < D; ++i) orow[i] *= inv;
    }
    Tensor<R> res = wrap(std::move(out));
    attach<R>(res, {x.node()}, [rows, D](Node<R>& nd) {
        const auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        auto& g = ensure_grad(p);
        const R* y = nd.value.data();
        const R* gy = nd.grad.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const R* yr = y + r * D;
            const R* gr = gy + r * D;
            R s = 0;
            for (int i = 0; i < D; ++i) s += gr[i] * yr[i];
            R* dst = g.data() + r * D;
            for (int i = 0; i < D; ++i) dst[i] += yr[i] * (gr[i] - s);
        }
    });
    return res;
}

template <class R>
Tensor<R> self_attention(const Tensor<R>& x, const Tensor<R>& wq, const Tensor<R>& wk,
                         const Tensor<R>& wv, const Tensor<R>& wout) {
    if (x.ndim() != 4) throw std::invalid_argument("self_attention: expected [B,C,H,W]");
    const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (const auto* w : {&wq, &wk, &wv, &wout})
        if (w->ndim() != 2 || w->dim(0) != C || w->dim(1) != C)
            throw std::invalid_argument("self_attention: projection must be [C,C]");
    Tensor<R> tok = to_tokens(x);
    Tensor<R> q = token_linear(tok, wq);
    Tensor<R> k = token_linear(tok, wk);
    Tensor<R> v = token_linear(tok, wv);
    Tensor<R> s = scale(bmm_nt(q, k), static_cast<R>(1.0 / std::sqrt(static_cast<double>(C))));
    Tensor<R> p = softmax_lastdim(s);
    Tensor<R> o = token_linear(bmm_nn(p, v), wout);
    return add(x, from_tokens(o, H, W));
}

template <class R>
Tensor<R> cross_attention(const Tensor<R>& x, const Tensor<R>& ctx, const Tensor<R>& wq,
                          const Tensor<R>& wk, const Tensor<R>& wv, const Tensor<R>& wout) {
    if (x.ndim() != 4 || ctx.ndim() != 4) throw std::invalid_argument("cross_attention: expected [B,C,H,W]");
    const int Cx = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cc = ctx.dim(1);
    const int D = wq.dim(0);
    if (wq.dim(1) != Cx || wk.dim(0) != D || wk.dim(1) != Cc || wv.dim(0) != Cx ||
        wv.dim(1) != Cc || wout.dim(0) != Cx || wout.dim(1) != Cx)
        throw std::invalid_argument("cross_attention: projection shape mismatch");
    Tensor<R> tq = to_tokens(x);
    Tensor<R> tc = to_tokens(ctx);
    Tensor<R> q = token_linear(tq, wq);
    Tensor<R> k = token_linear(tc, wk);
    Tensor<R> v = token_linear(tc, wv);
    Tensor<R> s = scale(bmm_nt(q, k), static_cast<R>(1.0 / std::sqrt(static_cast<double>(D))));
    Tensor<R> p = softmax_lastdim(s);
    Tensor<R> o = token_linear(bmm_nn(p, v), wout);
    return add(x, from_tokens(o, H, W));
}

template <class R>
Tensor<R> add_channel_bias(const Tensor<R>& x, const Tensor<R>& v) {
    if (x.ndim() != 4 || v.ndim() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1))
        throw std::invalid_argument("add_channel_bias: expected x [B,C,H,W], v [B,C]");
    const int B = x.dim(0), C = x.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    auto out = alloc_node<R>(x.shape());
    const R* xv = x.data().data();
    const R* vv = v.data().data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
        const R bias = vv[bc];
        const R* src = xv + bc * hw;
        R* dst = out->value.data() + bc * hw;
        for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
    }
    Tensor<R> res = wrap(std::move(out));
    attach<R>(res, {x.node(), v.node()}, [B, C, hw](Node<R>& nd) {
        const auto& px = nd.parents[0];
        const auto& pv = nd.parents[1];
        if (px->requires_grad) {
            auto& g = ensure_grad(px);
            for (size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
        }
        if (pv->requires_grad) {
            auto& g = ensure_grad(pv);
            for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
                const R* src = nd.grad.data() + bc * hw;
                R s = 0;
                for (std::int64_t i = 0; i < hw; ++i) s += src[i];
                g[bc] += s;
            }
        }
    });
    return res;
}

#define SDSEG_INSTANTIATE_OPS(R)                                                                  \
    template Tensor<R> conv2d<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&, int, int); \
    template Tensor<R> group_norm<R>(const Tensor<R>&, int, const Tensor<R>&, const Tensor<R>&, R); \
    template Tensor<R> self_attention<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&,   \
                                         const Tensor<R>&, const Tensor<R>&);                    \
    template Tensor<R> cross_attention<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&,  \
                                          const Tensor<R>&, const Tensor<R>&, const Tensor<R>&); \
    template Tensor<R> to_tokens<R>(const Tensor<R>&);                                           \
    template Tensor<R> from_tokens<R>(const Tensor<R>&, int, int);                               \
    template Tensor<R> token_linear<R>(const Tensor<R>&, const Tensor<R>&);                      \
    template Tensor<R> linear<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&);          \
    template Tensor<R> bmm_nt<R>(const Tensor<R>&, const Tensor<R>&);                            \
    template Tensor<R> bmm_nn<R>(const Tensor<R>&, const Tensor<R>&);                            \
    template Tensor<R> softmax_lastdim<R>(const Tensor<R>&);                                     \
    template Tensor<R> add_channel_bias<R>(const Tensor<R>&, const Tensor<R>&);

SDSEG_INSTANTIATE_OPS(float)
SDSEG_INSTANTIATE_OPS(double)

}  // namespace sdseg
