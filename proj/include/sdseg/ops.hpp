#pragma once

#include "sdseg/tensor.hpp"

namespace sdseg {

// cross-correlation, weight [Cout,Cin,k,k], k in {1,3}, stride in {1,2}
template <class R>
Tensor<R> conv2d(const Tensor<R>& input, const Tensor<R>& weight, const Tensor<R>& bias,
                 int stride, int pad);

template <class R>
Tensor<R> group_norm(const Tensor<R>& x, int groups, const Tensor<R>& gamma,
                     const Tensor<R>& beta, R eps = R(1e-6));

// single-head, tokens = H*W, wq/wk/wv/wout are [C,C]; output residual-added
template <class R>
Tensor<R> self_attention(const Tensor<R>& x, const Tensor<R>& wq, const Tensor<R>& wk,
                         const Tensor<R>& wv, const Tensor<R>& wout);

// queries from x tokens, keys/values from ctx tokens (possibly different
// channel count); wq [D,Cx], wk [D,Cc], wv [Cx,Cc], wout [Cx,Cx]
template <class R>
Tensor<R> cross_attention(const Tensor<R>& x, const Tensor<R>& ctx, const Tensor<R>& wq,
                          const Tensor<R>& wk, const Tensor<R>& wv, const Tensor<R>& wout);

// [B,C,H,W] -> [B,HW,C] and back
template <class R> Tensor<R> to_tokens(const Tensor<R>& x);
template <class R> Tensor<R> from_tokens(const Tensor<R>& t, int H, int W);

// y[b,t,:] = w * x[b,t,:], w is [E,K]
template <class R> Tensor<R> token_linear(const Tensor<R>& x, const Tensor<R>& w);

// y = x*w^T + b with x [B,K], w [E,K], b [E]
template <class R>
Tensor<R> linear(const Tensor<R>& x, const Tensor<R>& w, const Tensor<R>& b);

// scores[b] = a[b] * b[b]^T: [B,T1,D] x [B,T2,D] -> [B,T1,T2]
template <class R> Tensor<R> bmm_nt(const Tensor<R>& a, const Tensor<R>& b);
// out[b] = a[b] * b[b]: [B,T1,T2] x [B,T2,D] -> [B,T1,D]
template <class R> Tensor<R> bmm_nn(const Tensor<R>& a, const Tensor<R>& b);

// rowwise softmax over the last dim with max subtraction
template <class R> Tensor<R> softmax_lastdim(const Tensor<R>& x);

// x[b,c,h,w] + v[b,c] broadcast over spatial dims
template <class R> Tensor<R> add_channel_bias(const Tensor<R>& x, const Tensor<R>& v);

namespace kernels {
// C[M,N] += A[M,K] * B[K,N], row-major; deterministic for any thread count
template <class R>
void gemm_acc(const R* a, const R* b, R* c, int m, int k, int n);
// column-range variant of gemm_acc so callers can split n across threads
template <class R>
void gemm_acc_block(const R* a, const R* b, R* c, int m, int k, int n, int n0, int nb);
// C[M,Q] += A[M,N] * B[Q,N]^T
template <class R>
void gemm_abt(const R* a, const R* b, R* c, int m, int q, int n);
#if defined(__AVX2__) && defined(__FMA__)
template <> void gemm_acc<float>(const float*, const float*, float*, int, int, int);
template <> void gemm_acc_block<float>(const float*, const float*, float*, int, int, int, int, int);
template <> void gemm_abt<float>(const float*, const float*, float*, int, int, int);
#endif
void set_threads(int n);
int threads();
}  // namespace kernels

}  // namespace sdseg
