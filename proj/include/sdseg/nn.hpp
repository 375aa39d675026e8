#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sdseg/ops.hpp"
#include "sdseg/tensor.hpp"

namespace sdseg {

// Named parameter registry. Layers register their tensors here at
// construction; the optimizer and checkpoint code walk it in order.
template <class R>
class Params {
public:
    Tensor<R> add(const std::string& name, Tensor<R> init) {
        init.set_requires_grad(true);
        items_.emplace_back(name, init);
        return init;
    }
    size_t size() const { return items_.size(); }
    const std::vector<std::pair<std::string, Tensor<R>>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor<R>>>& items() { return items_; }

    Tensor<R> find(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        throw std::invalid_argument("Params: no parameter named " + name);
    }
    void set_trainable(bool b) {
        for (auto& [n, t] : items_) t.set_requires_grad(b);
    }
    void zero_grads() {
        for (auto& [n, t] : items_) t.zero_grad();
    }
    // fingerprint of all parameter values, order- and byte-exact
    std::uint64_t value_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [n, t] : items_) {
            h = fnv1a(n.data(), n.size(), h);
            h = fnv1a(t.data().data(), t.data().size() * sizeof(R), h);
        }
        return h;
    }

private:
    std::vector<std::pair<std::string, Tensor<R>>> items_;
};

template <class R>
struct Conv2dLayer {
    Tensor<R> w, b;
    int stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(Params<R>& ps, const std::string& name, int cin, int cout, int k, int stride,
                int pad, Rng& rng);
    Tensor<R> forward(const Tensor<R>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <class R>
struct GroupNormLayer {
    Tensor<R> gamma, beta;
    int groups = 1;

    GroupNormLayer() = default;
    GroupNormLayer(Params<R>& ps, const std::string& name, int channels);
    Tensor<R> forward(const Tensor<R>& x) const {
        return group_norm(x, groups, gamma, beta, R(1e-6));
    }
};

template <class R>
struct LinearLayer {
    Tensor<R> w, b;

    LinearLayer() = default;
    LinearLayer(Params<R>& ps, const std::string& name, int in, int out, Rng& rng);
    Tensor<R> forward(const Tensor<R>& x) const { return linear(x, w, b); }
};

// GroupNorm -> SiLU -> Conv3x3 (+ time projection) -> GroupNorm -> SiLU ->
// Conv3x3, with identity or 1x1-projected skip.
template <class R>
struct ResBlock {
    GroupNormLayer<R> norm1, norm2;
    Conv2dLayer<R> conv1, conv2;
    std::optional<Conv2dLayer<R>> skip;        // present iff cin != cout
    std::optional<LinearLayer<R>> temb_proj;   // denoiser blocks only

    ResBlock() = default;
    ResBlock(Params<R>& ps, const std::string& name, int cin, int cout, Rng& rng,
             int temb_dim = 0);
    Tensor<R> forward(const Tensor<R>& x, const Tensor<R>* temb = nullptr) const;
};

// stride-2 3x3 conv; requires even spatial dims
template <class R>
struct Downsample {
    Conv2dLayer<R> conv;
    Downsample() = default;
    Downsample(Params<R>& ps, const std::string& name, int channels, Rng& rng);
    Tensor<R> forward(const Tensor<R>& x) const;
};

// nearest 2x followed by 3x3 conv
template <class R>
struct Upsample {
    Conv2dLayer<R> conv;
    Upsample() = default;
    Upsample(Params<R>& ps, const std::string& name, int channels, Rng& rng);
    Tensor<R> forward(const Tensor<R>& x) const { return conv.forward(nearest_upsample2x(x)); }
};

template <class R>
struct AttentionLayer {
    Tensor<R> wq, wk, wv, wout;
    AttentionLayer() = default;
    AttentionLayer(Params<R>& ps, const std::string& name, int channels, Rng& rng);
    Tensor<R> forward(const Tensor<R>& x) const { return self_attention(x, wq, wk, wv, wout); }
};

int group_count(int channels);  // min(32, C)

// sinusoidal embedding, [sin(t*w_k) | cos(t*w_k)], w_k log-spaced, max period 10000
template <class R>
Tensor<R> timestep_embedding(const std::vector<int>& t, int dim);

// scales all grads so their global L2 norm is at most max_norm
template <class R>
void clip_grad_norm(Params<R>& ps, R max_norm);

template <class R>
struct AdamW {
    R lr = R(1e-4);
    R beta1 = R(0.9), beta2 = R(0.999), eps = R(1e-8);
    R weight_decay = R(0.01);
    std::int64_t step_count = 0;
    std::vector<std::vector<R>> m, v;

    AdamW() = default;
    AdamW(const Params<R>& ps, R lr, R weight_decay = R(0.01));
    // applies one update from the accumulated grads, then clears them
    void step(Params<R>& ps);
};

}  // namespace sdseg
