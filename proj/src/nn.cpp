#include "sdseg/nn.hpp"

#include <algorithm>
#include <cmath>

namespace sdseg {

int group_count(int channels) {
    // min(32, C), relaxed to the largest divisor of C when C % 32 != 0
    for (int g = std::min(channels, 32); g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

namespace {

template <class R>
Tensor<R> he_normal(const Shape& shape, int fan_in, Rng& rng) {
    Tensor<R> t = Tensor<R>::randn(shape, rng);
    const R s = static_cast<R>(std::sqrt(2.0 / fan_in));
    for (auto& v : t.mutable_data()) v *= s;
    return t;
}

}  // namespace

template <class R>
Conv2dLayer<R>::Conv2dLayer(Params<R>& ps, const std::string& name, int cin, int cout, int k,
                            int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
    w = ps.add(name + ".w", he_normal<R>({cout, cin, k, k}, cin * k * k, rng));
    b = ps.add(name + ".b", Tensor<R>::zeros({cout}));
}

template <class R>
GroupNormLayer<R>::GroupNormLayer(Params<R>& ps, const std::string& name, int channels)
    : groups(group_count(channels)) {
    gamma = ps.add(name + ".g", Tensor<R>::full({channels}, R(1)));
    beta = ps.add(name + ".b", Tensor<R>::zeros({channels}));
}

template <class R>
LinearLayer<R>::LinearLayer(Params<R>& ps, const std::string& name, int in, int out, Rng& rng) {
    w = ps.add(name + ".w", he_normal<R>({out, in}, in, rng));
    b = ps.add(name + ".b", Tensor<R>::zeros({out}));
}

template <class R>
ResBlock<R>::ResBlock(Params<R>& ps, const std::string& name, int cin, int cout, Rng& rng,
                      int temb_dim) {
    norm1 = GroupNormLayer<R>(ps, name + ".n1", cin);
    conv1 = Conv2dLayer<R>(ps, name + ".c1", cin, cout, 3, 1, 1, rng);
    if (temb_dim > 0) temb_proj = LinearLayer<R>(ps, name + ".temb", temb_dim, cout, rng);
    norm2 = GroupNormLayer<R>(ps, name + ".n2", cout);
    conv2 = Conv2dLayer<R>(ps, name + ".c2", cout, cout, 3, 1, 1, rng);
    if (cin != cout) skip = Conv2dLayer<R>(ps, name + ".skip", cin, cout, 1, 1, 0, rng);
}

template <class R>
Tensor<R> ResBlock<R>::forward(const Tensor<R>& x, const Tensor<R>* temb) const {
    Tensor<R> h = conv1.forward(silu(norm1.forward(x)));
    if (temb) {
        if (!temb_proj) throw std::invalid_argument("ResBlock: time embedding not configured");
        h = add_channel_bias(h, temb_proj->forward(silu(*temb)));
    }
    h = conv2.forward(silu(norm2.forward(h)));
    return add(h, skip ? skip->forward(x) : x);
}

template <class R>
Downsample<R>::Downsample(Params<R>& ps, const std::string& name, int channels, Rng& rng) {
    conv = Conv2dLayer<R>(ps, name + ".conv", channels, channels, 3, 2, 1, rng);
}

template <class R>
Tensor<R> Downsample<R>::forward(const Tensor<R>& x) const {
    if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
        throw std::invalid_argument("downsample: odd spatial dims " + shape_str(x.shape()));
    return conv.forward(x);
}

template <class R>
Upsample<R>::Upsample(Params<R>& ps, const std::string& name, int channels, Rng& rng) {
    conv = Conv2dLayer<R>(ps, name + ".conv", channels, channels, 3, 1, 1, rng);
}

template <class R>
AttentionLayer<R>::AttentionLayer(Params<R>& ps, const std::string& name, int channels, Rng& rng) {
    const Shape s{channels, channels};
    const int fan = channels;
    wq = ps.add(name + ".wq", he_normal<R>(s, fan, rng));
    wk = ps.add(name + ".wk", he_normal<R>(s, fan, rng));
    wv = ps.add(name + ".wv", he_normal<R>(s, fan, rng));
    // zero output projection: the block starts as identity
    wout = ps.add(name + ".wo", Tensor<R>::zeros(s));
}

template <class R>
Tensor<R> timestep_embedding(const std::vector<int>& t, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even");
    const int half = dim / 2;
    const int B = static_cast<int>(t.size());
    Tensor<R> out = Tensor<R>::zeros({B, dim});
    auto& d = out.mutable_data();
    for (int b = 0; b < B; ++b) {
        if (t[b] < 0) throw std::invalid_argument("timestep_embedding: negative t");
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * k / half);
            const double arg = static_cast<double>(t[b]) * freq;
            d[static_cast<size_t>(b) * dim + k] = static_cast<R>(std::sin(arg));
            d[static_cast<size_t>(b) * dim + half + k] = static_cast<R>(std::cos(arg));
        }
    }
    return out;
}

template <class R>
void clip_grad_norm(Params<R>& ps, R max_norm) {
    if (max_norm <= R(0)) return;
    double sq = 0;
    for (auto& [n, t] : ps.items())
        if (t.has_grad())
            for (R g : t.grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm <= static_cast<double>(max_norm)) return;
    const R s = static_cast<R>(max_norm / norm);
    for (auto& [n, t] : ps.items())
        if (t.has_grad())
            for (auto& g : t.node()->grad) g *= s;
}

template <class R>
AdamW<R>::AdamW(const Params<R>& ps, R lr_, R weight_decay_) : lr(lr_), weight_decay(weight_decay_) {
    m.resize(ps.size());
    v.resize(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
        m[i].assign(ps.items()[i].second.data().size(), R(0));
        v[i].assign(ps.items()[i].second.data().size(), R(0));
    }
}

template <class R>
void AdamW<R>::step(Params<R>& ps) {
    if (m.size() != ps.size()) throw std::invalid_argument("AdamW: parameter set changed");
    ++step_count;
    const R bc1 = R(1) - static_cast<R>(std::pow(static_cast<double>(beta1), static_cast<double>(step_count)));
    const R bc2 = R(1) - static_cast<R>(std::pow(static_cast<double>(beta2), static_cast<double>(step_count)));
    for (size_t i = 0; i < ps.size(); ++i) {
        auto& [name, p] = ps.items()[i];
        if (!p.has_grad())
            throw std::invalid_argument("AdamW: missing grad for parameter " + name);
        const auto& g = p.grad();
        auto& val = p.mutable_data();
        auto& mi = m[i];
        auto& vi = v[i];
        const R decay = R(1) - lr * weight_decay;
        for (size_t j = 0; j < val.size(); ++j) {
            mi[j] = beta1 * mi[j] + (R(1) - beta1) * g[j];
            vi[j] = beta2 * vi[j] + (R(1) - beta2) * g[j] * g[j];
            const R mhat = mi[j] / bc1;
            const R vhat = vi[j] / bc2;
            val[j] = val[j] * decay - lr * mhat / (std::sqrt(vhat) + eps);
        }
        p.zero_grad();
    }
}

#define SDSEG_INSTANTIATE_NN(R)                                              \
    template class Params<R>;                                                \
    template struct Conv2dLayer<R>;                                          \
    template struct GroupNormLayer<R>;                                       \
    template struct LinearLayer<R>;                                          \
    template struct ResBlock<R>;                                             \
    template struct Downsample<R>;                                           \
    template struct Upsample<R>;                                             \
    template struct AttentionLayer<R>;                                       \
    template Tensor<R> timestep_embedding<R>(const std::vector<int>&, int);  \
    template void clip_grad_norm<R>(Params<R>&, R);                          \
    template struct AdamW<R>;

SDSEG_INSTANTIATE_NN(float)
SDSEG_INSTANTIATE_NN(double)

}  // namespace sdseg
