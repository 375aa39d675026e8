#include "sdseg/autoencoder.hpp"

#include <cmath>
#include <cstdio>

namespace sdseg {

std::string AEConfig::arch_string() const {
    return "ae(C=" + std::to_string(base_channels) + ",Z=" + std::to_string(z_channels) + ")";
}

std::uint64_t AEConfig::arch_hash() const {
    const std::string s = arch_string();
    return fnv1a(s.data(), s.size());
}

template <class R>
Tensor<R> GaussianPosterior<R>::sample(Rng& rng) const {
    Tensor<R> eps = Tensor<R>::randn(mean.shape(), rng);
    return add(mean, mul(exp(scale(logvar, R(0.5))), eps));
}

template <class R>
Tensor<R> GaussianPosterior<R>::kl() const {
    // 0.5 * (mu^2 + exp(logvar) - 1 - logvar), averaged over elements
    Tensor<R> term = sub(sub(add(pow2(mean), exp(logvar)), R(1)), logvar);
    return scale(mean_all(term), R(0.5));
}

template <class R>
Encoder<R>::Encoder(Params<R>& ps, const std::string& p, const AEConfig& cfg_, Rng& rng)
    : cfg(cfg_) {
    const int c1 = cfg.base_channels, c2 = 2 * c1, c4 = 4 * c1;
    conv_in = Conv2dLayer<R>(ps, p + ".conv_in", 3, c1, 3, 1, 1, rng);
    l1a = ResBlock<R>(ps, p + ".l1a", c1, c1, rng);
    l1b = ResBlock<R>(ps, p + ".l1b", c1, c1, rng);
    down1 = Downsample<R>(ps, p + ".down1", c1, rng);
    l2a = ResBlock<R>(ps, p + ".l2a", c1, c2, rng);
    l2b = ResBlock<R>(ps, p + ".l2b", c2, c2, rng);
    down2 = Downsample<R>(ps, p + ".down2", c2, rng);
    l3a = ResBlock<R>(ps, p + ".l3a", c2, c4, rng);
    l3b = ResBlock<R>(ps, p + ".l3b", c4, c4, rng);
    down3 = Downsample<R>(ps, p + ".down3", c4, rng);
    l4a = ResBlock<R>(ps, p + ".l4a", c4, c4, rng);
    l4b = ResBlock<R>(ps, p + ".l4b", c4, c4, rng);
    mid1 = ResBlock<R>(ps, p + ".mid1", c4, c4, rng);
    mid_attn = AttentionLayer<R>(ps, p + ".mid_attn", c4, rng);
    mid2 = ResBlock<R>(ps, p + ".mid2", c4, c4, rng);
    out_norm = GroupNormLayer<R>(ps, p + ".out_norm", c4);
    out_conv = Conv2dLayer<R>(ps, p + ".out_conv", c4, 2 * cfg.z_channels, 3, 1, 1, rng);
    quant_conv = Conv2dLayer<R>(ps, p + ".quant_conv", 2 * cfg.z_channels, 2 * cfg.z_channels, 1, 1, 0, rng);
}

template <class R>
GaussianPosterior<R> Encoder<R>::forward(const Tensor<R>& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3)
        throw std::invalid_argument("encode: expected [B,3,H,W], got " + shape_str(x.shape()));
    if (x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0)
        throw std::invalid_argument("encode: spatial dims must be divisible by 8, got " +
                                    shape_str(x.shape()));
    Tensor<R> h = conv_in.forward(x);
    h = down1.forward(l1b.forward(l1a.forward(h)));
    h = down2.forward(l2b.forward(l2a.forward(h)));
    h = down3.forward(l3b.forward(l3a.forward(h)));
    h = l4b.forward(l4a.forward(h));
    h = mid2.forward(mid_attn.forward(mid1.forward(h)));
    h = quant_conv.forward(out_conv.forward(silu(out_norm.forward(h))));
    auto moments = chunk_channels(h, 2);
    GaussianPosterior<R> post;
    post.mean = moments[0];
    post.logvar = clamp(moments[1], R(-30), R(20));
    return post;
}

template <class R>
Decoder<R>::Decoder(Params<R>& ps, const std::string& p, const AEConfig& cfg_, Rng& rng)
    : cfg(cfg_) {
    const int c1 = cfg.base_channels, c2 = 2 * c1, c4 = 4 * c1;
    conv_in = Conv2dLayer<R>(ps, p + ".conv_in", cfg.z_channels, c4, 3, 1, 1, rng);
    mid1 = ResBlock<R>(ps, p + ".mid1", c4, c4, rng);
    mid_attn = AttentionLayer<R>(ps, p + ".mid_attn", c4, rng);
    mid2 = ResBlock<R>(ps, p + ".mid2", c4, c4, rng);
    la1 = ResBlock<R>(ps, p + ".la1", c4, c4, rng);
    la2 = ResBlock<R>(ps, p + ".la2", c4, c4, rng);
    up1 = Upsample<R>(ps, p + ".up1", c4, rng);
    lb1 = ResBlock<R>(ps, p + ".lb1", c4, c2, rng);
    lb2 = ResBlock<R>(ps, p + ".lb2", c2, c2, rng);
    up2 = Upsample<R>(ps, p + ".up2", c2, rng);
    lc1 = ResBlock<R>(ps, p + ".lc1", c2, c1, rng);
    lc2 = ResBlock<R>(ps, p + ".lc2", c1, c1, rng);
    up3 = Upsample<R>(ps, p + ".up3", c1, rng);
    out_norm = GroupNormLayer<R>(ps, p + ".out_norm", c1);
    out_conv = Conv2dLayer<R>(ps, p + ".out_conv", c1, 3, 3, 1, 1, rng);
}

template <class R>
Tensor<R> Decoder<R>::forward(const Tensor<R>& z) const {
    if (z.ndim() != 4 || z.dim(1) != cfg.z_channels)
        throw std::invalid_argument("decode: expected [B," + std::to_string(cfg.z_channels) +
                                    ",h,w], got " + shape_str(z.shape()));
    Tensor<R> h = conv_in.forward(z);
    h = mid2.forward(mid_attn.forward(mid1.forward(h)));
    h = up1.forward(la2.forward(la1.forward(h)));
    h = up2.forward(lb2.forward(lb1.forward(h)));
    h = up3.forward(lc2.forward(lc1.forward(h)));
    return out_conv.forward(silu(out_norm.forward(h)));
}

template <class R>
Autoencoder<R>::Autoencoder(const AEConfig& cfg_, Rng& rng) : cfg(cfg_) {
    enc = Encoder<R>(params, "enc", cfg, rng);
    dec = Decoder<R>(params, "dec", cfg, rng);
}

template <class R>
GaussianPosterior<R> Autoencoder<R>::encode(const Tensor<R>& x) const {
    return enc.forward(x);
}

template <class R>
Tensor<R> Autoencoder<R>::decode(const Tensor<R>& z) const {
    return dec.forward(z);
}

AETrainLog train_autoencoder(AutoencoderF& ae, const Dataset& train, const AETrainConfig& cfg,
                             const std::function<void(int, float)>& on_log) {
    if (train.size() == 0) throw std::invalid_argument("train_autoencoder: empty dataset");
    AETrainLog log;
    log.opt = AdamW<float>(ae.params, cfg.lr, 0.01f);
    AdamW<float>& opt = log.opt;
    Rng run(cfg.seed);
    Rng sample_rng = run.split(0xae5a);

    // 50/50 pool: even index -> replicated mask, odd -> conditioning image
    const size_t pool = 2 * train.size();
    std::vector<int> order(pool);
    Rng shuffle_master = run.split(0xae00);
    int epoch = -1;
    size_t cursor = pool;

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<int> batch_items;
        while (batch_items.size() < static_cast<size_t>(cfg.batch)) {
            if (cursor >= pool) {
                ++epoch;
                cursor = 0;
                for (size_t i = 0; i < pool; ++i) order[i] = static_cast<int>(i);
                Rng r = shuffle_master.split(static_cast<std::uint64_t>(epoch));
                for (size_t i = pool; i > 1; --i)
                    std::swap(order[i - 1], order[r.next_u64() % i]);
            }
            batch_items.push_back(order[cursor++]);
        }

        const int B = cfg.batch;
        const int H = train.manifest.height, W = train.manifest.width;
        Tensorf x = Tensorf::zeros({B, 3, H, W});
        const std::int64_t per = 3LL * H * W;
        for (int b = 0; b < B; ++b) {
            const int item = batch_items[b];
            const int si = item / 2;
            if (item % 2 == 0) {
                const auto& m = train.samples[si].mask.data();
                for (int c = 0; c < 3; ++c)
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i)
                        x.mutable_data()[b * per + c * H * W + i] = m[i] * 2.0f - 1.0f;
            } else {
                std::copy(train.samples[si].image.data().begin(),
                          train.samples[si].image.data().end(), x.mutable_data().begin() + b * per);
            }
        }

        GaussianPosterior<float> post = ae.encode(x);
        Tensorf z = post.sample(sample_rng);
        Tensorf recon = ae.decode(z);
        Tensorf loss = add(l1_distance(recon, x), scale(post.kl(), cfg.kl_weight));
        const float lv = loss.item();
        if (!std::isfinite(lv))
            throw std::runtime_error("train_autoencoder: non-finite loss at step " +
                                     std::to_string(step));
        loss.backward();
        clip_grad_norm(ae.params, cfg.grad_clip);
        opt.step(ae.params);
        if (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log.losses.emplace_back(step, lv);
            if (on_log) on_log(step, lv);
        }
    }

    // latent scale: 1/std of encoder-mode latents over the mask corpus
    {
        NoGradGuard ng;
        double sum = 0.0, sq = 0.0;
        std::int64_t count = 0;
        for (size_t i = 0; i < train.size(); ++i) {
            Tensorf m = stack_masks(train, {static_cast<int>(i)});
            Tensorf z = ae.encode(mask_to_ae_input(m)).mode();
            for (float v : z.data()) {
                sum += v;
                sq += static_cast<double>(v) * v;
                ++count;
            }
        }
        const double mean = sum / static_cast<double>(count);
        const double var = sq / static_cast<double>(count) - mean * mean;
        ae.latent_scale = static_cast<float>(1.0 / std::sqrt(std::max(var, 1e-12)));
    }
    return log;
}

Checkpoint ae_to_checkpoint(const AutoencoderF& ae, const json& config_snapshot, std::int64_t step,
                            const AdamW<float>* opt) {
    Checkpoint c;
    c.step = step;
    c.arch_hash = ae.cfg.arch_hash();
    c.config = config_snapshot;
    for (const auto& [name, t] : ae.params.items()) c.put(name, t);
    c.put("latent_scale", Tensorf::from_data({1}, {ae.latent_scale}));
    if (opt) {
        const auto& items = ae.params.items();
        for (size_t i = 0; i < items.size() && i < opt->m.size(); ++i) {
            c.put("opt.m." + items[i].first, Tensorf::from_data(items[i].second.shape(), opt->m[i]));
            c.put("opt.v." + items[i].first, Tensorf::from_data(items[i].second.shape(), opt->v[i]));
        }
        c.put("opt.step", Tensorf::from_data({1}, {static_cast<float>(opt->step_count)}));
    }
    return c;
}

void ae_from_checkpoint(AutoencoderF& ae, const Checkpoint& c) {
    require_arch(c, ae.cfg.arch_hash());
    for (auto& [name, t] : ae.params.items()) {
        Tensorf stored = c.find(name);
        if (stored.shape() != t.shape())
            throw CheckpointError(CheckpointError::Kind::Corrupt,
                                  "checkpoint: shape mismatch for " + name);
        t.mutable_data() = stored.data();
    }
    ae.latent_scale = c.find("latent_scale").item();
}

#define SDSEG_INSTANTIATE_AE(R)          \
    template struct GaussianPosterior<R>; \
    template struct Encoder<R>;           \
    template struct Decoder<R>;           \
    template struct Autoencoder<R>;

SDSEG_INSTANTIATE_AE(float)
SDSEG_INSTANTIATE_AE(double)

}  // namespace sdseg
