#include "sdseg/model.hpp"

#include <cmath>
#include <unordered_map>

namespace sdseg {

SDSegArch SDSegArch::from_config(const RunConfig& cfg) {
    SDSegArch a;
    a.ae.base_channels = cfg.ae_channels;
    a.ae.z_channels = cfg.z_channels;
    a.unet_base = cfg.unet_base;
    a.temb_dim = cfg.temb_dim;
    a.cross_attention = cfg.cond_mode == "cross-attention";
    return a;
}

std::string SDSegArch::arch_string() const {
    return "sdseg(" + ae.arch_string() + ",unet=" + std::to_string(unet_base) +
           ",temb=" + std::to_string(temb_dim) + ",mode=" +
           (cross_attention ? "cross-attention" : "concat") + ")";
}

std::uint64_t SDSegArch::arch_hash() const {
    const std::string s = arch_string();
    return fnv1a(s.data(), s.size());
}

template <class R>
Denoiser<R>::Denoiser(const SDSegArch& arch_, Rng& rng) : arch(arch_) {
    const int z = arch.ae.z_channels;
    const int base = arch.unet_base;
    const int mid = 2 * base;
    const int in_ch = arch.cross_attention ? z : 2 * z;

    temb1 = LinearLayer<R>(params, "unet.temb1", arch.temb_dim, arch.temb_dim, rng);
    temb2 = LinearLayer<R>(params, "unet.temb2", arch.temb_dim, arch.temb_dim, rng);
    conv_in = Conv2dLayer<R>(params, "unet.conv_in", in_ch, base, 3, 1, 1, rng);
    res1 = ResBlock<R>(params, "unet.res1", base, base, rng, arch.temb_dim);
    down = Downsample<R>(params, "unet.down", base, rng);
    res2 = ResBlock<R>(params, "unet.res2", base, mid, rng, arch.temb_dim);
    mid1 = ResBlock<R>(params, "unet.mid1", mid, mid, rng, arch.temb_dim);
    mid_attn = AttentionLayer<R>(params, "unet.mid_attn", mid, rng);
    if (arch.cross_attention) {
        CrossAttnParams<R> c;
        auto init = [&](const Shape& s, int fan) {
            Tensor<R> t = Tensor<R>::randn(s, rng);
            const R sc = static_cast<R>(std::sqrt(2.0 / fan));
            for (auto& v : t.mutable_data()) v *= sc;
            return t;
        };
        c.wq = params.add("unet.xattn.wq", init({mid, mid}, mid));
        c.wk = params.add("unet.xattn.wk", init({mid, z}, z));
        c.wv = params.add("unet.xattn.wv", init({mid, z}, z));
        c.wout = params.add("unet.xattn.wo", Tensor<R>::zeros({mid, mid}));
        mid_cross = std::move(c);
    }
    mid2 = ResBlock<R>(params, "unet.mid2", mid, mid, rng, arch.temb_dim);
    up = Upsample<R>(params, "unet.up", mid, rng);
    res3 = ResBlock<R>(params, "unet.res3", mid + base, base, rng, arch.temb_dim);
    out_norm = GroupNormLayer<R>(params, "unet.out_norm", base);
    out_conv = Conv2dLayer<R>(params, "unet.out_conv", base, z, 3, 1, 1, rng);

    if (!arch.cross_attention) {
        // conditioning channels of the input conv start at exactly zero
        auto& w = conv_in.w.mutable_data();
        const int cout = base, cin = 2 * z;
        for (int co = 0; co < cout; ++co)
            for (int ci = z; ci < cin; ++ci)
                for (int k = 0; k < 9; ++k) w[(co * cin + ci) * 9 + k] = R(0);
    }
}

template <class R>
bool Denoiser<R>::cond_slice_zero() const {
    if (arch.cross_attention) return true;
    const int z = arch.ae.z_channels;
    const int cin = 2 * z;
    const auto& w = conv_in.w.data();
    for (int co = 0; co < arch.unet_base; ++co)
        for (int ci = z; ci < cin; ++ci)
            for (int k = 0; k < 9; ++k)
                if (w[(co * cin + ci) * 9 + k] != R(0)) return false;
    return true;
}

template <class R>
Tensor<R> Denoiser<R>::forward(const Tensor<R>& z_t, const std::vector<int>& t,
                               const Tensor<R>& z_c) const {
    if (z_t.shape() != z_c.shape())
        throw std::invalid_argument("denoiser: z_t " + shape_str(z_t.shape()) + " vs z_c " +
                                    shape_str(z_c.shape()));
    ++calls;
    Tensor<R> emb = timestep_embedding<R>(t, arch.temb_dim);
    emb = temb2.forward(silu(temb1.forward(emb)));

    Tensor<R> x = arch.cross_attention ? z_t : concat_channels<R>({z_t, z_c});
    Tensor<R> h0 = conv_in.forward(x);
    Tensor<R> h1 = res1.forward(h0, &emb);
    Tensor<R> h2 = res2.forward(down.forward(h1), &emb);
    Tensor<R> m = mid_attn.forward(mid1.forward(h2, &emb));
    if (arch.cross_attention)
        m = cross_attention(m, z_c, mid_cross->wq, mid_cross->wk, mid_cross->wv, mid_cross->wout);
    m = mid2.forward(m, &emb);
    Tensor<R> u = up.forward(m);
    Tensor<R> o = res3.forward(concat_channels<R>({u, h1}), &emb);
    return out_conv.forward(silu(out_norm.forward(o)));
}

template <class R>
VisionEncoder<R>::VisionEncoder(const AEConfig& cfg_, Rng& rng) : cfg(cfg_) {
    enc = Encoder<R>(params, "tau", cfg, rng);
}

template <class R>
void VisionEncoder<R>::init_from_autoencoder(const Params<R>& ae_params) {
    std::unordered_map<std::string, const Tensor<R>*> src;
    for (const auto& [name, t] : ae_params.items())
        if (name.rfind("enc.", 0) == 0) src["tau." + name.substr(4)] = &t;
    for (auto& [name, t] : params.items()) {
        auto it = src.find(name);
        if (it == src.end())
            throw std::invalid_argument("vision encoder init: no source for " + name);
        if (it->second->shape() != t.shape())
            throw std::invalid_argument("vision encoder init: shape mismatch for " + name);
        t.mutable_data() = it->second->data();
    }
}

template <class R>
Tensor<R> encode_condition(const VisionEncoder<R>& tau, const Tensor<R>& image, R latent_scale,
                           bool trainable) {
    if (trainable) return scale(tau.forward_mean(image), latent_scale);
    NoGradGuard ng;
    return scale(tau.forward_mean(image), latent_scale);
}

SDSeg::SDSeg(const RunConfig& cfg_, Rng& init)
    : cfg(cfg_),
      arch(SDSegArch::from_config(cfg_)),
      ae(arch.ae, init),
      tau(arch.ae, init),
      unet(arch, init),
      sched(make_schedule(cfg_.timesteps, cfg_.beta_start, cfg_.beta_end)) {}

SDSeg SDSeg::fresh(const RunConfig& cfg, const Checkpoint& ae_ckpt) {
    // deterministic init: all weights are a pure function of cfg.seed
    Rng init = Rng(cfg.seed).split(0x1217);
    SDSeg m(cfg, init);
    ae_from_checkpoint(m.ae, ae_ckpt);
    m.ae.params.set_trainable(false);
    m.tau.init_from_autoencoder(m.ae.params);
    m.tau.params.set_trainable(cfg.trainable_encoder);
    return m;
}

SDSeg SDSeg::from_checkpoint(const Checkpoint& ckpt) {
    RunConfig cfg = RunConfig::from_json(ckpt.config);
    Rng scratch(0);
    SDSeg m(cfg, scratch);
    require_arch(ckpt, m.arch.arch_hash());
    auto restore = [&](Params<float>& ps) {
        for (auto& [name, t] : ps.items()) {
            Tensorf stored = ckpt.find(name);
            if (stored.shape() != t.shape())
                throw CheckpointError(CheckpointError::Kind::Corrupt,
                                      "checkpoint: shape mismatch for " + name);
            t.mutable_data() = stored.data();
        }
    };
    restore(m.ae.params);
    restore(m.tau.params);
    restore(m.unet.params);
    m.ae.latent_scale = ckpt.find("latent_scale").item();
    m.ae.params.set_trainable(false);
    m.tau.params.set_trainable(cfg.trainable_encoder);
    return m;
}

DenoiseFn<float> SDSeg::fn() const {
    return [this](const Tensorf& z_t, const std::vector<int>& t, const Tensorf& z_c) {
        return unet.forward(z_t, t, z_c);
    };
}

SDSegTrainLog train_sdseg(SDSeg& model, const Dataset& train, const RunConfig& cfg,
                          const std::function<void(const SDSegTrainEntry&)>& on_log,
                          const CkptFn& on_ckpt) {
    if (train.size() == 0) throw std::invalid_argument("train_sdseg: empty dataset");
    SDSegTrainLog log;

    const std::uint64_t ae_hash_before = model.ae_param_hash();

    // frozen AE: mask latents are fixed, so encode each sample once
    std::vector<Tensorf> z0_cache(train.size());
    // frozen tau: conditioning latents are fixed too
    const bool tau_trainable = cfg.trainable_encoder;
    std::vector<Tensorf> zc_cache(tau_trainable ? 0 : train.size());

    Params<float>& opt_params = log.opt_params;
    for (auto& item : model.unet.params.items()) opt_params.items().push_back(item);
    if (tau_trainable)
        for (auto& item : model.tau.params.items()) opt_params.items().push_back(item);
    log.opt = AdamW<float>(opt_params, static_cast<float>(cfg.lr), 0.01f);
    AdamW<float>& opt = log.opt;

    Rng run(cfg.seed);
    Rng trng = run.split(0x5d01);
    Rng nrng = run.split(0x5d02);
    Batcher batcher(train, cfg.batch, run.split(0x5d03).key());

    const float scale_v = model.ae.latent_scale;
    const int zc_ch = model.arch.ae.z_channels;
    const int hl = cfg.image_size / 8;

    for (int step = 0; step < cfg.sdseg_steps; ++step) {
        const std::vector<int> idx = batcher.next();
        const int B = static_cast<int>(idx.size());

        // z0: scaled encoder modes of the batch masks
        Tensorf z0 = Tensorf::zeros({B, zc_ch, hl, hl});
        {
            NoGradGuard ng;
            for (int b = 0; b < B; ++b) {
                Tensorf& slot = z0_cache[idx[b]];
                if (!slot.defined()) {
                    Tensorf m = stack_masks(train, {idx[b]});
                    slot = scale(model.ae.encode(mask_to_ae_input(m)).mode(), scale_v);
                }
                std::copy(slot.data().begin(), slot.data().end(),
                          z0.mutable_data().begin() +
                              static_cast<std::int64_t>(b) * zc_ch * hl * hl);
            }
        }

        Tensorf z_c;
        if (tau_trainable) {
            z_c = encode_condition(model.tau, stack_images(train, idx), scale_v, true);
        } else {
            NoGradGuard ng;
            z_c = Tensorf::zeros({B, zc_ch, hl, hl});
            for (int b = 0; b < B; ++b) {
                Tensorf& slot = zc_cache[idx[b]];
                if (!slot.defined())
                    slot = encode_condition(model.tau, stack_images(train, {idx[b]}), scale_v, false);
                std::copy(slot.data().begin(), slot.data().end(),
                          z_c.mutable_data().begin() +
                              static_cast<std::int64_t>(b) * zc_ch * hl * hl);
            }
        }

        std::vector<int> ts(B);
        for (int b = 0; b < B; ++b)
            ts[b] = static_cast<int>(trng.next_u64() % static_cast<std::uint64_t>(cfg.timesteps));
        Tensorf n = Tensorf::randn(z0.shape(), nrng);

        auto lt = training_loss<float>(z0, z_c, ts, n, model.fn(), model.sched,
                                       static_cast<float>(cfg.lambda));
        const float total = lt.total.item();
        if (!std::isfinite(total))
            throw std::runtime_error("train_sdseg: non-finite loss at step " + std::to_string(step));
        lt.total.backward();
        clip_grad_norm(opt_params, static_cast<float>(cfg.grad_clip));
        opt.step(opt_params);

        if (step % cfg.log_every == 0 || step + 1 == cfg.sdseg_steps) {
            SDSegTrainEntry e{step, total, lt.noise.item(), lt.latent.item()};
            log.entries.push_back(e);
            if (on_log) on_log(e);
        }
        if (on_ckpt && cfg.ckpt_every > 0 && step > 0 && (step + 1) % cfg.ckpt_every == 0)
            on_ckpt(step + 1, opt, opt_params);
    }

    if (model.ae_param_hash() != ae_hash_before)
        throw std::runtime_error("train_sdseg: frozen autoencoder parameters changed");
    return log;
}

Checkpoint sdseg_to_checkpoint(const SDSeg& model, const AdamW<float>* opt,
                               const Params<float>* opt_params, std::int64_t step) {
    Checkpoint c;
    c.step = step;
    c.arch_hash = model.arch.arch_hash();
    c.config = model.cfg.to_json();
    for (const auto& [name, t] : model.ae.params.items()) c.put(name, t);
    for (const auto& [name, t] : model.tau.params.items()) c.put(name, t);
    for (const auto& [name, t] : model.unet.params.items()) c.put(name, t);
    c.put("latent_scale", Tensorf::from_data({1}, {model.ae.latent_scale}));
    if (opt && opt_params) {
        const auto& items = opt_params->items();
        for (size_t i = 0; i < items.size() && i < opt->m.size(); ++i) {
            c.put("opt.m." + items[i].first, Tensorf::from_data(items[i].second.shape(), opt->m[i]));
            c.put("opt.v." + items[i].first, Tensorf::from_data(items[i].second.shape(), opt->v[i]));
        }
        c.put("opt.step", Tensorf::from_data({1}, {static_cast<float>(opt->step_count)}));
    }
    return c;
}

namespace {

Tensorf channel_mean3(const Tensorf& x) {
    const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
    Tensorf out = Tensorf::zeros({B, 1, H, W});
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < hw; ++i) {
            const float s = x.data()[(b * 3 + 0) * hw + i] + x.data()[(b * 3 + 1) * hw + i] +
                            x.data()[(b * 3 + 2) * hw + i];
            out.mutable_data()[b * hw + i] = s / 3.0f;
        }
    return out;
}

}  // namespace

InferResult infer_image(const SDSeg& model, const Tensorf& image, const ReverseSpec& spec, Rng rng) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("infer: expected [3,H,W] image");
    if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0)
        throw std::invalid_argument("infer: spatial dims must be divisible by 8");
    NoGradGuard ng;
    const std::int64_t calls_before = model.unet.calls;

    Tensorf img4 = Tensorf::from_data({1, 3, image.dim(1), image.dim(2)},
                                      std::vector<float>(image.data()));
    Tensorf z_c = encode_condition(model.tau, img4, model.ae.latent_scale, false);

    Tensorf z0_hat;
    if (spec.mode == ReverseSpec::Mode::SingleStep) {
        z0_hat = single_step_infer(rng, z_c, model.sched, model.fn());
    } else {
        Tensorf z_T = Tensorf::randn(z_c.shape(), rng);
        z0_hat = ddim_sample(z_T, z_c, spec.ddim_steps, model.sched, model.fn());
    }

    Tensorf decoded = model.ae.decode(scale(z0_hat, 1.0f / model.ae.latent_scale));
    Tensorf prob4 = clamp(scale(add(channel_mean3(decoded), 1.0f), 0.5f), 0.0f, 1.0f);

    InferResult res;
    const int H = image.dim(1), W = image.dim(2);
    res.prob = Tensorf::from_data({1, H, W}, std::vector<float>(prob4.data()));
    std::vector<float> m(res.prob.data().size());
    for (size_t i = 0; i < m.size(); ++i) m[i] = res.prob.data()[i] >= 0.5f ? 1.0f : 0.0f;
    res.mask = Tensorf::from_data({1, H, W}, std::move(m));
    res.denoiser_calls = model.unet.calls - calls_before;
    return res;
}

#define SDSEG_INSTANTIATE_MODEL(R)     \
    template struct Denoiser<R>;       \
    template struct VisionEncoder<R>;  \
    template Tensor<R> encode_condition<R>(const VisionEncoder<R>&, const Tensor<R>&, R, bool);

SDSEG_INSTANTIATE_MODEL(float)
SDSEG_INSTANTIATE_MODEL(double)

}  // namespace sdseg
