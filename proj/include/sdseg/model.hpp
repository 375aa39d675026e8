#pragma once

#include "sdseg/autoencoder.hpp"
#include "sdseg/diffusion.hpp"

namespace sdseg {

struct SDSegArch {
    AEConfig ae;
    int unet_base = 32;
    int temb_dim = 128;
    bool cross_attention = false;

    static SDSegArch from_config(const RunConfig& cfg);
    std::string arch_string() const;
    std::uint64_t arch_hash() const;
};

template <class R>
struct CrossAttnParams {
    Tensor<R> wq, wk, wv, wout;
};

// Conditional denoising U-Net. Concat mode takes 2Z input channels (noisy
// latent | conditioning latent) with the conditioning slice of the input conv
// zero-initialized; cross-attention mode takes Z channels and attends over the
// 64 flattened z_c tokens in the mid block.
template <class R>
struct Denoiser {
    SDSegArch arch;
    Params<R> params;
    LinearLayer<R> temb1, temb2;
    Conv2dLayer<R> conv_in;
    ResBlock<R> res1;
    Downsample<R> down;
    ResBlock<R> res2;
    ResBlock<R> mid1;
    AttentionLayer<R> mid_attn;
    std::optional<CrossAttnParams<R>> mid_cross;
    ResBlock<R> mid2;
    Upsample<R> up;
    ResBlock<R> res3;
    GroupNormLayer<R> out_norm;
    Conv2dLayer<R> out_conv;

    mutable std::int64_t calls = 0;  // inference instrumentation

    Denoiser(const SDSegArch& arch, Rng& rng);
    Tensor<R> forward(const Tensor<R>& z_t, const std::vector<int>& t, const Tensor<R>& z_c) const;
    // true iff the input-conv slice over the conditioning channels is all zero
    bool cond_slice_zero() const;
};

// trainable copy of the autoencoder's encoder; emits the posterior mean
template <class R>
struct VisionEncoder {
    AEConfig cfg;
    Params<R> params;
    Encoder<R> enc;

    VisionEncoder(const AEConfig& cfg, Rng& rng);
    void init_from_autoencoder(const Params<R>& ae_params);
    Tensor<R> forward_mean(const Tensor<R>& image) const { return enc.forward(image).mode(); }
};

// z_c = latent_scale * mean-channels of tau(image); detached when frozen
template <class R>
Tensor<R> encode_condition(const VisionEncoder<R>& tau, const Tensor<R>& image, R latent_scale,
                           bool trainable);

struct SDSeg {
    RunConfig cfg;
    SDSegArch arch;
    AutoencoderF ae;
    VisionEncoder<float> tau;
    Denoiser<float> unet;
    NoiseSchedule sched;

    SDSeg(const RunConfig& cfg, Rng& init);
    // fresh model: AE restored from its checkpoint, tau copies the AE encoder
    static SDSeg fresh(const RunConfig& cfg, const Checkpoint& ae_ckpt);
    static SDSeg from_checkpoint(const Checkpoint& ckpt);

    DenoiseFn<float> fn() const;
    std::uint64_t ae_param_hash() const { return ae.params.value_hash(); }
};

struct SDSegTrainEntry {
    int step;
    float total, noise, latent;
};

struct SDSegTrainLog {
    std::vector<SDSegTrainEntry> entries;
    Params<float> opt_params;  // optimizer's view (unet, then tau when trainable)
    AdamW<float> opt;
};

using CkptFn = std::function<void(int, const AdamW<float>&, const Params<float>&)>;

SDSegTrainLog train_sdseg(SDSeg& model, const Dataset& train, const RunConfig& cfg,
                          const std::function<void(const SDSegTrainEntry&)>& on_log = {},
                          const CkptFn& on_ckpt = {});

// opt/opt_params may be null: checkpoint then carries parameters only
Checkpoint sdseg_to_checkpoint(const SDSeg& model, const AdamW<float>* opt,
                               const Params<float>* opt_params, std::int64_t step);

struct InferResult {
    Tensorf prob;  // [1,H,W] in [0,1]
    Tensorf mask;  // [1,H,W] in {0,1}
    std::int64_t denoiser_calls = 0;
};

InferResult infer_image(const SDSeg& model, const Tensorf& image, const ReverseSpec& spec, Rng rng);

}  // namespace sdseg
