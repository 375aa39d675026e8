#pragma once

#include <functional>

#include "sdseg/data.hpp"
#include "sdseg/io.hpp"
#include "sdseg/nn.hpp"

namespace sdseg {

struct AEConfig {
    int base_channels = 32;  // C; channel plan is C, 2C, 4C down the pyramid
    int z_channels = 4;      // Z; the posterior carries 2Z (mean | logvar)

    std::string arch_string() const;
    std::uint64_t arch_hash() const;
};

template <class R>
struct GaussianPosterior {
    Tensor<R> mean;    // [B,Z,h,w]
    Tensor<R> logvar;  // clamped to [-30, 20]

    Tensor<R> mode() const { return mean; }
    Tensor<R> sample(Rng& rng) const;
    // mean over elements of 0.5*(mu^2 + sigma^2 - 1 - logvar)
    Tensor<R> kl() const;
};

// Downsampling (conv, 3x [ResBlock x2 + Down], ResBlock x2), Mid (ResBlock,
// Attention, ResBlock), Out (GroupNorm, Conv3x3 -> 2Z, Conv1x1 -> 2Z).
template <class R>
struct Encoder {
    AEConfig cfg;
    Conv2dLayer<R> conv_in;
    ResBlock<R> l1a, l1b;
    Downsample<R> down1;
    ResBlock<R> l2a, l2b;
    Downsample<R> down2;
    ResBlock<R> l3a, l3b;
    Downsample<R> down3;
    ResBlock<R> l4a, l4b;
    ResBlock<R> mid1;
    AttentionLayer<R> mid_attn;
    ResBlock<R> mid2;
    GroupNormLayer<R> out_norm;
    Conv2dLayer<R> out_conv;    // 4C -> 2Z
    Conv2dLayer<R> quant_conv;  // 1x1, 2Z -> 2Z

    Encoder() = default;
    Encoder(Params<R>& ps, const std::string& prefix, const AEConfig& cfg, Rng& rng);
    GaussianPosterior<R> forward(const Tensor<R>& x) const;
};

// mirror: conv in from Z, mid block, 3x [ResBlock x2 + Upsample], out conv to 3
template <class R>
struct Decoder {
    AEConfig cfg;
    Conv2dLayer<R> conv_in;
    ResBlock<R> mid1;
    AttentionLayer<R> mid_attn;
    ResBlock<R> mid2;
    ResBlock<R> la1, la2;
    Upsample<R> up1;
    ResBlock<R> lb1, lb2;
    Upsample<R> up2;
    ResBlock<R> lc1, lc2;
    Upsample<R> up3;
    GroupNormLayer<R> out_norm;
    Conv2dLayer<R> out_conv;  // C -> 3

    Decoder() = default;
    Decoder(Params<R>& ps, const std::string& prefix, const AEConfig& cfg, Rng& rng);
    Tensor<R> forward(const Tensor<R>& z) const;
};

template <class R>
struct Autoencoder {
    AEConfig cfg;
    Params<R> params;
    Encoder<R> enc;
    Decoder<R> dec;
    R latent_scale = R(1);

    Autoencoder(const AEConfig& cfg, Rng& rng);
    GaussianPosterior<R> encode(const Tensor<R>& x) const;
    Tensor<R> decode(const Tensor<R>& z) const;
};

using AutoencoderF = Autoencoder<float>;

struct AETrainConfig {
    int steps = 3000;
    int batch = 4;
    float lr = 1e-4f;
    float kl_weight = 1e-6f;
    float grad_clip = 0.0f;
    std::uint64_t seed = 0;
    int log_every = 100;
};

struct AETrainLog {
    std::vector<std::pair<int, float>> losses;  // (step, total loss)
    AdamW<float> opt;
};

// Trains on a 50/50 mix of replicated masks and conditioning images, then
// computes latent_scale = 1 / std of encoder-mode latents over the train set.
AETrainLog train_autoencoder(AutoencoderF& ae, const Dataset& train, const AETrainConfig& cfg,
                             const std::function<void(int, float)>& on_log = {});

// checkpoint round trip (parameters + latent scale [+ optimizer moments])
Checkpoint ae_to_checkpoint(const AutoencoderF& ae, const json& config_snapshot, std::int64_t step,
                            const AdamW<float>* opt = nullptr);
void ae_from_checkpoint(AutoencoderF& ae, const Checkpoint& c);

}  // namespace sdseg
