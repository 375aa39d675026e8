#pragma once

#include "sdseg/model.hpp"

namespace sdseg {

// overlap metrics on strictly binary masks; both-empty convention -> 1.0
double dice(const Tensorf& pred, const Tensorf& gt);
double iou(const Tensorf& pred, const Tensorf& gt);

// similarity metrics on [0,1] maps; psnr(a,a) reports the 100 dB cap
double psnr(const Tensorf& a, const Tensorf& b, double range = 1.0);
// 11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03, valid region
double ssim(const Tensorf& a, const Tensorf& b);
// 3 scales (64x64 floor for the 11-tap window), renormalized standard weights
double ms_ssim(const Tensorf& a, const Tensorf& b);

// Deterministic random-feature perceptual distance standing in for the
// learned LPIPS net: a frozen 3-layer conv stack with a shipped seed,
// channel-unit-normalized features, squared differences averaged per layer.
// Not numerically comparable to published LPIPS values.
inline constexpr std::uint64_t kFeatDistSeed = 0x5d5e6ull;
double feat_dist(const Tensorf& a, const Tensorf& b, std::uint64_t seed = kFeatDistSeed);

// [1,H,W] or [H,W] -> [3,H,W]
Tensorf replicate3(const Tensorf& t);

struct EvalReport {
    std::vector<double> dice_per;
    std::vector<double> iou_per;
    double mean_dice = 0;
    double mean_iou = 0;
};

EvalReport evaluate_masks(const std::vector<Tensorf>& pred, const std::vector<Tensorf>& gt);

// prediction produced for one sample under one noise seed
struct Prediction {
    Tensorf prob;  // [1,H,W]
    Tensorf mask;  // [1,H,W]
};

using PredictFn = std::function<Prediction(const SegSample&, std::uint64_t run_seed)>;

struct StabilityReport {
    // dataset-level: mean feat_dist over image-aligned pairs across run pairs
    double featdist_seg = 0, featdist_score = 0;
    // instance-level: mean pairwise similarity per image, averaged over images
    double psnr_seg = 0, psnr_score = 0;
    double ssim_seg = 0, ssim_score = 0;
    double msssim_seg = 0, msssim_score = 0;
    int runs = 0;
};

// M >= 2 repeated inferences over the test set with distinct noise seeds
StabilityReport stability_eval(const PredictFn& predict, const Dataset& test, int M,
                               const std::vector<std::uint64_t>& run_seeds);

// mean Dice/IoU of a trained model over a test split
struct SplitScore {
    double dice = 0, iou = 0;
};
SplitScore score_model(const SDSeg& model, const Dataset& test, const ReverseSpec& spec,
                       std::uint64_t eval_seed);

// the four-arm study: cross-attn baseline, +concat, +trainable encoder,
// +latent estimation; a shared seed and step count across arms
struct AblationArm {
    std::string name;
    RunConfig cfg;
    ReverseSpec eval_spec;
    double dice = 0, iou = 0;
    Checkpoint ckpt;
};
std::vector<AblationArm> ablation_run(const Dataset& train, const Dataset& test,
                                      const Checkpoint& ae_ckpt, const RunConfig& base,
                                      const std::function<void(const std::string&)>& progress = {});

// Dice vs DDIM step count for a lambda=1 / lambda=0 checkpoint pair
struct ReverseCurvePoint {
    int steps;
    double dice_lambda1;
    double dice_lambda0;
};
std::vector<ReverseCurvePoint> reverse_curve(const SDSeg& model_l1, const SDSeg& model_l0,
                                             const std::vector<int>& steps_list,
                                             const Dataset& test, std::uint64_t eval_seed);

}  // namespace sdseg
