#include "sdseg/metrics.hpp"

#include <cmath>

#include "sdseg/ops.hpp"

namespace sdseg {

namespace {

void check_binary(const Tensorf& t, const char* op) {
    for (float v : t.data())
        if (v != 0.0f && v != 1.0f)
            throw std::invalid_argument(std::string(op) + ": input is not binary");
}

void check_same(const Tensorf& a, const Tensorf& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

struct Overlap {
    std::int64_t inter = 0, a = 0, b = 0;
};

Overlap overlap(const Tensorf& pred, const Tensorf& gt, const char* op) {
    check_same(pred, gt, op);
    check_binary(pred, op);
    check_binary(gt, op);
    Overlap o;
    for (size_t i = 0; i < pred.data().size(); ++i) {
        const bool p = pred.data()[i] == 1.0f;
        const bool g = gt.data()[i] == 1.0f;
        o.a += p;
        o.b += g;
        o.inter += p && g;
    }
    return o;
}

}  // namespace

double dice(const Tensorf& pred, const Tensorf& gt) {
    const Overlap o = overlap(pred, gt, "dice");
    if (o.a + o.b == 0) return 1.0;
    return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.a + o.b);
}

double iou(const Tensorf& pred, const Tensorf& gt) {
    const Overlap o = overlap(pred, gt, "iou");
    const std::int64_t uni = o.a + o.b - o.inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(o.inter) / static_cast<double>(uni);
}

double psnr(const Tensorf& a, const Tensorf& b, double range) {
    check_same(a, b, "psnr");
    double mse = 0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        const double d = static_cast<double>(a.data()[i]) - b.data()[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data().size());
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(range * range / mse));
}

namespace {

// single-channel [H,W] view of [H,W] or [1,H,W]
std::pair<int, int> gray_dims(const Tensorf& t, const char* op) {
    if (t.ndim() == 2) return {t.dim(0), t.dim(1)};
    if (t.ndim() == 3 && t.dim(0) == 1) return {t.dim(1), t.dim(2)};
    throw std::invalid_argument(std::string(op) + ": expected [H,W] or [1,H,W], got " +
                                shape_str(t.shape()));
}

std::vector<double> gaussian11() {
    std::vector<double> w(11);
    double sum = 0;
    for (int i = 0; i < 11; ++i) {
        const double x = i - 5.0;
        w[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
        sum += w[i];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// separable valid-mode Gaussian filter
std::vector<double> gauss_filter(const std::vector<double>& img, int h, int w) {
    static const std::vector<double> win = gaussian11();
    const int ho = h - 10, wo = w - 10;
    std::vector<double> tmp(static_cast<size_t>(h) * wo);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < wo; ++x) {
            double s = 0;
            for (int k = 0; k < 11; ++k) s += win[k] * img[static_cast<size_t>(y) * w + x + k];
            tmp[static_cast<size_t>(y) * wo + x] = s;
        }
    std::vector<double> out(static_cast<size_t>(ho) * wo);
    for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x) {
            double s = 0;
            for (int k = 0; k < 11; ++k) s += win[k] * tmp[static_cast<size_t>(y + k) * wo + x];
            out[static_cast<size_t>(y) * wo + x] = s;
        }
    return out;
}

struct SsimPair {
    double ssim;  // mean SSIM map
    double cs;    // mean contrast-structure term (for MS-SSIM)
};

SsimPair ssim_cs(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
    if (h < 11 || w < 11) throw std::invalid_argument("ssim: image smaller than the 11x11 window");
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    std::vector<double> aa(a.size()), bb(b.size()), ab(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = gauss_filter(a, h, w);
    const auto mu_b = gauss_filter(b, h, w);
    const auto m_aa = gauss_filter(aa, h, w);
    const auto m_bb = gauss_filter(bb, h, w);
    const auto m_ab = gauss_filter(ab, h, w);
    double ssim_sum = 0, cs_sum = 0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        const double va = m_aa[i] - mu_a[i] * mu_a[i];
        const double vb = m_bb[i] - mu_b[i] * mu_b[i];
        const double cov = m_ab[i] - mu_a[i] * mu_b[i];
        const double cs = (2.0 * cov + c2) / (va + vb + c2);
        const double lum = (2.0 * mu_a[i] * mu_b[i] + c1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
        ssim_sum += lum * cs;
        cs_sum += cs;
    }
    return {ssim_sum / static_cast<double>(mu_a.size()), cs_sum / static_cast<double>(mu_a.size())};
}

std::vector<double> to_double(const Tensorf& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
}

std::vector<double> avgpool2(const std::vector<double>& img, int h, int w) {
    const int ho = h / 2, wo = w / 2;
    std::vector<double> out(static_cast<size_t>(ho) * wo);
    for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x)
            out[static_cast<size_t>(y) * wo + x] =
                0.25 * (img[static_cast<size_t>(2 * y) * w + 2 * x] +
                        img[static_cast<size_t>(2 * y) * w + 2 * x + 1] +
                        img[static_cast<size_t>(2 * y + 1) * w + 2 * x] +
                        img[static_cast<size_t>(2 * y + 1) * w + 2 * x + 1]);
    return out;
}

}  // namespace

double ssim(const Tensorf& a, const Tensorf& b) {
    check_same(a, b, "ssim");
    const auto [h, w] = gray_dims(a, "ssim");
    return ssim_cs(to_double(a), to_double(b), h, w).ssim;
}

double ms_ssim(const Tensorf& a, const Tensorf& b) {
    check_same(a, b, "ms_ssim");
    auto [h, w] = gray_dims(a, "ms_ssim");
    // standard 5-scale weights truncated to 3 scales and renormalized
    const double raw[3] = {0.0448, 0.2856, 0.3001};
    const double norm = raw[0] + raw[1] + raw[2];
    std::vector<double> ia = to_double(a), ib = to_double(b);
    double result = 1.0;
    for (int scale = 0; scale < 3; ++scale) {
        const SsimPair p = ssim_cs(ia, ib, h, w);
        const double weight = raw[scale] / norm;
        const double term = scale == 2 ? std::max(p.ssim, 0.0) : std::max(p.cs, 0.0);
        result *= std::pow(term, weight);
        if (scale < 2) {
            ia = avgpool2(ia, h, w);
            ib = avgpool2(ib, h, w);
            h /= 2;
            w /= 2;
        }
    }
    return result;
}

namespace {

struct FeatNet {
    Tensorf w1, b1, w2, b2, w3, b3;
};

const FeatNet& featnet(std::uint64_t seed) {
    static std::uint64_t cached_seed = 0;
    static FeatNet net;
    static bool init = false;
    if (!init || cached_seed != seed) {
        Rng rng(seed);
        auto he = [&](const Shape& s, int fan) {
            Tensorf t = Tensorf::randn(s, rng);
            const float sc = static_cast<float>(std::sqrt(2.0 / fan));
            for (auto& v : t.mutable_data()) v *= sc;
            return t;
        };
        net.w1 = he({16, 3, 3, 3}, 27);
        net.b1 = Tensorf::zeros({16});
        net.w2 = he({32, 16, 3, 3}, 144);
        net.b2 = Tensorf::zeros({32});
        net.w3 = he({64, 32, 3, 3}, 288);
        net.b3 = Tensorf::zeros({64});
        cached_seed = seed;
        init = true;
    }
    return net;
}

// channel-unit-normalized squared difference, averaged over positions
double layer_dist(const Tensorf& fa, const Tensorf& fb) {
    const int C = fa.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(fa.dim(2)) * fa.dim(3);
    double total = 0;
    for (std::int64_t i = 0; i < hw; ++i) {
        double na = 1e-10, nb = 1e-10;
        for (int c = 0; c < C; ++c) {
            const double va = fa.data()[c * hw + i];
            const double vb = fb.data()[c * hw + i];
            na += va * va;
            nb += vb * vb;
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        for (int c = 0; c < C; ++c) {
            const double d = fa.data()[c * hw + i] / na - fb.data()[c * hw + i] / nb;
            total += d * d;
        }
    }
    return total / static_cast<double>(hw * C);
}

}  // namespace

double feat_dist(const Tensorf& a, const Tensorf& b, std::uint64_t seed) {
    check_same(a, b, "feat_dist");
    if (a.ndim() != 3 || a.dim(0) != 3)
        throw std::invalid_argument("feat_dist: expected [3,H,W], got " + shape_str(a.shape()));
    NoGradGuard ng;
    const FeatNet& net = featnet(seed);
    auto features = [&](const Tensorf& x) {
        Tensorf x4 = Tensorf::from_data({1, 3, x.dim(1), x.dim(2)}, std::vector<float>(x.data()));
        std::vector<Tensorf> feats;
        Tensorf h = silu(conv2d(x4, net.w1, net.b1, 2, 1));
        feats.push_back(h);
        h = silu(conv2d(h, net.w2, net.b2, 2, 1));
        feats.push_back(h);
        h = silu(conv2d(h, net.w3, net.b3, 2, 1));
        feats.push_back(h);
        return feats;
    };
    const auto fa = features(a);
    const auto fb = features(b);
    double total = 0;
    for (int l = 0; l < 3; ++l) total += layer_dist(fa[l], fb[l]);
    return total / 3.0;
}

Tensorf replicate3(const Tensorf& t) {
    const auto [h, w] = gray_dims(t, "replicate3");
    Tensorf out = Tensorf::zeros({3, h, w});
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    for (int c = 0; c < 3; ++c)
        std::copy(t.data().begin(), t.data().end(), out.mutable_data().begin() + c * hw);
    return out;
}

EvalReport evaluate_masks(const std::vector<Tensorf>& pred, const std::vector<Tensorf>& gt) {
    if (pred.size() != gt.size() || pred.empty())
        throw std::invalid_argument("evaluate_masks: size mismatch or empty");
    EvalReport r;
    for (size_t i = 0; i < pred.size(); ++i) {
        r.dice_per.push_back(dice(pred[i], gt[i]));
        r.iou_per.push_back(iou(pred[i], gt[i]));
        r.mean_dice += r.dice_per.back();
        r.mean_iou += r.iou_per.back();
    }
    r.mean_dice /= static_cast<double>(pred.size());
    r.mean_iou /= static_cast<double>(pred.size());
    return r;
}

StabilityReport stability_eval(const PredictFn& predict, const Dataset& test, int M,
                               const std::vector<std::uint64_t>& run_seeds) {
    if (M < 2) throw std::invalid_argument("stability_eval: M must be >= 2");
    if (run_seeds.size() != static_cast<size_t>(M))
        throw std::invalid_argument("stability_eval: need one seed per run");
    if (test.size() == 0) throw std::invalid_argument("stability_eval: empty test set");

    // runs x images
    std::vector<std::vector<Prediction>> preds(M);
    for (int r = 0; r < M; ++r) {
        preds[r].reserve(test.size());
        for (size_t i = 0; i < test.size(); ++i)
            preds[r].push_back(predict(test.samples[i], run_seeds[r]));
    }

    StabilityReport rep;
    rep.runs = M;
    const int npairs = M * (M - 1) / 2;
    const double nimg = static_cast<double>(test.size());
    for (int r = 0; r < M; ++r)
        for (int s = r + 1; s < M; ++s) {
            for (size_t i = 0; i < test.size(); ++i) {
                const Prediction& pr = preds[r][i];
                const Prediction& ps = preds[s][i];
                rep.featdist_seg += feat_dist(replicate3(pr.mask), replicate3(ps.mask));
                rep.featdist_score += feat_dist(replicate3(pr.prob), replicate3(ps.prob));
                rep.psnr_seg += psnr(pr.mask, ps.mask);
                rep.psnr_score += psnr(pr.prob, ps.prob);
                rep.ssim_seg += ssim(pr.mask, ps.mask);
                rep.ssim_score += ssim(pr.prob, ps.prob);
                rep.msssim_seg += ms_ssim(pr.mask, ps.mask);
                rep.msssim_score += ms_ssim(pr.prob, ps.prob);
            }
        }
    const double denom = npairs * nimg;
    rep.featdist_seg /= denom;
    rep.featdist_score /= denom;
    rep.psnr_seg /= denom;
    rep.psnr_score /= denom;
    rep.ssim_seg /= denom;
    rep.ssim_score /= denom;
    rep.msssim_seg /= denom;
    rep.msssim_score /= denom;
    return rep;
}

SplitScore score_model(const SDSeg& model, const Dataset& test, const ReverseSpec& spec,
                       std::uint64_t eval_seed) {
    std::vector<Tensorf> preds, gts;
    Rng base(eval_seed);
    for (size_t i = 0; i < test.size(); ++i) {
        InferResult r = infer_image(model, test.samples[i].image, spec,
                                    base.split(static_cast<std::uint64_t>(i)));
        preds.push_back(r.mask);
        gts.push_back(test.samples[i].mask);
    }
    const EvalReport rep = evaluate_masks(preds, gts);
    return {rep.mean_dice, rep.mean_iou};
}

std::vector<AblationArm> ablation_run(const Dataset& train, const Dataset& test,
                                      const Checkpoint& ae_ckpt, const RunConfig& base,
                                      const std::function<void(const std::string&)>& progress) {
    std::vector<AblationArm> arms(4);
    arms[0].name = "baseline-cross-attn";
    arms[1].name = "+concat";
    arms[2].name = "+trainable-encoder";
    arms[3].name = "+latent-estimation";
    for (int i = 0; i < 4; ++i) {
        RunConfig cfg = base;
        cfg.cond_mode = i == 0 ? "cross-attention" : "concat";
        cfg.trainable_encoder = i >= 2;
        cfg.lambda = i == 3 ? 1.0 : 0.0;
        // arms without the latent-estimation loss rely on a DDIM sweep, the
        // full arm runs its native single-step inference
        cfg.reverse = i == 3 ? "single" : "ddim:10";
        arms[i].cfg = cfg;
        arms[i].eval_spec = ReverseSpec::parse(cfg.reverse);

        if (progress) progress("training arm " + arms[i].name);
        SDSeg model = SDSeg::fresh(cfg, ae_ckpt);
        SDSegTrainLog log = train_sdseg(model, train, cfg);
        const SplitScore s = score_model(model, test, arms[i].eval_spec, cfg.seed + 101);
        arms[i].dice = s.dice;
        arms[i].iou = s.iou;
        arms[i].ckpt = sdseg_to_checkpoint(model, &log.opt, &log.opt_params, cfg.sdseg_steps);
        if (progress)
            progress("arm " + arms[i].name + " dice=" + std::to_string(s.dice) +
                     " iou=" + std::to_string(s.iou));
    }
    return arms;
}

std::vector<ReverseCurvePoint> reverse_curve(const SDSeg& model_l1, const SDSeg& model_l0,
                                             const std::vector<int>& steps_list,
                                             const Dataset& test, std::uint64_t eval_seed) {
    std::vector<ReverseCurvePoint> out;
    for (int steps : steps_list) {
        ReverseSpec spec;
        spec.mode = steps == 1 ? ReverseSpec::Mode::SingleStep : ReverseSpec::Mode::Ddim;
        spec.ddim_steps = steps;
        ReverseCurvePoint p;
        p.steps = steps;
        p.dice_lambda1 = score_model(model_l1, test, spec, eval_seed).dice;
        p.dice_lambda0 = score_model(model_l0, test, spec, eval_seed).dice;
        out.push_back(p);
    }
    return out;
}

}  // namespace sdseg
