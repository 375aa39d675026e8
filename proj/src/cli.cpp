#include "sdseg/cli.hpp"

#include <cstdio>
#include <cstdlib>

#include "CLI11.hpp"
#include "sdseg/metrics.hpp"
#include "sdseg/ops.hpp"

namespace sdseg::cli {

namespace {

namespace fs = std::filesystem;

RunConfig load_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw std::runtime_error("cannot open config " + config_path);
        json j;
        in >> j;
        cfg = RunConfig::from_json(j);
    }
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("override '" + ov + "' is not key=value");
        cfg.apply_override(ov.substr(0, eq), ov.substr(eq + 1));
    }
    return cfg;
}

json base_record(const std::string& command, const RunConfig& cfg) {
    json rec;
    rec["schema_version"] = 1;
    rec["command"] = command;
    rec["config"] = cfg.to_json();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(cfg.hash()));
    rec["config_hash"] = buf;
    return rec;
}

std::vector<std::string> f2s(const std::initializer_list<double>& vals) {
    std::vector<std::string> out;
    char buf[64];
    for (double v : vals) {
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        out.emplace_back(buf);
    }
    return out;
}

int cmd_gen_data(const std::string& out, std::uint64_t seed, int n_train, int n_test, int size) {
    fs::create_directories(out);
    RunLock lock(out);
    generate_dataset(out, n_train, n_test, size, size, seed);
    RunConfig cfg;
    cfg.seed = seed;
    cfg.image_size = size;
    json rec = base_record("gen-data", cfg);
    rec["n_train"] = n_train;
    rec["n_test"] = n_test;
    rec["outputs"] = {"train/manifest.json", "test/manifest.json"};
    write_run_json(out, rec);
    std::printf("gen-data: wrote %d train / %d test samples to %s\n", n_train, n_test, out.c_str());
    return 0;
}

int cmd_train_ae(const std::string& data, const std::string& out, const RunConfig& cfg) {
    fs::create_directories(out);
    RunLock lock(out);
    Dataset train = load_dataset(fs::path(data) / "train");

    AEConfig ae_cfg{cfg.ae_channels, cfg.z_channels};
    Rng init = Rng(cfg.seed).split(0xae11);
    AutoencoderF ae(ae_cfg, init);

    AETrainConfig tc;
    tc.steps = cfg.ae_steps;
    tc.batch = cfg.batch;
    tc.lr = static_cast<float>(cfg.lr);
    tc.kl_weight = static_cast<float>(cfg.kl_weight);
    tc.seed = cfg.seed;
    tc.log_every = cfg.log_every;
    AETrainLog log = train_autoencoder(ae, train, tc, [](int step, float loss) {
        std::printf("train-ae step %6d  loss %.5f\n", step, loss);
        std::fflush(stdout);
    });

    const fs::path ckpt = fs::path(out) / "ae.sdck";
    save_checkpoint(ae_to_checkpoint(ae, cfg.to_json(), cfg.ae_steps, &log.opt), ckpt);
    std::vector<std::vector<std::string>> rows;
    for (auto [step, loss] : log.losses)
        rows.push_back({std::to_string(step), f2s({loss})[0]});
    write_csv(fs::path(out) / "ae_loss.csv", {"step", "loss"}, rows);

    json rec = base_record("train-ae", cfg);
    rec["outputs"] = {"ae.sdck", "ae_loss.csv"};
    rec["latent_scale"] = ae.latent_scale;
    write_run_json(out, rec);
    std::printf("train-ae: checkpoint at %s (latent_scale %.4f)\n", ckpt.c_str(), ae.latent_scale);
    return 0;
}

int cmd_train(const std::string& data, const std::string& ae_path, const std::string& out,
              const RunConfig& cfg) {
    fs::create_directories(out);
    RunLock lock(out);
    Dataset train = load_dataset(fs::path(data) / "train");
    Checkpoint ae_ckpt = load_checkpoint(ae_path);

    SDSeg model = SDSeg::fresh(cfg, ae_ckpt);
    const CkptFn on_ckpt = [&](int step, const AdamW<float>& opt, const Params<float>& ps) {
        save_checkpoint(sdseg_to_checkpoint(model, &opt, &ps, step),
                        fs::path(out) / ("sdseg_step" + std::to_string(step) + ".sdck"));
    };
    SDSegTrainLog log = train_sdseg(
        model, train, cfg,
        [](const SDSegTrainEntry& e) {
            std::printf("train step %6d  loss %.5f (noise %.5f, latent %.5f)\n", e.step, e.total,
                        e.noise, e.latent);
            std::fflush(stdout);
        },
        on_ckpt);

    const fs::path ckpt = fs::path(out) / "sdseg.sdck";
    save_checkpoint(sdseg_to_checkpoint(model, &log.opt, &log.opt_params, cfg.sdseg_steps), ckpt);
    std::vector<std::vector<std::string>> rows;
    for (const auto& e : log.entries) {
        auto v = f2s({e.total, e.noise, e.latent});
        rows.push_back({std::to_string(e.step), v[0], v[1], v[2]});
    }
    write_csv(fs::path(out) / "train_log.csv", {"step", "loss", "loss_noise", "loss_latent"}, rows);

    json rec = base_record("train", cfg);
    rec["ae_checkpoint"] = ae_path;
    rec["outputs"] = {"sdseg.sdck", "train_log.csv"};
    write_run_json(out, rec);
    std::printf("train: checkpoint at %s\n", ckpt.c_str());
    return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& data, const std::string& out,
              const std::string& reverse, std::uint64_t seed) {
    fs::create_directories(out);
    RunLock lock(out);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    SDSeg model = SDSeg::from_checkpoint(ckpt);
    const ReverseSpec spec = ReverseSpec::parse(reverse.empty() ? model.cfg.reverse : reverse);
    Dataset test = load_dataset(data);

    Rng base(seed);
    std::int64_t total_calls = 0, per_image_calls = 0;
    for (size_t i = 0; i < test.size(); ++i) {
        InferResult r = infer_image(model, test.samples[i].image, spec,
                                    base.split(static_cast<std::uint64_t>(i)));
        write_tnsr(fs::path(out) / (test.samples[i].id + "_prob.tnsr"), r.prob);
        write_tnsr(fs::path(out) / (test.samples[i].id + "_mask.tnsr"), r.mask);
        total_calls += r.denoiser_calls;
        per_image_calls = r.denoiser_calls;
    }

    RunConfig cfg = model.cfg;
    cfg.reverse = spec.str();
    cfg.seed = seed;
    json rec = base_record("infer", cfg);
    rec["checkpoint"] = ckpt_path;
    rec["images"] = test.size();
    rec["denoiser_calls_total"] = total_calls;
    rec["denoiser_calls_per_image"] = per_image_calls;
    write_run_json(out, rec);
    std::printf("infer: %zu images, %lld denoiser calls (%lld per image), reverse %s\n",
                test.size(), static_cast<long long>(total_calls),
                static_cast<long long>(per_image_calls), spec.str().c_str());
    return 0;
}

int cmd_eval(const std::string& pred, const std::string& data, const std::string& out) {
    fs::create_directories(out);
    RunLock lock(out);
    Dataset test = load_dataset(data);
    std::vector<Tensorf> preds, gts;
    std::vector<std::vector<std::string>> rows;
    for (const auto& s : test.samples) {
        const fs::path p = fs::path(pred) / (s.id + "_mask.tnsr");
        preds.push_back(read_tnsr(p));
        gts.push_back(s.mask);
    }
    EvalReport rep = evaluate_masks(preds, gts);
    for (size_t i = 0; i < test.size(); ++i) {
        auto v = f2s({rep.dice_per[i], rep.iou_per[i]});
        rows.push_back({test.samples[i].id, v[0], v[1]});
    }
    auto agg = f2s({rep.mean_dice, rep.mean_iou});
    rows.push_back({"mean", agg[0], agg[1]});
    write_csv(fs::path(out) / "metrics.csv", {"id", "dice", "iou"}, rows);

    RunConfig cfg;
    json rec = base_record("eval", cfg);
    rec["pred_dir"] = pred;
    rec["outputs"] = {"metrics.csv"};
    rec["mean_dice"] = rep.mean_dice;
    rec["mean_iou"] = rep.mean_iou;
    write_run_json(out, rec);
    std::printf("eval: dice %.4f  iou %.4f over %zu images\n", rep.mean_dice, rep.mean_iou,
                test.size());
    return 0;
}

int cmd_stability(const std::string& ckpt_path, const std::string& data, const std::string& out,
                  int runs, std::uint64_t seed, const std::string& reverse) {
    fs::create_directories(out);
    RunLock lock(out);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    SDSeg model = SDSeg::from_checkpoint(ckpt);
    const ReverseSpec spec = ReverseSpec::parse(reverse.empty() ? model.cfg.reverse : reverse);
    Dataset test = load_dataset(data);

    std::vector<std::uint64_t> run_seeds;
    Rng base(seed);
    for (int r = 0; r < runs; ++r) run_seeds.push_back(base.split(static_cast<std::uint64_t>(r)).key());

    size_t image_index = 0;
    std::vector<std::uint64_t> ids;  // image index lookup by pointer identity is fragile; use order
    PredictFn predict = [&](const SegSample& s, std::uint64_t run_seed) {
        // per-image stream derived from the run seed and the image id
        const std::uint64_t tag = fnv1a(s.id.data(), s.id.size());
        InferResult r = infer_image(model, s.image, spec, Rng(run_seed).split(tag));
        (void)image_index;
        (void)ids;
        return Prediction{r.prob, r.mask};
    };
    StabilityReport rep = stability_eval(predict, test, runs, run_seeds);

    std::vector<std::vector<std::string>> rows;
    auto push = [&](const std::string& name, double seg, double score) {
        auto v = f2s({seg, score});
        rows.push_back({name, v[0], v[1]});
    };
    push("feat_dist", rep.featdist_seg, rep.featdist_score);
    push("psnr", rep.psnr_seg, rep.psnr_score);
    push("ssim", rep.ssim_seg, rep.ssim_score);
    push("ms_ssim", rep.msssim_seg, rep.msssim_score);
    write_csv(fs::path(out) / "stability.csv", {"metric", "seg", "score"}, rows);

    RunConfig cfg = model.cfg;
    cfg.seed = seed;
    json rec = base_record("stability", cfg);
    rec["runs"] = runs;
    rec["outputs"] = {"stability.csv"};
    write_run_json(out, rec);
    std::printf("stability: M=%d  ssim(score) %.4f  ms_ssim(score) %.4f  feat_dist(score) %.5f\n",
                runs, rep.ssim_score, rep.msssim_score, rep.featdist_score);
    return 0;
}

int cmd_ablate(const std::string& data, const std::string& ae_path, const std::string& out,
               const RunConfig& base) {
    fs::create_directories(out);
    RunLock lock(out);
    Dataset train = load_dataset(fs::path(data) / "train");
    Dataset test = load_dataset(fs::path(data) / "test");
    Checkpoint ae_ckpt = load_checkpoint(ae_path);

    auto arms = ablation_run(train, test, ae_ckpt, base, [](const std::string& msg) {
        std::printf("ablate: %s\n", msg.c_str());
        std::fflush(stdout);
    });

    std::vector<std::vector<std::string>> rows;
    const char* files[4] = {"arm1_baseline.sdck", "arm2_concat.sdck", "arm3_trainable.sdck",
                            "arm4_latent.sdck"};
    for (size_t i = 0; i < arms.size(); ++i) {
        auto v = f2s({arms[i].dice, arms[i].iou});
        rows.push_back({arms[i].name, v[0], v[1]});
        save_checkpoint(arms[i].ckpt, fs::path(out) / files[i]);
    }
    write_csv(fs::path(out) / "ablation.csv", {"arm", "dice", "iou"}, rows);

    json rec = base_record("ablate", base);
    rec["outputs"] = {"ablation.csv", files[0], files[1], files[2], files[3]};
    write_run_json(out, rec);
    for (const auto& a : arms)
        std::printf("ablate: %-22s dice %.4f  iou %.4f\n", a.name.c_str(), a.dice, a.iou);
    return 0;
}

int cmd_reverse_curve(const std::string& l1_path, const std::string& l0_path,
                      const std::string& data, const std::string& out,
                      const std::string& steps_csv, std::uint64_t seed) {
    fs::create_directories(out);
    RunLock lock(out);
    SDSeg l1 = SDSeg::from_checkpoint(load_checkpoint(l1_path));
    SDSeg l0 = SDSeg::from_checkpoint(load_checkpoint(l0_path));
    Dataset test = load_dataset(data);

    std::vector<int> steps;
    std::stringstream ss(steps_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) steps.push_back(std::stoi(tok));
    if (steps.empty()) throw std::runtime_error("reverse-curve: empty steps list");

    auto points = reverse_curve(l1, l0, steps, test, seed);
    std::vector<std::vector<std::string>> rows;
    for (const auto& p : points) {
        auto v = f2s({p.dice_lambda1, p.dice_lambda0});
        rows.push_back({std::to_string(p.steps), v[0], v[1]});
        std::printf("reverse-curve: steps %3d  dice(l1) %.4f  dice(l0) %.4f\n", p.steps,
                    p.dice_lambda1, p.dice_lambda0);
    }
    write_csv(fs::path(out) / "curve.csv", {"steps", "dice_lambda1", "dice_lambda0"}, rows);

    RunConfig cfg = l1.cfg;
    cfg.seed = seed;
    json rec = base_record("reverse-curve", cfg);
    rec["outputs"] = {"curve.csv"};
    write_run_json(out, rec);
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    if (const char* env = std::getenv("SDSEG_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) kernels::set_threads(n);
    }

    CLI::App app{"sdseg-kit: latent diffusion segmentation at desk scale"};
    app.require_subcommand(1);

    // gen-data
    std::string out_dir, data_dir, config_path, ckpt_path, ae_path;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    int n_train = 512, n_test = 64, size = 64;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic segmentation dataset");
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--seed", seed, "generator seed");
    gen->add_option("--train", n_train, "training samples");
    gen->add_option("--test", n_test, "test samples");
    gen->add_option("--size", size, "image height/width");

    auto* tae = app.add_subcommand("train-ae", "train the KL autoencoder");
    tae->add_option("--data", data_dir, "dataset root (contains train/)")->required();
    tae->add_option("--out", out_dir, "output directory")->required();
    tae->add_option("--config", config_path, "config JSON");
    tae->add_option("--override", overrides, "key=value config override");

    auto* tr = app.add_subcommand("train", "train the SDSeg denoiser + vision encoder");
    tr->add_option("--data", data_dir, "dataset root (contains train/)")->required();
    tr->add_option("--ae", ae_path, "autoencoder checkpoint")->required();
    tr->add_option("--out", out_dir, "output directory")->required();
    tr->add_option("--config", config_path, "config JSON");
    tr->add_option("--override", overrides, "key=value config override");

    std::string reverse;
    auto* inf = app.add_subcommand("infer", "run inference over a dataset split");
    inf->add_option("--ckpt", ckpt_path, "sdseg checkpoint")->required();
    inf->add_option("--data", data_dir, "dataset split directory")->required();
    inf->add_option("--out", out_dir, "output directory")->required();
    inf->add_option("--reverse", reverse, "single | ddim:<steps> (default: checkpoint setting)");
    inf->add_option("--seed", seed, "noise seed");

    std::string pred_dir;
    auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
    ev->add_option("--pred", pred_dir, "prediction directory")->required();
    ev->add_option("--data", data_dir, "dataset split directory")->required();
    ev->add_option("--out", out_dir, "output directory")->required();

    int runs = 5;
    auto* st = app.add_subcommand("stability", "repeated-inference stability evaluation");
    st->add_option("--ckpt", ckpt_path, "sdseg checkpoint")->required();
    st->add_option("--data", data_dir, "dataset split directory")->required();
    st->add_option("--out", out_dir, "output directory")->required();
    st->add_option("--runs", runs, "number of repeated inferences M");
    st->add_option("--seed", seed, "base seed for the run streams");
    st->add_option("--reverse", reverse, "single | ddim:<steps>");

    auto* ab = app.add_subcommand("ablate", "train and score the four ablation arms");
    ab->add_option("--data", data_dir, "dataset root")->required();
    ab->add_option("--ae", ae_path, "autoencoder checkpoint")->required();
    ab->add_option("--out", out_dir, "output directory")->required();
    ab->add_option("--config", config_path, "config JSON");
    ab->add_option("--override", overrides, "key=value config override");

    std::string l1_path, l0_path, steps_csv = "1,2,5,10,25,50";
    auto* rc = app.add_subcommand("reverse-curve", "Dice vs DDIM steps for two checkpoints");
    rc->add_option("--l1", l1_path, "lambda=1 checkpoint")->required();
    rc->add_option("--l0", l0_path, "lambda=0 checkpoint")->required();
    rc->add_option("--data", data_dir, "dataset split directory")->required();
    rc->add_option("--out", out_dir, "output directory")->required();
    rc->add_option("--steps", steps_csv, "comma-separated step counts");
    rc->add_option("--seed", seed, "eval seed");

    std::string csv_in, svg_out, kind = "curve";
    auto* pl = app.add_subcommand("plot", "render a CSV as a standalone SVG");
    pl->add_option("--in", csv_in, "input CSV")->required();
    pl->add_option("--out", svg_out, "output SVG")->required();
    pl->add_option("--kind", kind, "curve | bar");

    std::vector<std::string> argv_copy = args;
    try {
        std::vector<const char*> argv;
        argv.push_back("sdseg");
        for (const auto& a : argv_copy) argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        std::puts(app.help().c_str());
        return 0;
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        std::fprintf(stderr, "%s\n", app.help().c_str());
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(out_dir, seed, n_train, n_test, size);
        const RunConfig cfg = load_config(config_path, overrides);
        if (tae->parsed()) return cmd_train_ae(data_dir, out_dir, cfg);
        if (tr->parsed()) return cmd_train(data_dir, ae_path, out_dir, cfg);
        if (inf->parsed()) return cmd_infer(ckpt_path, data_dir, out_dir, reverse, seed);
        if (ev->parsed()) return cmd_eval(pred_dir, data_dir, out_dir);
        if (st->parsed()) return cmd_stability(ckpt_path, data_dir, out_dir, runs, seed, reverse);
        if (ab->parsed()) return cmd_ablate(data_dir, ae_path, out_dir, cfg);
        if (rc->parsed())
            return cmd_reverse_curve(l1_path, l0_path, data_dir, out_dir, steps_csv, seed);
        if (pl->parsed()) {
            plot_csv(csv_in, svg_out, kind);
            std::printf("plot: wrote %s\n", svg_out.c_str());
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}

}  // namespace sdseg::cli
