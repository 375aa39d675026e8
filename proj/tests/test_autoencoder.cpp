#include <cmath>

#include "doctest.h"
#include "sdseg/autoencoder.hpp"
#include "testutil.hpp"

using namespace sdseg;

TEST_SUITE_BEGIN("autoencoder");

namespace {

AutoencoderF tiny_ae() {
    AEConfig cfg;
    cfg.base_channels = 8;
    cfg.z_channels = 4;
    Rng rng(11);
    return AutoencoderF(cfg, rng);
}

}  // namespace

TEST_CASE("encoder shapes at toy and paper-scale geometry") {
    AutoencoderF ae = tiny_ae();
    Rng rng(3);

    Tensorf x = Tensorf::randn({2, 3, 64, 64}, rng);
    GaussianPosterior<float> post = ae.encode(x);
    CHECK(post.mean.shape() == Shape{2, 4, 8, 8});
    CHECK(post.logvar.shape() == Shape{2, 4, 8, 8});

    // r = 8 downsampling at the paper's 256x256 -> 32x32 with c = 4
    Tensorf big = Tensorf::randn({1, 3, 256, 256}, rng);
    GaussianPosterior<float> post_big = ae.encode(big);
    CHECK(post_big.mean.shape() == Shape{1, 4, 32, 32});

    Tensorf bad = Tensorf::randn({1, 3, 60, 60}, rng);
    CHECK_THROWS(ae.encode(bad));

    // logvar clamp postcondition
    for (float v : post.logvar.data()) {
        CHECK(v >= -30.0f);
        CHECK(v <= 20.0f);
    }
}

TEST_CASE("decoder shape round trip and determinism") {
    AutoencoderF ae = tiny_ae();
    Rng rng(4);
    Tensorf x = Tensorf::randn({1, 3, 64, 64}, rng);
    Tensorf z = ae.encode(x).mode();
    Tensorf rec1 = ae.decode(z);
    CHECK(rec1.shape() == x.shape());
    Tensorf rec2 = ae.decode(z);
    CHECK(rec1.data() == rec2.data());

    Tensorf zbad = Tensorf::randn({1, 3, 8, 8}, rng);
    CHECK_THROWS(ae.decode(zbad));
}

TEST_CASE("posterior kl closed-form values") {
    GaussianPosterior<float> p;
    p.mean = Tensorf::zeros({1, 2, 1, 1});
    p.logvar = Tensorf::zeros({1, 2, 1, 1});
    CHECK(p.kl().item() == 0.0f);

    GaussianPosterior<float> q;
    q.mean = Tensorf::full({1, 2, 1, 1}, 1.0f);
    q.logvar = Tensorf::zeros({1, 2, 1, 1});
    // per element: 0.5*(mu^2 + sigma^2 - 1 - log sigma^2) = 0.5
    CHECK(q.kl().item() == doctest::Approx(0.5).epsilon(1e-6));

    // sample = mean when variance collapses
    GaussianPosterior<float> r;
    r.mean = Tensorf::full({1, 2, 1, 1}, 0.7f);
    r.logvar = Tensorf::full({1, 2, 1, 1}, -30.0f);
    Rng rng(5);
    Tensorf s = r.sample(rng);
    for (float v : s.data()) CHECK(v == doctest::Approx(0.7f).epsilon(1e-5));
}

TEST_CASE("short training run decreases the loss") {
    // small geometry keeps this a unit test; the acceptance suite covers 64x64
    testutil::TmpDir tmp("ae_train");
    generate_dataset(tmp.path, 24, 4, 32, 32, 99);
    Dataset train = load_dataset(tmp.path / "train");

    AEConfig cfg;
    cfg.base_channels = 8;
    cfg.z_channels = 4;
    Rng rng(7);
    AutoencoderF ae(cfg, rng);

    AETrainConfig tc;
    tc.steps = 200;
    tc.batch = 4;
    tc.lr = 2e-4f;
    tc.seed = 5;
    tc.log_every = 10;
    AETrainLog log = train_autoencoder(ae, train, tc);

    // smoothed over the first and last windows
    REQUIRE(log.losses.size() >= 10);
    double head = 0, tail = 0;
    for (int i = 0; i < 3; ++i) head += log.losses[i].second;
    for (int i = 0; i < 3; ++i) tail += log.losses[log.losses.size() - 1 - i].second;
    CHECK(tail < head);

    // scaled latents should be near unit std by construction
    double sum = 0, sq = 0;
    std::int64_t count = 0;
    {
        NoGradGuard ng;
        for (size_t i = 0; i < train.size(); ++i) {
            Tensorf m = stack_masks(train, {static_cast<int>(i)});
            Tensorf z = scale(ae.encode(mask_to_ae_input(m)).mode(), ae.latent_scale);
            for (float v : z.data()) {
                sum += v;
                sq += static_cast<double>(v) * v;
                ++count;
            }
        }
    }
    const double mean = sum / count;
    const double stdev = std::sqrt(sq / count - mean * mean);
    CHECK(stdev > 0.8);
    CHECK(stdev < 1.2);

    CHECK_THROWS(train_autoencoder(ae, Dataset{}, tc));
}

TEST_CASE("checkpoint round trip preserves every tensor") {
    testutil::TmpDir tmp("ae_ckpt");
    AutoencoderF ae = tiny_ae();
    ae.latent_scale = 1.2345f;
    Checkpoint c = ae_to_checkpoint(ae, json{{"note", 1}}, 42);
    save_checkpoint(c, tmp.path / "ae.sdck");

    Checkpoint loaded = load_checkpoint(tmp.path / "ae.sdck");
    CHECK(loaded.step == 42);
    AutoencoderF ae2 = tiny_ae();
    // perturb, then restore
    for (auto& [n, t] : ae2.params.items())
        for (auto& v : t.mutable_data()) v += 1.0f;
    ae_from_checkpoint(ae2, loaded);
    CHECK(ae2.params.value_hash() == ae.params.value_hash());
    CHECK(ae2.latent_scale == ae.latent_scale);

    // a different width is a different architecture
    AEConfig other;
    other.base_channels = 16;
    Rng rng(1);
    AutoencoderF ae3(other, rng);
    CHECK_THROWS_AS(ae_from_checkpoint(ae3, loaded), CheckpointError);
}

TEST_SUITE_END();
