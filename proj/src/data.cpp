#include "sdseg/data.hpp"

#include <cmath>
#include <fstream>

namespace sdseg {

json DatasetManifest::to_json() const {
    json j;
    j["version"] = version;
    j["height"] = height;
    j["width"] = width;
    j["split"] = split;
    j["seed"] = seed;
    j["gen_params"] = gen_params;
    j["ids"] = ids;
    return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.split = j.at("split").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.gen_params = j.value("gen_params", json::object());
    m.ids = j.at("ids").get<std::vector<std::string>>();
    return m;
}

namespace {

struct Blob {
    double cx, cy, rx, ry, theta;
    double value;        // base intensity of the region
    double tex_fx, tex_fy, tex_phase, tex_amp;
};

// normalized elliptical distance of (x, y) from the blob
double blob_dist(const Blob& b, double x, double y) {
    const double dx = x - b.cx;
    const double dy = y - b.cy;
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    const double u = (c * dx + s * dy) / b.rx;
    const double v = (-s * dx + c * dy) / b.ry;
    return std::sqrt(u * u + v * v);
}

SegSample make_sample(int H, int W, Rng rng, const std::string& id) {
    const double kPi = 3.14159265358979323846;
    for (int attempt = 0; attempt < 200; ++attempt) {
        // background: base value plus low-frequency waves and grain
        const double bg_value = -0.75 + 0.25 * rng.next_unit();
        double bg_fx = 1.0 + 2.0 * rng.next_unit();
        double bg_fy = 1.0 + 2.0 * rng.next_unit();
        double bg_phase = 2.0 * kPi * rng.next_unit();

        const int nblobs = 1 + static_cast<int>(rng.next_u64() % 3);
        std::vector<Blob> blobs;
        for (int k = 0; k < nblobs; ++k) {
            Blob b;
            b.rx = 6.0 + 9.0 * rng.next_unit();
            b.ry = 6.0 + 9.0 * rng.next_unit();
            const double margin = std::max(b.rx, b.ry) + 2.0;
            b.cx = margin + (W - 2 * margin) * rng.next_unit();
            b.cy = margin + (H - 2 * margin) * rng.next_unit();
            b.theta = kPi * rng.next_unit();
            b.value = 0.15 + 0.5 * rng.next_unit();  // far brighter than the background
            b.tex_fx = 4.0 + 6.0 * rng.next_unit();
            b.tex_fy = 4.0 + 6.0 * rng.next_unit();
            b.tex_phase = 2.0 * kPi * rng.next_unit();
            b.tex_amp = 0.03 + 0.05 * rng.next_unit();
            blobs.push_back(b);
        }
        const double tint[3] = {0.06 * (rng.next_unit() - 0.5), 0.06 * (rng.next_unit() - 0.5),
                                0.06 * (rng.next_unit() - 0.5)};

        std::vector<float> mask(static_cast<size_t>(H) * W, 0.0f);
        std::vector<double> gray(static_cast<size_t>(H) * W);
        std::int64_t fg = 0;
        const double edge = 0.22;  // soft falloff outside the support
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double xn = static_cast<double>(x) / W;
                const double yn = static_cast<double>(y) / H;
                double v = bg_value +
                           0.07 * std::cos(2.0 * kPi * (bg_fx * xn + bg_fy * yn) + bg_phase) +
                           0.02 * (rng.next_unit() - 0.5);
                for (const Blob& b : blobs) {
                    const double d = blob_dist(b, x, y);
                    if (d <= 1.0) {
                        mask[static_cast<size_t>(y) * W + x] = 1.0f;
                    }
                    const double alpha = std::clamp((1.0 + edge - d) / edge, 0.0, 1.0);
                    if (alpha > 0.0) {
                        const double tex =
                            b.tex_amp * std::cos(2.0 * kPi * (b.tex_fx * xn + b.tex_fy * yn) +
                                                 b.tex_phase);
                        v = (1.0 - alpha) * v + alpha * (b.value + tex);
                    }
                }
                gray[static_cast<size_t>(y) * W + x] = v;
                fg += mask[static_cast<size_t>(y) * W + x] > 0.5f ? 1 : 0;
            }

        const double frac = static_cast<double>(fg) / (static_cast<double>(H) * W);
        if (frac < 0.03 || frac > 0.5) continue;

        std::vector<float> img(3 * static_cast<size_t>(H) * W);
        for (int c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i)
                img[c * static_cast<std::int64_t>(H) * W + i] =
                    static_cast<float>(std::clamp(gray[i] + tint[c], -1.0, 1.0));

        SegSample s;
        s.id = id;
        s.image = Tensorf::from_data({3, H, W}, std::move(img));
        s.mask = Tensorf::from_data({1, H, W}, std::move(mask));
        return s;
    }
    throw std::runtime_error("dataset generator: rejection loop failed for sample " + id);
}

void write_split(const std::filesystem::path& dir, const std::string& split, int count,
                 const std::string& prefix, int H, int W, std::uint64_t seed, const Rng& base) {
    std::filesystem::create_directories(dir);
    DatasetManifest m;
    m.height = H;
    m.width = W;
    m.split = split;
    m.seed = seed;
    m.gen_params = {{"blobs_min", 1},       {"blobs_max", 3},
                    {"radius_min", 6},      {"radius_max", 15},
                    {"fg_min_percent", 3},  {"fg_max_percent", 50}};
    char buf[32];
    for (int i = 0; i < count; ++i) {
        std::snprintf(buf, sizeof(buf), "%s%04d", prefix.c_str(), i);
        const std::string id = buf;
        const std::uint64_t tag = fnv1a(id.data(), id.size());
        SegSample s = make_sample(H, W, base.split(tag), id);
        write_tnsr(dir / (id + "_img.tnsr"), s.image);
        write_tnsr(dir / (id + "_mask.tnsr"), s.mask);
        m.ids.push_back(id);
    }
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << m.to_json().dump(2) << "\n";
}

}  // namespace

void generate_dataset(const std::filesystem::path& out, int n_train, int n_test, int height,
                      int width, std::uint64_t seed) {
    if (n_train < 1 || n_test < 1) throw std::invalid_argument("generate_dataset: counts must be >= 1");
    if (height % 8 != 0 || width % 8 != 0)
        throw std::invalid_argument("generate_dataset: H and W must be divisible by 8");
    Rng base(seed);
    write_split(out / "train", "train", n_train, "tr", height, width, seed, base);
    write_split(out / "test", "test", n_test, "te", height, width, seed, base);
}

Dataset load_dataset(const std::filesystem::path& split_dir) {
    Dataset ds;
    ds.dir = split_dir;
    std::ifstream in(split_dir / "manifest.json");
    if (!in) throw std::runtime_error("dataset: cannot open " + (split_dir / "manifest.json").string());
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("dataset: bad manifest in " + split_dir.string() + ": " + e.what());
    }
    ds.manifest = DatasetManifest::from_json(j);
    for (const auto& id : ds.manifest.ids) {
        SegSample s;
        s.id = id;
        const auto img_path = split_dir / (id + "_img.tnsr");
        const auto mask_path = split_dir / (id + "_mask.tnsr");
        try {
            s.image = read_tnsr(img_path);
        } catch (const std::exception& e) {
            throw std::runtime_error("dataset: " + img_path.string() + ": " + e.what());
        }
        try {
            s.mask = read_tnsr(mask_path);
        } catch (const std::exception& e) {
            throw std::runtime_error("dataset: " + mask_path.string() + ": " + e.what());
        }
        if (s.image.shape() != Shape{3, ds.manifest.height, ds.manifest.width})
            throw std::runtime_error("dataset: bad image shape for " + id);
        if (s.mask.shape() != Shape{1, ds.manifest.height, ds.manifest.width})
            throw std::runtime_error("dataset: bad mask shape for " + id);
        for (float v : s.mask.data())
            if (v != 0.0f && v != 1.0f)
                throw std::runtime_error("dataset: non-binary mask value in " + id);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

Batcher::Batcher(const Dataset& ds, int batch_size, std::uint64_t shuffle_seed)
    : ds_(ds), batch_(batch_size), seed_(shuffle_seed) {
    if (batch_size < 1) throw std::invalid_argument("Batcher: batch size must be >= 1");
    if (ds.size() == 0) throw std::invalid_argument("Batcher: empty dataset");
    reshuffle();
}

void Batcher::reshuffle() {
    ++epoch_;
    cursor_ = 0;
    order_.resize(ds_.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    Rng rng = Rng(seed_).split(0x9d5ull).split(static_cast<std::uint64_t>(epoch_));
    // Fisher-Yates with draws from the fixed stream
    for (size_t i = order_.size(); i > 1; --i) {
        const size_t j = rng.next_u64() % i;
        std::swap(order_[i - 1], order_[j]);
    }
}

std::vector<int> Batcher::next() {
    if (cursor_ >= order_.size()) reshuffle();
    const size_t take = std::min(static_cast<size_t>(batch_), order_.size() - cursor_);
    std::vector<int> out(order_.begin() + cursor_, order_.begin() + cursor_ + take);
    cursor_ += take;
    return out;
}

Tensorf stack_images(const Dataset& ds, const std::vector<int>& idx) {
    const int H = ds.manifest.height, W = ds.manifest.width;
    const int B = static_cast<int>(idx.size());
    Tensorf out = Tensorf::zeros({B, 3, H, W});
    const std::int64_t per = 3LL * H * W;
    for (int b = 0; b < B; ++b)
        std::copy(ds.samples[idx[b]].image.data().begin(), ds.samples[idx[b]].image.data().end(),
                  out.mutable_data().begin() + b * per);
    return out;
}

Tensorf stack_masks(const Dataset& ds, const std::vector<int>& idx) {
    const int H = ds.manifest.height, W = ds.manifest.width;
    const int B = static_cast<int>(idx.size());
    Tensorf out = Tensorf::zeros({B, 1, H, W});
    const std::int64_t per = 1LL * H * W;
    for (int b = 0; b < B; ++b)
        std::copy(ds.samples[idx[b]].mask.data().begin(), ds.samples[idx[b]].mask.data().end(),
                  out.mutable_data().begin() + b * per);
    return out;
}

Tensorf mask_to_ae_input(const Tensorf& mask) {
    if (mask.ndim() != 4 || mask.dim(1) != 1)
        throw std::invalid_argument("mask_to_ae_input: expected [B,1,H,W]");
    const int B = mask.dim(0), H = mask.dim(2), W = mask.dim(3);
    Tensorf out = Tensorf::zeros({B, 3, H, W});
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < hw; ++i)
                out.mutable_data()[(b * 3 + c) * hw + i] = mask.data()[b * hw + i] * 2.0f - 1.0f;
    return out;
}

}  // namespace sdseg
