#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sdseg/io.hpp"
#include "sdseg/tensor.hpp"

namespace sdseg {

struct SegSample {
    Tensorf image;  // [3,H,W] in [-1,1]
    Tensorf mask;   // [1,H,W] in {0,1}
    std::string id;
};

struct DatasetManifest {
    int version = 1;
    int height = 0;
    int width = 0;
    std::string split;  // train | test
    std::uint64_t seed = 0;
    json gen_params;
    std::vector<std::string> ids;

    json to_json() const;
    static DatasetManifest from_json(const json& j);
};

// writes <out>/train and <out>/test, each with manifest.json plus
// <id>_img.tnsr / <id>_mask.tnsr; byte-identical for identical seeds
void generate_dataset(const std::filesystem::path& out, int n_train, int n_test, int height,
                      int width, std::uint64_t seed);

struct Dataset {
    std::filesystem::path dir;
    DatasetManifest manifest;
    std::vector<SegSample> samples;

    size_t size() const { return samples.size(); }
};

Dataset load_dataset(const std::filesystem::path& split_dir);

// epoch-deterministic shuffled batches; the last batch of an epoch may be short
class Batcher {
public:
    Batcher(const Dataset& ds, int batch_size, std::uint64_t shuffle_seed);
    // indices into ds.samples for the next batch
    std::vector<int> next();
    int epoch() const { return epoch_; }

private:
    void reshuffle();
    const Dataset& ds_;
    int batch_;
    std::uint64_t seed_;
    int epoch_ = -1;
    size_t cursor_ = 0;
    std::vector<int> order_;
};

// stacking helpers for training loops
Tensorf stack_images(const Dataset& ds, const std::vector<int>& idx);
Tensorf stack_masks(const Dataset& ds, const std::vector<int>& idx);
// replicate binary masks to 3 channels and map {0,1} -> {-1,1}
Tensorf mask_to_ae_input(const Tensorf& mask);

}  // namespace sdseg
