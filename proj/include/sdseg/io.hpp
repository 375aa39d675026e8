#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdseg/tensor.hpp"

namespace sdseg {

using json = nlohmann::json;

// ---- TNSR v1 ----
// magic "TNSR", u8 version=1, u8 dtype (0 = f32), u8 ndim, ndim x u32 LE dims,
// row-major LE f32 payload.
void write_tnsr(const std::filesystem::path& path, const Tensorf& t);
Tensorf read_tnsr(const std::filesystem::path& path);
std::vector<unsigned char> tnsr_bytes(const Tensorf& t);

// ---- checkpoint archive ----

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { Corrupt, Version, ArchHash };
    CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
    Kind kind;
};

struct Checkpoint {
    int format_version = 1;
    std::int64_t step = 0;
    std::uint64_t arch_hash = 0;
    json config;
    std::vector<std::pair<std::string, Tensorf>> tensors;

    bool has(const std::string& name) const;
    Tensorf find(const std::string& name) const;
    void put(const std::string& name, const Tensorf& t);
};

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// throws CheckpointError{ArchHash} on mismatch
void require_arch(const Checkpoint& c, std::uint64_t expected);

// ---- config ----

struct RunConfig {
    int image_size = 64;
    int ae_channels = 32;
    int z_channels = 4;
    int unet_base = 32;
    int temb_dim = 128;

    int timesteps = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
    double lambda = 1.0;
    std::string cond_mode = "concat";  // concat | cross-attention
    bool trainable_encoder = true;
    std::string reverse = "single";

    int batch = 4;
    int ae_steps = 3000;
    int sdseg_steps = 6000;
    double lr = 1e-4;
    double kl_weight = 1e-6;
    std::uint64_t seed = 0;
    int log_every = 100;
    int ckpt_every = 0;      // 0 = final checkpoint only
    double grad_clip = 0.0;  // global-norm cap; 0 = off

    json to_json() const;
    static RunConfig from_json(const json& j);
    // canonical serialization (sorted keys); hash is stable under reordering
    std::string canonical() const;
    std::uint64_t hash() const;
    void apply_override(const std::string& key, const std::string& value);
};

// ---- CSV ----

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

Csv read_csv(const std::filesystem::path& path);  // malformed -> error naming the row
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// ---- SVG plots ----
// kind "curve": column 0 is x, remaining numeric columns are series.
// kind "bar": column 0 is the label, column 1 the value.
void plot_csv(const std::filesystem::path& csv_in, const std::filesystem::path& svg_out,
              const std::string& kind);

// ---- run artifacts ----

// exclusive ownership of an output directory for the duration of a run
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path file_;
};

// deterministic provenance record (no timestamps: reruns must be byte-stable)
void write_run_json(const std::filesystem::path& dir, const json& record);

}  // namespace sdseg
