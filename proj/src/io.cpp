#include "sdseg/io.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sdseg {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string tnsr_payload(const Tensorf& t) {
    std::string out;
    out.append("TNSR");
    out.push_back(1);  // version
    out.push_back(0);  // dtype f32
    out.push_back(static_cast<char>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
    const size_t bytes = t.data().size() * sizeof(float);
    const size_t off = out.size();
    out.resize(off + bytes);
    std::memcpy(out.data() + off, t.data().data(), bytes);
    return out;
}

// parses one TNSR record starting at p; advances p; throws on malformed input
Tensorf parse_tnsr(const unsigned char*& p, const unsigned char* end, const std::string& what) {
    auto fail = [&](const std::string& msg) -> Tensorf {
        throw std::runtime_error("tnsr: " + msg + " in " + what);
    };
    if (end - p < 7) return fail("truncated header");
    if (std::memcmp(p, "TNSR", 4) != 0) return fail("bad magic");
    if (p[4] != 1) return fail("unsupported version " + std::to_string(p[4]));
    if (p[5] != 0) return fail("unsupported dtype " + std::to_string(p[5]));
    const int ndim = p[6];
    p += 7;
    if (ndim < 1) return fail("empty shape");
    if (end - p < 4 * ndim) return fail("truncated dims");
    Shape shape(ndim);
    std::int64_t n = 1;
    for (int i = 0; i < ndim; ++i) {
        shape[i] = static_cast<int>(get_u32(p));
        p += 4;
        if (shape[i] <= 0) return fail("nonpositive dim");
        n *= shape[i];
    }
    if (end - p < static_cast<std::ptrdiff_t>(n * sizeof(float))) return fail("truncated payload");
    std::vector<float> data(static_cast<size_t>(n));
    std::memcpy(data.data(), p, static_cast<size_t>(n) * sizeof(float));
    p += n * sizeof(float);
    return Tensorf::from_data(shape, std::move(data));
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spew(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace

void write_tnsr(const std::filesystem::path& path, const Tensorf& t) {
    spew(path, tnsr_payload(t));
}

std::vector<unsigned char> tnsr_bytes(const Tensorf& t) {
    const std::string s = tnsr_payload(t);
    return std::vector<unsigned char>(s.begin(), s.end());
}

Tensorf read_tnsr(const std::filesystem::path& path) {
    const std::string bytes = slurp(path);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const unsigned char* end = p + bytes.size();
    Tensorf t = parse_tnsr(p, end, path.string());
    if (p != end) throw std::runtime_error("tnsr: trailing bytes in " + path.string());
    return t;
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

Tensorf Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint: missing tensor " + name);
}

void Checkpoint::put(const std::string& name, const Tensorf& t) {
    tensors.emplace_back(name, t);
}

namespace {
const char kCkptMagic[8] = {'S', 'D', 'S', 'E', 'G', 'C', 'K', '1'};
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    json header;
    header["format_version"] = c.format_version;
    header["step"] = c.step;
    header["arch_hash"] = c.arch_hash;
    header["config"] = c.config;
    std::vector<std::string> names;
    for (const auto& [n, t] : c.tensors) names.push_back(n);
    header["tensors"] = names;
    const std::string hs = header.dump();

    std::string out;
    out.append(kCkptMagic, 8);
    put_u32(out, static_cast<std::uint32_t>(hs.size()));
    out += hs;
    for (const auto& [n, t] : c.tensors) out += tnsr_payload(t);
    spew(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::string bytes;
    try {
        bytes = slurp(path);
    } catch (const std::exception& e) {
        throw CheckpointError(CheckpointError::Kind::Corrupt, e.what());
    }
    auto corrupt = [&](const std::string& msg) -> Checkpoint {
        throw CheckpointError(CheckpointError::Kind::Corrupt,
                              "checkpoint " + path.string() + ": " + msg);
    };
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCkptMagic, 8) != 0)
        return corrupt("bad magic");
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data()) + 8;
    const unsigned char* end = reinterpret_cast<const unsigned char*>(bytes.data()) + bytes.size();
    const std::uint32_t hlen = get_u32(p);
    p += 4;
    if (end - p < static_cast<std::ptrdiff_t>(hlen)) return corrupt("truncated header");
    json header;
    try {
        header = json::parse(std::string(reinterpret_cast<const char*>(p), hlen));
    } catch (const std::exception& e) {
        return corrupt(std::string("header parse: ") + e.what());
    }
    p += hlen;

    Checkpoint c;
    try {
        c.format_version = header.at("format_version").get<int>();
        if (c.format_version != 1)
            throw CheckpointError(CheckpointError::Kind::Version,
                                  "checkpoint " + path.string() + ": format_version " +
                                      std::to_string(c.format_version) + " unsupported");
        c.step = header.at("step").get<std::int64_t>();
        c.arch_hash = header.at("arch_hash").get<std::uint64_t>();
        c.config = header.value("config", json::object());
        for (const auto& name : header.at("tensors")) {
            Tensorf t;
            try {
                t = parse_tnsr(p, end, path.string());
            } catch (const std::exception& e) {
                return corrupt(e.what());
            }
            c.tensors.emplace_back(name.get<std::string>(), t);
        }
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        return corrupt(std::string("header fields: ") + e.what());
    }
    if (p != end) return corrupt("trailing bytes");
    return c;
}

void require_arch(const Checkpoint& c, std::uint64_t expected) {
    if (c.arch_hash != expected)
        throw CheckpointError(CheckpointError::Kind::ArchHash,
                              "checkpoint architecture hash mismatch: file has " +
                                  std::to_string(c.arch_hash) + ", expected " +
                                  std::to_string(expected));
}

json RunConfig::to_json() const {
    json j;
    j["image_size"] = image_size;
    j["ae_channels"] = ae_channels;
    j["z_channels"] = z_channels;
    j["unet_base"] = unet_base;
    j["temb_dim"] = temb_dim;
    j["timesteps"] = timesteps;
    j["beta_start"] = beta_start;
    j["beta_end"] = beta_end;
    j["lambda"] = lambda;
    j["cond_mode"] = cond_mode;
    j["trainable_encoder"] = trainable_encoder;
    j["reverse"] = reverse;
    j["batch"] = batch;
    j["ae_steps"] = ae_steps;
    j["sdseg_steps"] = sdseg_steps;
    j["lr"] = lr;
    j["kl_weight"] = kl_weight;
    j["seed"] = seed;
    j["log_every"] = log_every;
    j["ckpt_every"] = ckpt_every;
    j["grad_clip"] = grad_clip;
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.ae_channels = j.value("ae_channels", c.ae_channels);
    c.z_channels = j.value("z_channels", c.z_channels);
    c.unet_base = j.value("unet_base", c.unet_base);
    c.temb_dim = j.value("temb_dim", c.temb_dim);
    c.timesteps = j.value("timesteps", c.timesteps);
    c.beta_start = j.value("beta_start", c.beta_start);
    c.beta_end = j.value("beta_end", c.beta_end);
    c.lambda = j.value("lambda", c.lambda);
    c.cond_mode = j.value("cond_mode", c.cond_mode);
    c.trainable_encoder = j.value("trainable_encoder", c.trainable_encoder);
    c.reverse = j.value("reverse", c.reverse);
    c.batch = j.value("batch", c.batch);
    c.ae_steps = j.value("ae_steps", c.ae_steps);
    c.sdseg_steps = j.value("sdseg_steps", c.sdseg_steps);
    c.lr = j.value("lr", c.lr);
    c.kl_weight = j.value("kl_weight", c.kl_weight);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.ckpt_every = j.value("ckpt_every", c.ckpt_every);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    if (c.cond_mode != "concat" && c.cond_mode != "cross-attention")
        throw std::invalid_argument("config: cond_mode must be concat or cross-attention");
    if (c.lambda < 0) throw std::invalid_argument("config: lambda must be >= 0");
    if (c.batch < 1) throw std::invalid_argument("config: batch must be >= 1");
    return c;
}

std::string RunConfig::canonical() const { return to_json().dump(); }

std::uint64_t RunConfig::hash() const {
    const std::string s = canonical();
    return fnv1a(s.data(), s.size());
}

void RunConfig::apply_override(const std::string& key, const std::string& value) {
    json j = to_json();
    if (!j.contains(key)) throw std::invalid_argument("config override: unknown key '" + key + "'");
    json& slot = j[key];
    if (slot.is_string())
        slot = value;
    else if (slot.is_boolean())
        slot = (value == "true" || value == "1");
    else if (slot.is_number_integer())
        slot = std::stoll(value);
    else if (slot.is_number_unsigned())
        slot = static_cast<std::uint64_t>(std::stoull(value));
    else
        slot = std::stod(value);
    *this = from_json(j);
}

Csv read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    Csv csv;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.push_back("");
        if (lineno == 1) {
            csv.header = cells;
        } else {
            if (cells.size() != csv.header.size())
                throw std::runtime_error(path.string() + ": row " + std::to_string(lineno) +
                                         " has " + std::to_string(cells.size()) + " cells, expected " +
                                         std::to_string(csv.header.size()));
            csv.rows.push_back(cells);
        }
    }
    if (csv.header.empty()) throw std::runtime_error(path.string() + ": missing header row");
    return csv;
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << "\n";
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
        out << "\n";
    }
}

namespace {

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

double parse_cell(const std::string& s, size_t row, const std::filesystem::path& path) {
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ": row " + std::to_string(row + 2) +
                                 ": non-numeric cell '" + s + "'");
    }
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

}  // namespace

void plot_csv(const std::filesystem::path& csv_in, const std::filesystem::path& svg_out,
              const std::string& kind) {
    if (kind != "curve" && kind != "bar")
        throw std::invalid_argument("plot: kind must be curve or bar");
    const Csv csv = read_csv(csv_in);
    if (csv.rows.empty()) throw std::runtime_error(csv_in.string() + ": no data rows");
    if (csv.header.size() < 2) throw std::runtime_error(csv_in.string() + ": need >= 2 columns");

    const double W = 640, H = 420;
    const double ml = 64, mr = kind == "curve" ? 150 : 30, mt = 24, mb = 48;
    const double pw = W - ml - mr, ph = H - mt - mb;

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    svg << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";

    auto axis_text = [&](double x, double y, const std::string& s, const char* anchor,
                         int size = 11) {
        svg << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" font-size=\"" << size
            << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << xml_escape(s)
            << "</text>\n";
    };

    if (kind == "curve") {
        const size_t nseries = csv.header.size() - 1;
        std::vector<double> xs;
        std::vector<std::vector<double>> ys(nseries);
        for (size_t r = 0; r < csv.rows.size(); ++r) {
            xs.push_back(parse_cell(csv.rows[r][0], r, csv_in));
            for (size_t s = 0; s < nseries; ++s)
                ys[s].push_back(parse_cell(csv.rows[r][s + 1], r, csv_in));
        }
        double xmin = xs[0], xmax = xs[0], ymin = ys[0][0], ymax = ys[0][0];
        for (double v : xs) { xmin = std::min(xmin, v); xmax = std::max(xmax, v); }
        for (const auto& s : ys)
            for (double v : s) { ymin = std::min(ymin, v); ymax = std::max(ymax, v); }
        if (xmax == xmin) { xmax += 1; xmin -= 1; }
        if (ymax == ymin) { ymax += 1; ymin -= 1; }
        const double ypad = 0.05 * (ymax - ymin);
        ymin -= ypad;
        ymax += ypad;
        auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
        auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

        for (int i = 0; i <= 5; ++i) {
            const double xv = xmin + (xmax - xmin) * i / 5;
            const double yv = ymin + (ymax - ymin) * i / 5;
            svg << "<line x1=\"" << fmt(px(xv)) << "\" y1=\"" << fmt(mt + ph) << "\" x2=\""
                << fmt(px(xv)) << "\" y2=\"" << fmt(mt + ph + 4) << "\" stroke=\"black\"/>\n";
            axis_text(px(xv), mt + ph + 18, fmt(xv), "middle");
            svg << "<line x1=\"" << fmt(ml - 4) << "\" y1=\"" << fmt(py(yv)) << "\" x2=\"" << fmt(ml)
                << "\" y2=\"" << fmt(py(yv)) << "\" stroke=\"black\"/>\n";
            axis_text(ml - 8, py(yv) + 4, fmt(yv), "end");
        }
        svg << "<rect x=\"" << fmt(ml) << "\" y=\"" << fmt(mt) << "\" width=\"" << fmt(pw)
            << "\" height=\"" << fmt(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
        axis_text(ml + pw / 2, H - 10, csv.header[0], "middle", 13);

        for (size_t s = 0; s < nseries; ++s) {
            const char* color = kPalette[s % 6];
            svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
            for (size_t r = 0; r < xs.size(); ++r)
                svg << fmt(px(xs[r])) << "," << fmt(py(ys[s][r])) << " ";
            svg << "\"/>\n";
            for (size_t r = 0; r < xs.size(); ++r)
                svg << "<circle cx=\"" << fmt(px(xs[r])) << "\" cy=\"" << fmt(py(ys[s][r]))
                    << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
            const double ly = mt + 16 + 18 * static_cast<double>(s);
            svg << "<line x1=\"" << fmt(ml + pw + 10) << "\" y1=\"" << fmt(ly) << "\" x2=\""
                << fmt(ml + pw + 34) << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << color
                << "\" stroke-width=\"1.8\"/>\n";
            axis_text(ml + pw + 40, ly + 4, csv.header[s + 1], "start");
        }
    } else {
        std::vector<double> vals;
        for (size_t r = 0; r < csv.rows.size(); ++r)
            vals.push_back(parse_cell(csv.rows[r][1], r, csv_in));
        double vmax = 0;
        for (double v : vals) vmax = std::max(vmax, v);
        if (vmax <= 0) vmax = 1;
        const double bw = pw / (2.0 * static_cast<double>(vals.size()));
        for (size_t i = 0; i < vals.size(); ++i) {
            const double cx = ml + pw * (static_cast<double>(i) + 0.5) / static_cast<double>(vals.size());
            const double bh = ph * vals[i] / (vmax * 1.1);
            svg << "<rect x=\"" << fmt(cx - bw / 2) << "\" y=\"" << fmt(mt + ph - bh) << "\" width=\""
                << fmt(bw) << "\" height=\"" << fmt(bh) << "\" fill=\"" << kPalette[i % 6] << "\"/>\n";
            axis_text(cx, mt + ph + 16, csv.rows[i][0], "middle");
            axis_text(cx, mt + ph - bh - 4, fmt(vals[i]), "middle");
        }
        svg << "<rect x=\"" << fmt(ml) << "\" y=\"" << fmt(mt) << "\" width=\"" << fmt(pw)
            << "\" height=\"" << fmt(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
        axis_text(ml + pw / 2, H - 10, csv.header[0], "middle", 13);
        axis_text(14, mt + ph / 2, csv.header[1], "middle", 13);
    }
    svg << "</svg>\n";
    spew(svg_out, svg.str());
}

RunLock::RunLock(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    file_ = dir / ".lock";
    const int fd = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        throw std::runtime_error("output directory " + dir.string() +
                                 " is locked by another run (found .lock)");
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    std::filesystem::remove(file_, ec);
}

void write_run_json(const std::filesystem::path& dir, const json& record) {
    std::ofstream out(dir / "run.json", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write run.json in " + dir.string());
    out << record.dump(2) << "\n";
}

}  // namespace sdseg
