#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchwork/tensor.hpp"

namespace patchwork {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

// ---- PWT1 tensor container ----
// 4-byte magic "PWT1", three little-endian u32 dims (rows, cols, channels),
// then rows*cols*channels little-endian f32 values.

inline void write_pwt1(std::ostream& out, const Tensor& t) {
    out.write("PWT1", 4);
    const std::uint32_t dims[3] = {static_cast<std::uint32_t>(t.rows),
                                   static_cast<std::uint32_t>(t.cols),
                                   static_cast<std::uint32_t>(t.channels)};
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!out) throw std::runtime_error("PWT1: write failed");
}

inline Tensor read_pwt1(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "PWT1", 4) != 0)
        throw std::runtime_error("PWT1: bad magic");
    std::uint32_t dims[3];
    in.read(reinterpret_cast<char*>(dims), sizeof(dims));
    if (!in) throw std::runtime_error("PWT1: truncated header");
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1 ||
        static_cast<std::uint64_t>(dims[0]) * dims[1] * dims[2] > (1u << 30))
        throw std::runtime_error("PWT1: implausible dims");
    Tensor t(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]));
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in) throw std::runtime_error("PWT1: truncated data");
    return t;
}

inline void save_pwt1(const std::string& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    write_pwt1(f, t);
}

inline Tensor load_pwt1(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    return read_pwt1(f);
}

// ---- Netpbm images ----
// P5 (binary graymap) for masks: 0 background, 255 foreground.
// P6 (binary pixmap) for frames: float [0,1] quantized to 8 bits.

inline void write_pgm(const std::string& path, const Tensor& gray) {
    if (gray.channels != 1) throw std::invalid_argument("write_pgm: single channel required");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << "P5\n" << gray.cols << " " << gray.rows << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(gray.cols));
    for (int r = 0; r < gray.rows; ++r) {
        for (int c = 0; c < gray.cols; ++c) {
            const float v = std::min(1.0f, std::max(0.0f, gray.at(r, c, 0)));
            row[static_cast<std::size_t>(c)] = static_cast<unsigned char>(v * 255.0f + 0.5f);
        }
        f.write(reinterpret_cast<const char*>(row.data()), gray.cols);
    }
    if (!f) throw std::runtime_error("P5: write failed");
}

inline void write_ppm(const std::string& path, const Tensor& rgb) {
    if (rgb.channels != 3) throw std::invalid_argument("write_ppm: three channels required");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << "P6\n" << rgb.cols << " " << rgb.rows << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(rgb.cols) * 3);
    for (int r = 0; r < rgb.rows; ++r) {
        for (int c = 0; c < rgb.cols; ++c) {
            for (int ch = 0; ch < 3; ++ch) {
                const float v = std::min(1.0f, std::max(0.0f, rgb.at(r, c, ch)));
                row[static_cast<std::size_t>(c) * 3 + ch] =
                    static_cast<unsigned char>(v * 255.0f + 0.5f);
            }
        }
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw std::runtime_error("P6: write failed");
}

namespace detail {
inline int read_pnm_int(std::istream& in) {
    int c = in.get();
    while (c == '#' || std::isspace(c)) {
        if (c == '#') {
            while (c != '\n' && c != EOF) c = in.get();
        }
        c = in.get();
    }
    int value = 0;
    bool any = false;
    while (c >= '0' && c <= '9') {
        value = value * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any) throw std::runtime_error("PNM: malformed header");
    return value;
}
}  // namespace detail

inline Tensor read_pnm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    char p = static_cast<char>(f.get());
    char kind = static_cast<char>(f.get());
    if (p != 'P' || (kind != '5' && kind != '6')) throw std::runtime_error("PNM: unsupported format");
    const int cols = detail::read_pnm_int(f);
    const int rows = detail::read_pnm_int(f);
    const int maxval = detail::read_pnm_int(f);
    if (maxval != 255) throw std::runtime_error("PNM: only maxval 255 supported");
    const int channels = kind == '6' ? 3 : 1;
    Tensor t(rows, cols, channels);
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols * channels);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("PNM: truncated data");
    for (std::size_t i = 0; i < buf.size(); ++i)
        t.data[i] = static_cast<float>(buf[i]) / 255.0f;
    return t;
}

// ---- checkpoint directory: manifest.txt + one .pwt file per tensor ----
// Manifest lines:
//   tensor <name> <relpath>
//   meta <key> <value...>

class Checkpoint {
  public:
    void put(const std::string& name, const Tensor& t) { tensors_[name] = t; }

    void put_meta(const std::string& key, const std::string& value) { meta_[key] = value; }

    const Tensor& get(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return tensors_.count(name) > 0; }

    std::string meta(const std::string& key) const {
        auto it = meta_.find(key);
        if (it == meta_.end()) throw std::runtime_error("checkpoint: missing meta " + key);
        return it->second;
    }

    bool has_meta(const std::string& key) const { return meta_.count(key) > 0; }

    void save(const std::string& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        std::ofstream manifest(fs::path(dir) / "manifest.txt");
        if (!manifest) throw std::runtime_error("cannot write manifest in " + dir);
        for (const auto& [key, value] : meta_) manifest << "meta " << key << " " << value << "\n";
        for (const auto& [name, t] : tensors_) {
            const std::string rel = name + ".pwt";
            manifest << "tensor " << name << " " << t.rows << " " << t.cols << " " << t.channels
                     << " " << rel << "\n";
            save_pwt1((fs::path(dir) / rel).string(), t);
        }
        if (!manifest) throw std::runtime_error("manifest write failed in " + dir);
    }

    static Checkpoint load(const std::string& dir) {
        namespace fs = std::filesystem;
        std::ifstream manifest(fs::path(dir) / "manifest.txt");
        if (!manifest) throw std::runtime_error("cannot open manifest in " + dir);
        Checkpoint ck;
        std::string line;
        while (std::getline(manifest, line)) {
            if (line.empty()) continue;
            std::istringstream ss(line);
            std::string kind;
            ss >> kind;
            if (kind == "meta") {
                std::string key;
                ss >> key;
                std::string value;
                std::getline(ss, value);
                if (!value.empty() && value.front() == ' ') value.erase(0, 1);
                ck.meta_[key] = value;
            } else if (kind == "tensor") {
                std::string name, rel;
                int r, c, ch;
                ss >> name >> r >> c >> ch >> rel;
                Tensor t = load_pwt1((fs::path(dir) / rel).string());
                if (t.rows != r || t.cols != c || t.channels != ch)
                    throw std::runtime_error("checkpoint: manifest/tensor shape mismatch for " + name);
                ck.tensors_[name] = std::move(t);
            } else {
                throw std::runtime_error("checkpoint: unknown manifest entry '" + kind + "'");
            }
        }
        return ck;
    }

  private:
    std::map<std::string, Tensor> tensors_;
    std::map<std::string, std::string> meta_;
};

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << content;
    if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace patchwork
