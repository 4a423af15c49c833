#pragma once

// Grayscale image container, PGM/PNG i/o, and the rule-based preprocessing
// chain (background thresholding, border trimming, bilinear resize, flips).

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "mammolab/common.hpp"

namespace mammolab {

struct Image {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> px;  // row-major

    Image() = default;
    Image(std::size_t r, std::size_t c, std::uint8_t fill = 0)
        : rows(r), cols(c), px(r * c, fill) {}

    std::uint8_t& at(std::size_t r, std::size_t c) { return px[r * cols + c]; }
    std::uint8_t at(std::size_t r, std::size_t c) const { return px[r * cols + c]; }
    bool empty() const { return rows == 0 || cols == 0; }

    bool operator==(const Image&) const = default;
};

// ---------------------------------------------------------------- PGM i/o

inline void write_pgm(const Image& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "P5\n" << img.cols << " " << img.rows << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.px.data()),
              static_cast<std::streamsize>(img.px.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

namespace detail {

inline int pgm_next_token(std::istream& in, std::string& tok) {
    tok.clear();
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok.empty() ? EOF : 0;
}

}  // namespace detail

inline Image read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string magic;
    detail::pgm_next_token(in, magic);
    if (magic != "P5" && magic != "P2") throw BadMagic("not a PGM file: " + path.string());
    std::string tok;
    std::size_t dims[3];  // cols rows maxval
    for (auto& d : dims) {
        if (detail::pgm_next_token(in, tok) == EOF) throw TruncatedFile(path.string());
        d = static_cast<std::size_t>(std::stoull(tok));
    }
    if (dims[2] == 0 || dims[2] > 255) throw MalformedRecord("PGM maxval out of range");
    Image img(dims[1], dims[0]);
    if (magic == "P5") {
        in.read(reinterpret_cast<char*>(img.px.data()),
                static_cast<std::streamsize>(img.px.size()));
        if (in.gcount() != static_cast<std::streamsize>(img.px.size()))
            throw TruncatedFile(path.string());
    } else {
        for (auto& p : img.px) {
            if (detail::pgm_next_token(in, tok) == EOF) throw TruncatedFile(path.string());
            p = static_cast<std::uint8_t>(std::stoul(tok));
        }
    }
    return img;
}

// ---------------------------------------------------------------- PNG read
// Minimal reader for 8-bit grayscale, non-interlaced PNG (the only variant
// the corpus interface accepts besides PGM). Inflate via zlib.

inline Image read_png_gray(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw BadMagic("not a PNG file: " + path.string());

    auto be32 = [&](std::size_t off) -> std::uint32_t {
        return (std::uint32_t(bytes[off]) << 24) | (std::uint32_t(bytes[off + 1]) << 16) |
               (std::uint32_t(bytes[off + 2]) << 8) | std::uint32_t(bytes[off + 3]);
    };

    std::size_t off = 8;
    std::uint32_t width = 0, height = 0;
    std::vector<std::uint8_t> idat;
    bool saw_ihdr = false;
    while (off + 8 <= bytes.size()) {
        const std::uint32_t len = be32(off);
        const std::string type(bytes.begin() + off + 4, bytes.begin() + off + 8);
        const std::size_t data = off + 8;
        if (data + len + 4 > bytes.size()) throw TruncatedFile(path.string());
        if (type == "IHDR") {
            width = be32(data);
            height = be32(data + 4);
            const std::uint8_t bit_depth = bytes[data + 8];
            const std::uint8_t color_type = bytes[data + 9];
            const std::uint8_t interlace = bytes[data + 12];
            if (bit_depth != 8 || color_type != 0 || interlace != 0)
                throw MalformedRecord("unsupported PNG variant (need gray8, non-interlaced)");
            saw_ihdr = true;
        } else if (type == "IDAT") {
            idat.insert(idat.end(), bytes.begin() + data, bytes.begin() + data + len);
        } else if (type == "IEND") {
            break;
        }
        off = data + len + 4;  // skip CRC
    }
    if (!saw_ihdr || width == 0 || height == 0) throw MalformedRecord("PNG missing IHDR");

    const std::size_t stride = width + 1;  // filter byte per scanline
    std::vector<std::uint8_t> raw(height * stride);
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw TruncatedFile("PNG inflate failed: " + path.string());

    Image img(height, width);
    for (std::size_t r = 0; r < height; ++r) {
        const std::uint8_t filter = raw[r * stride];
        const std::uint8_t* src = &raw[r * stride + 1];
        std::uint8_t* dst = &img.px[r * width];
        const std::uint8_t* up = r > 0 ? &img.px[(r - 1) * width] : nullptr;
        for (std::size_t c = 0; c < width; ++c) {
            const int a = c > 0 ? dst[c - 1] : 0;
            const int b = up ? up[c] : 0;
            const int d = (c > 0 && up) ? up[c - 1] : 0;
            int x = src[c];
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: {
                    const int p = a + b - d;
                    const int pa = std::abs(p - a), pb = std::abs(p - b), pd = std::abs(p - d);
                    x += (pa <= pb && pa <= pd) ? a : (pb <= pd ? b : d);
                    break;
                }
                default: throw MalformedRecord("bad PNG filter type");
            }
            dst[c] = static_cast<std::uint8_t>(x & 0xFF);
        }
    }
    return img;
}

inline Image load_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    char head[2] = {0, 0};
    in.read(head, 2);
    in.close();
    if (head[0] == 'P' && (head[1] == '5' || head[1] == '2')) return read_pgm(path);
    return read_png_gray(path);
}

// ----------------------------------------------------------- preprocessing

namespace detail {

inline bool row_constant(const Image& img, std::size_t r, std::size_t c0, std::size_t c1) {
    const std::uint8_t v = img.at(r, c0);
    for (std::size_t c = c0; c <= c1; ++c)
        if (img.at(r, c) != v) return false;
    return true;
}

inline bool col_constant(const Image& img, std::size_t c, std::size_t r0, std::size_t r1) {
    const std::uint8_t v = img.at(r0, c);
    for (std::size_t r = r0; r <= r1; ++r)
        if (img.at(r, c) != v) return false;
    return true;
}

}  // namespace detail

// Zero out values below 40, then strip constant-valued border rows/columns
// until no border row or column is constant. A fully constant image reduces
// to its single top-left pixel.
inline Image roi_crop(const Image& input) {
    if (input.empty()) throw EmptyImage();
    Image img = input;
    for (auto& p : img.px)
        if (p < 40) p = 0;

    std::size_t r0 = 0, r1 = img.rows - 1, c0 = 0, c1 = img.cols - 1;
    bool changed = true;
    while (changed) {
        changed = false;
        while (r1 > r0 && detail::row_constant(img, r1, c0, c1)) { --r1; changed = true; }
        while (r1 > r0 && detail::row_constant(img, r0, c0, c1)) { ++r0; changed = true; }
        while (c1 > c0 && detail::col_constant(img, c1, r0, r1)) { --c1; changed = true; }
        while (c1 > c0 && detail::col_constant(img, c0, r0, r1)) { ++c0; changed = true; }
    }
    Image out(r1 - r0 + 1, c1 - c0 + 1);
    for (std::size_t r = r0; r <= r1; ++r)
        for (std::size_t c = c0; c <= c1; ++c)
            out.at(r - r0, c - c0) = img.at(r, c);
    return out;
}

// Bilinear resize with corner alignment, so resizing to the same side is the
// identity and a constant field stays constant.
inline Image resize(const Image& img, std::size_t side) {
    if (img.empty()) throw EmptyImage();
    if (side == img.rows && side == img.cols) return img;
    Image out(side, side);
    const double sr = side > 1 ? double(img.rows - 1) / double(side - 1) : 0.0;
    const double sc = side > 1 ? double(img.cols - 1) / double(side - 1) : 0.0;
    for (std::size_t r = 0; r < side; ++r) {
        const double fr = side > 1 ? r * sr : (img.rows - 1) * 0.5;
        const std::size_t r_lo = static_cast<std::size_t>(fr);
        const std::size_t r_hi = std::min(r_lo + 1, img.rows - 1);
        const double wr = fr - double(r_lo);
        for (std::size_t c = 0; c < side; ++c) {
            const double fc = side > 1 ? c * sc : (img.cols - 1) * 0.5;
            const std::size_t c_lo = static_cast<std::size_t>(fc);
            const std::size_t c_hi = std::min(c_lo + 1, img.cols - 1);
            const double wc = fc - double(c_lo);
            const double v = (1 - wr) * ((1 - wc) * img.at(r_lo, c_lo) + wc * img.at(r_lo, c_hi)) +
                             wr * ((1 - wc) * img.at(r_hi, c_lo) + wc * img.at(r_hi, c_hi));
            out.at(r, c) = static_cast<std::uint8_t>(std::clamp(v + 0.5, 0.0, 255.0));
        }
    }
    return out;
}

inline Image flip_horizontal(const Image& img) {
    Image out(img.rows, img.cols);
    for (std::size_t r = 0; r < img.rows; ++r)
        for (std::size_t c = 0; c < img.cols; ++c)
            out.at(r, c) = img.at(r, img.cols - 1 - c);
    return out;
}

inline Image flip_vertical(const Image& img) {
    Image out(img.rows, img.cols);
    for (std::size_t r = 0; r < img.rows; ++r)
        for (std::size_t c = 0; c < img.cols; ++c)
            out.at(r, c) = img.at(img.rows - 1 - r, c);
    return out;
}

}  // namespace mammolab
