#include "replearn/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace replearn {
namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

std::uint32_t be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

} // namespace

namespace detail {

IdxImages read_idx_images(const std::string& path) {
    std::vector<std::uint8_t> bytes = read_file(path);
    if (bytes.size() < 16) throw DataError(path + ": truncated IDX image header");
    std::uint32_t magic = be32(bytes.data());
    if (magic != kIdxImagesMagic) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "0x%08x", magic);
        throw DataError(path + ": bad IDX image magic " + buf);
    }
    IdxImages img;
    img.count = be32(bytes.data() + 4);
    img.rows = be32(bytes.data() + 8);
    img.cols = be32(bytes.data() + 12);
    std::size_t expected = 16 + img.count * img.rows * img.cols;
    if (bytes.size() != expected)
        throw DataError(path + ": expected " + std::to_string(expected) + " bytes, found " +
                        std::to_string(bytes.size()));
    img.pixels.assign(bytes.begin() + 16, bytes.end());
    return img;
}

std::vector<std::uint8_t> read_idx_labels(const std::string& path) {
    std::vector<std::uint8_t> bytes = read_file(path);
    if (bytes.size() < 8) throw DataError(path + ": truncated IDX label header");
    std::uint32_t magic = be32(bytes.data());
    if (magic != kIdxLabelsMagic) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "0x%08x", magic);
        throw DataError(path + ": bad IDX label magic " + buf);
    }
    std::size_t count = be32(bytes.data() + 4);
    if (bytes.size() != 8 + count)
        throw DataError(path + ": expected " + std::to_string(8 + count) + " bytes, found " +
                        std::to_string(bytes.size()));
    return std::vector<std::uint8_t>(bytes.begin() + 8, bytes.end());
}

CifarRecords read_cifar_batches(const std::vector<std::string>& paths) {
    constexpr std::size_t record_len = 3073;
    CifarRecords rec;
    for (const auto& path : paths) {
        std::vector<std::uint8_t> bytes = read_file(path);
        if (bytes.empty() || bytes.size() % record_len != 0)
            throw DataError(path + ": length " + std::to_string(bytes.size()) +
                            " is not a positive multiple of 3073");
        rec.bytes.insert(rec.bytes.end(), bytes.begin(), bytes.end());
        rec.count += bytes.size() / record_len;
    }
    return rec;
}

// Rows are 5-bit slices, MSB = leftmost column.
const std::uint16_t digit_font[10][7] = {
    {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, // 0
    {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}, // 1
    {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, // 2
    {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}, // 3
    {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, // 4
    {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}, // 5
    {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, // 6
    {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}, // 7
    {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, // 8
    {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}, // 9
};

} // namespace detail

void write_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels,
                      std::size_t count, std::size_t rows, std::size_t cols) {
    if (pixels.size() != count * rows * cols)
        throw DataError("write_idx_images: pixel buffer does not match dimensions");
    std::vector<std::uint8_t> out;
    out.reserve(16 + pixels.size());
    put_be32(out, kIdxImagesMagic);
    put_be32(out, std::uint32_t(count));
    put_be32(out, std::uint32_t(rows));
    put_be32(out, std::uint32_t(cols));
    out.insert(out.end(), pixels.begin(), pixels.end());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
    std::vector<std::uint8_t> out;
    out.reserve(8 + labels.size());
    put_be32(out, kIdxLabelsMagic);
    put_be32(out, std::uint32_t(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
}

SyntheticKind synthetic_kind_from(const std::string& name) {
    if (name == "blobs") return SyntheticKind::blobs;
    if (name == "spirals") return SyntheticKind::spirals;
    if (name == "digits") return SyntheticKind::digits;
    throw DataError("unknown synthetic dataset '" + name + "'");
}

std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>>
render_digit_bytes(std::size_t n, std::size_t size, double noise, std::uint64_t seed) {
    if (size < 7) throw DataError("digits: image size must be >= 7");
    Rng rng(seed);
    std::vector<std::uint8_t> pixels(n * size * size, 0);
    std::vector<std::uint8_t> labels(n);

    // Glyph scaled by nearest neighbour into a (size-2)^2 box, then shifted
    // by up to one pixel; remaining noise is additive per pixel.
    const std::size_t box = size - 2;
    for (std::size_t i = 0; i < n; ++i) {
        int digit = int(i % 10);
        labels[i] = std::uint8_t(digit);
        int dx = int(rng.index(3)); // 0..2
        int dy = int(rng.index(3));
        std::uint8_t* img = pixels.data() + i * size * size;
        for (std::size_t y = 0; y < box; ++y) {
            std::size_t gy = y * 7 / box;
            for (std::size_t x = 0; x < box; ++x) {
                std::size_t gx = x * 5 / box;
                bool on = (detail::digit_font[digit][gy] >> (4 - gx)) & 1;
                if (!on) continue;
                std::size_t py = y + std::size_t(dy);
                std::size_t px = x + std::size_t(dx);
                if (py < size && px < size) img[py * size + px] = 255;
            }
        }
        if (noise > 0.0) {
            for (std::size_t p = 0; p < size * size; ++p) {
                double v = double(img[p]) + 255.0 * noise * rng.normal();
                img[p] = std::uint8_t(std::min(255.0, std::max(0.0, v)));
            }
        }
    }
    return {std::move(pixels), std::move(labels)};
}

} // namespace replearn
