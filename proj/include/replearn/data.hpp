#pragma once

// Dataset ingestion (IDX images, CIFAR-10 binary batches) plus seeded
// synthetic generators for desk-scale experiments. File loaders normalise
// raw bytes to [0,1]; generators emit values already inside [0,1].

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "replearn/tensor.hpp"

namespace replearn {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
struct DatasetT {
    TensorT<T> inputs; // [N x features] or [N x C x H x W]
    std::vector<int> labels;
    int class_count = 0;
    std::string split = "train";

    std::size_t size() const { return labels.size(); }

    Shape sample_shape() const {
        Shape s = inputs.shape();
        s.erase(s.begin());
        return s;
    }

    // Gather a batch in the given index order.
    std::pair<TensorT<T>, std::vector<int>> batch(const std::vector<std::size_t>& idx) const {
        Shape shape = inputs.shape();
        shape[0] = idx.size();
        std::size_t stride = inputs.size() / inputs.dim(0);
        TensorT<T> out(shape);
        std::vector<int> ys(idx.size());
        for (std::size_t b = 0; b < idx.size(); ++b) {
            if (idx[b] >= size()) throw DataError("batch: index out of range");
            const T* src = inputs.data() + idx[b] * stride;
            T* dst = out.data() + b * stride;
            for (std::size_t i = 0; i < stride; ++i) dst[i] = src[i];
            ys[b] = labels[idx[b]];
        }
        return {std::move(out), std::move(ys)};
    }

    // First `count` samples (count == 0 keeps everything).
    DatasetT head(std::size_t count) const {
        if (count == 0 || count >= size()) return *this;
        std::vector<std::size_t> idx(count);
        for (std::size_t i = 0; i < count; ++i) idx[i] = i;
        auto [ins, ys] = batch(idx);
        return DatasetT{std::move(ins), std::move(ys), class_count, split};
    }

    // Seeded class-balanced subset: round-robin over classes in first-seen
    // order after a seeded shuffle, so reruns pick the same samples.
    DatasetT balanced_head(std::size_t count, std::uint64_t seed) const {
        if (count == 0 || count >= size()) return *this;
        std::vector<std::size_t> order(size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(seed);
        rng.shuffle(order);
        std::vector<std::vector<std::size_t>> buckets(class_count);
        for (auto i : order) buckets[labels[i]].push_back(i);
        std::vector<std::size_t> idx;
        std::size_t round = 0;
        while (idx.size() < count) {
            bool any = false;
            for (int c = 0; c < class_count && idx.size() < count; ++c) {
                if (round < buckets[c].size()) {
                    idx.push_back(buckets[c][round]);
                    any = true;
                }
            }
            if (!any) break;
            ++round;
        }
        auto [ins, ys] = batch(idx);
        return DatasetT{std::move(ins), std::move(ys), class_count, split};
    }
};

namespace detail {

struct IdxImages {
    std::vector<std::uint8_t> pixels; // N * rows * cols
    std::size_t count = 0, rows = 0, cols = 0;
};

// Byte-level parsing lives in the .cpp; headers stay dtype-agnostic.
IdxImages read_idx_images(const std::string& path);
std::vector<std::uint8_t> read_idx_labels(const std::string& path);

struct CifarRecords {
    std::vector<std::uint8_t> bytes; // N records of 3073 bytes
    std::size_t count = 0;
};
CifarRecords read_cifar_batches(const std::vector<std::string>& paths);

} // namespace detail

void write_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels,
                      std::size_t count, std::size_t rows, std::size_t cols);
void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

// MNIST-style IDX pair -> [N x 1 x rows x cols] in [0,1].
template <typename T>
DatasetT<T> load_idx(const std::string& images_path, const std::string& labels_path,
                     const std::string& split = "train") {
    detail::IdxImages img = detail::read_idx_images(images_path);
    std::vector<std::uint8_t> lab = detail::read_idx_labels(labels_path);
    if (img.count != lab.size())
        throw DataError("idx: " + std::to_string(img.count) + " images but " +
                        std::to_string(lab.size()) + " labels");
    DatasetT<T> ds;
    ds.inputs = TensorT<T>(Shape{img.count, 1, img.rows, img.cols});
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        ds.inputs[i] = T(img.pixels[i]) / T(255);
    ds.labels.assign(lab.begin(), lab.end());
    int mx = 0;
    for (int y : ds.labels) mx = std::max(mx, y);
    ds.class_count = mx + 1;
    ds.split = split;
    return ds;
}

// CIFAR-10 binary batches -> [N x 3 x 32 x 32] in [0,1], labels in [0,10).
template <typename T>
DatasetT<T> load_cifar10(const std::vector<std::string>& paths,
                         const std::string& split = "train") {
    detail::CifarRecords rec = detail::read_cifar_batches(paths);
    constexpr std::size_t record_len = 3073;
    DatasetT<T> ds;
    ds.inputs = TensorT<T>(Shape{rec.count, 3, 32, 32});
    ds.labels.resize(rec.count);
    for (std::size_t n = 0; n < rec.count; ++n) {
        const std::uint8_t* r = rec.bytes.data() + n * record_len;
        if (r[0] > 9) throw DataError("cifar10: label byte " + std::to_string(r[0]) + " out of range");
        ds.labels[n] = r[0];
        for (std::size_t i = 0; i < 3072; ++i)
            ds.inputs[n * 3072 + i] = T(r[1 + i]) / T(255);
    }
    ds.class_count = 10;
    ds.split = split;
    return ds;
}

enum class SyntheticKind { blobs, spirals, digits };

SyntheticKind synthetic_kind_from(const std::string& name);

namespace detail {
// 5x7 glyph bitmaps for the synthetic digit classes.
extern const std::uint16_t digit_font[10][7];
} // namespace detail

// Gaussian clusters centred on a circle, mapped into the unit square.
template <typename T>
DatasetT<T> make_blobs(std::size_t n, int classes, double noise, std::uint64_t seed,
                       const std::string& split = "train") {
    if (classes < 1 || n < std::size_t(classes))
        throw DataError("blobs: need n >= classes >= 1");
    Rng rng(seed);
    DatasetT<T> ds;
    ds.inputs = TensorT<T>(Shape{n, 2});
    ds.labels.resize(n);
    ds.class_count = classes;
    ds.split = split;
    const double tau = 6.283185307179586476925286766559;
    for (std::size_t i = 0; i < n; ++i) {
        int c = int(i % std::size_t(classes));
        double angle = tau * double(c) / double(classes);
        double cx = 0.5 + 0.35 * std::cos(angle);
        double cy = 0.5 + 0.35 * std::sin(angle);
        double x = cx + noise * rng.normal();
        double y = cy + noise * rng.normal();
        ds.inputs[i * 2 + 0] = T(std::min(1.0, std::max(0.0, x)));
        ds.inputs[i * 2 + 1] = T(std::min(1.0, std::max(0.0, y)));
        ds.labels[i] = c;
    }
    return ds;
}

// Interleaved spiral arms, one arm per class, mapped into the unit square.
// One full turn per arm keeps the gap between adjacent windings large
// relative to the usual noise levels.
template <typename T>
DatasetT<T> make_spirals(std::size_t n, int classes, double noise, std::uint64_t seed,
                         const std::string& split = "train") {
    if (classes < 1 || n < std::size_t(classes))
        throw DataError("spirals: need n >= classes >= 1");
    Rng rng(seed);
    DatasetT<T> ds;
    ds.inputs = TensorT<T>(Shape{n, 2});
    ds.labels.resize(n);
    ds.class_count = classes;
    ds.split = split;
    const double tau = 6.283185307179586476925286766559;
    for (std::size_t i = 0; i < n; ++i) {
        int c = int(i % std::size_t(classes));
        double t = rng.uniform();
        double r = 0.06 + 0.42 * t;
        double angle = tau * t + tau * double(c) / double(classes);
        double x = 0.5 + r * std::cos(angle) + noise * rng.normal();
        double y = 0.5 + r * std::sin(angle) + noise * rng.normal();
        ds.inputs[i * 2 + 0] = T(std::min(1.0, std::max(0.0, x)));
        ds.inputs[i * 2 + 1] = T(std::min(1.0, std::max(0.0, y)));
        ds.labels[i] = c;
    }
    return ds;
}

// Renders the 10 glyphs onto a size x size grid with per-sample jitter and
// pixel noise; the raw bytes round-trip through the IDX format in tests and
// the image-classification acceptance runs.
std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>>
render_digit_bytes(std::size_t n, std::size_t size, double noise, std::uint64_t seed);

template <typename T>
DatasetT<T> make_digits(std::size_t n, std::size_t size, double noise, std::uint64_t seed,
                        const std::string& split = "train") {
    auto [pixels, labels] = render_digit_bytes(n, size, noise, seed);
    DatasetT<T> ds;
    ds.inputs = TensorT<T>(Shape{n, 1, size, size});
    for (std::size_t i = 0; i < pixels.size(); ++i) ds.inputs[i] = T(pixels[i]) / T(255);
    ds.labels.assign(labels.begin(), labels.end());
    ds.class_count = 10;
    ds.split = split;
    return ds;
}

template <typename T>
DatasetT<T> make_synthetic(SyntheticKind kind, std::size_t n, int classes, double noise,
                           std::uint64_t seed, const std::string& split = "train",
                           std::size_t image_size = 12) {
    switch (kind) {
        case SyntheticKind::blobs: return make_blobs<T>(n, classes, noise, seed, split);
        case SyntheticKind::spirals: return make_spirals<T>(n, classes, noise, seed, split);
        case SyntheticKind::digits: return make_digits<T>(n, image_size, noise, seed, split);
    }
    throw DataError("unknown synthetic kind");
}

} // namespace replearn
