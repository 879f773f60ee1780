#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <vector>

#include "unikd/common.hpp"
#include "unikd/tensor.hpp"

namespace unikd {

struct LabeledBatch {
    Tensor images;            // B x 3 x H x W
    std::vector<int> labels;  // each in [0, C)
};

enum class DatasetKind { synthetic, cifar_binary };

struct DatasetSpec {
    DatasetKind kind = DatasetKind::synthetic;
    int class_count = 2;
    int input_hw = 32;
    int train_size = 1000;
    int val_size = 200;
    std::uint64_t seed = 0;
    double noise_scale = 0.1;            // synthetic only
    bool cifar10_layout = false;         // 1 label byte instead of coarse+fine
    std::array<double, 3> norm_mean{0.0, 0.0, 0.0};
    std::array<double, 3> norm_std{1.0, 1.0, 1.0};

    void validate() const {
        UNIKD_CHECK(class_count >= 2, "DatasetSpec: class_count must be >= 2");
        UNIKD_CHECK(train_size > 0 && val_size > 0, "DatasetSpec: split sizes must be positive");
        UNIKD_CHECK(input_hw >= 4, "DatasetSpec: input size too small");
        for (double s : norm_std) UNIKD_CHECK(s > 0.0, "DatasetSpec: norm std must be positive");
    }
};

// In-memory dataset; images stored raw in [0,1], pre-normalization.
struct Dataset {
    int input_hw = 0;
    int class_count = 0;
    std::vector<std::vector<double>> images;  // each 3*H*W, row-major per plane
    std::vector<int> labels;

    std::int64_t size() const { return static_cast<std::int64_t>(images.size()); }
};

namespace detail {

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a + 0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

// Smooth per-class template: a midtone base plus a few colored blobs.
inline std::vector<double> class_template(std::uint64_t seed, int cls, int hw) {
    Rng rng(mix64(seed, 0x7e3a1000u + static_cast<std::uint64_t>(cls)));
    std::vector<double> img(static_cast<size_t>(3) * hw * hw, 0.5);
    const int blobs = 3;
    for (int b = 0; b < blobs; ++b) {
        const double cx = rng.uniform(0.2, 0.8) * hw;
        const double cy = rng.uniform(0.2, 0.8) * hw;
        const double r = rng.uniform(0.15, 0.35) * hw;
        std::array<double, 3> amp{rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45),
                                  rng.uniform(-0.45, 0.45)};
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < hw; ++i)
                for (int j = 0; j < hw; ++j) {
                    const double d2 = (i - cy) * (i - cy) + (j - cx) * (j - cx);
                    img[static_cast<size_t>((c * hw + i) * hw + j)] +=
                        amp[static_cast<size_t>(c)] * std::exp(-d2 / (2.0 * r * r));
                }
    }
    for (double& v : img) v = std::clamp(v, 0.05, 0.95);
    return img;
}

}  // namespace detail

// Deterministic class-conditioned blob data; labels round-robin.
// split_id 0 = train, 1 = val.
inline Dataset synth_generate(const DatasetSpec& spec, int split_id = 0) {
    spec.validate();
    UNIKD_CHECK(spec.kind == DatasetKind::synthetic, "synth_generate: wrong dataset kind");
    const int n = split_id == 0 ? spec.train_size : spec.val_size;
    const int hw = spec.input_hw;
    Dataset ds;
    ds.input_hw = hw;
    ds.class_count = spec.class_count;
    std::vector<std::vector<double>> templates;
    for (int c = 0; c < spec.class_count; ++c)
        templates.push_back(detail::class_template(spec.seed, c, hw));
    ds.images.reserve(static_cast<size_t>(n));
    ds.labels.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int cls = i % spec.class_count;
        Rng rng(detail::mix64(spec.seed, detail::mix64(static_cast<std::uint64_t>(split_id) + 1,
                                                       static_cast<std::uint64_t>(i))));
        std::vector<double> img = templates[static_cast<size_t>(cls)];
        if (spec.noise_scale > 0.0) {
            for (double& v : img) v = std::clamp(v + spec.noise_scale * rng.normal(), 0.0, 1.0);
        }
        ds.images.push_back(std::move(img));
        ds.labels.push_back(cls);
    }
    return ds;
}

// Bit-exact CIFAR binary reader. CIFAR-100 records are 3074 bytes
// (coarse label, fine label, 3072 pixels R-plane G-plane B-plane); the
// CIFAR-10 layout has a single label byte and 3073-byte records.
inline Dataset cifar_load(const std::string& path, const DatasetSpec& spec) {
    spec.validate();
    UNIKD_CHECK(spec.kind == DatasetKind::cifar_binary, "cifar_load: wrong dataset kind");
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cifar_load: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    const size_t record = spec.cifar10_layout ? 3073 : 3074;
    if (bytes.size() % record != 0) {
        throw FormatError(detail::concat("cifar_load: file length ", bytes.size(),
                                         " is not a multiple of the record size ", record));
    }
    Dataset ds;
    ds.input_hw = 32;
    ds.class_count = spec.class_count;
    const size_t n = bytes.size() / record;
    for (size_t r = 0; r < n; ++r) {
        const unsigned char* rec = bytes.data() + r * record;
        const int label = spec.cifar10_layout ? rec[0] : rec[1];  // fine label
        if (label >= spec.class_count) {
            throw FormatError(detail::concat("cifar_load: label ", label, " out of range at record ",
                                             r));
        }
        const unsigned char* pix = rec + (spec.cifar10_layout ? 1 : 2);
        std::vector<double> img(3072);
        for (size_t i = 0; i < 3072; ++i) img[i] = static_cast<double>(pix[i]) / 255.0;
        ds.images.push_back(std::move(img));
        ds.labels.push_back(label);
    }
    return ds;
}

// Seeded batch sequencer. Iteration order is a pure function of
// (seed, epoch); augmentation draws come from the same sequencer stream.
class Loader {
public:
    Loader(const Dataset* ds, const DatasetSpec& spec, int batch_size, std::uint64_t seed,
           bool shuffle, bool augment = false)
        : ds_(ds), spec_(spec), batch_size_(batch_size), seed_(seed), shuffle_(shuffle),
          augment_(augment) {
        UNIKD_CHECK(batch_size >= 1, "Loader: batch_size must be >= 1");
    }

    std::int64_t dataset_size() const { return ds_->size(); }
    int batches_per_epoch() const {
        return static_cast<int>((ds_->size() + batch_size_ - 1) / batch_size_);
    }

    // Materializes all batches of one epoch; the final partial batch is kept.
    std::vector<LabeledBatch> epoch(int epoch_index) const {
        const std::int64_t n = ds_->size();
        std::vector<std::int64_t> order(static_cast<size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        Rng rng(detail::mix64(seed_, static_cast<std::uint64_t>(epoch_index)));
        if (shuffle_) std::shuffle(order.begin(), order.end(), rng.engine());
        std::vector<LabeledBatch> out;
        const int hw = ds_->input_hw;
        for (std::int64_t start = 0; start < n; start += batch_size_) {
            const int bs = static_cast<int>(std::min<std::int64_t>(batch_size_, n - start));
            LabeledBatch batch;
            batch.images = Tensor({bs, 3, hw, hw});
            batch.labels.resize(static_cast<size_t>(bs));
            for (int b = 0; b < bs; ++b) {
                const auto idx = static_cast<size_t>(order[static_cast<size_t>(start + b)]);
                batch.labels[static_cast<size_t>(b)] = ds_->labels[idx];
                write_image(batch.images, b, ds_->images[idx], rng);
            }
            out.push_back(std::move(batch));
        }
        return out;
    }

private:
    void write_image(Tensor& dst, int b, const std::vector<double>& src, Rng& rng) const {
        const int hw = ds_->input_hw;
        int dx = 0, dy = 0;
        bool flip = false;
        if (augment_) {
            dx = rng.uniform_int(-4, 4);
            dy = rng.uniform_int(-4, 4);
            flip = rng.uniform_int(0, 1) == 1;
        }
        for (int c = 0; c < 3; ++c) {
            const double mean = spec_.norm_mean[static_cast<size_t>(c)];
            const double inv_std = 1.0 / spec_.norm_std[static_cast<size_t>(c)];
            for (int i = 0; i < hw; ++i)
                for (int j = 0; j < hw; ++j) {
                    const int si = i + dy;
                    int sj = flip ? hw - 1 - j : j;
                    sj += dx;
                    double v = 0.0;  // zero padding outside the crop window
                    if (si >= 0 && si < hw && sj >= 0 && sj < hw) {
                        v = src[static_cast<size_t>((c * hw + si) * hw + sj)];
                    }
                    dst.at(b, c, i, j) = (v - mean) * inv_std;
                }
        }
    }

    const Dataset* ds_;
    DatasetSpec spec_;
    int batch_size_;
    std::uint64_t seed_;
    bool shuffle_;
    bool augment_;
};

inline Loader make_loader(const Dataset& ds, const DatasetSpec& spec, int batch_size,
                          std::uint64_t seed, bool shuffle, bool augment = false) {
    return Loader(&ds, spec, batch_size, seed, shuffle, augment);
}

// Channel means/stds of a raw dataset, for filling DatasetSpec normalization.
inline std::pair<std::array<double, 3>, std::array<double, 3>> channel_stats(const Dataset& ds) {
    std::array<double, 3> mean{}, stddev{};
    const size_t plane = static_cast<size_t>(ds.input_hw) * ds.input_hw;
    for (int c = 0; c < 3; ++c) {
        double s = 0.0, s2 = 0.0;
        std::int64_t n = 0;
        for (const auto& img : ds.images) {
            for (size_t i = 0; i < plane; ++i) {
                const double v = img[static_cast<size_t>(c) * plane + i];
                s += v;
                s2 += v * v;
                ++n;
            }
        }
        mean[static_cast<size_t>(c)] = s / static_cast<double>(n);
        const double var = std::max(1e-12, s2 / static_cast<double>(n) -
                                               mean[static_cast<size_t>(c)] *
                                                   mean[static_cast<size_t>(c)]);
        stddev[static_cast<size_t>(c)] = std::sqrt(var);
    }
    return {mean, stddev};
}

}  // namespace unikd
