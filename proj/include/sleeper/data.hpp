#pragma once

// Datasets, trigger patches and augmentation. Pixels live in raw [0, 1]
// space; normalization happens inside the model.

#include <sleeper/io.hpp>
#include <sleeper/ops.hpp>
#include <sleeper/random.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace sleeper {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Split { train, val };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "val"; }

struct LabeledExample {
    Tensor image; // [C,H,W]
    int label = 0;
    std::size_t index = 0;
};

class Dataset {
public:
    Dataset() = default;

    /// Takes ownership of `examples`; their indices are rewritten to 0..N-1.
    Dataset(std::vector<LabeledExample> examples, std::size_t num_classes, Split split)
        : examples_(std::move(examples)), num_classes_(num_classes), split_(split) {
        for (std::size_t i = 0; i < examples_.size(); ++i) {
            auto& e = examples_[i];
            e.index = i;
            if (e.label < 0 || static_cast<std::size_t>(e.label) >= num_classes_)
                throw DataError("example " + std::to_string(i) + " has label " + std::to_string(e.label) +
                                " outside [0, " + std::to_string(num_classes_) + ")");
            if (e.image.rank() != 3 || (i > 0 && e.image.shape() != examples_[0].image.shape()))
                throw DataError("example " + std::to_string(i) + " has image shape " + shape_str(e.image.shape()));
            for (double v : e.image.data())
                if (!(v >= 0.0 && v <= 1.0))
                    throw DataError("example " + std::to_string(i) + " has a pixel outside [0, 1]");
        }
    }

    std::size_t size() const noexcept { return examples_.size(); }
    bool empty() const noexcept { return examples_.empty(); }
    std::size_t num_classes() const noexcept { return num_classes_; }
    Split split() const noexcept { return split_; }
    const LabeledExample& operator[](std::size_t i) const { return examples_.at(i); }
    const std::vector<LabeledExample>& examples() const noexcept { return examples_; }
    Shape image_shape() const { return examples_.empty() ? Shape{} : examples_[0].image.shape(); }

    /// Stacks the selected images into [B,C,H,W].
    Tensor batch(std::span<const std::size_t> indices) const {
        const Shape s = image_shape();
        const std::size_t per = shape_numel(s);
        Tensor out(Shape{indices.size(), s[0], s[1], s[2]});
        for (std::size_t b = 0; b < indices.size(); ++b) {
            const auto& img = examples_.at(indices[b]).image;
            std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * per));
        }
        return out;
    }

    std::vector<int> labels(std::span<const std::size_t> indices) const {
        std::vector<int> out;
        out.reserve(indices.size());
        for (auto i : indices) out.push_back(examples_.at(i).label);
        return out;
    }

    std::vector<std::size_t> all_indices() const {
        std::vector<std::size_t> out(size());
        for (std::size_t i = 0; i < size(); ++i) out[i] = i;
        return out;
    }

    std::vector<std::size_t> indices_of_class(int label) const {
        std::vector<std::size_t> out;
        for (const auto& e : examples_)
            if (e.label == label) out.push_back(e.index);
        return out;
    }

    /// New dataset holding the given examples (in the given order), reindexed.
    Dataset subset(std::span<const std::size_t> indices) const {
        std::vector<LabeledExample> out;
        out.reserve(indices.size());
        for (auto i : indices) out.push_back(examples_.at(i));
        return Dataset(std::move(out), num_classes_, split_);
    }

    /// Copy with image `i` replaced (labels and indices untouched).
    Dataset with_image(std::size_t i, Tensor image) const {
        Dataset d = *this;
        d.examples_.at(i).image = std::move(image);
        return d;
    }

    /// Hash over labels and pixel bits.
    std::string fingerprint() const {
        ContentHash h;
        h.update_u64(num_classes_);
        for (const auto& e : examples_) {
            h.update_u64(static_cast<std::uint64_t>(e.label));
            for (double v : e.image.data()) h.update(v);
        }
        return h.hex();
    }

    std::vector<double> channel_mean() const { return channel_stat(false); }
    std::vector<double> channel_stddev() const { return channel_stat(true); }

private:
    std::vector<double> channel_stat(bool want_std) const {
        const Shape s = image_shape();
        std::vector<double> out(s.empty() ? 0 : s[0]);
        for (std::size_t c = 0; c < out.size(); ++c) {
            double sum = 0.0, sq = 0.0;
            std::size_t n = 0;
            for (const auto& e : examples_) {
                const std::size_t plane = s[1] * s[2];
                for (std::size_t p = 0; p < plane; ++p) {
                    const double v = e.image[c * plane + p];
                    sum += v;
                    sq += v * v;
                    ++n;
                }
            }
            const double mu = sum / static_cast<double>(n);
            out[c] = want_std ? std::sqrt(std::max(sq / static_cast<double>(n) - mu * mu, 1e-12)) : mu;
        }
        return out;
    }

    std::vector<LabeledExample> examples_;
    std::size_t num_classes_ = 0;
    Split split_ = Split::train;
};

struct DatasetPair {
    Dataset train;
    Dataset val;
};

// ---------------------------------------------------------------------------
// Synthetic class-conditional images

namespace detail {

inline double quantize_pixel(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

struct ClassStyle {
    double angle, frequency;
    int shape;
};

inline ClassStyle class_style(int k, std::size_t side) {
    ClassStyle s{};
    // Horizontal or vertical gratings and mirror-symmetric shapes, so that a
    // horizontal flip never turns one class into another.
    s.angle = (k % 2) * std::numbers::pi / 2.0;
    s.frequency = 2.0 * std::numbers::pi * (2.0 + 0.75 * static_cast<double>((k / 2) % 3)) / static_cast<double>(side);
    s.shape = k % 4;
    return s;
}

inline bool inside_shape(int shape, double di, double dj, double r) {
    switch (shape) {
    case 0: return std::abs(di) <= r && std::abs(dj) <= r;                                 // square
    case 1: return di * di + dj * dj <= r * r;                                             // disk
    case 2: return (std::abs(di) <= r * 0.35 || std::abs(dj) <= r * 0.35) && std::abs(di) <= r && std::abs(dj) <= r; // cross
    default: return (std::abs(di - dj) <= r * 0.45 || std::abs(di + dj) <= r * 0.45) && std::abs(di) <= r && std::abs(dj) <= r; // X
    }
}

} // namespace detail

/// Knobs of the synthetic generator. The class signal is carried by a
/// grating (orientation and frequency) and a foreground shape; colour is
/// random per image and carries no label information. The defaults keep the
/// cues faint on a mid-grey background, so a trigger at partial contrast is
/// salient without dominating clean predictions.
struct SyntheticStyle {
    double contrast_lo = 0.02, contrast_hi = 0.05;
    double shape_lo = 0.02, shape_hi = 0.05;
    double noise = 0.03;
    double background_lo = 0.45, background_hi = 0.55;
};

namespace detail {

inline Tensor synthetic_image(int label, int num_classes, std::size_t channels, std::size_t side,
                              const SyntheticStyle& st, Rng& rng) {
    const ClassStyle style = class_style(label, side);
    Tensor img(Shape{channels, side, side});
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double contrast = rng.uniform(st.contrast_lo, st.contrast_hi);
    const double radius = static_cast<double>(side) * rng.uniform(0.18, 0.28);
    const double ci = rng.uniform(radius, static_cast<double>(side) - 1.0 - radius);
    const double cj = rng.uniform(radius, static_cast<double>(side) - 1.0 - radius);
    const double ca = std::cos(style.angle), sa = std::sin(style.angle);
    std::vector<double> background(channels), fg(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        background[c] = rng.uniform(st.background_lo, st.background_hi);
        fg[c] = rng.uniform(st.shape_lo, st.shape_hi) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    }
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < side; ++i)
            for (std::size_t j = 0; j < side; ++j) {
                const double u = static_cast<double>(i) * ca + static_cast<double>(j) * sa;
                double v = background[c] + contrast * std::sin(style.frequency * u + phase);
                if (inside_shape(style.shape, static_cast<double>(i) - ci, static_cast<double>(j) - cj, radius))
                    v += fg[c];
                v += st.noise * rng.normal();
                img[(c * side + i) * side + j] = quantize_pixel(v);
            }
    return img;
}

} // namespace detail

/// Class-conditional textured images: each class has its own grating
/// orientation and frequency and foreground shape, plus noise.
/// Pixels are quantized to multiples of 1/255 so the record format round-trips.
inline DatasetPair gen_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t side, std::uint64_t seed,
                                 std::size_t val_per_class = 0, std::size_t channels = 3,
                                 const SyntheticStyle& style = {}) {
    if (side < 8) throw DataError("synthetic side must be at least 8, got " + std::to_string(side));
    if (per_class < 2) throw DataError("synthetic per_class must be at least 2, got " + std::to_string(per_class));
    if (num_classes < 2) throw DataError("synthetic data needs at least two classes");
    if (val_per_class == 0) val_per_class = std::max<std::size_t>(1, per_class * 2 / 5);

    auto make = [&](std::size_t count, std::uint64_t tag, Split split) {
        Rng rng(derive_seed(seed, tag));
        std::vector<LabeledExample> ex;
        for (std::size_t i = 0; i < count; ++i)
            for (std::size_t k = 0; k < num_classes; ++k) {
                const int label = static_cast<int>(k);
                ex.push_back({detail::synthetic_image(label, static_cast<int>(num_classes), channels, side, style, rng), label, 0});
            }
        return Dataset(std::move(ex), num_classes, split);
    };
    return {make(per_class, 1, Split::train), make(val_per_class, 2, Split::val)};
}

// ---------------------------------------------------------------------------
// Binary record format: 1 label byte followed by C*H*W pixel bytes (channel-major).

struct RecordGeometry {
    std::size_t channels = 3, height = 32, width = 32;
    std::size_t record_size() const { return 1 + channels * height * width; }
};

inline std::vector<LabeledExample> read_records(const std::filesystem::path& path, const RecordGeometry& g,
                                                std::size_t num_classes) {
    if (!std::filesystem::exists(path)) throw DataError("missing file: " + path.string());
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path.string());
    const auto bytes = std::filesystem::file_size(path);
    if (bytes % g.record_size() != 0)
        throw DataError("file " + path.string() + " has size " + std::to_string(bytes) +
                        ", not a multiple of the record size " + std::to_string(g.record_size()));
    const std::size_t n = bytes / g.record_size();
    std::vector<LabeledExample> out;
    out.reserve(n);
    std::vector<unsigned char> rec(g.record_size());
    for (std::size_t r = 0; r < n; ++r) {
        is.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
        if (!is) throw DataError("short read in " + path.string());
        if (rec[0] >= num_classes)
            throw DataError("record " + std::to_string(r) + " in " + path.string() + " has label " +
                            std::to_string(rec[0]));
        Tensor img(Shape{g.channels, g.height, g.width});
        for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>(rec[i + 1]) / 255.0;
        out.push_back({std::move(img), rec[0], r});
    }
    return out;
}

inline std::vector<unsigned char> encode_records(const Dataset& d) {
    std::vector<unsigned char> bytes;
    for (const auto& e : d.examples()) {
        bytes.push_back(static_cast<unsigned char>(e.label));
        for (double v : e.image.data()) bytes.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
    return bytes;
}

inline void write_records(const std::filesystem::path& path, const Dataset& d) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto bytes = encode_records(d);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// CIFAR-10 binary distribution: data_batch_1..5.bin and test_batch.bin.
inline DatasetPair load_cifar10(const std::filesystem::path& dir) {
    const RecordGeometry g{3, 32, 32};
    std::vector<LabeledExample> train;
    for (int i = 1; i <= 5; ++i) {
        auto part = read_records(dir / ("data_batch_" + std::to_string(i) + ".bin"), g, 10);
        std::move(part.begin(), part.end(), std::back_inserter(train));
    }
    auto val = read_records(dir / "test_batch.bin", g, 10);
    return {Dataset(std::move(train), 10, Split::train), Dataset(std::move(val), 10, Split::val)};
}

/// Writes train.bin / val.bin in the record layout plus meta.json.
inline void save_dataset_dir(const std::filesystem::path& dir, const DatasetPair& data, const json& extra = {}) {
    const Shape s = data.train.image_shape();
    write_records(dir / "train.bin", data.train);
    write_records(dir / "val.bin", data.val);
    json meta = {{"num_classes", data.train.num_classes()},
                 {"channels", s[0]},
                 {"height", s[1]},
                 {"width", s[2]},
                 {"train_size", data.train.size()},
                 {"val_size", data.val.size()}};
    if (!extra.is_null()) meta["source"] = extra;
    write_text(dir / "meta.json", meta.dump(2));
}

inline DatasetPair load_dataset_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "meta.json")) throw DataError("missing file: " + (dir / "meta.json").string());
    const json meta = json::parse(read_text(dir / "meta.json"));
    const RecordGeometry g{meta.at("channels").get<std::size_t>(), meta.at("height").get<std::size_t>(),
                           meta.at("width").get<std::size_t>()};
    const auto k = meta.at("num_classes").get<std::size_t>();
    return {Dataset(read_records(dir / "train.bin", g, k), k, Split::train),
            Dataset(read_records(dir / "val.bin", g, k), k, Split::val)};
}

// ---------------------------------------------------------------------------
// Trigger patches

struct FixedPlacement {
    std::size_t row = 0, col = 0;
};
struct RandomPlacement {};
using Placement = std::variant<FixedPlacement, RandomPlacement>;

struct TriggerPatch {
    Tensor pixels; // [C,h,w] in [0,1]
    Placement placement = RandomPlacement{};

    std::size_t height() const { return pixels.dim(1); }
    std::size_t width() const { return pixels.dim(2); }
    bool random_placement() const { return std::holds_alternative<RandomPlacement>(placement); }

    /// Seeded multicolour patch: every pixel channel is 0.5 ± contrast/2, so
    /// contrast 1 gives pure 0/1 channels.
    static TriggerPatch colorful(std::size_t channels, std::size_t h, std::size_t w, std::uint64_t seed,
                                 Placement placement = RandomPlacement{}, double contrast = 1.0) {
        if (!(contrast >= 0.0 && contrast <= 1.0)) throw DataError("patch contrast must lie in [0, 1]");
        Rng rng(seed);
        Tensor px(Shape{channels, h, w});
        for (auto& v : px.data()) v = 0.5 + ((rng.bernoulli(0.5) ? 1.0 : 0.0) - 0.5) * contrast;
        return {std::move(px), placement};
    }

    static FixedPlacement bottom_right(const Shape& image, std::size_t h, std::size_t w) {
        return {image.at(1) - h, image.at(2) - w};
    }
};

/// Top-left corner for one application of the patch.
inline std::pair<std::size_t, std::size_t> patch_origin(const TriggerPatch& patch, const Shape& image, Rng& rng) {
    const std::size_t h = patch.height(), w = patch.width();
    if (image.size() != 3 || patch.pixels.dim(0) != image[0] || h > image[1] || w > image[2])
        throw DataError("patch " + shape_str(patch.pixels.shape()) + " does not fit image " + shape_str(image));
    if (const auto* fixed = std::get_if<FixedPlacement>(&patch.placement)) {
        if (fixed->row + h > image[1] || fixed->col + w > image[2])
            throw DataError("fixed patch placement (" + std::to_string(fixed->row) + "," + std::to_string(fixed->col) +
                            ") out of bounds for image " + shape_str(image));
        return {fixed->row, fixed->col};
    }
    const std::size_t r = rng.below(image[1] - h + 1);
    const std::size_t c = rng.below(image[2] - w + 1);
    return {r, c};
}

inline Tensor apply_patch_at(const Tensor& image, const TriggerPatch& patch, std::size_t row, std::size_t col) {
    Tensor out = image;
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2), h = patch.height(), w = patch.width();
    if (row + h > H || col + w > W) throw DataError("patch placement out of bounds");
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) out[(c * H + row + i) * W + col + j] = patch.pixels[(c * h + i) * w + j];
    return out;
}

/// Opaque overwrite; a random placement draws a fresh location per call.
inline Tensor apply_patch(const Tensor& image, const TriggerPatch& patch, Rng& rng) {
    const auto [r, c] = patch_origin(patch, image.shape(), rng);
    return apply_patch_at(image, patch, r, c);
}

// ---------------------------------------------------------------------------
// Augmentation: horizontal flip then zero-pad and random crop back to size.

enum class AugmentMode { train_pipeline, differentiable };

struct AugmentParams {
    std::size_t pad = 4;
    double flip_prob = 0.5;
};

struct AugmentChoice {
    bool flip = false;
    std::size_t dy = 0, dx = 0; // crop offset into the padded image, in [0, 2*pad]
};

inline std::vector<AugmentChoice> draw_augment(std::size_t batch, const AugmentParams& p, Rng& rng) {
    std::vector<AugmentChoice> out(batch);
    for (auto& c : out) {
        c.flip = rng.bernoulli(p.flip_prob);
        c.dy = rng.below(2 * p.pad + 1);
        c.dx = rng.below(2 * p.pad + 1);
    }
    return out;
}

inline IndexMap augment_map(const Shape& s, std::span<const AugmentChoice> choices, std::size_t pad) {
    if (s.size() != 4 || choices.size() != s[0]) throw ShapeError("augment", {s});
    const std::size_t C = s[1], H = s[2], W = s[3];
    auto map = std::make_shared<std::vector<std::int64_t>>(shape_numel(s), -1);
    const auto ipad = static_cast<std::ptrdiff_t>(pad);
    for (std::size_t b = 0; b < s[0]; ++b) {
        const auto& ch = choices[b];
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + ch.dy) - ipad;
                    std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + ch.dx) - ipad;
                    if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(H) || sj >= static_cast<std::ptrdiff_t>(W))
                        continue;
                    if (ch.flip) sj = static_cast<std::ptrdiff_t>(W) - 1 - sj;
                    (*map)[((b * C + c) * H + i) * W + j] =
                        static_cast<std::int64_t>(((b * C + c) * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj));
                }
    }
    return map;
}

inline Var augment_with(const Var& batch, std::span<const AugmentChoice> choices, std::size_t pad) {
    return gather(batch, augment_map(batch.shape(), choices, pad), batch.shape(), "augment");
}

/// train_pipeline returns a constant; differentiable keeps the gather in the
/// graph so gradients reach the batch.
inline Var augment(const Var& batch, AugmentMode mode, const AugmentParams& p, Rng& rng) {
    const auto choices = draw_augment(batch.shape().at(0), p, rng);
    if (mode == AugmentMode::train_pipeline) {
        NoGradGuard ng;
        return augment_with(batch, choices, p.pad).detach();
    }
    return augment_with(batch, choices, p.pad);
}

inline Tensor augment(const Tensor& batch, const AugmentParams& p, Rng& rng) {
    return augment(Var::constant(batch), AugmentMode::train_pipeline, p, rng).value();
}

} // namespace sleeper
