#pragma once

// Small classifiers used as surrogates and victims. None of them contain
// batch-coupled layers, so each example's output depends on that example only.

#include <sleeper/io.hpp>
#include <sleeper/ops.hpp>
#include <sleeper/random.hpp>

#include <cmath>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sleeper {

class ModelError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ArchSpec {
    std::string name = "convnet-s"; // convnet-s | convnet-m | mlp
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t num_classes = 4;
    std::size_t base_width = 16;    // conv channels in the first block; mlp hidden width is 4x this
    std::vector<double> mean;       // per-channel normalization, defaults to 0.5
    std::vector<double> stddev;     // per-channel normalization, defaults to 0.25

    Shape input_shape() const { return {channels, height, width}; }
};

inline void to_json(json& j, const ArchSpec& a) {
    j = json{{"name", a.name},         {"channels", a.channels},     {"height", a.height}, {"width", a.width},
             {"num_classes", a.num_classes}, {"base_width", a.base_width}, {"mean", a.mean}, {"stddev", a.stddev}};
}

inline void from_json(const json& j, ArchSpec& a) {
    j.at("name").get_to(a.name);
    j.at("channels").get_to(a.channels);
    j.at("height").get_to(a.height);
    j.at("width").get_to(a.width);
    j.at("num_classes").get_to(a.num_classes);
    j.at("base_width").get_to(a.base_width);
    j.at("mean").get_to(a.mean);
    j.at("stddev").get_to(a.stddev);
}

/// Model parameters θ as named per-layer segments.
struct ParameterVector {
    std::vector<std::string> names;
    std::vector<Tensor> segments;

    std::size_t size() const noexcept { return segments.size(); }

    std::size_t total_dim() const {
        std::size_t n = 0;
        for (const auto& s : segments) n += s.numel();
        return n;
    }

    std::vector<Shape> shapes() const {
        std::vector<Shape> out;
        for (const auto& s : segments) out.push_back(s.shape());
        return out;
    }

    std::vector<double> flatten() const {
        std::vector<double> flat;
        flat.reserve(total_dim());
        for (const auto& s : segments) flat.insert(flat.end(), s.data().begin(), s.data().end());
        return flat;
    }

    /// Overwrites the segments from a flat vector laid out like flatten().
    void assign(std::span<const double> flat) {
        if (flat.size() != total_dim())
            throw ModelError("parameter vector length " + std::to_string(flat.size()) + " != " +
                             std::to_string(total_dim()));
        std::size_t offset = 0;
        for (auto& s : segments) {
            std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), s.numel(), s.data().begin());
            offset += s.numel();
        }
    }

    friend bool operator==(const ParameterVector&, const ParameterVector&) = default;
};

enum class LayerKind { normalize, conv, linear, relu, max_pool, flatten };

struct Layer {
    LayerKind kind;
    std::size_t weight = 0; // segment index for conv / linear
    std::size_t bias = 0;
    std::size_t pad = 0;
};

class Model {
public:
    Model(ArchSpec arch, std::uint64_t seed, std::vector<Layer> layers, ParameterVector params, std::size_t feature_tap)
        : arch_(std::move(arch)), seed_(seed), layers_(std::move(layers)), params_(std::move(params)),
          feature_tap_(feature_tap) {}

    const ArchSpec& arch() const noexcept { return arch_; }
    std::uint64_t seed() const noexcept { return seed_; }
    const ParameterVector& params() const noexcept { return params_; }
    ParameterVector& params() noexcept { return params_; }
    const std::vector<Layer>& layers() const noexcept { return layers_; }

    /// Output of layers_[feature_tap() - 1] feeds the classification head.
    std::size_t feature_tap() const noexcept { return feature_tap_; }

    /// Leaves wrapping the current parameters, in segment order.
    std::vector<Var> parameter_vars(bool requires_grad = true) const {
        std::vector<Var> out;
        for (const auto& s : params_.segments) out.push_back(Var::leaf(s, requires_grad));
        return out;
    }

    /// Logits for a [B,C,H,W] batch under explicit parameter nodes.
    Var forward(const Var& batch, std::span<const Var> params) const {
        return run(batch, params, layers_.size());
    }

    Var forward(const Var& batch) const {
        const auto p = parameter_vars(false);
        return forward(batch, p);
    }

    Tensor logits(const Tensor& batch) const {
        NoGradGuard ng;
        return forward(Var::constant(batch)).value();
    }

    /// Activations entering the classification head, flattened to [B, D].
    Var features(const Var& batch, std::span<const Var> params) const {
        return run(batch, params, feature_tap_);
    }

    Tensor penultimate_features(const Tensor& batch) const {
        NoGradGuard ng;
        const auto p = parameter_vars(false);
        return features(Var::constant(batch), p).value();
    }

    /// Activations after the first `depth` layers.
    Tensor activations(const Tensor& batch, std::size_t depth) const {
        if (depth > layers_.size())
            throw ModelError("feature tap " + std::to_string(depth) + " out of range (model has " +
                             std::to_string(layers_.size()) + " layers)");
        NoGradGuard ng;
        const auto p = parameter_vars(false);
        return run(Var::constant(batch), p, depth).value();
    }

private:
    Var run(const Var& batch, std::span<const Var> params, std::size_t depth) const {
        const Shape& s = batch.shape();
        if (s.size() != 4 || s[1] != arch_.channels || s[2] != arch_.height || s[3] != arch_.width)
            throw ShapeError("forward(" + arch_.name + ")", {s, Shape{0, arch_.channels, arch_.height, arch_.width}});
        if (params.size() != params_.size())
            throw ModelError("forward: expected " + std::to_string(params_.size()) + " parameter segments, got " +
                             std::to_string(params.size()));
        Var x = batch;
        for (std::size_t i = 0; i < depth; ++i) {
            const Layer& l = layers_[i];
            switch (l.kind) {
            case LayerKind::normalize: {
                Tensor inv(Shape{arch_.channels}), shift(Shape{arch_.channels});
                for (std::size_t c = 0; c < arch_.channels; ++c) {
                    inv[c] = 1.0 / arch_.stddev[c];
                    shift[c] = -arch_.mean[c] / arch_.stddev[c];
                }
                x = add(mul(x, channel_broadcast(Var::constant(inv), x.shape())),
                        channel_broadcast(Var::constant(shift), x.shape()));
                break;
            }
            case LayerKind::conv: {
                const Var y = conv2d(x, params[l.weight], l.pad);
                x = add(y, channel_broadcast(params[l.bias], y.shape()));
                break;
            }
            case LayerKind::linear: {
                const Var y = matmul(x, params[l.weight]);
                x = add(y, channel_broadcast(params[l.bias], y.shape()));
                break;
            }
            case LayerKind::relu: x = relu(x); break;
            case LayerKind::max_pool: x = max_pool2d(x); break;
            case LayerKind::flatten: x = reshape(x, {x.shape()[0], x.numel() / x.shape()[0]}); break;
            }
        }
        return x;
    }

    ArchSpec arch_;
    std::uint64_t seed_;
    std::vector<Layer> layers_;
    ParameterVector params_;
    std::size_t feature_tap_;
};

namespace detail {

class ModelBuilder {
public:
    ModelBuilder(const ArchSpec& arch, std::uint64_t seed) : arch_(arch), rng_(seed) {
        layers_.push_back({LayerKind::normalize});
    }

    void conv(std::size_t in, std::size_t out) {
        const std::size_t fan_in = in * 9;
        Layer l{LayerKind::conv};
        l.weight = add_segment("conv" + std::to_string(++convs_) + ".weight", kaiming({out, in, 3, 3}, fan_in));
        l.bias = add_segment("conv" + std::to_string(convs_) + ".bias", Tensor(Shape{out}));
        l.pad = 1;
        layers_.push_back(l);
    }
    void linear(std::size_t in, std::size_t out) {
        Layer l{LayerKind::linear};
        l.weight = add_segment("linear" + std::to_string(++linears_) + ".weight", kaiming({in, out}, in));
        l.bias = add_segment("linear" + std::to_string(linears_) + ".bias", Tensor(Shape{out}));
        layers_.push_back(l);
    }
    void push(LayerKind k) { layers_.push_back({k}); }
    void mark_features() { tap_ = layers_.size(); }

    Model finish(std::uint64_t seed) && { return Model(arch_, seed, std::move(layers_), std::move(params_), tap_); }

private:
    // Kaiming-uniform with ReLU gain: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
    Tensor kaiming(Shape shape, std::size_t fan_in) {
        Tensor t(std::move(shape));
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (auto& v : t.data()) v = rng_.uniform(-bound, bound);
        return t;
    }
    std::size_t add_segment(std::string name, Tensor t) {
        params_.names.push_back(std::move(name));
        params_.segments.push_back(std::move(t));
        return params_.segments.size() - 1;
    }

    ArchSpec arch_;
    Rng rng_;
    std::vector<Layer> layers_;
    ParameterVector params_;
    std::size_t tap_ = 0;
    int convs_ = 0, linears_ = 0;
};

} // namespace detail

/// Deterministically initialized model: Kaiming-uniform weights, zero biases.
inline Model build_model(ArchSpec arch, std::uint64_t seed) {
    if (arch.mean.empty()) arch.mean.assign(arch.channels, 0.5);
    if (arch.stddev.empty()) arch.stddev.assign(arch.channels, 0.25);
    if (arch.mean.size() != arch.channels || arch.stddev.size() != arch.channels)
        throw ModelError("normalization statistics must have one entry per channel");
    if (arch.num_classes < 2) throw ModelError("need at least two classes");

    detail::ModelBuilder b(arch, seed);
    const std::size_t w = arch.base_width;
    if (arch.name == "convnet-s" || arch.name == "convnet-m") {
        if (arch.height % 4 || arch.width % 4)
            throw ModelError(arch.name + " needs spatial extents divisible by 4");
        const std::size_t flat = 2 * w * (arch.height / 4) * (arch.width / 4);
        if (arch.name == "convnet-s") {
            b.conv(arch.channels, w);
            b.push(LayerKind::relu);
            b.push(LayerKind::max_pool);
            b.conv(w, 2 * w);
        } else {
            b.conv(arch.channels, w);
            b.push(LayerKind::relu);
            b.conv(w, w);
            b.push(LayerKind::relu);
            b.push(LayerKind::max_pool);
            b.conv(w, 2 * w);
            b.push(LayerKind::relu);
            b.conv(2 * w, 2 * w);
        }
        b.push(LayerKind::relu);
        b.push(LayerKind::max_pool);
        b.push(LayerKind::flatten);
        b.mark_features();
        b.linear(flat, arch.num_classes);
    } else if (arch.name == "mlp") {
        const std::size_t d = arch.channels * arch.height * arch.width;
        b.push(LayerKind::flatten);
        b.linear(d, 4 * w);
        b.push(LayerKind::relu);
        b.mark_features();
        b.linear(4 * w, arch.num_classes);
    } else {
        throw ModelError("unknown architecture '" + arch.name + "' (expected convnet-s, convnet-m or mlp)");
    }
    return std::move(b).finish(seed);
}

/// Checkpoint: JSON header (arch, seed, segment names and shapes) followed by
/// the flattened parameters.
inline void save_checkpoint(const std::filesystem::path& path, const Model& model) {
    Container c;
    c.header = {{"kind", "checkpoint"}, {"arch", model.arch()}, {"seed", model.seed()}};
    json segs = json::array();
    for (std::size_t i = 0; i < model.params().size(); ++i)
        segs.push_back({{"name", model.params().names[i]}, {"shape", model.params().segments[i].shape()}});
    c.header["segments"] = segs;
    c.values = model.params().flatten();
    write_container(path, c);
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.header.value("kind", "") != "checkpoint") throw IoError("not a checkpoint: " + path.string());
    Model m = build_model(c.header.at("arch").get<ArchSpec>(), c.header.at("seed").get<std::uint64_t>());
    const auto& segs = c.header.at("segments");
    if (segs.size() != m.params().size()) throw IoError("checkpoint segment count mismatch: " + path.string());
    for (std::size_t i = 0; i < segs.size(); ++i)
        if (segs[i].at("shape").get<Shape>() != m.params().segments[i].shape())
            throw IoError("checkpoint segment shape mismatch: " + segs[i].at("name").get<std::string>());
    m.params().assign(c.values);
    return m;
}

} // namespace sleeper
