#pragma once

// Shared gradient-check cases: every differentiable op and every model
// architecture, compared against central differences.

#include "finite_difference.hpp"

#include <sleeper/model.hpp>

#include <algorithm>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sleeper::testing {

using OpFn = std::function<Var(const std::vector<Var>&)>;
using InputGen = std::function<std::vector<Tensor>(Rng&)>;

struct OpCase {
    std::string name;
    InputGen inputs;
    OpFn fn;
    bool twice = true;
};

std::vector<Var> leaves_of(const std::vector<Tensor>& ts) {
    std::vector<Var> out;
    for (const auto& t : ts) out.push_back(Var::leaf(t));
    return out;
}

std::vector<Var> constants_of(const std::vector<Tensor>& ts) {
    std::vector<Var> out;
    for (const auto& t : ts) out.push_back(Var::constant(t));
    return out;
}

std::vector<Tensor> values_of(const std::vector<Var>& vs) {
    std::vector<Tensor> out;
    for (const auto& v : vs) out.push_back(v.value());
    return out;
}

Tensor output_probe(const OpCase& c, const std::vector<Tensor>& xs, Rng& rng) {
    NoGradGuard ng;
    return random_tensor(rng, c.fn(constants_of(xs)).shape());
}

double first_order_error(const OpCase& c, std::uint64_t seed) {
    Rng rng(seed);
    const auto xs = c.inputs(rng);
    const Var probe = Var::constant(output_probe(c, xs, rng));
    auto objective = [&](const std::vector<Var>& vs) { return dot(c.fn(vs), probe); };

    const auto leaves = leaves_of(xs);
    const auto analytic = values_of(grad(objective(leaves), leaves));
    const auto numeric = central_differences(
        [&](const std::vector<Tensor>& ts) {
            NoGradGuard ng;
            return objective(constants_of(ts)).item();
        },
        xs);
    return relative_error(analytic, numeric);
}

double second_order_error(const OpCase& c, std::uint64_t seed) {
    Rng rng(seed);
    const auto xs = c.inputs(rng);
    const Var probe = Var::constant(output_probe(c, xs, rng));
    std::vector<Var> directions;
    for (const auto& x : xs) directions.push_back(Var::constant(random_tensor(rng, x.shape())));

    // H(x) = sum_k <d objective / d x_k, v_k>
    auto h_of = [&](const std::vector<Var>& vs, bool create_graph) {
        const auto g = grad(dot(c.fn(vs), probe), vs, create_graph);
        Var h = dot(g[0], directions[0]);
        for (std::size_t k = 1; k < g.size(); ++k) h = add(h, dot(g[k], directions[k]));
        return h;
    };

    const auto leaves = leaves_of(xs);
    const auto analytic = values_of(grad(h_of(leaves, true), leaves));
    const auto numeric = central_differences(
        [&](const std::vector<Tensor>& ts) { return h_of(leaves_of(ts), false).item(); }, xs);
    return relative_error(analytic, numeric);
}

std::vector<OpCase> op_cases() {
    auto uniform = [](Shape s) { return [s](Rng& r) { return std::vector<Tensor>{random_tensor(r, s)}; }; };
    auto uniform2 = [](Shape a, Shape b) {
        return [a, b](Rng& r) { return std::vector<Tensor>{random_tensor(r, a), random_tensor(r, b)}; };
    };
    std::vector<OpCase> cases;
    cases.push_back({"add", uniform2({3, 4}, {3, 4}), [](auto& v) { return mul(add(v[0], v[1]), v[0]); }});
    cases.push_back({"sub", uniform2({5}, {5}), [](auto& v) { return mul(sub(v[0], v[1]), v[1]); }});
    cases.push_back({"mul", uniform2({2, 3}, {2, 3}), [](auto& v) { return mul(v[0], v[1]); }});
    cases.push_back({"div",
                     [](Rng& r) {
                         return std::vector<Tensor>{random_tensor(r, {4}), random_tensor(r, {4}, 0.5, 2.0)};
                     },
                     [](auto& v) { return div(v[0], v[1]); }});
    cases.push_back({"neg", uniform({6}), [](auto& v) { return mul(neg(v[0]), v[0]); }});
    cases.push_back({"scale", uniform({6}), [](auto& v) { return mul(scale(v[0], -2.5), v[0]); }});
    cases.push_back({"scale_by", uniform2({4}, {}), [](auto& v) { return scale_by(v[0], v[1]); }});
    cases.push_back({"sqrt", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {5}, 0.3, 2.0)}; },
                     [](auto& v) { return sqrt(v[0]); }});
    cases.push_back({"relu", [](Rng& r) { return std::vector<Tensor>{random_away_from_zero(r, {3, 5})}; },
                     [](auto& v) { return mul(relu(v[0]), v[0]); }});
    cases.push_back({"sum", uniform({3, 2}), [](auto& v) { return mul(sum(v[0]), sum(mul(v[0], v[0]))); }});
    cases.push_back({"mean", uniform({7}), [](auto& v) { return scale_by(v[0], mean(v[0])); }});
    cases.push_back({"dot", uniform2({5}, {5}), [](auto& v) { return scale_by(v[0], dot(v[0], v[1])); }});
    cases.push_back({"l2_norm", uniform({6}), [](auto& v) { return l2_norm(v[0]); }});
    cases.push_back({"broadcast", uniform2({}, {3, 2}),
                     [](auto& v) { return mul(broadcast(v[0], {3, 2}), v[1]); }});
    cases.push_back({"channel_broadcast", uniform2({3}, {2, 3, 2, 2}),
                     [](auto& v) { return mul(channel_broadcast(v[0], {2, 3, 2, 2}), v[1]); }});
    cases.push_back({"channel_sum", uniform({2, 3, 2, 2}),
                     [](auto& v) { return mul(channel_sum(v[0]), channel_sum(v[0])); }});
    cases.push_back({"row_sum", uniform({3, 4}), [](auto& v) { return mul(row_sum(v[0]), row_sum(v[0])); }});
    cases.push_back({"row_broadcast", uniform2({3}, {3, 4}),
                     [](auto& v) { return mul(row_broadcast(v[0], 4), v[1]); }});
    cases.push_back({"matmul", uniform2({3, 4}, {4, 2}), [](auto& v) { return matmul(v[0], v[1]); }});
    cases.push_back({"transpose", uniform({3, 4}),
                     [](auto& v) { return matmul(transpose(v[0]), v[0]); }});
    cases.push_back({"reshape", uniform({2, 6}),
                     [](auto& v) { return mul(reshape(v[0], {3, 4}), reshape(v[0], {3, 4})); }});
    cases.push_back({"conv2d", uniform2({2, 2, 5, 5}, {3, 2, 3, 3}), [](auto& v) { return conv2d(v[0], v[1], 1); }});
    cases.push_back({"conv2d_nopad", uniform2({1, 2, 5, 4}, {2, 2, 3, 3}),
                     [](auto& v) { return conv2d(v[0], v[1], 0); }});
    cases.push_back({"conv2d_input_grad", uniform2({2, 3, 4, 4}, {3, 2, 3, 3}),
                     [](auto& v) { return conv2d_input_grad(v[0], v[1], 1, {2, 2, 4, 4}); }});
    cases.push_back({"conv2d_weight_grad", uniform2({2, 2, 4, 4}, {2, 3, 4, 4}),
                     [](auto& v) { return conv2d_weight_grad(v[0], v[1], 1, {3, 2, 3, 3}); }});
    cases.push_back({"max_pool2d", [](Rng& r) { return std::vector<Tensor>{random_distinct(r, {2, 2, 4, 4})}; },
                     [](auto& v) {
                         const Var p = max_pool2d(v[0]);
                         return mul(p, p);
                     }});
    cases.push_back({"avg_pool2d", uniform({2, 2, 4, 6}),
                     [](auto& v) {
                         const Var p = avg_pool2d(v[0]);
                         return mul(p, p);
                     }});
    cases.push_back({"avg_unpool2d", uniform({1, 2, 2, 3}),
                     [](auto& v) {
                         const Var p = avg_unpool2d(v[0], {1, 2, 4, 6});
                         return mul(p, p);
                     }});
    cases.push_back({"pad2d", uniform({1, 2, 3, 3}),
                     [](auto& v) {
                         const Var p = pad2d(v[0], 2);
                         return mul(p, p);
                     }});
    cases.push_back({"crop2d", uniform({2, 1, 5, 5}),
                     [](auto& v) {
                         const Var p = crop2d(v[0], 1, 2, 3, 3);
                         return mul(p, p);
                     }});
    cases.push_back({"flip_horizontal", uniform({2, 2, 3, 4}),
                     [](auto& v) { return mul(flip_horizontal(v[0]), v[0]); }});
    cases.push_back({"slice_batch", uniform({4, 3}),
                     [](auto& v) {
                         const Var p = slice_batch(v[0], 1, 3);
                         return mul(p, p);
                     }});
    cases.push_back({"concat_batch", uniform2({1, 3}, {2, 3}),
                     [](auto& v) {
                         const Var p = concat_batch({v[0], v[1]});
                         return mul(p, p);
                     }});
    cases.push_back({"softmax", uniform({3, 4}), [](auto& v) { return softmax(v[0]); }});
    cases.push_back({"softmax_cross_entropy", uniform({4, 3}),
                     [](auto& v) {
                         static const std::vector<int> labels{0, 2, 1, 2};
                         return softmax_cross_entropy(v[0], labels);
                     }});
    cases.push_back({"clamp", [](Rng& r) { return std::vector<Tensor>{random_away_from_zero(r, {8})}; },
                     [](auto& v) { return mul(clamp(v[0], -0.5, 0.5), v[0]); }, /*twice=*/false});
    return cases;
}


ArchSpec tiny(const std::string& name, std::size_t channels = 2, std::size_t side = 8, std::size_t width = 2) {
    ArchSpec a;
    a.name = name;
    a.channels = channels;
    a.height = side;
    a.width = side;
    a.num_classes = 3;
    a.base_width = width;
    return a;
}

double loss_under(const Model& m, const Tensor& batch, const std::vector<int>& labels, const std::vector<Tensor>& params) {
    NoGradGuard ng;
    std::vector<Var> p;
    for (const auto& t : params) p.push_back(Var::constant(t));
    return softmax_cross_entropy(m.forward(Var::constant(batch), p), labels).item();
}

// Zero-initialized biases put dead units exactly on the ReLU kink; shift every
// parameter a little so the probe point is generic.
Model generic_point(Model m, Rng& rng) {
    for (auto& s : m.params().segments)
        for (auto& v : s.data()) v += rng.uniform(-0.05, 0.05);
    return m;
}

// True when every ReLU input and every max-pool runner-up gap is at least
// `tau` away from a kink, so central differences see a smooth function.
bool away_from_kinks(const Model& m, const Tensor& x, double tau) {
    const auto& layers = m.layers();
    for (std::size_t d = 1; d <= layers.size(); ++d) {
        const LayerKind k = layers[d - 1].kind;
        if (k == LayerKind::relu) {
            const Tensor pre = m.activations(x, d - 1);
            for (double v : pre.data())
                if (std::abs(v) < tau) return false;
        } else if (k == LayerKind::max_pool) {
            const Tensor r = m.activations(x, d - 1);
            const Shape& s = r.shape();
            for (std::size_t bc = 0; bc < s[0] * s[1]; ++bc)
                for (std::size_t i = 0; i < s[2]; i += 2)
                    for (std::size_t j = 0; j < s[3]; j += 2) {
                        std::vector<double> w;
                        for (std::size_t di = 0; di < 2; ++di)
                            for (std::size_t dj = 0; dj < 2; ++dj) w.push_back(r[(bc * s[2] + i + di) * s[3] + j + dj]);
                        std::sort(w.begin(), w.end());
                        if (w[3] > 0.0 && w[3] - w[2] < tau) return false;
                    }
        }
    }
    return true;
}

Tensor generic_input(const Model& m, Rng& rng, const Shape& shape) {
    for (int attempt = 0; attempt < 100; ++attempt) {
        Tensor x = random_tensor(rng, shape, 0.0, 1.0);
        if (away_from_kinks(m, x, 1e-4)) return x;
    }
    throw std::runtime_error("no kink-free probe input found");
}

/// Relative error of every parameter segment's gradient at a generic point,
/// worst segment first.
inline double arch_gradient_error(const ArchSpec& arch, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 77));
    const Model m = generic_point(build_model(arch, seed), rng);
    const Tensor x = generic_input(m, rng, {2, arch.channels, arch.height, arch.width});
    const std::vector<int> labels{static_cast<int>(rng.below(arch.num_classes)), static_cast<int>(rng.below(arch.num_classes))};
    const auto params = m.parameter_vars();
    const auto g = grad(softmax_cross_entropy(m.forward(Var::constant(x), params), labels), params);
    const auto fd = central_differences(
        [&](const std::vector<Tensor>& p) { return loss_under(m, x, labels, p); }, m.params().segments, 1e-5);
    double worst = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) worst = std::max(worst, relative_error({g[k].value()}, {fd[k]}, 1e-8));
    return worst;
}

} // namespace sleeper::testing
