#pragma once

// Hidden-trigger poison crafting by gradient alignment.
//
// Poisons are target-class training images with ℓ∞-bounded perturbations δ.
// δ is optimized so that the parameter gradient of the training loss on the
// poisons points in the same direction as the gradient of the adversarial
// loss (patched source images labelled as the target class).

#include <sleeper/data.hpp>
#include <sleeper/io.hpp>
#include <sleeper/model.hpp>
#include <sleeper/perturbation.hpp>
#include <sleeper/trainer.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sleeper {

class AttackError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Selection { grad_norm_target_class, grad_norm_all_classes, random };

inline std::string to_string(Selection s) {
    switch (s) {
    case Selection::grad_norm_target_class: return "grad-norm-target-class";
    case Selection::grad_norm_all_classes: return "grad-norm-all-classes";
    case Selection::random: return "random";
    }
    return "?";
}

inline Selection selection_from_string(const std::string& s) {
    if (s == "grad-norm-target-class") return Selection::grad_norm_target_class;
    if (s == "grad-norm-all-classes") return Selection::grad_norm_all_classes;
    if (s == "random") return Selection::random;
    throw std::invalid_argument("unknown selection '" + s + "'");
}

/// How patch locations are drawn for the adversarial gradient when the
/// patch placement is random.
enum class PatchSampling {
    fresh_per_refresh, // new location per source image every time the gradient is computed
    fixed_per_source,  // one location per source image for the whole crafting run
};

struct SignedAdamConfig {
    double lr0 = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double decay_factor = 0.1;
    std::vector<std::size_t> decay_points; // empty: ceil(3R/8), ceil(5R/8), ceil(7R/8)

    std::vector<std::size_t> resolved_decay_points(std::size_t steps) const {
        if (!decay_points.empty()) return decay_points;
        auto at = [steps](std::size_t num) { return (num * steps + 7) / 8; };
        return {at(3), at(5), at(7)};
    }

    /// Learning rate used at 1-based step r: decayed once for every decay point <= r.
    double lr_at(std::size_t r, std::size_t steps) const {
        double lr = lr0;
        for (auto d : resolved_decay_points(steps))
            if (r >= d) lr *= decay_factor;
        return lr;
    }
};

struct AttackConfig {
    int source_class = 0;
    int target_class = 1;
    std::size_t budget = 10;         // M
    double eps = 16.0 / 255.0;       // pixel units
    std::size_t steps = 100;         // R
    std::size_t retrain_factor = 2;  // T
    std::size_t ensemble_size = 1;   // S
    std::size_t adv_sample_count = 0; // K; 0 means the whole source pool
    TriggerPatch patch;
    Selection selection = Selection::grad_norm_target_class;
    SignedAdamConfig adam;
    PatchSampling patch_sampling = PatchSampling::fresh_per_refresh;
    bool adv_refresh_every_step = false;
    bool retrain_from_scratch = true;
    bool differentiable_augment = true;
    AugmentParams augment{2, 0.5};
    std::size_t craft_batch = 64;    // poisons per forward pass
    std::uint64_t seed = 0;

    void validate(const Dataset& d) const {
        const auto k = static_cast<int>(d.num_classes());
        if (source_class < 0 || source_class >= k || target_class < 0 || target_class >= k)
            throw AttackError("source/target class outside the dataset's classes");
        if (source_class == target_class) throw AttackError("source and target class must differ");
        if (budget == 0 || budget > d.size()) throw AttackError("budget must satisfy 0 < M <= N");
        if (!(eps > 0.0 && eps <= 1.0)) throw AttackError("eps must lie in (0, 1]");
        if (steps < 1) throw AttackError("steps R must be at least 1");
        if (ensemble_size < 1) throw AttackError("ensemble size S must be at least 1");
        if (craft_batch < 1) throw AttackError("craft batch must be positive");
        if (patch.pixels.rank() != 3) throw AttackError("trigger patch is not set");
    }
};

/// Steps r in 1..R after which the surrogates are retrained:
/// r mod floor(R / (T + 1)) == 0 and r != R.
inline std::vector<std::size_t> retrain_steps(std::size_t steps, std::size_t retrain_factor) {
    // A period of zero (T + 1 > R) degenerates to retraining after every step.
    const std::size_t period = std::max<std::size_t>(1, steps / (retrain_factor + 1));
    std::vector<std::size_t> out;
    for (std::size_t r = 1; r <= steps; ++r)
        if (r % period == 0 && r != steps) out.push_back(r);
    return out;
}

struct SurrogateEnsemble {
    std::vector<Model> models;
    std::size_t size() const noexcept { return models.size(); }
};

/// Trains S surrogates from scratch on clean data with distinct seeds.
inline SurrogateEnsemble pretrain_ensemble(const ArchSpec& arch, const Dataset& train_set, const TrainConfig& cfg,
                                           std::size_t size, std::uint64_t seed) {
    SurrogateEnsemble e;
    for (std::size_t s = 0; s < size; ++s) {
        TrainConfig c = cfg;
        c.seed = derive_seed(seed, 1000 + s);
        e.models.push_back(train(build_model(arch, derive_seed(seed, s)), train_set, nullptr, c).model);
    }
    return e;
}

// ---------------------------------------------------------------------------
// Gradients in parameter space

/// Per-segment parameter gradient of the mean cross-entropy over a batch.
inline std::vector<Tensor> parameter_gradient(const Model& model, const Tensor& batch, std::span<const int> labels) {
    const auto params = model.parameter_vars();
    const Var loss = softmax_cross_entropy(model.forward(Var::constant(batch), params), labels);
    std::vector<Tensor> out;
    for (const Var& g : grad(loss, params)) out.push_back(g.value());
    return out;
}

inline double squared_norm(const std::vector<Tensor>& g) {
    double s = 0.0;
    for (const auto& t : g)
        for (double v : t.data()) s += v * v;
    return s;
}

inline double cosine(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    double ab = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k)
        for (std::size_t i = 0; i < a[k].numel(); ++i) ab += a[k][i] * b[k][i];
    const double na = std::sqrt(squared_norm(a)), nb = std::sqrt(squared_norm(b));
    if (na == 0.0 || nb == 0.0) throw AttackError("cosine of a zero-norm gradient is undefined");
    return ab / (na * nb);
}

/// Candidate pool for the configured selection rule.
inline std::vector<std::size_t> poison_pool(const Dataset& d, const AttackConfig& cfg) {
    return cfg.selection == Selection::grad_norm_all_classes ? d.all_indices() : d.indices_of_class(cfg.target_class);
}

/// The M candidates with the largest clean training-gradient norm (averaged
/// over ensemble members), or a seeded random subset. Returned sorted.
inline std::vector<std::size_t> select_poisons(const SurrogateEnsemble& ensemble, const Dataset& d,
                                               const AttackConfig& cfg) {
    const auto pool = poison_pool(d, cfg);
    if (pool.size() < cfg.budget)
        throw AttackError("poison pool has " + std::to_string(pool.size()) + " candidates, budget is " +
                          std::to_string(cfg.budget));
    std::vector<std::size_t> chosen;
    if (cfg.selection == Selection::random) {
        Rng rng(derive_seed(cfg.seed, 0x5e1ec7));
        for (auto k : rng.sample_without_replacement(pool.size(), cfg.budget)) chosen.push_back(pool[k]);
    } else {
        if (ensemble.size() == 0) throw AttackError("gradient-norm selection needs at least one surrogate");
        std::vector<double> score(pool.size(), 0.0);
        for (std::size_t p = 0; p < pool.size(); ++p) {
            const std::size_t idx[1] = {pool[p]};
            const auto labels = d.labels(idx);
            for (const auto& m : ensemble.models) score[p] += std::sqrt(squared_norm(parameter_gradient(m, d.batch(idx), labels)));
            score[p] /= static_cast<double>(ensemble.size());
        }
        std::vector<std::size_t> order(pool.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return score[a] > score[b] || (score[a] == score[b] && pool[a] < pool[b]);
        });
        for (std::size_t k = 0; k < cfg.budget; ++k) chosen.push_back(pool[order[k]]);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

/// Patched source images with their placements resolved.
struct AdversarialBatch {
    std::vector<std::size_t> sources;
    Tensor images; // [K,C,H,W] with the patch applied
};

/// Draws K source images (without replacement) and applies the patch.
/// `placements`, when non-empty, fixes the patch origin per source index.
inline AdversarialBatch adversarial_batch(const Dataset& d, std::span<const std::size_t> source_pool,
                                          const TriggerPatch& patch, std::size_t k, Rng& rng,
                                          const std::vector<std::pair<std::size_t, std::size_t>>* placements = nullptr) {
    if (source_pool.empty()) throw AttackError("empty source pool");
    if (k == 0 || k > source_pool.size()) k = source_pool.size();
    AdversarialBatch out;
    std::vector<std::size_t> picks = rng.sample_without_replacement(source_pool.size(), k);
    std::sort(picks.begin(), picks.end());
    const Shape s = d.image_shape();
    out.images = Tensor(Shape{k, s[0], s[1], s[2]});
    const std::size_t per = shape_numel(s);
    for (std::size_t b = 0; b < k; ++b) {
        const std::size_t idx = source_pool[picks[b]];
        out.sources.push_back(idx);
        std::pair<std::size_t, std::size_t> at;
        if (placements && !placements->empty()) {
            at = (*placements)[picks[b]];
        } else {
            at = patch_origin(patch, s, rng);
        }
        const Tensor img = apply_patch_at(d[idx].image, patch, at.first, at.second);
        std::copy(img.data().begin(), img.data().end(), out.images.data().begin() + static_cast<std::ptrdiff_t>(b * per));
    }
    return out;
}

/// Mean parameter gradient of L(F(x + p; θ), y_t) over a patched batch.
inline std::vector<Tensor> adversarial_gradient(const Model& model, const Tensor& patched, int target_class,
                                                std::size_t chunk = 128) {
    const std::size_t k = patched.dim(0);
    std::vector<Tensor> total;
    for (std::size_t start = 0; start < k; start += chunk) {
        const std::size_t n = std::min(chunk, k - start);
        const Var part = slice_batch(Var::constant(patched), start, start + n);
        const std::vector<int> labels(n, target_class);
        auto g = parameter_gradient(model, part.value(), labels);
        const double w = static_cast<double>(n) / static_cast<double>(k);
        if (total.empty()) {
            for (auto& t : g)
                for (auto& v : t.data()) v *= w;
            total = std::move(g);
        } else {
            for (std::size_t s = 0; s < g.size(); ++s)
                for (std::size_t i = 0; i < g[s].numel(); ++i) total[s][i] += w * g[s][i];
        }
    }
    return total;
}

/// Convenience overload sampling K patched sources with `rng`.
inline std::vector<Tensor> adversarial_gradient(const Model& model, const Dataset& d,
                                                std::span<const std::size_t> source_pool, const TriggerPatch& patch,
                                                int target_class, std::size_t k, Rng& rng) {
    return adversarial_gradient(model, adversarial_batch(d, source_pool, patch, k, rng).images, target_class);
}

/// 1 - cos(train_grad, adv_grad). adv_grad is a constant; gradients flow only
/// through train_grad.
inline Var alignment_loss(std::span<const Var> train_grad, const std::vector<Tensor>& adv_grad) {
    if (train_grad.size() != adv_grad.size()) throw AttackError("alignment: parameter layouts differ");
    const double adv_norm = std::sqrt(squared_norm(adv_grad));
    Var inner, sq;
    for (std::size_t k = 0; k < train_grad.size(); ++k) {
        if (train_grad[k].shape() != adv_grad[k].shape()) throw AttackError("alignment: segment shapes differ");
        const Var a = Var::constant(adv_grad[k]);
        const Var d = dot(train_grad[k], a);
        const Var n = dot(train_grad[k], train_grad[k]);
        inner = inner.defined() ? add(inner, d) : d;
        sq = sq.defined() ? add(sq, n) : n;
    }
    if (adv_norm == 0.0 || sq.item() == 0.0) throw AttackError("alignment: zero-norm gradient, cosine undefined");
    const Var cos = scale(div(inner, sqrt(sq)), 1.0 / adv_norm);
    return sub(Var::scalar(1.0), cos);
}

// ---------------------------------------------------------------------------
// Signed Adam and projection

struct SignedAdamState {
    std::vector<Tensor> m, v;
    std::size_t t = 0;

    static SignedAdamState zeros_like(const std::vector<Tensor>& deltas) {
        SignedAdamState s;
        for (const auto& d : deltas) {
            s.m.emplace_back(d.shape());
            s.v.emplace_back(d.shape());
        }
        return s;
    }
};

/// Adam moments with bias correction, then δ <- δ - lr * sign(m̂ / (sqrt(v̂) + eps)).
/// `step_index` is 1-based.
inline void signed_adam_step(std::vector<Tensor>& deltas, const std::vector<Tensor>& grads, SignedAdamState& state,
                             std::size_t step_index, double lr, const SignedAdamConfig& cfg) {
    if (state.m.size() != deltas.size()) throw AttackError("signed Adam state does not match the deltas");
    state.t = step_index;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_index));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_index));
    for (std::size_t k = 0; k < deltas.size(); ++k) {
        auto d = deltas[k].data();
        auto g = grads[k].data();
        auto m = state.m[k].data();
        auto v = state.v[k].data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double dir = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
            const double sgn = dir > 0.0 ? 1.0 : (dir < 0.0 ? -1.0 : 0.0);
            d[i] -= lr * sgn;
        }
    }
}

/// Clamp to [-eps, eps], then to [-x, 1 - x] so that x + δ stays a valid image.
inline void project(std::vector<Tensor>& deltas, std::span<const Tensor> base_images, double eps) {
    for (std::size_t k = 0; k < deltas.size(); ++k) {
        if (deltas[k].shape() != base_images[k].shape()) throw ShapeError("project", {deltas[k].shape(), base_images[k].shape()});
        auto d = deltas[k].data();
        auto x = base_images[k].data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double bounded = std::clamp(d[i], -eps, eps);
            d[i] = std::clamp(bounded, -x[i], 1.0 - x[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Crafting

struct CraftStep {
    std::size_t step = 0;
    double alignment_loss = 0.0;
    double lr = 0.0;
    bool retrain = false;
};

struct CraftReport {
    std::vector<CraftStep> steps;
    std::vector<std::size_t> retrain_steps;
    std::vector<std::size_t> poison_indices;
};

struct CraftResult {
    PerturbationSet poisons;
    CraftReport report;
    SurrogateEnsemble ensemble; // surrogates as of the last retraining
};

struct CraftHooks {
    /// Called after every projected update with the 1-based step.
    std::function<void(std::size_t, const PerturbationSet&)> on_step;
};

namespace detail {

class AdversarialTargets {
public:
    AdversarialTargets(const Dataset& d, const AttackConfig& cfg)
        : data_(d), cfg_(cfg), pool_(d.indices_of_class(cfg.source_class)) {
        if (pool_.empty()) throw AttackError("no training images of source class " + std::to_string(cfg.source_class));
        if (cfg.patch_sampling == PatchSampling::fixed_per_source && cfg.patch.random_placement()) {
            Rng rng(derive_seed(cfg.seed, 0xf1eed));
            for (std::size_t i = 0; i < pool_.size(); ++i) placements_.push_back(patch_origin(cfg.patch, d.image_shape(), rng));
        }
    }

    std::vector<std::vector<Tensor>> compute(const SurrogateEnsemble& e, std::uint64_t refresh) const {
        Rng rng(derive_seed(cfg_.seed, 0xadd0000 + refresh));
        const auto batch = adversarial_batch(data_, pool_, cfg_.patch, cfg_.adv_sample_count, rng, &placements_);
        std::vector<std::vector<Tensor>> out;
        for (const auto& m : e.models) out.push_back(adversarial_gradient(m, batch.images, cfg_.target_class));
        return out;
    }

private:
    const Dataset& data_;
    const AttackConfig& cfg_;
    std::vector<std::size_t> pool_;
    std::vector<std::pair<std::size_t, std::size_t>> placements_;
};

} // namespace detail

/// Mean over ensemble members of the alignment loss for the given deltas,
/// with δ leaves in the graph.
inline Var ensemble_alignment(const SurrogateEnsemble& ensemble, const Dataset& d, std::span<const std::size_t> indices,
                              std::span<const Var> delta_vars, const std::vector<std::vector<Tensor>>& adv_grads,
                              const AttackConfig& cfg, Rng* augment_rng) {
    const std::size_t m = indices.size();
    const Shape s = d.image_shape();
    std::vector<AugmentChoice> choices;
    if (cfg.differentiable_augment && augment_rng) choices = draw_augment(m, cfg.augment, *augment_rng);
    Var total;
    for (std::size_t member = 0; member < ensemble.size(); ++member) {
        const Model& model = ensemble.models[member];
        const auto params = model.parameter_vars();
        std::vector<Var> train_grad;
        for (std::size_t start = 0; start < m; start += cfg.craft_batch) {
            const std::size_t n = std::min(cfg.craft_batch, m - start);
            std::vector<Var> rows;
            for (std::size_t b = start; b < start + n; ++b)
                rows.push_back(reshape(add(Var::constant(d[indices[b]].image), delta_vars[b]), {1, s[0], s[1], s[2]}));
            Var batch = concat_batch(rows);
            if (!choices.empty())
                batch = augment_with(batch, std::span<const AugmentChoice>(choices.data() + start, n), cfg.augment.pad);
            const std::span<const std::size_t> idx(indices.data() + start, n);
            const auto labels = d.labels(idx);
            const Var loss = scale(softmax_cross_entropy(model.forward(batch, params), labels),
                                   static_cast<double>(n) / static_cast<double>(m));
            auto g = grad(loss, params, /*create_graph=*/true);
            if (train_grad.empty()) {
                train_grad = std::move(g);
            } else {
                for (std::size_t k = 0; k < g.size(); ++k) train_grad[k] = add(train_grad[k], g[k]);
            }
        }
        const Var a = alignment_loss(train_grad, adv_grads[member]);
        total = total.defined() ? add(total, a) : a;
    }
    return scale(total, 1.0 / static_cast<double>(ensemble.size()));
}

/// Runs the crafting loop: R signed-Adam steps on δ with projection,
/// retraining the surrogates on the current poisoned data at the scheduled steps.
inline CraftResult craft(SurrogateEnsemble ensemble, const Dataset& d, const AttackConfig& cfg,
                         const TrainConfig& retrain_cfg, const CraftHooks& hooks = {}) {
    cfg.validate(d);
    if (ensemble.size() == 0) throw AttackError("craft needs at least one pretrained surrogate");

    CraftResult result;
    const auto indices = select_poisons(ensemble, d, cfg);
    const std::size_t m = indices.size();
    std::vector<Tensor> base;
    for (auto i : indices) base.push_back(d[i].image);

    // Uniform init in [-eps, eps], then projected.
    std::vector<Tensor> deltas;
    {
        Rng rng(derive_seed(cfg.seed, 0x1417));
        for (const auto& x : base) {
            Tensor t(x.shape());
            for (auto& v : t.data()) v = rng.uniform(-cfg.eps, cfg.eps);
            deltas.push_back(std::move(t));
        }
        project(deltas, base, cfg.eps);
    }

    detail::AdversarialTargets targets(d, cfg);
    std::uint64_t refresh = 0;
    auto adv = targets.compute(ensemble, refresh++);
    SignedAdamState state = SignedAdamState::zeros_like(deltas);
    const auto schedule = retrain_steps(cfg.steps, cfg.retrain_factor);
    Rng augment_rng(derive_seed(cfg.seed, 0xa06));

    auto current = [&] {
        PerturbationSet p;
        p.deltas = deltas;
        p.indices = indices;
        p.eps = cfg.eps;
        return p;
    };

    for (std::size_t r = 1; r <= cfg.steps; ++r) {
        if (cfg.adv_refresh_every_step && r > 1) adv = targets.compute(ensemble, refresh++);
        std::vector<Var> delta_vars;
        for (const auto& t : deltas) delta_vars.push_back(Var::leaf(t));
        const Var loss = ensemble_alignment(ensemble, d, indices, delta_vars, adv, cfg, &augment_rng);
        std::vector<Tensor> grads;
        for (const Var& g : grad(loss, delta_vars)) grads.push_back(g.value());

        const double lr = cfg.adam.lr_at(r, cfg.steps);
        signed_adam_step(deltas, grads, state, r, lr, cfg.adam);
        project(deltas, base, cfg.eps);

        const bool retrain_now = std::binary_search(schedule.begin(), schedule.end(), r);
        result.report.steps.push_back({r, loss.item(), lr, retrain_now});
        const PerturbationSet snapshot = current();
        snapshot.validate(d, 1e-12);
        if (hooks.on_step) hooks.on_step(r, snapshot);

        if (retrain_now) {
            result.report.retrain_steps.push_back(r);
            for (std::size_t s = 0; s < ensemble.size(); ++s) {
                TrainConfig c = retrain_cfg;
                c.seed = derive_seed(cfg.seed, 0x7e7a0000 + 64 * r + s);
                Model start = cfg.retrain_from_scratch
                                  ? build_model(ensemble.models[s].arch(), derive_seed(cfg.seed, 0x5eed0000 + 64 * r + s))
                                  : ensemble.models[s];
                ensemble.models[s] = train(std::move(start), d, &snapshot, c).model;
            }
            adv = targets.compute(ensemble, refresh++);
        }
    }

    result.poisons = current();
    result.report.poison_indices = indices;
    result.ensemble = std::move(ensemble);
    return result;
}

inline std::string craft_report_csv(const CraftReport& report) {
    std::ostringstream os;
    os << "step,alignment_loss,lr,retrain_flag\n";
    for (const auto& s : report.steps)
        os << s.step << ',' << format_double(s.alignment_loss) << ',' << format_double(s.lr) << ',' << (s.retrain ? 1 : 0)
           << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Serialization

inline json patch_to_json(const TriggerPatch& p) {
    json j = {{"shape", p.pixels.shape()}, {"pixels", p.pixels.storage()}};
    if (const auto* f = std::get_if<FixedPlacement>(&p.placement))
        j["placement"] = {{"kind", "fixed"}, {"row", f->row}, {"col", f->col}};
    else
        j["placement"] = {{"kind", "random"}};
    return j;
}

inline TriggerPatch patch_from_json(const json& j) {
    TriggerPatch p;
    p.pixels = Tensor(j.at("shape").get<Shape>(), j.at("pixels").get<std::vector<double>>());
    const auto& pl = j.at("placement");
    if (pl.at("kind") == "fixed")
        p.placement = FixedPlacement{pl.at("row").get<std::size_t>(), pl.at("col").get<std::size_t>()};
    else
        p.placement = RandomPlacement{};
    return p;
}

inline json attack_config_to_json(const AttackConfig& c) {
    return {{"source_class", c.source_class},
            {"target_class", c.target_class},
            {"budget", c.budget},
            {"eps", c.eps},
            {"steps", c.steps},
            {"retrain_factor", c.retrain_factor},
            {"ensemble_size", c.ensemble_size},
            {"adv_sample_count", c.adv_sample_count},
            {"selection", to_string(c.selection)},
            {"signed_adam",
             {{"lr0", c.adam.lr0},
              {"beta1", c.adam.beta1},
              {"beta2", c.adam.beta2},
              {"eps", c.adam.eps},
              {"decay_factor", c.adam.decay_factor},
              {"decay_points", c.adam.resolved_decay_points(c.steps)}}},
            {"patch_sampling", c.patch_sampling == PatchSampling::fixed_per_source ? "fixed-per-source" : "fresh-per-refresh"},
            {"adv_refresh_every_step", c.adv_refresh_every_step},
            {"retrain_from_scratch", c.retrain_from_scratch},
            {"differentiable_augment", c.differentiable_augment},
            {"augment_pad", c.augment.pad},
            {"craft_batch", c.craft_batch},
            {"seed", c.seed},
            {"patch", patch_to_json(c.patch)}};
}

/// Poison artifact: JSON header (config, dataset fingerprint, indices, eps,
/// retrain log) followed by the flattened deltas in index order.
inline void save_poisons(const std::filesystem::path& path, const PerturbationSet& p, const json& config,
                         const std::string& dataset_fingerprint, const std::vector<std::size_t>& retrain_log) {
    Container c;
    c.header = {{"kind", "poisons"},
                {"config", config},
                {"dataset_fingerprint", dataset_fingerprint},
                {"indices", p.indices},
                {"eps", p.eps},
                {"retrain_steps", retrain_log},
                {"delta_shape", p.deltas.empty() ? Shape{} : p.deltas[0].shape()}};
    for (const auto& t : p.deltas) c.values.insert(c.values.end(), t.data().begin(), t.data().end());
    write_container(path, c);
}

struct PoisonArtifact {
    PerturbationSet poisons;
    json header;
};

inline PoisonArtifact load_poisons(const std::filesystem::path& path) {
    Container c = read_container(path);
    if (c.header.value("kind", "") != "poisons") throw IoError("not a poison artifact: " + path.string());
    PoisonArtifact a;
    a.header = c.header;
    a.poisons.eps = c.header.at("eps").get<double>();
    a.poisons.indices = c.header.at("indices").get<std::vector<std::size_t>>();
    const Shape shape = c.header.at("delta_shape").get<Shape>();
    const std::size_t per = shape.empty() ? 0 : shape_numel(shape);
    if (c.values.size() != per * a.poisons.indices.size()) throw IoError("poison artifact payload size mismatch");
    for (std::size_t k = 0; k < a.poisons.indices.size(); ++k)
        a.poisons.deltas.emplace_back(shape, std::vector<double>(c.values.begin() + static_cast<std::ptrdiff_t>(k * per),
                                                                 c.values.begin() + static_cast<std::ptrdiff_t>((k + 1) * per)));
    return a;
}

} // namespace sleeper
