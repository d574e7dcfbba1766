#pragma once

// Victim training on poisoned data and the metric suite: clean and source
// validation accuracy, patched-source accuracy, attack success rate, and the
// per-epoch gradient cosine diagnostic.

#include <sleeper/attack.hpp>

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace sleeper {

class EvalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Attack success rate

/// Where the trigger goes at evaluation time. By default every image gets a
/// placement seeded by its own pixels, so the rate does not depend on the
/// order of the validation set. `resample` draws placements sequentially from
/// one stream instead.
struct PlacementPolicy {
    std::uint64_t seed = 0;
    bool resample = false;
};

struct PatchedSourceEval {
    double attack_success_rate = 0.0;
    double patched_source_acc = 0.0;
    std::size_t count = 0;
};

inline std::uint64_t image_seed(std::uint64_t seed, const Tensor& image) {
    ContentHash h;
    for (double v : image.data()) h.update(v);
    return derive_seed(seed, h.value());
}

/// Patches every source-class image of `val` (without touching `val`) and
/// classifies the batch.
inline PatchedSourceEval patched_source_eval(const Model& victim, const Dataset& val, const TriggerPatch& patch,
                                             int source_class, int target_class, const PlacementPolicy& placement,
                                             std::size_t chunk = 256) {
    const auto src = val.indices_of_class(source_class);
    if (src.empty()) throw EvalError("no images of source class " + std::to_string(source_class) + " in the val set");
    Rng stream(placement.seed);
    std::size_t hits = 0, correct = 0;
    const Shape s = val.image_shape();
    const std::size_t per = shape_numel(s);
    for (std::size_t start = 0; start < src.size(); start += chunk) {
        const std::size_t n = std::min(chunk, src.size() - start);
        Tensor batch(Shape{n, s[0], s[1], s[2]});
        for (std::size_t b = 0; b < n; ++b) {
            const Tensor& img = val[src[start + b]].image;
            Rng own(image_seed(placement.seed, img));
            const Tensor patched = apply_patch(img, patch, placement.resample ? stream : own);
            std::copy(patched.data().begin(), patched.data().end(),
                      batch.data().begin() + static_cast<std::ptrdiff_t>(b * per));
        }
        for (int y : predict(victim, batch)) {
            hits += y == target_class;
            correct += y == source_class;
        }
    }
    const double total = static_cast<double>(src.size());
    return {static_cast<double>(hits) / total, static_cast<double>(correct) / total, src.size()};
}

inline double attack_success_rate(const Model& victim, const Dataset& val, const TriggerPatch& patch, int source_class,
                                  int target_class, const PlacementPolicy& placement = {}) {
    return patched_source_eval(victim, val, patch, source_class, target_class, placement).attack_success_rate;
}

// ---------------------------------------------------------------------------
// Cosine diagnostic

/// cos(∇θ L(poisons), ∇θ L(patched sources, y_t)); nullopt if either gradient vanishes.
inline std::optional<double> gradient_cosine(const Model& model, const Tensor& poison_images,
                                             std::span<const int> poison_labels, const Tensor& adv_images,
                                             int target_class) {
    const auto g = parameter_gradient(model, poison_images, poison_labels);
    const auto a = adversarial_gradient(model, adv_images, target_class);
    if (squared_norm(g) == 0.0 || squared_norm(a) == 0.0) return std::nullopt;
    return std::clamp(cosine(g, a), -1.0, 1.0);
}

inline std::vector<std::optional<double>> cosine_per_epoch(std::span<const Model> checkpoints,
                                                           const Tensor& poison_images,
                                                           std::span<const int> poison_labels,
                                                           const Tensor& adv_images, int target_class) {
    std::vector<std::optional<double>> out;
    out.reserve(checkpoints.size());
    for (const auto& m : checkpoints) out.push_back(gradient_cosine(m, poison_images, poison_labels, adv_images, target_class));
    return out;
}

/// Fraction of epochs on which `a` is present and strictly above `b`.
inline double dominance(const std::vector<std::optional<double>>& a, const std::vector<std::optional<double>>& b) {
    if (a.size() != b.size() || a.empty()) throw EvalError("cosine curves differ in length or are empty");
    std::size_t wins = 0;
    for (std::size_t e = 0; e < a.size(); ++e) wins += a[e] && (!b[e] || *a[e] > *b[e]);
    return static_cast<double>(wins) / static_cast<double>(a.size());
}

inline std::string cosine_csv(const std::vector<std::optional<double>>& crafted,
                              const std::vector<std::optional<double>>& baseline) {
    std::ostringstream os;
    os << "epoch,cosine,baseline_cosine\n";
    for (std::size_t e = 0; e < crafted.size(); ++e) {
        os << e + 1 << ',';
        if (crafted[e]) os << format_double(*crafted[e]);
        os << ',';
        if (e < baseline.size() && baseline[e]) os << format_double(*baseline[e]);
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Full evaluation

struct EvalConfig {
    int source_class = 0;
    int target_class = 1;
    TriggerPatch patch;
    PlacementPolicy placement;
    bool cosine_diagnostic = false;
    // Patched training-set sources for the diagnostic's adversarial gradient; 0 = all.
    std::size_t cosine_adv_samples = 0;
};

struct VictimEval {
    std::uint64_t seed = 0;
    double clean_val_acc = 0.0;
    double poisoned_val_acc = 0.0;
    double clean_source_val_acc = 0.0;
    double poisoned_source_val_acc = 0.0;
    double clean_patched_source_val_acc = 0.0;
    double patched_source_val_acc = 0.0;
    double clean_attack_success_rate = 0.0;
    double attack_success_rate = 0.0;
    std::optional<std::vector<std::optional<double>>> per_epoch_cosine;
    std::optional<std::vector<std::optional<double>>> per_epoch_cosine_baseline;
};

struct Stat {
    double mean = 0.0;
    double stderr_ = 0.0;
};

inline Stat mean_stderr(const std::vector<double>& xs) {
    if (xs.empty()) throw EvalError("mean of an empty sample");
    Stat s;
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.stderr_ = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
    }
    return s;
}

struct EvalReport {
    std::vector<VictimEval> runs;

    static constexpr const char* kMetrics[] = {
        "clean_val_acc",           "poisoned_val_acc",         "clean_source_val_acc",
        "poisoned_source_val_acc", "clean_patched_source_val_acc", "patched_source_val_acc",
        "clean_attack_success_rate", "attack_success_rate"};

    static double metric(const VictimEval& r, std::string_view name) {
        if (name == "clean_val_acc") return r.clean_val_acc;
        if (name == "poisoned_val_acc") return r.poisoned_val_acc;
        if (name == "clean_source_val_acc") return r.clean_source_val_acc;
        if (name == "poisoned_source_val_acc") return r.poisoned_source_val_acc;
        if (name == "clean_patched_source_val_acc") return r.clean_patched_source_val_acc;
        if (name == "patched_source_val_acc") return r.patched_source_val_acc;
        if (name == "clean_attack_success_rate") return r.clean_attack_success_rate;
        if (name == "attack_success_rate") return r.attack_success_rate;
        throw EvalError("unknown metric " + std::string(name));
    }

    Stat stat(std::string_view name) const {
        std::vector<double> xs;
        for (const auto& r : runs) xs.push_back(metric(r, name));
        return mean_stderr(xs);
    }
};

inline json optional_curve_to_json(const std::vector<std::optional<double>>& c) {
    json a = json::array();
    for (const auto& v : c) a.push_back(v ? json(*v) : json(nullptr));
    return a;
}

inline std::vector<std::optional<double>> optional_curve_from_json(const json& a) {
    std::vector<std::optional<double>> c;
    for (const auto& v : a) c.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    return c;
}

inline json to_json(const EvalReport& r) {
    json runs = json::array();
    for (const auto& v : r.runs) {
        json j;
        j["seed"] = v.seed;
        for (const char* m : EvalReport::kMetrics) j[m] = EvalReport::metric(v, m);
        if (v.per_epoch_cosine) j["per_epoch_cosine"] = optional_curve_to_json(*v.per_epoch_cosine);
        if (v.per_epoch_cosine_baseline) j["per_epoch_cosine_baseline"] = optional_curve_to_json(*v.per_epoch_cosine_baseline);
        runs.push_back(j);
    }
    json summary = json::object();
    if (!r.runs.empty())
        for (const char* m : EvalReport::kMetrics) {
            const Stat s = r.stat(m);
            summary[m] = {{"mean", s.mean}, {"stderr", s.stderr_}};
        }
    return {{"runs", runs}, {"summary", summary}};
}

inline EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    for (const auto& v : j.at("runs")) {
        VictimEval e;
        e.seed = v.at("seed").get<std::uint64_t>();
        e.clean_val_acc = v.at("clean_val_acc").get<double>();
        e.poisoned_val_acc = v.at("poisoned_val_acc").get<double>();
        e.clean_source_val_acc = v.at("clean_source_val_acc").get<double>();
        e.poisoned_source_val_acc = v.at("poisoned_source_val_acc").get<double>();
        e.clean_patched_source_val_acc = v.at("clean_patched_source_val_acc").get<double>();
        e.patched_source_val_acc = v.at("patched_source_val_acc").get<double>();
        e.clean_attack_success_rate = v.at("clean_attack_success_rate").get<double>();
        e.attack_success_rate = v.at("attack_success_rate").get<double>();
        if (v.contains("per_epoch_cosine")) e.per_epoch_cosine = optional_curve_from_json(v["per_epoch_cosine"]);
        if (v.contains("per_epoch_cosine_baseline"))
            e.per_epoch_cosine_baseline = optional_curve_from_json(v["per_epoch_cosine_baseline"]);
        r.runs.push_back(std::move(e));
    }
    return r;
}

/// Human-readable table in percent, mean ± stderr over victim seeds.
inline std::string eval_table(const EvalReport& r) {
    const std::pair<const char*, const char*> rows[] = {
        {"Clean model val", "clean_val_acc"},
        {"Clean model source val", "clean_source_val_acc"},
        {"Clean model patched source val", "clean_patched_source_val_acc"},
        {"Clean model attack success rate", "clean_attack_success_rate"},
        {"Poisoned model val", "poisoned_val_acc"},
        {"Poisoned model source val", "poisoned_source_val_acc"},
        {"Poisoned model patched source val", "patched_source_val_acc"},
        {"Attack Success Rate", "attack_success_rate"},
    };
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    for (const auto& [label, key] : rows) {
        const Stat s = r.stat(key);
        os << std::left << std::setw(36) << label << std::right << std::setw(7) << 100.0 * s.mean << " ± "
           << 100.0 * s.stderr_ << '\n';
    }
    return os.str();
}

struct VictimSetup {
    ArchSpec arch;
    TrainConfig train;
};

inline std::uint64_t victim_model_seed(std::uint64_t seed) { return derive_seed(seed, 0x71c7100); }
inline std::uint64_t victim_train_seed(std::uint64_t seed) { return derive_seed(seed, 0x71c7101); }

/// Trains one clean and one poisoned victim per seed from the same
/// initialization and data order and measures both.
inline EvalReport full_eval(const Dataset& train_set, const Dataset& val, const PerturbationSet* perturbations,
                            const VictimSetup& victim, const EvalConfig& cfg, std::span<const std::uint64_t> seeds) {
    if (seeds.empty()) throw EvalError("full_eval needs at least one victim seed");
    if (val.indices_of_class(cfg.source_class).empty())
        throw EvalError("no images of source class " + std::to_string(cfg.source_class) + " in the val set");

    Tensor poison_images, clean_images, adv_images;
    std::vector<int> poison_labels;
    if (cfg.cosine_diagnostic) {
        if (!perturbations || perturbations->size() == 0) throw EvalError("cosine diagnostic needs poisons");
        const Dataset poisoned = perturbations->apply(train_set);
        poison_images = poisoned.batch(perturbations->indices);
        clean_images = train_set.batch(perturbations->indices);
        poison_labels = train_set.labels(perturbations->indices);
        Rng rng(derive_seed(cfg.placement.seed, 0xc05));
        adv_images = adversarial_batch(train_set, train_set.indices_of_class(cfg.source_class), cfg.patch,
                                       cfg.cosine_adv_samples, rng)
                         .images;
    }

    EvalReport report;
    for (const auto seed : seeds) {
        const Model init = build_model(victim.arch, victim_model_seed(seed));
        TrainConfig tc = victim.train;
        tc.seed = victim_train_seed(seed);

        VictimEval v;
        v.seed = seed;
        const Model clean = train(init, train_set, nullptr, tc).model;
        std::vector<Model> checkpoints;
        EpochCallback keep;
        if (cfg.cosine_diagnostic) keep = [&](std::size_t, const Model& m) { checkpoints.push_back(m); };
        const Model poisoned = train(init, train_set, perturbations, tc, nullptr, keep).model;

        const Accuracy ca = evaluate(clean, val), pa = evaluate(poisoned, val);
        const auto src = static_cast<std::size_t>(cfg.source_class);
        v.clean_val_acc = ca.overall;
        v.poisoned_val_acc = pa.overall;
        v.clean_source_val_acc = ca.per_class.at(src);
        v.poisoned_source_val_acc = pa.per_class.at(src);
        const auto ce = patched_source_eval(clean, val, cfg.patch, cfg.source_class, cfg.target_class, cfg.placement);
        const auto pe = patched_source_eval(poisoned, val, cfg.patch, cfg.source_class, cfg.target_class, cfg.placement);
        v.clean_patched_source_val_acc = ce.patched_source_acc;
        v.clean_attack_success_rate = ce.attack_success_rate;
        v.patched_source_val_acc = pe.patched_source_acc;
        v.attack_success_rate = pe.attack_success_rate;
        if (cfg.cosine_diagnostic) {
            v.per_epoch_cosine = cosine_per_epoch(checkpoints, poison_images, poison_labels, adv_images, cfg.target_class);
            v.per_epoch_cosine_baseline =
                cosine_per_epoch(checkpoints, clean_images, poison_labels, adv_images, cfg.target_class);
        }
        report.runs.push_back(std::move(v));
    }
    return report;
}

} // namespace sleeper
